// Command-line front end: corpus generation, sync-expert pretraining,
// training, rendering, pose control, evaluation and the motion heatmap.
//
// Exit codes: 0 success, 1 invalid configuration, arguments or files,
// 2 numerical abort during training.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "s2l/error.hpp"
#include "s2l/metrics.hpp"
#include "s2l/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace s2l;

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
};

struct RunConfig {
  synth::SceneConfig scene;
  pipeline::TrainConfig train;
  std::uint64_t digest = 0;

  json stanza() const { return pipeline::reproducibility(train.seed, digest); }
};

// Config file: {"scene": {...}, "train": {...}}; both sections optional.
// --seed replaces train.seed, which also seeds corpus generation.
RunConfig load_run_config(const CommonOptions& opt) {
  json j = json::object();
  if (!opt.config.empty()) {
    std::ifstream f(opt.config);
    if (!f) throw IoError("cannot open config " + opt.config);
    try {
      j = json::parse(f);
    } catch (const json::exception& e) {
      throw ConfigError(opt.config + ": " + e.what());
    }
    if (!j.is_object()) throw ConfigError(opt.config + ": top level must be an object");
    for (const auto& [key, _] : j.items())
      if (key != "scene" && key != "train") throw ConfigError(opt.config + ": unknown section " + key);
  }
  RunConfig rc;
  try {
    if (j.contains("scene")) rc.scene = j.at("scene").get<synth::SceneConfig>();
    if (j.contains("train")) rc.train = j.at("train").get<pipeline::TrainConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(opt.config + ": " + e.what());
  }
  if (opt.seed) rc.train.seed = *opt.seed;
  rc.scene.validate();
  rc.train.validate();
  const std::string text = json{{"scene", rc.scene}, {"train", rc.train}}.dump();
  rc.digest = pipeline::fnv1a({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
  return rc;
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << j.dump(1) << '\n';
  if (!f) throw IoError("write failed for " + path.string());
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

std::string frame_name(const char* prefix, int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%04d.png", prefix, index);
  return buf;
}

synth::Corpus open_corpus(const std::string& flag, const pipeline::TrainConfig& cfg) {
  const std::string dir = flag.empty() ? cfg.corpus : flag;
  if (dir.empty()) throw ConfigError("no corpus: pass --corpus or set train.corpus");
  if (!fs::is_directory(dir)) throw IoError("corpus directory " + dir + " does not exist");
  return synth::load_corpus(dir);
}

// Frame range "a:b" (half-open); empty selects the held-out split.
std::pair<int, int> frame_range(const std::string& spec, const synth::Corpus& corpus) {
  const int n = static_cast<int>(corpus.frames.size());
  if (spec.empty()) return {corpus.train_count, n};
  const auto colon = spec.find(':');
  if (colon == std::string::npos) throw ConfigError("--frames expects a:b, got " + spec);
  int a = 0, b = 0;
  try {
    a = std::stoi(spec.substr(0, colon));
    b = std::stoi(spec.substr(colon + 1));
  } catch (const std::exception&) {
    throw ConfigError("--frames expects integers, got " + spec);
  }
  if (a < 0 || b > n || a >= b) throw ConfigError("--frames " + spec + " outside [0, " + std::to_string(n) + ")");
  return {a, b};
}

// Speech features for frames [a, b): the corpus's own, or another corpus's
// (cross-signal driving).
std::vector<synth::SpeechFeature> features_for(const synth::Corpus& corpus, const std::string& audio_dir, int a,
                                               int b) {
  std::optional<synth::Corpus> other;
  if (!audio_dir.empty()) other = synth::load_corpus(audio_dir);
  const synth::Corpus& src = other ? *other : corpus;
  if (b > static_cast<int>(src.frames.size())) throw ConfigError("audio corpus has too few frames");
  std::vector<synth::SpeechFeature> out;
  for (int i = a; i < b; ++i) out.push_back(src.frames[static_cast<std::size_t>(i)].feature);
  return out;
}

// ---------------------------------------------------------------------------

struct GenData {
  fs::path out;
};

void run_gen_data(const CommonOptions& common, const GenData& o) {
  const RunConfig rc = load_run_config(common);
  const fs::path out = o.out.empty() ? fs::path(rc.train.corpus) : o.out;
  if (out.empty()) throw ConfigError("gen-data needs --out or train.corpus");
  const synth::Corpus corpus = synth::generate_corpus(rc.scene, rc.train.seed);
  synth::write_corpus(corpus, out, rc.stanza());
  std::cout << "wrote " << corpus.frames.size() << " frames to " << out.string() << '\n';
}

struct PretrainSync {
  std::string corpus;
  fs::path out = "expert.s2l";
};

void run_pretrain_sync(const CommonOptions& common, const PretrainSync& o) {
  const RunConfig rc = load_run_config(common);
  const synth::Corpus corpus = open_corpus(o.corpus, rc.train);
  sync::PretrainReport report;
  const sync::ExpertParams expert = pipeline::pretrain_sync(rc.train, corpus, &report);
  if (o.out.has_parent_path()) make_dir(o.out.parent_path());
  pipeline::save_expert(o.out, expert);

  const pipeline::CanonicalView view = pipeline::make_view(corpus, rc.train.mouth_margin);
  const auto held_out = pipeline::canonical_mouth_dataset(corpus, view, pipeline::initial_depth(corpus),
                                                          corpus.train_count, static_cast<int>(corpus.frames.size()));
  json manifest = {{"expert", o.out.string()}, {"epoch_loss", report.epoch_loss}};
  try {
    const sync::MarginReport m = sync::evaluate_margin(expert, held_out, rc.train.pretrain, rc.train.seed);
    manifest["held_out"] = {{"positive_cos", m.positive_cos}, {"negative_cos", m.negative_cos}, {"margin", m.margin}};
    manifest["held_out"]["sync_confidence"] = sync::sync_confidence(expert, held_out.mouths, held_out.features);
  } catch (const ConfigError& e) {
    manifest["held_out"] = {{"skipped", e.what()}};
  }
  manifest["reproducibility"] = rc.stanza();
  write_json(fs::path(o.out.string() + ".json"), manifest);
  std::cout << "expert written to " << o.out.string() << '\n';
}

struct Train {
  std::string corpus;
  std::string expert;
  std::string resume;
  fs::path out = "run";
};

void run_train(const CommonOptions& common, const Train& o) {
  const RunConfig rc = load_run_config(common);
  const synth::Corpus corpus = open_corpus(o.corpus, rc.train);
  make_dir(o.out);

  pipeline::Checkpoint ck;
  if (!o.resume.empty()) {
    // The checkpoint keeps its own configuration; only the step budget moves.
    ck = pipeline::load_checkpoint(o.resume);
    ck.config.iterations = rc.train.iterations;
  } else {
    sync::ExpertParams expert;
    if (!o.expert.empty()) {
      expert = pipeline::load_expert(o.expert);
    } else {
      expert = pipeline::pretrain_sync(rc.train, corpus);
      pipeline::save_expert(o.out / "expert.s2l", expert);
    }
    ck = pipeline::initial_checkpoint(rc.train, corpus, expert);
  }

  std::ofstream log(o.out / "metrics.jsonl", o.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw IoError("cannot write " + (o.out / "metrics.jsonl").string());
  pipeline::TrainHooks hooks;
  hooks.on_step = [&](const pipeline::StepMetrics& m) {
    log << json{{"step", m.step}, {"frame", m.frame}, {"l_m", m.l_m}, {"l_w", m.l_w},
                {"l_d", m.l_d},   {"l_s", m.l_s},     {"total", m.total}}
               .dump()
        << '\n';
  };
  hooks.on_checkpoint = [&](const pipeline::Checkpoint& c) {
    pipeline::save_checkpoint(o.out / ("checkpoint_" + std::to_string(c.iteration) + ".s2l"), c);
  };

  json manifest = {{"corpus", o.corpus.empty() ? rc.train.corpus : o.corpus},
                   {"start_iteration", ck.iteration},
                   {"reproducibility", pipeline::reproducibility(ck.config.seed, pipeline::config_digest(ck.config))}};
  const auto t0 = std::chrono::steady_clock::now();
  try {
    pipeline::continue_training(ck, corpus, hooks);
  } catch (const NumericalError& e) {
    manifest["error"] = e.what();
    write_json(o.out / "manifest.json", manifest);
    throw;
  }
  pipeline::save_checkpoint(o.out / "checkpoint.s2l", ck);
  manifest["iterations"] = ck.iteration;
  manifest["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  manifest["checkpoint"] = (o.out / "checkpoint.s2l").string();
  write_json(o.out / "manifest.json", manifest);
  std::cout << "trained to iteration " << ck.iteration << "; checkpoint in " << o.out.string() << '\n';
}

struct Render {
  std::string corpus;
  std::string checkpoint;
  std::string frames;
  std::string audio;
  fs::path out = "render";
};

void run_render(const CommonOptions& common, const Render& o) {
  const RunConfig rc = load_run_config(common);
  const synth::Corpus corpus = open_corpus(o.corpus, rc.train);
  const pipeline::Checkpoint ck = pipeline::load_checkpoint(o.checkpoint);
  const auto [a, b] = frame_range(o.frames, corpus);
  const auto features = features_for(corpus, o.audio, a, b);
  std::vector<pipeline::InferTarget> targets;
  for (int i = a; i < b; ++i) targets.push_back(pipeline::target_of(corpus, i));
  const std::vector<Image> frames = pipeline::infer(ck.model, features, targets);

  make_dir(o.out);
  json list = json::array();
  for (int i = a; i < b; ++i) {
    const Image& img = frames[static_cast<std::size_t>(i - a)];
    const std::string name = frame_name("frame", i);
    write_png(o.out / name, img);
    json entry = {{"index", i}, {"file", name}};
    if (o.audio.empty()) {
      const synth::FrameRecord& f = corpus.frames[static_cast<std::size_t>(i)];
      const Box crop = metrics::mouth_crop(f.mouth_box, f.image.width, f.image.height);
      entry["mouth_psnr"] = metrics::psnr(img.crop(crop), f.image.crop(crop));
    }
    list.push_back(entry);
  }
  write_json(o.out / "manifest.json", {{"checkpoint", o.checkpoint},
                                       {"audio", o.audio.empty() ? json(nullptr) : json(o.audio)},
                                       {"frames", list},
                                       {"reproducibility", rc.stanza()}});
  std::cout << "rendered " << frames.size() << " frames to " << o.out.string() << '\n';
}

struct PoseControl {
  std::string corpus;
  std::string checkpoint;
  std::string poses;
  double max_rotation_deg = pipeline::PoseBound{}.max_rotation_deg;
  double max_translation = pipeline::PoseBound{}.max_translation;
  fs::path out = "pose";
};

// Poses file: [{"pose": [16 row-major values], "frame": k}, ...]; frame k of
// the corpus supplies the speech feature and time. Without a file, every
// held-out frame's ground-truth pose is used and compared with its render.
void run_pose_control(const CommonOptions& common, const PoseControl& o) {
  const RunConfig rc = load_run_config(common);
  const synth::Corpus corpus = open_corpus(o.corpus, rc.train);
  const pipeline::Checkpoint ck = pipeline::load_checkpoint(o.checkpoint);
  std::vector<int> frames;
  std::vector<geometry::Pose> poses;
  if (o.poses.empty()) {
    for (int i = corpus.train_count; i < static_cast<int>(corpus.frames.size()); ++i) {
      frames.push_back(i);
      poses.push_back(corpus.frames[static_cast<std::size_t>(i)].pose);
    }
  } else {
    std::ifstream f(o.poses);
    if (!f) throw IoError("cannot open poses file " + o.poses);
    try {
      for (const json& e : json::parse(f)) {
        frames.push_back(e.at("frame").get<int>());
        poses.push_back(geometry::Pose::from_row_major(e.at("pose").get<std::vector<double>>()));
      }
    } catch (const json::exception& e) {
      throw ConfigError(o.poses + ": " + e.what());
    }
  }
  std::vector<synth::SpeechFeature> features;
  std::vector<double> times;
  for (int k : frames) {
    if (k < 0 || k >= static_cast<int>(corpus.frames.size()))
      throw ConfigError("pose frame index " + std::to_string(k) + " out of range");
    features.push_back(corpus.frames[static_cast<std::size_t>(k)].feature);
    times.push_back(corpus.normalized_time(k));
  }
  const auto out = pipeline::pose_control(ck.model, corpus, features, poses, times,
                                          {o.max_rotation_deg, o.max_translation});

  make_dir(o.out);
  json list = json::array();
  int warnings = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const pipeline::PoseControlFrame& pf = out[i];
    const std::string name = frame_name("pose", static_cast<int>(i));
    write_png(o.out / name, pf.image);
    json entry = {{"file", name},
                  {"frame", frames[i]},
                  {"source_frame", pf.source_frame},
                  {"hole_fraction", pf.hole_fraction},
                  {"rotation_deviation_deg", pf.rotation_deviation_deg},
                  {"translation_deviation", pf.translation_deviation}};
    if (o.poses.empty()) {
      pipeline::Mask keep(pf.holes.size());
      for (std::size_t k = 0; k < keep.size(); ++k) keep[k] = pf.holes[k] ? 0 : 1;
      entry["non_hole_psnr"] = metrics::psnr(pf.image, corpus.frames[static_cast<std::size_t>(frames[i])].image, keep);
    }
    if (pf.beyond_bound) {
      entry["warning"] = "pose beyond the deviation bound of the training trajectory";
      ++warnings;
    }
    list.push_back(entry);
  }
  write_json(o.out / "manifest.json",
             {{"checkpoint", o.checkpoint},
              {"bound", {{"max_rotation_deg", o.max_rotation_deg}, {"max_translation", o.max_translation}}},
              {"frames", list},
              {"warnings", warnings},
              {"reproducibility", rc.stanza()}});
  if (warnings) std::cerr << "warning: " << warnings << " pose(s) beyond the deviation bound\n";
  std::cout << "wrote " << out.size() << " frames to " << o.out.string() << '\n';
}

struct Eval {
  std::string corpus;
  std::string checkpoint;
  std::string audio;
  fs::path out = "eval.json";
};

void run_eval(const CommonOptions& common, const Eval& o) {
  const RunConfig rc = load_run_config(common);
  const synth::Corpus corpus = open_corpus(o.corpus, rc.train);
  const pipeline::Checkpoint ck = pipeline::load_checkpoint(o.checkpoint);
  std::optional<std::vector<synth::SpeechFeature>> audio;
  if (!o.audio.empty())
    audio = features_for(corpus, o.audio, corpus.train_count, static_cast<int>(corpus.frames.size()));
  const pipeline::EvalReport r = pipeline::evaluate(ck.model, corpus, rc.train.seed, audio ? &*audio : nullptr);
  json report = r;
  report["checkpoint"] = o.checkpoint;
  report["audio"] = o.audio.empty() ? json(nullptr) : json(o.audio);
  report["reproducibility"] = rc.stanza();
  write_json(o.out, report);
  std::cout << "mouth PSNR " << r.psnr << " dB (baseline " << r.baseline_psnr << "), SSIM " << r.ssim << ", LMD "
            << r.lmd << " px, sync " << r.sync_confidence << " (shuffled " << r.shuffled_confidence << ")\n";
}

struct Heatmap {
  std::string corpus;
  std::string checkpoint;
  fs::path out = "heatmap";
};

void run_heatmap(const CommonOptions& common, const Heatmap& o) {
  const RunConfig rc = load_run_config(common);
  const synth::Corpus corpus = open_corpus(o.corpus, rc.train);
  pipeline::CanonicalView view;
  geometry::DepthMap depth;
  if (o.checkpoint.empty()) {
    view = pipeline::make_view(corpus, rc.train.mouth_margin);
    depth = pipeline::initial_depth(corpus);
  } else {
    const pipeline::Checkpoint ck = pipeline::load_checkpoint(o.checkpoint);
    view = ck.model.view;
    depth = ck.model.depth();
  }
  std::vector<Image> warped;
  for (const auto& f : corpus.frames) warped.push_back(pipeline::warp_to_canonical(f.image, f.pose, view, depth));
  const std::vector<double> heat = metrics::motion_heatmap(warped);

  Image img(view.height, view.width);
  for (int c = 0; c < Image::kChannels; ++c)
    for (std::size_t k = 0; k < heat.size(); ++k) img.pixels[static_cast<std::size_t>(c) * img.plane() + k] =
        static_cast<float>(heat[k]);
  const Box& mouth = corpus.canonical().mouth_box;
  const auto& face = corpus.canonical().face_depth.valid;
  double in = 0.0, out = 0.0;
  int n_in = 0, n_out = 0;
  for (int y = 0; y < view.height; ++y)
    for (int x = 0; x < view.width; ++x) {
      const std::size_t k = static_cast<std::size_t>(y * view.width + x);
      if (mouth.contains(x, y)) {
        in += heat[k];
        ++n_in;
      } else if (face[k]) {
        out += heat[k];
        ++n_out;
      }
    }
  in /= std::max(n_in, 1);
  out /= std::max(n_out, 1);

  make_dir(o.out);
  write_png(o.out / "heatmap.png", img);
  write_json(o.out / "manifest.json", {{"in_mouth_mean", in},
                                       {"out_of_mouth_mean", out},
                                       {"ratio", out > 0.0 ? json(in / out) : json(nullptr)},
                                       {"reproducibility", rc.stanza()}});
  std::cout << "in-mouth mean heat " << in << ", out-of-mouth " << out << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Speech-driven talking-head synthesis on a synthetic corpus"};
  app.require_subcommand(1);

  CommonOptions common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "JSON config with optional \"scene\" and \"train\" sections");
    sub->add_option("--seed", common.seed, "Overrides train.seed");
  };

  GenData gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic corpus");
  add_common(gen_cmd);
  gen_cmd->add_option("--out", gen.out, "Output directory (default train.corpus)");

  PretrainSync pre;
  auto* pre_cmd = app.add_subcommand("pretrain-sync", "Pre-train the sync expert");
  add_common(pre_cmd);
  pre_cmd->add_option("--corpus", pre.corpus, "Corpus directory");
  pre_cmd->add_option("--out", pre.out, "Expert file");

  Train train;
  auto* train_cmd = app.add_subcommand("train", "Train field, canonical depth and blend network");
  add_common(train_cmd);
  train_cmd->add_option("--corpus", train.corpus, "Corpus directory");
  train_cmd->add_option("--expert", train.expert, "Pre-trained expert (pre-trained here when omitted)");
  train_cmd->add_option("--resume", train.resume, "Checkpoint to continue from");
  train_cmd->add_option("--out", train.out, "Run directory");

  Render render;
  auto* render_cmd = app.add_subcommand("render", "Synthesize frames from speech features");
  add_common(render_cmd);
  render_cmd->add_option("--corpus", render.corpus, "Corpus directory");
  render_cmd->add_option("--checkpoint", render.checkpoint, "Checkpoint")->required();
  render_cmd->add_option("--frames", render.frames, "Frame range a:b (default: held-out split)");
  render_cmd->add_option("--audio", render.audio, "Corpus whose speech drives the frames");
  render_cmd->add_option("--out", render.out, "Output directory");

  PoseControl pose;
  auto* pose_cmd = app.add_subcommand("pose-control", "Synthesize frames at new head poses");
  add_common(pose_cmd);
  pose_cmd->add_option("--corpus", pose.corpus, "Corpus directory");
  pose_cmd->add_option("--checkpoint", pose.checkpoint, "Checkpoint")->required();
  pose_cmd->add_option("--poses", pose.poses, "JSON list of {\"pose\": [16], \"frame\": k}");
  pose_cmd->add_option("--max-rotation-deg", pose.max_rotation_deg, "Deviation bound, degrees");
  pose_cmd->add_option("--max-translation", pose.max_translation, "Deviation bound, scene units");
  pose_cmd->add_option("--out", pose.out, "Output directory");

  Eval eval;
  auto* eval_cmd = app.add_subcommand("eval", "Held-out metrics report");
  add_common(eval_cmd);
  eval_cmd->add_option("--corpus", eval.corpus, "Corpus directory");
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "Checkpoint")->required();
  eval_cmd->add_option("--audio", eval.audio, "Corpus whose held-out speech drives the frames");
  eval_cmd->add_option("--out", eval.out, "Report file");

  Heatmap heat;
  auto* heat_cmd = app.add_subcommand("heatmap", "Motion heatmap of the canonical-warped corpus");
  add_common(heat_cmd);
  heat_cmd->add_option("--corpus", heat.corpus, "Corpus directory");
  heat_cmd->add_option("--checkpoint", heat.checkpoint, "Use the checkpoint's optimized depth");
  heat_cmd->add_option("--out", heat.out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*gen_cmd) run_gen_data(common, gen);
    else if (*pre_cmd) run_pretrain_sync(common, pre);
    else if (*train_cmd) run_train(common, train);
    else if (*render_cmd) run_render(common, render);
    else if (*pose_cmd) run_pose_control(common, pose);
    else if (*eval_cmd) run_eval(common, eval);
    else if (*heat_cmd) run_heatmap(common, heat);
  } catch (const NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
