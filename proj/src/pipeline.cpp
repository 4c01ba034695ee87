#include "s2l/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "s2l/error.hpp"
#include "s2l/metrics.hpp"
#include "s2l/ops.hpp"

#ifndef S2L_GIT_DESCRIBE
#define S2L_GIT_DESCRIBE "unknown"
#endif

namespace s2l::pipeline {

using ad::Tensor;
using ad::Var;
using geometry::DepthMap;
using geometry::Pose;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

void TrainConfig::validate() const {
  weights.validate();
  if (!(lr_field > 0) || !(lr_depth > 0) || !(lr_blend > 0)) throw ConfigError("learning rates must be positive");
  if (iterations < 0 || warmup < 0) throw ConfigError("iterations and warmup must be >= 0");
  if (frames_per_step < 1) throw ConfigError("frames_per_step must be >= 1");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  if (!(r_max > 0)) throw ConfigError("r_max must be positive");
  if (!(mouth_margin >= 0)) throw ConfigError("mouth_margin must be >= 0");
  field.validate();
  blend.validate();
  holes.validate();
  expert.validate();
  pretrain.validate();
  if (field.feature_dim != synth::kFeatureDim || expert.feature_dim != synth::kFeatureDim)
    throw ConfigError("feature_dim must equal " + std::to_string(synth::kFeatureDim));
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"corpus", c.corpus},
           {"seed", c.seed},
           {"weights", c.weights},
           {"lr", {{"field", c.lr_field}, {"depth", c.lr_depth}, {"blend", c.lr_blend}}},
           {"iterations", c.iterations},
           {"warmup", c.warmup},
           {"frames_per_step", c.frames_per_step},
           {"checkpoint_every", c.checkpoint_every},
           {"r_max", c.r_max},
           {"mouth_margin", c.mouth_margin},
           {"depth_source", c.depth_source == DepthSource::observed ? "observed" : "composed"},
           {"field", c.field},
           {"blend", c.blend},
           {"holes", c.holes},
           {"expert", c.expert},
           {"pretrain", c.pretrain}};
}

void from_json(const json& j, TrainConfig& c) {
  static const char* known[] = {"corpus",     "seed",         "weights",      "lr",    "iterations",
                                "warmup",     "frames_per_step", "checkpoint_every", "r_max", "mouth_margin",
                                "depth_source", "field",      "blend",        "holes", "expert",
                                "pretrain"};
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return key == k; }) == std::end(known))
      throw ConfigError("unknown train config key: " + key);
  }
  c = TrainConfig{};
  try {
    c.corpus = j.value("corpus", c.corpus);
    c.seed = j.value("seed", c.seed);
    if (j.contains("weights")) c.weights = j.at("weights").get<losses::LossWeights>();
    if (j.contains("lr")) {
      const json& lr = j.at("lr");
      c.lr_field = lr.value("field", c.lr_field);
      c.lr_depth = lr.value("depth", c.lr_depth);
      c.lr_blend = lr.value("blend", c.lr_blend);
    }
    c.iterations = j.value("iterations", c.iterations);
    c.warmup = j.value("warmup", c.warmup);
    c.frames_per_step = j.value("frames_per_step", c.frames_per_step);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.r_max = j.value("r_max", c.r_max);
    c.mouth_margin = j.value("mouth_margin", c.mouth_margin);
    const std::string src = j.value("depth_source", std::string("observed"));
    if (src == "observed") c.depth_source = DepthSource::observed;
    else if (src == "composed") c.depth_source = DepthSource::composed;
    else throw ConfigError("depth_source must be \"observed\" or \"composed\", got \"" + src + "\"");
    if (j.contains("field")) c.field = j.at("field").get<field::FieldConfig>();
    if (j.contains("blend")) c.blend = j.at("blend").get<compose::BlendConfig>();
    if (j.contains("holes")) c.holes = j.at("holes").get<compose::HoleConfig>();
    if (j.contains("expert")) c.expert = j.at("expert").get<sync::ExpertConfig>();
    if (j.contains("pretrain")) c.pretrain = j.at("pretrain").get<sync::PretrainConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed train config: ") + e.what());
  }
}

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t config_digest(const TrainConfig& c) {
  const std::string text = json(c).dump();
  return fnv1a({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

std::string git_describe() { return S2L_GIT_DESCRIBE; }

json reproducibility(std::uint64_t seed, std::uint64_t digest) {
  std::ostringstream hex;
  hex << std::hex;
  hex.width(16);
  hex.fill('0');
  hex << digest;
  return {{"seed", seed}, {"config_digest", hex.str()}, {"git_describe", git_describe()}};
}

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over a combined word.
  std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

enum SeedStream : std::uint64_t { kFieldInit = 1, kBlendInit, kSync, kFrames, kRender, kHoles };

Mask all_valid(std::size_t n) { return Mask(n, 1); }

Tensor blank_box(Tensor img, const Box& b) {
  const int h = img.dim(1), w = img.dim(2);
  for (int c = 0; c < 3; ++c)
    for (int y = b.y0; y < b.y0 + b.height; ++y)
      for (int x = b.x0; x < b.x0 + b.width; ++x) img[static_cast<std::size_t>((c * h + y) * w + x)] = 0.0;
  return img;
}

/// Bilinear depth at a continuous canonical position.
bool depth_at(const DepthMap& d, double u, double v, double& out) {
  ad::BilinearTaps t;
  if (!ad::bilinear_taps(u, v, d.width, d.height, t)) return false;
  const int x1 = std::min(t.x0 + 1, d.width - 1), y1 = std::min(t.y0 + 1, d.height - 1);
  const double a = d.values[d.index(t.y0, t.x0)], b = d.values[d.index(t.y0, x1)];
  const double c = d.values[d.index(y1, t.x0)], e = d.values[d.index(y1, x1)];
  out = (1 - t.fy) * ((1 - t.fx) * a + t.fx * b) + t.fy * ((1 - t.fx) * c + t.fx * e);
  return true;
}

}  // namespace

// ---------------------------------------------------------------------------
// Canonical view and warps

Box mouth_region(const Box& mouth_box, double margin, int width, int height) {
  Box b = mouth_box.dilated(margin, width, height);
  constexpr int kMin = 16;
  if (width < kMin || height < kMin) throw ConfigError("mouth_region: image smaller than 16x16");
  auto widen = [](int& lo, int& len, int limit) {
    while (len < kMin) {
      if (lo > 0) {
        --lo;
        ++len;
      }
      if (len < kMin && lo + len < limit) ++len;
    }
  };
  widen(b.x0, b.width, width);
  widen(b.y0, b.height, height);
  return b;
}

CanonicalView make_view(const synth::Corpus& corpus, double margin) {
  const synth::FrameRecord& c = corpus.canonical();
  return {corpus.config.width, corpus.config.height, corpus.intrinsics(), c.pose,
          mouth_region(c.mouth_box, margin, corpus.config.width, corpus.config.height)};
}

DepthMap initial_depth(const synth::Corpus& corpus) { return geometry::complete_depth(corpus.canonical().face_depth); }

DepthMap Model::depth() const {
  DepthMap d(view.height, view.width);
  for (std::size_t i = 0; i < d.values.size(); ++i) {
    d.values[i] = std::exp(log_depth.value()[i]);
    d.valid[i] = 1;
  }
  return d;
}

Image warp_to_canonical(const Image& observed, const Pose& observed_pose, const CanonicalView& view,
                        const DepthMap& depth_c) {
  const Pose rel = geometry::relative_pose(observed_pose, view.pose);
  const auto corr = geometry::build_correspondence(rel, view.k, depth_c, view.height, view.width);
  return geometry::backward_warp(observed, corr);
}

SourceMap canonical_sources(const CanonicalView& view, const DepthMap& depth_c, const Pose& observed_pose,
                            const Box& box) {
  if (!box.inside(view.width, view.height)) throw ConfigError("canonical_sources: box outside the frame");
  const Pose c2o = geometry::relative_pose(observed_pose, view.pose);
  const Pose o2c = geometry::invert_pose(c2o);
  SourceMap s{Tensor({box.height, box.width}), Tensor({box.height, box.width}),
              Mask(static_cast<std::size_t>(box.area()), 0)};
  for (int y = 0; y < box.height; ++y)
    for (int x = 0; x < box.width; ++x) {
      const Eigen::Vector2d p(box.x0 + x, box.y0 + y);
      // Start from p lifted with the canonical depth at p, then solve
      // f(q) = p by fixed-point iteration; f is close to a translation.
      double d = 0.0;
      if (!depth_at(depth_c, p.x(), p.y(), d)) continue;
      auto start = geometry::map_point(o2c, view.k, d, p);
      if (!start.valid) continue;
      Eigen::Vector2d q = start.pixel;
      bool ok = false;
      for (int it = 0; it < 30; ++it) {
        if (!depth_at(depth_c, q.x(), q.y(), d)) break;
        const auto f = geometry::map_point(c2o, view.k, d, q);
        if (!f.valid) break;
        const Eigen::Vector2d r = p - f.pixel;
        q += r;
        if (r.norm() < 1e-6) {
          ok = true;
          break;
        }
      }
      if (!ok) continue;
      const std::size_t i = static_cast<std::size_t>(y * box.width + x);
      s.u[i] = q.x();
      s.v[i] = q.y();
      s.valid[i] = 1;
    }
  return s;
}

sync::SyncDataset canonical_mouth_dataset(const synth::Corpus& corpus, const CanonicalView& view,
                                          const DepthMap& depth_c, int begin, int end) {
  if (begin < 0 || end > static_cast<int>(corpus.frames.size()) || begin > end)
    throw ConfigError("canonical_mouth_dataset: frame range out of bounds");
  sync::SyncDataset d;
  for (int i = begin; i < end; ++i) {
    const auto& f = corpus.frames[static_cast<std::size_t>(i)];
    d.mouths.push_back(to_tensor(warp_to_canonical(f.image, f.pose, view, depth_c).crop(view.mouth_region)));
    d.features.push_back(f.feature);
  }
  return d;
}

std::vector<Tensor> canonical_mouths(const std::vector<Image>& frames, const std::vector<Pose>& poses,
                                     const CanonicalView& view, const DepthMap& depth_c) {
  if (frames.size() != poses.size()) throw ConfigError("canonical_mouths: frame and pose counts differ");
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < frames.size(); ++i)
    out.push_back(to_tensor(warp_to_canonical(frames[i], poses[i], view, depth_c).crop(view.mouth_region)));
  return out;
}

sync::ExpertParams pretrain_sync(const TrainConfig& cfg, const synth::Corpus& corpus, sync::PretrainReport* report) {
  cfg.validate();
  const CanonicalView view = make_view(corpus, cfg.mouth_margin);
  const auto data = canonical_mouth_dataset(corpus, view, initial_depth(corpus), 0, corpus.train_count);
  return sync::pretrain_expert(data, cfg.expert, cfg.pretrain, mix(cfg.seed, kSync), report);
}

// ---------------------------------------------------------------------------
// Composition shared by training and inference

namespace {

struct Composed {
  Var image;        // [3,H,W] after blending
  Mask box_valid;   // mouth-box pixels reached by the warped mouth
};

/// Maps a canonical-region mouth into `box` of the observed frame, pastes it
/// over the blanked box, applies `holes` and blends.
Composed compose_graph(const Model& m, const Var& mouth, const Tensor& frame, const Pose& pose, const Box& box,
                       const DepthMap& depth_c, const Mask& holes) {
  const Box& r = m.view.mouth_region;
  SourceMap src = canonical_sources(m.view, depth_c, pose, box);
  for (std::size_t i = 0; i < src.u.size(); ++i) {
    src.u[i] -= r.x0;
    src.v[i] -= r.y0;
  }
  Composed out;
  Var warped = ad::bilinear_sample(mouth, ad::constant(src.u), ad::constant(src.v), src.valid, &out.box_valid);
  Var pasted = compose::paste_mouth(ad::constant(blank_box(frame, box)), warped, box, out.box_valid);
  // Box pixels the mouth did not reach stay black, like holes.
  Mask dark = holes.empty() ? Mask(static_cast<std::size_t>(m.view.width * m.view.height), 0) : holes;
  for (int y = 0; y < box.height; ++y)
    for (int x = 0; x < box.width; ++x)
      if (!out.box_valid[static_cast<std::size_t>(y * box.width + x)])
        dark[static_cast<std::size_t>((box.y0 + y) * m.view.width + box.x0 + x)] = 1;
  out.image = compose::blend(m.blend, compose::apply_holes(pasted, holes.empty() ? Mask(dark.size(), 0) : holes), dark);
  return out;
}

std::vector<Var> params_of(const Model& m, int which) {
  if (which == 0) return m.field.parameters();
  if (which == 1) return {m.log_depth};
  return m.blend.parameters();
}

}  // namespace

// ---------------------------------------------------------------------------
// Training

Checkpoint initial_checkpoint(const TrainConfig& cfg, const synth::Corpus& corpus, const sync::ExpertParams& expert) {
  cfg.validate();
  if (corpus.train_count < cfg.expert.window) throw ConfigError("corpus training split shorter than the sync window");
  Checkpoint c;
  c.config = cfg;
  c.model.view = make_view(corpus, cfg.mouth_margin);
  const Box& r = c.model.view.mouth_region;
  if (expert.mouth_height() != r.height || expert.mouth_width() != r.width)
    throw ConfigError("sync expert expects " + std::to_string(expert.mouth_width()) + "x" +
                      std::to_string(expert.mouth_height()) + " mouths but the canonical region is " +
                      std::to_string(r.width) + "x" + std::to_string(r.height));
  c.model.field = field::FieldParams(cfg.field, mix(cfg.seed, kFieldInit));
  const DepthMap d0 = initial_depth(corpus);
  Tensor ld({d0.height, d0.width});
  for (std::size_t i = 0; i < d0.values.size(); ++i) ld[i] = std::log(d0.values[i]);
  c.model.log_depth = ad::parameter(std::move(ld));
  c.model.blend = compose::BlendParams(cfg.blend, mix(cfg.seed, kBlendInit));
  c.model.expert = expert.clone();
  c.model.expert.freeze();
  c.field_opt.hyper.lr = cfg.lr_field;
  c.depth_opt.hyper.lr = cfg.lr_depth;
  c.blend_opt.hyper.lr = cfg.lr_blend;
  return c;
}

void continue_training(Checkpoint& c, const synth::Corpus& corpus, const TrainHooks& hooks) {
  const TrainConfig& cfg = c.config;
  cfg.validate();
  Model& m = c.model;
  if (corpus.config.width != m.view.width || corpus.config.height != m.view.height)
    throw ConfigError("corpus frame size differs from the checkpoint");
  const int n_train = corpus.train_count;
  const int window = cfg.expert.window;
  const Box full{0, 0, m.view.width, m.view.height};
  const Box& region = m.view.mouth_region;
  const std::size_t plane = static_cast<std::size_t>(m.view.width) * static_cast<std::size_t>(m.view.height);
  const Var canon = ad::constant(to_tensor(corpus.canonical().image));
  std::vector<Tensor> frames;
  frames.reserve(static_cast<std::size_t>(n_train));
  for (int i = 0; i < n_train; ++i) frames.push_back(to_tensor(corpus.frames[static_cast<std::size_t>(i)].image));
  // Depth loss ignores the canonical mouth region, whose appearance changes.
  Mask outside_mouth = all_valid(plane);
  for (int y = region.y0; y < region.y0 + region.height; ++y)
    for (int x = region.x0; x < region.x0 + region.width; ++x)
      outside_mouth[static_cast<std::size_t>(y * m.view.width + x)] = 0;

  ad::Adam field_opt(params_of(m, 0), c.field_opt.hyper), depth_opt(params_of(m, 1), c.depth_opt.hyper),
      blend_opt(params_of(m, 2), c.blend_opt.hyper);
  field_opt.state() = c.field_opt;
  depth_opt.state() = c.depth_opt;
  blend_opt.state() = c.blend_opt;
  const auto& w = cfg.weights;

  for (std::int64_t step = c.iteration; step < cfg.iterations; ++step) {
    const bool warm = step < cfg.warmup;
    if (warm && w.d == 0.0) {
      c.iteration = step + 1;
      continue;
    }
    std::mt19937_64 rng(mix(cfg.seed ^ mix(kFrames, static_cast<std::uint64_t>(step)), 0));
    std::uniform_int_distribution<int> pick(0, n_train - 1);
    StepMetrics sm;
    sm.step = step + 1;
    const DepthMap depth_c = m.depth();
    for (int k = 0; k < cfg.frames_per_step; ++k) {
      const int o = pick(rng);
      sm.frame = o;
      const auto& rec = corpus.frames[static_cast<std::size_t>(o)];
      const Var io = ad::constant(frames[static_cast<std::size_t>(o)]);
      const Pose c2o = geometry::relative_pose(rec.pose, m.view.pose);
      const auto dw = geometry::warp_by_log_depth(io, m.log_depth, all_valid(plane), full, c2o, m.view.k);
      Mask depth_mask = dw.mask;
      for (std::size_t i = 0; i < plane; ++i) depth_mask[i] = depth_mask[i] && outside_mouth[i];
      const bool depth_from_frame = cfg.depth_source == DepthSource::observed || warm;
      Var l_d, l_m, l_w, l_s;
      if (w.d > 0.0 && depth_from_frame) l_d = losses::loss_d(dw.image, canon, depth_mask);

      if (!warm) {
        const std::uint64_t sub = mix(static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(k));
        const double t = corpus.normalized_time(o);
        Var mouth = field::render_canonical_mouth(m.field, region, rec.feature, t, true, mix(cfg.seed ^ kRender, sub),
                                                  cfg.r_max)
                        .image;
        if (w.m > 0.0) {
          const Var sup = ad::detach(ad::crop2d(dw.image, region.y0, region.x0, region.height, region.width));
          Mask sup_mask(static_cast<std::size_t>(region.area()));
          for (int y = 0; y < region.height; ++y)
            for (int x = 0; x < region.width; ++x)
              sup_mask[static_cast<std::size_t>(y * region.width + x)] =
                  dw.mask[static_cast<std::size_t>((region.y0 + y) * m.view.width + region.x0 + x)];
          if (std::any_of(sup_mask.begin(), sup_mask.end(), [](std::uint8_t v) { return v != 0; }))
            l_m = losses::loss_m(mouth, sup, sup_mask);
          else
            l_m = ad::constant(Tensor::scalar(0.0));
        }
        const Mask holes = compose::draw_holes(m.view.height, m.view.width, cfg.holes, mix(cfg.seed ^ kHoles, sub));
        const Composed comp =
            compose_graph(m, mouth, frames[static_cast<std::size_t>(o)], rec.pose, rec.mouth_box, depth_c, holes);
        if (w.w > 0.0) l_w = losses::loss_w(comp.image, io);
        if (w.d > 0.0 && !depth_from_frame) {
          const auto dp = geometry::warp_by_log_depth(comp.image, m.log_depth, all_valid(plane), full, c2o, m.view.k);
          Mask pm = dp.mask;
          for (std::size_t i = 0; i < plane; ++i) pm[i] = pm[i] && outside_mouth[i];
          l_d = losses::loss_d(dp.image, canon, pm);
        }
        if (w.s > 0.0) {
          const int start = std::clamp(o - window / 2, 0, n_train - window);
          std::vector<Var> crops;
          std::vector<synth::SpeechFeature> feats;
          for (int j = start; j < start + window; ++j) {
            const auto& fj = corpus.frames[static_cast<std::size_t>(j)];
            crops.push_back(field::render_canonical_mouth(m.field, region, fj.feature, corpus.normalized_time(j), false,
                                                          0, cfg.r_max)
                                .image);
            feats.push_back(fj.feature);
          }
          l_s = sync::sync_loss(sync::encode_image_window(m.expert, crops), sync::encode_audio_window(m.expert, feats),
                                1.0);
        }
      }
      losses::LossWeights active = w;
      if (warm) active = {0.0, 0.0, w.d, 0.0};
      Var total = losses::total_loss(l_m, l_w, l_d, l_s, active) * (1.0 / cfg.frames_per_step);
      const double tv = total.item();
      auto val = [](const Var& v) { return v.valid() ? v.item() : 0.0; };
      if (!std::isfinite(tv)) {
        std::ostringstream msg;
        msg << "non-finite loss at step " << step + 1 << " (frame " << o << "): l_m=" << val(l_m)
            << " l_w=" << val(l_w) << " l_d=" << val(l_d) << " l_s=" << val(l_s);
        throw NumericalError(msg.str());
      }
      ad::backward(total);
      sm.l_m += val(l_m) / cfg.frames_per_step;
      sm.l_w += val(l_w) / cfg.frames_per_step;
      sm.l_d += val(l_d) / cfg.frames_per_step;
      sm.l_s += val(l_s) / cfg.frames_per_step;
      sm.total += tv;
    }
    depth_opt.step();
    if (!warm) {
      field_opt.step();
      blend_opt.step();
    }
    field_opt.zero_grad();
    depth_opt.zero_grad();
    blend_opt.zero_grad();
    c.iteration = step + 1;
    c.field_opt = field_opt.state();
    c.depth_opt = depth_opt.state();
    c.blend_opt = blend_opt.state();
    if (hooks.on_step) hooks.on_step(sm);
    if (hooks.on_checkpoint && cfg.checkpoint_every > 0 && c.iteration % cfg.checkpoint_every == 0)
      hooks.on_checkpoint(c);
  }
  c.field_opt = field_opt.state();
  c.depth_opt = depth_opt.state();
  c.blend_opt = blend_opt.state();
}

Checkpoint train(const TrainConfig& cfg, const synth::Corpus& corpus, const sync::ExpertParams& expert,
                 const TrainHooks& hooks) {
  Checkpoint c = initial_checkpoint(cfg, corpus, expert);
  continue_training(c, corpus, hooks);
  return c;
}

// ---------------------------------------------------------------------------
// Inference

InferTarget target_of(const synth::Corpus& corpus, int index) {
  const auto& f = corpus.frames.at(static_cast<std::size_t>(index));
  return {f.image, f.pose, f.mouth_box, corpus.normalized_time(index)};
}

Image compose_frame(const Model& m, const synth::SpeechFeature& feature, const InferTarget& target) {
  if (target.frame.width != m.view.width || target.frame.height != m.view.height)
    throw ConfigError("compose_frame: target frame size differs from the model");
  const Var mouth =
      field::render_canonical_mouth(m.field, m.view.mouth_region, feature, target.time, false, 0).image;
  return from_tensor(
      compose_graph(m, mouth, to_tensor(target.frame), target.pose, target.mouth_box, m.depth(), {}).image.value());
}

std::vector<Image> infer(const Model& m, const std::vector<synth::SpeechFeature>& features,
                         const std::vector<InferTarget>& targets) {
  if (features.size() != targets.size())
    throw ConfigError("infer: " + std::to_string(features.size()) + " features for " +
                      std::to_string(targets.size()) + " frames");
  std::vector<Image> out;
  out.reserve(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) out.push_back(compose_frame(m, features[i], targets[i]));
  return out;
}

std::vector<Image> mean_mouth_baseline(const Model& m, const synth::Corpus& corpus,
                                       const std::vector<InferTarget>& targets) {
  const DepthMap depth_c = m.depth();
  const auto data = canonical_mouth_dataset(corpus, m.view, depth_c, 0, corpus.train_count);
  Tensor mean(data.mouths.front().shape());
  for (const Tensor& t : data.mouths)
    for (std::size_t i = 0; i < t.size(); ++i) mean[i] += t[i] / static_cast<double>(data.size());
  const Box& r = m.view.mouth_region;
  std::vector<Image> out;
  for (const InferTarget& t : targets) {
    SourceMap src = canonical_sources(m.view, depth_c, t.pose, t.mouth_box);
    for (std::size_t i = 0; i < src.u.size(); ++i) {
      src.u[i] -= r.x0;
      src.v[i] -= r.y0;
    }
    Mask valid;
    const Var warped =
        ad::bilinear_sample(ad::constant(mean), ad::constant(src.u), ad::constant(src.v), src.valid, &valid);
    out.push_back(from_tensor(
        compose::paste_mouth(ad::constant(to_tensor(t.frame)), warped, t.mouth_box, valid).value()));
  }
  return out;
}

EvalReport evaluate(const Model& m, const synth::Corpus& corpus, std::uint64_t shuffle_seed,
                    const std::vector<synth::SpeechFeature>* features) {
  const int begin = corpus.train_count, end = static_cast<int>(corpus.frames.size());
  std::vector<InferTarget> targets;
  std::vector<synth::SpeechFeature> audio;
  std::vector<Pose> poses;
  for (int i = begin; i < end; ++i) {
    targets.push_back(target_of(corpus, i));
    audio.push_back(corpus.frames[static_cast<std::size_t>(i)].feature);
    poses.push_back(corpus.frames[static_cast<std::size_t>(i)].pose);
  }
  if (features) {
    if (features->size() != audio.size())
      throw ConfigError("evaluate: " + std::to_string(features->size()) + " features for " +
                        std::to_string(audio.size()) + " held-out frames");
    audio = *features;
  }
  const std::vector<Image> out = infer(m, audio, targets);
  const std::vector<Image> base = mean_mouth_baseline(m, corpus, targets);

  EvalReport r;
  r.frames = static_cast<int>(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const synth::FrameRecord& f = corpus.frames[static_cast<std::size_t>(begin) + i];
    const Box crop = metrics::mouth_crop(f.mouth_box, f.image.width, f.image.height);
    const Image truth = f.image.crop(crop);
    r.frame_psnr.push_back(metrics::psnr(out[i].crop(crop), truth));
    r.psnr += r.frame_psnr.back();
    r.baseline_psnr += metrics::psnr(base[i].crop(crop), truth);
    r.ssim += metrics::ssim(out[i].crop(crop), truth);
    r.lmd += metrics::lmd_aperture(out[i], f.mouth_box, f.keypoints);
  }
  const double n = static_cast<double>(out.size());
  r.psnr /= n;
  r.baseline_psnr /= n;
  r.ssim /= n;
  r.lmd /= n;

  const auto mouths = canonical_mouths(out, poses, m.view, m.depth());
  r.sync_confidence = sync::sync_confidence(m.expert, mouths, audio);
  std::vector<synth::SpeechFeature> shuffled = audio;
  std::mt19937_64 rng(shuffle_seed);
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  r.shuffled_confidence = sync::sync_confidence(m.expert, mouths, shuffled);
  return r;
}

void to_json(json& j, const EvalReport& r) {
  j = {{"frames", r.frames},
       {"mouth_psnr", r.psnr},
       {"baseline_psnr", r.baseline_psnr},
       {"mouth_ssim", r.ssim},
       {"lmd", r.lmd},
       {"sync_confidence", r.sync_confidence},
       {"shuffled_confidence", r.shuffled_confidence},
       {"frame_psnr", r.frame_psnr}};
}

int nearest_training_frame(const synth::Corpus& corpus, const Pose& pose) {
  int best = -1;
  double best_d = 0.0;
  for (int i = 0; i < corpus.train_count; ++i) {
    const double d = (corpus.frames[static_cast<std::size_t>(i)].pose.matrix() - pose.matrix()).norm();
    if (best < 0 || d < best_d) {
      best = i;
      best_d = d;
    }
  }
  if (best < 0) throw ConfigError("nearest_training_frame: corpus has no training frames");
  return best;
}

std::vector<PoseControlFrame> pose_control(const Model& m, const synth::Corpus& corpus,
                                           const std::vector<synth::SpeechFeature>& features,
                                           const std::vector<Pose>& poses, const std::vector<double>& times,
                                           const PoseBound& bound) {
  if (features.size() != poses.size() || times.size() != poses.size())
    throw ConfigError("pose_control: features, poses and times must have equal counts");
  const DepthMap depth_c = m.depth();
  const Image blank(m.view.height, m.view.width);
  std::vector<PoseControlFrame> out;
  for (std::size_t i = 0; i < poses.size(); ++i) {
    PoseControlFrame pf;
    pf.source_frame = nearest_training_frame(corpus, poses[i]);
    InferTarget target = target_of(corpus, pf.source_frame);
    target.time = times[i];
    const Image composed = compose_frame(m, features[i], target);
    // Depth of the source view: canonical depth splatted into it, cracks
    // filled by diffusion.
    const Pose c2o = geometry::relative_pose(target.pose, m.view.pose);
    const DepthMap d_o = geometry::complete_depth(geometry::forward_warp(blank, depth_c, c2o, m.view.k).depth);
    const Pose rel = geometry::relative_pose(poses[i], target.pose);
    const auto fw = geometry::forward_warp(composed, d_o, rel, m.view.k);
    pf.holes = fw.hole_mask;
    const auto holes = static_cast<double>(std::count(pf.holes.begin(), pf.holes.end(), 1));
    pf.hole_fraction = holes / static_cast<double>(pf.holes.size());
    pf.image = fw.image;
    pf.image.mask.clear();
    if (holes > 0) {
      Image input = fw.image;
      input.mask.clear();
      for (std::size_t k = 0; k < pf.holes.size(); ++k)
        if (pf.holes[k])
          for (int c = 0; c < 3; ++c) input.pixels[static_cast<std::size_t>(c) * input.plane() + k] = 0.0f;
      const Image filled = compose::blend(m.blend, input, pf.holes);
      for (std::size_t k = 0; k < pf.holes.size(); ++k)
        if (pf.holes[k])
          for (int c = 0; c < 3; ++c)
            pf.image.pixels[static_cast<std::size_t>(c) * input.plane() + k] =
                filled.pixels[static_cast<std::size_t>(c) * input.plane() + k];
    }
    pf.rotation_deviation_deg = geometry::rotation_angle(rel) * 180.0 / M_PI;
    pf.translation_deviation = (poses[i].translation() - target.pose.translation()).norm();
    pf.beyond_bound =
        pf.rotation_deviation_deg > bound.max_rotation_deg || pf.translation_deviation > bound.max_translation;
    out.push_back(std::move(pf));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[4] = {'S', '2', 'L', '1'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    u32(v);
  }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() {
    const std::uint32_t v = u32();
    float f;
    std::memcpy(&f, &v, 4);
    return f;
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw IoError("checkpoint truncated");
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> pack_arrays(const std::vector<Tensor>& arrays) {
  Writer w;
  w.u32(static_cast<std::uint32_t>(arrays.size()));
  for (const Tensor& t : arrays) {
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : t.values()) w.f32(static_cast<float>(v));
  }
  return w.bytes;
}

std::vector<Tensor> unpack_arrays(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const std::uint32_t n = r.u32();
  std::vector<Tensor> out;
  for (std::uint32_t i = 0; i < n; ++i) {
    ad::Shape shape(r.u32());
    for (int& d : shape) d = static_cast<int>(r.u32());
    Tensor t(shape);
    for (double& v : t.values()) v = r.f32();
    out.push_back(std::move(t));
  }
  if (!r.done()) throw IoError("checkpoint array section has trailing bytes");
  return out;
}

std::vector<Tensor> values_of(const std::vector<Var>& vars) {
  std::vector<Tensor> out;
  for (const Var& v : vars) out.push_back(v.value());
  return out;
}

void assign(std::vector<Var> vars, const std::vector<Tensor>& values, const std::string& what) {
  if (vars.size() != values.size()) throw IoError("checkpoint section " + what + " has the wrong array count");
  for (std::size_t i = 0; i < vars.size(); ++i) {
    if (vars[i].shape() != values[i].shape())
      throw IoError("checkpoint section " + what + " array " + std::to_string(i) + " has shape " +
                    ad::shape_str(values[i].shape()) + ", expected " + ad::shape_str(vars[i].shape()));
    vars[i].mutable_value() = values[i];
  }
}

using Sections = std::vector<std::pair<std::string, std::vector<std::uint8_t>>>;

std::vector<std::uint8_t> write_container(std::uint64_t digest, const Sections& sections) {
  Writer w;
  w.raw(kMagic, 4);
  w.u32(kVersion);
  w.u64(digest);
  w.u32(static_cast<std::uint32_t>(sections.size()));
  for (const auto& [name, payload] : sections) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.raw(name.data(), name.size());
    w.u64(payload.size());
    w.raw(payload.data(), payload.size());
  }
  return w.bytes;
}

// Views into the parsed byte buffer; valid while it lives.
struct Container {
  std::uint64_t digest = 0;
  std::map<std::string, std::span<const std::uint8_t>> sections;

  std::span<const std::uint8_t> section(const std::string& name) const {
    auto it = sections.find(name);
    if (it == sections.end()) throw IoError("checkpoint is missing section " + name);
    return it->second;
  }
};

Container read_container(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto magic = r.take(4);
  if (!std::equal(magic.begin(), magic.end(), kMagic)) throw IoError("not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  Container c;
  c.digest = r.u64();
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto name = r.take(r.u32());
    const std::uint64_t len = r.u64();
    c.sections[std::string(name.begin(), name.end())] = r.take(static_cast<std::size_t>(len));
  }
  if (!r.done()) throw IoError("checkpoint has trailing bytes");
  return c;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing " + path.string());
}

json hyper_json(const ad::OptimizerState& s) {
  return {{"lr", s.hyper.lr}, {"beta1", s.hyper.beta1}, {"beta2", s.hyper.beta2}, {"eps", s.hyper.eps},
          {"step", s.step}};
}

void hyper_from(const json& j, ad::OptimizerState& s) {
  s.hyper.lr = j.at("lr").get<double>();
  s.hyper.beta1 = j.at("beta1").get<double>();
  s.hyper.beta2 = j.at("beta2").get<double>();
  s.hyper.eps = j.at("eps").get<double>();
  s.step = j.at("step").get<std::int64_t>();
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& c) {
  const Model& m = c.model;
  const geometry::Intrinsics& k = m.view.k;
  const Box& r = m.view.mouth_region;
  json meta = {{"config", c.config},
               {"iteration", c.iteration},
               {"view",
                {{"width", m.view.width},
                 {"height", m.view.height},
                 {"intrinsics", {k.fx, k.fy, k.cx, k.cy}},
                 {"pose", m.view.pose.row_major()},
                 {"mouth_region", {r.x0, r.y0, r.width, r.height}}}},
               {"optimizers",
                {{"field", hyper_json(c.field_opt)},
                 {"depth", hyper_json(c.depth_opt)},
                 {"blend", hyper_json(c.blend_opt)}}}};
  const std::string meta_text = meta.dump();
  Sections sections;
  sections.emplace_back("meta", std::vector<std::uint8_t>(meta_text.begin(), meta_text.end()));
  sections.emplace_back("field", pack_arrays(values_of(m.field.parameters())));
  sections.emplace_back("log_depth", pack_arrays({m.log_depth.value()}));
  sections.emplace_back("blend", pack_arrays(values_of(m.blend.parameters())));
  sections.emplace_back("expert", pack_arrays(values_of(m.expert.parameters())));
  for (const auto& [name, st] :
       {std::pair<const char*, const ad::OptimizerState*>{"field", &c.field_opt}, {"depth", &c.depth_opt},
        {"blend", &c.blend_opt}}) {
    sections.emplace_back(std::string("opt.") + name + ".m", pack_arrays(st->m));
    sections.emplace_back(std::string("opt.") + name + ".v", pack_arrays(st->v));
  }
  return write_container(config_digest(c.config), sections);
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  const Container file = read_container(bytes);
  const std::uint64_t digest = file.digest;
  auto section = [&](const std::string& name) { return file.section(name); };

  Checkpoint c;
  json meta;
  try {
    const auto text = section("meta");
    meta = json::parse(text.begin(), text.end());
    c.config = meta.at("config").get<TrainConfig>();
    c.iteration = meta.at("iteration").get<std::int64_t>();
    const json& v = meta.at("view");
    c.model.view.width = v.at("width").get<int>();
    c.model.view.height = v.at("height").get<int>();
    const auto k = v.at("intrinsics").get<std::vector<double>>();
    c.model.view.k = {k.at(0), k.at(1), k.at(2), k.at(3)};
    c.model.view.pose = Pose::from_row_major(v.at("pose").get<std::vector<double>>());
    const auto b = v.at("mouth_region").get<std::vector<int>>();
    c.model.view.mouth_region = {b.at(0), b.at(1), b.at(2), b.at(3)};
    hyper_from(meta.at("optimizers").at("field"), c.field_opt);
    hyper_from(meta.at("optimizers").at("depth"), c.depth_opt);
    hyper_from(meta.at("optimizers").at("blend"), c.blend_opt);
  } catch (const json::exception& e) {
    throw IoError(std::string("checkpoint metadata is malformed: ") + e.what());
  }
  if (config_digest(c.config) != digest) throw IoError("checkpoint config digest mismatch");

  Model& m = c.model;
  const Box& region = m.view.mouth_region;
  m.field = field::FieldParams(c.config.field, 0);
  assign(m.field.parameters(), unpack_arrays(section("field")), "field");
  m.log_depth = ad::parameter(Tensor({m.view.height, m.view.width}));
  assign({m.log_depth}, unpack_arrays(section("log_depth")), "log_depth");
  m.blend = compose::BlendParams(c.config.blend, 0);
  assign(m.blend.parameters(), unpack_arrays(section("blend")), "blend");
  m.expert = sync::ExpertParams(c.config.expert, region.height, region.width, 0);
  assign(m.expert.parameters(), unpack_arrays(section("expert")), "expert");
  m.expert.freeze();
  c.field_opt.m = unpack_arrays(section("opt.field.m"));
  c.field_opt.v = unpack_arrays(section("opt.field.v"));
  c.depth_opt.m = unpack_arrays(section("opt.depth.m"));
  c.depth_opt.v = unpack_arrays(section("opt.depth.v"));
  c.blend_opt.m = unpack_arrays(section("opt.blend.m"));
  c.blend_opt.v = unpack_arrays(section("opt.blend.v"));
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  write_file(path, serialize_checkpoint(c));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return deserialize_checkpoint(bytes);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

std::vector<std::uint8_t> serialize_expert(const sync::ExpertParams& e) {
  const json meta = {{"expert", e.config()}, {"mouth_height", e.mouth_height()}, {"mouth_width", e.mouth_width()}};
  const std::string text = meta.dump();
  Sections sections;
  sections.emplace_back("meta", std::vector<std::uint8_t>(text.begin(), text.end()));
  sections.emplace_back("expert", pack_arrays(values_of(e.parameters())));
  return write_container(fnv1a({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()}), sections);
}

sync::ExpertParams deserialize_expert(std::span<const std::uint8_t> bytes) {
  const Container file = read_container(bytes);
  const auto text = file.section("meta");
  if (fnv1a(text) != file.digest) throw IoError("expert metadata digest mismatch");
  sync::ExpertConfig cfg;
  int h = 0, w = 0;
  try {
    const json meta = json::parse(text.begin(), text.end());
    cfg = meta.at("expert").get<sync::ExpertConfig>();
    h = meta.at("mouth_height").get<int>();
    w = meta.at("mouth_width").get<int>();
  } catch (const json::exception& e) {
    throw IoError(std::string("expert metadata is malformed: ") + e.what());
  }
  sync::ExpertParams e(cfg, h, w, 0);
  assign(e.parameters(), unpack_arrays(file.section("expert")), "expert");
  e.freeze();
  return e;
}

void save_expert(const std::filesystem::path& path, const sync::ExpertParams& e) {
  write_file(path, serialize_expert(e));
}

sync::ExpertParams load_expert(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return deserialize_expert(bytes);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace s2l::pipeline
