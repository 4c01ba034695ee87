#include "s2l/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <string_view>

#include "s2l/error.hpp"

namespace s2l::synth {

using geometry::DepthMap;
using geometry::Pose;

geometry::Intrinsics SceneConfig::intrinsics() const {
  const double f = focal_scale * width;
  return {f, f, (width - 1) / 2.0, (height - 1) / 2.0};
}

void SceneConfig::validate() const {
  if (width < 16 || height < 16) throw ConfigError("scene image must be at least 16x16");
  if (!(focal_scale > 0.0) || !(head_distance > 0.0)) throw ConfigError("focal_scale and head_distance must be positive");
  if (!(semi_axes.minCoeff() > 0.0)) throw ConfigError("ellipsoid semi-axes must be positive");
  if (semi_axes.z() >= head_distance) throw ConfigError("camera inside the head");
  if (max_rotation_deg < 0.0 || max_rotation_deg > 10.0) throw ConfigError("max_rotation_deg must be in [0,10]");
  if (max_translation_frac < 0.0 || max_translation_frac > 0.05)
    throw ConfigError("max_translation_frac must be in [0,0.05]");
  if (clip_length < 2) throw ConfigError("clip_length must be at least 2");
  if (!(fps > 0.0)) throw ConfigError("fps must be positive");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train_fraction must be in (0,1)");
  if (!(face_mask_radius > 0.0 && face_mask_radius <= 1.0)) throw ConfigError("face_mask_radius must be in (0,1]");
  if (speech_amplitude < 0.0) throw ConfigError("speech_amplitude must be nonnegative");
  intrinsics().validate(width, height);
}

int SceneConfig::train_count() const {
  return std::clamp(static_cast<int>(std::lround(train_fraction * clip_length)), 1, clip_length - 1);
}

void to_json(nlohmann::json& j, const SceneConfig& c) {
  j = nlohmann::json{{"width", c.width},
                     {"height", c.height},
                     {"focal_scale", c.focal_scale},
                     {"semi_axes", {c.semi_axes.x(), c.semi_axes.y(), c.semi_axes.z()}},
                     {"head_distance", c.head_distance},
                     {"texture_seed", c.texture_seed},
                     {"max_rotation_deg", c.max_rotation_deg},
                     {"max_translation_frac", c.max_translation_frac},
                     {"clip_length", c.clip_length},
                     {"fps", c.fps},
                     {"train_fraction", c.train_fraction},
                     {"face_mask_radius", c.face_mask_radius},
                     {"speech_amplitude", c.speech_amplitude}};
}

void from_json(const nlohmann::json& j, SceneConfig& c) {
  static constexpr std::string_view known[] = {
      "width",        "height",       "focal_scale",       "semi_axes",      "head_distance",
      "texture_seed", "max_rotation_deg", "max_translation_frac", "clip_length", "fps",
      "train_fraction", "face_mask_radius", "speech_amplitude"};
  if (!j.is_object()) throw ConfigError("scene config must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (std::find(std::begin(known), std::end(known), key) == std::end(known))
      throw ConfigError("unknown scene config key: " + key);
  c = SceneConfig{};
  c.width = j.value("width", c.width);
  c.height = j.value("height", c.height);
  c.focal_scale = j.value("focal_scale", c.focal_scale);
  if (j.contains("semi_axes")) {
    auto a = j.at("semi_axes").get<std::vector<double>>();
    if (a.size() != 3) throw ConfigError("semi_axes needs 3 values");
    c.semi_axes = {a[0], a[1], a[2]};
  }
  c.head_distance = j.value("head_distance", c.head_distance);
  c.texture_seed = j.value("texture_seed", c.texture_seed);
  c.max_rotation_deg = j.value("max_rotation_deg", c.max_rotation_deg);
  c.max_translation_frac = j.value("max_translation_frac", c.max_translation_frac);
  c.clip_length = j.value("clip_length", c.clip_length);
  c.fps = j.value("fps", c.fps);
  c.train_fraction = j.value("train_fraction", c.train_fraction);
  c.face_mask_radius = j.value("face_mask_radius", c.face_mask_radius);
  c.speech_amplitude = j.value("speech_amplitude", c.speech_amplitude);
}

// ---------------------------------------------------------------------------
// Speech

SpeechModel::SpeechModel(std::uint64_t seed, double amplitude) : amplitude_(amplitude) {
  std::mt19937_64 rng(seed ^ 0x5eec4u);
  std::uniform_int_distribution<int> count(4, 8);
  std::uniform_real_distribution<double> carrier(150.0, 3500.0), amp(0.5, 1.0), phase(0.0, 2.0 * M_PI),
      syllable(0.8, 3.5);
  const int n = count(rng);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    carriers_.push_back({carrier(rng), amp(rng), phase(rng)});
    total += carriers_.back().amp;
  }
  for (Tone& c : carriers_) c.amp /= total;
  double mod_total = 0.0;
  for (int i = 0; i < 3; ++i) {
    modulators_.push_back({syllable(rng), amp(rng), phase(rng)});
    mod_total += modulators_.back().amp;
  }
  bias_ = 0.25 * mod_total;
  norm_ = mod_total + bias_;
}

double SpeechModel::envelope(double t) const {
  double s = bias_;
  for (const Tone& m : modulators_) s += m.amp * std::sin(2.0 * M_PI * m.freq * t + m.phase);
  return std::max(0.0, s) / norm_;
}

double SpeechModel::sample(double t) const {
  double c = 0.0;
  for (const Tone& k : carriers_) c += k.amp * std::sin(2.0 * M_PI * k.freq * t + k.phase);
  return amplitude_ * envelope(t) * c;
}

namespace {

double hann(int n, int size) { return 0.5 - 0.5 * std::cos(2.0 * M_PI * (n + 0.5) / size); }

}  // namespace

double SpeechModel::openness(double t) const {
  double acc = 0.0, wsum = 0.0;
  for (int n = 0; n < kWindowSamples; ++n) {
    const double tau = t + (n - kWindowSamples / 2) / static_cast<double>(kSampleRate);
    const double w = hann(n, kWindowSamples);
    acc += w * envelope(tau);
    wsum += w;
  }
  return std::clamp(amplitude_ * acc / wsum, 0.0, 1.0);
}

SpeechFeature SpeechModel::feature(double t) const {
  std::vector<double> window(kWindowSamples);
  for (int n = 0; n < kWindowSamples; ++n)
    window[static_cast<std::size_t>(n)] = sample(t + (n - kWindowSamples / 2) / static_cast<double>(kSampleRate));
  return filterbank_features(window, kSampleRate);
}

SpeechFeature filterbank_features(std::span<const double> window, double sample_rate) {
  // Triangular filters on a linear frequency axis, 100..3880 Hz, each
  // integrated over five DFT probes.
  static constexpr std::array<double, 5> kOffsets{-48.0, -24.0, 0.0, 24.0, 48.0};
  static constexpr std::array<double, 5> kWeights{0.2, 0.6, 1.0, 0.6, 0.2};
  const int n = static_cast<int>(window.size());
  std::vector<double> tapered(window.size());
  for (int i = 0; i < n; ++i) tapered[static_cast<std::size_t>(i)] = hann(i, n) * window[static_cast<std::size_t>(i)];
  SpeechFeature out{};
  // A unit sinusoid under a Hann window has DFT magnitude n/4.
  const double gain = 4.0 / n;
  for (int b = 0; b < kFeatureDim; ++b) {
    const double center = 100.0 + 60.0 * b;
    double energy = 0.0;
    for (std::size_t p = 0; p < kOffsets.size(); ++p) {
      const double omega = 2.0 * M_PI * (center + kOffsets[p]) / sample_rate;
      double re = 0.0, im = 0.0;
      for (int i = 0; i < n; ++i) {
        re += tapered[static_cast<std::size_t>(i)] * std::cos(omega * i);
        im -= tapered[static_cast<std::size_t>(i)] * std::sin(omega * i);
      }
      energy += kWeights[p] * (re * re + im * im);
    }
    out[static_cast<std::size_t>(b)] = static_cast<float>(gain * std::sqrt(energy / 2.6));
  }
  return out;
}

SpeechSample speech_signal(double t, std::uint64_t seed, double amplitude) {
  if (t < 0.0) throw ConfigError("speech_signal: negative time");
  SpeechModel model(seed, amplitude);
  return {model.feature(t), model.openness(t)};
}

// ---------------------------------------------------------------------------
// Rendering

namespace {

struct TextureWave {
  Eigen::Vector3d dir;
  double omega, phase;
  Eigen::Vector3d color;
};

std::vector<TextureWave> texture_waves(std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x7e47u);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> omega(10.0, 25.0), phase(0.0, 2.0 * M_PI), amp(0.03, 0.07);
  std::vector<TextureWave> waves;
  for (int i = 0; i < 6; ++i) {
    Eigen::Vector3d d(gauss(rng), gauss(rng), gauss(rng));
    d.normalize();
    const double a = amp(rng);
    Eigen::Vector3d col(a * (0.8 + 0.4 * std::abs(gauss(rng)) / 3.0), a, a * (0.8 + 0.4 * std::abs(gauss(rng)) / 3.0));
    waves.push_back({d, omega(rng), phase(rng), col});
  }
  return waves;
}

double smooth_inside(double signed_dist, double edge) {
  // 1 inside, 0 outside, smoothstep across [-edge, edge].
  const double x = std::clamp((signed_dist + edge) / (2.0 * edge), 0.0, 1.0);
  return 1.0 - x * x * (3.0 - 2.0 * x);
}

double ellipse_signed_distance(double dx, double dy, double hw, double hh) {
  const double r = std::sqrt((dx / hw) * (dx / hw) + (dy / hh) * (dy / hh));
  return (r - 1.0) * std::min(hw, hh);
}

Eigen::Vector3d surface_front(const Eigen::Vector3d& axes, double x, double y) {
  const double q = 1.0 - (x / axes.x()) * (x / axes.x()) - (y / axes.y()) * (y / axes.y());
  return {x, y, -axes.z() * std::sqrt(std::max(0.0, q))};
}

Eigen::Vector2d project(const geometry::Intrinsics& k, const Pose& pose, const Eigen::Vector3d& head_point) {
  const Eigen::Vector3d c = pose.apply(head_point);
  return {k.fx * c.x() / c.z() + k.cx, k.fy * c.y() / c.z() + k.cy};
}

}  // namespace

RenderedFrame render_frame(const SceneConfig& cfg, const Pose& pose, double openness) {
  const int w = cfg.width, h = cfg.height;
  const geometry::Intrinsics k = cfg.intrinsics();
  const Eigen::Vector3d& axes = cfg.semi_axes;
  const auto waves = texture_waves(cfg.texture_seed);
  const MouthGeometry mouth;
  const double ap_hh = mouth.aperture_half_height(std::clamp(openness, 0.0, 1.0));
  const Eigen::Matrix3d rt = pose.rotation().transpose();
  const Eigen::Vector3d origin = -(rt * pose.translation());
  const Eigen::Vector3d o = origin.cwiseQuotient(axes);

  RenderedFrame out;
  out.image = Image(h, w);
  out.depth = DepthMap(h, w);
  out.face_depth = DepthMap(h, w);
  const Eigen::Vector3d skin(0.78, 0.60, 0.50);
  std::size_t hits = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t i = out.depth.index(y, x);
      const Eigen::Vector3d ray = k.unproject(x, y);  // z component 1
      const Eigen::Vector3d d = (rt * ray).cwiseQuotient(axes);
      const double a = d.squaredNorm(), b = 2.0 * o.dot(d), c = o.squaredNorm() - 1.0;
      const double disc = b * b - 4.0 * a * c;
      Eigen::Vector3d color(kBackground[0], kBackground[1], kBackground[2]);
      if (disc >= 0.0) {
        const double s = (-b - std::sqrt(disc)) / (2.0 * a);
        if (s > 0.0) {
          ++hits;
          const Eigen::Vector3d p = origin + s * (rt * ray);  // head frame
          out.depth.values[i] = s;  // camera-space z of the hit, since ray.z == 1
          out.depth.valid[i] = 1;
          const double fy = (p.y() - 0.2) / axes.y(), fx = p.x() / axes.x();
          if (p.z() < 0.0 && fx * fx + fy * fy < cfg.face_mask_radius * cfg.face_mask_radius) {
            out.face_depth.values[i] = s;
            out.face_depth.valid[i] = 1;
          }
          color = skin;
          for (const TextureWave& wv : waves) color += wv.color * std::sin(wv.omega * wv.dir.dot(p) + wv.phase);
          if (p.z() < 0.0) {
            const double dy = p.y() - mouth.center_y;
            const double lip = smooth_inside(
                ellipse_signed_distance(p.x(), dy, mouth.lip_half_width, mouth.lip_half_height), mouth.edge);
            const double ap = smooth_inside(ellipse_signed_distance(p.x(), dy, mouth.aperture_half_width, ap_hh),
                                            mouth.edge);
            const Eigen::Vector3d lip_c(kLipColor[0], kLipColor[1], kLipColor[2]);
            const Eigen::Vector3d ap_c(kApertureColor[0], kApertureColor[1], kApertureColor[2]);
            color = (1.0 - lip) * color + lip * lip_c;
            color = (1.0 - ap) * color + ap * ap_c;
          }
        }
      }
      for (int ch = 0; ch < 3; ++ch) out.image.at(ch, y, x) = static_cast<float>(std::clamp(color[ch], 0.0, 1.0));
    }
  if (hits == 0) throw ConfigError("render_frame: head is entirely outside the frame");

  out.keypoints.left = project(k, pose, surface_front(axes, -mouth.lip_half_width, mouth.center_y));
  out.keypoints.right = project(k, pose, surface_front(axes, mouth.lip_half_width, mouth.center_y));
  out.keypoints.top = project(k, pose, surface_front(axes, 0.0, mouth.center_y - ap_hh));
  out.keypoints.bottom = project(k, pose, surface_front(axes, 0.0, mouth.center_y + ap_hh));

  double xmin = 1e9, xmax = -1e9, ymin = 1e9, ymax = -1e9;
  for (int s = 0; s < 64; ++s) {
    const double th = 2.0 * M_PI * s / 64.0;
    const Eigen::Vector2d q = project(
        k, pose,
        surface_front(axes, mouth.lip_half_width * std::cos(th), mouth.center_y + mouth.lip_half_height * std::sin(th)));
    xmin = std::min(xmin, q.x());
    xmax = std::max(xmax, q.x());
    ymin = std::min(ymin, q.y());
    ymax = std::max(ymax, q.y());
  }
  const int bx0 = std::max(0, static_cast<int>(std::floor(xmin)) - 1);
  const int by0 = std::max(0, static_cast<int>(std::floor(ymin)) - 1);
  const int bx1 = std::min(w, static_cast<int>(std::ceil(xmax)) + 2);
  const int by1 = std::min(h, static_cast<int>(std::ceil(ymax)) + 2);
  out.mouth_box = {bx0, by0, bx1 - bx0, by1 - by0};
  return out;
}

Pose trajectory_pose(const SceneConfig& cfg, std::uint64_t seed, double t) {
  std::mt19937_64 rng(seed ^ 0x90a5u);
  std::uniform_real_distribution<double> period(2.5, 9.0), phase(0.0, 2.0 * M_PI);
  // Each channel is a normalized two-tone oscillation in [-1, 1].
  auto channel = [&] {
    const double p1 = period(rng), p2 = period(rng), f1 = phase(rng), f2 = phase(rng);
    return 0.65 * std::sin(2.0 * M_PI * t / p1 + f1) + 0.35 * std::sin(2.0 * M_PI * t / p2 + f2);
  };
  const double rot = cfg.max_rotation_deg * M_PI / 180.0;
  // Per-axis shares keep the combined rotation angle within the bound.
  const double yaw = 0.6 * rot * channel();
  const double pitch = 0.5 * rot * channel();
  const double roll = 0.3 * rot * channel();
  const double tr = cfg.max_translation_frac * cfg.head_distance;
  const Eigen::Vector3d t_off(0.5 * tr * channel(), 0.5 * tr * channel(), 0.6 * tr * channel());
  return Pose::from_euler(yaw, pitch, roll, Eigen::Vector3d(0.0, 0.0, cfg.head_distance) + t_off);
}

double Corpus::normalized_time(int index) const {
  const int n = static_cast<int>(frames.size());
  return n > 1 ? static_cast<double>(index) / (n - 1) : 0.0;
}

int choose_canonical(const std::vector<Pose>& train_poses) {
  if (train_poses.empty()) throw ConfigError("choose_canonical: no poses");
  Eigen::Matrix4d mean = Eigen::Matrix4d::Zero();
  for (const Pose& p : train_poses) mean += p.matrix();
  mean /= static_cast<double>(train_poses.size());
  int best = 0;
  double best_d = 1e300;
  for (std::size_t i = 0; i < train_poses.size(); ++i) {
    const double d = (train_poses[i].matrix() - mean).norm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(i);
    }
  }
  return best;
}

namespace {

DepthMap quantize_depth(const DepthMap& d) {
  DepthMap out = d;
  for (std::size_t i = 0; i < out.values.size(); ++i)
    if (out.valid[i]) out.values[i] = std::round(out.values[i] / kDepthScale) * kDepthScale;
  return out;
}

}  // namespace

Corpus generate_corpus(const SceneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Corpus corpus;
  corpus.config = cfg;
  corpus.seed = seed;
  corpus.train_count = cfg.train_count();
  const SpeechModel speech(seed, cfg.speech_amplitude);
  corpus.frames.resize(static_cast<std::size_t>(cfg.clip_length));
  for (int i = 0; i < cfg.clip_length; ++i) {
    FrameRecord& f = corpus.frames[static_cast<std::size_t>(i)];
    f.index = i;
    f.timestamp = i / cfg.fps;
    f.pose = trajectory_pose(cfg, seed, f.timestamp);
    f.openness = speech.openness(f.timestamp);
    f.feature = speech.feature(f.timestamp);
    RenderedFrame r = render_frame(cfg, f.pose, f.openness);
    // Stored at export precision so in-memory and reloaded corpora agree.
    f.image = quantize8(r.image);
    f.depth = quantize_depth(r.depth);
    f.face_depth = quantize_depth(r.face_depth);
    f.keypoints = r.keypoints;
    f.mouth_box = r.mouth_box;
  }
  std::vector<Pose> train_poses;
  for (int i = 0; i < corpus.train_count; ++i) train_poses.push_back(corpus.frames[static_cast<std::size_t>(i)].pose);
  corpus.canonical_index = choose_canonical(train_poses);
  return corpus;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string frame_name(const char* dir, int index) {
  std::ostringstream os;
  os << dir << '/' << std::setw(6) << std::setfill('0') << index << ".png";
  return os.str();
}

std::vector<std::uint16_t> encode_depth(const DepthMap& d) {
  std::vector<std::uint16_t> out(d.values.size(), 0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!d.valid[i]) continue;
    const double q = std::round(d.values[i] / kDepthScale);
    if (q < 1.0 || q > 65535.0) throw ConfigError("depth value outside the 16-bit export range");
    out[i] = static_cast<std::uint16_t>(q);
  }
  return out;
}

DepthMap decode_depth(const std::vector<std::uint16_t>& raw, int h, int w) {
  DepthMap d(h, w);
  for (std::size_t i = 0; i < raw.size(); ++i)
    if (raw[i]) {
      d.values[i] = raw[i] * kDepthScale;
      d.valid[i] = 1;
    }
  return d;
}

nlohmann::json point_json(const Eigen::Vector2d& p) { return {p.x(), p.y()}; }

Eigen::Vector2d point_from(const nlohmann::json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

}  // namespace

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  for (std::size_t i = 0; i < bytes.size(); i += 3) {
    const std::uint32_t b0 = bytes[i];
    const std::uint32_t b1 = i + 1 < bytes.size() ? bytes[i + 1] : 0;
    const std::uint32_t b2 = i + 2 < bytes.size() ? bytes[i + 2] : 0;
    const std::uint32_t v = (b0 << 16) | (b1 << 8) | b2;
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += i + 1 < bytes.size() ? kB64[(v >> 6) & 63] : '=';
    out += i + 2 < bytes.size() ? kB64[v & 63] : '=';
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  auto value = [](char c) -> int {
    const char* p = std::strchr(kB64, c);
    return (c && p) ? static_cast<int>(p - kB64) : -1;
  };
  if (text.size() % 4 != 0) throw ConfigError("base64 length must be a multiple of 4");
  std::vector<std::uint8_t> out;
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = text[i + static_cast<std::size_t>(k)];
      if (c == '=') {
        v[k] = 0;
        ++pad;
      } else {
        v[k] = value(c);
        if (v[k] < 0) throw ConfigError("invalid base64 character");
      }
    }
    const std::uint32_t n = (static_cast<std::uint32_t>(v[0]) << 18) | (static_cast<std::uint32_t>(v[1]) << 12) |
                            (static_cast<std::uint32_t>(v[2]) << 6) | static_cast<std::uint32_t>(v[3]);
    out.push_back(static_cast<std::uint8_t>(n >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>((n >> 8) & 0xff));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(n & 0xff));
  }
  return out;
}

std::string encode_feature(const SpeechFeature& f) {
  std::vector<std::uint8_t> bytes(f.size() * 4);
  for (std::size_t i = 0; i < f.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, &f[i], 4);
    for (int b = 0; b < 4; ++b) bytes[i * 4 + static_cast<std::size_t>(b)] = static_cast<std::uint8_t>(bits >> (8 * b));
  }
  return base64_encode(bytes);
}

SpeechFeature decode_feature(const std::string& text) {
  const auto bytes = base64_decode(text);
  if (bytes.size() != kFeatureDim * 4) throw ConfigError("feature must hold 64 little-endian float32 values");
  SpeechFeature f{};
  for (std::size_t i = 0; i < f.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[i * 4 + static_cast<std::size_t>(b)]) << (8 * b);
    std::memcpy(&f[i], &bits, 4);
  }
  return f;
}

nlohmann::json write_corpus(const Corpus& corpus, const std::filesystem::path& out_dir,
                            const nlohmann::json& reproducibility) {
  namespace fs = std::filesystem;
  std::error_code ec;
  for (const char* sub : {"frames", "depth_face", "depth_full"}) {
    fs::create_directories(out_dir / sub, ec);
    if (ec) throw IoError("cannot create " + (out_dir / sub).string() + ": " + ec.message());
  }
  const geometry::Intrinsics k = corpus.intrinsics();
  nlohmann::json m;
  m["schema_version"] = kManifestVersion;
  m["seed"] = corpus.seed;
  m["scene"] = corpus.config;
  m["width"] = corpus.config.width;
  m["height"] = corpus.config.height;
  m["fps"] = corpus.config.fps;
  m["intrinsics"] = {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}};
  m["canonical_index"] = corpus.canonical_index;
  m["train_count"] = corpus.train_count;
  m["depth_encoding"] = {{"format", "png16"}, {"scale", kDepthScale}, {"invalid", 0}};
  m["feature_encoding"] = {{"format", "base64-f32le"}, {"dim", kFeatureDim}};
  m["pose_layout"] = "row-major 4x4, head frame to camera frame";
  nlohmann::json frames = nlohmann::json::array();
  for (const FrameRecord& f : corpus.frames) {
    const std::string img = frame_name("frames", f.index);
    const std::string dface = frame_name("depth_face", f.index);
    const std::string dfull = frame_name("depth_full", f.index);
    write_png(out_dir / img, f.image);
    write_png16(out_dir / dface, f.face_depth.height, f.face_depth.width, encode_depth(f.face_depth));
    write_png16(out_dir / dfull, f.depth.height, f.depth.width, encode_depth(f.depth));
    frames.push_back({{"index", f.index},
                      {"timestamp", f.timestamp},
                      {"image", img},
                      {"depth_face", dface},
                      {"depth_full", dfull},
                      {"pose", f.pose.row_major()},
                      {"mouth_box", {f.mouth_box.x0, f.mouth_box.y0, f.mouth_box.width, f.mouth_box.height}},
                      {"keypoints",
                       {{"left", point_json(f.keypoints.left)},
                        {"right", point_json(f.keypoints.right)},
                        {"top", point_json(f.keypoints.top)},
                        {"bottom", point_json(f.keypoints.bottom)}}},
                      {"openness", f.openness},
                      {"feature", encode_feature(f.feature)}});
  }
  m["frames"] = std::move(frames);
  m["reproducibility"] = reproducibility;
  std::ofstream os(out_dir / "manifest.json");
  if (!os) throw IoError("cannot write " + (out_dir / "manifest.json").string());
  os << m.dump(1) << '\n';
  if (!os) throw IoError("write failed for " + (out_dir / "manifest.json").string());
  return m;
}

Corpus load_corpus(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream is(manifest_path);
  if (!is) throw IoError("cannot open " + manifest_path.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(manifest_path.string() + ": " + e.what());
  }
  if (m.value("schema_version", 0) != kManifestVersion)
    throw ConfigError(manifest_path.string() + ": unsupported schema_version");
  Corpus c;
  c.config = m.at("scene").get<SceneConfig>();
  c.seed = m.at("seed").get<std::uint64_t>();
  c.canonical_index = m.at("canonical_index").get<int>();
  c.train_count = m.at("train_count").get<int>();
  for (const auto& jf : m.at("frames")) {
    FrameRecord f;
    f.index = jf.at("index").get<int>();
    f.timestamp = jf.at("timestamp").get<double>();
    f.pose = Pose::from_row_major(jf.at("pose").get<std::vector<double>>());
    try {
      f.image = read_png(dir / jf.at("image").get<std::string>());
      int h = 0, w = 0;
      auto raw = read_png16(dir / jf.at("depth_face").get<std::string>(), h, w);
      f.face_depth = decode_depth(raw, h, w);
      raw = read_png16(dir / jf.at("depth_full").get<std::string>(), h, w);
      f.depth = decode_depth(raw, h, w);
    } catch (const IoError& e) {
      throw IoError(std::string(e.what()) + " (frame " + std::to_string(f.index) + ")");
    }
    const auto box = jf.at("mouth_box").get<std::vector<int>>();
    f.mouth_box = {box.at(0), box.at(1), box.at(2), box.at(3)};
    const auto& kp = jf.at("keypoints");
    f.keypoints = {point_from(kp.at("left")), point_from(kp.at("right")), point_from(kp.at("top")),
                   point_from(kp.at("bottom"))};
    f.openness = jf.at("openness").get<double>();
    f.feature = decode_feature(jf.at("feature").get<std::string>());
    c.frames.push_back(std::move(f));
  }
  if (c.frames.empty() || c.canonical_index < 0 || c.canonical_index >= static_cast<int>(c.frames.size()))
    throw ConfigError(manifest_path.string() + ": bad canonical_index");
  return c;
}

}  // namespace s2l::synth
