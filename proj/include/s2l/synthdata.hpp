#pragma once

// Procedural ground-truth corpus: a ray-traced textured ellipsoid head with
// a speech-driven mouth, a smooth rigid pose trajectory, exact depth, mouth
// keypoints and per-frame speech features.

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "json.hpp"
#include "s2l/geometry.hpp"
#include "s2l/image.hpp"

namespace s2l::synth {

inline constexpr int kFeatureDim = 64;
inline constexpr int kSampleRate = 16000;
inline constexpr int kManifestVersion = 1;
/// Scene units per count of the 16-bit depth export (0 marks invalid).
inline constexpr double kDepthScale = 1e-4;

using SpeechFeature = std::array<float, kFeatureDim>;

struct SceneConfig {
  int width = 128;
  int height = 128;
  /// Focal length in pixels is focal_scale * width.
  double focal_scale = 1.2;
  Eigen::Vector3d semi_axes{0.9, 1.15, 0.95};
  double head_distance = 4.0;
  std::uint64_t texture_seed = 7;
  double max_rotation_deg = 10.0;
  /// Translation amplitude as a fraction of head_distance.
  double max_translation_frac = 0.05;
  int clip_length = 750;
  double fps = 25.0;
  double train_fraction = 0.9;
  /// Face region (ellipse in head-frame x/y, relative to the semi-axes)
  /// whose depth is exported, standing in for face-only model coverage.
  double face_mask_radius = 0.8;
  double speech_amplitude = 1.0;

  geometry::Intrinsics intrinsics() const;
  void validate() const;
  int train_count() const;
};

void to_json(nlohmann::json& j, const SceneConfig& c);
void from_json(const nlohmann::json& j, SceneConfig& c);

/// Mouth layout in head-frame coordinates (front surface, y down).
struct MouthGeometry {
  double center_y = 0.55;
  double lip_half_width = 0.5;
  double lip_half_height = 0.2;
  double aperture_half_width = 0.4;
  double seam_half_height = 0.03;
  double max_open_half_height = 0.13;
  double edge = 0.02;

  double aperture_half_height(double openness) const { return seam_half_height + openness * max_open_half_height; }
};

inline constexpr std::array<float, 3> kLipColor{0.62f, 0.26f, 0.30f};
inline constexpr std::array<float, 3> kApertureColor{0.07f, 0.03f, 0.04f};
inline constexpr std::array<float, 3> kBackground{0.25f, 0.30f, 0.35f};
/// Gray level halfway between lip and aperture.
inline constexpr float kApertureThreshold = (0.62f + 0.26f + 0.30f + 0.07f + 0.03f + 0.04f) / 6.0f;

/// Seeded synthetic speech: amplitude-modulated carriers. The modulation
/// envelope drives mouth openness.
class SpeechModel {
 public:
  explicit SpeechModel(std::uint64_t seed, double amplitude = 1.0);

  /// Raw signal at time t (seconds).
  double sample(double t) const;
  /// Modulation envelope in [0,1] (before amplitude scaling).
  double envelope(double t) const;
  /// Windowed envelope average times amplitude, clamped to [0,1].
  double openness(double t) const;
  /// Filterbank magnitudes of the 40 ms window centred at t.
  SpeechFeature feature(double t) const;

 private:
  struct Tone {
    double freq, amp, phase;
  };
  std::vector<Tone> carriers_;
  std::vector<Tone> modulators_;
  double bias_ = 0.0;
  double norm_ = 1.0;
  double amplitude_ = 1.0;
};

inline constexpr int kWindowSamples = 640;

/// 64 triangular filterbank magnitudes of a Hann-windowed block of samples.
/// This is the entry point for recorded audio as well.
SpeechFeature filterbank_features(std::span<const double> window, double sample_rate);

struct SpeechSample {
  SpeechFeature feature{};
  double openness = 0.0;
};
SpeechSample speech_signal(double t, std::uint64_t seed, double amplitude = 1.0);

struct Keypoints {
  Eigen::Vector2d left{0, 0}, right{0, 0}, top{0, 0}, bottom{0, 0};
};

struct RenderedFrame {
  Image image;
  geometry::DepthMap depth;       // full ground truth
  geometry::DepthMap face_depth;  // depth withheld outside the face region
  Keypoints keypoints;
  Box mouth_box;
};

RenderedFrame render_frame(const SceneConfig& cfg, const geometry::Pose& pose, double openness);

/// Pose of the head at time t along the seeded trajectory.
geometry::Pose trajectory_pose(const SceneConfig& cfg, std::uint64_t seed, double t);

struct FrameRecord {
  int index = 0;
  double timestamp = 0.0;  // seconds
  geometry::Pose pose;
  Image image;
  geometry::DepthMap depth;
  geometry::DepthMap face_depth;
  Box mouth_box;
  Keypoints keypoints;
  double openness = 0.0;
  SpeechFeature feature{};
};

struct Corpus {
  SceneConfig config;
  std::uint64_t seed = 0;
  std::vector<FrameRecord> frames;
  int canonical_index = 0;
  int train_count = 0;

  const FrameRecord& canonical() const { return frames.at(static_cast<std::size_t>(canonical_index)); }
  geometry::Intrinsics intrinsics() const { return config.intrinsics(); }
  /// Normalized time in [0,1] used as the field's timestamp input.
  double normalized_time(int index) const;
};

/// Training frame whose pose is nearest (Frobenius) the mean training pose.
int choose_canonical(const std::vector<geometry::Pose>& train_poses);

Corpus generate_corpus(const SceneConfig& cfg, std::uint64_t seed);

/// Writes PNG frames, 16-bit depth PNGs and manifest.json; returns the manifest.
nlohmann::json write_corpus(const Corpus& corpus, const std::filesystem::path& out_dir,
                            const nlohmann::json& reproducibility = nlohmann::json::object());
Corpus load_corpus(const std::filesystem::path& dir);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);
std::string encode_feature(const SpeechFeature& f);
SpeechFeature decode_feature(const std::string& text);

}  // namespace s2l::synth
