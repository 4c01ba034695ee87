#pragma once

// Orchestration: training configuration, the model bundle, the training
// loop, inference, pose-controlled synthesis and the canonical-space warps
// they share.
//
// Data flow of one training step for observed frame o:
//   I_o --(canonical depth)--> canonical space: photometric depth loss and
//   the mouth supervision; field --> canonical mouth; canonical mouth --> o's
//   mouth box; paste, punch holes, blend --> full-frame prediction.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "s2l/compose.hpp"
#include "s2l/field.hpp"
#include "s2l/geometry.hpp"
#include "s2l/losses.hpp"
#include "s2l/optim.hpp"
#include "s2l/sync.hpp"
#include "s2l/synthdata.hpp"

namespace s2l::pipeline {

using Mask = std::vector<std::uint8_t>;

/// Source image of the photometric depth loss: the observed frame, or the
/// composed prediction for that frame.
enum class DepthSource { observed, composed };

struct TrainConfig {
  std::string corpus;
  std::uint64_t seed = 0;
  losses::LossWeights weights;
  double lr_field = 5e-4;
  double lr_depth = 1e-2;
  double lr_blend = 1e-3;
  int iterations = 20000;
  /// Leading steps that update only the canonical depth.
  int warmup = 500;
  /// Frames whose gradients are accumulated per step.
  int frames_per_step = 1;
  /// 0 disables periodic checkpoints.
  int checkpoint_every = 0;
  double r_max = 1.0;
  /// Canonical mouth region = canonical mouth box grown by this fraction.
  double mouth_margin = 0.25;
  DepthSource depth_source = DepthSource::observed;
  field::FieldConfig field;
  compose::BlendConfig blend;
  compose::HoleConfig holes;
  sync::ExpertConfig expert;
  sync::PretrainConfig pretrain;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes);
/// FNV-1a of the config's JSON serialization.
std::uint64_t config_digest(const TrainConfig& c);

std::string git_describe();
/// {seed, config_digest (hex), git_describe}.
nlohmann::json reproducibility(std::uint64_t seed, std::uint64_t digest);

/// Everything about the canonical camera that inference needs.
struct CanonicalView {
  int width = 0;
  int height = 0;
  geometry::Intrinsics k;
  geometry::Pose pose;
  Box mouth_region;
};

/// Mouth box grown by `margin`, then widened (clipped to the image) until
/// both sides reach 16 pixels.
Box mouth_region(const Box& mouth_box, double margin, int width, int height);
CanonicalView make_view(const synth::Corpus& corpus, double margin);
/// Face-region depth of the canonical frame completed by diffusion.
geometry::DepthMap initial_depth(const synth::Corpus& corpus);

struct Model {
  CanonicalView view;
  field::FieldParams field;
  ad::Var log_depth;  // [H,W], canonical frame
  compose::BlendParams blend;
  sync::ExpertParams expert;  // frozen

  geometry::DepthMap depth() const;
};

struct Checkpoint {
  TrainConfig config;
  Model model;
  ad::OptimizerState field_opt, depth_opt, blend_opt;
  std::int64_t iteration = 0;
};

/// Binary layout, all integers little-endian:
///   "S2L1" | u32 version | u64 config digest | u32 section count
///   per section: u32 name length | name | u64 payload length | payload
/// The "meta" payload is JSON; array payloads are u32 count followed by
/// (u32 rank, u32 dims..., f32 values...) per array.
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& c);
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Standalone frozen expert in the same container: a JSON "meta" section
/// (expert config, mouth crop size) and an "expert" array section. The
/// header digest is FNV-1a of the meta text.
std::vector<std::uint8_t> serialize_expert(const sync::ExpertParams& e);
sync::ExpertParams deserialize_expert(std::span<const std::uint8_t> bytes);
void save_expert(const std::filesystem::path& path, const sync::ExpertParams& e);
sync::ExpertParams load_expert(const std::filesystem::path& path);

/// `observed` warped into canonical space over the full canonical grid; the
/// result's mask marks valid samples.
Image warp_to_canonical(const Image& observed, const geometry::Pose& observed_pose, const CanonicalView& view,
                        const geometry::DepthMap& depth_c);

/// Canonical pixel coordinates of every pixel of `target_box` in the
/// observed view, found by inverting the canonical-to-observed mapping.
struct SourceMap {
  ad::Tensor u, v;  // [box.height, box.width]
  Mask valid;
};
SourceMap canonical_sources(const CanonicalView& view, const geometry::DepthMap& depth_c,
                            const geometry::Pose& observed_pose, const Box& target_box);

/// Canonical mouth crops of frames [begin, end) with their features.
sync::SyncDataset canonical_mouth_dataset(const synth::Corpus& corpus, const CanonicalView& view,
                                          const geometry::DepthMap& depth_c, int begin, int end);
/// Mouth crops in canonical space for already composed frames.
std::vector<ad::Tensor> canonical_mouths(const std::vector<Image>& frames, const std::vector<geometry::Pose>& poses,
                                         const CanonicalView& view, const geometry::DepthMap& depth_c);

/// Pre-trains the sync expert on the training split's canonical mouths
/// (warped with the initial depth).
sync::ExpertParams pretrain_sync(const TrainConfig& cfg, const synth::Corpus& corpus,
                                 sync::PretrainReport* report = nullptr);

struct StepMetrics {
  std::int64_t step = 0;
  int frame = 0;
  double l_m = 0.0, l_w = 0.0, l_d = 0.0, l_s = 0.0, total = 0.0;
};

struct TrainHooks {
  std::function<void(const StepMetrics&)> on_step;
  std::function<void(const Checkpoint&)> on_checkpoint;
};

/// Seeded initialization; iteration 0.
Checkpoint initial_checkpoint(const TrainConfig& cfg, const synth::Corpus& corpus, const sync::ExpertParams& expert);
/// Runs cfg.iterations - c.iteration further steps. Throws NumericalError
/// with step diagnostics on a non-finite loss.
void continue_training(Checkpoint& c, const synth::Corpus& corpus, const TrainHooks& hooks = {});
Checkpoint train(const TrainConfig& cfg, const synth::Corpus& corpus, const sync::ExpertParams& expert,
                 const TrainHooks& hooks = {});

struct InferTarget {
  Image frame;
  geometry::Pose pose;
  Box mouth_box;
  double time = 0.0;  // normalized clip time
};

InferTarget target_of(const synth::Corpus& corpus, int index);

/// Renders the canonical mouth for `feature`, maps it into the target's
/// mouth box, pastes over the blanked box and blends. Uses no pixel of the
/// target's mouth box.
Image compose_frame(const Model& m, const synth::SpeechFeature& feature, const InferTarget& target);
std::vector<Image> infer(const Model& m, const std::vector<synth::SpeechFeature>& features,
                         const std::vector<InferTarget>& targets);

/// Canonical mean of training mouths pasted into each target without the
/// field or blending: the reference a speech-driven mouth must beat.
std::vector<Image> mean_mouth_baseline(const Model& m, const synth::Corpus& corpus,
                                       const std::vector<InferTarget>& targets);

/// Held-out metrics. Mouth metrics use the ground-truth box dilated by a
/// quarter. Sync confidence scores the generated frames' canonical mouths
/// against their audio and against a seeded shuffle of it.
struct EvalReport {
  int frames = 0;
  double psnr = 0.0;
  double baseline_psnr = 0.0;
  double ssim = 0.0;
  double lmd = 0.0;
  double sync_confidence = 0.0;
  double shuffled_confidence = 0.0;
  std::vector<double> frame_psnr;
};

/// Infers every held-out frame from its own feature, or from `features`
/// (one per held-out frame) when given.
EvalReport evaluate(const Model& m, const synth::Corpus& corpus, std::uint64_t shuffle_seed,
                    const std::vector<synth::SpeechFeature>* features = nullptr);
void to_json(nlohmann::json& j, const EvalReport& r);

struct PoseBound {
  double max_rotation_deg = 6.0;
  double max_translation = 0.15;
};

struct PoseControlFrame {
  Image image;
  Mask holes;  // pixels filled by the blend network
  double hole_fraction = 0.0;
  int source_frame = 0;
  double rotation_deviation_deg = 0.0;
  double translation_deviation = 0.0;
  bool beyond_bound = false;
};

/// Index of the training frame whose pose is nearest (Frobenius) to `pose`.
int nearest_training_frame(const synth::Corpus& corpus, const geometry::Pose& pose);

/// Composes each frame in the nearest training view, then forward-warps it
/// to the requested pose and fills the holes with the blend network.
std::vector<PoseControlFrame> pose_control(const Model& m, const synth::Corpus& corpus,
                                           const std::vector<synth::SpeechFeature>& features,
                                           const std::vector<geometry::Pose>& poses, const std::vector<double>& times,
                                           const PoseBound& bound = {});

}  // namespace s2l::pipeline
