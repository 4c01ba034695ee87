#pragma once

// Audio-visual sync expert: paired encoders that embed a window of mouth
// crops and the matching window of speech features into a shared space,
// the contrastive sync loss over their cosine, seeded pre-training and the
// offset-sweep confidence score.

#include <cstdint>
#include <vector>

#include "json.hpp"
#include "s2l/autodiff.hpp"
#include "s2l/synthdata.hpp"

namespace s2l::sync {

struct ExpertConfig {
  int window = 5;
  int feature_dim = synth::kFeatureDim;
  int embed_dim = 64;
  int conv_channels = 32;
  int audio_hidden = 128;

  void validate() const;
};

void to_json(nlohmann::json& j, const ExpertConfig& c);
void from_json(const nlohmann::json& j, ExpertConfig& c);

class ExpertParams {
 public:
  ExpertParams() = default;
  /// Mouth crops are [3, mouth_height, mouth_width]. With `zero_final` the
  /// last layer of both encoders starts at zero.
  ExpertParams(const ExpertConfig& cfg, int mouth_height, int mouth_width, std::uint64_t seed, bool zero_final = false);

  const ExpertConfig& config() const { return cfg_; }
  int mouth_height() const { return mouth_h_; }
  int mouth_width() const { return mouth_w_; }
  /// Image encoder tensors followed by audio encoder tensors.
  std::vector<ad::Var> parameters() const;
  bool frozen() const { return frozen_; }
  /// Replaces every tensor with a constant copy; no gradient reaches them.
  void freeze();
  /// Deep copy with independent storage.
  ExpertParams clone() const;

  // image: conv1, conv2, fc1, fc2; audio: fc1, fc2
  std::vector<ad::Var> image_w, image_b, audio_w, audio_b;

 private:
  ExpertConfig cfg_;
  int mouth_h_ = 0;
  int mouth_w_ = 0;
  bool frozen_ = false;
};

/// frames [N, 3*window, h, w] (window frames stacked on channels) -> [N, embed].
ad::Var encode_image_batch(const ExpertParams& p, const ad::Var& frames);
/// features [N, window*feature_dim] -> [N, embed].
ad::Var encode_audio_batch(const ExpertParams& p, const ad::Var& features);

/// `frames` holds `window` crops of shape [3,h,w] -> [embed].
ad::Var encode_image_window(const ExpertParams& p, const std::vector<ad::Var>& frames);
ad::Var encode_audio_window(const ExpertParams& p, const std::vector<synth::SpeechFeature>& features);

/// Row-wise cosine of [N,D] pairs -> [N]. Throws ConfigError on a zero row.
ad::Var cosine_rows(const ad::Var& a, const ad::Var& b);

/// y * (1 - cos) + (1 - y) * max(0, cos), averaged over rows. Embeddings are
/// [D] or [N,D]; `labels` has one entry per row.
ad::Var sync_loss(const ad::Var& image_embed, const ad::Var& audio_embed, const std::vector<double>& labels);
ad::Var sync_loss(const ad::Var& image_embed, const ad::Var& audio_embed, double label);

/// Time-ordered mouth crops in canonical space with their speech features.
struct SyncDataset {
  std::vector<ad::Tensor> mouths;  // [3,h,w]
  std::vector<synth::SpeechFeature> features;

  std::size_t size() const { return mouths.size(); }
};

/// Stacks crops [start, start+window) into one [3*window, h, w] block
/// centred on zero.
ad::Tensor stack_window(const std::vector<ad::Tensor>& mouths, int start, int window);
/// Flattens features [start, start+window) into [window*dim].
ad::Tensor stack_features(const std::vector<synth::SpeechFeature>& features, int start, int window);

struct PretrainConfig {
  int epochs = 30;
  int batch = 32;
  double lr = 1e-3;
  /// Negatives pair a window with audio shifted by min_shift..max_shift frames.
  int min_shift = 3;
  int max_shift = 12;
  bool use_negatives = true;

  void validate() const;
};

void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);

struct MarginReport {
  double positive_cos = 0.0;
  double negative_cos = 0.0;
  double margin = 0.0;
  int positives = 0;
  int negatives = 0;
};

struct PretrainReport {
  std::vector<double> epoch_loss;
};

/// Trains both encoders on `train` and returns them frozen. Deterministic in
/// `seed`. Throws ConfigError when `train` has fewer than 2*window frames.
ExpertParams pretrain_expert(const SyncDataset& train, const ExpertConfig& cfg, const PretrainConfig& pcfg,
                             std::uint64_t seed, PretrainReport* report = nullptr);

/// Mean cosine of every aligned window minus the mean cosine of one seeded
/// shifted negative per window.
MarginReport evaluate_margin(const ExpertParams& p, const SyncDataset& data, const PretrainConfig& pcfg,
                             std::uint64_t seed);

/// Mean over windows of cos at offset 0 minus the maximum cos over offsets
/// +-1..+-max_offset. Throws ConfigError when the clip is shorter than
/// window + 2*max_offset frames.
double sync_confidence(const ExpertParams& p, const std::vector<ad::Tensor>& mouths,
                       const std::vector<synth::SpeechFeature>& features, int max_offset = 7);

}  // namespace s2l::sync
