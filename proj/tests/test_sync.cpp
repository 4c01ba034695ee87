#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "s2l/error.hpp"
#include "s2l/ops.hpp"
#include "s2l/optim.hpp"
#include "s2l/sync.hpp"

using namespace s2l;
using namespace s2l::sync;
using ad::Tensor;
using ad::Var;

namespace {

ExpertConfig small_config() {
  ExpertConfig c;
  c.embed_dim = 16;
  c.conv_channels = 8;
  c.audio_hidden = 32;
  return c;
}

Var vec(std::initializer_list<double> v) {
  Tensor t({static_cast<int>(v.size())});
  std::size_t i = 0;
  for (double x : v) t[i++] = x;
  return ad::constant(std::move(t));
}

// Brightness of every mouth pixel equals the audio amplitude; amplitude is a
// sum of sinusoids in the speech band sampled at 25 fps.
SyncDataset toy_corpus(int frames, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> freq(0.8, 3.5), phase(0.0, 2.0 * M_PI);
  double f[3], ph[3];
  for (int k = 0; k < 3; ++k) {
    f[k] = freq(rng);
    ph[k] = phase(rng);
  }
  SyncDataset d;
  for (int i = 0; i < frames; ++i) {
    const double t = i / 25.0;
    double a = 0.0;
    for (int k = 0; k < 3; ++k) a += std::sin(2.0 * M_PI * f[k] * t + ph[k]) / 3.0;
    a = 0.5 + 0.45 * a;
    Tensor m({3, 8, 8});
    m.fill(a);
    d.mouths.push_back(std::move(m));
    synth::SpeechFeature feat{};
    for (int j = 0; j < synth::kFeatureDim; ++j) feat[static_cast<std::size_t>(j)] = static_cast<float>(a * (1 + j % 4));
    d.features.push_back(feat);
  }
  return d;
}

bool same(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::ranges::equal(a.values(), b.values());
}

SyncDataset slice(const SyncDataset& d, int begin, int end) {
  SyncDataset s;
  s.mouths.assign(d.mouths.begin() + begin, d.mouths.begin() + end);
  s.features.assign(d.features.begin() + begin, d.features.begin() + end);
  return s;
}

PretrainConfig toy_pretrain() {
  PretrainConfig p;
  p.epochs = 25;
  p.batch = 16;
  p.lr = 3e-3;
  return p;
}

}  // namespace

TEST_CASE("sync_loss examples") {
  const Var a = vec({0.3, -1.2, 2.0});
  CHECK(sync_loss(a, a, 1.0).item() == doctest::Approx(0.0).epsilon(1e-12));
  // cos = -0.3 and 0.5 via unit vectors at the matching angle.
  const Var e1 = vec({1.0, 0.0});
  CHECK(sync_loss(e1, vec({-0.3, std::sqrt(1 - 0.09)}), 0.0).item() == 0.0);
  CHECK(sync_loss(e1, vec({0.5, std::sqrt(0.75)}), 0.0).item() == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(sync_loss(e1, vec({0.5, std::sqrt(0.75)}), 1.0).item() == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("sync_loss properties") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor a({6}), b({6});
    for (std::size_t i = 0; i < 6; ++i) {
      a[i] = n(rng);
      b[i] = n(rng);
    }
    for (double y : {0.0, 1.0}) {
      const double base = sync_loss(ad::constant(a), ad::constant(b), y).item();
      CHECK(base >= 0.0);
      Tensor scaled = a;
      for (double& v : scaled.values()) v *= 3.7;
      CHECK(sync_loss(ad::constant(scaled), ad::constant(b), y).item() == doctest::Approx(base).epsilon(1e-12));
    }
  }
  CHECK_THROWS_AS(sync_loss(vec({0.0, 0.0}), vec({1.0, 0.0}), 1.0), NumericalError);

  // Batched rows average per-row losses.
  const Tensor ia({2, 2}, {1, 0, 1, 0});
  const Tensor aa({2, 2}, {0.5, std::sqrt(0.75), 1, 0});
  CHECK(sync_loss(ad::constant(ia), ad::constant(aa), std::vector<double>{0.0, 1.0}).item() ==
        doctest::Approx(0.25).epsilon(1e-12));

  const Tensor other({4}, {0.9, 0.1, -0.4, 0.7});
  for (double y : {0.0, 1.0}) {
    const auto r = ad::grad_check([&](const Var& x) { return sync_loss(x, ad::constant(other), y); },
                                  Tensor({4}, {0.3, -0.8, 1.1, 0.2}));
    CHECK(r.passed);
  }
}

TEST_CASE("encoders are deterministic and respect initialization") {
  const ExpertConfig cfg = small_config();
  const SyncDataset d = toy_corpus(12, 1);
  std::vector<Var> frames;
  for (int i = 0; i < cfg.window; ++i) frames.push_back(ad::constant(d.mouths[static_cast<std::size_t>(i)]));
  const std::vector<synth::SpeechFeature> feats(d.features.begin(), d.features.begin() + cfg.window);

  const ExpertParams p(cfg, 8, 8, 5);
  const Tensor e1 = encode_image_window(p, frames).value();
  CHECK(same(e1, encode_image_window(p, frames).value()));
  CHECK(same(e1, encode_image_window(ExpertParams(cfg, 8, 8, 5), frames).value()));
  CHECK(same(encode_audio_window(p, feats).value(), encode_audio_window(p, feats).value()));
  CHECK(e1.shape() == ad::Shape{cfg.embed_dim});

  const ExpertParams z(cfg, 8, 8, 5, true);
  const Var zi = encode_image_window(z, frames), za = encode_audio_window(z, feats);
  for (double v : zi.value().values()) CHECK(v == 0.0);
  for (double v : za.value().values()) CHECK(v == 0.0);

  std::vector<Var> short_window(frames.begin(), frames.end() - 1);
  CHECK_THROWS_AS(encode_image_window(p, short_window), ConfigError);
  std::vector<Var> wrong = frames;
  wrong[2] = ad::constant(Tensor({3, 8, 9}));
  CHECK_THROWS_AS(encode_image_window(p, wrong), ConfigError);
}

TEST_CASE("pretraining separates a toy corpus and is seeded") {
  const ExpertConfig cfg = small_config();
  const SyncDataset all = toy_corpus(260, 3);
  const SyncDataset train = slice(all, 0, 200), held = slice(all, 200, 260);
  const PretrainConfig pc = toy_pretrain();

  PretrainReport rep;
  const ExpertParams p = pretrain_expert(train, cfg, pc, 9, &rep);
  CHECK(p.frozen());
  REQUIRE(rep.epoch_loss.size() == static_cast<std::size_t>(pc.epochs));
  CHECK(rep.epoch_loss.back() < rep.epoch_loss.front());
  const MarginReport m = evaluate_margin(p, held, pc, 4);
  MESSAGE("toy held-out margin " << m.margin);
  CHECK(m.margin > 0.9);

  const ExpertParams again = pretrain_expert(train, cfg, pc, 9);
  const auto a = p.parameters(), b = again.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(same(a[i].value(), b[i].value()));

  // Replacing the middle frame moves the trained image embedding.
  std::vector<Var> frames;
  for (int i = 0; i < cfg.window; ++i) frames.push_back(ad::constant(held.mouths[static_cast<std::size_t>(i)]));
  const Tensor before = encode_image_window(p, frames).value();
  Tensor bright({3, 8, 8});
  bright.fill(0.95);
  frames[static_cast<std::size_t>(cfg.window / 2)] = ad::constant(bright);
  const Tensor after = encode_image_window(p, frames).value();
  double diff = 0.0;
  for (std::size_t i = 0; i < before.size(); ++i) diff += (before[i] - after[i]) * (before[i] - after[i]);
  CHECK(diff > 0.0);

  PretrainConfig none = pc;
  none.epochs = 0;
  const MarginReport base = evaluate_margin(pretrain_expert(train, cfg, none, 9), held, pc, 4);
  MESSAGE("untrained margin " << base.margin);

  PretrainConfig ablated = pc;
  ablated.use_negatives = false;
  const MarginReport abl = evaluate_margin(pretrain_expert(train, cfg, ablated, 9), held, pc, 4);
  MESSAGE("margin without negatives " << abl.margin);
  CHECK(abl.margin < m.margin);

  CHECK_THROWS_AS(pretrain_expert(slice(all, 0, 2 * cfg.window - 1), cfg, pc, 9), ConfigError);
}

TEST_CASE("frozen expert receives no gradient") {
  const ExpertConfig cfg = small_config();
  ExpertParams p(cfg, 8, 8, 2);
  const SyncDataset d = toy_corpus(8, 2);
  std::vector<Var> frames;
  for (int i = 0; i < cfg.window; ++i) frames.push_back(ad::parameter(d.mouths[static_cast<std::size_t>(i)]));
  p.freeze();
  for (const Var& v : p.parameters()) CHECK_FALSE(v.requires_grad());
  const std::vector<synth::SpeechFeature> feats(d.features.begin(), d.features.begin() + cfg.window);
  const Var loss = sync_loss(encode_image_window(p, frames), encode_audio_window(p, feats), 1.0);
  ad::backward(loss);
  double g = 0.0;
  for (const Var& f : frames)
    for (double v : f.grad().values()) g += std::abs(v);
  CHECK(g > 0.0);

  const ExpertParams c = p.clone();
  CHECK(c.frozen());
  for (const Var& v : c.parameters()) CHECK_FALSE(v.requires_grad());
  CHECK(c.parameters().front().node() != p.parameters().front().node());
}

TEST_CASE("sync_confidence") {
  const ExpertConfig cfg = small_config();
  const SyncDataset all = toy_corpus(260, 3);
  const ExpertParams p = pretrain_expert(slice(all, 0, 200), cfg, toy_pretrain(), 9);
  const SyncDataset held = slice(all, 200, 260);
  const double c = sync_confidence(p, held.mouths, held.features);
  CHECK(c == sync_confidence(p, held.mouths, held.features));

  auto shuffled = held.features;
  std::mt19937_64 rng(17);
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  const double s = sync_confidence(p, held.mouths, shuffled);
  MESSAGE("toy confidence synced " << c << " shuffled " << s);
  CHECK(c > s);

  const SyncDataset short_clip = slice(all, 0, cfg.window + 13);
  CHECK_THROWS_AS(sync_confidence(p, short_clip.mouths, short_clip.features), ConfigError);
  CHECK_NOTHROW(sync_confidence(p, slice(all, 0, cfg.window + 14).mouths, slice(all, 0, cfg.window + 14).features));
}
