#include "s2l/sync.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "s2l/error.hpp"
#include "s2l/ops.hpp"
#include "s2l/optim.hpp"

namespace s2l::sync {

using ad::Tensor;
using ad::Var;
using ad::Shape;

void ExpertConfig::validate() const {
  if (window < 1) throw ConfigError("expert window must be >= 1");
  if (feature_dim < 1 || embed_dim < 1 || conv_channels < 1 || audio_hidden < 1)
    throw ConfigError("expert layer sizes must be positive");
}

void to_json(nlohmann::json& j, const ExpertConfig& c) {
  j = {{"window", c.window},
       {"feature_dim", c.feature_dim},
       {"embed_dim", c.embed_dim},
       {"conv_channels", c.conv_channels},
       {"audio_hidden", c.audio_hidden}};
}

void from_json(const nlohmann::json& j, ExpertConfig& c) {
  c = ExpertConfig{};
  c.window = j.value("window", c.window);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.conv_channels = j.value("conv_channels", c.conv_channels);
  c.audio_hidden = j.value("audio_hidden", c.audio_hidden);
}

void PretrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("pretrain epochs must be >= 0");
  if (batch < 1) throw ConfigError("pretrain batch must be >= 1");
  if (!(lr > 0)) throw ConfigError("pretrain lr must be positive");
  if (min_shift < 1 || max_shift < min_shift) throw ConfigError("pretrain shifts need 1 <= min_shift <= max_shift");
}

void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = {{"epochs", c.epochs},       {"batch", c.batch},         {"lr", c.lr},
       {"min_shift", c.min_shift}, {"max_shift", c.max_shift}, {"use_negatives", c.use_negatives}};
}

void from_json(const nlohmann::json& j, PretrainConfig& c) {
  c = PretrainConfig{};
  c.epochs = j.value("epochs", c.epochs);
  c.batch = j.value("batch", c.batch);
  c.lr = j.value("lr", c.lr);
  c.min_shift = j.value("min_shift", c.min_shift);
  c.max_shift = j.value("max_shift", c.max_shift);
  c.use_negatives = j.value("use_negatives", c.use_negatives);
}

namespace {

Var he_uniform(Shape shape, int fan_in, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  const double bound = std::sqrt(6.0 / fan_in);
  std::uniform_real_distribution<double> u(-bound, bound);
  for (double& v : t.values()) v = u(rng);
  return ad::parameter(std::move(t));
}

Var final_layer(int in, int out, bool zero, std::mt19937_64& rng) {
  Tensor t({in, out});
  if (!zero) {
    const double bound = std::sqrt(6.0 / (in + out));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (double& v : t.values()) v = u(rng);
  }
  return ad::parameter(std::move(t));
}

Var zeros(int n) { return ad::parameter(Tensor({n})); }

Var filled(int n, double v) {
  Tensor t({n});
  for (double& x : t.values()) x = v;
  return ad::parameter(t);
}

/// Picks a shift with |shift| in [lo, hi] keeping start+shift in [0, last].
/// Returns 0 when none fits.
int draw_shift(int start, int last, int lo, int hi, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> mag(lo, hi);
  std::bernoulli_distribution sign(0.5);
  const int m = mag(rng);
  const int first = sign(rng) ? m : -m;
  for (int s : {first, -first}) {
    if (start + s >= 0 && start + s <= last) return s;
  }
  // Fall back to the smallest admissible magnitude on either side.
  for (int k = lo; k <= hi; ++k) {
    if (start + k <= last) return k;
    if (start - k >= 0) return -k;
  }
  return 0;
}

void check_dataset(const SyncDataset& d, const ExpertParams& p) {
  if (d.mouths.size() != d.features.size()) throw ConfigError("sync dataset: mouth and feature counts differ");
  for (const Tensor& m : d.mouths) {
    if (m.rank() != 3 || m.dim(0) != 3 || m.dim(1) != p.mouth_height() || m.dim(2) != p.mouth_width())
      throw ConfigError("sync dataset: mouth crop shape " + ad::shape_str(m.shape()) + " does not match the expert");
  }
}

Tensor batch_of(const std::vector<Tensor>& items) {
  Shape shape = items.front().shape();
  shape.insert(shape.begin(), static_cast<int>(items.size()));
  Tensor out(shape);
  std::size_t off = 0;
  for (const Tensor& t : items) {
    std::copy(t.values().begin(), t.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(off));
    off += t.size();
  }
  return out;
}

}  // namespace

ExpertParams::ExpertParams(const ExpertConfig& cfg, int mouth_height, int mouth_width, std::uint64_t seed,
                           bool zero_final)
    : cfg_(cfg), mouth_h_(mouth_height), mouth_w_(mouth_width) {
  cfg.validate();
  if (mouth_height < 4 || mouth_width < 4) throw ConfigError("expert mouth crop must be at least 4x4");
  std::mt19937_64 rng(seed);
  const int in_c = 3 * cfg.window, c = cfg.conv_channels;
  image_w = {he_uniform({c, in_c, 3, 3}, in_c * 9, rng), he_uniform({c, c, 3, 3}, c * 9, rng),
             he_uniform({c, cfg.embed_dim}, c, rng), final_layer(cfg.embed_dim, cfg.embed_dim, zero_final, rng)};
  image_b = {zeros(c), zeros(c), zeros(cfg.embed_dim), zeros(cfg.embed_dim)};
  const int a_in = cfg.window * cfg.feature_dim;
  audio_w = {he_uniform({a_in, cfg.audio_hidden}, a_in, rng),
             final_layer(cfg.audio_hidden, cfg.embed_dim, zero_final, rng)};
  // Silence is an all-zero feature window; a positive hidden bias keeps its
  // embedding off the origin so the cosine stays defined from step 0.
  audio_b = {filled(cfg.audio_hidden, 0.01), zeros(cfg.embed_dim)};
}

std::vector<Var> ExpertParams::parameters() const {
  std::vector<Var> out;
  for (std::size_t i = 0; i < image_w.size(); ++i) {
    out.push_back(image_w[i]);
    out.push_back(image_b[i]);
  }
  for (std::size_t i = 0; i < audio_w.size(); ++i) {
    out.push_back(audio_w[i]);
    out.push_back(audio_b[i]);
  }
  return out;
}

void ExpertParams::freeze() {
  for (auto* group : {&image_w, &image_b, &audio_w, &audio_b})
    for (Var& x : *group) x = ad::constant(x.value());
  frozen_ = true;
}

ExpertParams ExpertParams::clone() const {
  ExpertParams c = *this;
  auto copy = [frozen = frozen_](std::vector<Var>& v) {
    for (Var& x : v) x = frozen ? ad::constant(x.value()) : ad::parameter(x.value());
  };
  copy(c.image_w);
  copy(c.image_b);
  copy(c.audio_w);
  copy(c.audio_b);
  return c;
}

Var encode_image_batch(const ExpertParams& p, const Var& frames) {
  const auto& s = frames.shape();
  if (s.size() != 4 || s[1] != 3 * p.config().window || s[2] != p.mouth_height() || s[3] != p.mouth_width())
    throw ConfigError("encode_image_batch: expected [N," + std::to_string(3 * p.config().window) + "," +
                      std::to_string(p.mouth_height()) + "," + std::to_string(p.mouth_width()) + "], got " +
                      ad::shape_str(s));
  Var h = ad::relu(ad::conv2d(frames, p.image_w[0], p.image_b[0], {2, 1}));
  h = ad::relu(ad::conv2d(h, p.image_w[1], p.image_b[1], {2, 1}));
  h = ad::spatial_mean(h);
  h = ad::relu(ad::linear(h, p.image_w[2], p.image_b[2]));
  return ad::linear(h, p.image_w[3], p.image_b[3]);
}

Var encode_audio_batch(const ExpertParams& p, const Var& features) {
  const auto& s = features.shape();
  if (s.size() != 2 || s[1] != p.config().window * p.config().feature_dim)
    throw ConfigError("encode_audio_batch: expected [N," + std::to_string(p.config().window * p.config().feature_dim) +
                      "], got " + ad::shape_str(s));
  Var h = ad::relu(ad::linear(features, p.audio_w[0], p.audio_b[0]));
  return ad::linear(h, p.audio_w[1], p.audio_b[1]);
}

Var encode_image_window(const ExpertParams& p, const std::vector<Var>& frames) {
  const int w = p.config().window;
  if (static_cast<int>(frames.size()) != w) throw ConfigError("encode_image_window: expected " + std::to_string(w) + " frames");
  for (const Var& f : frames) {
    if (f.shape() != Shape{3, p.mouth_height(), p.mouth_width()})
      throw ConfigError("encode_image_window: frame shape " + ad::shape_str(f.shape()) + " does not match the expert");
  }
  Var stacked = ad::concat(frames, 0) - 0.5;
  stacked = ad::reshape(stacked, {1, 3 * w, p.mouth_height(), p.mouth_width()});
  return ad::reshape(encode_image_batch(p, stacked), {p.config().embed_dim});
}

Var encode_audio_window(const ExpertParams& p, const std::vector<synth::SpeechFeature>& features) {
  const int w = p.config().window;
  if (static_cast<int>(features.size()) != w) throw ConfigError("encode_audio_window: expected " + std::to_string(w) + " features");
  Tensor a = stack_features(features, 0, w);
  Var x = ad::constant(a.reshaped({1, static_cast<int>(a.size())}));
  return ad::reshape(encode_audio_batch(p, x), {p.config().embed_dim});
}

Var cosine_rows(const Var& a, const Var& b) {
  if (a.shape() != b.shape() || a.value().rank() != 2) throw ConfigError("cosine_rows: expected matching [N,D] inputs");
  const int n = a.shape()[0], d = a.shape()[1];
  Tensor out({n});
  std::vector<double> na(static_cast<std::size_t>(n)), nb(static_cast<std::size_t>(n));
  for (int r = 0; r < n; ++r) {
    double dot = 0.0, aa = 0.0, bb = 0.0;
    for (int k = 0; k < d; ++k) {
      const double x = a.value()[static_cast<std::size_t>(r * d + k)], y = b.value()[static_cast<std::size_t>(r * d + k)];
      dot += x * y;
      aa += x * x;
      bb += y * y;
    }
    if (!(aa > 0.0) || !(bb > 0.0)) throw NumericalError("cosine of a zero-norm embedding is undefined");
    na[static_cast<std::size_t>(r)] = std::sqrt(aa);
    nb[static_cast<std::size_t>(r)] = std::sqrt(bb);
    out[static_cast<std::size_t>(r)] = dot / (na[static_cast<std::size_t>(r)] * nb[static_cast<std::size_t>(r)]);
  }
  return ad::make_node(out, {a, b}, [n, d, na, nb, out](ad::Node& self) {
    ad::Node& pa = *self.parents[0];
    ad::Node& pb = *self.parents[1];
    for (int r = 0; r < n; ++r) {
      const auto R = static_cast<std::size_t>(r);
      const double g = self.grad[R], c = out[R];
      for (int k = 0; k < d; ++k) {
        const std::size_t i = R * static_cast<std::size_t>(d) + static_cast<std::size_t>(k);
        const double x = pa.value[i], y = pb.value[i];
        // d cos / dx = y / (|x||y|) - cos * x / |x|^2
        if (pa.requires_grad) pa.grad_buffer()[i] += g * (y / (na[R] * nb[R]) - c * x / (na[R] * na[R]));
        if (pb.requires_grad) pb.grad_buffer()[i] += g * (x / (na[R] * nb[R]) - c * y / (nb[R] * nb[R]));
      }
    }
  });
}

Var sync_loss(const Var& image_embed, const Var& audio_embed, const std::vector<double>& labels) {
  Var i = image_embed, a = audio_embed;
  if (i.value().rank() == 1) i = ad::reshape(i, {1, i.shape()[0]});
  if (a.value().rank() == 1) a = ad::reshape(a, {1, a.shape()[0]});
  if (static_cast<int>(labels.size()) != i.shape()[0]) throw ConfigError("sync_loss: one label per row required");
  Tensor y({static_cast<int>(labels.size())}), ny({static_cast<int>(labels.size())});
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] != 0.0 && labels[r] != 1.0) throw ConfigError("sync_loss: labels must be 0 or 1");
    y[r] = labels[r];
    ny[r] = 1.0 - labels[r];
  }
  Var c = cosine_rows(i, a);
  Var per = ad::constant(y) * ((-c) + 1.0) + ad::constant(ny) * ad::relu(c);
  return ad::mean(per);
}

Var sync_loss(const Var& image_embed, const Var& audio_embed, double label) {
  return sync_loss(image_embed, audio_embed, std::vector<double>{label});
}

Tensor stack_window(const std::vector<Tensor>& mouths, int start, int window) {
  if (start < 0 || start + window > static_cast<int>(mouths.size())) throw ConfigError("stack_window: range out of bounds");
  const Tensor& first = mouths[static_cast<std::size_t>(start)];
  Tensor out({3 * window, first.dim(1), first.dim(2)});
  std::size_t off = 0;
  for (int k = 0; k < window; ++k) {
    const Tensor& m = mouths[static_cast<std::size_t>(start + k)];
    if (m.shape() != first.shape()) throw ConfigError("stack_window: crops differ in shape");
    for (double v : m.values()) out[off++] = v - 0.5;
  }
  return out;
}

Tensor stack_features(const std::vector<synth::SpeechFeature>& features, int start, int window) {
  if (start < 0 || start + window > static_cast<int>(features.size()))
    throw ConfigError("stack_features: range out of bounds");
  const int dim = synth::kFeatureDim;
  Tensor out({window * dim});
  for (int k = 0; k < window; ++k)
    for (int j = 0; j < dim; ++j)
      out[static_cast<std::size_t>(k * dim + j)] = features[static_cast<std::size_t>(start + k)][static_cast<std::size_t>(j)];
  return out;
}

ExpertParams pretrain_expert(const SyncDataset& train, const ExpertConfig& cfg, const PretrainConfig& pcfg,
                             std::uint64_t seed, PretrainReport* report) {
  pcfg.validate();
  cfg.validate();
  const int w = cfg.window;
  if (static_cast<int>(train.size()) < 2 * w)
    throw ConfigError("pretrain_expert: need at least " + std::to_string(2 * w) + " frames, got " +
                      std::to_string(train.size()));
  const Tensor& m0 = train.mouths.front();
  ExpertParams p(cfg, m0.dim(1), m0.dim(2), seed);
  check_dataset(train, p);

  std::mt19937_64 rng(seed ^ 0x51c0ffeeull);
  const int last = static_cast<int>(train.size()) - w;
  std::vector<int> starts(static_cast<std::size_t>(last + 1));
  std::iota(starts.begin(), starts.end(), 0);
  ad::Adam opt(p.parameters(), {pcfg.lr});
  std::bernoulli_distribution coin(0.5);

  for (int epoch = 0; epoch < pcfg.epochs; ++epoch) {
    std::shuffle(starts.begin(), starts.end(), rng);
    double total = 0.0;
    int batches = 0;
    for (std::size_t b0 = 0; b0 < starts.size(); b0 += static_cast<std::size_t>(pcfg.batch)) {
      const std::size_t b1 = std::min(starts.size(), b0 + static_cast<std::size_t>(pcfg.batch));
      std::vector<Tensor> imgs, auds;
      std::vector<double> labels;
      for (std::size_t k = b0; k < b1; ++k) {
        const int s = starts[k];
        int shift = 0;
        if (pcfg.use_negatives && coin(rng)) shift = draw_shift(s, last, pcfg.min_shift, pcfg.max_shift, rng);
        imgs.push_back(stack_window(train.mouths, s, w));
        auds.push_back(stack_features(train.features, s + shift, w));
        labels.push_back(shift == 0 ? 1.0 : 0.0);
      }
      Var ie = encode_image_batch(p, ad::constant(batch_of(imgs)));
      Var ae = encode_audio_batch(p, ad::constant(batch_of(auds)));
      Var loss = sync_loss(ie, ae, labels);
      ad::backward(loss);
      opt.step();
      total += loss.item();
      ++batches;
    }
    if (report) report->epoch_loss.push_back(total / batches);
  }
  p.freeze();
  return p;
}

MarginReport evaluate_margin(const ExpertParams& p, const SyncDataset& data, const PretrainConfig& pcfg,
                             std::uint64_t seed) {
  check_dataset(data, p);
  const int w = p.config().window;
  const int last = static_cast<int>(data.size()) - w;
  if (last < pcfg.min_shift) throw ConfigError("evaluate_margin: clip too short for shifted negatives");
  std::mt19937_64 rng(seed ^ 0xe7a1ull);
  std::vector<Tensor> imgs, pos_aud, neg_aud;
  for (int s = 0; s <= last; ++s) {
    imgs.push_back(stack_window(data.mouths, s, w));
    pos_aud.push_back(stack_features(data.features, s, w));
    const int shift = draw_shift(s, last, pcfg.min_shift, pcfg.max_shift, rng);
    neg_aud.push_back(stack_features(data.features, s + shift, w));
  }
  const Var ie = encode_image_batch(p, ad::constant(batch_of(imgs)));
  const Var pc = cosine_rows(ie, encode_audio_batch(p, ad::constant(batch_of(pos_aud))));
  const Var nc = cosine_rows(ie, encode_audio_batch(p, ad::constant(batch_of(neg_aud))));
  MarginReport r;
  r.positives = r.negatives = last + 1;
  for (double v : pc.value().values()) r.positive_cos += v;
  for (double v : nc.value().values()) r.negative_cos += v;
  r.positive_cos /= r.positives;
  r.negative_cos /= r.negatives;
  r.margin = r.positive_cos - r.negative_cos;
  return r;
}

double sync_confidence(const ExpertParams& p, const std::vector<Tensor>& mouths,
                       const std::vector<synth::SpeechFeature>& features, int max_offset) {
  const int w = p.config().window;
  const int n = static_cast<int>(mouths.size());
  if (static_cast<int>(features.size()) != n) throw ConfigError("sync_confidence: frame and feature counts differ");
  if (max_offset < 1) throw ConfigError("sync_confidence: max_offset must be >= 1");
  if (n < w + 2 * max_offset)
    throw ConfigError("sync_confidence: clip of " + std::to_string(n) + " frames is shorter than " +
                      std::to_string(w + 2 * max_offset));
  const int last = n - w;
  std::vector<Tensor> imgs, auds;
  for (int s = 0; s <= last; ++s) {
    imgs.push_back(stack_window(mouths, s, w));
    auds.push_back(stack_features(features, s, w));
  }
  const Tensor ie = encode_image_batch(p, ad::constant(batch_of(imgs))).value();
  const Tensor ae = encode_audio_batch(p, ad::constant(batch_of(auds))).value();
  const int d = p.config().embed_dim;
  auto cos = [&](int i, int j) {
    double dot = 0.0, a = 0.0, b = 0.0;
    for (int k = 0; k < d; ++k) {
      const double x = ie[static_cast<std::size_t>(i * d + k)], y = ae[static_cast<std::size_t>(j * d + k)];
      dot += x * y;
      a += x * x;
      b += y * y;
    }
    if (!(a > 0.0) || !(b > 0.0)) throw NumericalError("sync_confidence: zero-norm embedding");
    return dot / std::sqrt(a * b);
  };
  double acc = 0.0;
  int count = 0;
  for (int s = max_offset; s + max_offset <= last; ++s) {
    double best = -2.0;
    for (int o = 1; o <= max_offset; ++o) best = std::max({best, cos(s, s + o), cos(s, s - o)});
    acc += cos(s, s) - best;
    ++count;
  }
  return acc / count;
}

}  // namespace s2l::sync
