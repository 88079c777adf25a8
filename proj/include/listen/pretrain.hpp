#pragma once

// Masked student-teacher pretraining. The student sees 19 of 64 patches and
// regresses (a) the teacher's layer-averaged patch representation with its
// CLS token and (b) the teacher's decoded map through a shared CNN decoder.
// The teacher, and the decoder weights it decodes with, are per-epoch copies
// of the student side and never receive gradients.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <vector>

#include "listen/adam.hpp"
#include "listen/dataset.hpp"
#include "listen/model.hpp"

namespace listenkit {

// ---------------------------------------------------------------- masks

struct MaskSet {
  std::vector<int> masked;   // sorted
  std::vector<int> visible;  // sorted complement
};

inline std::size_t masked_count(double ratio) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw DomainError("mask ratio must lie in (0, 1)");
  return static_cast<std::size_t>(std::llround(ratio * static_cast<double>(kNumPatches)));
}

// Uniform sample without replacement.
inline MaskSet sample_mask(Prng& prng, double ratio = 0.70) {
  const std::size_t k = masked_count(ratio);
  std::vector<int> idx = all_patches();
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + prng.index(kNumPatches - i)]);
  MaskSet m;
  m.masked.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
  m.visible.assign(idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end());
  std::sort(m.masked.begin(), m.masked.end());
  std::sort(m.visible.begin(), m.visible.end());
  return m;
}

// ---------------------------------------------------------------- config

struct PretrainConfig {
  double lambda = 0.1;
  double huber_delta = 1.0;
  double mask_ratio = 0.70;
  std::size_t epochs = 20;
  std::size_t batch_size = 8;
  double lr = 1e-4;
  bool masked_only = false;  // global loss over masked patches only

  void validate() const {
    if (!(lambda >= 0.0)) throw ConfigError("pretrain: lambda must be >= 0");
    if (!(huber_delta > 0.0)) throw ConfigError("pretrain: huber_delta must be > 0");
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ConfigError("pretrain: mask_ratio must lie in (0, 1)");
    if (epochs == 0 || batch_size == 0) throw ConfigError("pretrain: epochs and batch_size must be >= 1");
    if (!(lr >= 0.0)) throw ConfigError("pretrain: lr must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = {{"lambda", c.lambda},         {"huber_delta", c.huber_delta}, {"mask_ratio", c.mask_ratio}, {"epochs", c.epochs},
       {"batch_size", c.batch_size}, {"lr", c.lr},                   {"masked_only", c.masked_only}};
}

inline void from_json(const nlohmann::json& j, PretrainConfig& c) {
  PretrainConfig d;
  c.lambda = j.value("lambda", d.lambda);
  c.huber_delta = j.value("huber_delta", d.huber_delta);
  c.mask_ratio = j.value("mask_ratio", d.mask_ratio);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.masked_only = j.value("masked_only", d.masked_only);
}

// ---------------------------------------------------------------- pair

template <typename T>
struct StudentTeacherPair {
  Backbone<T> student;
  Backbone<T> teacher;
  CnnDecoder<T> decoder;
  // Decoder as of the last sync; decodes the teacher's tokens.
  CnnDecoder<T> teacher_decoder;

  Backbone<T> student_grads;
  CnnDecoder<T> decoder_grads;
  // Never written by training; kept so gradient isolation can be audited.
  Backbone<T> teacher_grads;
};

template <typename T>
StudentTeacherPair<T> make_pair(const ModelConfig& cfg, std::uint64_t seed) {
  StudentTeacherPair<T> p;
  p.student = build_backbone<T>(cfg, seed);
  p.teacher = p.student;
  p.decoder = build_decoder<T>(cfg.embed_dim, Prng(seed).fork(1).next());
  p.student_grads = zeros_like(p.student);
  p.teacher_decoder = p.decoder;
  p.decoder_grads = zeros_like(p.decoder);
  p.teacher_grads = zeros_like(p.teacher);
  return p;
}

template <typename T>
void sync_teacher(StudentTeacherPair<T>& p) {
  if (!(p.teacher.config == p.student.config)) throw InternalError("sync_teacher: teacher and student configs differ");
  std::vector<const Tensor<T>*> src;
  p.student.visit([&](const std::string&, const Tensor<T>& t) { src.push_back(&t); });
  std::size_t i = 0;
  p.teacher.visit([&](const std::string&, Tensor<T>& t) {
    if (!t.same_shape(*src.at(i))) throw InternalError("sync_teacher: tensor shapes differ");
    t = *src[i++];
  });
  p.teacher_decoder = p.decoder;
}

// ---------------------------------------------------------------- losses

inline double total_loss(double local, double global, double lambda = 0.1) { return lambda * local + global; }

template <typename T>
struct TeacherOutput {
  Tensor<T> tokens;  // [65 x d] after the final norm
  Tensor<T> target;  // [d]
};

// Block outputs averaged over layers, then over the 64 patch tokens, then a
// parameter-free layernorm.
template <typename T>
TeacherOutput<T> teacher_forward(const Backbone<T>& teacher, const Tensor<T>& image) {
  const auto all = all_patches();
  std::vector<Tensor<T>> outs;
  TeacherOutput<T> r;
  r.tokens = forward_tokens(teacher, image, std::span<const int>(all), static_cast<BackboneCache<T>*>(nullptr), &outs);
  const std::size_t d = teacher.dim();
  Tensor<T> mean({1, d});
  std::vector<double> acc(d, 0.0);
  for (const auto& o : outs) {
    for (std::size_t t = 1; t < kNumTokens; ++t) {
      for (std::size_t c = 0; c < d; ++c) acc[c] += o(t, c);
    }
  }
  const double n = static_cast<double>(outs.size() * kNumPatches);
  for (std::size_t c = 0; c < d; ++c) mean[c] = static_cast<T>(acc[c] / n);
  r.target = layernorm_forward(mean, static_cast<const LayerNormParams<T>*>(nullptr));
  r.target.reshape({d});
  return r;
}

template <typename T>
Tensor<T> teacher_target(const Backbone<T>& teacher, const Tensor<T>& image) {
  return teacher_forward(teacher, image).target;
}

// Parameter-free standardization of a decoded map (zero mean, unit variance
// over all positions). Both sides of the global loss are standardized.
template <typename T>
struct NormalizedMap {
  Tensor<T> map;
  double inv_std = 1.0;
};

template <typename T>
NormalizedMap<T> normalize_map(const Tensor<T>& map) {
  double mean = 0.0, var = 0.0;
  for (T v : map.values()) mean += v;
  mean /= static_cast<double>(map.size());
  for (T v : map.values()) var += (v - mean) * (v - mean);
  NormalizedMap<T> r{Tensor<T>(map.dims()), 1.0 / std::sqrt(var / static_cast<double>(map.size()) + 1e-6)};
  for (std::size_t i = 0; i < map.size(); ++i) r.map[i] = static_cast<T>((map[i] - mean) * r.inv_std);
  return r;
}

template <typename T>
Tensor<T> normalize_map_backward(const NormalizedMap<T>& n, const Tensor<T>& dy) {
  const double count = static_cast<double>(dy.size());
  double mean_dy = 0.0, mean_dyy = 0.0;
  for (std::size_t i = 0; i < dy.size(); ++i) {
    mean_dy += dy[i];
    mean_dyy += dy[i] * n.map[i];
  }
  mean_dy /= count;
  mean_dyy /= count;
  Tensor<T> dx(dy.dims());
  for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = static_cast<T>(n.inv_std * (dy[i] - mean_dy - n.map[i] * mean_dyy));
  return dx;
}

template <typename T>
Tensor<T> teacher_map(const StudentTeacherPair<T>& p, const Tensor<T>& teacher_tokens) {
  return normalize_map(decode_map(p.teacher, p.teacher_decoder, teacher_tokens)).map;
}

template <typename T>
LossValue<T> local_loss(const Tensor<T>& student_cls, const Tensor<T>& target, double delta = 1.0) {
  return huber(student_cls, target, delta);
}

// Huber between two decoded maps, over every position or only the masked patches.
template <typename T>
LossValue<T> map_loss(const Tensor<T>& student_map, const Tensor<T>& teacher_map, const MaskSet& mask, double delta,
                      bool masked_only) {
  if (!masked_only) return huber(student_map, teacher_map, delta);
  if (mask.masked.empty()) throw ConfigError("map_loss: masked-only loss with an empty mask");
  const auto s = extract_patches(student_map, std::span<const int>(mask.masked));
  const auto t = extract_patches(teacher_map, std::span<const int>(mask.masked));
  auto l = huber(s, t, delta);
  Tensor<T> grad(student_map.dims());
  for (std::size_t i = 0; i < mask.masked.size(); ++i) {
    const auto p = static_cast<std::size_t>(mask.masked[i]);
    const std::size_t r0 = (p / kGridSize) * kPatchSize, c0 = (p % kGridSize) * kPatchSize;
    for (std::size_t y = 0; y < kPatchSize; ++y) {
      for (std::size_t x = 0; x < kPatchSize; ++x) grad(r0 + y, c0 + x) = l.grad(i, y * kPatchSize + x);
    }
  }
  return {l.value, std::move(grad)};
}

template <typename T>
double global_loss(const StudentTeacherPair<T>& p, const Tensor<T>& image, const MaskSet& mask, double delta = 1.0,
                   bool masked_only = false) {
  const auto s_tokens = forward_tokens(p.student, image, std::span<const int>(mask.visible));
  const auto t_tokens = forward_tokens(p.teacher, image);
  return map_loss(normalize_map(decode_map(p.student, p.decoder, s_tokens, std::span<const int>(mask.visible))).map,
                  teacher_map(p, t_tokens), mask, delta, masked_only)
      .value;
}

struct StepLosses {
  double local = 0.0;
  double global = 0.0;
  double total = 0.0;
};

// One sample: forward both models, accumulate `scale` times the gradients of
// lambda * local + global into the student and decoder stores.
template <typename T>
StepLosses accumulate_sample(StudentTeacherPair<T>& p, const Tensor<T>& image, const MaskSet& mask,
                             const PretrainConfig& cfg, double scale) {
  const TeacherOutput<T> teacher = teacher_forward(p.teacher, image);
  const Tensor<T> t_map = teacher_map(p, teacher.tokens);

  BackboneCache<T> bc;
  const Tensor<T> s_tokens = forward_tokens(p.student, image, std::span<const int>(mask.visible), &bc);
  const std::size_t d = p.student.dim();
  Tensor<T> cls({d});
  std::copy(s_tokens.data(), s_tokens.data() + d, cls.data());
  const auto local = local_loss(cls, teacher.target, cfg.huber_delta);

  DecoderCache<T> dc;
  const auto s_map = normalize_map(decode_map(p.student, p.decoder, s_tokens, std::span<const int>(mask.visible), &dc));
  const auto global = map_loss(s_map.map, t_map, mask, cfg.huber_delta, cfg.masked_only);

  Tensor<T> dmap = normalize_map_backward(s_map, global.grad);
  for (auto& g : dmap.values()) g = static_cast<T>(g * scale);
  Tensor<T> dtokens = decode_backward(p.student, p.decoder, dc, dmap, p.decoder_grads, &p.student_grads.mask_token);
  for (std::size_t c = 0; c < d; ++c) dtokens(0, c) += static_cast<T>(cfg.lambda * scale * local.grad[c]);
  backward_tokens(p.student, bc, dtokens, p.student_grads);
  return {local.value, global.value, total_loss(local.value, global.value, cfg.lambda)};
}

// ---------------------------------------------------------------- training

struct EpochLosses {
  std::size_t epoch = 0;  // 1-based
  double total = 0.0;
  double local = 0.0;
  double global = 0.0;
};

template <typename T>
using PretrainEpochHook = std::function<void(const EpochLosses&, const StudentTeacherPair<T>&)>;

// Optional per-step observer: the masks drawn for the batch and the batch
// losses, called after the optimizer step.
template <typename T>
using PretrainStepHook = std::function<void(const std::vector<MaskSet>&, const StepLosses&, const StudentTeacherPair<T>&)>;

template <typename T>
std::vector<EpochLosses> pretrain_run(StudentTeacherPair<T>& p, const std::vector<Tensor<T>>& corpus,
                                      const PretrainConfig& cfg, Prng& prng, const PretrainEpochHook<T>& on_epoch = {},
                                      const PretrainStepHook<T>& on_step = {}) {
  cfg.validate();
  if (corpus.empty()) throw InputError("pretrain: empty corpus");
  std::vector<Parameter<T>> params = collect_parameters(p.student, p.student_grads);
  for (auto& q : collect_parameters(p.decoder, p.decoder_grads)) params.push_back(q);
  Adam<T> adam(AdamConfig{cfg.lr});

  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<EpochLosses> curve;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    prng.shuffle(order.begin(), order.end());
    double local_sum = 0.0, global_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double scale = 1.0 / static_cast<double>(end - start);
      zero_grads(params);
      StepLosses step;
      std::vector<MaskSet> masks;
      for (std::size_t i = start; i < end; ++i) {
        masks.push_back(sample_mask(prng, cfg.mask_ratio));
        const auto s = accumulate_sample(p, corpus[order[i]], masks.back(), cfg, scale);
        local_sum += s.local;
        global_sum += s.global;
        step.local += s.local * scale;
        step.global += s.global * scale;
      }
      step.total = total_loss(step.local, step.global, cfg.lambda);
      adam.step(params);
      if (on_step) on_step(masks, step, p);
    }
    sync_teacher(p);
    const double n = static_cast<double>(corpus.size());
    EpochLosses e{epoch, 0.0, local_sum / n, global_sum / n};
    e.total = total_loss(e.local, e.global, cfg.lambda);
    curve.push_back(e);
    if (on_epoch) on_epoch(e, p);
  }
  return curve;
}

inline void write_loss_csv(const std::filesystem::path& path, const std::vector<EpochLosses>& curve) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.precision(17);
  out << "epoch,total,local,global\n";
  for (const auto& e : curve) out << e.epoch << ',' << e.total << ',' << e.local << ',' << e.global << '\n';
}

}  // namespace listenkit
