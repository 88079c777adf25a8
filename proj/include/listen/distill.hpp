#pragma once

// Distils a frozen parent backbone into a smaller student by regressing the
// parent's CLS embedding from the student's through a linear projection. The
// projection exists only during training.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <vector>

#include "listen/adam.hpp"
#include "listen/checkpoint.hpp"
#include "listen/model.hpp"

namespace listenkit {

template <typename T>
struct ProjectionHead {
  using scalar_type = T;

  Linear<T> proj;  // [d_student x d_parent]

  template <typename F>
  void visit(F&& f) {
    Linear<T>::visit(proj, "proj.", f);
  }
  template <typename F>
  void visit(F&& f) const {
    Linear<T>::visit(proj, "proj.", f);
  }
};

template <typename T>
ProjectionHead<T> build_projection(std::size_t d_student, std::size_t d_parent, std::uint64_t seed) {
  Prng prng(seed);
  return {make_linear<T>(d_student, d_parent, prng)};
}

struct DistillConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  std::size_t max_steps = 0;  // 0: no cap
  double lr = 3e-4;

  void validate() const {
    if (epochs == 0 || batch_size == 0) throw ConfigError("distill: epochs and batch_size must be >= 1");
    if (!(lr >= 0.0)) throw ConfigError("distill: lr must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const DistillConfig& c) {
  j = {{"epochs", c.epochs}, {"batch_size", c.batch_size}, {"max_steps", c.max_steps}, {"lr", c.lr}};
}

inline void from_json(const nlohmann::json& j, DistillConfig& c) {
  DistillConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.max_steps = j.value("max_steps", d.max_steps);
  c.lr = j.value("lr", d.lr);
}

// ---------------------------------------------------------------- loss

// Mean over the batch of the squared Euclidean distance between rows.
template <typename T>
LossValue<T> distill_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.rank() != 2 || pred.dims() != target.dims()) {
    throw ShapeError("distill_loss: " + dims_string(pred.dims()) + " vs " + dims_string(target.dims()));
  }
  if (pred.rows() == 0) throw InputError("distill_loss: empty batch");
  const double b = static_cast<double>(pred.rows());
  LossValue<T> out{0.0, Tensor<T>(pred.dims())};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    out.value += e * e;
    out.grad[i] = static_cast<T>(2.0 * e / b);
  }
  out.value /= b;
  return out;
}

// CLS embeddings of `images`, one row each.
template <typename T>
Tensor<T> cls_batch(const Backbone<T>& b, const std::vector<const Tensor<T>*>& images) {
  Tensor<T> out({images.size(), b.dim()});
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto cls = cls_embedding(b, *images[i]);
    std::copy(cls.data(), cls.data() + b.dim(), out.data() + i * b.dim());
  }
  return out;
}

template <typename T>
Tensor<T> project(const ProjectionHead<T>& p, const Tensor<T>& cls) {
  return linear_forward(p.proj, cls);
}

// ---------------------------------------------------------------- training state

template <typename T>
struct DistillState {
  Backbone<T> student;
  ProjectionHead<T> proj;
  Backbone<T> student_grads;
  ProjectionHead<T> proj_grads;
  Adam<T> adam;

  DistillState(Backbone<T> s, ProjectionHead<T> p, double lr)
      : student(std::move(s)), proj(std::move(p)), student_grads(zeros_like(student)), proj_grads(zeros_like(proj)),
        adam(AdamConfig{lr}) {}

  std::vector<Parameter<T>> parameters() {
    auto params = collect_parameters(student, student_grads);
    for (auto& q : collect_parameters(proj, proj_grads)) params.push_back(q);
    return params;
  }
};

// One optimizer step against precomputed parent CLS rows; returns the batch
// loss before the step.
template <typename T>
double distill_step(DistillState<T>& s, const std::vector<const Tensor<T>*>& images, const Tensor<T>& parent_cls) {
  if (images.empty()) throw InputError("distill_step: empty batch");
  if (parent_cls.rank() != 2 || parent_cls.rows() != images.size()) {
    throw ShapeError("distill_step: " + std::to_string(images.size()) + " images vs parent rows " + dims_string(parent_cls.dims()));
  }
  const auto params = s.parameters();
  zero_grads(params);
  const std::size_t d = s.student.dim();
  std::vector<BackboneCache<T>> caches(images.size());
  Tensor<T> cls({images.size(), d});
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto all = all_patches();
    const auto tokens = forward_tokens(s.student, *images[i], std::span<const int>(all), &caches[i]);
    std::copy(tokens.data(), tokens.data() + d, cls.data() + i * d);
  }
  const auto loss = distill_loss(project(s.proj, cls), parent_cls);
  const auto dcls = linear_backward(s.proj.proj, cls, loss.grad, s.proj_grads.proj);
  for (std::size_t i = 0; i < images.size(); ++i) {
    Tensor<T> dtokens({caches[i].visible.size() + 1, d});
    std::copy(dcls.data() + i * d, dcls.data() + (i + 1) * d, dtokens.data());
    backward_tokens(s.student, caches[i], dtokens, s.student_grads);
  }
  s.adam.step(params);
  return loss.value;
}

// Convenience overload that runs the parent on the batch.
template <typename T>
double distill_step(DistillState<T>& s, const Backbone<T>& parent, const std::vector<const Tensor<T>*>& images) {
  return distill_step(s, images, cls_batch(parent, images));
}

// ---------------------------------------------------------------- runs

template <typename T>
struct FrozenParent {
  Backbone<T> backbone;
  PreprocessingSettings preprocessing;
};

struct DistillEpoch {
  std::size_t epoch = 0;     // 0 is the untrained student
  std::size_t steps = 0;     // optimizer steps so far
  double train_mse = 0.0;    // mean batch loss over the epoch
  double heldout_mse = 0.0;
  double heldout_cosine = 0.0;  // mean cosine(projected student CLS, parent CLS)
};

struct HeldoutScore {
  double mse = 0.0;
  double cosine = 0.0;
};

template <typename T>
HeldoutScore heldout_score(const DistillState<T>& s, const std::vector<const Tensor<T>*>& images, const Tensor<T>& parent_cls) {
  if (images.empty()) return {};
  const auto pred = project(s.proj, cls_batch(s.student, images));
  HeldoutScore r{distill_loss(pred, parent_cls).value, 0.0};
  const std::size_t d = pred.cols();
  for (std::size_t i = 0; i < pred.rows(); ++i) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t c = 0; c < d; ++c) {
      dot += static_cast<double>(pred(i, c)) * parent_cls(i, c);
      na += static_cast<double>(pred(i, c)) * pred(i, c);
      nb += static_cast<double>(parent_cls(i, c)) * parent_cls(i, c);
    }
    r.cosine += dot / std::max(std::sqrt(na * nb), 1e-30);
  }
  r.cosine /= static_cast<double>(pred.rows());
  return r;
}

template <typename T>
std::vector<const Tensor<T>*> pointers(const std::vector<Tensor<T>>& images) {
  std::vector<const Tensor<T>*> out;
  out.reserve(images.size());
  for (const auto& im : images) out.push_back(&im);
  return out;
}

using DistillEpochHook = std::function<void(const DistillEpoch&)>;

// Shuffled mini-batches over `train`; the parent runs once per clip since it
// is frozen. Returns the held-out curve, starting with the untrained student.
template <typename T>
std::vector<DistillEpoch> distill_run(const FrozenParent<T>& parent, const PreprocessingSettings& student_preprocessing,
                                      DistillState<T>& s, const std::vector<Tensor<T>>& train,
                                      const std::vector<Tensor<T>>& heldout, const DistillConfig& cfg, Prng& prng,
                                      const DistillEpochHook& on_epoch = {}) {
  cfg.validate();
  if (!(parent.preprocessing == student_preprocessing)) {
    throw ConfigError("distill: parent and student preprocessing settings differ");
  }
  if (train.empty()) throw InputError("distill: empty training corpus");
  const auto train_ptrs = pointers(train), held_ptrs = pointers(heldout);
  const Tensor<T> train_targets = cls_batch(parent.backbone, train_ptrs);
  const Tensor<T> held_targets = cls_batch(parent.backbone, held_ptrs);
  const std::size_t dp = parent.backbone.dim();
  if (s.proj.proj.out_features() != dp) throw ConfigError("distill: projection output does not match parent width");

  std::vector<DistillEpoch> curve;
  auto record = [&](DistillEpoch e) {
    const auto h = heldout_score(s, held_ptrs, held_targets);
    e.heldout_mse = h.mse;
    e.heldout_cosine = h.cosine;
    curve.push_back(e);
    if (on_epoch) on_epoch(e);
  };
  record({0, 0, 0.0, 0.0, 0.0});

  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t steps = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (cfg.max_steps && steps >= cfg.max_steps) break;
    prng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      if (cfg.max_steps && steps >= cfg.max_steps) break;
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<const Tensor<T>*> batch;
      Tensor<T> targets({end - start, dp});
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(train_ptrs[order[i]]);
        std::copy(train_targets.data() + order[i] * dp, train_targets.data() + (order[i] + 1) * dp,
                  targets.data() + (i - start) * dp);
      }
      loss_sum += distill_step(s, batch, targets);
      ++batches;
      ++steps;
    }
    record({epoch, steps, batches ? loss_sum / static_cast<double>(batches) : 0.0, 0.0, 0.0});
  }
  return curve;
}

inline void write_distill_csv(const std::filesystem::path& path, const std::vector<DistillEpoch>& curve) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.precision(17);
  out << "epoch,steps,train_mse,heldout_mse,heldout_cosine\n";
  for (const auto& e : curve) {
    out << e.epoch << ',' << e.steps << ',' << e.train_mse << ',' << e.heldout_mse << ',' << e.heldout_cosine << '\n';
  }
}

// ---------------------------------------------------------------- export

// The deployable student: backbone and preprocessing only. The projection is
// dropped.
template <typename T>
ModelBundle export_student(const Backbone<T>& student, const PreprocessingSettings& preprocessing,
                           nlohmann::json metadata = nlohmann::json::object()) {
  ModelBundle m;
  m.config = student.config;
  m.preprocessing = preprocessing;
  if constexpr (std::is_same_v<T, float>) {
    m.backbone = student;
  } else {
    m.backbone = cast_model<float>(student, build_backbone<float>(student.config, 0, Init::zeros));
    m.backbone.positional = sinusoidal_table<float>(kNumTokens, student.dim());
  }
  m.metadata = std::move(metadata);
  return m;
}

}  // namespace listenkit
