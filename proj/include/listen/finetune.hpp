#pragma once

// Supervised fine-tuning of backbone + MLP head on CLS embeddings, and
// confusion / macro-F1 evaluation.

#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "listen/adam.hpp"
#include "listen/checkpoint.hpp"
#include "listen/dataset.hpp"
#include "listen/model.hpp"

namespace listenkit {

struct FinetuneConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  bool freeze_backbone = false;

  void validate() const {
    if (epochs == 0) throw ConfigError("finetune: epochs must be >= 1");
    if (batch_size == 0) throw ConfigError("finetune: batch_size must be >= 1");
    if (!(lr >= 0.0)) throw ConfigError("finetune: lr must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const FinetuneConfig& c) {
  j = {{"epochs", c.epochs}, {"batch_size", c.batch_size}, {"lr", c.lr}, {"freeze_backbone", c.freeze_backbone}};
}

inline void from_json(const nlohmann::json& j, FinetuneConfig& c) {
  FinetuneConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.freeze_backbone = j.value("freeze_backbone", d.freeze_backbone);
}

template <typename T>
Classifier<T> build_classifier(const ModelConfig& cfg, std::size_t num_classes, std::uint64_t seed) {
  Prng prng(seed);
  return {build_backbone<T>(cfg, prng.fork(0).next()), build_head<T>(cfg.embed_dim, num_classes, prng.fork(1).next())};
}

// ---------------------------------------------------------------- training

template <typename T>
void check_labels(const Dataset<T>& data, std::size_t num_classes) {
  for (const auto& ex : data) {
    if (ex.label < 0 || static_cast<std::size_t>(ex.label) >= num_classes) {
      throw DomainError("label " + std::to_string(ex.label) + " outside [0," + std::to_string(num_classes) + ")");
    }
  }
}

using FinetuneEpochHook = std::function<void(std::size_t epoch, double loss)>;

// Trains only the head on fixed embeddings [n x d]. Returns the mean loss of
// each epoch.
template <typename T>
std::vector<double> finetune_head(MlpHead<T>& head, const Tensor<T>& embeddings, std::span<const int> labels,
                                  const FinetuneConfig& cfg, Prng& prng, const FinetuneEpochHook& on_epoch = {}) {
  cfg.validate();
  const std::size_t n = labels.size(), d = head.fc1.in_features();
  if (n == 0) throw InputError("finetune: empty training set");
  if (embeddings.rank() != 2 || embeddings.rows() != n || embeddings.cols() != d) {
    throw ShapeError("finetune_head: embeddings " + dims_string(embeddings.dims()) + " for " + std::to_string(n) + " labels");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= head.num_classes()) throw DomainError("label " + std::to_string(l) + " out of range");
  }
  MlpHead<T> grads = zeros_like(head);
  auto params = collect_parameters(head, grads);
  Adam<T> adam(AdamConfig{cfg.lr});
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::vector<double> curve;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    prng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size), b = end - start;
      zero_grads(params);
      Tensor<T> x({b, d});
      std::vector<int> y(b);
      for (std::size_t i = 0; i < b; ++i) {
        std::copy(embeddings.data() + order[start + i] * d, embeddings.data() + (order[start + i] + 1) * d, x.data() + i * d);
        y[i] = labels[order[start + i]];
      }
      HeadCache<T> hc;
      const auto loss = cross_entropy(head_forward(head, x, &hc), std::span<const int>(y));
      head_backward(head, hc, loss.grad, grads);
      adam.step(params);
      loss_sum += loss.value * static_cast<double>(b);
    }
    curve.push_back(loss_sum / static_cast<double>(n));
    if (on_epoch) on_epoch(epoch, curve.back());
  }
  return curve;
}

// Returns the mean training loss of each epoch.
template <typename T>
std::vector<double> finetune(Classifier<T>& model, const Dataset<T>& train, const FinetuneConfig& cfg, Prng& prng,
                             const FinetuneEpochHook& on_epoch = {}) {
  cfg.validate();
  if (train.empty()) throw InputError("finetune: empty training set");
  const std::size_t classes = model.head.num_classes(), d = model.backbone.dim();
  check_labels(train, classes);

  if (cfg.freeze_backbone) {
    Tensor<T> cls({train.size(), d});
    std::vector<int> labels;
    for (std::size_t i = 0; i < train.size(); ++i) {
      const auto e = cls_embedding(model.backbone, train[i].image);
      std::copy(e.data(), e.data() + d, cls.data() + i * d);
      labels.push_back(train[i].label);
    }
    return finetune_head(model.head, cls, std::span<const int>(labels), cfg, prng, on_epoch);
  }

  Classifier<T> grads = zeros_like(model);
  auto params = collect_parameters(model, grads);
  Adam<T> adam(AdamConfig{cfg.lr});
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<double> curve;
  const auto all = all_patches();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    prng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size), b = end - start;
      zero_grads(params);
      Tensor<T> cls({b, d});
      std::vector<int> labels(b);
      std::vector<BackboneCache<T>> caches(b);
      for (std::size_t i = 0; i < b; ++i) {
        const auto& ex = train[order[start + i]];
        labels[i] = ex.label;
        const auto tokens = forward_tokens(model.backbone, ex.image, std::span<const int>(all), &caches[i]);
        std::copy(tokens.data(), tokens.data() + d, cls.data() + i * d);
      }
      HeadCache<T> hc;
      const auto loss = cross_entropy(head_forward(model.head, cls, &hc), std::span<const int>(labels));
      const auto dcls = head_backward(model.head, hc, loss.grad, grads.head);
      for (std::size_t i = 0; i < b; ++i) {
        Tensor<T> dtokens({kNumTokens, d});
        std::copy(dcls.data() + i * d, dcls.data() + (i + 1) * d, dtokens.data());
        backward_tokens(model.backbone, caches[i], dtokens, grads.backbone);
      }
      adam.step(params);
      loss_sum += loss.value * static_cast<double>(b);
    }
    curve.push_back(loss_sum / static_cast<double>(train.size()));
    if (on_epoch) on_epoch(epoch, curve.back());
  }
  return curve;
}

// ---------------------------------------------------------------- prediction

struct Prediction {
  int mode = 0;
  double confidence = 0.0;
};

// Argmax with ties to the lowest id; confidence is the softmax maximum.
template <typename T>
Prediction predict_from_logits(std::span<const T> logits) {
  if (logits.empty()) throw ConfigError("predict: no logits");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  const double mx = logits[best];
  double z = 0.0;
  for (T v : logits) z += std::exp(static_cast<double>(v) - mx);
  return {static_cast<int>(best), 1.0 / z};
}

template <typename T>
Tensor<T> classifier_logits(const Classifier<T>& model, const Tensor<T>& image) {
  return head_forward(model.head, cls_embedding(model.backbone, image));
}

template <typename T>
Prediction predict(const Classifier<T>& model, const Tensor<T>& image) {
  const auto logits = classifier_logits(model, image);
  return predict_from_logits<T>(logits.values());
}

// ---------------------------------------------------------------- metrics

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 0) : classes_(classes), counts_(classes * classes, 0) {}

  std::size_t classes() const { return classes_; }
  std::size_t at(std::size_t truth, std::size_t pred) const { return counts_.at(truth * classes_ + pred); }
  void add(std::size_t truth, std::size_t pred) {
    if (truth >= classes_ || pred >= classes_) throw DomainError("confusion: class id out of range");
    ++counts_[truth * classes_ + pred];
  }
  std::size_t total() const {
    std::size_t n = 0;
    for (auto c : counts_) n += c;
    return n;
  }
  std::size_t row_sum(std::size_t truth) const {
    std::size_t n = 0;
    for (std::size_t p = 0; p < classes_; ++p) n += at(truth, p);
    return n;
  }
  std::size_t col_sum(std::size_t pred) const {
    std::size_t n = 0;
    for (std::size_t t = 0; t < classes_; ++t) n += at(t, pred);
    return n;
  }
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

  nlohmann::json to_json() const {
    auto rows = nlohmann::json::array();
    for (std::size_t t = 0; t < classes_; ++t) {
      auto row = nlohmann::json::array();
      for (std::size_t p = 0; p < classes_; ++p) row.push_back(at(t, p));
      rows.push_back(row);
    }
    return rows;
  }

 private:
  std::size_t classes_;
  std::vector<std::size_t> counts_;
};

inline ConfusionMatrix confusion(std::span<const int> preds, std::span<const int> labels, std::size_t classes) {
  if (preds.size() != labels.size()) {
    throw InputError("confusion: " + std::to_string(preds.size()) + " predictions vs " + std::to_string(labels.size()) + " labels");
  }
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] < 0 || labels[i] < 0) throw DomainError("confusion: negative class id");
    cm.add(static_cast<std::size_t>(labels[i]), static_cast<std::size_t>(preds[i]));
  }
  return cm;
}

// Per-class F1 (0 when precision + recall is 0); nullopt for classes with no
// true instances, which the macro mean skips.
inline std::vector<std::optional<double>> per_class_f1(const ConfusionMatrix& cm) {
  std::vector<std::optional<double>> out(cm.classes());
  for (std::size_t c = 0; c < cm.classes(); ++c) {
    const std::size_t support = cm.row_sum(c);
    if (support == 0) continue;
    const double tp = static_cast<double>(cm.at(c, c));
    const std::size_t predicted = cm.col_sum(c);
    const double precision = predicted ? tp / static_cast<double>(predicted) : 0.0;
    const double recall = tp / static_cast<double>(support);
    out[c] = precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
  }
  return out;
}

inline double macro_f1(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw DomainError("macro_f1: undefined for an empty confusion matrix");
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& f : per_class_f1(cm)) {
    if (!f) continue;
    sum += *f;
    ++n;
  }
  return sum / static_cast<double>(n);
}

struct F1Report {
  std::vector<std::optional<double>> per_class;
  double macro = 0.0;
  ConfusionMatrix confusion;
  std::vector<int> predictions;
  std::vector<double> confidences;

  nlohmann::json to_json(const ModeTaxonomy& labels = {}) const {
    auto classes = nlohmann::json::array();
    for (std::size_t c = 0; c < per_class.size(); ++c) {
      nlohmann::json e = {{"id", c}, {"support", confusion.row_sum(c)}};
      e["f1"] = per_class[c] ? nlohmann::json(*per_class[c]) : nlohmann::json(nullptr);
      if (c < labels.size()) e["label"] = labels[c].name;
      classes.push_back(e);
    }
    return {{"average", "macro"}, {"macro_f1", macro}, {"per_class", classes}, {"confusion", confusion.to_json()},
            {"clips", confusion.total()}};
  }
};

template <typename T>
F1Report evaluate(const Classifier<T>& model, const Dataset<T>& test) {
  if (test.empty()) throw InputError("evaluate: empty test set");
  const std::size_t classes = model.head.num_classes();
  check_labels(test, classes);
  F1Report r;
  std::vector<int> labels;
  for (const auto& ex : test) {
    const auto p = predict(model, ex.image);
    r.predictions.push_back(p.mode);
    r.confidences.push_back(p.confidence);
    labels.push_back(ex.label);
  }
  r.confusion = confusion(r.predictions, labels, classes);
  r.per_class = per_class_f1(r.confusion);
  r.macro = macro_f1(r.confusion);
  return r;
}

// ---------------------------------------------------------------- bundles

inline Classifier<float> classifier_from_bundle(const ModelBundle& m) {
  if (!m.head) throw ConfigError("checkpoint has no classification head");
  return {m.backbone, *m.head};
}

inline ModelBundle bundle_from_classifier(const Classifier<float>& c, const PreprocessingSettings& pre, ModeTaxonomy labels,
                                          nlohmann::json metadata = nlohmann::json::object()) {
  ModelBundle m;
  m.config = c.backbone.config;
  m.preprocessing = pre;
  m.backbone = c.backbone;
  m.head = c.head;
  m.labels = std::move(labels);
  m.metadata = std::move(metadata);
  return m;
}

}  // namespace listenkit
