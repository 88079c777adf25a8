#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "listen/tensor.hpp"

namespace listenkit {

// A named parameter: value plus the gradient accumulator that mirrors it.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T>* value;
  Tensor<T>* grad;
};

// Zips the parameters of `model` with the same-shaped `grads` model.
template <typename Model>
auto collect_parameters(Model& model, Model& grads) {
  using T = typename std::remove_reference_t<decltype(model)>::scalar_type;
  std::vector<Parameter<T>> params;
  model.visit([&](const std::string& name, Tensor<T>& value) { params.push_back({name, &value, nullptr}); });
  std::size_t i = 0;
  grads.visit([&](const std::string& name, Tensor<T>& g) {
    if (i >= params.size() || params[i].name != name || !params[i].value->same_shape(g)) {
      throw InternalError("gradient store does not mirror model at '" + name + "'");
    }
    params[i++].grad = &g;
  });
  if (i != params.size()) throw InternalError("gradient store is missing parameters");
  return params;
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam with a constant learning rate.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  const AdamConfig& config() const { return config_; }
  long step_count() const { return step_; }

  void step(const std::vector<Parameter<T>>& params) {
    if (first_moment_.empty()) {
      for (const auto& p : params) {
        first_moment_.emplace_back(p.value->dims());
        second_moment_.emplace_back(p.value->dims());
      }
    }
    if (first_moment_.size() != params.size()) throw InternalError("adam: parameter list changed between steps");
    ++step_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<T>& value = *params[i].value;
      const Tensor<T>& grad = *params[i].grad;
      Tensor<T>& m = first_moment_[i];
      Tensor<T>& v = second_moment_[i];
      for (std::size_t j = 0; j < value.size(); ++j) {
        const double g = grad[j];
        const double mj = config_.beta1 * m[j] + (1.0 - config_.beta1) * g;
        const double vj = config_.beta2 * v[j] + (1.0 - config_.beta2) * g * g;
        m[j] = static_cast<T>(mj);
        v[j] = static_cast<T>(vj);
        const double update = config_.lr * (mj / c1) / (std::sqrt(vj / c2) + config_.eps);
        value[j] = static_cast<T>(value[j] - update);
      }
    }
  }

 private:
  AdamConfig config_;
  long step_ = 0;
  std::vector<Tensor<T>> first_moment_;
  std::vector<Tensor<T>> second_moment_;
};

template <typename T>
void zero_grads(const std::vector<Parameter<T>>& params) {
  for (const auto& p : params) p.grad->zero();
}

}  // namespace listenkit
