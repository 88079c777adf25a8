#pragma once

// Layer primitives with explicit forward and backward passes. Backward
// functions accumulate parameter gradients (+=) and return input gradients.

#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <vector>

#include "listen/tensor.hpp"

namespace listenkit {

// ---------------------------------------------------------------- matmul

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw ShapeError("matmul: " + dims_string(a.dims()) + " x " + dims_string(b.dims()));
  }
  Tensor<T> c({a.rows(), b.cols()});
  as_matrix(c).noalias() = as_matrix(a) * as_matrix(b);
  return c;
}

template <typename T>
struct MatmulGrads {
  Tensor<T> da;
  Tensor<T> db;
};

// dA = dC * B^T, dB = A^T * dC
template <typename T>
MatmulGrads<T> matmul_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& dc) {
  if (dc.rank() != 2 || dc.rows() != a.rows() || dc.cols() != b.cols()) {
    throw ShapeError("matmul_backward: upstream gradient " + dims_string(dc.dims()));
  }
  MatmulGrads<T> g{Tensor<T>(a.dims()), Tensor<T>(b.dims())};
  as_matrix(g.da).noalias() = as_matrix(dc) * as_matrix(b).transpose();
  as_matrix(g.db).noalias() = as_matrix(a).transpose() * as_matrix(dc);
  return g;
}

// ---------------------------------------------------------------- linear

// y = x * weight + bias, weight stored [in x out].
template <typename T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;

  std::size_t in_features() const { return weight.rows(); }
  std::size_t out_features() const { return weight.cols(); }

  template <typename Self, typename F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "weight", self.weight);
    f(prefix + "bias", self.bias);
  }
};

template <typename T>
Linear<T> make_linear(std::size_t in, std::size_t out, Prng& prng, double std = 0.02) {
  return {trunc_normal_init<T>({in, out}, std, prng), Tensor<T>({out})};
}

template <typename T>
Tensor<T> linear_forward(const Linear<T>& layer, const Tensor<T>& x) {
  if (x.rank() != 2 || x.cols() != layer.in_features()) {
    throw ShapeError("linear: input " + dims_string(x.dims()) + " vs weight " +
                     dims_string(layer.weight.dims()));
  }
  Tensor<T> y({x.rows(), layer.out_features()});
  auto ym = as_matrix(y);
  ym.noalias() = as_matrix(x) * as_matrix(layer.weight);
  ym.rowwise() += as_row(layer.bias);
  return y;
}

template <typename T>
Tensor<T> linear_backward(const Linear<T>& layer, const Tensor<T>& x, const Tensor<T>& dy,
                          Linear<T>& grad, bool need_input_grad = true) {
  auto dym = as_matrix(dy);
  as_matrix(grad.weight).noalias() += as_matrix(x).transpose() * dym;
  as_row(grad.bias) += dym.colwise().sum();
  if (!need_input_grad) return {};
  Tensor<T> dx(x.dims());
  as_matrix(dx).noalias() = dym * as_matrix(layer.weight).transpose();
  return dx;
}

// ---------------------------------------------------------------- layernorm

inline constexpr double kLayerNormEps = 1e-6;

template <typename T>
struct LayerNormParams {
  Tensor<T> gain;
  Tensor<T> bias;

  template <typename Self, typename F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "gain", self.gain);
    f(prefix + "bias", self.bias);
  }
};

template <typename T>
LayerNormParams<T> make_layernorm(std::size_t d) {
  return {Tensor<T>({d}, T{1}), Tensor<T>({d})};
}

template <typename T>
struct LayerNormCache {
  Tensor<T> normalized;      // (x - mean) * rstd
  std::vector<T> rstd;       // per row
};

// Per-row normalization over the last dimension, population variance (1/d).
// `params == nullptr` gives the parameter-free variant.
template <typename T>
Tensor<T> layernorm_forward(const Tensor<T>& x, const LayerNormParams<T>* params,
                            LayerNormCache<T>* cache = nullptr, double eps = kLayerNormEps) {
  if (x.rank() == 0 || x.dims().back() == 0) throw ShapeError("layernorm: zero feature dimension");
  const std::size_t d = x.dims().back();
  if (params && params->gain.size() != d) {
    throw ShapeError("layernorm: gain length " + std::to_string(params->gain.size()) +
                     " vs feature dim " + std::to_string(d));
  }
  const std::size_t rows = x.size() / d;
  Tensor<T> y(x.dims());
  if (cache) {
    cache->normalized = Tensor<T>(x.dims());
    cache->rstd.assign(rows, T{0});
  }
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * d;
    T* yr = y.data() + r * d;
    T mean = 0;
    for (std::size_t i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<T>(d);
    const T rstd = T{1} / std::sqrt(var + static_cast<T>(eps));
    for (std::size_t i = 0; i < d; ++i) {
      const T n = (xr[i] - mean) * rstd;
      if (cache) cache->normalized[r * d + i] = n;
      yr[i] = params ? n * params->gain[i] + params->bias[i] : n;
    }
    if (cache) cache->rstd[r] = rstd;
  }
  return y;
}

template <typename T>
Tensor<T> layernorm_backward(const LayerNormCache<T>& cache, const LayerNormParams<T>* params,
                             const Tensor<T>& dy, LayerNormParams<T>* grad) {
  const std::size_t d = dy.dims().back();
  const std::size_t rows = dy.size() / d;
  Tensor<T> dx(dy.dims());
  std::vector<T> dn(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* dyr = dy.data() + r * d;
    const T* nr = cache.normalized.data() + r * d;
    T mean_dn = 0, mean_dn_n = 0;
    for (std::size_t i = 0; i < d; ++i) {
      dn[i] = params ? dyr[i] * params->gain[i] : dyr[i];
      mean_dn += dn[i];
      mean_dn_n += dn[i] * nr[i];
      if (grad) {
        grad->gain[i] += dyr[i] * nr[i];
        grad->bias[i] += dyr[i];
      }
    }
    mean_dn /= static_cast<T>(d);
    mean_dn_n /= static_cast<T>(d);
    T* dxr = dx.data() + r * d;
    for (std::size_t i = 0; i < d; ++i) dxr[i] = cache.rstd[r] * (dn[i] - mean_dn - nr[i] * mean_dn_n);
  }
  return dx;
}

// ---------------------------------------------------------------- activations

enum class Activation { relu, gelu };

inline const char* to_string(Activation a) { return a == Activation::relu ? "relu" : "gelu"; }

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu" || s == "ReLU") return Activation::relu;
  if (s == "gelu" || s == "GELU") return Activation::gelu;
  throw ConfigError("unknown activation '" + s + "'");
}

template <typename T>
Tensor<T> activation_forward(Activation act, const Tensor<T>& x) {
  Tensor<T> y(x.dims());
  if (act == Activation::relu) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T{0} ? x[i] : T{0};
  } else {
    // exact (erf) GELU
    for (std::size_t i = 0; i < x.size(); ++i)
      y[i] = static_cast<T>(0.5) * x[i] * (T{1} + std::erf(x[i] * static_cast<T>(std::numbers::sqrt2 / 2)));
  }
  return y;
}

template <typename T>
Tensor<T> activation_backward(Activation act, const Tensor<T>& x, const Tensor<T>& dy) {
  Tensor<T> dx(x.dims());
  if (act == Activation::relu) {
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > T{0} ? dy[i] : T{0};
  } else {
    const T inv_sqrt2 = static_cast<T>(std::numbers::sqrt2 / 2);
    const T inv_sqrt2pi = static_cast<T>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const T cdf = static_cast<T>(0.5) * (T{1} + std::erf(x[i] * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(static_cast<T>(-0.5) * x[i] * x[i]);
      dx[i] = dy[i] * (cdf + x[i] * pdf);
    }
  }
  return dx;
}

// ---------------------------------------------------------------- softmax

template <typename T>
void softmax_inplace(std::span<T> row) {
  T mx = -std::numeric_limits<T>::infinity();
  for (T v : row) mx = std::max(mx, v);
  T sum = 0;
  for (T& v : row) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (T& v : row) v /= sum;
}

// ---------------------------------------------------------------- attention

template <typename T>
struct AttentionCache {
  std::vector<RowMatrix<T>> probs;  // one [T x T] matrix per head
};

inline std::size_t head_dim(std::size_t d, std::size_t heads) {
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention: embedding dim " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  return d / heads;
}

// softmax(Q K^T / sqrt(d_h)) V per head; heads concatenated along features.
template <typename T>
Tensor<T> attention_forward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                            std::size_t heads, AttentionCache<T>* cache = nullptr) {
  require_same_shape(q, k, "attention q/k");
  require_same_shape(q, v, "attention q/v");
  const std::size_t n = q.rows(), d = q.cols();
  const std::size_t dh = head_dim(d, heads);
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));
  Tensor<T> out({n, d});
  auto qm = as_matrix(q), km = as_matrix(k), vm = as_matrix(v);
  auto om = as_matrix(out);
  if (cache) cache->probs.assign(heads, RowMatrix<T>());
  const auto ni = static_cast<Eigen::Index>(n), dhi = static_cast<Eigen::Index>(dh);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto c0 = static_cast<Eigen::Index>(h * dh);
    RowMatrix<T> s = (qm.middleCols(c0, dhi) * km.middleCols(c0, dhi).transpose()) * scale;
    for (Eigen::Index r = 0; r < ni; ++r) softmax_inplace(std::span<T>(s.row(r).data(), n));
    om.middleCols(c0, dhi).noalias() = s * vm.middleCols(c0, dhi);
    if (cache) cache->probs[h] = std::move(s);
  }
  return out;
}

template <typename T>
struct AttentionGrads {
  Tensor<T> dq, dk, dv;
};

template <typename T>
AttentionGrads<T> attention_backward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                     std::size_t heads, const AttentionCache<T>& cache,
                                     const Tensor<T>& dout) {
  const std::size_t d = q.cols();
  const std::size_t dh = head_dim(d, heads);
  const T scale = T{1} / std::sqrt(static_cast<T>(dh));
  AttentionGrads<T> g{Tensor<T>(q.dims()), Tensor<T>(k.dims()), Tensor<T>(v.dims())};
  auto qm = as_matrix(q), km = as_matrix(k), vm = as_matrix(v), dom = as_matrix(dout);
  auto dqm = as_matrix(g.dq), dkm = as_matrix(g.dk), dvm = as_matrix(g.dv);
  const auto dhi = static_cast<Eigen::Index>(dh);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto c0 = static_cast<Eigen::Index>(h * dh);
    const RowMatrix<T>& p = cache.probs[h];
    RowMatrix<T> dp = dom.middleCols(c0, dhi) * vm.middleCols(c0, dhi).transpose();
    dvm.middleCols(c0, dhi).noalias() = p.transpose() * dom.middleCols(c0, dhi);
    // softmax Jacobian: dS = P o (dP - rowsum(dP o P))
    Eigen::Matrix<T, Eigen::Dynamic, 1> rowdot = (dp.array() * p.array()).rowwise().sum();
    RowMatrix<T> ds = (p.array() * (dp.colwise() - rowdot).array()).matrix() * scale;
    dqm.middleCols(c0, dhi).noalias() = ds * km.middleCols(c0, dhi);
    dkm.middleCols(c0, dhi).noalias() = ds.transpose() * qm.middleCols(c0, dhi);
  }
  return g;
}

// ---------------------------------------------------------------- conv2d

struct Conv2dGeometry {
  std::size_t in_channels, height, width;
  std::size_t out_channels, kernel, stride, padding;

  std::size_t out_height() const { return (height + 2 * padding - kernel) / stride + 1; }
  std::size_t out_width() const { return (width + 2 * padding - kernel) / stride + 1; }
  std::size_t patch_size() const { return in_channels * kernel * kernel; }

  void validate() const {
    if (kernel == 0 || stride == 0) throw ShapeError("conv2d: kernel and stride must be positive");
    if (height + 2 * padding < kernel || width + 2 * padding < kernel) {
      throw ShapeError("conv2d: kernel larger than padded input");
    }
  }
};

// Rows are output positions (row-major over H' x W'), columns are
// (channel, ky, kx) taps. Out-of-range taps read zero padding.
template <typename T>
Tensor<T> im2col(const Tensor<T>& x, const Conv2dGeometry& g) {
  const std::size_t oh = g.out_height(), ow = g.out_width(), k = g.kernel;
  Tensor<T> cols({oh * ow, g.patch_size()});
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      T* dst = cols.data() + (oy * ow + ox) * g.patch_size();
      for (std::size_t c = 0; c < g.in_channels; ++c) {
        for (std::size_t ky = 0; ky < k; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.padding);
          for (std::size_t kx = 0; kx < k; ++kx) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.padding);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.height) &&
                                ix < static_cast<std::ptrdiff_t>(g.width);
            *dst++ = inside ? x[(c * g.height + static_cast<std::size_t>(iy)) * g.width + static_cast<std::size_t>(ix)] : T{0};
          }
        }
      }
    }
  }
  return cols;
}

template <typename T>
Tensor<T> col2im(const Tensor<T>& cols, const Conv2dGeometry& g) {
  const std::size_t oh = g.out_height(), ow = g.out_width(), k = g.kernel;
  Tensor<T> x({g.in_channels, g.height, g.width});
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      const T* src = cols.data() + (oy * ow + ox) * g.patch_size();
      for (std::size_t c = 0; c < g.in_channels; ++c) {
        for (std::size_t ky = 0; ky < k; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.padding);
          for (std::size_t kx = 0; kx < k; ++kx, ++src) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.padding);
            if (iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.height) &&
                ix < static_cast<std::ptrdiff_t>(g.width)) {
              x[(c * g.height + static_cast<std::size_t>(iy)) * g.width + static_cast<std::size_t>(ix)] += *src;
            }
          }
        }
      }
    }
  }
  return x;
}

// Convolution weights are [C_out x C_in x k x k], bias [C_out].
template <typename T>
struct Conv2d {
  Tensor<T> weight;
  Tensor<T> bias;
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t kernel() const { return weight.dim(2); }

  Conv2dGeometry geometry(const Tensor<T>& x) const {
    if (x.rank() != 3 || x.dim(0) != in_channels()) {
      throw ShapeError("conv2d: input " + dims_string(x.dims()) + " vs weight " + dims_string(weight.dims()));
    }
    Conv2dGeometry g{in_channels(), x.dim(1), x.dim(2), out_channels(), kernel(), stride, padding};
    g.validate();
    return g;
  }

  template <typename Self, typename F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "weight", self.weight);
    f(prefix + "bias", self.bias);
  }
};

template <typename T>
Conv2d<T> make_conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                      std::size_t padding, Prng& prng, double std = 0.02) {
  return {trunc_normal_init<T>({out, in, kernel, kernel}, std, prng), Tensor<T>({out}), stride, padding};
}

// Cross-correlation. Output [C_out x H' x W'], H' = floor((H + 2p - k)/s) + 1.
template <typename T>
Tensor<T> conv2d_forward(const Conv2d<T>& conv, const Tensor<T>& x) {
  const auto g = conv.geometry(x);
  const Tensor<T> cols = im2col(x, g);
  Tensor<T> y({g.out_channels, g.out_height(), g.out_width()});
  const Eigen::Map<const RowMatrix<T>> w(conv.weight.data(), static_cast<Eigen::Index>(g.out_channels),
                                         static_cast<Eigen::Index>(g.patch_size()));
  Eigen::Map<RowMatrix<T>> ym(y.data(), static_cast<Eigen::Index>(g.out_channels),
                              static_cast<Eigen::Index>(g.out_height() * g.out_width()));
  ym.noalias() = w * as_matrix(cols).transpose();
  ym.colwise() += as_row(conv.bias).transpose();
  return y;
}

template <typename T>
Tensor<T> conv2d_backward(const Conv2d<T>& conv, const Tensor<T>& x, const Tensor<T>& dy,
                          Conv2d<T>& grad, bool need_input_grad = true) {
  const auto g = conv.geometry(x);
  const Tensor<T> cols = im2col(x, g);
  const auto positions = static_cast<Eigen::Index>(g.out_height() * g.out_width());
  Eigen::Map<const RowMatrix<T>> dym(dy.data(), static_cast<Eigen::Index>(g.out_channels), positions);
  const Eigen::Map<const RowMatrix<T>> w(conv.weight.data(), static_cast<Eigen::Index>(g.out_channels),
                                         static_cast<Eigen::Index>(g.patch_size()));
  Eigen::Map<RowMatrix<T>> dw(grad.weight.data(), static_cast<Eigen::Index>(g.out_channels),
                              static_cast<Eigen::Index>(g.patch_size()));
  dw.noalias() += dym * as_matrix(cols);
  as_row(grad.bias) += dym.rowwise().sum().transpose();
  if (!need_input_grad) return {};
  Tensor<T> dcols(cols.dims());
  as_matrix(dcols).noalias() = dym.transpose() * w;
  return col2im(dcols, g);
}

// ---------------------------------------------------------------- losses

template <typename T>
struct LossValue {
  double value = 0.0;
  Tensor<T> grad;  // d loss / d pred
};

// mean over elements of 0.5 e^2 (|e| <= delta) or delta (|e| - delta/2)
template <typename T>
LossValue<T> huber(const Tensor<T>& pred, const Tensor<T>& target, double delta = 1.0) {
  if (pred.size() != target.size()) throw ShapeError("huber: " + dims_string(pred.dims()) + " vs " + dims_string(target.dims()));
  if (pred.empty()) throw ShapeError("huber: empty tensors");
  LossValue<T> out{0.0, Tensor<T>(pred.dims())};
  const double n = static_cast<double>(pred.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    const double ae = std::abs(e);
    if (ae <= delta) {
      sum += 0.5 * e * e;
      out.grad[i] = static_cast<T>(e / n);
    } else {
      sum += delta * (ae - 0.5 * delta);
      out.grad[i] = static_cast<T>((e > 0 ? delta : -delta) / n);
    }
  }
  out.value = sum / n;
  return out;
}

template <typename T>
LossValue<T> mse(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.size() != target.size()) throw ShapeError("mse: " + dims_string(pred.dims()) + " vs " + dims_string(target.dims()));
  if (pred.empty()) throw ShapeError("mse: empty tensors");
  LossValue<T> out{0.0, Tensor<T>(pred.dims())};
  const double n = static_cast<double>(pred.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    sum += e * e;
    out.grad[i] = static_cast<T>(2.0 * e / n);
  }
  out.value = sum / n;
  return out;
}

// Mean of -log softmax(logits)[label] over rows; log-sum-exp stabilized.
template <typename T>
LossValue<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.rows() != labels.size()) {
    throw ShapeError("cross_entropy: logits " + dims_string(logits.dims()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t b = logits.rows(), c = logits.cols();
  LossValue<T> out{0.0, Tensor<T>(logits.dims())};
  double sum = 0.0;
  for (std::size_t r = 0; r < b; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= c) {
      throw DomainError("cross_entropy: label " + std::to_string(labels[r]) + " outside [0," + std::to_string(c) + ")");
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, static_cast<double>(logits(r, j)));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(static_cast<double>(logits(r, j)) - mx);
    const double lse = mx + std::log(z);
    sum += lse - static_cast<double>(logits(r, static_cast<std::size_t>(labels[r])));
    for (std::size_t j = 0; j < c; ++j) {
      const double p = std::exp(static_cast<double>(logits(r, j)) - lse);
      const double onehot = static_cast<std::size_t>(labels[r]) == j ? 1.0 : 0.0;
      out.grad(r, j) = static_cast<T>((p - onehot) / static_cast<double>(b));
    }
  }
  out.value = sum / static_cast<double>(b);
  return out;
}

}  // namespace listenkit
