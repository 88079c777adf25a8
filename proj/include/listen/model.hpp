#pragma once

// Spectrogram transformer family: strided-conv patch stem, CLS + fixed
// sinusoidal positions, pre-norm encoder blocks, the classification MLP head
// and the CNN decoder used by masked pretraining.

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "listen/ops.hpp"
#include "listen/tensor.hpp"

namespace listenkit {

inline constexpr std::size_t kImageSize = 128;
inline constexpr std::size_t kPatchSize = 16;
inline constexpr std::size_t kGridSize = kImageSize / kPatchSize;     // 8
inline constexpr std::size_t kNumPatches = kGridSize * kGridSize;     // 64
inline constexpr std::size_t kNumTokens = kNumPatches + 1;            // with CLS
inline constexpr std::size_t kPatchPixels = kPatchSize * kPatchSize;  // 256
inline constexpr std::size_t kHeadHidden = 256;
inline constexpr std::size_t kDecoderChannels = kPatchPixels;

// ---------------------------------------------------------------- config

struct ModelConfig {
  std::string name;
  std::size_t embed_dim = 64;
  std::size_t num_layers = 2;
  std::size_t expansion = 1;
  Activation activation = Activation::relu;
  std::size_t heads = 1;

  static std::size_t default_heads(std::size_t embed_dim) { return std::max<std::size_t>(1, embed_dim / 64); }

  static ModelConfig make(std::string name, std::size_t d, std::size_t layers, std::size_t expansion, Activation act) {
    return {std::move(name), d, layers, expansion, act, default_heads(d)};
  }

  void validate() const {
    if (embed_dim == 0 || num_layers == 0 || expansion == 0 || heads == 0) {
      throw ConfigError("model config: dims, layers, expansion and heads must all be >= 1");
    }
    if (embed_dim % heads != 0 || embed_dim < heads) {
      throw ConfigError("model config: embed_dim " + std::to_string(embed_dim) + " not divisible by " +
                        std::to_string(heads) + " heads");
    }
    if (embed_dim > 4096 || num_layers > 64 || expansion > 64) throw ConfigError("model config: size out of range");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"name", c.name},           {"embed_dim", c.embed_dim},           {"num_layers", c.num_layers},
       {"expansion", c.expansion}, {"activation", to_string(c.activation)}, {"heads", c.heads}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.name = j.value("name", std::string{});
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.num_layers = j.at("num_layers").get<std::size_t>();
  c.expansion = j.at("expansion").get<std::size_t>();
  c.activation = activation_from_string(j.at("activation").get<std::string>());
  c.heads = j.contains("heads") ? j.at("heads").get<std::size_t>() : ModelConfig::default_heads(c.embed_dim);
}

// Encoder-block parameter count: per layer (4 + 2f) d^2 + (9 + f) d, i.e. the
// four attention projections and the MLP with biases plus two layernorms.
inline std::size_t block_param_formula(const ModelConfig& c) {
  const std::size_t d = c.embed_dim, f = c.expansion;
  return c.num_layers * ((4 + 2 * f) * d * d + (9 + f) * d);
}

// ---------------------------------------------------------------- parameters

template <typename T>
struct EncoderBlock {
  LayerNormParams<T> norm1;
  Linear<T> q, k, v, out;
  LayerNormParams<T> norm2;
  Linear<T> fc1, fc2;

  template <typename Self, typename F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    LayerNormParams<T>::visit(self.norm1, prefix + "norm1.", f);
    Linear<T>::visit(self.q, prefix + "attn.q.", f);
    Linear<T>::visit(self.k, prefix + "attn.k.", f);
    Linear<T>::visit(self.v, prefix + "attn.v.", f);
    Linear<T>::visit(self.out, prefix + "attn.out.", f);
    LayerNormParams<T>::visit(self.norm2, prefix + "norm2.", f);
    Linear<T>::visit(self.fc1, prefix + "mlp.fc1.", f);
    Linear<T>::visit(self.fc2, prefix + "mlp.fc2.", f);
  }
};

// Fixed table: even columns sin(pos / 10000^(i/d)), odd columns the matching cos.
template <typename T>
Tensor<T> sinusoidal_table(std::size_t positions, std::size_t d) {
  Tensor<T> table({positions, d});
  for (std::size_t p = 0; p < positions; ++p) {
    for (std::size_t i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d));
      const double angle = static_cast<double>(p) * freq;
      table(p, i) = static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return table;
}

template <typename T>
struct Backbone {
  using scalar_type = T;

  ModelConfig config;
  Conv2d<T> patch_embed;    // [d x 1 x 16 x 16], stride 16
  Tensor<T> cls_token;      // [d]
  Tensor<T> mask_token;     // [d]
  std::vector<EncoderBlock<T>> blocks;
  LayerNormParams<T> final_norm;
  Tensor<T> positional;     // [65 x d]; row 0 is CLS, row 1 + p is patch p. Not trained.

  std::size_t dim() const { return config.embed_dim; }

  template <typename F>
  void visit(F&& f) { visit_impl(*this, f); }
  template <typename F>
  void visit(F&& f) const { visit_impl(*this, f); }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    Conv2d<T>::visit(self.patch_embed, "patch_embed.", f);
    f(std::string("cls_token"), self.cls_token);
    f(std::string("mask_token"), self.mask_token);
    for (std::size_t i = 0; i < self.blocks.size(); ++i) {
      EncoderBlock<T>::visit(self.blocks[i], "blocks." + std::to_string(i) + ".", f);
    }
    LayerNormParams<T>::visit(self.final_norm, "final_norm.", f);
  }
};

// d -> 256 (ReLU) -> LayerNorm(256) -> num_classes
template <typename T>
struct MlpHead {
  using scalar_type = T;

  Linear<T> fc1;
  LayerNormParams<T> norm;
  Linear<T> fc2;

  std::size_t num_classes() const { return fc2.out_features(); }

  template <typename F>
  void visit(F&& f) { visit_impl(*this, f); }
  template <typename F>
  void visit(F&& f) const { visit_impl(*this, f); }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    Linear<T>::visit(self.fc1, "head.fc1.", f);
    LayerNormParams<T>::visit(self.norm, "head.norm.", f);
    Linear<T>::visit(self.fc2, "head.fc2.", f);
  }
};

// 3x3 d->d conv (ReLU) then 1x1 d->256 conv over the 8x8 token grid; each
// token's 256 channels become its 16x16 patch of the output map.
template <typename T>
struct CnnDecoder {
  using scalar_type = T;

  Conv2d<T> conv_a;
  Conv2d<T> conv_b;

  template <typename F>
  void visit(F&& f) { visit_impl(*this, f); }
  template <typename F>
  void visit(F&& f) const { visit_impl(*this, f); }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    Conv2d<T>::visit(self.conv_a, "decoder.conv_a.", f);
    Conv2d<T>::visit(self.conv_b, "decoder.conv_b.", f);
  }
};

template <typename T>
struct Classifier {
  using scalar_type = T;

  Backbone<T> backbone;
  MlpHead<T> head;

  template <typename F>
  void visit(F&& f) {
    backbone.visit(f);
    head.visit(f);
  }
  template <typename F>
  void visit(F&& f) const {
    backbone.visit(f);
    head.visit(f);
  }
};

template <typename Model>
Model zeros_like(const Model& model) {
  Model g = model;
  g.visit([](const std::string&, auto& t) { t.zero(); });
  return g;
}

// Copies every parameter of a model into one of a different scalar type.
template <typename U, template <typename> class M, typename T>
M<U> cast_model(const M<T>& model, const M<U>& shape_donor) {
  M<U> out = shape_donor;
  std::vector<const Tensor<T>*> src;
  model.visit([&](const std::string&, const Tensor<T>& t) { src.push_back(&t); });
  std::size_t i = 0;
  out.visit([&](const std::string&, Tensor<U>& t) { t = src.at(i++)->template cast<U>(); });
  return out;
}

template <typename Model>
std::size_t count_params(const Model& model) {
  std::size_t n = 0;
  model.visit([&](const std::string&, const auto& t) { n += t.size(); });
  return n;
}

// Raw parameter bytes in visit order; equal strings mean bitwise-equal models.
template <typename Model>
std::string serialize_params(const Model& model) {
  std::string out;
  model.visit([&](const std::string&, const auto& t) {
    out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(*t.data()));
  });
  return out;
}

enum class ParamScope { blocks, full };

template <typename T>
std::size_t count_params(const Backbone<T>& b, ParamScope scope) {
  std::size_t n = 0;
  b.visit([&](const std::string& name, const Tensor<T>& t) {
    if (scope == ParamScope::full || name.rfind("blocks.", 0) == 0) n += t.size();
  });
  return n;
}

// ---------------------------------------------------------------- builders

// `zeros` gives the same layout with every tensor zero-filled (layernorm
// gains still 1), for loading checkpoints and counting parameters.
enum class Init { random, zeros };

namespace detail {

template <typename T>
class LayerFactory {
 public:
  LayerFactory(std::uint64_t seed, Init init) : prng_(seed), random_(init == Init::random) {}

  Tensor<T> tokens(std::size_t d) { return random_ ? trunc_normal_init<T>({d}, 0.02, prng_) : Tensor<T>({d}); }
  Linear<T> linear(std::size_t in, std::size_t out) {
    return random_ ? make_linear<T>(in, out, prng_) : Linear<T>{Tensor<T>({in, out}), Tensor<T>({out})};
  }
  Conv2d<T> conv(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t padding) {
    if (random_) return make_conv2d<T>(in, out, kernel, stride, padding, prng_);
    return {Tensor<T>({out, in, kernel, kernel}), Tensor<T>({out}), stride, padding};
  }

 private:
  Prng prng_;
  bool random_;
};

}  // namespace detail

template <typename T>
Backbone<T> build_backbone(const ModelConfig& cfg, std::uint64_t seed, Init init = Init::random) {
  cfg.validate();
  detail::LayerFactory<T> make(seed, init);
  const std::size_t d = cfg.embed_dim, hidden = cfg.embed_dim * cfg.expansion;
  Backbone<T> b;
  b.config = cfg;
  b.patch_embed = make.conv(1, d, kPatchSize, kPatchSize, 0);
  b.cls_token = make.tokens(d);
  b.mask_token = make.tokens(d);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    EncoderBlock<T> blk;
    blk.norm1 = make_layernorm<T>(d);
    blk.q = make.linear(d, d);
    blk.k = make.linear(d, d);
    blk.v = make.linear(d, d);
    blk.out = make.linear(d, d);
    blk.norm2 = make_layernorm<T>(d);
    blk.fc1 = make.linear(d, hidden);
    blk.fc2 = make.linear(hidden, d);
    b.blocks.push_back(std::move(blk));
  }
  b.final_norm = make_layernorm<T>(d);
  b.positional = sinusoidal_table<T>(kNumTokens, d);
  return b;
}

template <typename T>
MlpHead<T> build_head(std::size_t embed_dim, std::size_t num_classes, std::uint64_t seed, Init init = Init::random) {
  if (num_classes == 0) throw ConfigError("head: need at least one class");
  detail::LayerFactory<T> make(seed, init);
  auto fc1 = make.linear(embed_dim, kHeadHidden);
  return {std::move(fc1), make_layernorm<T>(kHeadHidden), make.linear(kHeadHidden, num_classes)};
}

template <typename T>
CnnDecoder<T> build_decoder(std::size_t embed_dim, std::uint64_t seed, Init init = Init::random) {
  detail::LayerFactory<T> make(seed, init);
  auto conv_a = make.conv(embed_dim, embed_dim, 3, 1, 1);
  return {std::move(conv_a), make.conv(embed_dim, kDecoderChannels, 1, 1, 0)};
}

// ---------------------------------------------------------------- patches

inline std::vector<int> all_patches() {
  std::vector<int> idx(kNumPatches);
  for (std::size_t i = 0; i < kNumPatches; ++i) idx[i] = static_cast<int>(i);
  return idx;
}

inline void check_patch_indices(std::span<const int> indices) {
  if (indices.empty()) throw ConfigError("forward: empty visible patch set");
  std::set<int> seen;
  for (int p : indices) {
    if (p < 0 || p >= static_cast<int>(kNumPatches)) throw ConfigError("forward: patch index " + std::to_string(p) + " out of range");
    if (!seen.insert(p).second) throw ConfigError("forward: duplicate patch index " + std::to_string(p));
  }
}

// Rows are the 16x16 pixel blocks of the listed patches; patch p covers mel
// rows 16 * (p / 8) .. and frames 16 * (p % 8) ..
template <typename T>
Tensor<T> extract_patches(const Tensor<T>& image, std::span<const int> indices) {
  if (image.rank() != 2 || image.rows() != kImageSize || image.cols() != kImageSize) {
    throw ShapeError("spectrogram must be 128x128, got " + dims_string(image.dims()));
  }
  Tensor<T> out({indices.size(), kPatchPixels});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto p = static_cast<std::size_t>(indices[i]);
    const std::size_t r0 = (p / kGridSize) * kPatchSize, c0 = (p % kGridSize) * kPatchSize;
    T* dst = out.data() + i * kPatchPixels;
    for (std::size_t y = 0; y < kPatchSize; ++y) {
      const T* src = image.data() + (r0 + y) * kImageSize + c0;
      std::copy(src, src + kPatchSize, dst + y * kPatchSize);
    }
  }
  return out;
}

// ---------------------------------------------------------------- encoder

template <typename T>
struct BlockCache {
  Tensor<T> input, h1, q, k, v, attn, mid, h2, pre_act, act;
  LayerNormCache<T> norm1, norm2;
  AttentionCache<T> attention;
};

template <typename T>
struct BackboneCache {
  std::vector<int> visible;
  Tensor<T> pixels;  // [V x 256]
  std::vector<BlockCache<T>> blocks;
  LayerNormCache<T> final_norm;
};

// x + attn(LN1(x)), then + mlp(LN2(.))
template <typename T>
Tensor<T> block_forward(const EncoderBlock<T>& blk, const ModelConfig& cfg, const Tensor<T>& x, BlockCache<T>* cache) {
  BlockCache<T> local;
  BlockCache<T>& c = cache ? *cache : local;
  c.input = x;
  c.h1 = layernorm_forward(x, &blk.norm1, &c.norm1);
  c.q = linear_forward(blk.q, c.h1);
  c.k = linear_forward(blk.k, c.h1);
  c.v = linear_forward(blk.v, c.h1);
  c.attn = attention_forward(c.q, c.k, c.v, cfg.heads, &c.attention);
  c.mid = linear_forward(blk.out, c.attn);
  as_matrix(c.mid) += as_matrix(x);
  c.h2 = layernorm_forward(c.mid, &blk.norm2, &c.norm2);
  c.pre_act = linear_forward(blk.fc1, c.h2);
  c.act = activation_forward(cfg.activation, c.pre_act);
  Tensor<T> y = linear_forward(blk.fc2, c.act);
  as_matrix(y) += as_matrix(c.mid);
  return y;
}

template <typename T>
Tensor<T> block_backward(const EncoderBlock<T>& blk, const ModelConfig& cfg, const BlockCache<T>& c, const Tensor<T>& dy,
                         EncoderBlock<T>& grad) {
  Tensor<T> dact = linear_backward(blk.fc2, c.act, dy, grad.fc2);
  Tensor<T> dpre = activation_backward(cfg.activation, c.pre_act, dact);
  Tensor<T> dh2 = linear_backward(blk.fc1, c.h2, dpre, grad.fc1);
  Tensor<T> dmid = layernorm_backward(c.norm2, &blk.norm2, dh2, &grad.norm2);
  as_matrix(dmid) += as_matrix(dy);
  Tensor<T> dattn = linear_backward(blk.out, c.attn, dmid, grad.out);
  auto ag = attention_backward(c.q, c.k, c.v, cfg.heads, c.attention, dattn);
  Tensor<T> dh1 = linear_backward(blk.q, c.h1, ag.dq, grad.q);
  as_matrix(dh1) += as_matrix(linear_backward(blk.k, c.h1, ag.dk, grad.k));
  as_matrix(dh1) += as_matrix(linear_backward(blk.v, c.h1, ag.dv, grad.v));
  Tensor<T> dx = layernorm_backward(c.norm1, &blk.norm1, dh1, &grad.norm1);
  as_matrix(dx) += as_matrix(dmid);
  return dx;
}

// Encodes the listed patches. Output row 0 is CLS, row 1 + i belongs to
// visible[i]; positions follow each patch's original index, so the listing
// order only permutes rows. `block_outputs`, when given, receives every
// block's output sequence.
template <typename T>
Tensor<T> forward_tokens(const Backbone<T>& b, const Tensor<T>& image, std::span<const int> visible,
                         BackboneCache<T>* cache = nullptr, std::vector<Tensor<T>>* block_outputs = nullptr) {
  check_patch_indices(visible);
  const std::size_t d = b.dim(), n = visible.size() + 1;
  Tensor<T> pixels = extract_patches(image, visible);
  const Eigen::Map<const RowMatrix<T>> w(b.patch_embed.weight.data(), static_cast<Eigen::Index>(d),
                                         static_cast<Eigen::Index>(kPatchPixels));
  Tensor<T> x({n, d});
  auto xm = as_matrix(x);
  xm.bottomRows(static_cast<Eigen::Index>(n - 1)).noalias() = as_matrix(pixels) * w.transpose();
  const auto pos = as_matrix(b.positional);
  for (std::size_t i = 0; i < visible.size(); ++i) {
    xm.row(static_cast<Eigen::Index>(i + 1)) += as_row(b.patch_embed.bias) + pos.row(1 + visible[i]);
  }
  xm.row(0) = as_row(b.cls_token) + pos.row(0);

  if (cache) {
    cache->visible.assign(visible.begin(), visible.end());
    cache->pixels = std::move(pixels);
    cache->blocks.assign(b.blocks.size(), BlockCache<T>());
  }
  if (block_outputs) block_outputs->clear();
  for (std::size_t l = 0; l < b.blocks.size(); ++l) {
    x = block_forward(b.blocks[l], b.config, x, cache ? &cache->blocks[l] : nullptr);
    if (block_outputs) block_outputs->push_back(x);
  }
  return layernorm_forward(x, &b.final_norm, cache ? &cache->final_norm : nullptr);
}

template <typename T>
Tensor<T> forward_tokens(const Backbone<T>& b, const Tensor<T>& image) {
  const auto all = all_patches();
  return forward_tokens(b, image, std::span<const int>(all));
}

// Accumulates parameter gradients for d(loss)/d(tokens).
template <typename T>
void backward_tokens(const Backbone<T>& b, const BackboneCache<T>& cache, const Tensor<T>& dtokens, Backbone<T>& grad) {
  Tensor<T> dx = layernorm_backward(cache.final_norm, &b.final_norm, dtokens, &grad.final_norm);
  for (std::size_t l = b.blocks.size(); l-- > 0;) {
    dx = block_backward(b.blocks[l], b.config, cache.blocks[l], dx, grad.blocks[l]);
  }
  auto dxm = as_matrix(dx);
  as_row(grad.cls_token) += dxm.row(0);
  const auto n = dxm.rows() - 1;
  Eigen::Map<RowMatrix<T>> dw(grad.patch_embed.weight.data(), static_cast<Eigen::Index>(b.dim()),
                              static_cast<Eigen::Index>(kPatchPixels));
  dw.noalias() += dxm.bottomRows(n).transpose() * as_matrix(cache.pixels);
  as_row(grad.patch_embed.bias) += dxm.bottomRows(n).colwise().sum();
}

template <typename T>
Tensor<T> cls_embedding(const Backbone<T>& b, const Tensor<T>& image) {
  Tensor<T> tokens = forward_tokens(b, image);
  Tensor<T> cls({1, b.dim()});
  std::copy(tokens.data(), tokens.data() + b.dim(), cls.data());
  return cls;
}

// ---------------------------------------------------------------- head

template <typename T>
struct HeadCache {
  Tensor<T> input, pre_relu, relu;
  LayerNormCache<T> norm;
  Tensor<T> normed;
};

// Rows of `embeddings` are independent samples.
template <typename T>
Tensor<T> head_forward(const MlpHead<T>& h, const Tensor<T>& embeddings, HeadCache<T>* cache = nullptr) {
  Tensor<T> x = embeddings;
  if (x.rank() == 1) x.reshape({1, x.size()});
  if (x.cols() != h.fc1.in_features()) {
    throw ShapeError("head: embedding length " + std::to_string(x.cols()) + " vs " + std::to_string(h.fc1.in_features()));
  }
  HeadCache<T> local;
  HeadCache<T>& c = cache ? *cache : local;
  c.pre_relu = linear_forward(h.fc1, x);
  c.relu = activation_forward(Activation::relu, c.pre_relu);
  c.normed = layernorm_forward(c.relu, &h.norm, &c.norm);
  c.input = std::move(x);
  return linear_forward(h.fc2, c.normed);
}

template <typename T>
Tensor<T> head_backward(const MlpHead<T>& h, const HeadCache<T>& c, const Tensor<T>& dlogits, MlpHead<T>& grad) {
  Tensor<T> dn = linear_backward(h.fc2, c.normed, dlogits, grad.fc2);
  Tensor<T> dr = layernorm_backward(c.norm, &h.norm, dn, &grad.norm);
  Tensor<T> dz = activation_backward(Activation::relu, c.pre_relu, dr);
  return linear_backward(h.fc1, c.input, dz, grad.fc1);
}

// ---------------------------------------------------------------- decoder

template <typename T>
struct DecoderCache {
  std::vector<int> visible;
  std::vector<bool> is_visible;
  Tensor<T> grid;   // [d x 8 x 8]
  Tensor<T> pre_a;  // conv_a output before ReLU
  Tensor<T> a;
};

// Rebuilds the full 8x8 grid from (CLS + visible) tokens, filling masked
// slots with mask_token + position, and decodes it to a 128x128 map.
template <typename T>
Tensor<T> decode_map(const Backbone<T>& b, const CnnDecoder<T>& dec, const Tensor<T>& tokens, std::span<const int> visible,
                     DecoderCache<T>* cache = nullptr) {
  const std::size_t d = b.dim();
  if (tokens.rank() != 2 || tokens.cols() != d || tokens.rows() != visible.size() + 1) {
    throw ShapeError("decode_map: tokens " + dims_string(tokens.dims()) + " for " + std::to_string(visible.size()) +
                     " visible patches");
  }
  DecoderCache<T> local;
  DecoderCache<T>& c = cache ? *cache : local;
  c.visible.assign(visible.begin(), visible.end());
  c.is_visible.assign(kNumPatches, false);
  c.grid = Tensor<T>({d, kGridSize, kGridSize});
  std::vector<bool> filled(kNumPatches, false);
  for (std::size_t i = 0; i < visible.size(); ++i) {
    const auto p = static_cast<std::size_t>(visible[i]);
    if (p >= kNumPatches || filled[p]) throw InternalError("decode_map: bad visible index");
    filled[p] = c.is_visible[p] = true;
    for (std::size_t ch = 0; ch < d; ++ch) c.grid[ch * kNumPatches + p] = tokens(i + 1, ch);
  }
  for (std::size_t p = 0; p < kNumPatches; ++p) {
    if (filled[p]) continue;
    for (std::size_t ch = 0; ch < d; ++ch) c.grid[ch * kNumPatches + p] = b.mask_token[ch] + b.positional(1 + p, ch);
    filled[p] = true;
  }
  if (std::find(filled.begin(), filled.end(), false) != filled.end()) throw InternalError("decode_map: incomplete grid");

  c.pre_a = conv2d_forward(dec.conv_a, c.grid);
  c.a = activation_forward(Activation::relu, c.pre_a);
  const Tensor<T> y = conv2d_forward(dec.conv_b, c.a);  // [256 x 8 x 8]
  Tensor<T> out({kImageSize, kImageSize});
  for (std::size_t ch = 0; ch < kDecoderChannels; ++ch) {
    const std::size_t py = ch / kPatchSize, px = ch % kPatchSize;
    for (std::size_t p = 0; p < kNumPatches; ++p) {
      out((p / kGridSize) * kPatchSize + py, (p % kGridSize) * kPatchSize + px) = y[ch * kNumPatches + p];
    }
  }
  return out;
}

template <typename T>
Tensor<T> decode_map(const Backbone<T>& b, const CnnDecoder<T>& dec, const Tensor<T>& tokens) {
  const auto all = all_patches();
  return decode_map(b, dec, tokens, std::span<const int>(all));
}

// Returns d(loss)/d(tokens) (row 0, CLS, is always zero) and accumulates
// decoder gradients and, when given, the mask-token gradient.
template <typename T>
Tensor<T> decode_backward(const Backbone<T>& b, const CnnDecoder<T>& dec, const DecoderCache<T>& c, const Tensor<T>& dmap,
                          CnnDecoder<T>& grad, Tensor<T>* dmask_token) {
  const std::size_t d = b.dim();
  Tensor<T> dy({kDecoderChannels, kGridSize, kGridSize});
  for (std::size_t ch = 0; ch < kDecoderChannels; ++ch) {
    const std::size_t py = ch / kPatchSize, px = ch % kPatchSize;
    for (std::size_t p = 0; p < kNumPatches; ++p) {
      dy[ch * kNumPatches + p] = dmap((p / kGridSize) * kPatchSize + py, (p % kGridSize) * kPatchSize + px);
    }
  }
  Tensor<T> da = conv2d_backward(dec.conv_b, c.a, dy, grad.conv_b);
  Tensor<T> dpre = activation_backward(Activation::relu, c.pre_a, da);
  Tensor<T> dgrid = conv2d_backward(dec.conv_a, c.grid, dpre, grad.conv_a);
  Tensor<T> dtokens({c.visible.size() + 1, d});
  for (std::size_t i = 0; i < c.visible.size(); ++i) {
    const auto p = static_cast<std::size_t>(c.visible[i]);
    for (std::size_t ch = 0; ch < d; ++ch) dtokens(i + 1, ch) = dgrid[ch * kNumPatches + p];
  }
  if (dmask_token) {
    for (std::size_t p = 0; p < kNumPatches; ++p) {
      if (c.is_visible[p]) continue;
      for (std::size_t ch = 0; ch < d; ++ch) (*dmask_token)[ch] += dgrid[ch * kNumPatches + p];
    }
  }
  return dtokens;
}

}  // namespace listenkit
