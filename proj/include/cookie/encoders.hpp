#pragma once

// Dual-stream encoder: toy backbones, modality projections, the text-aligned
// visual layer, the weight-sharing encoder shared by both paths, and pooling.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "cookie/autograd.hpp"
#include "cookie/error.hpp"
#include "cookie/image.hpp"
#include "cookie/ops.hpp"
#include "cookie/transformer.hpp"

namespace cookie {

enum class Pooling { max, mean };
enum class Modality { visual, textual };

inline std::string to_string(Pooling p) { return p == Pooling::max ? "max" : "mean"; }

inline Pooling parse_pooling(const std::string& s) {
  if (s == "max") return Pooling::max;
  if (s == "mean") return Pooling::mean;
  throw ConfigError("unknown pooling strategy '" + s + "' (expected max or mean)");
}

struct EncoderConfig {
  std::size_t image_size = 32;
  std::size_t patch = 8;
  std::size_t visual_dim = 64;  // backbone output per patch
  std::size_t text_dim = 64;    // backbone output per word
  std::size_t model_dim = 64;   // common subspace
  std::size_t heads = 4;
  std::size_t ffn_dim = 64;
  std::size_t vocab_size = 128;
  std::size_t max_tokens = 20;
  std::size_t tav_layers = 1;
  std::size_t ws_layers = 2;
  std::size_t text_backbone_layers = 1;
  double dropout = 0.0;
  double ln_eps = 1e-5;

  std::size_t patches_per_side() const { return image_size / patch; }
  std::size_t num_patches() const { return patches_per_side() * patches_per_side(); }
  std::size_t patch_features() const { return patch * patch * 3; }

  TransformerShape layer_shape(std::size_t dim) const { return TransformerShape{dim, heads, ffn_dim, ln_eps, dropout}; }

  /// Every inconsistency, one message each; empty when valid.
  std::vector<std::string> problems() const {
    std::vector<std::string> out;
    auto positive = [&](std::size_t v, const char* name) {
      if (v == 0) out.push_back(std::string("encoder.") + name + " must be positive");
    };
    positive(image_size, "image_size");
    positive(patch, "patch");
    positive(visual_dim, "visual_dim");
    positive(text_dim, "text_dim");
    positive(model_dim, "model_dim");
    positive(heads, "heads");
    positive(ffn_dim, "ffn_dim");
    positive(vocab_size, "vocab_size");
    positive(max_tokens, "max_tokens");
    positive(ws_layers, "ws_layers");
    if (patch && image_size % patch != 0) out.push_back("encoder.image_size must be divisible by encoder.patch");
    if (heads && model_dim % heads != 0) out.push_back("encoder.model_dim must be divisible by encoder.heads");
    if (heads && text_dim % heads != 0 && text_backbone_layers > 0) {
      out.push_back("encoder.text_dim must be divisible by encoder.heads");
    }
    if (dropout < 0.0 || dropout >= 1.0) out.push_back("encoder.dropout must lie in [0, 1)");
    if (!(ln_eps > 0.0)) out.push_back("encoder.ln_eps must be positive");
    return out;
  }

  void validate() const {
    const auto p = problems();
    if (p.empty()) return;
    std::string msg = "invalid encoder configuration:";
    for (const auto& s : p) msg += "\n  " + s;
    throw ConfigError(msg);
  }
};

/// All learnable tensors of the dual-stream network. `ws` is the single
/// weight-sharing stack; both encode paths read it.
template <class T>
struct EncoderParams {
  EncoderConfig config;

  // toy visual backbone: patchify + linear
  Linear<T> patch_embed;
  // toy text backbone: embeddings + learned positions + transformer layers
  Parameter<T> token_embed;  // [V, D_T]
  Parameter<T> token_pos;    // [m, D_T]
  std::vector<TransformerLayer<T>> text_layers;

  // visual projection: v W_V + b_V + p_i
  Linear<T> visual_proj;
  Parameter<T> visual_pos;  // [n, D]
  Parameter<T> visual_sem;  // s_V
  // textual projection: t W_T + b_T + s_T
  Linear<T> text_proj;
  Parameter<T> text_sem;  // s_T

  std::vector<TransformerLayer<T>> tav;
  std::vector<TransformerLayer<T>> ws;

  static EncoderParams init(const EncoderConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    EncoderParams p;
    p.config = cfg;
    const std::size_t D = cfg.model_dim;
    p.patch_embed = Linear<T>::init("backbone.visual.patch", cfg.patch_features(), cfg.visual_dim, rng);
    p.token_embed = {"backbone.text.embed", uniform_fan_in<T>(cfg.text_dim, cfg.vocab_size, rng).reshaped(
                                                Shape{cfg.vocab_size, cfg.text_dim})};
    p.token_pos = {"backbone.text.pos", uniform_fan_in<T>(cfg.text_dim, cfg.max_tokens, rng).reshaped(
                                              Shape{cfg.max_tokens, cfg.text_dim})};
    for (std::size_t i = 0; i < cfg.text_backbone_layers; ++i) {
      p.text_layers.push_back(
          TransformerLayer<T>::init("backbone.text.layer" + std::to_string(i), cfg.layer_shape(cfg.text_dim), rng));
    }
    p.visual_proj = Linear<T>::init("proj.visual", cfg.visual_dim, D, rng);
    p.visual_pos = {"proj.visual.pos", Tensor<T>(Shape{cfg.num_patches(), D})};
    p.visual_sem = {"tav.sem", Tensor<T>(Shape{D})};
    p.text_proj = Linear<T>::init("proj.text", cfg.text_dim, D, rng);
    p.text_sem = {"proj.text.sem", Tensor<T>(Shape{D})};
    for (std::size_t i = 0; i < cfg.tav_layers; ++i) {
      p.tav.push_back(TransformerLayer<T>::init("tav.layer" + std::to_string(i), cfg.layer_shape(D), rng));
    }
    for (std::size_t i = 0; i < cfg.ws_layers; ++i) {
      p.ws.push_back(TransformerLayer<T>::init("ws.layer" + std::to_string(i), cfg.layer_shape(D), rng));
    }
    return p;
  }

  template <class F>
  void visit(F&& f) {
    patch_embed.visit(f);
    f(token_embed);
    f(token_pos);
    for (auto& l : text_layers) l.visit(f);
    visual_proj.visit(f);
    f(visual_pos);
    f(visual_sem);
    text_proj.visit(f);
    f(text_sem);
    for (auto& l : tav) l.visit(f);
    for (auto& l : ws) l.visit(f);
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    visit([&](Parameter<T>& p) { out.push_back(&p); });
    return out;
  }

  std::vector<const Parameter<T>*> parameters() const {
    std::vector<const Parameter<T>*> out;
    const_cast<EncoderParams*>(this)->visit([&](Parameter<T>& p) { out.push_back(&p); });
    return out;
  }

  std::set<std::string> ws_parameter_names() const {
    std::set<std::string> names;
    for (const auto& l : ws) const_cast<TransformerLayer<T>&>(l).visit([&](Parameter<T>& p) { names.insert(p.name); });
    return names;
  }

  Parameter<T>* find(const std::string& name) {
    Parameter<T>* hit = nullptr;
    visit([&](Parameter<T>& p) {
      if (p.name == name) hit = &p;
    });
    return hit;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : parameters()) n += p->value.size();
    return n;
  }

  template <class U>
  EncoderParams<U> cast() const {
    EncoderParams<U> out = EncoderParams<U>::init(config, 0);
    auto src = parameters();
    auto dst = out.parameters();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value.template cast<U>();
    return out;
  }
};

// ---------------------------------------------------------------------------
// Toy backbones

/// [B, H, W, 3] -> [B, n, patch*patch*3], patches in row-major order, each
/// flattened as (row, column, channel).
template <class T>
Tensor<T> patchify(const Tensor<T>& images, std::size_t patch) {
  const Shape& s = images.shape();
  if (s.size() != 4 || s[3] != 3) throw DimensionError("patchify expects [B,H,W,3], got " + to_string(s));
  const std::size_t B = s[0], H = s[1], W = s[2];
  if (patch == 0 || H % patch != 0 || W % patch != 0) {
    throw ConfigError("image size " + std::to_string(H) + "x" + std::to_string(W) + " not divisible by patch " +
                      std::to_string(patch));
  }
  const std::size_t py = H / patch, px = W / patch, feat = patch * patch * 3;
  Tensor<T> out(Shape{B, py * px, feat});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t gy = 0; gy < py; ++gy) {
      for (std::size_t gx = 0; gx < px; ++gx) {
        T* dst = out.ptr() + ((b * py * px) + gy * px + gx) * feat;
        for (std::size_t y = 0; y < patch; ++y) {
          const T* src = images.ptr() + ((b * H + gy * patch + y) * W + gx * patch) * 3;
          std::copy_n(src, patch * 3, dst + y * patch * 3);
        }
      }
    }
  }
  return out;
}

/// Patch features v: [B, n, D_V].
template <class T>
Var<T> toy_visual_backbone(Tape<T>& tape, const EncoderParams<T>& params, const Tensor<T>& images) {
  const EncoderConfig& c = params.config;
  if (images.rank() != 4 || images.dim(1) != c.image_size || images.dim(2) != c.image_size) {
    throw DimensionError("visual backbone expects [B," + std::to_string(c.image_size) + "," +
                         std::to_string(c.image_size) + ",3], got " + to_string(images.shape()));
  }
  Var<T> patches = tape.constant(patchify(images, c.patch));
  return params.patch_embed(tape, patches);
}

/// Word features t: [B, m, D_T]; padding positions are produced but masked.
template <class T>
Var<T> toy_text_backbone(Tape<T>& tape, const EncoderParams<T>& params, const TokenBatch& tokens,
                         const ForwardContext& ctx = {}) {
  const EncoderConfig& c = params.config;
  if (tokens.max_tokens != c.max_tokens) {
    throw DimensionError("token batch padded to " + std::to_string(tokens.max_tokens) + ", encoder expects " +
                         std::to_string(c.max_tokens));
  }
  Var<T> x = embedding(tape.param(params.token_embed), tokens.ids, Shape{tokens.batch, tokens.max_tokens});
  x = add_broadcast(x, tape.param(params.token_pos));
  for (const auto& layer : params.text_layers) x = layer.forward(tape, x, tokens.mask, ctx);
  return x;
}

// ---------------------------------------------------------------------------
// Projections and transformer stages

/// Row i: v_i W_V + b_V + p_i.
template <class T>
Var<T> project_visual(Tape<T>& tape, const EncoderParams<T>& params, Var<T> v) {
  if (v.shape().size() != 3 || v.dim(1) != params.config.num_patches() || v.dim(2) != params.config.visual_dim) {
    throw DimensionError("project_visual expects [B," + std::to_string(params.config.num_patches()) + "," +
                         std::to_string(params.config.visual_dim) + "], got " + to_string(v.shape()));
  }
  return add_broadcast(params.visual_proj(tape, v), tape.param(params.visual_pos));
}

/// Row i: t_i W_T + b_T + s_T.
template <class T>
Var<T> project_textual(Tape<T>& tape, const EncoderParams<T>& params, Var<T> t) {
  if (t.shape().size() != 3 || t.dim(2) != params.config.text_dim) {
    throw DimensionError("project_textual expects [B,m," + std::to_string(params.config.text_dim) + "], got " +
                         to_string(t.shape()));
  }
  return add_broadcast(params.text_proj(tape, t), tape.param(params.text_sem));
}

/// F_V = TE_TAV(v_hat) + s_V; every patch is a real token.
template <class T>
Var<T> tav_encode(Tape<T>& tape, const EncoderParams<T>& params, Var<T> v_hat, const ForwardContext& ctx = {}) {
  const Mask all(v_hat.dim(0) * v_hat.dim(1), 1);
  Var<T> x = v_hat;
  for (const auto& layer : params.tav) x = layer.forward(tape, x, all, ctx);
  return add_broadcast(x, tape.param(params.visual_sem));
}

namespace detail {

/// Per-sequence row order: unmasked rows first, then lexicographic by value.
template <class T>
std::vector<std::size_t> canonical_row_order(const Tensor<T>& x, const Mask& mask) {
  const std::size_t B = x.dim(0), k = x.dim(1), D = x.dim(2);
  std::vector<std::size_t> order(B * k);
  for (std::size_t b = 0; b < B; ++b) {
    auto first = order.begin() + static_cast<std::ptrdiff_t>(b * k);
    std::iota(first, first + static_cast<std::ptrdiff_t>(k), std::size_t{0});
    const T* base = x.ptr() + b * k * D;
    const std::uint8_t* m = mask.data() + b * k;
    std::stable_sort(first, first + static_cast<std::ptrdiff_t>(k), [&](std::size_t i, std::size_t j) {
      if (m[i] != m[j]) return m[i] > m[j];
      return std::lexicographical_compare(base + i * D, base + (i + 1) * D, base + j * D, base + (j + 1) * D);
    });
  }
  return order;
}

}  // namespace detail

/// Weight-sharing encoder over [B, k, D] tokens of either modality. Rows are
/// processed in a canonical order and restored afterwards, so reductions over
/// keys are independent of input order and a row permutation of the input
/// permutes the output bit for bit.
template <class T>
Var<T> ws_encode(Tape<T>& tape, const std::vector<TransformerLayer<T>>& ws, Var<T> tokens, const Mask& mask,
                 const ForwardContext& ctx = {}) {
  if (tokens.shape().size() != 3) throw DimensionError("ws_encode expects [B,k,D], got " + to_string(tokens.shape()));
  const std::size_t B = tokens.dim(0), k = tokens.dim(1);
  if (mask.size() != B * k) throw DimensionError("ws_encode: mask length does not match tokens");
  for (std::size_t b = 0; b < B; ++b) {
    if (std::none_of(mask.begin() + b * k, mask.begin() + (b + 1) * k, [](std::uint8_t m) { return m != 0; })) {
      throw ContractError("ws_encode: sequence " + std::to_string(b) + " is entirely masked");
    }
  }
  std::vector<std::size_t> order = detail::canonical_row_order(tokens.value(), mask);
  std::vector<std::size_t> inverse(order.size());
  Mask sorted_mask(mask.size());
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < k; ++i) {
      inverse[b * k + order[b * k + i]] = i;
      sorted_mask[b * k + i] = mask[b * k + order[b * k + i]];
    }
  }
  Var<T> x = gather_rows(tokens, std::move(order));
  for (const auto& layer : ws) x = layer.forward(tape, x, sorted_mask, ctx);
  return gather_rows(x, std::move(inverse));
}

template <class T>
Var<T> pool(Var<T> tokens, const Mask& mask, Pooling strategy) {
  return strategy == Pooling::max ? max_pool(tokens, mask) : mean_pool(tokens, mask);
}

// ---------------------------------------------------------------------------
// Full pipelines

template <class T>
struct EncodedTokens {
  Var<T> tokens;  // WS-TE output [B, k, D]
  Mask mask;
  Var<T> pooled;  // [B, D]
};

template <class T>
EncodedTokens<T> encode_image_tokens(Tape<T>& tape, const EncoderParams<T>& params, const Tensor<T>& images,
                                     Pooling pooling, const ForwardContext& ctx = {}) {
  Var<T> v = toy_visual_backbone(tape, params, images);
  Var<T> f = tav_encode(tape, params, project_visual(tape, params, v), ctx);
  Mask mask(f.dim(0) * f.dim(1), 1);
  Var<T> out = ws_encode(tape, params.ws, f, mask, ctx);
  Var<T> pooled = pool(out, mask, pooling);
  return {out, std::move(mask), pooled};
}

template <class T>
EncodedTokens<T> encode_text_tokens(Tape<T>& tape, const EncoderParams<T>& params, const TokenBatch& tokens,
                                    Pooling pooling, const ForwardContext& ctx = {}) {
  Var<T> t = toy_text_backbone(tape, params, tokens, ctx);
  Var<T> f = project_textual(tape, params, t);
  Var<T> out = ws_encode(tape, params.ws, f, tokens.mask, ctx);
  Var<T> pooled = pool(out, tokens.mask, pooling);
  return {out, tokens.mask, pooled};
}

/// E_V over a [B, H, W, 3] batch: [B, D] embeddings.
template <class T>
Var<T> encode_images(Tape<T>& tape, const EncoderParams<T>& params, const Tensor<T>& images, Pooling pooling,
                     const ForwardContext& ctx = {}) {
  return encode_image_tokens(tape, params, images, pooling, ctx).pooled;
}

/// E_T over a padded token batch: [B, D] embeddings.
template <class T>
Var<T> encode_texts(Tape<T>& tape, const EncoderParams<T>& params, const TokenBatch& tokens, Pooling pooling,
                    const ForwardContext& ctx = {}) {
  return encode_text_tokens(tape, params, tokens, pooling, ctx).pooled;
}

template <class T>
struct Embedding {
  Tensor<T> vec;  // [D]
  Modality modality;
};

template <class T>
Embedding<T> encode_image(const EncoderParams<T>& params, const SceneImage& image, Pooling pooling = Pooling::max) {
  Tape<T> tape(false);
  Var<T> e = encode_images(tape, params, stack_images<T>({&image}), pooling);
  return {e.value().reshaped(Shape{params.config.model_dim}), Modality::visual};
}

template <class T>
Embedding<T> encode_text(const EncoderParams<T>& params, const CaptionTokens& tokens, Pooling pooling = Pooling::max) {
  Tape<T> tape(false);
  Var<T> e = encode_texts(tape, params, pad_captions({&tokens}, params.config.max_tokens), pooling);
  return {e.value().reshaped(Shape{params.config.model_dim}), Modality::textual};
}

}  // namespace cookie
