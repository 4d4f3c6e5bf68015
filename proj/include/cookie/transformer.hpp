#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "cookie/autograd.hpp"
#include "cookie/ops.hpp"

namespace cookie {

/// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) for a [fan_in, fan_out] matrix.
template <class T>
Tensor<T> uniform_fan_in(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> w(Shape{fan_in, fan_out});
  for (T& v : w.data()) v = static_cast<T>(dist(rng));
  return w;
}

template <class T>
struct Linear {
  Parameter<T> weight;  // [in, out]
  Parameter<T> bias;    // [out]

  static Linear init(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng) {
    return Linear{{name + ".weight", uniform_fan_in<T>(in, out, rng)}, {name + ".bias", Tensor<T>(Shape{out})}};
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x) const {
    return add_broadcast(matmul(x, tape.param(weight)), tape.param(bias));
  }

  template <class F>
  void visit(F&& f) {
    f(weight);
    f(bias);
  }
};

template <class T>
struct LayerNormParams {
  Parameter<T> gamma;
  Parameter<T> beta;

  static LayerNormParams init(const std::string& name, std::size_t dim) {
    return LayerNormParams{{name + ".gamma", Tensor<T>(Shape{dim}, T{1})}, {name + ".beta", Tensor<T>(Shape{dim})}};
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x, T eps) const {
    return layer_norm(x, tape.param(gamma), tape.param(beta), eps);
  }

  template <class F>
  void visit(F&& f) {
    f(gamma);
    f(beta);
  }
};

struct TransformerShape {
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t ffn_dim = 64;
  double ln_eps = 1e-5;
  double dropout = 0.0;
};

/// Per-forward settings that are not parameters.
struct ForwardContext {
  bool training = false;
  std::mt19937_64* rng = nullptr;
};

/// One pre-norm encoder layer: x + MHA(LN(x)), then h + FFN(LN(h)).
template <class T>
struct TransformerLayer {
  TransformerShape shape;
  LayerNormParams<T> ln1;
  Linear<T> q, k, v, o;
  LayerNormParams<T> ln2;
  Linear<T> ff1, ff2;

  static TransformerLayer init(const std::string& name, const TransformerShape& s, std::mt19937_64& rng) {
    TransformerLayer l;
    l.shape = s;
    l.ln1 = LayerNormParams<T>::init(name + ".ln1", s.dim);
    l.q = Linear<T>::init(name + ".attn.q", s.dim, s.dim, rng);
    l.k = Linear<T>::init(name + ".attn.k", s.dim, s.dim, rng);
    l.v = Linear<T>::init(name + ".attn.v", s.dim, s.dim, rng);
    l.o = Linear<T>::init(name + ".attn.o", s.dim, s.dim, rng);
    l.ln2 = LayerNormParams<T>::init(name + ".ln2", s.dim);
    l.ff1 = Linear<T>::init(name + ".ffn.1", s.dim, s.ffn_dim, rng);
    l.ff2 = Linear<T>::init(name + ".ffn.2", s.ffn_dim, s.dim, rng);
    return l;
  }

  template <class F>
  void visit(F&& f) {
    ln1.visit(f);
    q.visit(f);
    k.visit(f);
    v.visit(f);
    o.visit(f);
    ln2.visit(f);
    ff1.visit(f);
    ff2.visit(f);
  }

  /// x is [B, k, D]; mask has B*k entries.
  Var<T> forward(Tape<T>& tape, Var<T> x, const Mask& mask, const ForwardContext& ctx = {}) const {
    const T eps = static_cast<T>(shape.ln_eps);
    Var<T> h = add(x, dropout(tape, attention(tape, ln1(tape, x, eps), mask), ctx));
    Var<T> f = ff2(tape, gelu(ff1(tape, ln2(tape, h, eps))));
    return add(h, dropout(tape, f, ctx));
  }

  Var<T> attention(Tape<T>& tape, Var<T> x, const Mask& mask) const {
    const Shape& s = x.shape();
    if (s.size() != 3 || s[2] != shape.dim) {
      throw DimensionError("transformer layer expects [B,k," + std::to_string(shape.dim) + "], got " + to_string(s));
    }
    const std::size_t B = s[0], len = s[1], H = shape.heads, dh = shape.dim / shape.heads;
    auto split = [&](Var<T> t) { return permute(reshape(t, Shape{B, len, H, dh}), {0, 2, 1, 3}); };
    Var<T> qh = split(q(tape, x));
    Var<T> kh = split(k(tape, x));
    Var<T> vh = split(v(tape, x));
    Var<T> scores = scale(matmul(qh, kh, /*transpose_b=*/true), T(1) / std::sqrt(static_cast<T>(dh)));
    Var<T> weights = masked_softmax(scores, mask);
    Var<T> ctx = reshape(permute(matmul(weights, vh), {0, 2, 1, 3}), Shape{B, len, shape.dim});
    return o(tape, ctx);
  }

  Var<T> dropout(Tape<T>& tape, Var<T> x, const ForwardContext& ctx) const {
    if (!ctx.training || shape.dropout <= 0.0 || ctx.rng == nullptr) return x;
    std::bernoulli_distribution keep(1.0 - shape.dropout);
    const T inv = static_cast<T>(1.0 / (1.0 - shape.dropout));
    Tensor<T> m(x.shape());
    for (T& e : m.data()) e = keep(*ctx.rng) ? inv : T{0};
    return mul(x, tape.constant(std::move(m)));
  }
};

}  // namespace cookie
