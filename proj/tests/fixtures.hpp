#pragma once

// Small models and random inputs shared by the test binaries.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cookie/encoders.hpp"
#include "cookie/gradcheck.hpp"

namespace fixture {

using namespace cookie;

inline EncoderConfig tiny_config() {
  EncoderConfig c;
  c.image_size = 16;
  c.patch = 8;
  c.visual_dim = 8;
  c.text_dim = 8;
  c.model_dim = 8;
  c.heads = 2;
  c.ffn_dim = 8;
  c.vocab_size = 16;
  c.max_tokens = 6;
  return c;
}

template <class T>
Tensor<T> random_images(std::size_t b, std::size_t size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  Tensor<T> t(Shape{b, size, size, 3});
  for (T& v : t.data()) v = static_cast<T>(u(rng));
  return t;
}

template <class T>
Tensor<T> random_tensor(Shape s, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1, 1);
  Tensor<T> t(std::move(s));
  for (T& v : t.data()) v = static_cast<T>(u(rng));
  return t;
}

/// Gives every zero-initialized parameter a random value so gradient checks
/// exercise all terms.
inline void randomize_all(EncoderParams<double>& p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  p.visit([&](Parameter<double>& prm) {
    for (double& v : prm.value.data()) v += u(rng);
  });
}

/// Pads `caps` into a batch; the captions outlive the call.
inline TokenBatch tokens_of(std::vector<CaptionTokens> caps, std::size_t m) {
  static std::vector<std::vector<CaptionTokens>> keep;
  keep.push_back(std::move(caps));
  std::vector<const CaptionTokens*> ptrs;
  for (const auto& c : keep.back()) ptrs.push_back(&c);
  return pad_captions(ptrs, m);
}

inline bool is_key_bias(const std::string& name) { return name.ends_with(".attn.k.bias"); }

struct GradientReport {
  double max_relative_error = 0.0;  // over every parameter except key biases
  std::string worst_parameter;
  double key_bias_analytic = 0.0;   // largest |analytic gradient| of a key bias
  double key_bias_numeric = 0.0;    // largest |central difference| of a key bias
};

/// Key biases shift every logit of a query row by the same amount, so softmax
/// cancels them and their gradient is zero up to roundoff. Relative error is
/// meaningless there; both sides are reported as magnitudes instead and the
/// relative check covers everything else.
inline GradientReport gradient_report(const std::function<Var<double>(Tape<double>&)>& f,
                                      const std::vector<Parameter<double>*>& params, GradCheckOptions opt = {}) {
  std::vector<Parameter<double>*> regular, key_bias;
  for (auto* p : params) (is_key_bias(p->name) ? key_bias : regular).push_back(p);
  GradientReport r;
  {
    Tape<double> tape;
    auto g = tape.backward(f(tape));
    for (auto* p : key_bias) {
      if (!g.contains(p->name)) continue;
      for (double v : g.at(p->name).data()) r.key_bias_analytic = std::max(r.key_bias_analytic, std::abs(v));
    }
  }
  for (auto* p : key_bias) {
    for (std::size_t c = 0; c < p->value.size(); ++c) {
      const double orig = p->value[c];
      Tape<double> t1(false), t2(false);
      p->value[c] = orig + opt.step;
      const double up = f(t1).value().item();
      p->value[c] = orig - opt.step;
      const double down = f(t2).value().item();
      p->value[c] = orig;
      r.key_bias_numeric = std::max(r.key_bias_numeric, std::abs(up - down) / (2 * opt.step));
    }
  }
  if (!regular.empty()) {
    const auto g = grad_check(f, regular, opt);
    r.max_relative_error = g.max_relative_error;
    r.worst_parameter = g.worst_parameter;
  }
  return r;
}

/// Pass rule for key biases: both gradients vanish.
inline bool key_bias_vanishes(const GradientReport& r) { return r.key_bias_analytic < 1e-12 && r.key_bias_numeric < 1e-8; }

}  // namespace fixture
