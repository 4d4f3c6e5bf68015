#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cookie/autograd.hpp"
#include "cookie/error.hpp"
#include "cookie/tensor.hpp"

namespace cookie {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

/// First and second moments keyed by parameter name, plus the step counter.
template <class T>
struct OptimState {
  AdamWConfig hp;
  std::uint64_t step = 0;
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;

  void reset() {
    step = 0;
    m.clear();
    v.clear();
  }
};

/// Decoupled-weight-decay Adam. Parameters missing from `grads` are treated
/// as having zero gradient. Nothing is modified if any gradient is non-finite.
template <class T>
void adamw_step(const std::vector<Parameter<T>*>& params, const GradientMap<T>& grads, OptimState<T>& st, double lr) {
  for (const auto* p : params) {
    if (grads.contains(p->name) && !grads.at(p->name).all_finite()) {
      throw TrainingError("non-finite gradient for parameter '" + p->name + "'");
    }
  }
  ++st.step;
  const double b1 = st.hp.beta1, b2 = st.hp.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  for (auto* p : params) {
    auto [mit, m_new] = st.m.try_emplace(p->name, p->value.shape());
    auto [vit, v_new] = st.v.try_emplace(p->name, p->value.shape());
    Tensor<T>& m = mit->second;
    Tensor<T>& v = vit->second;
    if (m.shape() != p->value.shape() || v.shape() != p->value.shape()) {
      throw TrainingError("optimizer state for '" + p->name + "' has shape " + to_string(m.shape()) + ", parameter has " +
                          to_string(p->value.shape()));
    }
    const bool has_grad = grads.contains(p->name);
    const T* g = has_grad ? grads.at(p->name).ptr() : nullptr;
    T* w = p->value.ptr();
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double gi = g ? static_cast<double>(g[i]) : 0.0;
      const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
      const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = (mi / c1) / (std::sqrt(vi / c2) + st.hp.eps) + st.hp.weight_decay * static_cast<double>(w[i]);
      w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * update);
    }
  }
}

/// Scales every gradient so the global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <class T>
double clip_global_norm(GradientMap<T>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) {
    for (T x : g.data()) sq += static_cast<double>(x) * static_cast<double>(x);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& [name, g] : grads) {
      for (T& x : g.data()) x *= s;
    }
  }
  return norm;
}

/// Linear warm-up from zero over the first warmup_fraction of the stage,
/// constant afterwards, divided by 10 from the halfway step on.
inline double lr_schedule(std::uint64_t step, std::uint64_t total_steps, double base_lr, double warmup_fraction) {
  if (total_steps == 0) throw ContractError("lr_schedule: total_steps must be positive");
  if (warmup_fraction < 0.0 || warmup_fraction >= 1.0) throw ContractError("lr_schedule: warm-up fraction must lie in [0, 1)");
  const double warmup = warmup_fraction * static_cast<double>(total_steps);
  double lr = base_lr;
  if (static_cast<double>(step) < warmup) lr = base_lr * static_cast<double>(step) / warmup;
  if (2 * step >= total_steps) lr /= 10.0;
  return lr;
}

}  // namespace cookie
