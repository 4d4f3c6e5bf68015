#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cookie/autograd.hpp"
#include "cookie/error.hpp"

namespace cookie {

struct GradCheckOptions {
  double step = 1e-5;
  /// Coordinates sampled per parameter; parameters at or below this size are checked exhaustively.
  std::size_t max_coords_per_param = 24;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t coords_checked = 0;
};

namespace detail {

inline void require_finite_tape(const Tape<double>& tape) {
  for (std::size_t i = 0; i < tape.size(); ++i) {
    if (!tape.value(i).all_finite()) {
      throw NumericError(std::string("non-finite value produced by operation '") + tape.op_name(i) + "' (node " +
                         std::to_string(i) + ")");
    }
  }
}

inline double evaluate(const std::function<Var<double>(Tape<double>&)>& f) {
  Tape<double> tape(false);
  Var<double> loss = f(tape);
  require_finite_tape(tape);
  return loss.value().item();
}

}  // namespace detail

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences, perturbing the given parameters in place (and restoring them).
/// Error per coordinate is |a - n| / max(|a|, |n|, 1e-8).
inline GradCheckResult grad_check(const std::function<Var<double>(Tape<double>&)>& f,
                                  const std::vector<Parameter<double>*>& params, const GradCheckOptions& opt = {}) {
  if (opt.step < 1e-7 || opt.step > 1e-3) throw ContractError("grad_check: step must lie in [1e-7, 1e-3]");
  GradientMap<double> analytic;
  {
    Tape<double> tape;
    Var<double> loss = f(tape);
    detail::require_finite_tape(tape);
    analytic = tape.backward(loss);
    analytic.fill_missing(params);
  }
  std::mt19937_64 rng(opt.seed);
  GradCheckResult result;
  for (Parameter<double>* p : params) {
    const std::size_t n = p->value.size();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (n > opt.max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.max_coords_per_param);
    }
    const Tensor<double>& g = analytic.at(p->name);
    for (std::size_t c : coords) {
      const double orig = p->value[c];
      p->value[c] = orig + opt.step;
      const double up = detail::evaluate(f);
      p->value[c] = orig - opt.step;
      const double down = detail::evaluate(f);
      p->value[c] = orig;
      const double numeric = (up - down) / (2.0 * opt.step);
      const double a = g[c];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      ++result.coords_checked;
      if (err > result.max_relative_error) {
        result.max_relative_error = err;
        result.worst_parameter = p->name;
        result.worst_index = c;
      }
    }
  }
  return result;
}

}  // namespace cookie
