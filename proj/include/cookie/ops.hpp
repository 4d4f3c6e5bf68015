#pragma once

// Differentiable operations recorded on a Tape.
//
// Broadcasting is restricted to leading batch dimensions: a right-hand
// operand may omit leading axes (bias vectors, shared weight matrices,
// position tables) but trailing axes must match exactly.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "cookie/autograd.hpp"
#include "cookie/error.hpp"
#include "cookie/tensor.hpp"

namespace cookie {

/// Per-position validity flags; 1 marks a real token, 0 marks padding.
using Mask = std::vector<std::uint8_t>;

namespace detail {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

inline std::size_t normalize_axis(int axis, std::size_t rank, const Shape& shape) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " invalid for shape " + to_string(shape));
  }
  return static_cast<std::size_t>(a);
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw DimensionError(std::string(op) + ": shapes " + to_string(a) + " and " + to_string(b) + " differ");
}

/// True when `suffix` equals the trailing axes of `full`.
inline bool is_suffix(const Shape& full, const Shape& suffix) {
  if (suffix.size() > full.size()) return false;
  return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

template <class T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  T* d = dst.ptr();
  const T* s = src.ptr();
  const std::size_t n = dst.size();
  for (std::size_t i = 0; i < n; ++i) d[i] += s[i];
}

template <class T>
Tensor<T> map_values(const Tensor<T>& x, auto fn) {
  Tensor<T> y(x.shape());
  const T* in = x.ptr();
  T* out = y.ptr();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fn(in[i]);
  return y;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> y = a.value();
  detail::add_into(y, b.value());
  const std::size_t ia = a.index, ib = b.index;
  return a.tape->record(std::move(y), {a, b}, "add", [ia, ib](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gy = t.grad(self);
    if (t.requires_grad(ia)) detail::add_into(t.grad(ia), gy);
    if (t.requires_grad(ib)) detail::add_into(t.grad(ib), gy);
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> y = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  const std::size_t ia = a.index, ib = b.index;
  return a.tape->record(std::move(y), {a, b}, "sub", [ia, ib](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gy = t.grad(self);
    if (t.requires_grad(ia)) detail::add_into(t.grad(ia), gy);
    if (t.requires_grad(ib)) {
      Tensor<T>& gb = t.grad(ib);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= gy[i];
    }
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> y = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  const std::size_t ia = a.index, ib = b.index;
  return a.tape->record(std::move(y), {a, b}, "mul", [ia, ib](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gy = t.grad(self);
    const Tensor<T>& av = t.value(ia);
    const Tensor<T>& bv = t.value(ib);
    if (t.requires_grad(ia)) {
      Tensor<T>& ga = t.grad(ia);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      Tensor<T>& gb = t.grad(ib);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * av[i];
    }
  });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> y = detail::map_values(a.value(), [s](T v) { return v * s; });
  const std::size_t ia = a.index;
  return a.tape->record(std::move(y), {a}, "scale", [ia, s](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gy = t.grad(self);
    Tensor<T>& ga = t.grad(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * s;
  });
}

template <class T>
Var<T> add_scalar(Var<T> a, T s) {
  Tensor<T> y = detail::map_values(a.value(), [s](T v) { return v + s; });
  const std::size_t ia = a.index;
  return a.tape->record(std::move(y), {a}, "add_scalar", [ia](Tape<T>& t, std::size_t self) {
    detail::add_into(t.grad(ia), t.grad(self));
  });
}

/// a + b where b's shape is a suffix of a's (bias rows, position tables).
template <class T>
Var<T> add_broadcast(Var<T> a, Var<T> b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (!detail::is_suffix(sa, sb)) {
    throw DimensionError("add_broadcast: " + to_string(sb) + " is not a trailing suffix of " + to_string(sa));
  }
  const std::size_t inner = b.value().size();
  const std::size_t outer = a.value().size() / inner;
  Tensor<T> y = a.value();
  const T* bv = b.value().ptr();
  for (std::size_t o = 0; o < outer; ++o) {
    T* row = y.ptr() + o * inner;
    for (std::size_t i = 0; i < inner; ++i) row[i] += bv[i];
  }
  const std::size_t ia = a.index, ib = b.index;
  return a.tape->record(std::move(y), {a, b}, "add_broadcast", [ia, ib, inner, outer](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gy = t.grad(self);
    if (t.requires_grad(ia)) detail::add_into(t.grad(ia), gy);
    if (t.requires_grad(ib)) {
      T* gb = t.grad(ib).ptr();
      for (std::size_t o = 0; o < outer; ++o) {
        const T* row = gy.ptr() + o * inner;
        for (std::size_t i = 0; i < inner; ++i) gb[i] += row[i];
      }
    }
  });
}

template <class T>
Var<T> relu(Var<T> a) {
  Tensor<T> y = detail::map_values(a.value(), [](T v) { return v > T{0} ? v : T{0}; });
  const std::size_t ia = a.index;
  return a.tape->record(std::move(y), {a}, "relu", [ia](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gy = t.grad(self);
    const Tensor<T>& x = t.value(ia);
    Tensor<T>& ga = t.grad(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      if (x[i] > T{0}) ga[i] += gy[i];
    }
  });
}

/// Exact (erf) GELU.
template <class T>
Var<T> gelu(Var<T> a) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  Tensor<T> y = detail::map_values(a.value(), [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); });
  const std::size_t ia = a.index;
  return a.tape->record(std::move(y), {a}, "gelu", [ia](Tape<T>& t, std::size_t self) {
    constexpr T inv_sqrt2pi = T(0.39894228040143267794);
    const Tensor<T>& gy = t.grad(self);
    const Tensor<T>& x = t.value(ia);
    Tensor<T>& ga = t.grad(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const T v = x[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      ga[i] += gy[i] * (cdf + v * pdf);
    }
  });
}

template <class T>
Var<T> exp(Var<T> a) {
  Tensor<T> y = detail::map_values(a.value(), [](T v) { return std::exp(v); });
  const std::size_t ia = a.index;
  return a.tape->record(std::move(y), {a}, "exp", [ia](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gy = t.grad(self);
    const Tensor<T>& y = t.value(self);
    Tensor<T>& ga = t.grad(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * y[i];
  });
}

template <class T>
Var<T> log(Var<T> a) {
  Tensor<T> y = detail::map_values(a.value(), [](T v) { return std::log(v); });
  const std::size_t ia = a.index;
  return a.tape->record(std::move(y), {a}, "log", [ia](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gy = t.grad(self);
    const Tensor<T>& x = t.value(ia);
    Tensor<T>& ga = t.grad(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] / x[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Var<T> sum(Var<T> a) {
  T s{0};
  for (T v : a.value().data()) s += v;
  const std::size_t ia = a.index;
  return a.tape->record(Tensor<T>::scalar(s), {a}, "sum", [ia](Tape<T>& t, std::size_t self) {
    const T g = t.grad(self)[0];
    Tensor<T>& ga = t.grad(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
}

template <class T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> y = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.index;
  return a.tape->record(std::move(y), {a}, "reshape", [ia](Tape<T>& t, std::size_t self) {
    detail::add_into(t.grad(ia), t.grad(self));
  });
}

/// General axis permutation: output axis i is input axis `axes[i]`.
template <class T>
Var<T> permute(Var<T> a, std::vector<std::size_t> axes) {
  const Shape& in = a.shape();
  const std::size_t r = in.size();
  if (axes.size() != r) throw DimensionError("permute: axes length does not match rank of " + to_string(in));
  std::vector<bool> seen(r, false);
  for (std::size_t ax : axes) {
    if (ax >= r || seen[ax]) throw DimensionError("permute: invalid axis list for shape " + to_string(in));
    seen[ax] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in[axes[i]];
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * in[i + 1];
  // source offset for every destination element, in destination order
  std::vector<std::size_t> src(a.value().size());
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t flat = 0; flat < src.size(); ++flat) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_strides[axes[i]];
    src[flat] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  Tensor<T> y(out_shape);
  const T* x = a.value().ptr();
  for (std::size_t i = 0; i < src.size(); ++i) y[i] = x[src[i]];
  const std::size_t ia = a.index;
  return a.tape->record(std::move(y), {a}, "permute", [ia, src = std::move(src)](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gy = t.grad(self);
    Tensor<T>& ga = t.grad(ia);
    for (std::size_t i = 0; i < src.size(); ++i) ga[src[i]] += gy[i];
  });
}

template <class T>
Var<T> transpose(Var<T> a) {
  const std::size_t r = a.shape().size();
  if (r < 2) throw DimensionError("transpose needs rank >= 2, got " + to_string(a.shape()));
  std::vector<std::size_t> axes(r);
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[r - 1], axes[r - 2]);
  return permute(a, std::move(axes));
}

/// Reorders rows within each sequence: x is [B, k, D] and out[b, i] = x[b, order[b*k + i]].
template <class T>
Var<T> gather_rows(Var<T> x, std::vector<std::size_t> order) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw DimensionError("gather_rows expects [B,k,D], got " + to_string(s));
  const std::size_t B = s[0], k = s[1], D = s[2];
  if (order.size() != B * k) throw DimensionError("gather_rows: order length mismatch");
  for (std::size_t v : order) {
    if (v >= k) throw DimensionError("gather_rows: row index out of range");
  }
  Tensor<T> y(s);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < k; ++i) {
      const T* src = x.value().ptr() + (b * k + order[b * k + i]) * D;
      std::copy(src, src + D, y.ptr() + (b * k + i) * D);
    }
  }
  const std::size_t ix = x.index;
  return x.tape->record(std::move(y), {x}, "gather_rows", [ix, order = std::move(order), B, k, D](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gy = t.grad(self);
    Tensor<T>& gx = t.grad(ix);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t i = 0; i < k; ++i) {
        T* dst = gx.ptr() + (b * k + order[b * k + i]) * D;
        const T* src = gy.ptr() + (b * k + i) * D;
        for (std::size_t d = 0; d < D; ++d) dst[d] += src[d];
      }
    }
  });
}

/// Row lookup into a [V, D] table; result shape is `out_leading` + [D].
template <class T>
Var<T> embedding(Var<T> table, const std::vector<std::int32_t>& ids, Shape out_leading) {
  const Shape& s = table.shape();
  if (s.size() != 2) throw DimensionError("embedding table must be [V,D], got " + to_string(s));
  const std::size_t V = s[0], D = s[1];
  if (numel(out_leading) != ids.size()) throw DimensionError("embedding: id count does not match output shape");
  for (std::int32_t id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= V) {
      throw DataError("token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(V));
    }
  }
  Shape out = out_leading;
  out.push_back(D);
  Tensor<T> y(out);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const T* src = table.value().ptr() + static_cast<std::size_t>(ids[i]) * D;
    std::copy(src, src + D, y.ptr() + i * D);
  }
  const std::size_t it = table.index;
  return table.tape->record(std::move(y), {table}, "embedding", [it, ids, D](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gy = t.grad(self);
    Tensor<T>& gt = t.grad(it);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      T* dst = gt.ptr() + static_cast<std::size_t>(ids[i]) * D;
      const T* src = gy.ptr() + i * D;
      for (std::size_t d = 0; d < D; ++d) dst[d] += src[d];
    }
  });
}

/// Concatenates [B, k1, D] and [B, k2, D] along the sequence axis.
template <class T>
Var<T> concat_rows(Var<T> a, Var<T> b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[2]) {
    throw DimensionError("concat_rows: incompatible shapes " + to_string(sa) + " and " + to_string(sb));
  }
  const std::size_t B = sa[0], ka = sa[1], kb = sb[1], D = sa[2];
  Tensor<T> y(Shape{B, ka + kb, D});
  for (std::size_t n = 0; n < B; ++n) {
    std::copy_n(a.value().ptr() + n * ka * D, ka * D, y.ptr() + n * (ka + kb) * D);
    std::copy_n(b.value().ptr() + n * kb * D, kb * D, y.ptr() + (n * (ka + kb) + ka) * D);
  }
  const std::size_t ia = a.index, ib = b.index;
  return a.tape->record(std::move(y), {a, b}, "concat_rows", [=](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gy = t.grad(self);
    for (std::size_t n = 0; n < B; ++n) {
      if (t.requires_grad(ia)) {
        T* ga = t.grad(ia).ptr() + n * ka * D;
        const T* src = gy.ptr() + n * (ka + kb) * D;
        for (std::size_t i = 0; i < ka * D; ++i) ga[i] += src[i];
      }
      if (t.requires_grad(ib)) {
        T* gb = t.grad(ib).ptr() + n * kb * D;
        const T* src = gy.ptr() + (n * (ka + kb) + ka) * D;
        for (std::size_t i = 0; i < kb * D; ++i) gb[i] += src[i];
      }
    }
  });
}

/// out[i] = x[rows[i], cols[i]] for a rank-2 x.
template <class T>
Var<T> gather_elements(Var<T> x, std::vector<std::size_t> rows, std::vector<std::size_t> cols) {
  const Shape& s = x.shape();
  if (s.size() != 2) throw DimensionError("gather_elements expects a matrix, got " + to_string(s));
  if (rows.size() != cols.size() || rows.empty()) throw DimensionError("gather_elements: index lists differ in length");
  const std::size_t C = s[1];
  Tensor<T> y(Shape{rows.size()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= s[0] || cols[i] >= C) throw DimensionError("gather_elements: index out of range");
    y[i] = x.value()[rows[i] * C + cols[i]];
  }
  const std::size_t ix = x.index;
  return x.tape->record(std::move(y), {x}, "gather_elements",
                        [ix, rows = std::move(rows), cols = std::move(cols), C](Tape<T>& t, std::size_t self) {
                          const Tensor<T>& gy = t.grad(self);
                          Tensor<T>& gx = t.grad(ix);
                          for (std::size_t i = 0; i < rows.size(); ++i) gx[rows[i] * C + cols[i]] += gy[i];
                        });
}

template <class T>
Var<T> diagonal(Var<T> x) {
  const Shape& s = x.shape();
  if (s.size() != 2 || s[0] != s[1]) throw DimensionError("diagonal expects a square matrix, got " + to_string(s));
  std::vector<std::size_t> idx(s[0]);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return gather_elements(x, idx, idx);
}

// ---------------------------------------------------------------------------
// Linear algebra

/// Batched matrix product a[..., M, K] x b[..., K, N]. `b` may be rank 2, in
/// which case it is shared across a's batch. With transpose_b, b is [..., N, K].
template <class T>
Var<T> matmul(Var<T> a, Var<T> b, bool transpose_b = false) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto fail = [&] {
    throw DimensionError("matmul: incompatible shapes " + to_string(sa) + " and " + to_string(sb) +
                         (transpose_b ? " (b transposed)" : ""));
  };
  if (sa.size() < 2 || sb.size() < 2) fail();
  const std::size_t M = sa[sa.size() - 2], K = sa.back();
  const std::size_t bk = transpose_b ? sb.back() : sb[sb.size() - 2];
  const std::size_t N = transpose_b ? sb[sb.size() - 2] : sb.back();
  if (bk != K) fail();
  const bool shared_b = sb.size() == 2;
  if (!shared_b && (sb.size() != sa.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin()))) fail();
  const std::size_t batch = a.value().size() / (M * K);

  using detail::ConstMatMap;
  using detail::MatMap;
  Shape out_shape(sa.begin(), sa.end() - 2);
  out_shape.push_back(M);
  out_shape.push_back(N);
  Tensor<T> y(out_shape);
  if (shared_b) {
    ConstMatMap<T> A(a.value().ptr(), static_cast<Eigen::Index>(batch * M), static_cast<Eigen::Index>(K));
    MatMap<T> Y(y.ptr(), static_cast<Eigen::Index>(batch * M), static_cast<Eigen::Index>(N));
    if (transpose_b) {
      ConstMatMap<T> Bm(b.value().ptr(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(K));
      Y.noalias() = A * Bm.transpose();
    } else {
      ConstMatMap<T> Bm(b.value().ptr(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(N));
      Y.noalias() = A * Bm;
    }
  } else {
    for (std::size_t n = 0; n < batch; ++n) {
      ConstMatMap<T> A(a.value().ptr() + n * M * K, static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(K));
      MatMap<T> Y(y.ptr() + n * M * N, static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(N));
      if (transpose_b) {
        ConstMatMap<T> Bm(b.value().ptr() + n * N * K, static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(K));
        Y.noalias() = A * Bm.transpose();
      } else {
        ConstMatMap<T> Bm(b.value().ptr() + n * K * N, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(N));
        Y.noalias() = A * Bm;
      }
    }
  }

  const std::size_t ia = a.index, ib = b.index;
  return a.tape->record(std::move(y), {a, b}, "matmul", [=](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gy = t.grad(self);
    const Tensor<T>& av = t.value(ia);
    const Tensor<T>& bv = t.value(ib);
    const bool need_a = t.requires_grad(ia);
    const bool need_b = t.requires_grad(ib);
    const auto EM = static_cast<Eigen::Index>(M), EK = static_cast<Eigen::Index>(K), EN = static_cast<Eigen::Index>(N);
    const std::size_t rows = shared_b ? batch : 1;
    const std::size_t loops = shared_b ? 1 : batch;
    for (std::size_t n = 0; n < loops; ++n) {
      const auto ER = static_cast<Eigen::Index>(rows) * EM;
      ConstMatMap<T> G(gy.ptr() + n * M * N, ER, EN);
      ConstMatMap<T> A(av.ptr() + n * M * K, ER, EK);
      const T* bp = bv.ptr() + (shared_b ? 0 : n * K * N);
      if (transpose_b) {
        ConstMatMap<T> Bm(bp, EN, EK);
        if (need_a) {
          MatMap<T> GA(t.grad(ia).ptr() + n * M * K, ER, EK);
          GA.noalias() += G * Bm;
        }
        if (need_b) {
          MatMap<T> GB(t.grad(ib).ptr() + (shared_b ? 0 : n * K * N), EN, EK);
          GB.noalias() += G.transpose() * A;
        }
      } else {
        ConstMatMap<T> Bm(bp, EK, EN);
        if (need_a) {
          MatMap<T> GA(t.grad(ia).ptr() + n * M * K, ER, EK);
          GA.noalias() += G * Bm.transpose();
        }
        if (need_b) {
          MatMap<T> GB(t.grad(ib).ptr() + (shared_b ? 0 : n * K * N), EK, EN);
          GB.noalias() += A.transpose() * G;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization

/// Max-subtracted softmax along `axis`.
template <class T>
Var<T> softmax(Var<T> x, int axis) {
  const Shape& s = x.shape();
  const std::size_t ax = detail::normalize_axis(axis, s.size(), s);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[ax];
  Tensor<T> y(s);
  const T* in = x.value().ptr();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) {
      const std::size_t base = o * n * inner + j;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, in[base + i * inner]);
      T z{0};
      for (std::size_t i = 0; i < n; ++i) {
        const T e = std::exp(in[base + i * inner] - mx);
        y[base + i * inner] = e;
        z += e;
      }
      for (std::size_t i = 0; i < n; ++i) y[base + i * inner] /= z;
    }
  }
  const std::size_t ix = x.index;
  return x.tape->record(std::move(y), {x}, "softmax", [ix, outer, inner, n](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gy = t.grad(self);
    const Tensor<T>& yv = t.value(self);
    Tensor<T>& gx = t.grad(ix);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t j = 0; j < inner; ++j) {
        const std::size_t base = o * n * inner + j;
        T dot{0};
        for (std::size_t i = 0; i < n; ++i) dot += gy[base + i * inner] * yv[base + i * inner];
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t p = base + i * inner;
          gx[p] += yv[p] * (gy[p] - dot);
        }
      }
    }
  });
}

/// Log-softmax along the last axis.
template <class T>
Var<T> log_softmax(Var<T> x) {
  const Shape& s = x.shape();
  const std::size_t n = s.back();
  const std::size_t rows = x.value().size() / n;
  Tensor<T> y(s);
  const T* in = x.value().ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = in + r * n;
    const T mx = *std::max_element(row, row + n);
    T z{0};
    for (std::size_t i = 0; i < n; ++i) z += std::exp(row[i] - mx);
    const T lse = mx + std::log(z);
    for (std::size_t i = 0; i < n; ++i) y[r * n + i] = row[i] - lse;
  }
  const std::size_t ix = x.index;
  return x.tape->record(std::move(y), {x}, "log_softmax", [ix, rows, n](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gy = t.grad(self);
    const Tensor<T>& yv = t.value(self);
    Tensor<T>& gx = t.grad(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      T gs{0};
      for (std::size_t i = 0; i < n; ++i) gs += gy[r * n + i];
      for (std::size_t i = 0; i < n; ++i) gx[r * n + i] += gy[r * n + i] - std::exp(yv[r * n + i]) * gs;
    }
  });
}

/// Attention-weight softmax over scores[B, H, Q, K]. Only keys with
/// key_mask[b*K + j] set take part; rows whose query is padding are all zero.
template <class T>
Var<T> masked_softmax(Var<T> scores, const Mask& mask) {
  const Shape& s = scores.shape();
  if (s.size() != 4 || s[2] != s[3]) throw DimensionError("masked_softmax expects [B,H,k,k], got " + to_string(s));
  const std::size_t B = s[0], H = s[1], k = s[2];
  if (mask.size() != B * k) throw DimensionError("masked_softmax: mask length does not match scores");
  Tensor<T> y(s);
  const T* in = scores.value().ptr();
  for (std::size_t b = 0; b < B; ++b) {
    const std::uint8_t* m = mask.data() + b * k;
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t q = 0; q < k; ++q) {
        if (!m[q]) continue;
        const std::size_t base = ((b * H + h) * k + q) * k;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < k; ++j) {
          if (m[j]) mx = std::max(mx, in[base + j]);
        }
        T z{0};
        for (std::size_t j = 0; j < k; ++j) {
          if (!m[j]) continue;
          const T e = std::exp(in[base + j] - mx);
          y[base + j] = e;
          z += e;
        }
        for (std::size_t j = 0; j < k; ++j) y[base + j] /= z;
      }
    }
  }
  const std::size_t ix = scores.index;
  return scores.tape->record(std::move(y), {scores}, "masked_softmax", [ix, B, H, k](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gy = t.grad(self);
    const Tensor<T>& yv = t.value(self);
    Tensor<T>& gx = t.grad(ix);
    for (std::size_t r = 0; r < B * H * k; ++r) {
      const std::size_t base = r * k;
      T dot{0};
      for (std::size_t j = 0; j < k; ++j) dot += gy[base + j] * yv[base + j];
      for (std::size_t j = 0; j < k; ++j) gx[base + j] += yv[base + j] * (gy[base + j] - dot);
    }
  });
}

/// Layer normalization over the last axis (population variance).
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  if (!(eps > T{0})) throw ContractError("layer_norm: eps must be positive");
  const Shape& s = x.shape();
  const std::size_t D = s.back();
  if (gamma.shape() != Shape{D} || beta.shape() != Shape{D}) {
    throw DimensionError("layer_norm: gamma/beta must be [" + std::to_string(D) + "], got " + to_string(gamma.shape()) +
                         " and " + to_string(beta.shape()));
  }
  const std::size_t rows = x.value().size() / D;
  Tensor<T> y(s);
  Tensor<T> xhat(s);
  std::vector<T> inv_std(rows);
  const T* in = x.value().ptr();
  const T* g = gamma.value().ptr();
  const T* bt = beta.value().ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = in + r * D;
    T mu{0};
    for (std::size_t i = 0; i < D; ++i) mu += row[i];
    mu /= static_cast<T>(D);
    T var{0};
    for (std::size_t i = 0; i < D; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<T>(D);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t i = 0; i < D; ++i) {
      const T h = (row[i] - mu) * is;
      xhat[r * D + i] = h;
      y[r * D + i] = g[i] * h + bt[i];
    }
  }
  const std::size_t ix = x.index, ig = gamma.index, ib = beta.index;
  return x.tape->record(
      std::move(y), {x, gamma, beta}, "layer_norm",
      [ix, ig, ib, rows, D, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, std::size_t self) {
        const Tensor<T>& gy = t.grad(self);
        const T* gv = t.value(ig).ptr();
        if (t.requires_grad(ig) || t.requires_grad(ib)) {
          T* gg = t.requires_grad(ig) ? t.grad(ig).ptr() : nullptr;
          T* gb = t.requires_grad(ib) ? t.grad(ib).ptr() : nullptr;
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t i = 0; i < D; ++i) {
              if (gg) gg[i] += gy[r * D + i] * xhat[r * D + i];
              if (gb) gb[i] += gy[r * D + i];
            }
          }
        }
        if (!t.requires_grad(ix)) return;
        T* gx = t.grad(ix).ptr();
        const T invD = T(1) / static_cast<T>(D);
        for (std::size_t r = 0; r < rows; ++r) {
          T mean_g{0}, mean_gh{0};
          for (std::size_t i = 0; i < D; ++i) {
            const T gh = gy[r * D + i] * gv[i];
            mean_g += gh;
            mean_gh += gh * xhat[r * D + i];
          }
          mean_g *= invD;
          mean_gh *= invD;
          for (std::size_t i = 0; i < D; ++i) {
            const T gh = gy[r * D + i] * gv[i];
            gx[r * D + i] += inv_std[r] * (gh - mean_g - xhat[r * D + i] * mean_gh);
          }
        }
      });
}

/// Scales each row (last axis) to unit Euclidean norm.
template <class T>
Var<T> l2_normalize(Var<T> x) {
  const Shape& s = x.shape();
  const std::size_t D = s.back();
  const std::size_t rows = x.value().size() / D;
  Tensor<T> y(s);
  std::vector<T> norms(rows);
  const T* in = x.value().ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    T ss{0};
    for (std::size_t i = 0; i < D; ++i) ss += in[r * D + i] * in[r * D + i];
    const T nrm = std::sqrt(ss);
    if (!std::isfinite(nrm)) throw NumericError("l2_normalize: non-finite values in row " + std::to_string(r));
    if (!(nrm > T{0})) throw ContractError("l2_normalize: zero-norm row " + std::to_string(r));
    norms[r] = nrm;
    for (std::size_t i = 0; i < D; ++i) y[r * D + i] = in[r * D + i] / nrm;
  }
  const std::size_t ix = x.index;
  return x.tape->record(std::move(y), {x}, "l2_normalize", [ix, rows, D, norms = std::move(norms)](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gy = t.grad(self);
    const Tensor<T>& yv = t.value(self);
    Tensor<T>& gx = t.grad(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      T dot{0};
      for (std::size_t i = 0; i < D; ++i) dot += gy[r * D + i] * yv[r * D + i];
      for (std::size_t i = 0; i < D; ++i) gx[r * D + i] += (gy[r * D + i] - yv[r * D + i] * dot) / norms[r];
    }
  });
}

// ---------------------------------------------------------------------------
// Masked pooling over the sequence axis of [B, k, D]

namespace detail {

inline void check_pool_args(const Shape& s, const Mask& mask, const char* op) {
  if (s.size() != 3) throw DimensionError(std::string(op) + " expects [B,k,D], got " + to_string(s));
  if (mask.size() != s[0] * s[1]) throw DimensionError(std::string(op) + ": mask length does not match tokens");
  for (std::size_t b = 0; b < s[0]; ++b) {
    const bool any = std::any_of(mask.begin() + b * s[1], mask.begin() + (b + 1) * s[1], [](std::uint8_t m) { return m != 0; });
    if (!any) throw ContractError(std::string(op) + ": sequence " + std::to_string(b) + " has no unmasked rows");
  }
}

}  // namespace detail

/// Per-dimension maximum over unmasked rows; ties go to the lowest row.
template <class T>
Var<T> max_pool(Var<T> x, const Mask& mask) {
  const Shape& s = x.shape();
  detail::check_pool_args(s, mask, "max_pool");
  const std::size_t B = s[0], k = s[1], D = s[2];
  Tensor<T> y(Shape{B, D});
  std::vector<std::size_t> arg(B * D);
  const T* in = x.value().ptr();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t d = 0; d < D; ++d) {
      bool first = true;
      T best{0};
      std::size_t bi = 0;
      for (std::size_t i = 0; i < k; ++i) {
        if (!mask[b * k + i]) continue;
        const T v = in[(b * k + i) * D + d];
        if (first || v > best) {
          best = v;
          bi = i;
          first = false;
        }
      }
      y[b * D + d] = best;
      arg[b * D + d] = bi;
    }
  }
  const std::size_t ix = x.index;
  return x.tape->record(std::move(y), {x}, "max_pool", [ix, B, k, D, arg = std::move(arg)](Tape<T>& t, std::size_t self) {
    const Tensor<T>& gy = t.grad(self);
    Tensor<T>& gx = t.grad(ix);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t d = 0; d < D; ++d) gx[(b * k + arg[b * D + d]) * D + d] += gy[b * D + d];
    }
  });
}

/// Per-dimension mean over unmasked rows.
template <class T>
Var<T> mean_pool(Var<T> x, const Mask& mask) {
  const Shape& s = x.shape();
  detail::check_pool_args(s, mask, "mean_pool");
  const std::size_t B = s[0], k = s[1], D = s[2];
  Tensor<T> y(Shape{B, D});
  std::vector<T> inv_count(B);
  const T* in = x.value().ptr();
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t c = 0;
    for (std::size_t i = 0; i < k; ++i) {
      if (!mask[b * k + i]) continue;
      ++c;
      for (std::size_t d = 0; d < D; ++d) y[b * D + d] += in[(b * k + i) * D + d];
    }
    inv_count[b] = T(1) / static_cast<T>(c);
    for (std::size_t d = 0; d < D; ++d) y[b * D + d] *= inv_count[b];
  }
  const std::size_t ix = x.index;
  return x.tape->record(std::move(y), {x}, "mean_pool",
                        [ix, B, k, D, mask, inv_count = std::move(inv_count)](Tape<T>& t, std::size_t self) {
                          const Tensor<T>& gy = t.grad(self);
                          Tensor<T>& gx = t.grad(ix);
                          for (std::size_t b = 0; b < B; ++b) {
                            for (std::size_t i = 0; i < k; ++i) {
                              if (!mask[b * k + i]) continue;
                              for (std::size_t d = 0; d < D; ++d) gx[(b * k + i) * D + d] += gy[b * D + d] * inv_count[b];
                            }
                          }
                        });
}

}  // namespace cookie
