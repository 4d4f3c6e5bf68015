#pragma once

// Retrieval and correlation metrics. Rankings sort by descending score and
// break ties toward the lower gallery index.

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "cookie/error.hpp"
#include "cookie/tensor.hpp"

namespace cookie {

using Relevance = std::vector<std::vector<std::size_t>>;  // per query, relevant gallery indices

/// Cosine similarity matrix [Q, G] of two embedding sets [Q, D] and [G, D].
template <class T>
Tensor<double> similarity_matrix(const Tensor<T>& queries, const Tensor<T>& gallery) {
  if (queries.rank() != 2 || gallery.rank() != 2 || queries.dim(1) != gallery.dim(1)) {
    throw DimensionError("similarity_matrix: embeddings " + to_string(queries.shape()) + " and " + to_string(gallery.shape()) +
                         " must be [Q,D] and [G,D]");
  }
  const std::size_t q = queries.dim(0), g = gallery.dim(0), d = queries.dim(1);
  auto unit_rows = [d](const Tensor<T>& x, const char* what) {
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < x.dim(0); ++r) {
      double n = 0;
      for (std::size_t k = 0; k < d; ++k) n += static_cast<double>(x[r * d + k]) * static_cast<double>(x[r * d + k]);
      if (!(n > 0.0)) throw ContractError(std::string("similarity_matrix: zero-norm ") + what + " vector at row " + std::to_string(r));
      n = std::sqrt(n);
      for (std::size_t k = 0; k < d; ++k) out[r * d + k] = static_cast<double>(x[r * d + k]) / n;
    }
    return out;
  };
  const auto a = unit_rows(queries, "query"), b = unit_rows(gallery, "gallery");
  Tensor<double> s(Shape{q, g});
  for (std::size_t i = 0; i < q; ++i) {
    for (std::size_t j = 0; j < g; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < d; ++k) acc += a[i * d + k] * b[j * d + k];
      s.at(i, j) = std::clamp(acc, -1.0, 1.0);
    }
  }
  return s;
}

/// 1-based rank of gallery item `item` in row `q`.
inline std::size_t rank_in_row(const Tensor<double>& scores, std::size_t q, std::size_t item) {
  const std::size_t g = scores.dim(1);
  const double* row = scores.ptr() + q * g;
  const double v = row[item];
  std::size_t ahead = 0;
  for (std::size_t j = 0; j < g; ++j) ahead += row[j] > v || (row[j] == v && j < item);
  return ahead + 1;
}

/// Best (smallest) rank among the relevant items of each query.
inline std::vector<std::size_t> best_relevant_ranks(const Tensor<double>& scores, const Relevance& relevant) {
  if (scores.rank() != 2 || relevant.size() != scores.dim(0)) throw ContractError("relevance list must have one entry per query");
  std::vector<std::size_t> out(relevant.size());
  for (std::size_t q = 0; q < relevant.size(); ++q) {
    if (relevant[q].empty()) throw ContractError("query " + std::to_string(q) + " has no relevant gallery item");
    std::size_t best = scores.dim(1) + 1;
    for (std::size_t g : relevant[q]) {
      if (g >= scores.dim(1)) throw ContractError("relevant index out of gallery range");
      best = std::min(best, rank_in_row(scores, q, g));
    }
    out[q] = best;
  }
  return out;
}

inline double recall_from_ranks(const std::vector<std::size_t>& best_ranks, std::size_t k) {
  if (best_ranks.empty()) throw ContractError("recall: no queries");
  std::size_t hits = 0;
  for (auto r : best_ranks) hits += r <= k;
  return 100.0 * static_cast<double>(hits) / static_cast<double>(best_ranks.size());
}

/// Percentage of queries with a relevant item among the top k.
inline double recall_at_k(const Tensor<double>& scores, const Relevance& relevant, std::size_t k) {
  if (k < 1) throw ContractError("recall_at_k: K must be at least 1");
  if (k > scores.dim(1)) {
    throw ContractError("recall_at_k: K=" + std::to_string(k) + " exceeds gallery size " + std::to_string(scores.dim(1)));
  }
  return recall_from_ranks(best_relevant_ranks(scores, relevant), k);
}

/// R@1 + R@5 + R@10 in both directions.
inline double rsum(const std::array<double, 6>& recalls) {
  double s = 0;
  for (double r : recalls) {
    if (!(r >= 0.0 && r <= 100.0)) throw ContractError("rsum: recall " + std::to_string(r) + " outside [0, 100]");
    s += r;
  }
  return s;
}

/// Mean truncated average precision: AP = (1 / min(R, K)) * sum of precision@r
/// over relevant items ranked r <= K.
inline double map_at_k(const Tensor<double>& scores, const Relevance& relevant, std::size_t k) {
  if (k < 1) throw ContractError("map_at_k: K must be at least 1");
  const std::size_t g = scores.dim(1);
  if (k > g) throw ContractError("map_at_k: K=" + std::to_string(k) + " exceeds gallery size " + std::to_string(g));
  if (relevant.size() != scores.dim(0)) throw ContractError("relevance list must have one entry per query");
  std::vector<std::size_t> order(g);
  std::vector<char> is_rel(g);
  double total = 0;
  for (std::size_t q = 0; q < relevant.size(); ++q) {
    if (relevant[q].empty()) throw ContractError("query " + std::to_string(q) + " has no relevant gallery item");
    const double* row = scores.ptr() + q * g;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [row](std::size_t a, std::size_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
    std::fill(is_rel.begin(), is_rel.end(), 0);
    std::size_t r_count = 0;
    for (std::size_t idx : relevant[q]) {
      if (idx >= g) throw ContractError("relevant index out of gallery range");
      r_count += !is_rel[idx];
      is_rel[idx] = 1;
    }
    double ap = 0;
    std::size_t found = 0;
    for (std::size_t r = 0; r < k; ++r) {
      if (is_rel[order[r]]) {
        ++found;
        ap += static_cast<double>(found) / static_cast<double>(r + 1);
      }
    }
    total += ap / static_cast<double>(std::min(r_count, k));
  }
  return total / static_cast<double>(relevant.size());
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 3) throw ContractError("correlation needs two equal-length lists of at least 3 values");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) throw NumericError("correlation undefined for a constant input");
  return sxy / std::sqrt(sxx * syy);
}

/// 1-based ranks with ties sharing their average rank.
inline std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ContractError("correlation needs two equal-length lists of at least 3 values");
  return pearson(average_ranks(x), average_ranks(y));
}

struct StsScores {
  double pearson = 0.0;
  double spearman = 0.0;
  double mean = 0.0;
};

inline StsScores sts_scores(const std::vector<double>& pred, const std::vector<double>& labels) {
  for (double l : labels) {
    if (!(l >= 0.0 && l <= 5.0)) throw ContractError("similarity labels must lie in [0, 5]");
  }
  StsScores s;
  s.pearson = pearson(pred, labels);
  s.spearman = spearman(pred, labels);
  s.mean = 0.5 * (s.pearson + s.spearman);
  return s;
}

struct AttentionEntry {
  std::size_t token = 0;
  std::string label;
  double score = 0.0;
  std::size_t rank = 0;  // 1-based
  bool top5 = false;
};

struct AttentionRanking {
  std::vector<AttentionEntry> entries;  // sorted by rank
  std::vector<std::string> warnings;
};

/// Cosine of each token with the pooled representation, ranked descending.
/// Masked tokens are skipped; zero-norm tokens are excluded with a warning.
template <class T>
AttentionRanking attention_rank(const Tensor<T>& tokens, const Tensor<T>& pooled, const std::vector<std::string>& labels,
                                const std::vector<std::uint8_t>& mask = {}) {
  if (tokens.rank() != 2 || pooled.size() != tokens.dim(1)) {
    throw DimensionError("attention_rank: tokens " + to_string(tokens.shape()) + " vs pooled " + to_string(pooled.shape()));
  }
  const std::size_t k = tokens.dim(0), d = tokens.dim(1);
  if (labels.size() != k) throw ContractError("attention_rank: one label per token required");
  if (!mask.empty() && mask.size() != k) throw ContractError("attention_rank: mask length differs from token count");
  double pn = 0;
  for (std::size_t j = 0; j < d; ++j) pn += static_cast<double>(pooled[j]) * static_cast<double>(pooled[j]);
  if (!(pn > 0.0)) throw ContractError("attention_rank: pooled representation has zero norm");
  pn = std::sqrt(pn);
  AttentionRanking out;
  std::size_t unmasked = 0;
  for (std::size_t i = 0; i < k; ++i) {
    if (!mask.empty() && !mask[i]) continue;
    ++unmasked;
    double dot = 0, tn = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const double t = static_cast<double>(tokens[i * d + j]);
      dot += t * static_cast<double>(pooled[j]);
      tn += t * t;
    }
    if (!(tn > 0.0)) {
      out.warnings.push_back("token " + std::to_string(i) + " (" + labels[i] + ") has zero norm and was excluded");
      continue;
    }
    out.entries.push_back({i, labels[i], std::clamp(dot / (std::sqrt(tn) * pn), -1.0, 1.0), 0, false});
  }
  if (unmasked == 0) throw ContractError("attention_rank: no unmasked tokens");
  std::stable_sort(out.entries.begin(), out.entries.end(), [](const AttentionEntry& a, const AttentionEntry& b) {
    return a.score > b.score || (a.score == b.score && a.token < b.token);
  });
  for (std::size_t r = 0; r < out.entries.size(); ++r) {
    out.entries[r].rank = r + 1;
    out.entries[r].top5 = r < 5;
  }
  return out;
}

}  // namespace cookie
