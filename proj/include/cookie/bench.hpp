#pragma once

// Inference-time scaling of double-stream retrieval (encode each item once,
// then one similarity matrix) against a one-stream simulator that runs a
// joint transformer over every (image, caption) pair.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cookie/config.hpp"
#include "cookie/data.hpp"
#include "cookie/encoders.hpp"
#include "cookie/eval.hpp"
#include "cookie/metrics.hpp"

namespace cookie {

enum class BenchMode { double_stream, one_stream };

inline std::string to_string(BenchMode m) { return m == BenchMode::double_stream ? "double-stream" : "one-stream-sim"; }

/// Joint (image, caption) forwards since process start.
inline std::atomic<std::uint64_t>& joint_forward_calls() {
  static std::atomic<std::uint64_t> n{0};
  return n;
}

/// Joint scorer at the depth and width of the double-stream encoders.
struct OneStreamParams {
  std::vector<TransformerLayer<float>> layers;
  Linear<float> head;  // pooled [D] -> score

  static OneStreamParams init(const EncoderConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    TransformerShape s{cfg.model_dim, cfg.heads, cfg.ffn_dim, cfg.ln_eps, 0.0};
    OneStreamParams p;
    for (std::size_t i = 0; i < cfg.tav_layers + cfg.ws_layers; ++i) {
      p.layers.push_back(TransformerLayer<float>::init("joint." + std::to_string(i), s, rng));
    }
    p.head = Linear<float>::init("joint.head", cfg.model_dim, 1, rng);
    return p;
  }
};

struct BenchInputs {
  EncoderParams<float> params;
  OneStreamParams joint;
  std::vector<const SceneImage*> images;
  std::vector<CaptionTokens> captions;  // first caption per sample, cut to max_tokens

  std::vector<const CaptionTokens*> caption_ptrs(std::size_t n) const {
    std::vector<const CaptionTokens*> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(&captions[i]);
    return out;
  }
};

/// Items for the largest size in `cfg.sizes`; `corpus` must hold that many
/// samples rendered at the bench model's image size.
inline BenchInputs make_bench_inputs(const BenchConfig& cfg, const Corpus& corpus, std::uint64_t seed) {
  const std::size_t n = *std::max_element(cfg.sizes.begin(), cfg.sizes.end());
  if (corpus.size() < n) throw DataError("bench needs " + std::to_string(n) + " samples, corpus has " + std::to_string(corpus.size()));
  BenchInputs in{EncoderParams<float>::init(cfg.model, derive_seed(seed, {static_cast<std::uint64_t>(SeedStream::bench), 1})),
                 OneStreamParams::init(cfg.model, derive_seed(seed, {static_cast<std::uint64_t>(SeedStream::bench), 2})),
                 {},
                 {}};
  for (std::size_t i = 0; i < n; ++i) {
    const Sample& s = corpus.samples[i];
    in.images.push_back(&s.image);
    CaptionTokens c = s.captions.front();
    if (c.size() > cfg.model.max_tokens) c.resize(cfg.model.max_tokens);
    in.captions.push_back(std::move(c));
  }
  return in;
}

/// Corpus rendered at the bench model's image size.
inline Corpus bench_corpus(const BenchConfig& cfg, std::uint64_t seed) {
  GeneratorConfig g;
  g.image_size = cfg.model.image_size;
  return generate_corpus(*std::max_element(cfg.sizes.begin(), cfg.sizes.end()), derive_seed(seed, {static_cast<std::uint64_t>(SeedStream::bench)}), g);
}

struct ModeRun {
  Tensor<double> scores;  // [n images, n captions]
  std::uint64_t calls = 0;
};

inline ModeRun run_double_stream(const BenchInputs& in, std::size_t n, std::size_t batch = 64) {
  const auto i0 = image_encoder_calls().load(), t0 = text_encoder_calls().load();
  std::vector<const SceneImage*> imgs(in.images.begin(), in.images.begin() + static_cast<std::ptrdiff_t>(n));
  const Tensor<float> a = embed_images(in.params, imgs, Pooling::max, batch);
  const Tensor<float> b = embed_captions(in.params, in.caption_ptrs(n), Pooling::max, batch);
  ModeRun r{similarity_matrix(a, b), 0};
  r.calls = image_encoder_calls().load() - i0 + text_encoder_calls().load() - t0;
  return r;
}

inline ModeRun run_one_stream(const BenchInputs& in, std::size_t n, std::size_t pair_batch) {
  const EncoderConfig& c = in.params.config;
  const std::size_t P = c.num_patches(), M = c.max_tokens, D = c.model_dim, L = P + M;
  // Per-item features: the backbones and projections run once per item.
  std::vector<const SceneImage*> imgs(in.images.begin(), in.images.begin() + static_cast<std::ptrdiff_t>(n));
  Tape<float> feat(false);
  const Tensor<float> vis = project_visual(feat, in.params, toy_visual_backbone(feat, in.params, stack_images<float>(imgs))).value();
  const TokenBatch tb = pad_captions(in.caption_ptrs(n), M);
  const Tensor<float> txt = project_textual(feat, in.params, toy_text_backbone(feat, in.params, tb)).value();

  ModeRun r{Tensor<double>(Shape{n, n}), 0};
  const std::size_t pairs = n * n;
  for (std::size_t lo = 0; lo < pairs; lo += pair_batch) {
    const std::size_t C = std::min(pair_batch, pairs - lo);
    Tensor<float> x(Shape{C, L, D});
    Mask mask(C * L, 1);
    for (std::size_t p = 0; p < C; ++p) {
      const std::size_t i = (lo + p) / n, j = (lo + p) % n;
      float* dst = x.ptr() + p * L * D;
      std::copy_n(vis.ptr() + i * P * D, P * D, dst);
      std::copy_n(txt.ptr() + j * M * D, M * D, dst + P * D);
      for (std::size_t t = 0; t < M; ++t) mask[p * L + P + t] = tb.mask[j * M + t];
    }
    Tape<float> tape(false);
    Var<float> h = tape.constant(std::move(x));
    for (const auto& layer : in.joint.layers) h = layer.forward(tape, h, mask);
    const Tensor<float>& s = in.joint.head(tape, mean_pool(h, mask)).value();
    for (std::size_t p = 0; p < C; ++p) r.scores[lo + p] = s[p];
  }
  joint_forward_calls().fetch_add(pairs, std::memory_order_relaxed);
  r.calls = pairs;
  return r;
}

struct TimingPoint {
  std::size_t n = 0;
  double median_ms = 0.0;
  double min_ms = 0.0;
  double max_ms = 0.0;
  std::uint64_t calls = 0;
};

struct TimingRecord {
  BenchMode mode = BenchMode::double_stream;
  std::vector<TimingPoint> points;
};

struct ScalingFit {
  double slope = 0.0;
  double stderr_slope = 0.0;
};

/// Least-squares slope of log(time) against log(n).
inline ScalingFit fit_scaling_exponent(const std::vector<std::size_t>& sizes, const std::vector<double>& times) {
  if (sizes.size() != times.size()) throw ContractError("fit_scaling_exponent: one time per size required");
  if (sizes.size() < 4) throw ContractError("fit_scaling_exponent: needs at least 4 sizes");
  const auto [lo, hi] = std::minmax_element(sizes.begin(), sizes.end());
  if (*lo == 0 || *hi < 8 * *lo) throw ContractError("fit_scaling_exponent: sizes must span at least 8x");
  const std::size_t k = sizes.size();
  std::vector<double> x(k), y(k);
  for (std::size_t i = 0; i < k; ++i) {
    if (!(times[i] > 0.0)) throw ContractError("fit_scaling_exponent: non-positive time at n=" + std::to_string(sizes[i]));
    x[i] = std::log(static_cast<double>(sizes[i]));
    y[i] = std::log(times[i]);
  }
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(k);
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(k);
  double sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < k; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  ScalingFit f;
  f.slope = sxy / sxx;
  double sse = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const double e = y[i] - (my + f.slope * (x[i] - mx));
    sse += e * e;
  }
  f.stderr_slope = std::sqrt(sse / static_cast<double>(k - 2) / sxx);
  return f;
}

inline ScalingFit fit_scaling_exponent(const TimingRecord& r) {
  std::vector<std::size_t> n;
  std::vector<double> t;
  for (const auto& p : r.points) {
    n.push_back(p.n);
    t.push_back(p.median_ms);
  }
  return fit_scaling_exponent(n, t);
}

/// Times `mode` at every size: warm-up runs are discarded, then the median,
/// minimum and maximum of `cfg.repeats` timed runs are kept.
inline TimingRecord bench_retrieval(BenchMode mode, const BenchConfig& cfg, const BenchInputs& in) {
  if (cfg.repeats < 5) throw ConfigError("bench repeats must be at least 5, got " + std::to_string(cfg.repeats));
  if (cfg.sizes.empty() || !std::is_sorted(cfg.sizes.begin(), cfg.sizes.end()) ||
      std::adjacent_find(cfg.sizes.begin(), cfg.sizes.end()) != cfg.sizes.end()) {
    throw ConfigError("bench sizes must be strictly ascending");
  }
  if (cfg.sizes.back() > in.images.size()) throw DataError("bench inputs hold fewer items than the largest size");
  TimingRecord rec;
  rec.mode = mode;
  for (std::size_t n : cfg.sizes) {
    auto once = [&] { return mode == BenchMode::double_stream ? run_double_stream(in, n) : run_one_stream(in, n, cfg.pair_batch); };
    for (std::size_t w = 0; w < cfg.warmup; ++w) (void)once();
    std::vector<double> ms;
    std::uint64_t calls = 0;
    for (std::size_t r = 0; r < cfg.repeats; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      calls = once().calls;
      ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    std::sort(ms.begin(), ms.end());
    const std::size_t m = ms.size();
    const double median = m % 2 ? ms[m / 2] : 0.5 * (ms[m / 2 - 1] + ms[m / 2]);
    rec.points.push_back({n, median, ms.front(), ms.back(), calls});
  }
  return rec;
}

/// CSV with columns mode,n,median_ms,min_ms,max_ms,calls.
inline void write_bench_csv(const std::filesystem::path& path, const std::vector<TimingRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "mode,n,median_ms,min_ms,max_ms,calls\n";
  out.precision(9);
  for (const auto& r : records) {
    for (const auto& p : r.points) {
      out << to_string(r.mode) << ',' << p.n << ',' << p.median_ms << ',' << p.min_ms << ',' << p.max_ms << ',' << p.calls << '\n';
    }
  }
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

inline nlohmann::json bench_summary(const std::vector<TimingRecord>& records) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& r : records) {
    const ScalingFit f = fit_scaling_exponent(r);
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : r.points) {
      pts.push_back({{"n", p.n}, {"median_ms", p.median_ms}, {"min_ms", p.min_ms}, {"max_ms", p.max_ms}, {"calls", p.calls}});
    }
    j[to_string(r.mode)] = {{"slope", f.slope}, {"slope_stderr", f.stderr_slope}, {"points", pts}};
  }
  return j;
}

}  // namespace cookie
