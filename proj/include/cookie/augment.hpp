#pragma once

// Seeded augmentation pipelines for the single-modal contrastive views.
// Visual: crop -> flip -> noise -> color jitter -> grayscale -> resize.
// Textual: each token selected with token_prob, then masked, replaced or deleted.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "cookie/error.hpp"
#include "cookie/image.hpp"
#include "cookie/random.hpp"

namespace cookie {

struct VisualAugConfig {
  double crop_min = 0.6;  // lower bound of both scale factors
  double crop_max = 1.0;
  double flip_prob = 0.5;
  double noise_prob = 0.5;
  double noise_std = 0.05;
  double jitter_prob = 0.8;
  double jitter_gain = 0.4;  // gain drawn from [1 - g, 1 + g]
  double jitter_bias = 0.2;  // bias drawn from [-b, b]
  double gray_prob = 0.2;
  std::size_t output_height = 32;
  std::size_t output_width = 32;

  /// Every probability zero and crop factors pinned at 1.
  static VisualAugConfig identity(std::size_t h = 32, std::size_t w = 32) {
    VisualAugConfig c;
    c.crop_min = c.crop_max = 1.0;
    c.flip_prob = c.noise_prob = c.jitter_prob = c.gray_prob = 0.0;
    c.output_height = h;
    c.output_width = w;
    return c;
  }

  std::vector<std::string> problems() const {
    std::vector<std::string> out;
    auto prob = [&](double p, const char* name) {
      if (!(p >= 0.0 && p <= 1.0)) out.push_back(std::string("augment.visual.") + name + " must lie in [0, 1]");
    };
    prob(flip_prob, "flip_prob");
    prob(noise_prob, "noise_prob");
    prob(jitter_prob, "jitter_prob");
    prob(gray_prob, "gray_prob");
    if (!(crop_min > 0.0 && crop_min <= crop_max && crop_max <= 1.0)) {
      out.push_back("augment.visual crop range must satisfy 0 < crop_min <= crop_max <= 1");
    }
    if (noise_std < 0.0) out.push_back("augment.visual.noise_std must be non-negative");
    if (jitter_gain < 0.0 || jitter_gain >= 1.0) out.push_back("augment.visual.jitter_gain must lie in [0, 1)");
    if (jitter_bias < 0.0) out.push_back("augment.visual.jitter_bias must be non-negative");
    if (output_height == 0 || output_width == 0) out.push_back("augment.visual output size must be positive");
    return out;
  }
};

struct TextAugConfig {
  double token_prob = 0.2;
  double mask_frac = 0.5;
  double replace_frac = 0.1;
  double delete_frac = 0.4;
  std::int32_t mask_token = 1;
  std::int32_t replace_low = 3;  // replacements drawn from [replace_low, vocab_size)
  std::size_t vocab_size = 128;

  static TextAugConfig identity() {
    TextAugConfig c;
    c.token_prob = 0.0;
    return c;
  }

  std::vector<std::string> problems() const {
    std::vector<std::string> out;
    if (!(token_prob >= 0.0 && token_prob <= 1.0)) out.push_back("augment.text.token_prob must lie in [0, 1]");
    if (mask_frac < 0.0 || replace_frac < 0.0 || delete_frac < 0.0 ||
        std::abs(mask_frac + replace_frac + delete_frac - 1.0) > 1e-9) {
      out.push_back("augment.text mask_frac + replace_frac + delete_frac must equal 1");
    }
    if (replace_low < 0 || static_cast<std::size_t>(replace_low) >= vocab_size) {
      out.push_back("augment.text.replace_low must lie inside the vocabulary");
    }
    if (mask_token < 0 || static_cast<std::size_t>(mask_token) >= vocab_size) {
      out.push_back("augment.text.mask_token must lie inside the vocabulary");
    }
    return out;
  }
};

struct ImageAugTrace {
  std::size_t crop_h = 0, crop_w = 0, offset_y = 0, offset_x = 0;
  bool flipped = false;
  bool noised = false;
  bool jittered = false;
  bool grayed = false;
};

struct TextAugTrace {
  std::size_t selected = 0;
  std::size_t masked = 0;
  std::size_t replaced = 0;
  std::size_t deleted = 0;
  bool guard_restored = false;
};

/// Number of augmentation calls made by this process; lets callers verify
/// that a code path never augments.
inline std::atomic<std::uint64_t>& augmentation_calls() {
  static std::atomic<std::uint64_t> calls{0};
  return calls;
}

/// Bilinear resize with half-pixel centers and edge clamping.
inline SceneImage resize_bilinear(const SceneImage& src, std::size_t out_h, std::size_t out_w) {
  const std::size_t in_h = src.dim(0), in_w = src.dim(1);
  if (in_h == out_h && in_w == out_w) return src;
  SceneImage dst = blank_image(out_h, out_w);
  const double sy = static_cast<double>(in_h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(in_w) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(in_h - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, in_h - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(in_w - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, in_w - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = (1 - wx) * pixel(src, y0, x0, c) + wx * pixel(src, y0, x1, c);
        const double bot = (1 - wx) * pixel(src, y1, x0, c) + wx * pixel(src, y1, x1, c);
        pixel(dst, y, x, c) = static_cast<float>((1 - wy) * top + wy * bot);
      }
    }
  }
  return dst;
}

inline SceneImage augment_image(const SceneImage& image, const VisualAugConfig& cfg, std::uint64_t seed,
                                ImageAugTrace* trace = nullptr) {
  if (image.rank() != 3 || image.dim(2) != 3) throw DimensionError("augment_image expects [H,W,3], got " + to_string(image.shape()));
  augmentation_calls().fetch_add(1, std::memory_order_relaxed);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  ImageAugTrace tr;
  const std::size_t H = image.dim(0), W = image.dim(1);

  // crop
  std::uniform_real_distribution<double> scale(cfg.crop_min, cfg.crop_max);
  const double s1 = scale(rng), s2 = scale(rng);
  tr.crop_h = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(s1 * static_cast<double>(H))), 1, H);
  tr.crop_w = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(s2 * static_cast<double>(W))), 1, W);
  tr.offset_y = std::uniform_int_distribution<std::size_t>(0, H - tr.crop_h)(rng);
  tr.offset_x = std::uniform_int_distribution<std::size_t>(0, W - tr.crop_w)(rng);
  SceneImage img = blank_image(tr.crop_h, tr.crop_w);
  for (std::size_t y = 0; y < tr.crop_h; ++y) {
    for (std::size_t x = 0; x < tr.crop_w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) pixel(img, y, x, c) = pixel(image, y + tr.offset_y, x + tr.offset_x, c);
    }
  }

  // flip
  tr.flipped = unit(rng) < cfg.flip_prob;
  if (tr.flipped) {
    for (std::size_t y = 0; y < tr.crop_h; ++y) {
      for (std::size_t x = 0; x < tr.crop_w / 2; ++x) {
        for (std::size_t c = 0; c < 3; ++c) std::swap(pixel(img, y, x, c), pixel(img, y, tr.crop_w - 1 - x, c));
      }
    }
  }

  // gaussian noise
  tr.noised = unit(rng) < cfg.noise_prob;
  if (tr.noised) {
    std::normal_distribution<double> noise(0.0, cfg.noise_std);
    for (float& v : img.data()) v = static_cast<float>(std::clamp(v + noise(rng), 0.0, 1.0));
  }

  // color jitter: independent per-channel gain and bias
  tr.jittered = unit(rng) < cfg.jitter_prob;
  if (tr.jittered) {
    std::uniform_real_distribution<double> gain(1.0 - cfg.jitter_gain, 1.0 + cfg.jitter_gain);
    std::uniform_real_distribution<double> bias(-cfg.jitter_bias, cfg.jitter_bias);
    double g[3], b[3];
    for (int c = 0; c < 3; ++c) {
      g[c] = gain(rng);
      b[c] = bias(rng);
    }
    for (std::size_t p = 0; p < tr.crop_h * tr.crop_w; ++p) {
      for (std::size_t c = 0; c < 3; ++c) {
        float& v = img[p * 3 + c];
        v = static_cast<float>(std::clamp(g[c] * v + b[c], 0.0, 1.0));
      }
    }
  }

  // color dropping
  tr.grayed = unit(rng) < cfg.gray_prob;
  if (tr.grayed) {
    for (std::size_t p = 0; p < tr.crop_h * tr.crop_w; ++p) {
      const float l = 0.299f * img[p * 3] + 0.587f * img[p * 3 + 1] + 0.114f * img[p * 3 + 2];
      img[p * 3] = img[p * 3 + 1] = img[p * 3 + 2] = l;
    }
  }

  if (trace) *trace = tr;
  return resize_bilinear(img, cfg.output_height, cfg.output_width);
}

/// Token-level masking / replacement / deletion. Order of surviving tokens is
/// preserved and at least one token always survives.
inline CaptionTokens augment_text(const CaptionTokens& tokens, const TextAugConfig& cfg, std::uint64_t seed,
                                  TextAugTrace* trace = nullptr) {
  if (tokens.empty()) throw ContractError("augment_text: empty token sequence");
  augmentation_calls().fetch_add(1, std::memory_order_relaxed);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::int32_t> word(cfg.replace_low, static_cast<std::int32_t>(cfg.vocab_size) - 1);
  TextAugTrace tr;
  CaptionTokens out;
  out.reserve(tokens.size());
  for (std::int32_t tok : tokens) {
    if (!(unit(rng) < cfg.token_prob)) {
      out.push_back(tok);
      continue;
    }
    ++tr.selected;
    const double r = unit(rng);
    if (r < cfg.mask_frac) {
      ++tr.masked;
      out.push_back(cfg.mask_token);
    } else if (r < cfg.mask_frac + cfg.replace_frac) {
      ++tr.replaced;
      out.push_back(word(rng));
    } else {
      ++tr.deleted;
    }
  }
  if (out.empty()) {
    out.push_back(tokens.front());
    tr.guard_restored = true;
  }
  if (trace) *trace = tr;
  return out;
}

struct RateEstimate {
  std::size_t hits = 0;
  std::size_t trials = 0;

  double rate() const { return trials ? static_cast<double>(hits) / static_cast<double>(trials) : 0.0; }
  double standard_error() const {
    const double p = rate();
    return trials ? std::sqrt(p * (1.0 - p) / static_cast<double>(trials)) : 0.0;
  }
  /// |rate - nominal| in units of the binomial standard error at the nominal rate.
  double z_score(double nominal) const {
    const double se = std::sqrt(nominal * (1.0 - nominal) / static_cast<double>(trials));
    if (se == 0.0) return rate() == nominal ? 0.0 : INFINITY;
    return std::abs(rate() - nominal) / se;
  }
};

struct AugmentationReport {
  std::size_t image_trials = 0;
  std::size_t text_tokens = 0;
  RateEstimate flip, noise, jitter, gray;
  RateEstimate mask, replace, remove;  // fractions of all input tokens
};

/// Empirical per-operation application rates over `trials` seeded draws.
/// Text rates are measured over trials x 10 tokens.
inline AugmentationReport augmentation_stats(std::size_t trials, const VisualAugConfig& vcfg, const TextAugConfig& tcfg,
                                             std::uint64_t seed) {
  if (trials < 1000) throw ContractError("augmentation_stats needs at least 1000 trials");
  AugmentationReport rep;
  rep.image_trials = trials;
  VisualAugConfig small = vcfg;
  small.output_height = small.output_width = 8;
  const SceneImage probe = blank_image(8, 8, 0.5f);
  CaptionTokens caption;
  for (std::int32_t i = 0; i < 10; ++i) caption.push_back(tcfg.replace_low + i % 8);
  for (std::size_t i = 0; i < trials; ++i) {
    ImageAugTrace it;
    (void)augment_image(probe, small, derive_seed(seed, {i, 0}), &it);
    rep.flip.hits += it.flipped;
    rep.noise.hits += it.noised;
    rep.jitter.hits += it.jittered;
    rep.gray.hits += it.grayed;
    TextAugTrace tt;
    (void)augment_text(caption, tcfg, derive_seed(seed, {i, 1}), &tt);
    rep.mask.hits += tt.masked;
    rep.replace.hits += tt.replaced;
    rep.remove.hits += tt.deleted;
  }
  rep.flip.trials = rep.noise.trials = rep.jitter.trials = rep.gray.trials = trials;
  rep.text_tokens = trials * caption.size();
  rep.mask.trials = rep.replace.trials = rep.remove.trials = rep.text_tokens;
  return rep;
}

}  // namespace cookie
