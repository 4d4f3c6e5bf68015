#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cookie/error.hpp"
#include "cookie/ops.hpp"
#include "cookie/tensor.hpp"

namespace cookie {

/// H x W x 3 float image with channel values in [0, 1].
using SceneImage = Tensor<float>;

/// Unpadded caption token ids.
using CaptionTokens = std::vector<std::int32_t>;

inline constexpr std::int32_t kPadToken = 0;

inline SceneImage blank_image(std::size_t height, std::size_t width, float fill = 0.0f) {
  return SceneImage(Shape{height, width, 3}, fill);
}

inline float& pixel(SceneImage& img, std::size_t y, std::size_t x, std::size_t c) {
  return img[(y * img.dim(1) + x) * 3 + c];
}

inline float pixel(const SceneImage& img, std::size_t y, std::size_t x, std::size_t c) {
  return img[(y * img.dim(1) + x) * 3 + c];
}

/// Stacks same-sized images into a [B, H, W, 3] tensor of the requested precision.
template <class T>
Tensor<T> stack_images(const std::vector<const SceneImage*>& images) {
  if (images.empty()) throw ContractError("stack_images: empty batch");
  const Shape& s = images.front()->shape();
  if (s.size() != 3 || s[2] != 3) throw DimensionError("images must be [H,W,3], got " + to_string(s));
  Tensor<T> out(Shape{images.size(), s[0], s[1], s[2]});
  const std::size_t per = numel(s);
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->shape() != s) throw DimensionError("stack_images: mixed image shapes in one batch");
    const float* src = images[i]->ptr();
    T* dst = out.ptr() + i * per;
    for (std::size_t j = 0; j < per; ++j) dst[j] = static_cast<T>(src[j]);
  }
  return out;
}

/// Fixed-length token batch: ids padded with kPadToken to `max_tokens`.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t max_tokens = 0;
  std::vector<std::int32_t> ids;
  Mask mask;
};

inline TokenBatch pad_captions(const std::vector<const CaptionTokens*>& captions, std::size_t max_tokens) {
  if (captions.empty()) throw ContractError("pad_captions: empty batch");
  TokenBatch tb;
  tb.batch = captions.size();
  tb.max_tokens = max_tokens;
  tb.ids.assign(tb.batch * max_tokens, kPadToken);
  tb.mask.assign(tb.batch * max_tokens, 0);
  for (std::size_t b = 0; b < captions.size(); ++b) {
    const CaptionTokens& c = *captions[b];
    if (c.empty()) throw ContractError("pad_captions: empty caption at batch position " + std::to_string(b));
    if (c.size() > max_tokens) {
      throw DataError("caption of length " + std::to_string(c.size()) + " exceeds max tokens " + std::to_string(max_tokens));
    }
    for (std::size_t i = 0; i < c.size(); ++i) {
      tb.ids[b * max_tokens + i] = c[i];
      tb.mask[b * max_tokens + i] = 1;
    }
  }
  return tb;
}

}  // namespace cookie
