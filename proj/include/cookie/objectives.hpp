#pragma once

// Contrastive and matching objectives. Every loss is built on a tape and is
// differentiable end to end.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cookie/augment.hpp"
#include "cookie/autograd.hpp"
#include "cookie/encoders.hpp"
#include "cookie/error.hpp"
#include "cookie/ops.hpp"
#include "cookie/random.hpp"

namespace cookie {

/// Cosine similarity matrix of the rows of a [N, D] and b [M, D].
template <class T>
Var<T> cosine_scores(Var<T> a, Var<T> b) {
  return matmul(l2_normalize(a), l2_normalize(b), /*transpose_b=*/true);
}

/// InfoNCE with in-batch negatives: row i of `queries` matches row i of
/// `keys`, all other keys are negatives. Embeddings are L2-normalized so the
/// logits are cosine similarities divided by tau.
template <class T>
Var<T> info_nce(Var<T> queries, Var<T> keys, T tau) {
  if (queries.shape().size() != 2 || queries.shape() != keys.shape()) {
    throw ContractError("info_nce: queries " + to_string(queries.shape()) + " and keys " + to_string(keys.shape()) +
                        " must be equal-shaped [N,D]");
  }
  if (queries.dim(0) < 2) throw ContractError("info_nce: batch size must be at least 2");
  if (!(tau > T{0})) throw ContractError("info_nce: temperature must be positive");
  Var<T> logits = scale(cosine_scores(queries, keys), T(1) / tau);
  return scale(mean(diagonal(log_softmax(logits))), T(-1));
}

template <class T>
struct CrossModalLoss {
  Var<T> i2t;
  Var<T> t2i;
  Var<T> total;
};

/// L_i2t = InfoNCE(I, T), L_t2i = InfoNCE(T, I) and their sum.
template <class T>
CrossModalLoss<T> cross_modal_loss(Var<T> images, Var<T> texts, T tau) {
  if (images.shape().size() != 2 || texts.shape().size() != 2 || images.dim(0) != texts.dim(0)) {
    throw ContractError("cross_modal_loss: row counts differ (" + to_string(images.shape()) + " vs " +
                        to_string(texts.shape()) + ")");
  }
  Var<T> i2t = info_nce(images, texts, tau);
  Var<T> t2i = info_nce(texts, images, tau);
  return {i2t, t2i, add(i2t, t2i)};
}

/// Index of the largest entry of row/column `i` excluding the diagonal; ties
/// resolve to the lowest index.
template <class T>
std::size_t hardest_negative(const Tensor<T>& scores, std::size_t i, bool along_row) {
  const std::size_t n = scores.dim(0);
  std::size_t best = n;
  T best_v{0};
  for (std::size_t j = 0; j < n; ++j) {
    if (j == i) continue;
    const T v = along_row ? scores.at(i, j) : scores.at(j, i);
    if (best == n || v > best_v) {
      best = j;
      best_v = v;
    }
  }
  return best;
}

/// Hinged hard-triplet loss from a precomputed similarity matrix where
/// scores[i][j] = S(I_i, T_j). Mean over anchors of
/// [alpha + S(I', T) - S(I, T)]+ + [alpha + S(I, T') - S(I, T)]+.
template <class T>
Var<T> hard_triplet_from_scores(Var<T> scores, T alpha) {
  const Shape& s = scores.shape();
  if (s.size() != 2 || s[0] != s[1]) throw ContractError("hard_triplet_loss: scores must be square, got " + to_string(s));
  if (s[0] < 2) throw ContractError("hard_triplet_loss: batch size must be at least 2");
  if (!(alpha >= T{0})) throw ContractError("hard_triplet_loss: margin must be non-negative");
  const std::size_t n = s[0];
  std::vector<std::size_t> ids(n), neg_text(n), neg_image(n);
  for (std::size_t i = 0; i < n; ++i) {
    ids[i] = i;
    neg_text[i] = hardest_negative(scores.value(), i, /*along_row=*/true);
    neg_image[i] = hardest_negative(scores.value(), i, /*along_row=*/false);
  }
  Var<T> pos = diagonal(scores);
  Var<T> hard_t = gather_elements(scores, ids, neg_text);   // S(I_i, T')
  Var<T> hard_i = gather_elements(scores, neg_image, ids);  // S(I', T_i)
  Var<T> li = relu(add_scalar(sub(hard_i, pos), alpha));
  Var<T> lt = relu(add_scalar(sub(hard_t, pos), alpha));
  return mean(add(li, lt));
}

template <class T>
Var<T> hard_triplet_loss(Var<T> images, Var<T> texts, T alpha) {
  if (images.shape().size() != 2 || images.shape() != texts.shape()) {
    throw ContractError("hard_triplet_loss: embeddings must be equal-shaped [N,D]");
  }
  return hard_triplet_from_scores(cosine_scores(images, texts), alpha);
}

// ---------------------------------------------------------------------------
// Single-modal contrastive views

/// Seed of augmented view `view` (0 or 1) of sample `sample_id`.
inline std::uint64_t view_seed(std::uint64_t seed, std::uint64_t sample_id, std::uint64_t view) {
  return derive_seed(seed, {sample_id, view});
}

/// L_i: InfoNCE between two independently augmented views of each image.
template <class T>
Var<T> visual_contrastive_loss(Tape<T>& tape, const EncoderParams<T>& params, const std::vector<const SceneImage*>& images,
                               const std::vector<std::uint64_t>& sample_ids, const VisualAugConfig& aug, std::uint64_t seed,
                               T tau, Pooling pooling, const ForwardContext& ctx = {}) {
  if (images.size() < 2) throw ContractError("visual_contrastive_loss: batch size must be at least 2");
  if (sample_ids.size() != images.size()) throw ContractError("visual_contrastive_loss: one sample id per image required");
  std::vector<SceneImage> v1, v2;
  v1.reserve(images.size());
  v2.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    v1.push_back(augment_image(*images[i], aug, view_seed(seed, sample_ids[i], 0)));
    v2.push_back(augment_image(*images[i], aug, view_seed(seed, sample_ids[i], 1)));
  }
  std::vector<const SceneImage*> p1, p2;
  for (std::size_t i = 0; i < images.size(); ++i) {
    p1.push_back(&v1[i]);
    p2.push_back(&v2[i]);
  }
  Var<T> e1 = encode_images(tape, params, stack_images<T>(p1), pooling, ctx);
  Var<T> e2 = encode_images(tape, params, stack_images<T>(p2), pooling, ctx);
  return info_nce(e1, e2, tau);
}

/// L_t: InfoNCE between two independently augmented views of each caption.
template <class T>
Var<T> textual_contrastive_loss(Tape<T>& tape, const EncoderParams<T>& params,
                                const std::vector<const CaptionTokens*>& captions,
                                const std::vector<std::uint64_t>& sample_ids, const TextAugConfig& aug,
                                std::uint64_t seed, T tau, Pooling pooling, const ForwardContext& ctx = {}) {
  if (captions.size() < 2) throw ContractError("textual_contrastive_loss: batch size must be at least 2");
  if (sample_ids.size() != captions.size()) throw ContractError("textual_contrastive_loss: one sample id per caption required");
  std::vector<CaptionTokens> v1, v2;
  for (std::size_t i = 0; i < captions.size(); ++i) {
    v1.push_back(augment_text(*captions[i], aug, view_seed(seed, sample_ids[i], 2)));
    v2.push_back(augment_text(*captions[i], aug, view_seed(seed, sample_ids[i], 3)));
  }
  std::vector<const CaptionTokens*> p1, p2;
  for (std::size_t i = 0; i < captions.size(); ++i) {
    p1.push_back(&v1[i]);
    p2.push_back(&v2[i]);
  }
  const std::size_t m = params.config.max_tokens;
  Var<T> e1 = encode_texts(tape, params, pad_captions(p1, m), pooling, ctx);
  Var<T> e2 = encode_texts(tape, params, pad_captions(p2, m), pooling, ctx);
  return info_nce(e1, e2, tau);
}

// ---------------------------------------------------------------------------
// Combined pre-training objective

/// One aligned mini-batch: image i is described by caption i.
struct PairBatch {
  std::vector<const SceneImage*> images;
  std::vector<const CaptionTokens*> captions;
  std::vector<std::uint64_t> sample_ids;

  std::size_t size() const { return images.size(); }
};

struct PretrainSettings {
  double tau = 0.07;
  Pooling pooling = Pooling::max;
  VisualAugConfig visual_aug;
  TextAugConfig text_aug;
};

template <class T>
struct PretrainLoss {
  Var<T> total;
  Var<T> i2t;
  Var<T> t2i;
  // present only in stage 2
  std::optional<Var<T>> image_cl;
  std::optional<Var<T>> text_cl;
};

/// Stage 1: L_i2t + L_t2i. Stage 2: L_i2t + L_t2i + L_i + L_t with unit weights.
/// `single_modal` supplies the batch for L_i / L_t; defaults to `batch`.
template <class T>
PretrainLoss<T> pretrain_loss(Tape<T>& tape, const EncoderParams<T>& params, const PairBatch& batch, int stage,
                              const PretrainSettings& settings, std::uint64_t aug_seed, const ForwardContext& ctx = {},
                              const PairBatch* single_modal = nullptr) {
  if (stage != 1 && stage != 2) throw ContractError("pretrain_loss: stage must be 1 or 2, got " + std::to_string(stage));
  if (batch.captions.size() != batch.size() || batch.sample_ids.size() != batch.size()) {
    throw ContractError("pretrain_loss: batch fields differ in length");
  }
  const T tau = static_cast<T>(settings.tau);
  Var<T> img = encode_images(tape, params, stack_images<T>(batch.images), settings.pooling, ctx);
  Var<T> txt = encode_texts(tape, params, pad_captions(batch.captions, params.config.max_tokens), settings.pooling, ctx);
  CrossModalLoss<T> ccl = cross_modal_loss(img, txt, tau);
  PretrainLoss<T> out{ccl.total, ccl.i2t, ccl.t2i, std::nullopt, std::nullopt};
  if (stage == 2) {
    const PairBatch& sm = single_modal ? *single_modal : batch;
    Var<T> li = visual_contrastive_loss(tape, params, sm.images, sm.sample_ids, settings.visual_aug, aug_seed, tau,
                                        settings.pooling, ctx);
    Var<T> lt = textual_contrastive_loss(tape, params, sm.captions, sm.sample_ids, settings.text_aug, aug_seed, tau,
                                         settings.pooling, ctx);
    out.image_cl = li;
    out.text_cl = lt;
    out.total = add(add(ccl.total, li), lt);
  }
  return out;
}

}  // namespace cookie
