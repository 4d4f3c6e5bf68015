#pragma once

// Split-level evaluation: embedding extraction, image-text retrieval,
// within-modal image retrieval, text similarity and token attention ranks.

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cookie/config.hpp"
#include "cookie/data.hpp"
#include "cookie/encoders.hpp"
#include "cookie/metrics.hpp"
#include "cookie/parallel.hpp"

namespace cookie {

/// Items passed through each encoder since process start.
inline std::atomic<std::uint64_t>& image_encoder_calls() {
  static std::atomic<std::uint64_t> n{0};
  return n;
}

inline std::atomic<std::uint64_t>& text_encoder_calls() {
  static std::atomic<std::uint64_t> n{0};
  return n;
}

/// [N, D] embeddings of `images`, encoded in chunks of `batch`.
template <class T>
Tensor<T> embed_images(const EncoderParams<T>& params, const std::vector<const SceneImage*>& images, Pooling pooling,
                       std::size_t batch = 64) {
  if (images.empty()) throw ContractError("embed_images: no images");
  const std::size_t D = params.config.model_dim;
  Tensor<T> out(Shape{images.size(), D});
  const std::size_t chunks = (images.size() + batch - 1) / batch;
  parallel_for(chunks, [&](std::size_t c) {
    const std::size_t lo = c * batch, hi = std::min(images.size(), lo + batch);
    std::vector<const SceneImage*> part(images.begin() + static_cast<std::ptrdiff_t>(lo),
                                        images.begin() + static_cast<std::ptrdiff_t>(hi));
    Tape<T> tape(false);
    Var<T> e = encode_images(tape, params, stack_images<T>(part), pooling);
    std::copy(e.value().data().begin(), e.value().data().end(), out.ptr() + lo * D);
  });
  image_encoder_calls().fetch_add(images.size(), std::memory_order_relaxed);
  return out;
}

template <class T>
Tensor<T> embed_captions(const EncoderParams<T>& params, const std::vector<const CaptionTokens*>& captions, Pooling pooling,
                         std::size_t batch = 64) {
  if (captions.empty()) throw ContractError("embed_captions: no captions");
  const std::size_t D = params.config.model_dim;
  Tensor<T> out(Shape{captions.size(), D});
  const std::size_t chunks = (captions.size() + batch - 1) / batch;
  parallel_for(chunks, [&](std::size_t c) {
    const std::size_t lo = c * batch, hi = std::min(captions.size(), lo + batch);
    std::vector<const CaptionTokens*> part(captions.begin() + static_cast<std::ptrdiff_t>(lo),
                                           captions.begin() + static_cast<std::ptrdiff_t>(hi));
    Tape<T> tape(false);
    Var<T> e = encode_texts(tape, params, pad_captions(part, params.config.max_tokens), pooling);
    std::copy(e.value().data().begin(), e.value().data().end(), out.ptr() + lo * D);
  });
  text_encoder_calls().fetch_add(captions.size(), std::memory_order_relaxed);
  return out;
}

/// Images of `ids` and all their captions, in id order; caption c belongs to
/// image caption_owner[c].
struct SplitItems {
  std::vector<std::uint64_t> ids;
  std::vector<const SceneImage*> images;
  std::vector<const CaptionTokens*> captions;
  std::vector<std::size_t> caption_owner;
};

inline SplitItems gather_items(const Corpus& corpus, const std::vector<std::uint64_t>& ids) {
  SplitItems s;
  s.ids = ids;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const Sample& smp = corpus.at(ids[i]);
    s.images.push_back(&smp.image);
    for (const auto& c : smp.captions) {
      s.captions.push_back(&c);
      s.caption_owner.push_back(i);
    }
  }
  return s;
}

struct ItmResult {
  std::array<double, 6> recalls{};  // r1, r5, r10 image-to-text, then text-to-image
  double rsum = 0.0;
  std::vector<std::size_t> i2t_ranks;  // best rank of a matching caption per image
  std::vector<std::size_t> t2i_ranks;  // rank of the owning image per caption
};

/// Image-text matching from precomputed embeddings.
template <class T>
ItmResult itm_metrics(const Tensor<T>& image_emb, const Tensor<T>& caption_emb, const std::vector<std::size_t>& caption_owner) {
  const std::size_t n = image_emb.dim(0), m = caption_emb.dim(0);
  if (caption_owner.size() != m) throw ContractError("itm_metrics: one owner per caption required");
  Relevance i2t(n), t2i(m);
  for (std::size_t c = 0; c < m; ++c) {
    i2t[caption_owner[c]].push_back(c);
    t2i[c].push_back(caption_owner[c]);
  }
  const Tensor<double> s_i2t = similarity_matrix(image_emb, caption_emb);
  const Tensor<double> s_t2i = similarity_matrix(caption_emb, image_emb);
  ItmResult r;
  r.i2t_ranks = best_relevant_ranks(s_i2t, i2t);
  r.t2i_ranks = best_relevant_ranks(s_t2i, t2i);
  const std::size_t ks[3] = {1, 5, 10};
  for (int i = 0; i < 3; ++i) {
    if (ks[i] > m || ks[i] > n) throw ContractError("itm_metrics: gallery smaller than K=" + std::to_string(ks[i]));
    r.recalls[i] = recall_from_ranks(r.i2t_ranks, ks[i]);
    r.recalls[3 + i] = recall_from_ranks(r.t2i_ranks, ks[i]);
  }
  r.rsum = rsum(r.recalls);
  return r;
}

struct WithinModalResult {
  double map = 0.0;
  std::size_t k = 0;
  std::size_t queries = 0;
};

/// Image-to-image retrieval: each image queries all other images; relevant
/// images share a colored shape with the query.
template <class T>
WithinModalResult image_map(const Tensor<T>& image_emb, const std::vector<const SceneSpec*>& specs, std::size_t k) {
  const std::size_t n = image_emb.dim(0);
  if (specs.size() != n) throw ContractError("image_map: one spec per image required");
  if (n < 2) throw ContractError("image_map: needs at least two images");
  Tensor<double> full = similarity_matrix(image_emb, image_emb);
  std::vector<std::size_t> queries;
  Relevance rel;
  for (std::size_t q = 0; q < n; ++q) {
    std::vector<std::size_t> r;
    for (std::size_t g = 0; g < n; ++g)
      if (g != q && shares_object(*specs[q], *specs[g])) r.push_back(g);
    if (!r.empty()) {
      queries.push_back(q);
      rel.push_back(std::move(r));
    }
  }
  if (queries.empty()) throw ContractError("image_map: no query has a relevant image");
  Tensor<double> s(Shape{queries.size(), n});
  for (std::size_t i = 0; i < queries.size(); ++i) {
    for (std::size_t g = 0; g < n; ++g) s.at(i, g) = full.at(queries[i], g);
    s.at(i, queries[i]) = -std::numeric_limits<double>::infinity();  // the query itself never counts
  }
  WithinModalResult out;
  out.k = std::min(k, n - 1);
  out.queries = queries.size();
  out.map = map_at_k(s, rel, out.k);
  return out;
}

/// Cosine similarity of caption embeddings against graded pair labels.
template <class T>
StsScores text_similarity(const EncoderParams<T>& params, const Corpus& corpus, const std::vector<StsPair>& pairs,
                          Pooling pooling, std::size_t batch = 64) {
  std::vector<const CaptionTokens*> a, b;
  std::vector<double> labels;
  for (const auto& p : pairs) {
    a.push_back(&corpus.at(p.a_id).captions[p.a_caption]);
    b.push_back(&corpus.at(p.b_id).captions[p.b_caption]);
    labels.push_back(p.label);
  }
  const Tensor<T> ea = embed_captions(params, a, pooling, batch);
  const Tensor<T> eb = embed_captions(params, b, pooling, batch);
  const std::size_t D = ea.dim(1);
  std::vector<double> pred(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t d = 0; d < D; ++d) {
      const double x = ea.at(i, d), y = eb.at(i, d);
      dot += x * y;
      na += x * x;
      nb += y * y;
    }
    pred[i] = dot / std::sqrt(na * nb);
  }
  return sts_scores(pred, labels);
}

struct RetrievalReport {
  ItmResult itm;
  WithinModalResult within;
  StsScores sts;
  std::size_t images = 0;
  std::size_t captions = 0;
  std::uint64_t image_encoder_items = 0;
  std::uint64_t text_encoder_items = 0;

  /// The documented report fields, nothing else.
  nlohmann::json summary() const {
    return {{"r1_i2t", itm.recalls[0]}, {"r5_i2t", itm.recalls[1]},  {"r10_i2t", itm.recalls[2]},
            {"r1_t2i", itm.recalls[3]}, {"r5_t2i", itm.recalls[4]},  {"r10_t2i", itm.recalls[5]},
            {"rsum", itm.rsum},         {"map_at_k", within.map},    {"sts_pearson", sts.pearson},
            {"sts_spearman", sts.spearman}, {"sts_mean", sts.mean}};
  }

  /// Per-query ranks and bookkeeping.
  nlohmann::json details() const {
    return {{"images", images},
            {"captions", captions},
            {"random_r1_i2t", 100.0 * 5.0 / static_cast<double>(captions)},
            {"random_r1_t2i", 100.0 / static_cast<double>(images)},
            {"map_k", within.k},
            {"map_queries", within.queries},
            {"image_encoder_items", image_encoder_items},
            {"text_encoder_items", text_encoder_items},
            {"i2t_ranks", itm.i2t_ranks},
            {"t2i_ranks", itm.t2i_ranks}};
  }
};

/// Full evaluation of `params` on the samples `ids`. Every image and caption of
/// the retrieval task goes through its encoder exactly once.
template <class T>
RetrievalReport eval_retrieval(const EncoderParams<T>& params, const Corpus& corpus, const std::vector<std::uint64_t>& ids,
                               const EvalConfig& cfg, std::uint64_t seed) {
  if (ids.size() < 10) throw DataError("evaluation needs at least 10 images, split has " + std::to_string(ids.size()));
  RetrievalReport rep;
  const SplitItems items = gather_items(corpus, ids);
  rep.images = items.images.size();
  rep.captions = items.captions.size();
  const auto i0 = image_encoder_calls().load(), t0 = text_encoder_calls().load();
  const Tensor<T> img = embed_images(params, items.images, cfg.itm_pooling, cfg.batch);
  const Tensor<T> cap = embed_captions(params, items.captions, cfg.itm_pooling, cfg.batch);
  rep.image_encoder_items = image_encoder_calls().load() - i0;
  rep.text_encoder_items = text_encoder_calls().load() - t0;
  rep.itm = itm_metrics(img, cap, items.caption_owner);

  const Tensor<T> img_w = cfg.within_pooling == cfg.itm_pooling ? img : embed_images(params, items.images, cfg.within_pooling, cfg.batch);
  std::vector<const SceneSpec*> specs;
  for (auto id : ids) specs.push_back(&corpus.at(id).spec);
  rep.within = image_map(img_w, specs, cfg.map_k);

  const auto pairs = make_sts_pairs(corpus, ids, cfg.sts_pairs, derive_seed(seed, {static_cast<std::uint64_t>(SeedStream::sts)}));
  rep.sts = text_similarity(params, corpus, pairs, cfg.within_pooling, cfg.batch);
  return rep;
}

// ---------------------------------------------------------------------------
// Attention ranking over WS-TE outputs

struct AttentionSample {
  std::uint64_t id = 0;
  AttentionRanking ranking;
  /// Fraction of (object token, background token) pairs where the object
  /// token ranks higher; image samples only.
  double object_auc = 0.0;
};

/// Patch labels "r<row>c<col>" and whether each patch overlaps an object cell.
inline std::vector<std::pair<std::string, bool>> patch_labels(const EncoderConfig& enc, const GeneratorConfig& gen,
                                                              const SceneSpec& spec) {
  const std::size_t p = enc.patches_per_side();
  const double patch_px = static_cast<double>(enc.patch);
  const double cell_px = static_cast<double>(gen.image_size) / static_cast<double>(gen.grid);
  std::vector<std::pair<std::string, bool>> out;
  for (std::size_t r = 0; r < p; ++r) {
    for (std::size_t c = 0; c < p; ++c) {
      bool hit = false;
      for (const auto& o : spec.objects) {
        const double y0 = o.row * cell_px, x0 = o.col * cell_px;
        const bool oy = r * patch_px < y0 + cell_px && y0 < (r + 1) * patch_px;
        const bool ox = c * patch_px < x0 + cell_px && x0 < (c + 1) * patch_px;
        hit = hit || (oy && ox);
      }
      out.emplace_back("r" + std::to_string(r) + "c" + std::to_string(c), hit);
    }
  }
  return out;
}

template <class T>
std::vector<AttentionSample> image_attention(const EncoderParams<T>& params, const Corpus& corpus,
                                             const std::vector<std::uint64_t>& ids, Pooling pooling) {
  std::vector<AttentionSample> out(ids.size());
  parallel_for(ids.size(), [&](std::size_t i) {
    const Sample& s = corpus.at(ids[i]);
    Tape<T> tape(false);
    auto enc = encode_image_tokens(tape, params, stack_images<T>({&s.image}), pooling);
    const std::size_t k = enc.tokens.dim(1), D = enc.tokens.dim(2);
    const auto labels = patch_labels(params.config, corpus.config, s.spec);
    std::vector<std::string> names;
    for (const auto& l : labels) names.push_back(l.first);
    AttentionSample a;
    a.id = s.id;
    a.ranking = attention_rank(enc.tokens.value().reshaped(Shape{k, D}), enc.pooled.value().reshaped(Shape{D}), names);
    std::vector<std::size_t> obj, bg;
    for (const auto& e : a.ranking.entries) (labels[e.token].second ? obj : bg).push_back(e.rank);
    std::size_t wins = 0;
    for (auto ro : obj)
      for (auto rb : bg) wins += ro < rb;
    a.object_auc = obj.empty() || bg.empty() ? 0.5 : static_cast<double>(wins) / static_cast<double>(obj.size() * bg.size());
    out[i] = std::move(a);
  });
  return out;
}

template <class T>
std::vector<AttentionSample> text_attention(const EncoderParams<T>& params, const Corpus& corpus,
                                            const std::vector<std::uint64_t>& ids, Pooling pooling) {
  std::vector<AttentionSample> out(ids.size());
  parallel_for(ids.size(), [&](std::size_t i) {
    const Sample& s = corpus.at(ids[i]);
    const CaptionTokens& cap = s.captions.front();
    Tape<T> tape(false);
    TokenBatch tb = pad_captions({&cap}, params.config.max_tokens);
    auto enc = encode_text_tokens(tape, params, tb, pooling);
    const std::size_t k = enc.tokens.dim(1), D = enc.tokens.dim(2);
    std::vector<std::string> names(k, corpus.vocab.word(Vocabulary::pad));
    for (std::size_t t = 0; t < cap.size(); ++t) names[t] = corpus.vocab.word(cap[t]);
    AttentionSample a;
    a.id = s.id;
    a.ranking = attention_rank(enc.tokens.value().reshaped(Shape{k, D}), enc.pooled.value().reshaped(Shape{D}), names, tb.mask);
    out[i] = std::move(a);
  });
  return out;
}

/// CSV with columns sample_id,token_index,token_label,score,rank.
inline void write_attention_csv(const std::filesystem::path& path, const std::vector<AttentionSample>& samples) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "sample_id,token_index,token_label,score,rank\n";
  out.precision(9);
  for (const auto& s : samples) {
    for (const auto& e : s.ranking.entries) out << s.id << ',' << e.token << ',' << e.label << ',' << e.score << ',' << e.rank << '\n';
  }
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

}  // namespace cookie
