#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "cookie/eval.hpp"
#include "oracles.hpp"

using namespace cookie;

namespace {

Tensor<double> to_tensor(const oracle::Mat& m) {
  Tensor<double> t(Shape{m.size(), m[0].size()});
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m[0].size(); ++j) t.at(i, j) = m[i][j];
  return t;
}

// Scores drawn from a small grid so that ties are common.
oracle::Mat tied_scores(std::size_t q, std::size_t g, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> level(0, 20);
  oracle::Mat m(q, oracle::Vec(g));
  for (auto& row : m)
    for (auto& x : row) x = level(rng) / 20.0;
  return m;
}

std::vector<std::set<std::size_t>> random_relevance(std::size_t q, std::size_t g, std::size_t max_rel, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, g - 1), count(1, max_rel);
  std::vector<std::set<std::size_t>> rel(q);
  for (auto& r : rel) {
    const std::size_t n = count(rng);
    while (r.size() < n) r.insert(pick(rng));
  }
  return rel;
}

Relevance as_lists(const std::vector<std::set<std::size_t>>& rel) {
  Relevance out;
  for (const auto& r : rel) out.emplace_back(r.begin(), r.end());
  return out;
}

EncoderConfig small_encoder() {
  EncoderConfig c;
  c.visual_dim = 16;
  c.text_dim = 16;
  c.model_dim = 16;
  c.heads = 2;
  c.ffn_dim = 16;
  return c;
}

const Corpus& shared_corpus() {
  static const Corpus c = generate_corpus(150, 11, GeneratorConfig{});
  return c;
}

}  // namespace

TEST(SimilarityMatrix, TrivialCases) {
  Tensor<double> q(Shape{2, 2}, {1, 0, 0, 3});
  Tensor<double> g(Shape{2, 2}, {0, 2, 5, 0});
  const auto s = similarity_matrix(q, g);
  EXPECT_DOUBLE_EQ(s.at(0, 1), 1.0);
  EXPECT_DOUBLE_EQ(s.at(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(s.at(1, 0), 1.0);
}

TEST(SimilarityMatrix, MatchesPairwiseCosine) {
  std::mt19937_64 rng(1);
  const auto a = oracle::random_matrix(20, 7, rng), b = oracle::random_matrix(50, 7, rng);
  const auto s = similarity_matrix(to_tensor(a), to_tensor(b));
  for (std::size_t i = 0; i < 20; ++i)
    for (std::size_t j = 0; j < 50; ++j) EXPECT_NEAR(s.at(i, j), oracle::cosine(a[i], b[j]), 1e-6);
}

TEST(SimilarityMatrix, ZeroVectorIsContractError) {
  Tensor<double> q(Shape{1, 2}, {0, 0});
  Tensor<double> g(Shape{1, 2}, {1, 0});
  EXPECT_THROW(similarity_matrix(q, g), ContractError);
  EXPECT_THROW(similarity_matrix(g, q), ContractError);
}

TEST(Recall, MatchesBruteForceOnRandomInstances) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 120; ++trial) {
    const std::size_t q = 1 + trial % 50, g = 5 * q;  // up to 50 x 250, 1:5 relevance
    const auto m = trial % 2 ? tied_scores(q, g, rng) : oracle::random_matrix(q, g, rng);
    std::vector<std::set<std::size_t>> rel(q);
    for (std::size_t i = 0; i < q; ++i)
      for (std::size_t j = 0; j < 5; ++j) rel[i].insert(5 * i + j);
    const auto t = to_tensor(m);
    const auto ranks = best_relevant_ranks(t, as_lists(rel));
    for (std::size_t i = 0; i < q; ++i) {
      std::size_t best = g + 1;
      for (auto j : rel[i]) best = std::min(best, oracle::rank_of(m[i], j));
      ASSERT_EQ(ranks[i], best);
    }
    for (std::size_t k : {1, 5, 10}) {
      if (k > g) continue;
      ASSERT_EQ(recall_at_k(t, as_lists(rel), k), oracle::recall_at_k(m, rel, k));
    }
  }
}

TEST(Recall, UniqueMaxGivesFullRecallAndIsMonotone) {
  std::mt19937_64 rng(3);
  auto m = oracle::random_matrix(10, 30, rng);
  std::vector<std::set<std::size_t>> rel(10);
  for (std::size_t i = 0; i < 10; ++i) {
    m[i][3 * i] = 5.0;
    rel[i] = {3 * i};
  }
  EXPECT_DOUBLE_EQ(recall_at_k(to_tensor(m), as_lists(rel), 1), 100.0);
  const auto other = to_tensor(oracle::random_matrix(10, 30, rng));
  double prev = 0;
  for (std::size_t k = 1; k <= 30; ++k) {
    const double r = recall_at_k(other, as_lists(rel), k);
    EXPECT_GE(r, prev);
    EXPECT_LE(r, 100.0);
    prev = r;
  }
}

TEST(Recall, TiesGoToLowerIndex) {
  Tensor<double> s(Shape{1, 3}, {0.5, 0.5, 0.5});
  EXPECT_EQ(rank_in_row(s, 0, 0), 1u);
  EXPECT_EQ(rank_in_row(s, 0, 2), 3u);
}

TEST(Recall, InvalidArgumentsAreContractErrors) {
  Tensor<double> s(Shape{1, 3}, {0.1, 0.2, 0.3});
  EXPECT_THROW(recall_at_k(s, {{0}}, 4), ContractError);
  EXPECT_THROW(recall_at_k(s, {{0}}, 0), ContractError);
  EXPECT_THROW(recall_at_k(s, {{}}, 1), ContractError);
}

TEST(Rsum, ReportedRowAndBounds) {
  EXPECT_NEAR(rsum({87.3, 98.1, 99.6, 73.5, 94.0, 97.5}), 550.0, 1e-9);
  EXPECT_EQ(rsum({0, 0, 0, 0, 0, 0}), 0.0);
  EXPECT_EQ(rsum({100, 100, 100, 100, 100, 100}), 600.0);
  EXPECT_THROW(rsum({100.5, 0, 0, 0, 0, 0}), ContractError);
  EXPECT_THROW(rsum({-1, 0, 0, 0, 0, 0}), ContractError);
}

TEST(MapAtK, ClosedForms) {
  Tensor<double> s(Shape{1, 6}, {0.9, 0.8, 0.1, 0.2, 0.3, 0.0});
  EXPECT_DOUBLE_EQ(map_at_k(s, {{0, 1}}, 5), 1.0);
  EXPECT_DOUBLE_EQ(map_at_k(s, {{1}}, 5), 0.5);
  EXPECT_THROW(map_at_k(s, {{1}}, 7), ContractError);
  EXPECT_THROW(map_at_k(s, {{1}}, 0), ContractError);
}

TEST(MapAtK, MatchesDefinitionOnRandomInstances) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 150; ++trial) {
    const std::size_t q = 1 + trial % 30, g = 20 + (trial * 7) % 181;  // up to 30 x 200
    const auto m = trial % 3 == 0 ? tied_scores(q, g, rng) : oracle::random_matrix(q, g, rng);
    const auto rel = random_relevance(q, g, 12, rng);
    for (std::size_t k : {1, 5, 10, 50}) {
      if (k > g) continue;
      ASSERT_NEAR(map_at_k(to_tensor(m), as_lists(rel), k), oracle::map_at_k(m, rel, k), 1e-12);
    }
  }
}

TEST(MapAtK, ImprovesWhenRelevantItemMovesUp) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    auto m = oracle::random_matrix(1, 20, rng);
    std::vector<std::size_t> order(20);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return m[0][a] > m[0][b]; });
    // Relevant item at rank r+1 directly behind an irrelevant one at rank r.
    const std::size_t r = 1 + trial % 8;
    std::set<std::size_t> rel{order[r]};
    if (trial % 2) rel.insert(order[r + 3]);
    const double before = map_at_k(to_tensor(m), as_lists({rel}), 10);
    std::swap(m[0][order[r]], m[0][order[r - 1]]);
    const double after = map_at_k(to_tensor(m), as_lists({rel}), 10);
    EXPECT_GT(after, before);
    EXPECT_GE(before, 0.0);
    EXPECT_LE(after, 1.0);
  }
}

TEST(Correlation, MatchesOraclesOnRandomInstances) {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int> grade(0, 5);
  std::normal_distribution<double> noise(0, 1);
  for (int trial = 0; trial < 150; ++trial) {
    const std::size_t n = 3 + trial % 248;
    oracle::Vec x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = grade(rng);
      x[i] = trial % 2 ? std::round(y[i] + noise(rng)) : y[i] + noise(rng);
    }
    if (std::all_of(y.begin(), y.end(), [&](double v) { return v == y[0]; })) y[0] = y[0] == 0 ? 1 : 0;
    if (std::all_of(x.begin(), x.end(), [&](double v) { return v == x[0]; })) x[0] += 1;
    ASSERT_NEAR(pearson(x, y), oracle::pearson(x, y), 1e-12);
    ASSERT_NEAR(spearman(x, y), oracle::spearman(x, y), 1e-12);
    const auto ranks = average_ranks(x), expect = oracle::average_ranks(x);
    for (std::size_t i = 0; i < n; ++i) ASSERT_EQ(ranks[i], expect[i]);
  }
}

TEST(Correlation, StsExamples) {
  const std::vector<double> labels{0, 1, 2.5, 3, 4, 5, 1};
  auto same = sts_scores(labels, labels);
  EXPECT_NEAR(same.pearson, 1.0, 1e-12);
  EXPECT_NEAR(same.spearman, 1.0, 1e-12);
  EXPECT_NEAR(same.mean, 1.0, 1e-12);
  std::vector<double> affine, cubed;
  for (double l : labels) {
    affine.push_back(2 * l + 3);
    cubed.push_back(l * l * l);
  }
  auto a = sts_scores(affine, labels);
  EXPECT_NEAR(a.pearson, 1.0, 1e-12);
  EXPECT_NEAR(a.spearman, 1.0, 1e-12);
  auto c = sts_scores(cubed, labels);
  EXPECT_NEAR(c.spearman, 1.0, 1e-12);
  EXPECT_LT(c.pearson, 1.0 - 1e-6);
}

TEST(Correlation, ErrorCases) {
  EXPECT_THROW(pearson({1, 1, 1}, {1, 2, 3}), NumericError);
  EXPECT_THROW(pearson({1, 2}, {1, 2}), ContractError);
  EXPECT_THROW(sts_scores({1, 2, 3}, {1, 2, 6}), ContractError);
}

TEST(AttentionRank, SingleTokenUnderMaxPooling) {
  Tensor<double> tok(Shape{1, 3}, {0.2, -1, 4});
  const auto r = attention_rank(tok, tok.reshaped(Shape{3}), {"only"});
  ASSERT_EQ(r.entries.size(), 1u);
  EXPECT_NEAR(r.entries[0].score, 1.0, 1e-12);
  EXPECT_EQ(r.entries[0].rank, 1u);
  EXPECT_TRUE(r.entries[0].top5);
}

TEST(AttentionRank, OrderingMaskAndZeroTokens) {
  std::mt19937_64 rng(7);
  const auto m = oracle::random_matrix(8, 5, rng);
  Tensor<double> tok = to_tensor(m);
  for (std::size_t d = 0; d < 5; ++d) tok.at(6, d) = 0.0;
  Tensor<double> pooled(Shape{5}, {1, 0.5, -0.2, 0.3, 0.1});
  std::vector<std::string> labels{"a", "b", "c", "d", "e", "f", "g", "h"};
  Mask mask{1, 1, 1, 1, 1, 1, 1, 0};
  const auto r = attention_rank(tok, pooled, labels, mask);
  ASSERT_EQ(r.entries.size(), 6u);
  ASSERT_EQ(r.warnings.size(), 1u);
  for (std::size_t i = 0; i < r.entries.size(); ++i) {
    EXPECT_EQ(r.entries[i].rank, i + 1);
    EXPECT_EQ(r.entries[i].top5, i < 5);
    EXPECT_GE(r.entries[i].score, -1.0);
    EXPECT_LE(r.entries[i].score, 1.0);
    EXPECT_NEAR(r.entries[i].score, oracle::cosine(m[r.entries[i].token], {1, 0.5, -0.2, 0.3, 0.1}), 1e-12);
    if (i > 0) EXPECT_GE(r.entries[i - 1].score, r.entries[i].score);
  }
  EXPECT_THROW(attention_rank(tok, pooled, labels, Mask(8, 0)), ContractError);
}

TEST(EvalRetrieval, ReportSchemaAndSingleEncoding) {
  const Corpus& c = shared_corpus();
  const auto params = EncoderParams<float>::init(small_encoder(), 3);
  const auto ids = split_ids(c, Split::train);
  EvalConfig cfg;
  cfg.sts_pairs = 60;
  const auto rep = eval_retrieval(params, c, ids, cfg, 1);
  const auto j = rep.summary();
  const std::set<std::string> expected{"r1_i2t", "r5_i2t", "r10_i2t", "r1_t2i", "r5_t2i", "r10_t2i",
                                       "rsum",   "map_at_k", "sts_pearson", "sts_spearman", "sts_mean"};
  std::set<std::string> keys;
  for (const auto& [k, v] : j.items()) keys.insert(k);
  EXPECT_EQ(keys, expected);
  EXPECT_EQ(rep.image_encoder_items, ids.size());
  EXPECT_EQ(rep.text_encoder_items, ids.size() * kCaptionsPerImage);
  EXPECT_EQ(rep.itm.i2t_ranks.size(), ids.size());
  EXPECT_EQ(rep.itm.t2i_ranks.size(), ids.size() * kCaptionsPerImage);
  EXPECT_GE(rep.within.map, 0.0);
  EXPECT_LE(rep.within.map, 1.0);
}

TEST(EvalRetrieval, RecomputingFromEmbeddingsReproducesReport) {
  const Corpus& c = shared_corpus();
  const auto params = EncoderParams<float>::init(small_encoder(), 4);
  const auto ids = split_ids(c, Split::train);
  EvalConfig cfg;
  cfg.sts_pairs = 60;
  const auto rep = eval_retrieval(params, c, ids, cfg, 2);
  const auto items = gather_items(c, ids);
  const auto img = embed_images(params, items.images, cfg.itm_pooling, 7);
  const auto cap = embed_captions(params, items.captions, cfg.itm_pooling, 13);
  const auto again = itm_metrics(img, cap, items.caption_owner);
  EXPECT_EQ(again.recalls, rep.itm.recalls);
  EXPECT_EQ(again.i2t_ranks, rep.itm.i2t_ranks);
  EXPECT_EQ(again.t2i_ranks, rep.itm.t2i_ranks);
  EXPECT_EQ(eval_retrieval(params, c, ids, cfg, 2).summary(), rep.summary());
}

TEST(EvalRetrieval, TooFewImagesIsDataError) {
  const Corpus& c = shared_corpus();
  const auto params = EncoderParams<float>::init(small_encoder(), 4);
  EXPECT_THROW(eval_retrieval(params, c, {0, 1, 2}, EvalConfig{}, 1), DataError);
}

TEST(ImageMap, SelfIsNeverRetrieved) {
  const Corpus& c = shared_corpus();
  std::vector<const SceneSpec*> specs;
  Tensor<float> emb(Shape{c.size(), 3});
  // Identical embeddings: every gallery item ties with the query itself.
  for (std::size_t i = 0; i < c.size(); ++i) {
    specs.push_back(&c.samples[i].spec);
    emb.at(i, 0) = 1.0f;
  }
  const auto r = image_map(emb, specs, 1000);
  EXPECT_EQ(r.k, c.size() - 1);
  EXPECT_GT(r.queries, 0u);
  EXPECT_GT(r.map, 0.0);
  EXPECT_LE(r.map, 1.0);
}

TEST(Attention, PatchLabelsFollowSceneGeometry) {
  SceneSpec spec;
  spec.objects.push_back({ShapeKind::circle, 0, 1, 2, SizeKind::large});
  const auto labels = patch_labels(EncoderConfig{}, GeneratorConfig{}, spec);
  ASSERT_EQ(labels.size(), 16u);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(labels[i].second, i == 1 * 4 + 2) << labels[i].first;
  EXPECT_EQ(labels[6].first, "r1c2");
}

TEST(Attention, DumpsCsvForImagesAndText) {
  const Corpus& c = shared_corpus();
  const auto params = EncoderParams<float>::init(small_encoder(), 5);
  const std::vector<std::uint64_t> ids{0, 1, 2};
  const auto img = image_attention(params, c, ids, Pooling::max);
  const auto txt = text_attention(params, c, ids, Pooling::max);
  ASSERT_EQ(img.size(), 3u);
  for (const auto& s : img) {
    EXPECT_EQ(s.ranking.entries.size(), 16u);
    EXPECT_GE(s.object_auc, 0.0);
    EXPECT_LE(s.object_auc, 1.0);
  }
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(txt[i].ranking.entries.size(), c.samples[i].captions[0].size());
  const auto path = std::filesystem::temp_directory_path() / "cookie_attention_test.csv";
  write_attention_csv(path, img);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "sample_id,token_index,token_label,score,rank");
  std::size_t lines = 0;
  for (std::string l; std::getline(in, l);) ++lines;
  EXPECT_EQ(lines, 48u);
  std::filesystem::remove(path);
}
