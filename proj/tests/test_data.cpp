#include <gtest/gtest.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>

#include "cookie/data.hpp"

using namespace cookie;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("cookie_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(Vocabulary, ReservedIdsAndBound) {
  Vocabulary v = Vocabulary::standard();
  EXPECT_EQ(v.word(Vocabulary::pad), "<pad>");
  EXPECT_EQ(v.word(Vocabulary::mask), "<mask>");
  EXPECT_LE(v.size(), 128u);
  EXPECT_EQ(v.id("no-such-word"), Vocabulary::unk);
  EXPECT_EQ(v.decode(v.encode({"a", "red", "circle"})), "a red circle");
  EXPECT_THROW(v.word(999), DataError);
}

TEST(Scene, SameSeedIsIdentical) {
  Vocabulary v = Vocabulary::standard();
  Sample a = generate_scene(3, 7, {}, v), b = generate_scene(3, 7, {}, v);
  EXPECT_EQ(a.spec, b.spec);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.captions, b.captions);
  EXPECT_EQ(a.image.shape(), (Shape{32, 32, 3}));
}

TEST(Scene, RerenderChangesPixelsNotSemantics) {
  Vocabulary v = Vocabulary::standard();
  Sample a = generate_scene(3, 7, {}, v);
  SceneImage again = render(a.spec, a.render_seed + 1);
  EXPECT_NE(again, a.image);
  Sample b = generate_scene(4, 0, {}, v, &a.spec);
  EXPECT_EQ(b.spec, a.spec);
  EXPECT_NE(b.image, a.image);
  for (const auto& cap : b.captions) EXPECT_TRUE(caption_consistent(a.spec, cap, v));
}

TEST(Scene, EmptyOrOverlappingSpecsRejected) {
  SceneSpec empty;
  EXPECT_THROW(render(empty, 1), DataError);
  SceneSpec clash;
  clash.objects = {SceneObject{ShapeKind::bar, 1, 2, 2, SizeKind::small}, SceneObject{ShapeKind::circle, 3, 2, 2, SizeKind::large}};
  EXPECT_THROW(render(clash, 1), DataError);
}

TEST(Scene, ObjectsAreVisibleInTheirCells) {
  SceneSpec s;
  s.objects = {SceneObject{ShapeKind::square, 0, 1, 2, SizeKind::large}};
  s.background = 2;
  SceneImage img = render(s, 5);
  // centre pixel of cell (1,2) carries the red object color; corner cell stays background
  EXPECT_GT(pixel(img, 12, 20, 0), 0.7f);
  EXPECT_LT(pixel(img, 1, 1, 0), 0.2f);
}

TEST(Captions, FiveDistinctConsistentAndShort) {
  Corpus c = generate_corpus(300, 11);
  for (const auto& s : c.samples) {
    ASSERT_EQ(s.captions.size(), 5u);
    std::set<CaptionTokens> uniq(s.captions.begin(), s.captions.end());
    EXPECT_EQ(uniq.size(), 5u) << s.id;
    for (const auto& cap : s.captions) {
      EXPECT_LE(cap.size(), 20u);
      EXPECT_TRUE(caption_consistent(s.spec, cap, c.vocab)) << c.vocab.decode(cap);
    }
  }
}

TEST(Captions, ParserRejectsWrongAttributes) {
  Vocabulary v = Vocabulary::standard();
  SceneSpec s;
  s.objects = {SceneObject{ShapeKind::circle, 0, 0, 0, SizeKind::small}, SceneObject{ShapeKind::bar, 2, 3, 1, SizeKind::large}};
  s.background = 1;
  EXPECT_TRUE(caption_consistent(s, v.encode({"small", "red", "circle", "above", "large", "blue", "bar"}), v));
  EXPECT_FALSE(caption_consistent(s, v.encode({"small", "red", "circle", "below", "large", "blue", "bar"}), v));
  EXPECT_FALSE(caption_consistent(s, v.encode({"large", "red", "circle"}), v));
  EXPECT_FALSE(caption_consistent(s, v.encode({"green", "circle"}), v));
  EXPECT_FALSE(caption_consistent(s, v.encode({"red", "circle", "on", "dark", "blue"}), v));
  EXPECT_TRUE(caption_consistent(s, v.encode({"blue", "bar", "bottom", "left", "on", "dark", "green"}), v));
  EXPECT_FALSE(caption_consistent(s, v.encode({"blue", "bar", "top", "left"}), v));
}

TEST(Corpus, DeterministicBytesAndRoundTrip) {
  const fs::path a = scratch_dir("a"), b = scratch_dir("b");
  GeneratorConfig cfg;
  cfg.spec_reuse = 0.1;
  Corpus c = generate_corpus(40, 5, cfg);
  save_corpus(c, a);
  save_corpus(generate_corpus(40, 5, cfg), b);
  for (const char* f : {"manifest.jsonl", "vocab.json", "corpus.json", "images/17.f32"}) {
    EXPECT_EQ(detail::read_file(a / f), detail::read_file(b / f)) << f;
  }
  Corpus back = load_corpus(a);
  ASSERT_EQ(back.size(), c.size());
  EXPECT_EQ(back.vocab, c.vocab);
  EXPECT_EQ(back.config.spec_reuse, cfg.spec_reuse);
  for (std::size_t i = 0; i < c.size(); ++i) {
    EXPECT_EQ(back.samples[i].spec, c.samples[i].spec);
    EXPECT_EQ(back.samples[i].captions, c.samples[i].captions);
    EXPECT_EQ(back.samples[i].render_seed, c.samples[i].render_seed);
    EXPECT_TRUE(std::equal(back.samples[i].image.data().begin(), back.samples[i].image.data().end(),
                           c.samples[i].image.data().begin(),
                           [](float x, float y) { return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y); }));
  }
  // every manifest line carries the fixed schema
  std::ifstream in(a / "manifest.jsonl");
  std::string line;
  std::getline(in, line);
  auto j = nlohmann::json::parse(line);
  for (const char* k : {"version", "id", "spec", "captions", "render_seed"}) EXPECT_TRUE(j.contains(k)) << k;
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Corpus, SingleSample) {
  Corpus c = generate_corpus(1, 2);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c.samples[0].captions.size(), 5u);
  EXPECT_THROW(generate_corpus(0, 2), ContractError);
}

TEST(Corpus, CorruptionIsTyped) {
  const fs::path d = scratch_dir("corrupt");
  save_corpus(generate_corpus(5, 1), d);
  {
    std::string img = detail::read_file(d / "images/3.f32");
    detail::write_file(d / "images/3.f32", img.substr(0, img.size() - 7));
  }
  EXPECT_THROW(load_corpus(d), DataError);
  save_corpus(generate_corpus(5, 1), d);
  {
    std::string m = detail::read_file(d / "manifest.jsonl");
    m.insert(m.size() / 2, "}{");
    detail::write_file(d / "manifest.jsonl", m);
  }
  EXPECT_THROW(load_corpus(d), DataError);
  EXPECT_THROW(load_corpus(d / "missing"), IoError);
  fs::remove_all(d);
}

TEST(Corpus, UnwritablePathIsIoError) {
  const fs::path blocker = scratch_dir("blocker");
  detail::write_file(blocker, "x");
  EXPECT_THROW(save_corpus(generate_corpus(1, 1), blocker / "sub"), IoError);
  fs::remove(blocker);
}

TEST(Corpus, DefaultSizeBuildsQuickly) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path d = scratch_dir("timing");
  save_corpus(generate_corpus(2000, 1), d);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_LT(secs, 60.0);
  fs::remove_all(d);
}

TEST(Splits, RoughlyEightyTenTen) {
  std::map<Split, std::size_t> count;
  for (std::uint64_t i = 0; i < 10000; ++i) ++count[split_of(i)];
  EXPECT_NEAR(count[Split::train] / 10000.0, 0.8, 0.02);
  EXPECT_NEAR(count[Split::val] / 10000.0, 0.1, 0.015);
  EXPECT_NEAR(count[Split::test] / 10000.0, 0.1, 0.015);
  EXPECT_EQ(parse_split("val"), Split::val);
  EXPECT_THROW(parse_split("dev"), ConfigError);
}

TEST(Batches, AlignedDeterministicAndExhaustive) {
  Corpus c = generate_corpus(103, 9);
  std::vector<std::uint64_t> ids(c.size());
  std::iota(ids.begin(), ids.end(), std::uint64_t{0});
  auto plan = plan_epoch(c, ids, 10, 4);
  EXPECT_EQ(plan, plan_epoch(c, ids, 10, 4));
  EXPECT_NE(plan, plan_epoch(c, ids, 10, 5));
  EXPECT_EQ(plan.size(), 10u);
  std::map<std::uint64_t, int> seen;
  for (const auto& b : plan) {
    ASSERT_EQ(b.size(), 10u);
    for (const auto& item : b) {
      ++seen[item.id];
      EXPECT_LT(item.caption, 5u);
    }
  }
  for (const auto& [id, n] : seen) EXPECT_EQ(n, 1) << id;
  EXPECT_EQ(seen.size(), 100u);
}

TEST(Batches, SpecsDistinctWithinBatchUnderHeavyReuse) {
  GeneratorConfig cfg;
  cfg.spec_reuse = 0.5;
  Corpus c = generate_corpus(200, 3, cfg);
  std::vector<std::uint64_t> ids(c.size());
  std::iota(ids.begin(), ids.end(), std::uint64_t{0});
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto plan = plan_epoch(c, ids, 16, seed);
    EXPECT_GE(plan.size(), 10u);
    std::set<std::uint64_t> all;
    for (const auto& b : plan) {
      std::set<std::string> keys;
      for (const auto& item : b) {
        EXPECT_TRUE(keys.insert(c.at(item.id).spec.key()).second);
        EXPECT_TRUE(all.insert(item.id).second);
      }
    }
  }
}

TEST(Batches, TooFewDistinctSpecsIsDataError) {
  Corpus c = generate_corpus(6, 3);
  for (std::size_t i = 1; i < c.size(); ++i) c.samples[i].spec = c.samples[0].spec;
  std::vector<std::uint64_t> ids{0, 1, 2, 3, 4, 5};
  EXPECT_THROW(plan_epoch(c, ids, 2, 1), DataError);
  EXPECT_THROW(plan_epoch(c, ids, 7, 1), DataError);
  EXPECT_THROW(plan_epoch(c, ids, 1, 1), ContractError);
}

TEST(Sts, LabelsFollowAttributeOverlap) {
  SceneSpec a, b;
  a.objects = {SceneObject{ShapeKind::circle, 0, 0, 0, SizeKind::small}};
  b.objects = {SceneObject{ShapeKind::bar, 2, 1, 1, SizeKind::small}};
  EXPECT_EQ(sts_label(a, a, true), 5.0);
  EXPECT_EQ(sts_label(a, b, false), 0.0);
  b.objects[0].color = 0;  // {red, circle} vs {red, bar}
  EXPECT_NEAR(sts_label(a, b, false), 5.0 / 3.0, 1e-12);
  EXPECT_TRUE(shares_object(a, a));
  EXPECT_FALSE(shares_object(a, b));

  Corpus c = generate_corpus(50, 2);
  std::vector<std::uint64_t> ids(c.size());
  std::iota(ids.begin(), ids.end(), std::uint64_t{0});
  auto pairs = make_sts_pairs(c, ids, 90, 1);
  ASSERT_EQ(pairs.size(), 90u);
  for (const auto& p : pairs) {
    EXPECT_GE(p.label, 0.0);
    EXPECT_LE(p.label, 5.0);
    if (p.a_id == p.b_id) EXPECT_NE(p.a_caption, p.b_caption);
  }
}
