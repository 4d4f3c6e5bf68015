#pragma once

// Procedural image-caption corpus: scene specs, rendering, templated
// captions, on-disk manifest, splits and batch plans.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "cookie/error.hpp"
#include "cookie/image.hpp"
#include "cookie/random.hpp"

namespace cookie {

inline constexpr int kCorpusVersion = 1;
inline constexpr std::size_t kCaptionsPerImage = 5;

enum class ShapeKind : std::uint8_t { circle, square, triangle, bar };
enum class SizeKind : std::uint8_t { small, large };

inline constexpr std::array<const char*, 4> kShapeNames{"circle", "square", "triangle", "bar"};
inline constexpr std::array<const char*, 2> kSizeNames{"small", "large"};
inline constexpr std::array<const char*, 8> kColorNames{"red",  "green",   "blue",  "yellow",
                                                        "cyan", "magenta", "white", "orange"};
inline constexpr std::array<std::array<float, 3>, 8> kPalette{{{0.90f, 0.12f, 0.10f},
                                                               {0.15f, 0.80f, 0.20f},
                                                               {0.15f, 0.25f, 0.95f},
                                                               {0.95f, 0.90f, 0.10f},
                                                               {0.10f, 0.85f, 0.85f},
                                                               {0.85f, 0.15f, 0.80f},
                                                               {0.95f, 0.95f, 0.95f},
                                                               {0.98f, 0.55f, 0.08f}}};
inline constexpr std::array<const char*, 4> kRowNames{"top", "upper", "lower", "bottom"};
inline constexpr std::array<const char*, 4> kColumnNames{"far-left", "left", "right", "far-right"};
inline constexpr std::array<const char*, 3> kCountNames{"one", "two", "three"};

struct SceneObject {
  ShapeKind shape = ShapeKind::circle;
  std::uint8_t color = 0;  // palette index
  std::uint8_t row = 0;
  std::uint8_t col = 0;
  SizeKind size = SizeKind::small;

  auto operator<=>(const SceneObject&) const = default;
};

struct SceneSpec {
  std::vector<SceneObject> objects;  // sorted by cell
  std::uint8_t background = 0;       // palette index, rendered darkened

  bool operator==(const SceneSpec&) const = default;

  /// Canonical text key; equal specs give equal keys.
  std::string key() const {
    std::string k = std::to_string(background);
    for (const auto& o : objects) {
      k += '|';
      k += std::to_string(static_cast<int>(o.shape)) + ',' + std::to_string(o.color) + ',' + std::to_string(o.row) +
           ',' + std::to_string(o.col) + ',' + std::to_string(static_cast<int>(o.size));
    }
    return k;
  }
};

struct GeneratorConfig {
  std::size_t image_size = 32;
  std::size_t grid = 4;
  std::size_t min_objects = 1;
  std::size_t max_objects = 3;
  /// Probability that a sample re-renders an earlier sample's spec.
  double spec_reuse = 0.0;

  std::vector<std::string> problems() const {
    std::vector<std::string> out;
    if (grid == 0 || grid > 4) out.push_back("data.grid must lie in [1, 4]");
    if (grid && image_size % grid != 0) out.push_back("data.image_size must be divisible by data.grid");
    if (image_size < 8) out.push_back("data.image_size must be at least 8");
    if (min_objects < 1) out.push_back("data.min_objects must be at least 1");
    if (max_objects < min_objects || max_objects > 3) out.push_back("data.max_objects must lie in [min_objects, 3]");
    if (grid && max_objects > grid * grid) out.push_back("data.max_objects exceeds the number of grid cells");
    if (!(spec_reuse >= 0.0 && spec_reuse < 1.0)) out.push_back("data.spec_reuse must lie in [0, 1)");
    return out;
  }

  void validate() const {
    const auto p = problems();
    if (p.empty()) return;
    std::string msg = "invalid data configuration:";
    for (const auto& s : p) msg += "\n  " + s;
    throw ConfigError(msg);
  }
};

inline void check_spec(const SceneSpec& spec, const GeneratorConfig& cfg = {}) {
  if (spec.objects.empty() || spec.objects.size() > 3) {
    throw DataError("scene spec must hold 1 to 3 objects, got " + std::to_string(spec.objects.size()));
  }
  std::set<std::pair<int, int>> cells;
  for (const auto& o : spec.objects) {
    if (o.row >= cfg.grid || o.col >= cfg.grid) throw DataError("scene object outside the grid");
    if (o.color >= kPalette.size() || static_cast<int>(o.shape) >= 4) throw DataError("scene object attribute out of range");
    if (!cells.insert({o.row, o.col}).second) throw DataError("two scene objects share a cell");
  }
  if (spec.background >= kPalette.size()) throw DataError("background color out of range");
}

// ---------------------------------------------------------------------------
// Vocabulary

class Vocabulary {
 public:
  static constexpr std::int32_t pad = 0;
  static constexpr std::int32_t mask = 1;
  static constexpr std::int32_t unk = 2;

  /// The fixed word list used by the caption templates.
  static Vocabulary standard() {
    std::vector<std::string> words{"<pad>", "<mask>", "<unk>"};
    for (auto* w : kColorNames) words.emplace_back(w);
    for (auto* w : kShapeNames) words.emplace_back(w);
    for (auto* w : kSizeNames) words.emplace_back(w);
    for (auto* w : kRowNames) words.emplace_back(w);
    for (auto* w : kColumnNames) words.emplace_back(w);
    for (auto* w : kCountNames) words.emplace_back(w);
    for (const char* w : {"a", "and", "scene", "with", "on", "dark", "background", "shapes", "shape", "alone", "in",
                          "the", "image", "picture", "shows", "above", "below", "beside"}) {
      words.emplace_back(w);
    }
    return Vocabulary(std::move(words));
  }

  explicit Vocabulary(std::vector<std::string> words = {}) : words_(std::move(words)) {
    for (std::size_t i = 0; i < words_.size(); ++i) {
      if (!index_.emplace(words_[i], static_cast<std::int32_t>(i)).second) {
        throw DataError("duplicate vocabulary word '" + words_[i] + "'");
      }
    }
  }

  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  std::int32_t id(const std::string& w) const {
    auto it = index_.find(w);
    return it == index_.end() ? unk : it->second;
  }

  const std::string& word(std::int32_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) throw DataError("token id " + std::to_string(id) + " outside vocabulary");
    return words_[static_cast<std::size_t>(id)];
  }

  CaptionTokens encode(const std::vector<std::string>& ws) const {
    CaptionTokens out;
    out.reserve(ws.size());
    for (const auto& w : ws) out.push_back(id(w));
    return out;
  }

  std::string decode(const CaptionTokens& toks) const {
    std::string s;
    for (auto t : toks) {
      if (!s.empty()) s += ' ';
      s += word(t);
    }
    return s;
  }

  bool operator==(const Vocabulary& o) const { return words_ == o.words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::int32_t> index_;
};

// ---------------------------------------------------------------------------
// Scene generation and rendering

inline SceneSpec random_spec(std::mt19937_64& rng, const GeneratorConfig& cfg) {
  SceneSpec s;
  const std::size_t k = std::uniform_int_distribution<std::size_t>(cfg.min_objects, cfg.max_objects)(rng);
  std::vector<std::size_t> cells(cfg.grid * cfg.grid);
  std::iota(cells.begin(), cells.end(), std::size_t{0});
  std::shuffle(cells.begin(), cells.end(), rng);
  for (std::size_t i = 0; i < k; ++i) {
    SceneObject o;
    o.shape = static_cast<ShapeKind>(std::uniform_int_distribution<int>(0, 3)(rng));
    o.color = static_cast<std::uint8_t>(std::uniform_int_distribution<int>(0, 7)(rng));
    o.row = static_cast<std::uint8_t>(cells[i] / cfg.grid);
    o.col = static_cast<std::uint8_t>(cells[i] % cfg.grid);
    o.size = static_cast<SizeKind>(std::uniform_int_distribution<int>(0, 1)(rng));
    s.objects.push_back(o);
  }
  std::sort(s.objects.begin(), s.objects.end(),
            [](const SceneObject& a, const SceneObject& b) { return std::tie(a.row, a.col) < std::tie(b.row, b.col); });
  s.background = static_cast<std::uint8_t>(std::uniform_int_distribution<int>(0, 7)(rng));
  return s;
}

namespace detail {

inline bool inside(ShapeKind shape, double dx, double dy, double r) {
  switch (shape) {
    case ShapeKind::circle:
      return dx * dx + dy * dy <= r * r;
    case ShapeKind::square:
      return std::abs(dx) <= 0.85 * r && std::abs(dy) <= 0.85 * r;
    case ShapeKind::triangle:
      return dy >= -r && dy <= r && std::abs(dx) <= (dy + r) * 0.5;
    case ShapeKind::bar:
      return std::abs(dx) <= r && std::abs(dy) <= 0.35 * r;
  }
  return false;
}

}  // namespace detail

/// Deterministic rendering of `spec`; nuisance parameters (object offsets,
/// tint, background shade) come from `render_seed`.
inline SceneImage render(const SceneSpec& spec, std::uint64_t render_seed, const GeneratorConfig& cfg = {}) {
  check_spec(spec, cfg);
  std::mt19937_64 rng(render_seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const std::size_t S = cfg.image_size;
  const double cell = static_cast<double>(S) / static_cast<double>(cfg.grid);
  SceneImage img = blank_image(S, S);
  const double shade = 0.30 + 0.06 * u(rng);
  for (std::size_t y = 0; y < S; ++y) {
    for (std::size_t x = 0; x < S; ++x) {
      for (std::size_t c = 0; c < 3; ++c) pixel(img, y, x, c) = static_cast<float>(shade * kPalette[spec.background][c]);
    }
  }
  for (const auto& o : spec.objects) {
    const double r = cell * (o.size == SizeKind::large ? 0.44 : 0.28);
    const double slack = std::max(0.0, cell * 0.5 - r - 0.5);
    const double cx = (o.col + 0.5) * cell + slack * u(rng);
    const double cy = (o.row + 0.5) * cell + slack * u(rng);
    std::array<float, 3> color;
    for (std::size_t c = 0; c < 3; ++c) color[c] = static_cast<float>(std::clamp(kPalette[o.color][c] + 0.05 * u(rng), 0.0, 1.0));
    for (std::size_t y = 0; y < S; ++y) {
      for (std::size_t x = 0; x < S; ++x) {
        if (detail::inside(o.shape, x + 0.5 - cx, y + 0.5 - cy, r)) {
          for (std::size_t c = 0; c < 3; ++c) pixel(img, y, x, c) = color[c];
        }
      }
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// Captions

namespace detail {

inline std::vector<std::string> colored_shape(const SceneObject& o, bool with_size) {
  std::vector<std::string> w;
  if (with_size) w.emplace_back(kSizeNames[static_cast<int>(o.size)]);
  w.emplace_back(kColorNames[o.color]);
  w.emplace_back(kShapeNames[static_cast<int>(o.shape)]);
  return w;
}

inline const char* relation(const SceneObject& a, const SceneObject& b) {
  if (a.row < b.row) return "above";
  if (a.row > b.row) return "below";
  return "beside";
}

inline void append(std::vector<std::string>& dst, const std::vector<std::string>& src) {
  dst.insert(dst.end(), src.begin(), src.end());
}

}  // namespace detail

/// Five distinct templated word sequences describing `spec`. The object order
/// inside each template is drawn from `caption_seed`.
inline std::vector<std::vector<std::string>> caption_words(const SceneSpec& spec, std::uint64_t caption_seed) {
  check_spec(spec);
  std::mt19937_64 rng(caption_seed);
  std::vector<SceneObject> objs = spec.objects;
  const std::string bg = kColorNames[spec.background];
  std::vector<std::vector<std::string>> caps(kCaptionsPerImage);

  auto joined = [&](auto&& phrase) {
    std::vector<std::string> out;
    std::shuffle(objs.begin(), objs.end(), rng);
    for (std::size_t i = 0; i < objs.size(); ++i) {
      if (i) out.emplace_back("and");
      detail::append(out, phrase(objs[i]));
    }
    return out;
  };

  // a scene with a small red circle and a large blue bar
  caps[0] = {"a", "scene", "with"};
  detail::append(caps[0], joined([](const SceneObject& o) {
                   std::vector<std::string> w{"a"};
                   detail::append(w, detail::colored_shape(o, true));
                   return w;
                 }));

  // red circle top left and blue bar lower right on dark green
  caps[1] = joined([](const SceneObject& o) {
    auto w = detail::colored_shape(o, false);
    w.emplace_back(kRowNames[o.row]);
    w.emplace_back(kColumnNames[o.col]);
    return w;
  });
  detail::append(caps[1], {"on", "dark", bg});

  // two shapes red circle and blue bar on green background
  caps[2] = {kCountNames[objs.size() - 1], objs.size() == 1 ? "shape" : "shapes"};
  detail::append(caps[2], joined([](const SceneObject& o) { return detail::colored_shape(o, false); }));
  detail::append(caps[2], {"on", bg, "background"});

  // small red circle above large blue bar
  std::shuffle(objs.begin(), objs.end(), rng);
  caps[3] = detail::colored_shape(objs[0], true);
  if (objs.size() == 1) {
    detail::append(caps[3], {"alone", "in", "the", "image"});
  } else {
    caps[3].emplace_back(detail::relation(objs[0], objs[1]));
    detail::append(caps[3], detail::colored_shape(objs[1], true));
    if (objs.size() == 3) {
      caps[3].emplace_back("and");
      detail::append(caps[3], detail::colored_shape(objs[2], true));
    }
  }

  // the picture shows red circle and blue bar on green
  caps[4] = {"the", "picture", "shows"};
  detail::append(caps[4], joined([](const SceneObject& o) { return detail::colored_shape(o, false); }));
  detail::append(caps[4], {"on", bg});
  return caps;
}

inline std::vector<CaptionTokens> make_captions(const SceneSpec& spec, std::uint64_t caption_seed, const Vocabulary& vocab) {
  std::vector<CaptionTokens> out;
  for (const auto& w : caption_words(spec, caption_seed)) out.push_back(vocab.encode(w));
  return out;
}

/// Object mention recovered from a caption: a color word directly followed by
/// a shape word, with an optional preceding size and trailing row/column.
struct CaptionMention {
  std::uint8_t color = 0;
  ShapeKind shape = ShapeKind::circle;
  std::optional<SizeKind> size;
  std::optional<std::uint8_t> row, col;
};

struct ParsedCaption {
  std::vector<CaptionMention> objects;
  std::vector<std::uint8_t> background_colors;  // color words not followed by a shape
  std::vector<std::pair<std::size_t, std::string>> relations;  // (index of left mention, relation word)
  bool unknown_word = false;
};

inline ParsedCaption parse_caption(const CaptionTokens& toks, const Vocabulary& vocab) {
  auto index_in = [](const auto& names, const std::string& w) -> int {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (w == names[i]) return static_cast<int>(i);
    return -1;
  };
  ParsedCaption p;
  std::vector<std::string> w;
  for (auto t : toks) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab.size() || t <= Vocabulary::unk) {
      p.unknown_word = true;
      w.emplace_back("");
    } else {
      w.push_back(vocab.word(t));
    }
  }
  for (std::size_t i = 0; i < w.size(); ++i) {
    const int color = index_in(kColorNames, w[i]);
    if (color < 0) {
      if (w[i] == "above" || w[i] == "below" || w[i] == "beside") {
        if (!p.objects.empty()) p.relations.emplace_back(p.objects.size() - 1, w[i]);
      }
      continue;
    }
    const int shape = i + 1 < w.size() ? index_in(kShapeNames, w[i + 1]) : -1;
    if (shape < 0) {
      p.background_colors.push_back(static_cast<std::uint8_t>(color));
      continue;
    }
    CaptionMention m;
    m.color = static_cast<std::uint8_t>(color);
    m.shape = static_cast<ShapeKind>(shape);
    if (i > 0) {
      const int size = index_in(kSizeNames, w[i - 1]);
      if (size >= 0) m.size = static_cast<SizeKind>(size);
    }
    if (i + 3 < w.size()) {
      const int row = index_in(kRowNames, w[i + 2]);
      const int col = index_in(kColumnNames, w[i + 3]);
      if (row >= 0 && col >= 0) {
        m.row = static_cast<std::uint8_t>(row);
        m.col = static_cast<std::uint8_t>(col);
      }
    }
    p.objects.push_back(m);
    ++i;
  }
  return p;
}

/// True when every attribute the caption mentions is present in `spec`.
inline bool caption_consistent(const SceneSpec& spec, const CaptionTokens& toks, const Vocabulary& vocab) {
  const ParsedCaption p = parse_caption(toks, vocab);
  if (p.unknown_word || p.objects.empty()) return false;
  for (auto c : p.background_colors) {
    if (c != spec.background) return false;
  }
  auto fits = [](const CaptionMention& m, const SceneObject& o) {
    if (o.color != m.color || o.shape != m.shape) return false;
    if (m.size && *m.size != o.size) return false;
    if (m.row && (*m.row != o.row || *m.col != o.col)) return false;
    return true;
  };
  // each mention must name a different object; search all assignments
  std::vector<std::size_t> assign(p.objects.size());
  std::vector<bool> used(spec.objects.size(), false);
  std::function<bool(std::size_t)> search = [&](std::size_t k) {
    if (k == p.objects.size()) {
      for (const auto& [idx, rel] : p.relations) {
        if (idx + 1 >= assign.size()) return false;
        if (rel != detail::relation(spec.objects[assign[idx]], spec.objects[assign[idx + 1]])) return false;
      }
      return true;
    }
    for (std::size_t o = 0; o < spec.objects.size(); ++o) {
      if (used[o] || !fits(p.objects[k], spec.objects[o])) continue;
      used[o] = true;
      assign[k] = o;
      if (search(k + 1)) return true;
      used[o] = false;
    }
    return false;
  };
  return search(0);
}

/// Object colors and shapes of a scene, as a set of attribute labels.
inline std::set<std::string> scene_attributes(const SceneSpec& spec) {
  std::set<std::string> a;
  for (const auto& o : spec.objects) {
    a.insert(std::string("color:") + kColorNames[o.color]);
    a.insert(std::string("shape:") + kShapeNames[static_cast<int>(o.shape)]);
  }
  return a;
}

/// 5 for the same scene, otherwise 5 x Jaccard overlap of scene attributes.
inline double sts_label(const SceneSpec& a, const SceneSpec& b, bool same_sample) {
  if (same_sample) return 5.0;
  const auto x = scene_attributes(a), y = scene_attributes(b);
  std::size_t inter = 0;
  for (const auto& s : x) inter += y.count(s);
  const std::size_t uni = x.size() + y.size() - inter;
  return uni ? 5.0 * static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

/// Images count as relevant to each other when they share a colored shape.
inline bool shares_object(const SceneSpec& a, const SceneSpec& b) {
  for (const auto& x : a.objects)
    for (const auto& y : b.objects)
      if (x.color == y.color && x.shape == y.shape) return true;
  return false;
}

// ---------------------------------------------------------------------------
// Samples and corpus

struct Sample {
  std::uint64_t id = 0;
  SceneSpec spec;
  std::vector<CaptionTokens> captions;
  std::uint64_t render_seed = 0;
  SceneImage image;
};

/// Sample `id` of the corpus seeded by `seed`. Specs may be reused from an
/// earlier sample when cfg.spec_reuse > 0, so generation is sequential.
inline Sample generate_scene(std::uint64_t seed, std::uint64_t id, const GeneratorConfig& cfg, const Vocabulary& vocab,
                             const SceneSpec* reuse = nullptr) {
  std::mt19937_64 rng(derive_seed(seed, {static_cast<std::uint64_t>(SeedStream::corpus), id}));
  Sample s;
  s.id = id;
  s.spec = reuse ? *reuse : random_spec(rng, cfg);
  s.render_seed = derive_seed(seed, {static_cast<std::uint64_t>(SeedStream::corpus), id, 1});
  s.image = render(s.spec, s.render_seed, cfg);
  s.captions = make_captions(s.spec, derive_seed(seed, {static_cast<std::uint64_t>(SeedStream::corpus), id, 2}), vocab);
  return s;
}

struct Corpus {
  int version = kCorpusVersion;
  std::uint64_t seed = 0;
  GeneratorConfig config;
  Vocabulary vocab = Vocabulary::standard();
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  const Sample& at(std::size_t id) const {
    if (id >= samples.size()) throw DataError("sample id " + std::to_string(id) + " out of range");
    return samples[id];
  }
};

inline Corpus generate_corpus(std::size_t n, std::uint64_t seed, const GeneratorConfig& cfg = {}) {
  if (n < 1) throw ContractError("corpus needs at least one sample");
  cfg.validate();
  Corpus c;
  c.seed = seed;
  c.config = cfg;
  c.samples.reserve(n);
  std::mt19937_64 reuse_rng(derive_seed(seed, {static_cast<std::uint64_t>(SeedStream::corpus), 0xfeed}));
  std::uniform_real_distribution<double> unit(0, 1);
  for (std::size_t i = 0; i < n; ++i) {
    const SceneSpec* reuse = nullptr;
    if (i > 0 && cfg.spec_reuse > 0 && unit(reuse_rng) < cfg.spec_reuse) {
      reuse = &c.samples[std::uniform_int_distribution<std::size_t>(0, i - 1)(reuse_rng)].spec;
    }
    c.samples.push_back(generate_scene(seed, i, cfg, c.vocab, reuse));
  }
  return c;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json spec_to_json(const SceneSpec& s) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : s.objects) {
    objs.push_back({{"shape", kShapeNames[static_cast<int>(o.shape)]},
                    {"color", kColorNames[o.color]},
                    {"row", o.row},
                    {"col", o.col},
                    {"size", kSizeNames[static_cast<int>(o.size)]}});
  }
  return {{"objects", objs}, {"background", kColorNames[s.background]}};
}

inline SceneSpec spec_from_json(const nlohmann::json& j) {
  auto lookup = [](const auto& names, const std::string& w, const char* what) {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (w == names[i]) return static_cast<int>(i);
    throw DataError(std::string("unknown ") + what + " '" + w + "' in manifest");
  };
  SceneSpec s;
  try {
    for (const auto& o : j.at("objects")) {
      SceneObject x;
      x.shape = static_cast<ShapeKind>(lookup(kShapeNames, o.at("shape").get<std::string>(), "shape"));
      x.color = static_cast<std::uint8_t>(lookup(kColorNames, o.at("color").get<std::string>(), "color"));
      x.row = o.at("row").get<std::uint8_t>();
      x.col = o.at("col").get<std::uint8_t>();
      x.size = static_cast<SizeKind>(lookup(kSizeNames, o.at("size").get<std::string>(), "size"));
      s.objects.push_back(x);
    }
    s.background = static_cast<std::uint8_t>(lookup(kColorNames, j.at("background").get<std::string>(), "color"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed scene spec: ") + e.what());
  }
  return s;
}

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 | static_cast<std::uint32_t>(p[2]) << 16 |
         static_cast<std::uint32_t>(p[3]) << 24;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

}  // namespace detail

/// Header of three little-endian u32 (H, W, C) followed by H*W*C little-endian f32.
inline std::string encode_image_bytes(const SceneImage& img) {
  std::string out;
  out.reserve(12 + img.size() * 4);
  detail::put_u32(out, static_cast<std::uint32_t>(img.dim(0)));
  detail::put_u32(out, static_cast<std::uint32_t>(img.dim(1)));
  detail::put_u32(out, static_cast<std::uint32_t>(img.dim(2)));
  for (float v : img.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

inline SceneImage decode_image_bytes(const std::string& bytes, const std::string& what = "image") {
  if (bytes.size() < 12) throw DataError(what + ": truncated header");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t h = detail::get_u32(p), w = detail::get_u32(p + 4), c = detail::get_u32(p + 8);
  if (h == 0 || w == 0 || c != 3) throw DataError(what + ": bad shape header");
  if (bytes.size() != 12 + h * w * c * 4) {
    throw DataError(what + ": expected " + std::to_string(12 + h * w * c * 4) + " bytes, found " + std::to_string(bytes.size()));
  }
  SceneImage img = blank_image(h, w);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = std::bit_cast<float>(detail::get_u32(p + 12 + 4 * i));
  return img;
}

inline nlohmann::json record_to_json(const Sample& s) {
  return {{"version", kCorpusVersion},
          {"id", s.id},
          {"spec", spec_to_json(s.spec)},
          {"captions", s.captions},
          {"render_seed", s.render_seed}};
}

/// Writes manifest.jsonl, vocab.json, corpus.json and images/<id>.f32 under `dir`.
inline void save_corpus(const Corpus& c, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) throw IoError("cannot create corpus directory '" + dir.string() + "': " + ec.message());
  std::string manifest;
  for (const auto& s : c.samples) {
    manifest += record_to_json(s).dump();
    manifest += '\n';
    detail::write_file(dir / "images" / (std::to_string(s.id) + ".f32"), encode_image_bytes(s.image));
  }
  detail::write_file(dir / "manifest.jsonl", manifest);
  detail::write_file(dir / "vocab.json", nlohmann::json(c.vocab.words()).dump(1) + "\n");
  nlohmann::json meta{{"version", c.version},
                      {"seed", c.seed},
                      {"samples", c.samples.size()},
                      {"image_size", c.config.image_size},
                      {"grid", c.config.grid},
                      {"min_objects", c.config.min_objects},
                      {"max_objects", c.config.max_objects},
                      {"spec_reuse", c.config.spec_reuse}};
  detail::write_file(dir / "corpus.json", meta.dump(1) + "\n");
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
  Corpus c;
  try {
    const auto meta = nlohmann::json::parse(detail::read_file(dir / "corpus.json"));
    c.version = meta.at("version").get<int>();
    if (c.version != kCorpusVersion) throw DataError("unsupported corpus version " + std::to_string(c.version));
    c.seed = meta.at("seed").get<std::uint64_t>();
    c.config.image_size = meta.at("image_size").get<std::size_t>();
    c.config.grid = meta.at("grid").get<std::size_t>();
    c.config.min_objects = meta.at("min_objects").get<std::size_t>();
    c.config.max_objects = meta.at("max_objects").get<std::size_t>();
    c.config.spec_reuse = meta.at("spec_reuse").get<double>();
    c.vocab = Vocabulary(nlohmann::json::parse(detail::read_file(dir / "vocab.json")).get<std::vector<std::string>>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt corpus metadata in '" + dir.string() + "': " + e.what());
  }
  std::istringstream lines(detail::read_file(dir / "manifest.jsonl"));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    if (line.empty()) continue;
    Sample s;
    try {
      const auto j = nlohmann::json::parse(line);
      if (j.at("version").get<int>() != kCorpusVersion) throw DataError("record version mismatch");
      s.id = j.at("id").get<std::uint64_t>();
      s.spec = spec_from_json(j.at("spec"));
      s.captions = j.at("captions").get<std::vector<CaptionTokens>>();
      s.render_seed = j.at("render_seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError("manifest line " + std::to_string(lineno) + ": " + e.what());
    }
    if (s.id != c.samples.size()) throw DataError("manifest line " + std::to_string(lineno) + ": sample ids must be dense from 0");
    check_spec(s.spec, c.config);
    if (s.captions.size() != kCaptionsPerImage) throw DataError("manifest line " + std::to_string(lineno) + ": expected 5 captions");
    for (const auto& cap : s.captions) {
      if (cap.empty()) throw DataError("manifest line " + std::to_string(lineno) + ": empty caption");
      for (auto t : cap) {
        if (t < 0 || static_cast<std::size_t>(t) >= c.vocab.size()) {
          throw DataError("manifest line " + std::to_string(lineno) + ": token " + std::to_string(t) + " not in vocabulary");
        }
      }
    }
    const auto path = dir / "images" / (std::to_string(s.id) + ".f32");
    s.image = decode_image_bytes(detail::read_file(path), path.string());
    c.samples.push_back(std::move(s));
  }
  if (c.samples.empty()) throw DataError("manifest in '" + dir.string() + "' has no records");
  return c;
}

// ---------------------------------------------------------------------------
// Splits, batches and text-similarity pairs

enum class Split { train, val, test };

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + s + "' (expected train, val or test)");
}

inline const char* to_string(Split s) { return s == Split::train ? "train" : s == Split::val ? "val" : "test"; }

/// 80/10/10 assignment by hash of the sample id.
inline Split split_of(std::uint64_t id) {
  const std::uint64_t h = derive_seed(static_cast<std::uint64_t>(SeedStream::split), {id}) % 10;
  return h < 8 ? Split::train : h == 8 ? Split::val : Split::test;
}

inline std::vector<std::uint64_t> split_ids(const Corpus& c, Split s) {
  std::vector<std::uint64_t> ids;
  for (const auto& smp : c.samples)
    if (split_of(smp.id) == s) ids.push_back(smp.id);
  return ids;
}

struct BatchItem {
  std::uint64_t id = 0;
  std::size_t caption = 0;  // index into the sample's captions

  bool operator==(const BatchItem&) const = default;
};

using Batch = std::vector<BatchItem>;

/// One epoch of batches: seeded shuffle, one caption per image, no repeated
/// scene spec inside a batch, remainder dropped. A sample that would repeat a
/// spec is deferred to the next batch.
inline std::vector<Batch> plan_epoch(const Corpus& c, const std::vector<std::uint64_t>& ids, std::size_t batch_size,
                                     std::uint64_t epoch_seed) {
  if (batch_size < 2) throw ContractError("batch size must be at least 2");
  if (batch_size > ids.size()) {
    throw DataError("batch size " + std::to_string(batch_size) + " exceeds the " + std::to_string(ids.size()) +
                    " available samples");
  }
  std::set<std::string> distinct;
  for (auto id : ids) distinct.insert(c.at(id).spec.key());
  if (distinct.size() < batch_size) {
    throw DataError("only " + std::to_string(distinct.size()) + " distinct scene specs for batch size " +
                    std::to_string(batch_size));
  }
  std::vector<std::uint64_t> order = ids;
  std::mt19937_64 rng(derive_seed(epoch_seed, {static_cast<std::uint64_t>(SeedStream::shuffle)}));
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<Batch> out;
  std::vector<std::uint64_t> deferred;
  Batch cur;
  std::set<std::string> keys;
  auto take = [&](std::uint64_t id) {
    const std::size_t cap = derive_seed(epoch_seed, {static_cast<std::uint64_t>(SeedStream::caption_pick), id}) %
                            c.at(id).captions.size();
    cur.push_back({id, cap});
  };
  auto flush_if_full = [&] {
    if (cur.size() == batch_size) {
      out.push_back(std::move(cur));
      cur.clear();
      keys.clear();
      return true;
    }
    return false;
  };
  std::size_t next = 0;
  while (next < order.size()) {
    // deferred samples get the first chance at every new batch
    if (cur.empty() && !deferred.empty()) {
      std::vector<std::uint64_t> still;
      for (auto id : deferred) {
        if (cur.size() < batch_size && keys.insert(c.at(id).spec.key()).second) {
          take(id);
        } else {
          still.push_back(id);
        }
      }
      deferred = std::move(still);
      if (flush_if_full()) continue;
    }
    const auto id = order[next++];
    if (keys.insert(c.at(id).spec.key()).second) {
      take(id);
      flush_if_full();
    } else {
      deferred.push_back(id);
    }
  }
  return out;
}

struct StsPair {
  std::uint64_t a_id = 0, b_id = 0;
  std::size_t a_caption = 0, b_caption = 0;
  double label = 0.0;
};

/// Caption pairs with graded similarity labels in [0, 5]: a third are two
/// captions of one scene, the rest are captions of two different scenes.
inline std::vector<StsPair> make_sts_pairs(const Corpus& c, const std::vector<std::uint64_t>& ids, std::size_t count,
                                           std::uint64_t seed) {
  if (ids.size() < 2) throw DataError("text-similarity pairs need at least two samples");
  std::mt19937_64 rng(derive_seed(seed, {static_cast<std::uint64_t>(SeedStream::sts)}));
  std::uniform_int_distribution<std::size_t> pick(0, ids.size() - 1), cap(0, kCaptionsPerImage - 1);
  std::vector<StsPair> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    StsPair p;
    p.a_id = ids[pick(rng)];
    p.a_caption = cap(rng);
    if (i % 3 == 0) {
      p.b_id = p.a_id;
      do p.b_caption = cap(rng);
      while (p.b_caption == p.a_caption);
    } else {
      do p.b_id = ids[pick(rng)];
      while (p.b_id == p.a_id);
      p.b_caption = cap(rng);
    }
    p.label = sts_label(c.at(p.a_id).spec, c.at(p.b_id).spec, p.a_id == p.b_id);
    out.push_back(p);
  }
  return out;
}

}  // namespace cookie
