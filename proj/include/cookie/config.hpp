#pragma once

// Run configuration: every module's settings, JSON (de)serialization with
// per-field error collection, and cross-field validation.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cookie/augment.hpp"
#include "cookie/data.hpp"
#include "cookie/encoders.hpp"
#include "cookie/error.hpp"
#include "cookie/objectives.hpp"
#include "cookie/optim.hpp"

namespace cookie {

inline constexpr const char* kToolkitVersion = "0.1.0";

struct TrainConfig {
  std::size_t stage1_epochs = 15;
  std::size_t stage2_epochs = 5;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double warmup = 0.05;
  std::size_t finetune_epochs = 5;
  std::size_t finetune_batch_size = 32;
  double finetune_lr = 5e-4;
  double finetune_warmup = 0.1;
  AdamWConfig adamw;
  double clip_norm = 5.0;
  double tau = 0.07;
  double alpha = 0.2;
  Pooling pooling = Pooling::max;
  bool reset_optimizer = true;             // between stage 1 and stage 2
  bool separate_single_modal_batch = false;  // draw L_i / L_t from their own batch
  bool stage2_single_modal = true;           // false: stage 2 keeps the stage-1 objective
  std::size_t val_images = 100;            // validation images scored each epoch; 0 = whole split
};

struct EvalConfig {
  std::string split = "test";
  std::size_t map_k = 100;
  std::size_t sts_pairs = 600;
  Pooling itm_pooling = Pooling::max;
  Pooling within_pooling = Pooling::mean;
  std::size_t batch = 64;
};

struct BenchConfig {
  std::vector<std::size_t> sizes{64, 128, 256, 512};
  std::size_t repeats = 5;
  std::size_t warmup = 1;
  std::size_t pair_batch = 256;
  EncoderConfig model = small_model();

  static EncoderConfig small_model() {
    EncoderConfig c;
    c.image_size = 16;
    c.patch = 8;
    c.visual_dim = 16;
    c.text_dim = 16;
    c.model_dim = 16;
    c.heads = 2;
    c.ffn_dim = 16;
    c.max_tokens = 8;
    c.tav_layers = 1;
    c.ws_layers = 1;
    c.text_backbone_layers = 0;
    return c;
  }
};

/// Text augmentation drawing replacement words from the corpus vocabulary.
inline TextAugConfig corpus_text_aug() {
  TextAugConfig t;
  t.mask_token = Vocabulary::mask;
  t.replace_low = Vocabulary::unk + 1;
  t.vocab_size = Vocabulary::standard().size();
  return t;
}

struct RunConfig {
  std::uint64_t seed = 1;
  std::string out = "out";
  std::string data_dir;  // corpus location; empty means <out>/data
  std::size_t n_samples = 2000;
  EncoderConfig encoder;
  GeneratorConfig data;
  VisualAugConfig visual_aug;
  TextAugConfig text_aug = corpus_text_aug();
  TrainConfig train;
  EvalConfig eval;
  BenchConfig bench;

  std::filesystem::path corpus_dir() const {
    return data_dir.empty() ? std::filesystem::path(out) / "data" : std::filesystem::path(data_dir);
  }

  PretrainSettings pretrain_settings() const {
    PretrainSettings s;
    s.tau = train.tau;
    s.pooling = train.pooling;
    s.visual_aug = visual_aug;
    s.text_aug = text_aug;
    return s;
  }
};

/// Longest caption any template can produce (3 objects).
inline constexpr std::size_t kLongestCaption = 17;

/// Every violated constraint, one message per field.
inline std::vector<std::string> config_problems(const RunConfig& c) {
  std::vector<std::string> out;
  auto add = [&](const std::vector<std::string>& v) { out.insert(out.end(), v.begin(), v.end()); };
  add(c.encoder.problems());
  add(c.data.problems());
  add(c.visual_aug.problems());
  add(c.text_aug.problems());
  auto bench_problems = c.bench.model.problems();
  for (auto& p : bench_problems) p = "bench." + p;
  add(bench_problems);

  if (c.n_samples < 1) out.push_back("n_samples must be at least 1");
  if (c.out.empty()) out.push_back("out must not be empty");
  if (c.encoder.image_size != c.data.image_size) out.push_back("encoder.image_size must equal data.image_size");
  if (c.visual_aug.output_height != c.encoder.image_size || c.visual_aug.output_width != c.encoder.image_size) {
    out.push_back("augment.visual output size must equal encoder.image_size");
  }
  const std::size_t vocab = Vocabulary::standard().size();
  if (c.encoder.vocab_size < vocab) out.push_back("encoder.vocab_size must be at least " + std::to_string(vocab));
  if (c.bench.model.vocab_size < vocab) out.push_back("bench.model.vocab_size must be at least " + std::to_string(vocab));
  if (c.text_aug.vocab_size > c.encoder.vocab_size) out.push_back("augment.text.vocab_size must not exceed encoder.vocab_size");
  if (c.encoder.max_tokens < kLongestCaption) {
    out.push_back("encoder.max_tokens must be at least " + std::to_string(kLongestCaption) + " (longest caption)");
  }

  const TrainConfig& t = c.train;
  if (t.stage1_epochs + t.stage2_epochs == 0) out.push_back("train: stage1_epochs + stage2_epochs must be positive");
  if (t.batch_size < 2) out.push_back("train.batch_size must be at least 2");
  if (t.finetune_batch_size < 2) out.push_back("train.finetune_batch_size must be at least 2");
  if (!(t.lr > 0.0)) out.push_back("train.lr must be positive");
  if (!(t.finetune_lr > 0.0)) out.push_back("train.finetune_lr must be positive");
  if (!(t.warmup >= 0.0 && t.warmup < 1.0)) out.push_back("train.warmup must lie in [0, 1)");
  if (!(t.finetune_warmup >= 0.0 && t.finetune_warmup < 1.0)) out.push_back("train.finetune_warmup must lie in [0, 1)");
  if (!(t.adamw.beta1 >= 0.0 && t.adamw.beta1 < 1.0)) out.push_back("train.beta1 must lie in [0, 1)");
  if (!(t.adamw.beta2 >= 0.0 && t.adamw.beta2 < 1.0)) out.push_back("train.beta2 must lie in [0, 1)");
  if (!(t.adamw.eps > 0.0)) out.push_back("train.eps must be positive");
  if (!(t.adamw.weight_decay >= 0.0)) out.push_back("train.weight_decay must be non-negative");
  if (!(t.clip_norm >= 0.0)) out.push_back("train.clip_norm must be non-negative (0 disables clipping)");
  if (!(t.tau > 0.0)) out.push_back("train.tau must be positive");
  if (!(t.alpha >= 0.0)) out.push_back("train.alpha must be non-negative");

  const EvalConfig& e = c.eval;
  if (e.split != "train" && e.split != "val" && e.split != "test") out.push_back("eval.split must be train, val or test");
  if (e.map_k < 1) out.push_back("eval.map_k must be at least 1");
  if (e.sts_pairs < 3) out.push_back("eval.sts_pairs must be at least 3");
  if (e.batch < 1) out.push_back("eval.batch must be at least 1");

  const BenchConfig& b = c.bench;
  if (b.sizes.size() < 2) out.push_back("bench.sizes needs at least two sizes");
  for (std::size_t i = 0; i < b.sizes.size(); ++i) {
    if (b.sizes[i] < 2) out.push_back("bench.sizes entries must be at least 2");
    if (i && b.sizes[i] <= b.sizes[i - 1]) out.push_back("bench.sizes must be strictly ascending");
  }
  if (b.repeats < 5) out.push_back("bench.repeats must be at least 5");
  if (b.pair_batch < 1) out.push_back("bench.pair_batch must be at least 1");
  return out;
}

inline void validate_config(const RunConfig& c) {
  const auto p = config_problems(c);
  if (p.empty()) return;
  std::string msg = "invalid configuration:";
  for (const auto& s : p) msg += "\n  " + s;
  throw ConfigError(msg);
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const EncoderConfig& c) {
  return {{"image_size", c.image_size}, {"patch", c.patch},         {"visual_dim", c.visual_dim},
          {"text_dim", c.text_dim},     {"model_dim", c.model_dim}, {"heads", c.heads},
          {"ffn_dim", c.ffn_dim},       {"vocab_size", c.vocab_size}, {"max_tokens", c.max_tokens},
          {"tav_layers", c.tav_layers}, {"ws_layers", c.ws_layers}, {"text_backbone_layers", c.text_backbone_layers},
          {"dropout", c.dropout},       {"ln_eps", c.ln_eps}};
}

inline nlohmann::json to_json(const RunConfig& c) {
  const auto& t = c.train;
  const auto& v = c.visual_aug;
  const auto& x = c.text_aug;
  return {
      {"seed", c.seed},
      {"out", c.out},
      {"data_dir", c.data_dir},
      {"n_samples", c.n_samples},
      {"encoder", to_json(c.encoder)},
      {"data",
       {{"image_size", c.data.image_size},
        {"grid", c.data.grid},
        {"min_objects", c.data.min_objects},
        {"max_objects", c.data.max_objects},
        {"spec_reuse", c.data.spec_reuse}}},
      {"augment",
       {{"visual",
         {{"crop_min", v.crop_min},
          {"crop_max", v.crop_max},
          {"flip_prob", v.flip_prob},
          {"noise_prob", v.noise_prob},
          {"noise_std", v.noise_std},
          {"jitter_prob", v.jitter_prob},
          {"jitter_gain", v.jitter_gain},
          {"jitter_bias", v.jitter_bias},
          {"gray_prob", v.gray_prob},
          {"output_height", v.output_height},
          {"output_width", v.output_width}}},
        {"text",
         {{"token_prob", x.token_prob},
          {"mask_frac", x.mask_frac},
          {"replace_frac", x.replace_frac},
          {"delete_frac", x.delete_frac},
          {"mask_token", x.mask_token},
          {"replace_low", x.replace_low},
          {"vocab_size", x.vocab_size}}}}},
      {"train",
       {{"stage1_epochs", t.stage1_epochs},
        {"stage2_epochs", t.stage2_epochs},
        {"batch_size", t.batch_size},
        {"lr", t.lr},
        {"warmup", t.warmup},
        {"finetune_epochs", t.finetune_epochs},
        {"finetune_batch_size", t.finetune_batch_size},
        {"finetune_lr", t.finetune_lr},
        {"finetune_warmup", t.finetune_warmup},
        {"beta1", t.adamw.beta1},
        {"beta2", t.adamw.beta2},
        {"eps", t.adamw.eps},
        {"weight_decay", t.adamw.weight_decay},
        {"clip_norm", t.clip_norm},
        {"tau", t.tau},
        {"alpha", t.alpha},
        {"pooling", to_string(t.pooling)},
        {"reset_optimizer", t.reset_optimizer},
        {"separate_single_modal_batch", t.separate_single_modal_batch},
        {"stage2_single_modal", t.stage2_single_modal},
        {"val_images", t.val_images}}},
      {"eval",
       {{"split", c.eval.split},
        {"map_k", c.eval.map_k},
        {"sts_pairs", c.eval.sts_pairs},
        {"itm_pooling", to_string(c.eval.itm_pooling)},
        {"within_pooling", to_string(c.eval.within_pooling)},
        {"batch", c.eval.batch}}},
      {"bench",
       {{"sizes", c.bench.sizes},
        {"repeats", c.bench.repeats},
        {"warmup", c.bench.warmup},
        {"pair_batch", c.bench.pair_batch},
        {"model", to_json(c.bench.model)}}},
  };
}

namespace detail {

/// Reads known keys from JSON objects, recording type errors and unknown keys
/// instead of stopping at the first one.
class FieldReader {
 public:
  explicit FieldReader(std::vector<std::string>& errors) : errors_(errors) {}

  /// Returns the sub-object at `key` of `obj` (or null when absent) and marks
  /// the key as known.
  const nlohmann::json* section(const nlohmann::json& obj, const std::string& path, const std::string& key) {
    known_[path].insert(key);
    if (!obj.is_object() || !obj.contains(key)) return nullptr;
    const auto& s = obj.at(key);
    const std::string full = join(path, key);
    if (!s.is_object()) {
      errors_.push_back(full + ": expected an object");
      return nullptr;
    }
    sections_.push_back({&s, full});
    return &s;
  }

  template <class V>
  void read(const nlohmann::json* obj, const std::string& path, const std::string& key, V& out) {
    known_[path].insert(key);
    if (!obj || !obj->contains(key)) return;
    const auto& j = obj->at(key);
    const std::string full = join(path, key);
    if constexpr (std::is_same_v<V, bool>) {
      if (!j.is_boolean()) return fail(full, "expected true or false");
      out = j.get<bool>();
    } else if constexpr (std::is_same_v<V, std::string>) {
      if (!j.is_string()) return fail(full, "expected a string");
      out = j.get<std::string>();
    } else if constexpr (std::is_same_v<V, Pooling>) {
      if (!j.is_string()) return fail(full, "expected \"max\" or \"mean\"");
      try {
        out = parse_pooling(j.get<std::string>());
      } catch (const ConfigError& e) {
        fail(full, e.what());
      }
    } else if constexpr (std::is_same_v<V, std::vector<std::size_t>>) {
      if (!j.is_array()) return fail(full, "expected an array of non-negative integers");
      std::vector<std::size_t> v;
      for (const auto& e : j) {
        if (!non_negative(e)) return fail(full, "expected an array of non-negative integers");
        v.push_back(e.get<std::size_t>());
      }
      out = std::move(v);
    } else if constexpr (std::is_floating_point_v<V>) {
      if (!j.is_number()) return fail(full, "expected a number");
      out = j.get<V>();
    } else if constexpr (std::is_unsigned_v<V>) {
      if (!non_negative(j)) return fail(full, "expected a non-negative integer");
      out = j.get<V>();
    } else {
      if (!j.is_number_integer()) return fail(full, "expected an integer");
      out = j.get<V>();
    }
  }

  static bool non_negative(const nlohmann::json& j) {
    return j.is_number_unsigned() || (j.is_number_integer() && j.get<std::int64_t>() >= 0);
  }

  void report_unknown(const nlohmann::json& root) {
    check_unknown(root, "");
    for (const auto& [obj, path] : sections_) check_unknown(*obj, path);
  }

 private:
  static std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

  void fail(const std::string& field, const std::string& why) { errors_.push_back(field + ": " + why); }

  void check_unknown(const nlohmann::json& obj, const std::string& path) {
    if (!obj.is_object()) return;
    for (auto it = obj.begin(); it != obj.end(); ++it) {
      if (!known_[path].count(it.key())) errors_.push_back(join(path, it.key()) + ": unknown field");
    }
  }

  std::vector<std::string>& errors_;
  std::map<std::string, std::set<std::string>> known_;
  std::vector<std::pair<const nlohmann::json*, std::string>> sections_;
};

inline void read_encoder(FieldReader& r, const nlohmann::json* s, const std::string& p, EncoderConfig& c) {
  r.read(s, p, "image_size", c.image_size);
  r.read(s, p, "patch", c.patch);
  r.read(s, p, "visual_dim", c.visual_dim);
  r.read(s, p, "text_dim", c.text_dim);
  r.read(s, p, "model_dim", c.model_dim);
  r.read(s, p, "heads", c.heads);
  r.read(s, p, "ffn_dim", c.ffn_dim);
  r.read(s, p, "vocab_size", c.vocab_size);
  r.read(s, p, "max_tokens", c.max_tokens);
  r.read(s, p, "tav_layers", c.tav_layers);
  r.read(s, p, "ws_layers", c.ws_layers);
  r.read(s, p, "text_backbone_layers", c.text_backbone_layers);
  r.read(s, p, "dropout", c.dropout);
  r.read(s, p, "ln_eps", c.ln_eps);
}

}  // namespace detail

/// Parses a JSON config over the defaults. Collects every type error and
/// unknown field, then runs cross-field validation; throws ConfigError
/// listing all of them.
inline RunConfig parse_config(const nlohmann::json& root, bool validate = true) {
  std::vector<std::string> errors;
  RunConfig c;
  if (!root.is_null() && !root.is_object()) throw ConfigError("configuration root must be a JSON object");
  detail::FieldReader r(errors);
  const nlohmann::json* top = root.is_object() ? &root : nullptr;
  r.read(top, "", "seed", c.seed);
  r.read(top, "", "out", c.out);
  r.read(top, "", "data_dir", c.data_dir);
  r.read(top, "", "n_samples", c.n_samples);
  if (top) {
    detail::read_encoder(r, r.section(root, "", "encoder"), "encoder", c.encoder);
    const auto* d = r.section(root, "", "data");
    r.read(d, "data", "image_size", c.data.image_size);
    r.read(d, "data", "grid", c.data.grid);
    r.read(d, "data", "min_objects", c.data.min_objects);
    r.read(d, "data", "max_objects", c.data.max_objects);
    r.read(d, "data", "spec_reuse", c.data.spec_reuse);
    if (const auto* a = r.section(root, "", "augment")) {
      const auto* v = r.section(*a, "augment", "visual");
      auto& va = c.visual_aug;
      r.read(v, "augment.visual", "crop_min", va.crop_min);
      r.read(v, "augment.visual", "crop_max", va.crop_max);
      r.read(v, "augment.visual", "flip_prob", va.flip_prob);
      r.read(v, "augment.visual", "noise_prob", va.noise_prob);
      r.read(v, "augment.visual", "noise_std", va.noise_std);
      r.read(v, "augment.visual", "jitter_prob", va.jitter_prob);
      r.read(v, "augment.visual", "jitter_gain", va.jitter_gain);
      r.read(v, "augment.visual", "jitter_bias", va.jitter_bias);
      r.read(v, "augment.visual", "gray_prob", va.gray_prob);
      r.read(v, "augment.visual", "output_height", va.output_height);
      r.read(v, "augment.visual", "output_width", va.output_width);
      const auto* t = r.section(*a, "augment", "text");
      auto& ta = c.text_aug;
      r.read(t, "augment.text", "token_prob", ta.token_prob);
      r.read(t, "augment.text", "mask_frac", ta.mask_frac);
      r.read(t, "augment.text", "replace_frac", ta.replace_frac);
      r.read(t, "augment.text", "delete_frac", ta.delete_frac);
      r.read(t, "augment.text", "mask_token", ta.mask_token);
      r.read(t, "augment.text", "replace_low", ta.replace_low);
      r.read(t, "augment.text", "vocab_size", ta.vocab_size);
    }
    const auto* t = r.section(root, "", "train");
    auto& tr = c.train;
    r.read(t, "train", "stage1_epochs", tr.stage1_epochs);
    r.read(t, "train", "stage2_epochs", tr.stage2_epochs);
    r.read(t, "train", "batch_size", tr.batch_size);
    r.read(t, "train", "lr", tr.lr);
    r.read(t, "train", "warmup", tr.warmup);
    r.read(t, "train", "finetune_epochs", tr.finetune_epochs);
    r.read(t, "train", "finetune_batch_size", tr.finetune_batch_size);
    r.read(t, "train", "finetune_lr", tr.finetune_lr);
    r.read(t, "train", "finetune_warmup", tr.finetune_warmup);
    r.read(t, "train", "beta1", tr.adamw.beta1);
    r.read(t, "train", "beta2", tr.adamw.beta2);
    r.read(t, "train", "eps", tr.adamw.eps);
    r.read(t, "train", "weight_decay", tr.adamw.weight_decay);
    r.read(t, "train", "clip_norm", tr.clip_norm);
    r.read(t, "train", "tau", tr.tau);
    r.read(t, "train", "alpha", tr.alpha);
    r.read(t, "train", "pooling", tr.pooling);
    r.read(t, "train", "reset_optimizer", tr.reset_optimizer);
    r.read(t, "train", "separate_single_modal_batch", tr.separate_single_modal_batch);
    r.read(t, "train", "stage2_single_modal", tr.stage2_single_modal);
    r.read(t, "train", "val_images", tr.val_images);
    const auto* e = r.section(root, "", "eval");
    r.read(e, "eval", "split", c.eval.split);
    r.read(e, "eval", "map_k", c.eval.map_k);
    r.read(e, "eval", "sts_pairs", c.eval.sts_pairs);
    r.read(e, "eval", "itm_pooling", c.eval.itm_pooling);
    r.read(e, "eval", "within_pooling", c.eval.within_pooling);
    r.read(e, "eval", "batch", c.eval.batch);
    const auto* b = r.section(root, "", "bench");
    r.read(b, "bench", "sizes", c.bench.sizes);
    r.read(b, "bench", "repeats", c.bench.repeats);
    r.read(b, "bench", "warmup", c.bench.warmup);
    r.read(b, "bench", "pair_batch", c.bench.pair_batch);
    if (b) detail::read_encoder(r, r.section(*b, "bench", "model"), "bench.model", c.bench.model);
    r.report_unknown(root);
  }
  if (validate) {
    for (auto& p : config_problems(c)) errors.push_back(std::move(p));
  }
  if (!errors.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& s : errors) msg += "\n  " + s;
    throw ConfigError(msg);
  }
  return c;
}

/// Reads and parses a config file; an empty file yields the defaults.
inline RunConfig load_config(const std::filesystem::path& path, bool validate = true) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) return parse_config(nlohmann::json(), validate);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return parse_config(j, validate);
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  std::vector<std::string> errors;
  detail::FieldReader r(errors);
  EncoderConfig c;
  detail::read_encoder(r, &j, "encoder", c);
  if (!errors.empty()) throw ConfigError("bad encoder config: " + errors.front());
  return c;
}

/// Provenance record written next to every run's outputs.
inline nlohmann::json provenance(const RunConfig& c, const std::string& command) {
  return {{"toolkit_version", kToolkitVersion}, {"command", command}, {"seed", c.seed}, {"config", to_json(c)}};
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

}  // namespace cookie
