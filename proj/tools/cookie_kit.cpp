// cookie_kit: corpus generation, pre-training, fine-tuning, evaluation,
// attention dumps and the scaling benchmark behind one command.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "cookie/bench.hpp"
#include "cookie/eval.hpp"
#include "cookie/parallel.hpp"
#include "cookie/train.hpp"

namespace fs = std::filesystem;
using namespace cookie;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> data;
  std::optional<std::size_t> n;
  std::string ckpt;
  std::optional<std::string> split;
  std::string stage = "both";
  std::vector<std::size_t> sizes;
  std::optional<std::size_t> repeats;
};

/// Defaults, then the config file, then flags.
RunConfig resolve(const Options& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_config(o.config, false);
  if (o.seed) c.seed = *o.seed;
  if (o.out) c.out = *o.out;
  if (o.data) c.data_dir = *o.data;
  if (o.split) c.eval.split = *o.split;
  if (!o.sizes.empty()) c.bench.sizes = o.sizes;
  if (o.repeats) c.bench.repeats = *o.repeats;
  validate_config(c);
  return c;
}

std::string command_line(int argc, char** argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) s += (i ? " " : "") + std::string(argv[i]);
  return s;
}

fs::path prepare(const RunConfig& c, const std::string& sub, const std::string& cmd) {
  const fs::path dir = fs::path(c.out) / sub;
  fs::create_directories(dir);
  write_json(dir / "run_config.json", provenance(c, cmd));
  return dir;
}

Corpus open_corpus(const RunConfig& c) {
  const fs::path dir = c.corpus_dir();
  if (!fs::exists(dir / "manifest.jsonl")) {
    throw IoError("no corpus at '" + dir.string() + "'; run gen-data first or pass --data");
  }
  Corpus corpus = load_corpus(dir);
  if (corpus.config.image_size != c.encoder.image_size) {
    throw ConfigError("corpus images are " + std::to_string(corpus.config.image_size) + " px but encoder.image_size is " +
                      std::to_string(c.encoder.image_size));
  }
  return corpus;
}

std::optional<Checkpoint> open_checkpoint(const std::string& path) {
  if (path.empty()) return std::nullopt;
  return load_checkpoint(path);
}

std::vector<int> parse_stages(const std::string& s) {
  if (s == "both") return {1, 2};
  if (s == "1") return {1};
  if (s == "2") return {2};
  throw ConfigError("--stage must be 1, 2 or both, got '" + s + "'");
}

void print_outcome(const StageOutcome& s) {
  std::cout << s.phase << ": " << s.steps << " steps, best checkpoint " << s.best_checkpoint.string();
  if (!std::isnan(s.best_val_rsum)) std::cout << " (validation Rsum " << s.best_val_rsum << ")";
  std::cout << '\n';
}

int gen_data(const Options& o, const std::string& cmd) {
  RunConfig c = resolve(o);
  if (o.n) c.n_samples = *o.n;
  validate_config(c);
  prepare(c, "gen-data", cmd);
  const Corpus corpus = generate_corpus(c.n_samples, c.seed, c.data);
  save_corpus(corpus, c.corpus_dir());
  std::cout << "wrote " << corpus.size() << " samples to " << c.corpus_dir().string() << '\n';
  return 0;
}

int pretrain(const Options& o, const std::string& cmd) {
  const RunConfig c = resolve(o);
  const auto stages = parse_stages(o.stage);
  const Corpus corpus = open_corpus(c);
  const auto init = open_checkpoint(o.ckpt);
  const fs::path dir = prepare(c, "pretrain", cmd);
  const auto r = run_pretrain(c, corpus, dir, stages, init ? &*init : nullptr);
  for (const auto& s : r.stages) print_outcome(s);
  return 0;
}

int finetune(const Options& o, const std::string& cmd) {
  const RunConfig c = resolve(o);
  const Corpus corpus = open_corpus(c);
  const auto init = open_checkpoint(o.ckpt);
  if (!init) std::cerr << "note: no --ckpt given, fine-tuning from a random initialization\n";
  const fs::path dir = prepare(c, "finetune", cmd);
  print_outcome(run_finetune(c, corpus, dir, init ? &*init : nullptr).stages.front());
  return 0;
}

int eval(const Options& o, const std::string& cmd) {
  const RunConfig c = resolve(o);
  if (o.ckpt.empty()) throw ConfigError("eval needs --ckpt");
  const Corpus corpus = open_corpus(c);
  const auto params = params_from_checkpoint(load_checkpoint(o.ckpt));
  const fs::path dir = prepare(c, "eval", cmd);
  const auto rep = eval_retrieval(params, corpus, split_ids(corpus, parse_split(c.eval.split)), c.eval, c.seed);
  write_json(dir / "report.json", rep.summary());
  write_json(dir / "report_details.json", rep.details());
  std::cout << rep.summary().dump(2) << '\n';
  return 0;
}

int attn(const Options& o, const std::string& cmd) {
  const RunConfig c = resolve(o);
  if (o.ckpt.empty()) throw ConfigError("attn needs --ckpt");
  const Corpus corpus = open_corpus(c);
  const auto params = params_from_checkpoint(load_checkpoint(o.ckpt));
  auto ids = split_ids(corpus, parse_split(c.eval.split));
  ids.resize(std::min(ids.size(), o.n.value_or(16)));
  if (ids.empty()) throw DataError("split '" + c.eval.split + "' has no samples");
  const fs::path dir = prepare(c, "attn", cmd);
  const auto images = image_attention(params, corpus, ids, c.eval.itm_pooling);
  write_attention_csv(dir / "attention_image.csv", images);
  write_attention_csv(dir / "attention_text.csv", text_attention(params, corpus, ids, c.eval.itm_pooling));
  std::size_t above = 0;
  for (const auto& a : images) above += a.object_auc > 0.5;
  std::cout << "object patches outrank background in " << above << " of " << images.size() << " images\n";
  return 0;
}

int bench(const Options& o, const std::string& cmd) {
  const RunConfig c = resolve(o);
  const fs::path dir = prepare(c, "bench", cmd);
  const Corpus corpus = bench_corpus(c.bench, c.seed);
  const auto in = make_bench_inputs(c.bench, corpus, c.seed);
  const auto ds = bench_retrieval(BenchMode::double_stream, c.bench, in);
  const auto os = bench_retrieval(BenchMode::one_stream, c.bench, in);
  write_bench_csv(dir / "bench.csv", {ds, os});
  const auto summary = bench_summary({ds, os});
  write_json(dir / "bench.json", summary);
  std::cout << summary.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"COOKIE dual-stream contrastive toolkit"};
  app.require_subcommand(1);
  Options o;
  const std::string cmd = command_line(argc, argv);

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON config file; flags override its values")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "Global seed");
    sub->add_option("--out", o.out, "Output directory");
    sub->add_option("--data", o.data, "Corpus directory (default <out>/data)");
  };
  auto* gen = app.add_subcommand("gen-data", "Generate and save the synthetic corpus");
  common(gen);
  gen->add_option("--n", o.n, "Number of samples");
  auto* pre = app.add_subcommand("pretrain", "Two-stage contrastive pre-training");
  common(pre);
  pre->add_option("--stage", o.stage, "1, 2 or both")->check(CLI::IsMember({"1", "2", "both"}));
  pre->add_option("--ckpt", o.ckpt, "Initial checkpoint")->check(CLI::ExistingFile);
  auto* ft = app.add_subcommand("finetune", "Hard-triplet fine-tuning");
  common(ft);
  ft->add_option("--ckpt", o.ckpt, "Pre-trained checkpoint")->check(CLI::ExistingFile);
  auto* ev = app.add_subcommand("eval", "Retrieval, within-modal and text-similarity metrics");
  common(ev);
  ev->add_option("--ckpt", o.ckpt, "Checkpoint to evaluate")->required()->check(CLI::ExistingFile);
  ev->add_option("--split", o.split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  auto* at = app.add_subcommand("attn", "Dump WS-TE attention rankings as CSV");
  common(at);
  at->add_option("--ckpt", o.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  at->add_option("--split", o.split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  at->add_option("--n", o.n, "Number of samples (default 16)");
  auto* be = app.add_subcommand("bench", "Double-stream vs one-stream retrieval scaling");
  common(be);
  be->add_option("--sizes", o.sizes, "Gallery sizes, comma separated")->delimiter(',');
  be->add_option("--repeats", o.repeats, "Timed repeats per size (at least 5)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    (void)thread_limit();
    if (*gen) return gen_data(o, cmd);
    if (*pre) return pretrain(o, cmd);
    if (*ft) return finetune(o, cmd);
    if (*ev) return eval(o, cmd);
    if (*at) return attn(o, cmd);
    if (*be) return bench(o, cmd);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
