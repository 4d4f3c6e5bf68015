#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cookie_cli_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

/// Runs the tool with `args`, silencing its output, and returns the exit status.
int run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + (env.empty() ? "" : " ") + COOKIE_KIT_CLI + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

/// A model and schedule small enough for a seconds-long pipeline.
fs::path tiny_config(const fs::path& dir) {
  const nlohmann::json j = {
      {"n_samples", 200},
      {"encoder", {{"visual_dim", 16}, {"text_dim", 16}, {"model_dim", 16}, {"heads", 2}, {"ffn_dim", 16}, {"ws_layers", 1}}},
      {"train",
       {{"stage1_epochs", 1}, {"stage2_epochs", 1}, {"finetune_epochs", 1}, {"batch_size", 16}, {"finetune_batch_size", 16},
        {"val_images", 0}}},
      {"eval", {{"sts_pairs", 60}}},
      {"bench", {{"sizes", {4, 8, 16, 32}}, {"repeats", 5}, {"warmup", 0}}}};
  const fs::path p = dir / "tiny.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

}  // namespace

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("frobnicate"), 2);
  EXPECT_EQ(run("gen-data --no-such-flag"), 2);
  EXPECT_EQ(run("pretrain --stage 3"), 2);
  EXPECT_EQ(run("eval"), 2);
  EXPECT_EQ(run("--help"), 0);
}

TEST(Cli, ConfigErrorsExitTwo) {
  const fs::path d = scratch_dir("config");
  std::ofstream(d / "bad.json") << R"({"train": {"tau": -1}})";
  EXPECT_EQ(run("gen-data --config " + (d / "bad.json").string() + " --out " + d.string()), 2);
  std::ofstream(d / "broken.json") << "{";
  EXPECT_EQ(run("gen-data --config " + (d / "broken.json").string() + " --out " + d.string()), 2);
  EXPECT_EQ(run("gen-data --n 4 --out " + d.string(), "COOKIE_KIT_THREADS=0"), 2);
  EXPECT_FALSE(fs::exists(d / "data"));
  fs::remove_all(d);
}

TEST(Cli, GenDataWritesCorpusAndProvenance) {
  const fs::path d = scratch_dir("gen");
  ASSERT_EQ(run("gen-data --n 64 --seed 1 --out " + d.string()), 0);
  EXPECT_TRUE(fs::exists(d / "data" / "manifest.jsonl"));
  std::size_t images = 0;
  for (const auto& e : fs::directory_iterator(d / "data" / "images")) images += e.path().extension() == ".f32";
  EXPECT_EQ(images, 64u);
  const auto prov = read_json(d / "gen-data" / "run_config.json");
  EXPECT_EQ(prov.at("seed"), 1);
  EXPECT_EQ(prov.at("config").at("seed"), 1);
  EXPECT_TRUE(prov.contains("toolkit_version"));
  fs::remove_all(d);
}

TEST(Cli, MissingCorpusIsRuntimeError) {
  const fs::path d = scratch_dir("missing");
  EXPECT_EQ(run("pretrain --out " + d.string()), 1);
  fs::remove_all(d);
}

TEST(Cli, FullPipeline) {
  const fs::path d = scratch_dir("pipeline");
  const std::string base = " --config " + tiny_config(d).string() + " --seed 3 --out " + d.string();
  ASSERT_EQ(run("gen-data" + base), 0);
  ASSERT_EQ(run("pretrain" + base), 0);
  ASSERT_TRUE(fs::exists(d / "pretrain" / "stage2_best.ckpt"));
  ASSERT_EQ(run("finetune --ckpt " + (d / "pretrain" / "stage2_best.ckpt").string() + base), 0);
  const std::string ckpt = (d / "finetune" / "finetune_best.ckpt").string();
  ASSERT_EQ(run("eval --ckpt " + ckpt + " --split test" + base), 0);
  const auto report = read_json(d / "eval" / "report.json");
  EXPECT_EQ(report.size(), 11u);
  for (const char* k : {"r1_i2t", "r5_i2t", "r10_i2t", "r1_t2i", "r5_t2i", "r10_t2i", "rsum", "map_at_k", "sts_pearson",
                        "sts_spearman", "sts_mean"}) {
    EXPECT_TRUE(report.contains(k)) << k;
  }
  EXPECT_TRUE(fs::exists(d / "eval" / "report_details.json"));
  ASSERT_EQ(run("attn --ckpt " + ckpt + " --n 4" + base), 0);
  std::ifstream csv(d / "attn" / "attention_image.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, "sample_id,token_index,token_label,score,rank");
  ASSERT_EQ(run("bench --sizes 4,8,16,32 --repeats 5" + base), 0);
  const auto bench = read_json(d / "bench" / "bench.json");
  EXPECT_TRUE(bench.contains("double-stream"));
  EXPECT_TRUE(bench.contains("one-stream-sim"));
  // the corpus is never touched by later commands
  const auto manifest_time = fs::last_write_time(d / "data" / "manifest.jsonl");
  ASSERT_EQ(run("pretrain --stage 1" + base), 0);
  EXPECT_EQ(fs::last_write_time(d / "data" / "manifest.jsonl"), manifest_time);
  fs::remove_all(d);
}
