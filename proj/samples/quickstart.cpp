// Smallest end-to-end use of the library: synthetic corpus, two-stage
// pre-training, triplet fine-tuning and a retrieval report.

#include <filesystem>
#include <iostream>

#include "cookie/eval.hpp"
#include "cookie/train.hpp"

int main(int argc, char** argv) {
  namespace fs = std::filesystem;
  using namespace cookie;

  RunConfig cfg = argc > 1 ? load_config(argv[1]) : RunConfig{};
  if (argc <= 1) {
    cfg.n_samples = 256;
    cfg.train.stage1_epochs = 2;
    cfg.train.stage2_epochs = 1;
    cfg.train.finetune_epochs = 1;
    cfg.eval.sts_pairs = 200;
  }
  const fs::path out = fs::path(cfg.out) / "quickstart";

  const Corpus corpus = generate_corpus(cfg.n_samples, cfg.seed, cfg.data);
  const TrainResult pre = run_pretrain(cfg, corpus, out);
  const Checkpoint init = load_checkpoint(pre.stages.back().best_checkpoint);
  const TrainResult ft = run_finetune(cfg, corpus, out, &init);

  const auto params = params_from_checkpoint(load_checkpoint(ft.stages.front().best_checkpoint));
  const RetrievalReport rep = eval_retrieval(params, corpus, split_ids(corpus, Split::test), cfg.eval, cfg.seed);
  std::cout << rep.summary().dump(2) << '\n';
  std::cout << "random R@1 (image to text): " << rep.details()["random_r1_i2t"] << "%\n";
  return 0;
}
