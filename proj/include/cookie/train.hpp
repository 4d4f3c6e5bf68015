#pragma once

// Training loops for two-stage pre-training and triplet fine-tuning.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cookie/checkpoint.hpp"
#include "cookie/config.hpp"
#include "cookie/data.hpp"
#include "cookie/encoders.hpp"
#include "cookie/eval.hpp"
#include "cookie/objectives.hpp"
#include "cookie/optim.hpp"

namespace cookie {

// ---------------------------------------------------------------------------
// Checkpoint conversion

inline Checkpoint make_checkpoint(const EncoderParams<float>& params, const OptimState<float>* opt, nlohmann::json meta) {
  Checkpoint ck;
  meta["encoder"] = to_json(params.config);
  meta["toolkit_version"] = kToolkitVersion;
  for (const auto* p : params.parameters()) ck.tensors.emplace(p->name, p->value);
  if (opt) {
    meta["opt_step"] = opt->step;
    for (const auto& [name, t] : opt->m) ck.tensors.emplace("opt.m/" + name, t);
    for (const auto& [name, t] : opt->v) ck.tensors.emplace("opt.v/" + name, t);
  }
  ck.meta = std::move(meta);
  return ck;
}

inline EncoderParams<float> params_from_checkpoint(const Checkpoint& ck) {
  if (!ck.meta.contains("encoder")) throw CheckpointError("checkpoint metadata lacks the encoder configuration");
  EncoderConfig cfg;
  try {
    cfg = encoder_config_from_json(ck.meta.at("encoder"));
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint encoder configuration is invalid: ") + e.what());
  }
  auto params = EncoderParams<float>::init(cfg, 0);
  for (auto* p : params.parameters()) {
    const Tensor<float>& t = ck.get<float>(p->name);
    if (t.shape() != p->value.shape()) {
      throw CheckpointError("tensor '" + p->name + "' has shape " + to_string(t.shape()) + ", model expects " + to_string(p->value.shape()));
    }
    p->value = t;
  }
  return params;
}

/// Optimizer moments stored in `ck`; empty state if the checkpoint has none.
inline OptimState<float> optim_from_checkpoint(const Checkpoint& ck, const AdamWConfig& hp) {
  OptimState<float> st;
  st.hp = hp;
  if (!ck.meta.contains("opt_step")) return st;
  st.step = ck.meta.at("opt_step").get<std::uint64_t>();
  for (const auto& [name, t] : ck.tensors) {
    if (name.starts_with("opt.m/")) st.m.emplace(name.substr(6), std::get<Tensor<float>>(t));
    if (name.starts_with("opt.v/")) st.v.emplace(name.substr(6), std::get<Tensor<float>>(t));
  }
  return st;
}

// ---------------------------------------------------------------------------
// Loop pieces

inline PairBatch make_pair_batch(const Corpus& corpus, const Batch& b) {
  PairBatch pb;
  for (const auto& item : b) {
    const Sample& s = corpus.at(item.id);
    pb.images.push_back(&s.image);
    pb.captions.push_back(&s.captions.at(item.caption));
    pb.sample_ids.push_back(item.id);
  }
  return pb;
}

/// Validation ids: the first `limit` samples of the validation split (all if 0).
inline std::vector<std::uint64_t> validation_ids(const Corpus& corpus, std::size_t limit) {
  auto ids = split_ids(corpus, Split::val);
  if (limit > 0 && ids.size() > limit) ids.resize(limit);
  return ids;
}

/// Image-text Rsum on `ids`, or NaN when there are fewer than 10 images.
inline double validation_rsum(const EncoderParams<float>& params, const Corpus& corpus, const std::vector<std::uint64_t>& ids,
                              Pooling pooling) {
  if (ids.size() < 10) return std::numeric_limits<double>::quiet_NaN();
  const SplitItems items = gather_items(corpus, ids);
  return itm_metrics(embed_images(params, items.images, pooling), embed_captions(params, items.captions, pooling), items.caption_owner)
      .rsum;
}

/// Test seam: runs before every optimizer step with the live parameters.
using StepHook = std::function<void(EncoderParams<float>&, std::uint64_t step)>;

struct StageOutcome {
  std::string phase;  // "stage1", "stage2" or "finetune"
  std::filesystem::path last_checkpoint;
  std::filesystem::path best_checkpoint;
  double best_val_rsum = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t steps = 0;
  std::vector<nlohmann::json> log;
};

struct TrainResult {
  EncoderParams<float> params;  // weights after the final step
  OptimState<float> optimizer;
  std::vector<StageOutcome> stages;
};

namespace detail {

struct StagePlan {
  std::string phase;
  std::uint64_t phase_tag = 0;
  std::size_t epochs = 0;
  std::size_t batch_size = 0;
  double lr = 0.0;
  double warmup = 0.0;
};

struct StepLoss {
  Var<float> total;
  std::vector<std::pair<std::string, Var<float>>> parts;
};

using LossFn = std::function<StepLoss(Tape<float>&, const EncoderParams<float>&, const PairBatch&, std::uint64_t step,
                                      const ForwardContext&)>;

inline void append_line(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot append to '" + path.string() + "'");
  out << j.dump() << '\n';
}

inline StageOutcome run_stage(const RunConfig& cfg, const Corpus& corpus, const std::filesystem::path& out_dir,
                              const StagePlan& plan, const LossFn& loss_fn, EncoderParams<float>& params,
                              OptimState<float>& opt, const StepHook& hook) {
  const auto train_ids = split_ids(corpus, Split::train);
  const auto val_ids = validation_ids(corpus, cfg.train.val_images);
  // Batch counts per epoch are fixed by the split size.
  const std::size_t per_epoch = plan_epoch(corpus, train_ids, plan.batch_size, 0).size();
  if (per_epoch == 0) throw DataError("training split too small for batch size " + std::to_string(plan.batch_size));
  const std::uint64_t total = per_epoch * plan.epochs;

  StageOutcome res;
  res.phase = plan.phase;
  res.last_checkpoint = out_dir / (plan.phase + "_last.ckpt");
  res.best_checkpoint = out_dir / (plan.phase + "_best.ckpt");
  const auto log_path = out_dir / "train_log.jsonl";
  const nlohmann::json base_meta = {{"phase", plan.phase}, {"seed", cfg.seed}, {"config", to_json(cfg)}};

  auto meta_at = [&](std::size_t epoch, std::uint64_t step, double val) {
    nlohmann::json m = base_meta;
    m["epoch"] = epoch;
    m["step"] = step;
    m["val_rsum"] = std::isnan(val) ? nlohmann::json(nullptr) : nlohmann::json(val);
    return m;
  };
  save_checkpoint(make_checkpoint(params, &opt, meta_at(0, 0, std::numeric_limits<double>::quiet_NaN())), res.last_checkpoint);

  std::mt19937_64 dropout_rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(SeedStream::dropout), plan.phase_tag}));
  const ForwardContext ctx{true, &dropout_rng};
  std::uint64_t step = 0;
  for (std::size_t epoch = 1; epoch <= plan.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto batches =
        plan_epoch(corpus, train_ids, plan.batch_size, derive_seed(cfg.seed, {static_cast<std::uint64_t>(SeedStream::shuffle), plan.phase_tag, epoch}));
    std::map<std::string, double> sums;
    double grad_norm_sum = 0.0, lr = 0.0;
    for (const auto& b : batches) {
      if (hook) hook(params, step);
      lr = lr_schedule(step, total, plan.lr, plan.warmup);
      Tape<float> tape;
      const PairBatch pb = make_pair_batch(corpus, b);
      auto abort = [&](const std::string& why) {
        return TrainingError(plan.phase + ": " + why + " at epoch " + std::to_string(epoch) + ", step " + std::to_string(step) +
                             "; last good checkpoint is '" + res.last_checkpoint.string() + "'");
      };
      std::optional<StepLoss> attempt;
      try {
        attempt = loss_fn(tape, params, pb, step, ctx);
      } catch (const NumericError& e) {
        throw abort(std::string("non-finite forward pass (") + e.what() + ")");
      }
      StepLoss& loss = *attempt;
      const double lv = loss.total.value()[0];
      if (!std::isfinite(lv)) throw abort("non-finite loss");
      sums["loss_total"] += lv;
      for (const auto& [name, v] : loss.parts) sums[name] += v.value()[0];
      GradientMap<float> grads = tape.backward(loss.total);
      grad_norm_sum += clip_global_norm(grads, cfg.train.clip_norm);
      adamw_step(params.parameters(), grads, opt, lr);
      ++step;
    }
    const double val = validation_rsum(params, corpus, val_ids, cfg.train.pooling);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    save_checkpoint(make_checkpoint(params, &opt, meta_at(epoch, step, val)), res.last_checkpoint);
    if (!std::isnan(val) && (std::isnan(res.best_val_rsum) || val > res.best_val_rsum)) {
      res.best_val_rsum = val;
      save_checkpoint(make_checkpoint(params, nullptr, meta_at(epoch, step, val)), res.best_checkpoint);
    }

    nlohmann::json rec = {{"stage", plan.phase}, {"epoch", epoch}, {"step", step}, {"lr", lr},
                          {"grad_norm", grad_norm_sum / static_cast<double>(batches.size())}, {"wall_time_s", secs}};
    for (const auto& [name, s] : sums) rec[name] = s / static_cast<double>(batches.size());
    rec["val_rsum"] = std::isnan(val) ? nlohmann::json(nullptr) : nlohmann::json(val);
    append_line(log_path, rec);
    res.log.push_back(std::move(rec));
  }
  // Without a usable validation split the last weights stand in for the best.
  if (std::isnan(res.best_val_rsum)) {
    save_checkpoint(make_checkpoint(params, nullptr, meta_at(plan.epochs, step, res.best_val_rsum)), res.best_checkpoint);
  }
  res.steps = step;
  return res;
}

}  // namespace detail

/// Pre-training. `stages` selects stage 1, stage 2 or both (in order); the
/// model starts from `init` when given, otherwise from a seeded random init.
inline TrainResult run_pretrain(const RunConfig& cfg, const Corpus& corpus, const std::filesystem::path& out_dir,
                                const std::vector<int>& stages = {1, 2}, const Checkpoint* init = nullptr,
                                const StepHook& hook = {}) {
  validate_config(cfg);
  if (stages.empty()) throw ConfigError("no pre-training stage selected");
  for (int s : stages) {
    if (s != 1 && s != 2) throw ConfigError("pre-training stage must be 1 or 2, got " + std::to_string(s));
  }
  std::filesystem::create_directories(out_dir);
  TrainResult r{init ? params_from_checkpoint(*init)
                     : EncoderParams<float>::init(cfg.encoder, stream_seed(cfg.seed, SeedStream::init)),
                {}, {}};
  r.optimizer.hp = cfg.train.adamw;
  if (init && !cfg.train.reset_optimizer) r.optimizer = optim_from_checkpoint(*init, cfg.train.adamw);
  const PretrainSettings settings = cfg.pretrain_settings();
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const int stage = stages[i];
    if (i > 0 && cfg.train.reset_optimizer) r.optimizer.reset();
    detail::StagePlan plan{"stage" + std::to_string(stage), static_cast<std::uint64_t>(stage),
                           stage == 1 ? cfg.train.stage1_epochs : cfg.train.stage2_epochs, cfg.train.batch_size, cfg.train.lr,
                           cfg.train.warmup};
    const auto train_ids = split_ids(corpus, Split::train);
    detail::LossFn fn = [&](Tape<float>& tape, const EncoderParams<float>& p, const PairBatch& b, std::uint64_t step,
                            const ForwardContext& ctx) {
      const std::uint64_t aug_seed = derive_seed(cfg.seed, {static_cast<std::uint64_t>(SeedStream::augment), plan.phase_tag, step});
      std::optional<PairBatch> single;
      if (stage == 2 && cfg.train.stage2_single_modal && cfg.train.separate_single_modal_batch) {
        const auto plan_b =
            plan_epoch(corpus, train_ids, cfg.train.batch_size, derive_seed(aug_seed, {static_cast<std::uint64_t>(SeedStream::shuffle)}));
        single = make_pair_batch(corpus, plan_b.front());
      }
      const int objective = stage == 2 && !cfg.train.stage2_single_modal ? 1 : stage;
      PretrainLoss<float> l = pretrain_loss(tape, p, b, objective, settings, aug_seed, ctx, single ? &*single : nullptr);
      detail::StepLoss out{l.total, {{"loss_i2t", l.i2t}, {"loss_t2i", l.t2i}}};
      if (l.image_cl) out.parts.emplace_back("loss_image_cl", *l.image_cl);
      if (l.text_cl) out.parts.emplace_back("loss_text_cl", *l.text_cl);
      return out;
    };
    r.stages.push_back(detail::run_stage(cfg, corpus, out_dir, plan, fn, r.params, r.optimizer, hook));
  }
  return r;
}

/// Fine-tuning with the hard-negative triplet loss, from `init` or from a
/// seeded random init.
inline TrainResult run_finetune(const RunConfig& cfg, const Corpus& corpus, const std::filesystem::path& out_dir,
                                const Checkpoint* init = nullptr, const StepHook& hook = {}) {
  validate_config(cfg);
  std::filesystem::create_directories(out_dir);
  TrainResult r{init ? params_from_checkpoint(*init)
                     : EncoderParams<float>::init(cfg.encoder, stream_seed(cfg.seed, SeedStream::init)),
                {}, {}};
  r.optimizer.hp = cfg.train.adamw;
  detail::StagePlan plan{"finetune", 3, cfg.train.finetune_epochs, cfg.train.finetune_batch_size, cfg.train.finetune_lr,
                         cfg.train.finetune_warmup};
  const float alpha = static_cast<float>(cfg.train.alpha);
  detail::LossFn fn = [&](Tape<float>& tape, const EncoderParams<float>& p, const PairBatch& b, std::uint64_t,
                          const ForwardContext& ctx) {
    Var<float> img = encode_images(tape, p, stack_images<float>(b.images), cfg.train.pooling, ctx);
    Var<float> txt = encode_texts(tape, p, pad_captions(b.captions, p.config.max_tokens), cfg.train.pooling, ctx);
    Var<float> l = hard_triplet_loss(img, txt, alpha);
    return detail::StepLoss{l, {{"loss_triplet", l}}};
  };
  r.stages.push_back(detail::run_stage(cfg, corpus, out_dir, plan, fn, r.params, r.optimizer, hook));
  return r;
}

}  // namespace cookie
