#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cktgen/model.hpp"
#include "cktgen/optim.hpp"

namespace cktgen {

enum class TrainMode { Conditional, Unconditional };
enum class Ablation { None, NceCg, Vae, Filter };

NLOHMANN_JSON_SERIALIZE_ENUM(TrainMode, {{TrainMode::Conditional, "cond"}, {TrainMode::Unconditional, "uncond"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Ablation,
                             {{Ablation::None, "none"}, {Ablation::NceCg, "nce_cg"}, {Ablation::Vae, "vae"}, {Ablation::Filter, "filter"}})

struct TrainConfig {
  TrainMode mode = TrainMode::Conditional;
  Ablation ablation = Ablation::None;
  LossWeights weights;
  double lr = 1e-4;
  double weight_decay = 0.01;
  int batch_size = 32;
  int epochs = 300;
  int patience = 30;         // epochs without validation improvement; 0 disables
  double val_fraction = 0.05;
  long max_steps = 0;        // 0: no cap
  std::uint64_t seed = 0;
  bool deterministic = false;

  // Loss-term switches. Disabled terms still log, as 0.
  bool use_kl = true;
  bool use_consistency = true;
  bool use_guidance = true;
  bool use_nce = true;
  bool use_filter_mask = true;
  bool sample_noise = true;  // false: z = mu

  // Published settings for a profile and mode, then the ablation applied.
  static TrainConfig preset(const DatasetProfile& profile, TrainMode mode, Ablation ablation = Ablation::None) {
    TrainConfig c;
    c.mode = mode;
    c.weights.lambda_kl = mode == TrainMode::Conditional ? 1e-5 : 5e-3;
    if (profile.name == "ckt-bench-301") {
      c.weights.lambda_t = 0.7;
      c.weights.lambda_p = 0.07;
    }
    c.apply(ablation);
    return c;
  }

  void apply(Ablation a) {
    ablation = a;
    switch (a) {
      case Ablation::None:
        break;
      case Ablation::NceCg:
        use_nce = false;
        use_guidance = false;
        break;
      case Ablation::Vae:
        use_kl = false;
        sample_noise = false;
        break;
      case Ablation::Filter:
        use_filter_mask = false;
        break;
    }
  }

  bool conditional() const { return mode == TrainMode::Conditional; }

  void check() const {
    weights.check();
    if (!(lr > 0.0)) throw ArgumentError("learning rate must be positive");
    if (weight_decay < 0.0) throw ArgumentError("weight decay must be non-negative");
    if (batch_size < 1) throw ArgumentError("batch size must be positive");
    if (epochs < 0) throw ArgumentError("epochs must be non-negative");
    if (patience < 0) throw ArgumentError("patience must be non-negative");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ArgumentError("val_fraction must be in [0, 1)");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"mode", c.mode},
       {"ablation", c.ablation},
       {"lambda_kl", c.weights.lambda_kl},
       {"tau", c.weights.tau},
       {"lambda_t", c.weights.lambda_t},
       {"lambda_p", c.weights.lambda_p},
       {"lambda_b", c.weights.lambda_b},
       {"lr", c.lr},
       {"weight_decay", c.weight_decay},
       {"batch_size", c.batch_size},
       {"epochs", c.epochs},
       {"patience", c.patience},
       {"val_fraction", c.val_fraction},
       {"max_steps", c.max_steps},
       {"seed", c.seed},
       {"deterministic", c.deterministic},
       {"use_kl", c.use_kl},
       {"use_consistency", c.use_consistency},
       {"use_guidance", c.use_guidance},
       {"use_nce", c.use_nce},
       {"use_filter_mask", c.use_filter_mask},
       {"sample_noise", c.sample_noise}};
}

// Missing keys keep their current value, so a partial JSON object acts as an
// override on top of a preset.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  const auto take = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  take("mode", c.mode);
  take("ablation", c.ablation);
  take("lambda_kl", c.weights.lambda_kl);
  take("tau", c.weights.tau);
  take("lambda_t", c.weights.lambda_t);
  take("lambda_p", c.weights.lambda_p);
  take("lambda_b", c.weights.lambda_b);
  take("lr", c.lr);
  take("weight_decay", c.weight_decay);
  take("batch_size", c.batch_size);
  take("epochs", c.epochs);
  take("patience", c.patience);
  take("val_fraction", c.val_fraction);
  take("max_steps", c.max_steps);
  take("seed", c.seed);
  take("deterministic", c.deterministic);
  take("use_kl", c.use_kl);
  take("use_consistency", c.use_consistency);
  take("use_guidance", c.use_guidance);
  take("use_nce", c.use_nce);
  take("use_filter_mask", c.use_filter_mask);
  take("sample_noise", c.sample_noise);
}

// One optimization step. total = lambda_kl * kl + recon + consistency +
// guidance + nce, with disabled terms at 0.
struct TrainLogRecord {
  int epoch = 0;
  long step = 0;
  double kl = 0, recon = 0, consistency = 0, guidance = 0, nce = 0, total = 0;
  double lambda_kl = 0;
  double wall_time = 0;

  double composed_total() const { return lambda_kl * kl + recon + consistency + guidance + nce; }
  bool operator==(const TrainLogRecord&) const = default;
};

inline void to_json(nlohmann::json& j, const TrainLogRecord& r) {
  j = {{"event", "step"}, {"epoch", r.epoch}, {"step", r.step}, {"L_KL", r.kl},  {"L_R", r.recon},
       {"L_C", r.consistency}, {"L_CG", r.guidance}, {"L_NCE", r.nce}, {"L", r.total}, {"lambda_KL", r.lambda_kl},
       {"wall_time", r.wall_time}};
}

// Loss graph for one batch. Returned terms are autograd scalars.
struct LossTerms {
  Var kl, recon, consistency, guidance, nce, total;
};

inline LossTerms compute_losses(const CktGenModel& model, const Batch& b, const TrainConfig& cfg,
                                const nn::Context& ctx, Rng* noise_rng) {
  const Index dim = model.config().latent_dim;
  const auto noise = [&]() {
    return cfg.sample_noise && noise_rng ? standard_normal(b.size, dim, *noise_rng) : Matrix(Matrix::Zero(b.size, dim));
  };
  const LossWeights& w = cfg.weights;
  LossTerms t;
  const Var zero = Var::scalar(0.0);
  t.kl = t.consistency = t.guidance = t.nce = zero;

  const LatentBatch c = model.circuit_encoder()(b, ctx);
  const Var zc = reparameterize(c, noise());
  const auto& dec = model.decoder();
  t.recon = dec.reconstruction_loss(b, dec.teacher_forced(b, zc, ctx), w).total;
  if (cfg.conditional()) {
    const LatentBatch s = model.spec_encoder()(b.specs);
    const Var zs = reparameterize(s, noise());
    t.recon = t.recon + dec.reconstruction_loss(b, dec.teacher_forced(b, zs, ctx), w).total;
    if (cfg.use_kl) t.kl = kl_total(c, s);
    if (cfg.use_consistency) t.consistency = consistency_loss(zc, zs);
    if (cfg.use_guidance) t.guidance = classifier_guidance(zc, model.heads(), b.specs);
    if (cfg.use_nce) t.nce = infonce(zs, zc, cfg.use_filter_mask ? &b.filter_mask : nullptr, w.tau);
  } else if (cfg.use_kl) {
    t.kl = kl_to_prior(c);
  }
  const double lambda = cfg.use_kl ? w.lambda_kl : 0.0;
  t.total = ag::scale(t.kl, lambda) + t.recon + t.consistency + t.guidance + t.nce;
  return t;
}

namespace detail {

inline void require_finite(const Var& v, const char* name, long step) {
  if (!std::isfinite(v.item())) throw NumericError(std::string("non-finite ") + name + " at step " + std::to_string(step));
}

}  // namespace detail

// Owns the optimizer and random stream of a training run.
class Trainer {
 public:
  Trainer(CktGenModel& model, TrainConfig cfg)
      : model_(model), cfg_(std::move(cfg)), opt_(model.parameters(), {cfg_.lr, 0.9, 0.999, 1e-8, cfg_.weight_decay}),
        rng_(derive_seed(cfg_.seed, 1)) {
    cfg_.check();
  }

  TrainLogRecord train_step(const Batch& b) {
    const auto t0 = std::chrono::steady_clock::now();
    const long step = opt_.steps() + 1;
    opt_.zero_grad();
    LossTerms t;
    try {
      t = compute_losses(model_, b, cfg_, {true, &rng_}, &rng_);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " at step " + std::to_string(step));
    }
    detail::require_finite(t.kl, "L_KL", step);
    detail::require_finite(t.recon, "L_R", step);
    detail::require_finite(t.consistency, "L_C", step);
    detail::require_finite(t.guidance, "L_CG", step);
    detail::require_finite(t.nce, "L_NCE", step);
    detail::require_finite(t.total, "L", step);
    t.total.backward();
    for (const auto& [name, p] : opt_.params())
      if (!p.grad().allFinite()) throw NumericError("non-finite gradient in " + name + " at step " + std::to_string(step));
    opt_.step();

    TrainLogRecord r;
    r.epoch = epoch_;
    r.step = step;
    r.kl = t.kl.item();
    r.recon = t.recon.item();
    r.consistency = t.consistency.item();
    r.guidance = t.guidance.item();
    r.nce = t.nce.item();
    r.total = t.total.item();
    r.lambda_kl = cfg_.use_kl ? cfg_.weights.lambda_kl : 0.0;
    r.wall_time = cfg_.deterministic
                      ? 0.0
                      : std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
  }

  // Total loss without dropout and with z = mu.
  double evaluate(const std::vector<Record>& records) const {
    if (records.empty()) return std::numeric_limits<double>::quiet_NaN();
    ag::NoGradGuard guard;
    TrainConfig c = cfg_;
    c.sample_noise = false;
    double sum = 0.0;
    for (std::size_t at = 0; at < records.size(); at += static_cast<std::size_t>(cfg_.batch_size)) {
      std::vector<const Record*> ptrs;
      for (std::size_t k = at; k < std::min(records.size(), at + static_cast<std::size_t>(cfg_.batch_size)); ++k)
        ptrs.push_back(&records[k]);
      const LossTerms t = compute_losses(model_, make_batch(ptrs, model_.profile()), c, {false, nullptr}, nullptr);
      sum += t.total.item() * static_cast<double>(ptrs.size());
    }
    return sum / static_cast<double>(records.size());
  }

  // Shuffled mini-batches for the next epoch.
  std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    rng_.shuffle(idx);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t at = 0; at < n; at += static_cast<std::size_t>(cfg_.batch_size))
      out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(at),
                       idx.begin() + static_cast<std::ptrdiff_t>(std::min(n, at + static_cast<std::size_t>(cfg_.batch_size))));
    return out;
  }

  // Model parameters, optimizer moments and run state.
  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.config = model_.config();
    ck.profile = model_.profile();
    append_parameters(ck, model_);
    const auto& params = opt_.params();
    for (std::size_t k = 0; k < params.size(); ++k) {
      ck.tensors.emplace_back("adam.m." + params[k].first, opt_.first_moments()[k]);
      ck.tensors.emplace_back("adam.v." + params[k].first, opt_.second_moments()[k]);
    }
    ck.meta = {{"train_config", cfg_},
               {"state",
                {{"epoch", epoch_},
                 {"step", opt_.steps()},
                 {"best_val", std::isfinite(best_val_) ? nlohmann::json(best_val_) : nlohmann::json(nullptr)},
                 {"stale_epochs", stale_epochs_},
                 {"stopped", stopped_},
                 {"rng", rng_.state()}}}};
    return ck;
  }

  void restore(const Checkpoint& ck) {
    if (!(ck.profile == model_.profile())) throw ProfileMismatchError("checkpoint profile '" + ck.profile.name + "' does not match '" + model_.profile().name + "'");
    if (!(ck.config == model_.config())) throw SchemaError("checkpoint model config differs from the run config");
    load_parameters(ck, model_);
    const auto& params = opt_.params();
    for (std::size_t k = 0; k < params.size(); ++k) {
      const Matrix* m = ck.find("adam.m." + params[k].first);
      const Matrix* v = ck.find("adam.v." + params[k].first);
      if (!m || !v) throw SchemaError("checkpoint lacks optimizer state for " + params[k].first);
      opt_.first_moments()[k] = *m;
      opt_.second_moments()[k] = *v;
    }
    try {
      const auto& st = ck.meta.at("state");
      epoch_ = st.at("epoch").get<int>();
      opt_.set_steps(st.at("step").get<long>());
      best_val_ = st.at("best_val").is_null() ? std::numeric_limits<double>::infinity() : st.at("best_val").get<double>();
      stale_epochs_ = st.at("stale_epochs").get<int>();
      stopped_ = st.at("stopped").get<bool>();
      rng_.set_state(st.at("rng").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(std::string("checkpoint lacks trainer state: ") + e.what());
    }
  }

  int epoch() const { return epoch_; }
  long steps() const { return opt_.steps(); }
  bool stopped() const { return stopped_; }
  double best_val() const { return best_val_; }
  const TrainConfig& config() const { return cfg_; }
  CktGenModel& model() { return model_; }

  // Bookkeeping after an epoch; returns true when the loss improved.
  bool end_epoch(double val_loss) {
    ++epoch_;
    if (std::isnan(val_loss)) return false;
    if (val_loss < best_val_) {
      best_val_ = val_loss;
      stale_epochs_ = 0;
      return true;
    }
    ++stale_epochs_;
    if (cfg_.patience > 0 && stale_epochs_ >= cfg_.patience) stopped_ = true;
    return false;
  }

 private:
  CktGenModel& model_;
  TrainConfig cfg_;
  AdamW opt_;
  Rng rng_;
  int epoch_ = 0;
  double best_val_ = std::numeric_limits<double>::infinity();
  int stale_epochs_ = 0;
  bool stopped_ = false;
};

// Training/validation partition used by fit(); deterministic in the seed.
inline std::pair<std::vector<Record>, std::vector<Record>> train_val_split(const std::vector<Record>& data,
                                                                           const TrainConfig& cfg) {
  if (cfg.val_fraction <= 0.0 || data.size() < 2) return {data, {}};
  auto [train, val] = split(data, 1.0 - cfg.val_fraction, derive_seed(cfg.seed, 2));
  if (train.empty()) return {data, {}};
  return {std::move(train), std::move(val)};
}

struct FitOptions {
  std::string out_dir;          // empty: nothing written
  bool resume = false;          // continue from out_dir/last.ckpt when present
  bool keep_epoch_checkpoints = false;
  std::function<void(const TrainLogRecord&)> on_step;
};

struct FitResult {
  int epochs_run = 0;
  long steps = 0;
  double best_val = 0;
  bool early_stopped = false;
  std::vector<TrainLogRecord> log;
};

// Epoch loop with per-epoch checkpoints (last.ckpt, and best.ckpt whenever
// the validation loss improves), early stopping and exact resume.
inline FitResult fit(CktGenModel& model, const std::vector<Record>& data, const TrainConfig& cfg,
                     const FitOptions& opt = {}) {
  if (data.empty()) throw ArgumentError("fit: empty training set");
  const auto [train, val] = train_val_split(data, cfg);
  Trainer trainer(model, cfg);
  namespace fs = std::filesystem;
  const fs::path dir = opt.out_dir;
  const bool write = !opt.out_dir.empty();
  if (write) fs::create_directories(dir);
  if (opt.resume && write && fs::exists(dir / "last.ckpt")) trainer.restore(read_checkpoint((dir / "last.ckpt").string()));

  std::ofstream log;
  if (write) {
    log.open(dir / "log.jsonl", opt.resume ? std::ios::app : std::ios::trunc);
    if (!log) throw IoError("cannot open " + (dir / "log.jsonl").string());
  }
  const auto save = [&](const std::string& name) {
    if (write) write_checkpoint((dir / name).string(), trainer.checkpoint());
  };
  if (write && trainer.epoch() == 0 && trainer.steps() == 0) {
    save("last.ckpt");
    if (!fs::exists(dir / "best.ckpt") || !opt.resume) save("best.ckpt");
  }

  FitResult res;
  while (trainer.epoch() < cfg.epochs && !trainer.stopped() && !(cfg.max_steps > 0 && trainer.steps() >= cfg.max_steps)) {
    for (const auto& idx : trainer.epoch_batches(train.size())) {
      if (cfg.max_steps > 0 && trainer.steps() >= cfg.max_steps) break;
      std::vector<const Record*> ptrs;
      for (auto k : idx) ptrs.push_back(&train[k]);
      const TrainLogRecord r = trainer.train_step(make_batch(ptrs, model.profile()));
      res.log.push_back(r);
      if (write) log << nlohmann::json(r).dump() << '\n';
      if (opt.on_step) opt.on_step(r);
    }
    const double val_loss = trainer.evaluate(val);
    const bool improved = trainer.end_epoch(val_loss);
    if (write) {
      log << nlohmann::json{{"event", "epoch"},
                            {"epoch", trainer.epoch()},
                            {"step", trainer.steps()},
                            {"val_L", std::isnan(val_loss) ? nlohmann::json(nullptr) : nlohmann::json(val_loss)}}
                 .dump()
          << '\n';
      log.flush();
      if (!log) throw IoError("failed writing training log");
      save("last.ckpt");
      if (improved || val.empty()) save("best.ckpt");
      if (opt.keep_epoch_checkpoints) save("epoch-" + std::to_string(trainer.epoch()) + ".ckpt");
    }
    ++res.epochs_run;
  }
  res.steps = trainer.steps();
  res.best_val = trainer.best_val();
  res.early_stopped = trainer.stopped();
  return res;
}

}  // namespace cktgen
