#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "cktgen/trainer.hpp"

using namespace cktgen;
namespace fs = std::filesystem;

namespace {

const DatasetProfile& p101() {
  static const DatasetProfile p = profile_ckt_bench_101();
  return p;
}

fs::path scratch(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("cktgen_trainer_" + name);
  fs::remove_all(d);
  return d;
}

TrainConfig quick(TrainMode mode = TrainMode::Conditional) {
  TrainConfig c = TrainConfig::preset(p101(), mode);
  c.lr = 1e-3;
  c.batch_size = 8;
  c.epochs = 2;
  c.val_fraction = 0.2;
  c.seed = 3;
  c.deterministic = true;
  return c;
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

void expect_same_tensors(const Checkpoint& a, const Checkpoint& b) {
  ASSERT_EQ(a.tensors.size(), b.tensors.size());
  for (std::size_t k = 0; k < a.tensors.size(); ++k) {
    EXPECT_EQ(a.tensors[k].first, b.tensors[k].first);
    EXPECT_TRUE(a.tensors[k].second == b.tensors[k].second) << a.tensors[k].first;
  }
}

}  // namespace

TEST(TrainConfig, PresetsAndAblations) {
  const auto c = TrainConfig::preset(p101(), TrainMode::Conditional);
  EXPECT_DOUBLE_EQ(c.weights.lambda_kl, 1e-5);
  EXPECT_DOUBLE_EQ(c.weights.tau, 0.1);
  EXPECT_DOUBLE_EQ(c.weights.lambda_t, 0.5);
  const auto u = TrainConfig::preset(profile_ckt_bench_301(), TrainMode::Unconditional);
  EXPECT_DOUBLE_EQ(u.weights.lambda_kl, 5e-3);
  EXPECT_DOUBLE_EQ(u.weights.lambda_t, 0.7);
  EXPECT_DOUBLE_EQ(u.weights.lambda_p, 0.07);
  const auto n = TrainConfig::preset(p101(), TrainMode::Conditional, Ablation::NceCg);
  EXPECT_FALSE(n.use_nce || n.use_guidance);
  EXPECT_TRUE(n.use_kl && n.use_consistency);
  const auto v = TrainConfig::preset(p101(), TrainMode::Conditional, Ablation::Vae);
  EXPECT_FALSE(v.use_kl || v.sample_noise);
  EXPECT_FALSE(TrainConfig::preset(p101(), TrainMode::Conditional, Ablation::Filter).use_filter_mask);
}

TEST(TrainConfig, JsonRoundTrip) {
  TrainConfig c = quick();
  c.apply(Ablation::Filter);
  c.max_steps = 17;
  const TrainConfig back = nlohmann::json(c).get<TrainConfig>();
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(c));
  // Partial overrides keep defaults for the rest.
  const auto partial = nlohmann::json{{"lr", 0.5}}.get<TrainConfig>();
  EXPECT_DOUBLE_EQ(partial.lr, 0.5);
  EXPECT_EQ(partial.batch_size, TrainConfig{}.batch_size);
  TrainConfig bad = quick();
  bad.batch_size = 0;
  EXPECT_THROW(bad.check(), ArgumentError);
}

// With every optional term switched off the objective is reconstruction alone.
TEST(ComputeLosses, DisabledTermsContributeNothing) {
  const CktGenModel model(ModelConfig::tiny(), p101(), 1);
  const Batch b = make_batch(synthesize_toy(p101(), 8, 4, 2), p101());
  TrainConfig c = quick();
  c.use_kl = c.use_consistency = c.use_guidance = c.use_nce = false;
  Rng rng(3);
  const LossTerms t = compute_losses(model, b, c, {false, nullptr}, &rng);
  EXPECT_EQ(t.total.item(), t.recon.item());
  EXPECT_EQ(t.kl.item(), 0.0);
  EXPECT_EQ(t.nce.item(), 0.0);
}

TEST(ComputeLosses, UnconditionalUsesOnlyPriorKl) {
  const CktGenModel model(ModelConfig::tiny(), p101(), 1);
  const Batch b = make_batch(synthesize_toy(p101(), 8, 4, 2), p101());
  const TrainConfig c = quick(TrainMode::Unconditional);
  const LossTerms t = compute_losses(model, b, c, {false, nullptr}, nullptr);
  EXPECT_EQ(t.consistency.item(), 0.0);
  EXPECT_EQ(t.guidance.item(), 0.0);
  EXPECT_EQ(t.nce.item(), 0.0);
  EXPECT_GT(t.kl.item(), 0.0);
  EXPECT_NEAR(t.total.item(), 5e-3 * t.kl.item() + t.recon.item(), 1e-12);
}

TEST(Trainer, LogRecordsComposeTheTotal) {
  CktGenModel model(ModelConfig::tiny(), p101(), 2);
  const auto data = synthesize_toy(p101(), 32, 8, 5);
  Trainer tr(model, quick());
  for (int k = 0; k < 10; ++k) {
    const auto r = tr.train_step(make_batch(data, p101()));
    EXPECT_EQ(r.step, k + 1);
    EXPECT_NEAR(r.total, r.composed_total(), 1e-12 * std::max(1.0, std::abs(r.total)));
    EXPECT_GT(r.nce, 0.0);
    EXPECT_GT(r.guidance, 0.0);
    EXPECT_EQ(r.wall_time, 0.0);
    const auto j = nlohmann::json(r);
    for (const char* key : {"L_KL", "L_R", "L_C", "L_CG", "L_NCE", "L", "lambda_KL", "step", "epoch"})
      EXPECT_TRUE(j.contains(key)) << key;
  }
}

TEST(Trainer, LossDecreases) {
  CktGenModel model(ModelConfig::desk(), p101(), 3);
  const auto data = synthesize_toy(p101(), 64, 8, 6);
  TrainConfig c = quick();
  c.batch_size = 16;
  Trainer tr(model, c);
  double first = 0, last = 0;
  for (int epoch = 0; epoch < 50; ++epoch)
    for (const auto& idx : tr.epoch_batches(data.size())) {
      std::vector<const Record*> ptrs;
      for (auto k : idx) ptrs.push_back(&data[k]);
      const auto r = tr.train_step(make_batch(ptrs, p101()));
      if (r.step <= 20) first += r.total;
      if (r.step > 180) last += r.total;
    }
  EXPECT_EQ(tr.steps(), 200);
  EXPECT_LT(last, 0.5 * first);
}

TEST(Trainer, NonFiniteLossNamesTheTerm) {
  const auto poison = [](CktGenModel& m, const std::string& prefix) {
    for (auto& [name, v] : m.parameters())
      if (name.rfind(prefix, 0) == 0) {
        Var h = v;
        h.mutable_value().setConstant(std::numeric_limits<double>::quiet_NaN());
      }
  };
  const Batch b = make_batch(synthesize_toy(p101(), 8, 4, 1), p101());
  const auto message = [&](const std::string& prefix) {
    CktGenModel model(ModelConfig::tiny(), p101(), 4);
    poison(model, prefix);
    Trainer tr(model, quick());
    try {
      tr.train_step(b);
    } catch (const NumericError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_EQ(message("decoder."), "non-finite L_R at step 1");
  EXPECT_EQ(message("heads."), "non-finite L_CG at step 1");
  EXPECT_EQ(message("spec_encoder."), "non-finite latent vector in cosine similarity at step 1");
}

TEST(Trainer, EarlyStoppingBookkeeping) {
  CktGenModel model(ModelConfig::tiny(), p101(), 5);
  TrainConfig c = quick();
  c.patience = 2;
  Trainer tr(model, c);
  EXPECT_TRUE(tr.end_epoch(1.0));
  EXPECT_FALSE(tr.end_epoch(1.5));
  EXPECT_FALSE(tr.stopped());
  EXPECT_TRUE(tr.end_epoch(0.5));
  EXPECT_FALSE(tr.end_epoch(0.5));
  EXPECT_FALSE(tr.end_epoch(0.7));
  EXPECT_TRUE(tr.stopped());
  EXPECT_EQ(tr.epoch(), 5);
  EXPECT_DOUBLE_EQ(tr.best_val(), 0.5);
}

TEST(Fit, DeterministicAcrossRuns) {
  const auto data = synthesize_toy(p101(), 40, 8, 7);
  const auto a = scratch("det_a"), b = scratch("det_b");
  CktGenModel ma(ModelConfig::tiny(), p101(), 9), mb(ModelConfig::tiny(), p101(), 9);
  const auto ra = fit(ma, data, quick(), {a.string(), false, false, {}});
  const auto rb = fit(mb, data, quick(), {b.string(), false, false, {}});
  EXPECT_EQ(ra.log, rb.log);
  EXPECT_EQ(lines(a / "log.jsonl"), lines(b / "log.jsonl"));
  expect_same_tensors(read_checkpoint((a / "last.ckpt").string()), read_checkpoint((b / "last.ckpt").string()));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Fit, ResumeMatchesUninterruptedRun) {
  const auto data = synthesize_toy(p101(), 40, 8, 8);
  TrainConfig c = quick();
  c.epochs = 4;
  const auto full = scratch("full"), part = scratch("part");
  CktGenModel m1(ModelConfig::tiny(), p101(), 10);
  fit(m1, data, c, {full.string(), false, false, {}});

  TrainConfig first = c;
  first.epochs = 2;
  CktGenModel m2(ModelConfig::tiny(), p101(), 10);
  fit(m2, data, first, {part.string(), false, false, {}});
  CktGenModel m3(ModelConfig::tiny(), p101(), 77);  // init is overwritten by the checkpoint
  const auto r = fit(m3, data, c, {part.string(), true, false, {}});
  EXPECT_EQ(r.epochs_run, 2);

  const auto ck_full = read_checkpoint((full / "last.ckpt").string());
  const auto ck_part = read_checkpoint((part / "last.ckpt").string());
  expect_same_tensors(ck_full, ck_part);
  EXPECT_EQ(ck_full.meta, ck_part.meta);
  EXPECT_EQ(lines(full / "log.jsonl"), lines(part / "log.jsonl"));
  fs::remove_all(full);
  fs::remove_all(part);
}

TEST(Fit, ZeroEpochsSavesInitialization) {
  const auto dir = scratch("zero");
  CktGenModel m(ModelConfig::tiny(), p101(), 11);
  TrainConfig c = quick();
  c.epochs = 0;
  const auto r = fit(m, synthesize_toy(p101(), 10, 2, 1), c, {dir.string(), false, false, {}});
  EXPECT_EQ(r.steps, 0);
  const CktGenModel init(ModelConfig::tiny(), p101(), 11);
  const auto loaded = load_model((dir / "best.ckpt").string());
  const auto want = init.parameters();
  const auto got = loaded.parameters();
  ASSERT_EQ(want.size(), got.size());
  for (std::size_t k = 0; k < want.size(); ++k) EXPECT_TRUE(want[k].second.value() == got[k].second.value());
  fs::remove_all(dir);
}

TEST(Fit, MaxStepsCapsTraining) {
  CktGenModel m(ModelConfig::tiny(), p101(), 12);
  TrainConfig c = quick();
  c.epochs = 100;
  c.max_steps = 5;
  const auto r = fit(m, synthesize_toy(p101(), 40, 4, 2), c);
  EXPECT_EQ(r.steps, 5);
  EXPECT_THROW(fit(m, {}, c), ArgumentError);
}

TEST(Checkpoint, RoundTripAndErrors) {
  const auto dir = scratch("ckpt");
  fs::create_directories(dir);
  const CktGenModel m(ModelConfig::tiny(), p101(), 13);
  Checkpoint ck;
  ck.config = m.config();
  ck.profile = m.profile();
  ck.meta = {{"note", "x"}};
  append_parameters(ck, m);
  const auto path = (dir / "m.ckpt").string();
  write_checkpoint(path, ck);
  const auto back = read_checkpoint(path);
  EXPECT_EQ(back.config, ck.config);
  EXPECT_EQ(back.profile, ck.profile);
  EXPECT_EQ(back.meta, ck.meta);
  expect_same_tensors(back, ck);

  const auto p301 = profile_ckt_bench_301();
  EXPECT_THROW(load_model(path, &p301), ProfileMismatchError);
  EXPECT_NO_THROW(load_model(path, &p101()));
  EXPECT_THROW(read_checkpoint((dir / "missing.ckpt").string()), IoError);
  std::ofstream((dir / "junk.ckpt").string()) << "not a checkpoint at all";
  EXPECT_THROW(read_checkpoint((dir / "junk.ckpt").string()), SchemaError);

  // Truncate the tensor payload.
  const auto size = fs::file_size(path);
  fs::resize_file(path, size - 16);
  EXPECT_THROW(read_checkpoint(path), IoError);
  fs::remove_all(dir);
}

TEST(Checkpoint, RestoreRejectsOtherProfile) {
  CktGenModel m(ModelConfig::tiny(), p101(), 14);
  Trainer tr(m, quick());
  Checkpoint ck = tr.checkpoint();
  ck.profile = profile_ckt_bench_301();
  EXPECT_THROW(tr.restore(ck), ProfileMismatchError);
}
