#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cktgen/evaluator.hpp"
#include "cktgen/trainer.hpp"

namespace cktgen::cli {

enum ExitCode { kOk = 0, kFailure = 1, kUsage = 2, kData = 3, kNumeric = 4 };

inline bool deterministic_env() {
  const char* v = std::getenv("CKTGEN_DETERMINISTIC");
  return v && std::string(v) == "1";
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(path + ": " + e.what());
  }
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed for " + path);
}

// Artifact provenance: the argv that produced it plus resolved settings.
inline nlohmann::json run_config(const std::string& command, const std::vector<std::string>& argv,
                                 nlohmann::json resolved) {
  return {{"command", command}, {"argv", argv}, {"resolved", std::move(resolved)}};
}

inline std::string sidecar_path(const std::string& artifact) { return artifact + ".config.json"; }

inline BinnedSpecification parse_spec(const std::string& text, const DatasetProfile& p) {
  std::stringstream ss(text);
  std::string part;
  std::vector<int> v;
  while (std::getline(ss, part, ',')) {
    try {
      std::size_t used = 0;
      v.push_back(std::stoi(part, &used));
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw ArgumentError("--spec expects three integers \"gain,bw,pm\", got \"" + text + "\"");
    }
  }
  if (v.size() != 3) throw ArgumentError("--spec expects three integers \"gain,bw,pm\", got \"" + text + "\"");
  BinnedSpecification s{v[0], v[1], v[2]};
  s.check(p);
  return s;
}

inline Ablation parse_ablation(const std::string& s) {
  return nlohmann::json(s).get<Ablation>();
}

struct Io {
  std::ostream& out;
  std::ostream& err;
};

// ---------------------------------------------------------------- commands

inline int cmd_preprocess(const std::string& in_path, const std::string& profile_name, const std::string& out_path,
                          const std::string& test_out, double test_frac, std::uint64_t seed,
                          const std::vector<std::string>& argv, Io io) {
  const DatasetProfile p = resolve_profile(profile_name);
  const LoadResult lr = load_ocb(in_path, p);
  nlohmann::json summary = {{"kept", lr.records.size()}, {"dropped", lr.dropped}};
  if (!test_out.empty()) {
    auto [train, test] = split(lr.records, 1.0 - test_frac, seed);
    save_records(out_path, train);
    save_records(test_out, test);
    summary["train"] = train.size();
    summary["test"] = test.size();
  } else {
    save_records(out_path, lr.records);
  }
  write_json_file(sidecar_path(out_path),
                  run_config("preprocess", argv, {{"profile", profile_to_json(p)}, {"test_frac", test_frac}, {"seed", seed}}));
  io.out << summary.dump() << '\n';
  return kOk;
}

inline int cmd_synth(int n, int types, std::uint64_t seed, const std::string& profile_name, const std::string& out_path,
                     const std::vector<std::string>& argv, Io io) {
  const DatasetProfile p = resolve_profile(profile_name);
  const auto records = synthesize_toy(p, n, types, seed);
  save_records(out_path, records);
  write_json_file(sidecar_path(out_path), run_config("synth-data", argv,
                                                     {{"profile", profile_to_json(p)}, {"n", n}, {"types", types}, {"seed", seed}}));
  io.out << nlohmann::json{{"records", records.size()}, {"out", out_path}}.dump() << '\n';
  return kOk;
}

struct TrainArgs {
  std::string data, profile = "101", mode = "cond", ablate = "none", out, config, preset = "paper";
  int epochs = -1, batch = -1, patience = -1;
  double lr = -1.0;
  long max_steps = -1;
  std::uint64_t seed = 0;
  bool seed_set = false, resume = false, deterministic = false;
};

inline int cmd_train(const TrainArgs& a, const std::vector<std::string>& argv, Io io) {
  const DatasetProfile p = resolve_profile(a.profile);
  const TrainMode mode = a.mode == "uncond" ? TrainMode::Unconditional : TrainMode::Conditional;
  TrainConfig cfg = TrainConfig::preset(p, mode, parse_ablation(a.ablate));
  ModelConfig model_cfg = a.preset == "desk" ? ModelConfig::desk() : a.preset == "tiny" ? ModelConfig::tiny() : ModelConfig::paper();
  std::uint64_t init_seed = 0;
  if (!a.config.empty()) {
    // Accepts a bare TrainConfig object or a config.json written by this tool.
    nlohmann::json j = read_json_file(a.config);
    if (j.contains("resolved")) j = j.at("resolved");
    try {
      if (j.contains("model")) model_cfg = j.at("model").get<ModelConfig>();
      if (j.contains("init_seed")) init_seed = j.at("init_seed").get<std::uint64_t>();
      from_json(j.contains("train") ? j.at("train") : j, cfg);
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(a.config + ": " + e.what());
    }
  }
  if (a.epochs >= 0) cfg.epochs = a.epochs;
  if (a.batch > 0) cfg.batch_size = a.batch;
  if (a.patience >= 0) cfg.patience = a.patience;
  if (a.lr > 0) cfg.lr = a.lr;
  if (a.max_steps >= 0) cfg.max_steps = a.max_steps;
  if (a.seed_set) {
    cfg.seed = a.seed;
    init_seed = a.seed;
  }
  cfg.deterministic = cfg.deterministic || a.deterministic || deterministic_env();
  cfg.check();
  model_cfg.check();

  const LoadResult lr = load_ocb(a.data, p);
  if (lr.records.empty()) throw SchemaError(a.data + " holds no usable records");
  std::filesystem::create_directories(a.out);
  const nlohmann::json resolved = {{"data", a.data},       {"profile", profile_to_json(p)}, {"model", model_cfg},
                                   {"train", cfg},         {"init_seed", init_seed}};
  write_json_file((std::filesystem::path(a.out) / "config.json").string(), run_config("train", argv, resolved));
  CktGenModel model(model_cfg, p, derive_seed(init_seed, 0));
  FitOptions fo;
  fo.out_dir = a.out;
  fo.resume = a.resume;
  const FitResult res = fit(model, lr.records, cfg, fo);
  io.out << nlohmann::json{{"epochs", res.epochs_run},
                           {"steps", res.steps},
                           {"early_stopped", res.early_stopped},
                           {"best_val", std::isfinite(res.best_val) ? nlohmann::json(res.best_val) : nlohmann::json(nullptr)},
                           {"out", a.out}}
                .dump()
         << '\n';
  return kOk;
}

struct GenerateArgs {
  std::string ckpt, spec, sampler = "greedy", out, profile;
  int n = 1, max_nodes = 0;
  double temp = 1.0;
  std::uint64_t seed = 0;
  bool mean = false;
};

inline int cmd_generate(const GenerateArgs& a, const std::vector<std::string>& argv, Io io) {
  const Checkpoint ck = read_checkpoint(a.ckpt);
  DatasetProfile expected;
  if (!a.profile.empty()) expected = resolve_profile(a.profile);
  const CktGenModel model = model_from_checkpoint(ck, a.profile.empty() ? nullptr : &expected);
  const DatasetProfile& p = model.profile();
  if (a.n < 1) throw ArgumentError("--n must be positive");
  if (!(a.temp > 0.0)) throw ArgumentError("--temp must be positive");
  GenerateOptions go;
  go.max_nodes = a.max_nodes;
  go.sampler = a.sampler == "sample" ? Sampler::Categorical : Sampler::Greedy;
  go.temperature = a.temp;
  std::optional<BinnedSpecification> spec;
  if (!a.spec.empty()) spec = parse_spec(a.spec, p);
  const std::optional<LatentGaussian> cond = spec ? std::optional(model.spec_encoder()(*spec)) : std::nullopt;

  Rng rng(a.seed);
  Rng decode_rng(derive_seed(a.seed, 1));
  const bool dot = std::filesystem::path(a.out).extension() == ".dot";
  std::ofstream out(a.out);
  if (!out) throw IoError("cannot write " + a.out);
  int valid = 0;
  for (int k = 0; k < a.n; ++k) {
    Eigen::VectorXd noise(model.config().latent_dim);
    for (Eigen::Index q = 0; q < noise.size(); ++q) noise(q) = rng.normal();
    if (a.mean) noise.setZero();
    const Eigen::VectorXd z = cond ? reparameterize(*cond, noise) : noise;
    const Circuit c = model.decoder().generate(z, go, &decode_rng);
    valid += validate(c, p).is_valid_circuit ? 1 : 0;
    if (dot) {
      out << to_dot(c, p, "gen" + std::to_string(k));
    } else {
      nlohmann::json j = record_to_json(c, RawSpecification{});
      if (spec)
        j["spec"] = {{"gain", spec->gain}, {"bw", spec->bw}, {"pm", spec->pm}};
      else
        j.erase("spec");
      out << j.dump() << '\n';
    }
  }
  if (!out) throw IoError("write failed for " + a.out);
  write_json_file(sidecar_path(a.out), run_config("generate", argv, {{"ckpt", a.ckpt}, {"seed", a.seed}}));
  io.out << nlohmann::json{{"generated", a.n}, {"valid_circuit", static_cast<double>(valid) / a.n}, {"out", a.out}}.dump()
         << '\n';
  return kOk;
}

struct EvaluateArgs {
  std::string gen_ckpt, eval_ckpt, data, mode = "cond", report, train_data;
  std::uint64_t seed = 0;
  int n = 1000, latent_samples = 0, diversity_pairs = 300;
};

inline int cmd_evaluate(const EvaluateArgs& a, const std::vector<std::string>& argv, Io io) {
  const CktGenModel gen = load_model(a.gen_ckpt);
  const DatasetProfile& p = gen.profile();
  EvalReport rep;
  rep.mode = a.mode;
  const auto load = [&](const std::string& path) {
    if (path.empty()) throw ArgumentError("--data is required for mode " + a.mode);
    return load_ocb(path, p).records;
  };
  if (a.mode == "cond") {
    const CktGenModel eval = a.eval_ckpt.empty() ? gen : load_model(a.eval_ckpt, &p);
    EvalOptions opt;
    opt.seed = a.seed;
    opt.diversity_pairs = a.diversity_pairs;
    rep = conditional_eval(gen, eval, load(a.data), opt);
  } else if (a.mode == "recon") {
    const auto test = load(a.data);
    rep.reconstruction_accuracy = reconstruction_accuracy(gen, test, a.latent_samples, a.seed);
    rep.samples = static_cast<int>(test.size());
  } else if (a.mode == "uncond") {
    std::set<std::string> hashes;
    if (!a.train_data.empty()) hashes = topology_hashes(load(a.train_data), p);
    const UnconditionalStats st = unconditional_eval(gen, a.n, hashes, a.seed);
    rep.valid_dag = st.valid_dag;
    rep.valid_circuit = st.valid_circuit;
    rep.novel_circuit = st.novel;
    rep.samples = a.n;
  } else if (a.mode == "retrieval") {
    const auto test = load(a.data);
    const auto top = retrieval_experiment(gen, test, a.seed);
    rep.top_1 = top[0];
    rep.top_3 = top[1];
    rep.top_5 = top[2];
    rep.samples = static_cast<int>(group_by_spec(test).size());
  } else {
    throw ArgumentError("unknown evaluation mode " + a.mode);
  }
  rep.mode = a.mode;
  const nlohmann::json j = rep;
  if (!a.report.empty()) {
    write_json_file(a.report, j);
    write_json_file(sidecar_path(a.report), run_config("evaluate", argv, {{"seed", a.seed}, {"mode", a.mode}}));
  }
  io.out << j.dump() << '\n';
  return kOk;
}

inline int cmd_retrieve(const std::string& ckpt, const std::string& data, std::uint64_t seed, const std::string& report,
                        const std::vector<std::string>& argv, Io io) {
  EvaluateArgs a;
  a.gen_ckpt = ckpt;
  a.data = data;
  a.seed = seed;
  a.report = report;
  a.mode = "retrieval";
  return cmd_evaluate(a, argv, io);
}

inline int cmd_export(const std::string& data, const std::string& profile_name, int index, const std::string& out_path,
                      Io io) {
  const DatasetProfile p = resolve_profile(profile_name);
  const auto records = load_ocb(data, p).records;
  std::ofstream out(out_path);
  if (!out) throw IoError("cannot write " + out_path);
  int written = 0;
  for (std::size_t k = 0; k < records.size(); ++k) {
    if (index >= 0 && static_cast<int>(k) != index) continue;
    out << to_dot(records[k].circuit, p, "record" + std::to_string(k));
    ++written;
  }
  if (index >= static_cast<int>(records.size())) throw ArgumentError("--index beyond the end of " + data);
  io.out << nlohmann::json{{"exported", written}, {"out", out_path}}.dump() << '\n';
  return kOk;
}

// ---------------------------------------------------------------- dispatch

inline int report_error(Io io, const std::string& category, const std::string& message, int code) {
  io.err << nlohmann::json{{"error", category}, {"message", message}}.dump() << '\n';
  return code;
}

inline int dispatch(const std::vector<std::string>& args, Io io = {std::cout, std::cerr}) {
  CLI::App app{"Conditional generation of analog circuit topologies", "cktgen"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  auto* pre = app.add_subcommand("preprocess", "bin raw specifications and canonicalize circuits");
  std::string pre_in, pre_out, pre_profile = "101", pre_test;
  double pre_frac = 0.1;
  std::uint64_t pre_seed = 0;
  pre->add_option("--in", pre_in, "raw JSON-lines dataset")->required();
  pre->add_option("--out", pre_out, "output JSON-lines")->required();
  pre->add_option("--profile", pre_profile, "101, 301 or a profile JSON file");
  pre->add_option("--test-out", pre_test, "also write a held-out split here");
  pre->add_option("--test-frac", pre_frac, "held-out fraction")->check(CLI::Range(0.0, 1.0));
  pre->add_option("--seed", pre_seed);

  auto* syn = app.add_subcommand("synth-data", "write a synthetic dataset");
  int syn_n = 0, syn_types = 0;
  std::uint64_t syn_seed = 0;
  std::string syn_out, syn_profile = "101";
  syn->add_option("--n", syn_n, "number of circuits")->required();
  syn->add_option("--types", syn_types, "number of specification types")->required();
  syn->add_option("--seed", syn_seed);
  syn->add_option("--profile", syn_profile);
  syn->add_option("--out", syn_out)->required();

  auto* tr = app.add_subcommand("train", "train a model");
  TrainArgs ta;
  tr->add_option("--data", ta.data)->required();
  tr->add_option("--profile", ta.profile);
  tr->add_option("--mode", ta.mode)->check(CLI::IsMember({"cond", "uncond"}));
  tr->add_option("--ablate", ta.ablate)->check(CLI::IsMember({"none", "nce_cg", "vae", "filter"}));
  tr->add_option("--out", ta.out, "run directory")->required();
  tr->add_option("--config", ta.config, "JSON overrides (train/model keys)");
  tr->add_option("--preset", ta.preset, "model size")->check(CLI::IsMember({"paper", "desk", "tiny"}));
  tr->add_option("--epochs", ta.epochs);
  tr->add_option("--batch", ta.batch);
  tr->add_option("--patience", ta.patience);
  tr->add_option("--lr", ta.lr);
  tr->add_option("--max-steps", ta.max_steps);
  auto* seed_opt = tr->add_option("--seed", ta.seed);
  tr->add_flag("--resume", ta.resume, "continue from <out>/last.ckpt");
  tr->add_flag("--deterministic", ta.deterministic);

  auto* gen = app.add_subcommand("generate", "decode circuits from a checkpoint");
  GenerateArgs ga;
  gen->add_option("--ckpt", ga.ckpt)->required();
  gen->add_option("--spec", ga.spec, "\"gain,bw,pm\" categories; omit for prior samples");
  gen->add_option("--profile", ga.profile, "expected profile");
  gen->add_option("--n", ga.n);
  gen->add_option("--sampler", ga.sampler)->check(CLI::IsMember({"greedy", "sample"}));
  gen->add_option("--temp", ga.temp);
  gen->add_option("--seed", ga.seed);
  gen->add_option("--max-nodes", ga.max_nodes);
  gen->add_flag("--mean", ga.mean, "decode the latent mean");
  gen->add_option("--out", ga.out, ".jsonl or .dot")->required();

  auto* ev = app.add_subcommand("evaluate", "compute evaluation metrics");
  EvaluateArgs ea;
  ev->add_option("--gen-ckpt", ea.gen_ckpt)->required();
  ev->add_option("--eval-ckpt", ea.eval_ckpt, "frozen evaluator; defaults to the generator");
  ev->add_option("--data", ea.data);
  ev->add_option("--train-data", ea.train_data, "training set for novelty");
  ev->add_option("--mode", ea.mode)->check(CLI::IsMember({"cond", "recon", "uncond", "retrieval"}));
  ev->add_option("--seed", ea.seed);
  ev->add_option("--n", ea.n, "unconditional samples");
  ev->add_option("--latent-samples", ea.latent_samples, "reconstruction draws per circuit; 0 decodes the mean");
  ev->add_option("--diversity-pairs", ea.diversity_pairs);
  ev->add_option("--report", ea.report);

  auto* ret = app.add_subcommand("retrieve", "circuit-to-specification retrieval");
  std::string rt_ckpt, rt_data, rt_report;
  std::uint64_t rt_seed = 0;
  ret->add_option("--ckpt", rt_ckpt)->required();
  ret->add_option("--data", rt_data)->required();
  ret->add_option("--seed", rt_seed);
  ret->add_option("--report", rt_report);

  auto* ex = app.add_subcommand("export", "render dataset circuits as Graphviz");
  std::string ex_data, ex_profile = "101", ex_out;
  int ex_index = -1;
  ex->add_option("--data", ex_data)->required();
  ex->add_option("--profile", ex_profile);
  ex->add_option("--index", ex_index, "record number; all when omitted");
  ex->add_option("--out", ex_out)->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    io.out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    io.out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    return report_error(io, "usage", e.what(), kUsage);
  }
  ta.seed_set = seed_opt->count() > 0;

  try {
    if (pre->parsed()) return cmd_preprocess(pre_in, pre_profile, pre_out, pre_test, pre_frac, pre_seed, args, io);
    if (syn->parsed()) return cmd_synth(syn_n, syn_types, syn_seed, syn_profile, syn_out, args, io);
    if (tr->parsed()) return cmd_train(ta, args, io);
    if (gen->parsed()) return cmd_generate(ga, args, io);
    if (ev->parsed()) return cmd_evaluate(ea, args, io);
    if (ret->parsed()) return cmd_retrieve(rt_ckpt, rt_data, rt_seed, rt_report, args, io);
    if (ex->parsed()) return cmd_export(ex_data, ex_profile, ex_index, ex_out, io);
  } catch (const ArgumentError& e) {
    return report_error(io, e.category(), e.what(), kUsage);
  } catch (const NumericError& e) {
    return report_error(io, e.category(), e.what(), kNumeric);
  } catch (const Error& e) {
    return report_error(io, e.category(), e.what(), kData);
  } catch (const std::filesystem::filesystem_error& e) {
    return report_error(io, "io", e.what(), kData);
  } catch (const std::exception& e) {
    return report_error(io, "internal", e.what(), kFailure);
  }
  return report_error(io, "usage", "no subcommand", kUsage);
}

inline int dispatch(int argc, char** argv, Io io = {std::cout, std::cerr}) {
  return dispatch(std::vector<std::string>(argv + 1, argv + argc), io);
}

}  // namespace cktgen::cli
