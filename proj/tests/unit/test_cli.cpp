#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <sys/wait.h>

#include <gtest/gtest.h>

#include "cktgen/cli.hpp"

using namespace cktgen;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::dispatch(args, {out, err});
  return {code, out.str(), err.str()};
}

fs::path workdir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("cktgen_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string l; std::getline(in, l);) n += l.empty() ? 0 : 1;
  return n;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

}  // namespace

TEST(Cli, SynthDataWritesRecordsAndSidecar) {
  const auto d = workdir("synth");
  const auto out = (d / "toy.jsonl").string();
  const auto r = run({"synth-data", "--n", "100", "--types", "10", "--seed", "3", "--out", out});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(count_lines(out), 100u);
  const auto side = read_json(out + ".config.json");
  EXPECT_EQ(side["command"], "synth-data");
  EXPECT_EQ(load_ocb(out, profile_ckt_bench_101()).records, synthesize_toy(profile_ckt_bench_101(), 100, 10, 3));
  fs::remove_all(d);
}

TEST(Cli, UsageErrorsExitTwo) {
  const auto bad = run({"no-such-command"});
  EXPECT_EQ(bad.code, 2);
  const auto j = nlohmann::json::parse(bad.err);
  EXPECT_EQ(j["error"], "usage");
  EXPECT_EQ(run({"train", "--data", "x.jsonl"}).code, 2);  // --out missing
  EXPECT_EQ(run({"train", "--data", "x", "--out", "y", "--ablate", "bogus"}).code, 2);
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"--help"}).code, 0);
}

TEST(Cli, DataErrorsExitThree) {
  const auto d = workdir("bad");
  const auto path = d / "broken.jsonl";
  std::ofstream(path) << "{not json\n";
  const auto r = run({"train", "--data", path.string(), "--out", (d / "run").string(), "--preset", "tiny"});
  EXPECT_EQ(r.code, 3);
  EXPECT_EQ(nlohmann::json::parse(r.err)["error"], "parse");
  EXPECT_EQ(run({"generate", "--ckpt", (d / "missing.ckpt").string(), "--out", (d / "g.jsonl").string()}).code, 3);
  fs::remove_all(d);
}

TEST(Cli, SpecParsing) {
  const auto p = profile_ckt_bench_101();
  EXPECT_EQ(cli::parse_spec("1,2,3", p), (BinnedSpecification{1, 2, 3}));
  EXPECT_THROW(cli::parse_spec("1,2", p), ArgumentError);
  EXPECT_THROW(cli::parse_spec("a,b,c", p), ArgumentError);
  EXPECT_THROW(cli::parse_spec("9,2,3", p), ArgumentError);
}

// synth-data -> train -> generate -> evaluate -> retrieve -> export.
TEST(Cli, EndToEndPipeline) {
  const auto d = workdir("pipeline");
  const auto data = (d / "toy.jsonl").string(), test = (d / "test.jsonl").string();
  const auto run_dir = d / "run";
  ASSERT_EQ(run({"synth-data", "--n", "120", "--types", "6", "--seed", "1", "--out", data}).code, 0);
  ASSERT_EQ(run({"synth-data", "--n", "30", "--types", "6", "--seed", "2", "--out", test}).code, 0);

  const auto tr = run({"train", "--data", data, "--out", run_dir.string(), "--preset", "tiny", "--epochs", "5", "--batch",
                       "16", "--lr", "1e-3", "--seed", "4", "--deterministic"});
  ASSERT_EQ(tr.code, 0) << tr.err;
  for (const char* f : {"last.ckpt", "best.ckpt", "log.jsonl", "config.json"}) EXPECT_TRUE(fs::exists(run_dir / f)) << f;
  const auto cfg = read_json(run_dir / "config.json");
  EXPECT_EQ(cfg["command"], "train");
  EXPECT_EQ(cfg["resolved"]["train"]["epochs"], 5);
  EXPECT_EQ(cfg["resolved"]["model"], nlohmann::json(ModelConfig::tiny()));

  const auto ckpt = (run_dir / "best.ckpt").string();
  const auto gen_out = (d / "gen.jsonl").string();
  const auto g = run({"generate", "--ckpt", ckpt, "--spec", "1,2,3", "--n", "4", "--seed", "5", "--out", gen_out});
  ASSERT_EQ(g.code, 0) << g.err;
  EXPECT_EQ(count_lines(gen_out), 4u);
  EXPECT_TRUE(fs::exists(gen_out + ".config.json"));
  const auto dot = (d / "gen.dot").string();
  ASSERT_EQ(run({"generate", "--ckpt", ckpt, "--n", "1", "--out", dot}).code, 0);
  EXPECT_EQ(count_lines(dot) > 0, true);
  EXPECT_EQ(run({"generate", "--ckpt", ckpt, "--profile", "301", "--out", gen_out}).code, 3);

  const auto report = (d / "report.json").string();
  const auto ev = run({"evaluate", "--gen-ckpt", ckpt, "--data", test, "--seed", "6", "--report", report});
  ASSERT_EQ(ev.code, 0) << ev.err;
  const auto rep = read_json(report);
  for (const char* key : {"R@1", "R@2", "R@3", "spec_accuracy", "mm_distance", "fid", "valid_circuit", "diversity"})
    EXPECT_TRUE(rep.contains(key)) << key;
  EXPECT_TRUE(fs::exists(report + ".config.json"));
  // Same seed, same report.
  EXPECT_EQ(nlohmann::json::parse(run({"evaluate", "--gen-ckpt", ckpt, "--data", test, "--seed", "6"}).out), rep);

  const auto un = run({"evaluate", "--gen-ckpt", ckpt, "--mode", "uncond", "--n", "20", "--train-data", data});
  ASSERT_EQ(un.code, 0) << un.err;
  EXPECT_DOUBLE_EQ(nlohmann::json::parse(un.out)["valid_dag"].get<double>(), 1.0);
  const auto rc = run({"evaluate", "--gen-ckpt", ckpt, "--mode", "recon", "--data", test});
  ASSERT_EQ(rc.code, 0) << rc.err;
  EXPECT_TRUE(nlohmann::json::parse(rc.out).contains("reconstruction_accuracy"));
  const auto rt = run({"retrieve", "--ckpt", ckpt, "--data", test});
  ASSERT_EQ(rt.code, 0) << rt.err;
  EXPECT_TRUE(nlohmann::json::parse(rt.out).contains("top_5"));

  const auto ex = run({"export", "--data", test, "--index", "0", "--out", (d / "one.dot").string()});
  ASSERT_EQ(ex.code, 0) << ex.err;
  EXPECT_TRUE(fs::exists(d / "one.dot"));

  // Resuming a finished run adds no steps.
  const auto again = run({"train", "--data", data, "--out", run_dir.string(), "--preset", "tiny", "--epochs", "5",
                          "--batch", "16", "--lr", "1e-3", "--seed", "4", "--deterministic", "--resume"});
  EXPECT_EQ(again.code, 0) << again.err;
  fs::remove_all(d);
}

TEST(Cli, BinaryReportsExitCodes) {
  const std::string bin = CKTGEN_CLI_PATH;
  ASSERT_TRUE(fs::exists(bin));
  const auto status = [](const std::string& cmd) {
    const int s = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
  };
  EXPECT_EQ(status(bin + " --help"), 0);
  EXPECT_EQ(status(bin + " frobnicate"), 2);
  EXPECT_EQ(status(bin + " generate --ckpt /nonexistent/x.ckpt --out /tmp/x.jsonl"), 3);
}
