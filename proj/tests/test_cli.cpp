#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "patchzero/cli.hpp"
#include "support.hpp"

namespace pz {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Outcome {
  int code;
  std::string out, err;
};

Outcome pz(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_command(args, out, err);
  return {code, out.str(), err.str()};
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

std::string write_config(const fs::path& dir, const std::string& text) {
  const fs::path p = dir / "cfg.json";
  std::ofstream(p) << text;
  return p.string();
}

constexpr const char* kTinyConfig =
    R"({"data":{"train_per_class":6,"val_per_class":2,"test_per_class":2,"image_size":16},)"
    R"("train":{"classifier_epochs":1,"stage1_epochs":1,"stage2_epochs":1,"val_examples":4,)"
    R"("attack":{"iters":2}},"attack":{"iters":2,"restarts":1},)"
    R"("eval":{"examples":4,"attacks":["mpgd"],"patch_fractions":[0.09]}})";

TEST(ExitCodes, Categories) {
  EXPECT_EQ(exit_code(ErrorKind::kMissingArtifact), 2);
  EXPECT_EQ(exit_code(ErrorKind::kConfig), 3);
  EXPECT_EQ(exit_code(ErrorKind::kFormat), 4);
  EXPECT_EQ(exit_code(ErrorKind::kUsage), 9);
}

TEST(Usage, UnknownSubcommandAndBadFlags) {
  EXPECT_EQ(pz({"frobnicate"}).code, 9);
  EXPECT_EQ(pz({}).code, 9);
  EXPECT_EQ(pz({"attack", "--attack", "fgsm"}).code, 9);
  EXPECT_EQ(pz({"eval", "--patch-fraction", "2"}).code, 9);
  EXPECT_EQ(pz({"--help"}).code, 0);
  auto v = pz({"--version"});
  EXPECT_EQ(v.code, 0);
  EXPECT_NE(v.out.find(version_string()), std::string::npos);
}

TEST(Errors, EvalOnFreshDirectoryIsMissingArtifact) {
  test::TempDir dir("cli_fresh");
  auto r = pz({"eval", "--out", dir.str()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("missing"), std::string::npos) << r.err;
}

TEST(Errors, BadConfigIsConfigError) {
  test::TempDir dir("cli_badcfg");
  auto r = pz({"gen-data", "--config", write_config(dir.path(), R"({"defense":{"eps_p":1.5}})"), "--out",
               (dir.path() / "run").string()});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("defense.eps_p"), std::string::npos) << r.err;
}

TEST(GenData, SeedDeterminesDigest) {
  test::TempDir dir("cli_gen");
  const std::string cfg = write_config(dir.path(), kTinyConfig);
  const fs::path a = dir.path() / "a", b = dir.path() / "b", c = dir.path() / "c";
  ASSERT_EQ(pz({"gen-data", "--config", cfg, "--seed", "7", "--out", a.string()}).code, 0);
  ASSERT_EQ(pz({"gen-data", "--config", cfg, "--seed", "7", "--out", b.string()}).code, 0);
  ASSERT_EQ(pz({"gen-data", "--config", cfg, "--seed", "8", "--out", c.string()}).code, 0);
  const json ma = read_json(a / "manifests" / "gen-data-1.json");
  const json mb = read_json(b / "manifests" / "gen-data-1.json");
  const json mc = read_json(c / "manifests" / "gen-data-1.json");
  EXPECT_EQ(ma["dataset_digest"], mb["dataset_digest"]);
  EXPECT_NE(ma["dataset_digest"], mc["dataset_digest"]);
  EXPECT_EQ(ma["artifacts"]["data/train.pzds"], mb["artifacts"]["data/train.pzds"]);
  EXPECT_NE(ma["artifacts"]["data/train.pzds"], mc["artifacts"]["data/train.pzds"]);
  EXPECT_EQ(ma["seeds"]["root"], 7);
  EXPECT_EQ(ma["config"]["seed"], 7);
  EXPECT_TRUE(ma.contains("version"));
  EXPECT_TRUE(ma["wall_seconds"].contains("total"));
}

TEST(RunDirectory, AppendOnly) {
  test::TempDir dir("cli_append");
  const std::string cfg = write_config(dir.path(), kTinyConfig);
  const fs::path run = dir.path() / "run";
  ASSERT_EQ(pz({"gen-data", "--config", cfg, "--out", run.string()}).code, 0);
  const auto stamp = fs::last_write_time(run / "data" / "train.pzds");
  // Same config: identical bytes, nothing rewritten, second manifest added.
  ASSERT_EQ(pz({"gen-data", "--out", run.string()}).code, 0);
  EXPECT_EQ(fs::last_write_time(run / "data" / "train.pzds"), stamp);
  EXPECT_TRUE(fs::exists(run / "manifests" / "gen-data-2.json"));
  // Different seed would change the data: refused.
  auto r = pz({"gen-data", "--out", run.string(), "--seed", "99"});
  EXPECT_EQ(r.code, 5);
  EXPECT_NE(r.err.find("overwrite"), std::string::npos) << r.err;
}

TEST(Pipeline, SmokeRunProducesReport) {
  test::TempDir dir("cli_smoke");
  const std::string cfg = write_config(dir.path(), kTinyConfig);
  const std::string run = (dir.path() / "run").string();
  for (const char* cmd : {"gen-data", "train-classifier", "train-detector", "eval"}) {
    auto r = pz({cmd, "--config", cfg, "--out", run});
    ASSERT_EQ(r.code, 0) << cmd << ": " << r.err;
  }
  EXPECT_TRUE(fs::exists(fs::path(run) / "models" / "classifier.pzck"));
  EXPECT_TRUE(fs::exists(fs::path(run) / "logs" / "train-detector.jsonl"));
  const json report = read_json(fs::path(run) / "eval" / "report.json");
  EXPECT_FALSE(report["cells"].empty());
  EXPECT_TRUE(report["flags"].contains("ordering/mpgd/0.09"));
  auto a = pz({"attack", "--out", run, "--grad-mode", "bpda"});
  EXPECT_EQ(a.code, 0) << a.err;
}

}  // namespace
}  // namespace pz
