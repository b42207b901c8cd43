#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "xmb/io.hpp"

namespace fs = std::filesystem;

namespace {

std::string cli() {
  const char* p = std::getenv("XMB_CLI");
  return p ? p : "xmb";
}

fs::path scratch() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / ("xmb-cli-test-" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

struct CliResult {
  int code = -1;
  std::string out;
};

// Runs the CLI with `args` from the scratch directory; stdout is captured.
CliResult cli_run(const std::string& args, const std::string& env = "") {
  const fs::path out = scratch() / "stdout.txt";
  const std::string cmd = "cd '" + scratch().string() + "' && " + env + (env.empty() ? "" : " ") + "'" + cli() +
                          "' " + args + " --quiet > '" + out.string() + "' 2> '" + (scratch() / "stderr.txt").string() +
                          "'";
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = xmb::io::read_file(out);
  return r;
}

std::string slurp(const fs::path& p) { return xmb::io::read_file(p); }

// Small configuration so the end-to-end chain stays in seconds.
const std::string& small_config() {
  static const std::string path = [] {
    const xmb::io::json j = {
        {"world", {{"clean_train_size", 300}, {"eval_size", 40}}},
        {"pretrain", {{"epochs", 2}, {"samples_per_modality", 100}}},
        {"poison", {{"variants", 9}, {"clean_count", 90}, {"epochs", 2}}},
        {"doors", {"image"}},
        {"activations", {"image", "audio"}},
        {"activation", {{"steps", 10}}},
        {"n_activation", 8},
        {"n_leakage", 30},
        {"ablation", {{"n", 8}}},
        {"defense", {{"n", 8}, {"finetune_epochs", {0, 1}}, {"prune_ratios", {0.0, 0.25}},
                     {"transforms", {"smooth:1", "lowpass:0.5"}}, {"repair", {{"clean_count", 40}}}}},
    };
    const fs::path p = scratch() / "small.json";
    std::ofstream(p) << j.dump(1);
    return p.string();
  }();
  return path;
}

std::string cfg() { return " --config '" + small_config() + "'"; }

class RemoveScratch : public ::testing::Environment {
 public:
  void TearDown() override { fs::remove_all(scratch()); }
};
const auto* const remove_scratch = ::testing::AddGlobalTestEnvironment(new RemoveScratch);

}  // namespace

TEST(Cli, ParseErrorsExitTwo) {
  EXPECT_EQ(cli_run("").code, 2);
  EXPECT_EQ(cli_run("pretrain --no-such-flag").code, 2);
  EXPECT_EQ(cli_run("frobnicate").code, 2);
  std::ofstream(scratch() / "broken.json") << "{\"world\": ";
  EXPECT_EQ(cli_run("pretrain --config broken.json --out x.json").code, 2);
  std::ofstream(scratch() / "bad_value.json") << R"({"world": {"gap_norm": -1}})";
  EXPECT_EQ(cli_run("world gen --config bad_value.json --out w.json").code, 2);
}

TEST(Cli, HelpExitsZero) { EXPECT_EQ(cli_run("--help").code, 0); }

TEST(Cli, MissingInputsExitThree) {
  EXPECT_EQ(cli_run("poison --ckpt nowhere.json --door image --out p.json").code, 3);
}

TEST(Cli, EndToEndChainAndExitCodes) {
  ASSERT_EQ(cli_run("pretrain --out clean.json" + cfg()).code, 0);
  EXPECT_EQ(cli_run("poison --ckpt clean.json --door text --out poisoned.json" + cfg()).code, 0);
  ASSERT_TRUE(fs::exists(scratch() / "poisoned.json.poison-set.json"));
  EXPECT_EQ(cli_run("centroid --ckpt poisoned.json --poison-set poisoned.json.poison-set.json --out c.json").code, 0);
  EXPECT_EQ(cli_run("activate --ckpt poisoned.json --centroid c.json --modality audio --steps 10 --n 5 --out a.json").code, 0);
  EXPECT_EQ(cli_run("defend --ckpt poisoned.json --mode fineprune --ratio 0.25 --epochs 1 --out r.json" + cfg()).code, 0);
  const CliResult d = cli_run("defend-input --transform smooth:1 --acts a.json --ckpt poisoned.json --adaptive");
  EXPECT_EQ(d.code, 0);
  EXPECT_NE(d.out.find("defense,setting,utility"), std::string::npos);
  EXPECT_NE(d.out.find("smooth,sigma=1,"), std::string::npos);

  // Activations were produced against the poisoned checkpoint, not the clean one.
  EXPECT_EQ(cli_run("defend-input --transform smooth:1 --acts a.json --ckpt clean.json").code, 4);
  // A finished stage rerun with different inputs into the same path.
  EXPECT_EQ(cli_run("pretrain --out clean.json --seed 99" + cfg()).code, 4);
  EXPECT_EQ(cli_run("centroid --ckpt missing.json --poison-set poisoned.json.poison-set.json --out c2.json").code, 3);
  EXPECT_EQ(cli_run("poison --ckpt clean.json --door smell --out q.json" + cfg()).code, 2);
}

TEST(Cli, RerunIsResumable) {
  ASSERT_EQ(cli_run("pretrain --out resume.json" + cfg()).code, 0);
  const auto t0 = fs::last_write_time(scratch() / "resume.json");
  const std::string bytes = slurp(scratch() / "resume.json");
  ASSERT_EQ(cli_run("pretrain --out resume.json" + cfg()).code, 0);
  EXPECT_EQ(fs::last_write_time(scratch() / "resume.json"), t0);
  EXPECT_EQ(slurp(scratch() / "resume.json"), bytes);
}

TEST(Cli, OutputDirEnvironmentOverride) {
  fs::create_directories(scratch() / "envdir");
  ASSERT_EQ(cli_run("world gen --out w.json" + cfg(), "XMB_OUT_DIR=envdir").code, 0);
  EXPECT_TRUE(fs::exists(scratch() / "envdir" / "w.json"));
  EXPECT_FALSE(fs::exists(scratch() / "w.json"));
}

TEST(Cli, SmallTableIsDeterministic) {
  ASSERT_EQ(cli_run("table reach --out-dir run1" + cfg()).code, 0);
  const CliResult r = cli_run("table reach --out-dir run2" + cfg());
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("reach"), std::string::npos);
  const std::string a = slurp(scratch() / "run1" / "tables" / "reach.csv");
  EXPECT_EQ(a, slurp(scratch() / "run2" / "tables" / "reach.csv"));
  EXPECT_EQ(a.rfind("# xmb-report/1 reach", 0), 0u);
  EXPECT_EQ(slurp(scratch() / "run1" / "ckpt" / "clean.json"), slurp(scratch() / "run2" / "ckpt" / "clean.json"));
}

TEST(Cli, GradientSuiteRuns) {
  const CliResult r = cli_run("check grads --seeds 1");
  EXPECT_TRUE(r.code == 0 || r.code == 1);
  EXPECT_EQ(r.out.rfind("loss,wrt,seed,max_rel_err,pass", 0), 0u);
}
