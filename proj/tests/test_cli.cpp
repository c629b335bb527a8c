#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "recas/pipeline.hpp"
#include "recas/select.hpp"

using namespace recas;
namespace fs = std::filesystem;

namespace {

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    char tmpl[] = "/tmp/recas_cli_XXXXXX";
    ASSERT_NE(::mkdtemp(tmpl), nullptr);
    dir_ = tmpl;
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  int run(const std::string& args, const std::string& env = "") const {
    const std::string cmd = env + " " + RECAS_CLI_PATH + " " + args + " 2>" + path("stderr.txt");
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  }

  std::string read(const std::string& name) const {
    std::ifstream in(path(name));
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, SynthRunEvaluate) {
  ASSERT_EQ(run("synth --seed 3 --id a --width 8000 --height 6000 --density 20 -o " + path("a.txt")), 0);
  ASSERT_EQ(run("synth --seed 4 --id b --width 8000 --height 6000 --density 20 -o " + path("b.txt")), 0);
  ASSERT_EQ(run("run --oracle perfect -a " + path("a.txt") + " -a " + path("b.txt") + " -o " + path("snap.csv")), 0);
  ASSERT_EQ(run("evaluate -s " + path("snap.csv") + " -a " + path("a.txt") + " -a " + path("b.txt") + " -o " +
                path("report.txt") + " --scatter " + path("mc.csv") + " --fp-bars " + path("fp.csv")),
            0);
  const auto report = read("report.txt");
  EXPECT_NE(report.find("[slide a]"), std::string::npos);
  EXPECT_NE(report.find("[slide b]"), std::string::npos);
  EXPECT_NE(report.find("f1 = 1\n"), std::string::npos) << report;
  EXPECT_NE(report.find("mape_ga = 0\n"), std::string::npos) << report;
  EXPECT_EQ(read("mc.csv").rfind("slide,mc_gt,mc_pred_ga,mc_pred_gb\n", 0), 0u);
  EXPECT_EQ(read("fp.csv").rfind("slide,fp_easy,fp_hard\n", 0), 0u);
}

TEST_F(Cli, RunIsDeterministicAndConfigurable) {
  ASSERT_EQ(run("synth --preset bench --seed 9 --id s --width 6000 --height 5000 -o " + path("s.txt")), 0);
  {
    std::ofstream c(path("cfg.txt"));
    c << "# ladder baseline\nrelocation = off\nadjustment = off\nfusion = off\nseed = 5\n";
  }
  ASSERT_EQ(run("run -a " + path("s.txt") + " -c " + path("cfg.txt") + " -o " + path("r1.csv")), 0);
  ASSERT_EQ(run("run -a " + path("s.txt") + " -c " + path("cfg.txt") + " -o " + path("r2.csv")), 0);
  EXPECT_EQ(read("r1.csv"), read("r2.csv"));
  std::ifstream in(path("r1.csv"));
  const auto snaps = read_snapshots(in);
  EXPECT_TRUE(snaps.get("s", "relocate").empty());
  EXPECT_TRUE(snaps.get("s", "adjust").empty());
  EXPECT_FALSE(snaps.get("s", "classify").empty());
  ASSERT_EQ(run("run -a " + path("s.txt") + " -c " + path("cfg.txt") + " -o " + path("r3.csv"), "RECAS_SEED=6"), 0);
  EXPECT_NE(read("r1.csv"), read("r3.csv"));
}

TEST_F(Cli, ExternalBackendMatchesInProcess) {
  ASSERT_EQ(run("synth --seed 12 --id s --width 5000 --height 4000 --density 30 -o " + path("s.txt")), 0);
  ASSERT_EQ(run("run -a " + path("s.txt") + " -o " + path("local.csv"), "RECAS_SEED=17"), 0);
  const std::string endpoint =
      std::string("'exec:") + RECAS_CLI_PATH + " serve --oracle noisy --seed 17 -a " + path("s.txt") + "'";
  ASSERT_EQ(run("run -a " + path("s.txt") + " -o " + path("remote.csv"), "RECAS_SEED=17 RECAS_BACKEND=" + endpoint), 0)
      << read("stderr.txt");
  EXPECT_FALSE(read("local.csv").empty());
  EXPECT_EQ(read("local.csv"), read("remote.csv"));
}

TEST_F(Cli, SweepPlanSelectBench) {
  ASSERT_EQ(run("synth --seed 1 --id s --width 9000 --height 7000 --density 25 -o " + path("s.txt")), 0);
  ASSERT_EQ(run("run -a " + path("s.txt") + " -o " + path("snap.csv")), 0);
  ASSERT_EQ(run("evaluate -t sweep -s " + path("snap.csv") + " -a " + path("s.txt") + " -o " + path("rep.txt")), 0);
  EXPECT_NE(read("stderr.txt").find("lowest GA MAPE at threshold"), std::string::npos);

  ASSERT_EQ(run("plan --width 1300 --height 700 -k 512 -o " + path("plan.txt")), 0);
  std::ifstream pin(path("plan.txt"));
  EXPECT_EQ(read_plan(pin).windows.size(), 6u);
  ASSERT_EQ(run("plan --strategy relocation -a " + path("s.txt") + " -o " + path("rplan.txt")), 0);

  ASSERT_EQ(run("select -s " + path("snap.csv") + " -n 5 --write-candidates " + path("cand.csv") + " -o " +
                path("sel.csv")),
            0);
  std::ifstream sin(path("sel.csv"));
  EXPECT_EQ(read_selection(sin).size(), 5u);
  ASSERT_EQ(run("select --candidates " + path("cand.csv") + " --strategy kcenter_greedy -n 3 -o " + path("k.csv")), 0);
  std::ifstream kin(path("k.csv"));
  EXPECT_EQ(read_selection(kin).size(), 3u);

  ASSERT_EQ(run("bench -a " + path("s.txt") + " -o " + path("bench.csv")), 0);
  EXPECT_EQ(read("bench.csv").rfind("strategy,windows,grid_windows,overhead,wall_ms\n", 0), 0u);
}

TEST_F(Cli, ErrorsExitNonZero) {
  EXPECT_NE(run("run -a " + path("missing.txt")), 0);
  EXPECT_NE(read("stderr.txt").find("error:"), std::string::npos);
  EXPECT_NE(run("synth --preset nope"), 0);
  EXPECT_NE(run("frobnicate"), 0);
  ASSERT_EQ(run("synth --seed 1 --id s --width 3000 --height 3000 -o " + path("s.txt")), 0);
  // backend that exits before the handshake
  EXPECT_EQ(run("run -a " + path("s.txt") + " -o " + path("x.csv"), "RECAS_BACKEND='exec:/bin/true'"), 1);
}
