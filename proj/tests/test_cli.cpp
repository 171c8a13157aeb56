// SPDX-License-Identifier: Apache-2.0
// Runs the laser_cli binary end to end and checks files and exit codes.

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "laser/config.hpp"

namespace fs = std::filesystem;
using laser::Json;

namespace {

const std::string kCli = LASER_CLI_PATH;
const std::string kCorpus = std::string(LASER_DATA_DIR) + "/milton.txt";

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("laser_cli_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int run(const std::string& args) {
  const std::string cmd = kCli + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Json read_json(const fs::path& p) { return Json::parse(slurp(p)); }

const std::string kTiny =
    "--set model.layers=1 --set model.d_model=16 --set model.heads=2 --set model.mlp_hidden=32 "
    "--set model.max_seq=16 --set train.seq_len=16 --set train.steps=10 --set train.batch=2 "
    "--set train.eval_every=5 --quiet --set data.corpus=" + kCorpus;

}  // namespace

TEST(Cli, TrainWritesCompleteBundle) {
  const auto dir = scratch("bundle");
  ASSERT_EQ(run("train " + kTiny + " --out " + (dir / "run").string()), 0);
  const auto run_dir = dir / "run";
  const Json summary = read_json(run_dir / "summary.json");
  for (const auto& [key, file] : summary.at("files").items()) {
    EXPECT_TRUE(fs::exists(run_dir / file.get<std::string>())) << key;
  }
  std::ifstream csv(run_dir / "metrics.csv");
  std::string line;
  std::size_t rows = 0;
  std::getline(csv, line);
  EXPECT_EQ(line, "step,loss,grad_norm,lr,eval_loss");
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 10u);

  const Json resolved = read_json(run_dir / "config.json");
  EXPECT_EQ(summary.at("config"), resolved);
  EXPECT_EQ(read_json(run_dir / "saturation.json").at("config"), resolved);
  EXPECT_EQ(read_json(run_dir / "gradcheck.json").at("config"), resolved);
  EXPECT_TRUE(summary.at("gradcheck_passed").get<bool>());
  EXPECT_EQ(summary.at("schema_version"), 1);
}

TEST(Cli, TwoRunsAreByteIdenticalExceptSummaryTimestamp) {
  const auto dir = scratch("determinism");
  const char* files[] = {"metrics.csv", "checkpoint.ckpt", "config.json", "saturation.json", "gradcheck.json",
                         "loss.svg",    "grad_norm.svg"};
  ASSERT_EQ(run("train " + kTiny + " --out " + (dir / "run").string()), 0);
  std::vector<std::string> first;
  for (const char* f : files) first.push_back(slurp(dir / "run" / f));
  Json s1 = read_json(dir / "run" / "summary.json");
  ASSERT_EQ(run("train " + kTiny + " --out " + (dir / "run").string()), 0);
  for (std::size_t i = 0; i < std::size(files); ++i) EXPECT_EQ(first[i], slurp(dir / "run" / files[i])) << files[i];
  Json s2 = read_json(dir / "run" / "summary.json");
  for (Json* s : {&s1, &s2}) {
    s->erase("created_at");
    s->erase("wall_seconds");
  }
  EXPECT_EQ(s1, s2);
}

TEST(Cli, AttentionFlagChangesOnlyAttentionVariant) {
  const auto dir = scratch("attention");
  const std::string base = kTiny + " --set train.steps=1 --set output.plots=false";
  ASSERT_EQ(run("train " + base + " --attention standard --set output.dir=" + (dir / "s").string()), 0);
  ASSERT_EQ(run("train " + base + " --attention laser --set output.dir=" + (dir / "s").string() + "_l"), 0);
  Json s = read_json(dir / "s" / "config.json");
  Json l = read_json(fs::path((dir / "s").string() + "_l") / "config.json");
  EXPECT_EQ(s["attention"]["variant"], "standard");
  EXPECT_EQ(l["attention"]["variant"], "laser");
  s["attention"].erase("variant");
  l["attention"].erase("variant");
  s["output"].erase("dir");
  l["output"].erase("dir");
  EXPECT_EQ(s, l);
}

TEST(Cli, ExitCodes) {
  const auto dir = scratch("exit");
  EXPECT_EQ(run("train --set model.bogus=1"), 2);
  EXPECT_EQ(run("train --set train.lr=fast"), 2);
  {
    std::ofstream(dir / "broken.json") << "{ not json";
  }
  EXPECT_EQ(run("train --config " + (dir / "broken.json").string()), 2);
  EXPECT_EQ(run("train --quiet --set data.corpus=" + (dir / "missing.txt").string()), 3);
  EXPECT_EQ(run("train " + kTiny + " --set train.lr=1e30 --set train.warmup_frac=0 --out " + (dir / "nan").string()),
            4);
  EXPECT_TRUE(fs::exists(dir / "nan" / "error.json"));
  EXPECT_TRUE(fs::exists(dir / "nan" / "metrics.csv"));
  EXPECT_EQ(run("no-such-command"), 2);
}

TEST(Cli, ProbeRejectsIncompatibleCheckpoint) {
  const auto dir = scratch("probe");
  ASSERT_EQ(run("train " + kTiny + " --set train.steps=2 --out " + (dir / "run").string()), 0);
  const std::string ck = (dir / "run" / "checkpoint.ckpt").string();

  ASSERT_EQ(run("probe --checkpoint " + ck + " --data " + kCorpus + " --threshold 1e-7 --threshold 1e-3 --out " +
                (dir / "p.json").string()),
            0);
  const std::string text = slurp(dir / "p.json");
  EXPECT_NE(text.find("1e-07"), std::string::npos);
  EXPECT_NE(text.find("0.001"), std::string::npos);
  const Json p = Json::parse(text);
  EXPECT_EQ(p.at("thresholds"), Json::array({1e-7, 1e-3}));

  Json cfg = read_json(dir / "run" / "config.json");
  EXPECT_EQ(run("probe --checkpoint " + ck + " --data " + kCorpus + " --config " + (dir / "run" / "config.json").string()),
            0);
  cfg["model"]["d_model"] = 32;
  std::ofstream(dir / "wrong.json") << cfg.dump();
  EXPECT_EQ(run("probe --checkpoint " + ck + " --data " + kCorpus + " --config " + (dir / "wrong.json").string()), 5);

  std::ofstream(dir / "garbage.ckpt") << "definitely not a checkpoint";
  EXPECT_EQ(run("probe --checkpoint " + (dir / "garbage.ckpt").string() + " --data " + kCorpus), 5);
  EXPECT_EQ(run("probe --checkpoint " + (dir / "absent.ckpt").string() + " --data " + kCorpus), 3);
}

TEST(Cli, GradcheckPassesAndFlagsInjectedFault) {
  const auto dir = scratch("gradcheck");
  EXPECT_EQ(run("gradcheck --scope ops --out " + (dir / "ok.json").string()), 0);
  EXPECT_TRUE(read_json(dir / "ok.json").at("passed").get<bool>());

  EXPECT_EQ(run("gradcheck --scope ops --inject-softmax-fault --out " + (dir / "bad.json").string()), 1);
  const Json bad = read_json(dir / "bad.json");
  EXPECT_FALSE(bad.at("passed").get<bool>());
  bool flagged = false;
  for (const auto& c : bad.at("checks"))
    if (c.at("name") == "row_softmax") flagged = !c.at("passed").get<bool>();
  EXPECT_TRUE(flagged);

  EXPECT_EQ(run("gradcheck --scope nonsense"), 2);
}

TEST(Cli, OverflowDemo) {
  const auto dir = scratch("overflow");
  ASSERT_EQ(run("overflow-demo --dtype f32 --scale 100 --out " + (dir / "o.json").string()), 0);
  const Json o = read_json(dir / "o.json");
  EXPECT_FALSE(o.at("naive").at("finite").get<bool>());
  EXPECT_TRUE(o.at("tricked").at("finite").get<bool>());
  EXPECT_EQ(run("overflow-demo --dtype f16"), 2);
}

TEST(Cli, FitScaling) {
  const auto dir = scratch("fit");
  {
    std::ofstream f(dir / "pts.csv");
    f.precision(17);
    f << "params,loss\n";
    for (double n : {1e3, 1e4, 1e5, 1e6}) f << n << ',' << 3.0 * std::pow(n, -0.25) << '\n';
  }
  ASSERT_EQ(run("fit-scaling --points " + (dir / "pts.csv").string() + " --svg " + (dir / "fit.svg").string() +
                " --out " + (dir / "fit.json").string()),
            0);
  const Json fit = read_json(dir / "fit.json");
  EXPECT_NEAR(fit.at("a").get<double>(), 3.0, 1e-9);
  EXPECT_NEAR(fit.at("b").get<double>(), -0.25, 1e-12);
  EXPECT_TRUE(fs::exists(dir / "fit.svg"));

  std::ofstream(dir / "one.csv") << "params,loss\n10,2\n";
  EXPECT_EQ(run("fit-scaling --points " + (dir / "one.csv").string()), 2);
  std::ofstream(dir / "bad.csv") << "params,loss\n10,2\n100,abc\n";
  EXPECT_EQ(run("fit-scaling --points " + (dir / "bad.csv").string()), 2);
}
