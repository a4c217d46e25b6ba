#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <fstream>

#include "harness_util.hpp"
#include "test_util.hpp"

using namespace dapa;
using namespace dapa::harness;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
};

Outcome cli(const std::string& args) {
  const std::string cmd = std::string(DAPA_CLI_PATH) + " " + args + " 2>/dev/null";
  Outcome o;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return o;
  std::array<char, 4096> buf{};
  while (fgets(buf.data(), buf.size(), pipe)) o.out += buf.data();
  const int status = pclose(pipe);
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return o;
}

class Cli : public ::testing::Test {
 protected:
  static fs::path dir() {
    static const fs::path d = [] {
      const fs::path p = dapa::testing::scratch_dir("cli");
      write_file_atomic(p / "config.json", to_json(dapa::testing::fast_experiment(1, Method::Dapa)).dump(2));
      write_file_atomic(p / "template.json", to_json(dapa::testing::fast_template_spec()).dump(2));
      return p;
    }();
    return d;
  }
  static std::string config() { return (dir() / "config.json").string(); }
  static std::string cache() { return " --cache " + (dir() / "cache").string() + " -q"; }
};

}  // namespace

TEST_F(Cli, UsageErrorsExitWithTwo) {
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("frobnicate").code, 2);
  EXPECT_EQ(cli("run -o x").code, 2);
  EXPECT_EQ(cli("run -c /nonexistent.json -o " + (dir() / "r0").string()).code, 2);
  EXPECT_EQ(cli("sweep -c " + config() + " --axis k --values 1 -o " + (dir() / "s0").string()).code, 2);
  EXPECT_EQ(cli("sweep -c " + config() + " --axis m --values 1,x -o " + (dir() / "s0").string()).code, 2);
}

TEST_F(Cli, InvalidConfigExitsWithTwo) {
  json j = json::parse(read_file(config()));
  j["bogus"] = true;
  write_file_atomic(dir() / "bad.json", j.dump());
  EXPECT_EQ(cli("run -q -c " + (dir() / "bad.json").string() + " -o " + (dir() / "r1").string()).code, 2);
  write_file_atomic(dir() / "broken.json", "{not json");
  EXPECT_EQ(cli("run -q -c " + (dir() / "broken.json").string() + " -o " + (dir() / "r1").string()).code, 2);
}

TEST_F(Cli, GenDataWritesVocabularyAndSplits) {
  const fs::path out = dir() / "data";
  ASSERT_EQ(cli("gen-data -q -c " + config() + " -o " + out.string()).code, 0);
  const std::string vocab = read_file(out / "vocab.txt");
  const Vocabulary v = Vocabulary::load((out / "vocab.txt").string());
  EXPECT_EQ(v.size(), Lexicon::vocabulary().size());
  EXPECT_EQ(vocab.substr(0, 4), "f00\n");
  EXPECT_EQ(v.encode("f00"), kFirstRegular);
  for (const char* d : {"lead", "tail", "keyword", "target"}) {
    EXPECT_TRUE(fs::exists(out / d / "train.jsonl")) << d;
    EXPECT_TRUE(fs::exists(out / d / "spec.json")) << d;
  }
  const auto train = parse_split_jsonl(read_file(out / "lead" / "train.jsonl"), "train");
  EXPECT_EQ(train.size(), 10u);
}

TEST_F(Cli, RunReportAndAddDomain) {
  const fs::path run = dir() / "run";
  const Outcome r = cli("run -q -c " + config() + " -o " + run.string() + " --cache " + (dir() / "cache").string());
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("dapa"), std::string::npos);
  const Outcome rep = cli("report --format json " + run.string());
  ASSERT_EQ(rep.code, 0);
  const auto results = results_from_json(json::parse(rep.out));
  ASSERT_EQ(results.size(), 1u);
  EXPECT_EQ(results[0], run_result_from_json(json::parse(read_file(run / "result.json"))));

  const Outcome add = cli("add-domain -q -r " + run.string() + " -s " + (dir() / "template.json").string());
  ASSERT_EQ(add.code, 0);
  EXPECT_NE(add.out.find("trained: template"), std::string::npos);
  EXPECT_EQ(cli("add-domain -q -r " + run.string() + " -s " + (dir() / "template.json").string()).code, 2);
  EXPECT_EQ(cli("add-domain -q -r " + (dir() / "nope").string() + " -s " + (dir() / "template.json").string()).code, 3);
}

TEST_F(Cli, WeightsMergeEvalChain) {
  const fs::path w = dir() / "weights";
  ASSERT_EQ(cli("weights -c " + config() + cache() + " -o " + w.string()).code, 0);
  const DomainWeights dw = weights_from_json(json::parse(read_file(w / "weights.json")));
  EXPECT_EQ(dw.size(), 3u);
  EXPECT_TRUE(fs::exists(w / "similarity.json"));
  ASSERT_EQ(cli("weights -c " + config() + cache() + " --rule uniform -o " + (dir() / "wu").string()).code, 0);
  EXPECT_EQ(cli("weights -c " + config() + cache() + " --rule inst -o " + (dir() / "wu").string()).code, 2);

  const fs::path merged = dir() / "merged.pts";
  ASSERT_EQ(cli("merge -c " + config() + cache() + " -w " + (w / "weights.json").string() + " -o " + merged.string()).code, 0);
  EXPECT_NO_THROW(load_prefix_tensors(merged));
  EXPECT_EQ(cli("merge -c " + config() + cache() + " --mode max -o " + (dir() / "max.pts").string()).code, 0);
  EXPECT_EQ(cli("merge -c " + config() + cache() + " -o " + merged.string()).code, 2);

  const Outcome ev = cli("eval -c " + config() + cache() + " --tensors " + merged.string());
  ASSERT_EQ(ev.code, 0);
  const json j = json::parse(ev.out);
  EXPECT_GE(j["rougeL"]["f1"].get<double>(), 0.0);

  write_file_atomic(dir() / "garbage.pts", "DAPAXXXX");
  EXPECT_EQ(cli("eval -c " + config() + cache() + " --tensors " + (dir() / "garbage.pts").string()).code, 3);
  write_file_atomic(dir() / "garbage.json", "{oops");
  EXPECT_EQ(cli("merge -c " + config() + cache() + " -w " + (dir() / "garbage.json").string()).code, 3);
}

TEST_F(Cli, TrainPrefixAndErm) {
  const Outcome tp = cli("train-prefix -c " + config() + cache() + " -d lead");
  ASSERT_EQ(tp.code, 0);
  EXPECT_EQ(tp.out.rfind("lead ", 0), 0u);
  EXPECT_EQ(cli("train-prefix -c " + config() + cache() + " -d target").code, 2);
  EXPECT_EQ(cli("train-prefix -c " + config() + cache() + " -d nowhere").code, 2);
  EXPECT_EQ(cli("train-erm -c " + config() + cache()).code, 0);
  EXPECT_EQ(cli("train-erm -c " + config() + cache() + " --mode dapa").code, 2);
}

TEST_F(Cli, SweepWritesResults) {
  const fs::path out = dir() / "sweep";
  ASSERT_EQ(cli("sweep -q -c " + config() + " --axis m --values 2,4 -o " + out.string()).code, 0);
  EXPECT_EQ(results_from_json(json::parse(read_file(out / "results.json"))).size(), 2u);
}

TEST_F(Cli, ReportErrors) {
  EXPECT_EQ(cli("report " + (dir() / "missing.json").string()).code, 3);
}

TEST_F(Cli, GradCheckExitCodes) {
  EXPECT_EQ(cli("grad-check").code, 0);
  EXPECT_EQ(cli("grad-check --tolerance 0").code, 4);
}
