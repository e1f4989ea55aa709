#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>

#include <nlohmann/json.hpp>

#include "sfe/image_io.hpp"
#include "toy.hpp"

using namespace sfe;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(SFE_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) throw std::runtime_error("popen failed");
  Result r;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe)) r.out += buf.data();
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    io::write_text(dir / "toy.json", to_json(sfe::testing::toy_config()).dump());
    const auto r = run("train --config " + (dir / "toy.json").string() + " --out " + (dir / "run").string());
    ASSERT_EQ(r.code, 0) << r.out;
    checkpoint = (dir / "run" / "ckpt_000005.sfe").string();
  }
  sfe::testing::TempDir dir;
  std::string checkpoint;
};

}  // namespace

TEST_F(Cli, RenderIsRepeatable) {
  const std::string base = "render --checkpoint " + checkpoint + " --seed 3 --yaw 0.2 ";
  ASSERT_EQ(run(base + "--out " + (dir / "a.png").string() + " --labels " + (dir / "la.png").string()).code, 0);
  ASSERT_EQ(run(base + "--out " + (dir / "b.png").string() + " --labels " + (dir / "lb.png").string()).code, 0);
  EXPECT_EQ(io::read_file(dir / "a.png"), io::read_file(dir / "b.png"));
  EXPECT_EQ(io::read_file(dir / "la.png"), io::read_file(dir / "lb.png"));
  ASSERT_EQ(run(base + "--width 5 --height 3 --out " + (dir / "c.png").string()).code, 0);
  const auto img = io::decode_png(io::read_file(dir / "c.png"));
  EXPECT_EQ(img.width, 5);
  EXPECT_EQ(img.height, 3);
}

TEST_F(Cli, MetricsOfASetAgainstItself) {
  ASSERT_EQ(run("synth --config " + (dir / "toy.json").string() + " --out " + (dir / "ds").string()).code, 0);
  const std::string images = (dir / "ds" / "images").string();
  const auto r = run("metrics --a " + images + " --b " + images + " --side 4 --kid-subset 4 --kid-subsets 3");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_LE(std::abs(j["fid"].get<double>()), 1e-6);
  EXPECT_EQ(j["count_a"], 8);
}

TEST_F(Cli, ResumeOfFinishedRun) {
  const auto r = run("train --config " + (dir / "toy.json").string() + " --out " + (dir / "run").string() +
                     " --resume " + checkpoint);
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("nothing to do"), std::string::npos) << r.out;
}

TEST_F(Cli, InvertEditTransfer) {
  const auto inv = (dir / "inv.sfe").string();
  auto r = run("invert --checkpoint " + checkpoint + " --self-seed 2 --steps 3 --pivot-samples 32 --out " + inv +
               " --trace " + (dir / "trace.jsonl").string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("final mIoU"), std::string::npos);
  r = run("render --checkpoint " + checkpoint + " --inversion " + inv + " --out " + (dir / "inv.png").string() +
          " --labels " + (dir / "inv_labels.png").string());
  ASSERT_EQ(r.code, 0) << r.out;
  auto labels = io::decode_label_png(io::read_file(dir / "inv_labels.png"));
  for (int i = 0; i < 8; ++i) labels.labels[static_cast<std::size_t>(i)] = 3;
  io::write_file(dir / "edited.png", io::encode_label_png(labels));
  r = run("edit --checkpoint " + checkpoint + " --inversion " + inv + " --image " + (dir / "inv.png").string() +
          " --mask " + (dir / "inv_labels.png").string() + " --edited-mask " + (dir / "edited.png").string() +
          " --steps 2 --out " + (dir / "edited.sfe").string() + " --render " + (dir / "after.png").string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(std::filesystem::exists(dir / "after.png"));
  r = run("transfer --checkpoint " + checkpoint + " --source " + inv + " --target " + (dir / "edited.sfe").string() +
          " --group 1 --out " + (dir / "moved.sfe").string());
  ASSERT_EQ(r.code, 0) << r.out;
}

TEST(CliErrors, ExitCodes) {
  sfe::testing::TempDir dir;
  io::write_text(dir / "bad.json", R"({"model": {"num_groups": 40}})");
  auto r = run("train --config " + (dir / "bad.json").string() + " --out " + (dir / "run").string());
  EXPECT_EQ(r.code, 2) << r.out;
  const auto err = nlohmann::json::parse(r.out.substr(r.out.find('{')));
  EXPECT_EQ(err["error"], "config");
  EXPECT_EQ(err["key"], "model.num_groups");
  EXPECT_EQ(run("render").code, 2);
  EXPECT_EQ(run("render --checkpoint " + (dir / "missing.sfe").string()).code, 4);
}
