#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <fstream>

#include "bld/image.hpp"
#include "bld/vision.hpp"
#include "support.hpp"

namespace bld {
namespace {

namespace fs = std::filesystem;

struct CliRun {
  int code = -1;
  std::string out;
};

CliRun run(const std::string& args) {
  const std::string cmd = std::string(BLD_CLI) + " " + args + " 2>&1";
  CliRun r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), p)) r.out += buf.data();
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

// One tiny model set shared by the command tests; trained once through the CLI itself.
class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new test::TempDir("bld-cli");
    const fs::path d = dir_->path();
    ASSERT_EQ(run("gen-data --count 12 --seed 3 --out " + (d / "corpus").string()).code, 0);
    write_text(d / "recipe.json", R"({
      "vae": {"epochs": 1, "batch_size": 4, "arch": {"width": 8}},
      "denoiser": {"epochs": 1, "batch_size": 4,
                   "arch": {"base_channels": 8, "mid_channels": 16, "time_dim": 16, "groups": 4}},
      "embedder": {"epochs": 1, "hidden": 8, "embed_dim": 8},
      "classifier": {"epochs": 1, "hidden": 8},
      "edit": {"batch": 2, "steps": 4}
    })");
    const std::string common = " --corpus " + (d / "corpus").string() + " --config " + (d / "recipe.json").string();
    const fs::path m = d / "models";
    for (const char* c : {"vae", "embedder", "classifier"}) {
      const CliRun r = run(std::string("train ") + c + common + " --out " + (m / (std::string(c) + ".ckpt")).string());
      ASSERT_EQ(r.code, 0) << r.out;
    }
    const CliRun r = run("train denoiser" + common + " --vae " + (m / "vae.ckpt").string() + " --out " +
                      (m / "denoiser.ckpt").string());
    ASSERT_EQ(r.code, 0) << r.out;
    write_png(d / "in.png", test::random_image(64, 64, 5));
    write_mask_png(d / "mask.png", rect_mask(Rect{16, 16, 24, 24}, 64, 64));
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }

  static fs::path path() { return dir_->path(); }
  static std::string edit_args() {
    const fs::path d = path();
    return " --models " + (d / "models").string() + " --config " + (d / "recipe.json").string();
  }

  static test::TempDir* dir_;
};

test::TempDir* CliTest::dir_ = nullptr;

TEST_F(CliTest, GenDataIsDeterministic) {
  const CliRun a = run("gen-data --count 4 --seed 9 --out " + (path() / "g1").string());
  const CliRun b = run("gen-data --count 4 --seed 9 --out " + (path() / "g2").string());
  ASSERT_EQ(a.code, 0);
  const auto manifest = [](const std::string& s) { return s.substr(s.find("(manifest")); };
  EXPECT_EQ(manifest(a.out), manifest(b.out));
  EXPECT_TRUE(fs::exists(path() / "g1" / "manifest.json"));
  EXPECT_EQ(read_png(path() / "g1" / "scene_00003.png"), read_png(path() / "g2" / "scene_00003.png"));
}

TEST_F(CliTest, TrainPrintsCurvesAndResumes) {
  const fs::path d = path();
  const CliRun r = run("train vae --corpus " + (d / "corpus").string() + " --config " + (d / "recipe.json").string() +
                    " --out " + (d / "v2.ckpt").string() + " --resume " + (d / "models" / "vae.ckpt").string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("vae epoch 1 loss"), std::string::npos);
  EXPECT_NE(run("train denoiser --corpus " + (d / "corpus").string() + " --out x.ckpt").out.find("needs --vae"),
            std::string::npos);
}

TEST_F(CliTest, EditWritesRankedOutputs) {
  const fs::path d = path(), out = d / "edit";
  const CliRun r = run("edit" + edit_args() + " --image " + (d / "in.png").string() + " --mask " +
                    (d / "mask.png").string() + " --prompt \"red circle\" --snapshots --seed 4 --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.out;
  for (const char* f : {"rank_01.png", "rank_02.png", "process_01.png", "ranking.json"}) EXPECT_TRUE(fs::exists(out / f)) << f;
  EXPECT_EQ(read_png(out / "rank_01.png").height(), 64);

  const fs::path again = d / "edit2";
  ASSERT_EQ(run("edit" + edit_args() + " --image " + (d / "in.png").string() + " --mask " + (d / "mask.png").string() +
                " --prompt \"red circle\" --snapshots --seed 4 --out " + again.string())
                .code,
            0);
  EXPECT_EQ(read_file(out / "rank_01.png"), read_file(again / "rank_01.png"));
}

TEST_F(CliTest, EditErrorsExitNonZero) {
  const fs::path d = path();
  const CliRun r = run("edit" + edit_args() + " --image " + (d / "in.png").string() + " --mask " +
                    (d / "mask.png").string() + " --prompt \"purple hexagon\" --out " + (d / "bad").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("bld: error:"), std::string::npos);
  EXPECT_NE(run("edit" + edit_args() + " --image " + (d / "in.png").string() + " --mask " + (d / "mask.png").string() +
                " --prompt \"red circle\" --reconstruct bogus")
                .code,
            0);
  EXPECT_NE(run("").code, 0);
}

TEST_F(CliTest, EvalWritesReport) {
  const fs::path out = path() / "eval";
  const CliRun r = run("eval" + edit_args() + " --cases 2 --eval-seed 5 --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("best result precision"), std::string::npos);
  EXPECT_TRUE(fs::exists(out / "report.json"));
  EXPECT_TRUE(fs::exists(out / "report.csv"));
}

TEST_F(CliTest, VisualizeJoinsFrames) {
  const fs::path d = path();
  write_png(d / "f0.png", test::random_image(16, 16, 1));
  write_png(d / "f1.png", test::random_image(16, 16, 2));
  ASSERT_EQ(run("visualize " + (d / "f0.png").string() + " " + (d / "f1.png").string() + " --out " +
                (d / "strip.png").string())
                .code,
            0);
  const Image strip = read_png(d / "strip.png");
  EXPECT_EQ(strip.height(), 16);
  EXPECT_GE(strip.width(), 32);
}

}  // namespace
}  // namespace bld
