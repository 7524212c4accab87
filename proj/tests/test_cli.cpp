#include <gtest/gtest.h>
#include <sys/wait.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "n3d/checkpoint.hpp"
#include "n3d/forge.hpp"

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           (std::string("n3d_cli_") + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  Outcome cli(const std::string& args) const {
    const std::string cmd = "cd '" + dir_.string() + "' && '" N3D_CLI "' " + args + " > stdout.txt 2> stderr.txt";
    const int status = std::system(cmd.c_str());
    Outcome r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(dir_ / "stdout.txt");
    r.err = slurp(dir_ / "stderr.txt");
    return r;
  }

  void write(const std::string& name, const std::string& text) const { std::ofstream(dir_ / name) << text; }

  // Two tiny checkpoints trained for a couple of steps.
  void tiny_checkpoints() const {
    write("tiny.cfg", "d_model=16\nn_heads=2\nn_blocks=1\nd_text=8\nsteps=2\nbatch_size=2\n");
    ASSERT_EQ(cli("gen-data --out d.n3dd --per-op 2 --seed 1 --objects-dir objs").code, 0);
    const auto a = cli("train --data d.n3dd --stage structure --strategy token-concat --out s1.n3dc --config tiny.cfg");
    ASSERT_EQ(a.code, 0) << a.err;
    const auto b = cli("train --data d.n3dd --stage local --strategy token-concat --out s2.n3dc --config tiny.cfg");
    ASSERT_EQ(b.code, 0) << b.err;
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, NoSubcommandIsUsage) {
  const auto r = cli("");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("error[usage]"), std::string::npos);
}

TEST_F(Cli, GenDataDeterministic) {
  ASSERT_EQ(cli("gen-data --out a.n3dd --per-op 3 --seed 7 --lexicon lex.txt").code, 0);
  ASSERT_EQ(cli("gen-data --out b.n3dd --per-op 3 --seed 7").code, 0);
  EXPECT_EQ(slurp(path("a.n3dd")), slurp(path("b.n3dd")));
  const auto set = n3d::read_dataset(path("a.n3dd"));
  ASSERT_EQ(set.size(), 9u);
  EXPECT_EQ(set[0].op, n3d::EditOp::Delete);
  EXPECT_EQ(set[8].op, n3d::EditOp::Modify);
  EXPECT_FALSE(slurp(path("lex.txt")).empty());
  ASSERT_EQ(cli("gen-data --out c.n3dd --per-op 3 --seed 8").code, 0);
  EXPECT_NE(slurp(path("a.n3dd")), slurp(path("c.n3dd")));
}

TEST_F(Cli, EchoesEffectiveConfig) {
  const auto r = cli("gen-data --out a.n3dd --per-op 1 --seed 4");
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("# gen-data effective config"), std::string::npos);
  EXPECT_NE(r.out.find("\nseed=4\n"), std::string::npos);
  EXPECT_NE(r.out.find("\nper_op=1\n"), std::string::npos);
}

TEST_F(Cli, ConfigPrecedence) {
  ASSERT_EQ(cli("gen-data --out d.n3dd --per-op 1 --seed 1").code, 0);
  write("a.cfg", "d_model=16\nn_heads=2\nn_blocks=1\nd_text=8\nsteps=1\nbatch_size=2\nlearning_rate=0.01\nseed=3\n");
  // File beats the defaults.
  auto r = cli("train --data d.n3dd --stage structure --strategy token-concat --out c.n3dc --config a.cfg");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("\nlearning_rate=0.01\n"), std::string::npos) << r.out;
  // Flags beat the file.
  r = cli("train --data d.n3dd --stage structure --strategy token-concat --out c.n3dc --config a.cfg --set learning_rate=0.5");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("\nlearning_rate=0.5\n"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("\nseed=3\n"), std::string::npos);
  // Without a file the default holds.
  r = cli("train --data d.n3dd --stage structure --strategy token-concat --out c.n3dc --set steps=1 --set d_model=16 "
          "--set n_heads=2 --set n_blocks=1 --set d_text=8");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("\nlearning_rate=0.0001\n"), std::string::npos) << r.out;
}

TEST_F(Cli, ZeroLearningRateIsConfigError) {
  ASSERT_EQ(cli("gen-data --out d.n3dd --per-op 1 --seed 1").code, 0);
  write("bad.cfg", "learning_rate=0\n");
  const auto r = cli("train --data d.n3dd --stage structure --strategy token-concat --out c.n3dc --config bad.cfg");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("error[config]"), std::string::npos);
  EXPECT_NE(r.err.find("line 1"), std::string::npos);
}

TEST_F(Cli, BadDatasetIsFormatError) {
  write("junk.n3dd", "not a dataset");
  const auto r = cli("train --data junk.n3dd --stage structure --strategy token-concat --out c.n3dc");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("error[format]"), std::string::npos);
  EXPECT_NE(r.err.find("byte offset"), std::string::npos);
}

TEST_F(Cli, TrainWritesCheckpointAndLosses) {
  tiny_checkpoints();
  const auto ck = n3d::load_checkpoint(path("s1.n3dc"), n3d::Stage::Structure);
  EXPECT_EQ(ck.model.config().d_model, 16u);
  ASSERT_TRUE(ck.optimizer.has_value());
  EXPECT_EQ(ck.optimizer->step, 2u);
  const std::string losses = slurp(path("s1.n3dc.losses.csv"));
  EXPECT_EQ(losses.rfind("step,loss\n1,", 0), 0u);
  EXPECT_NE(losses.find("\n2,"), std::string::npos);
}

TEST_F(Cli, EditUnknownWordIsVocabError) {
  tiny_checkpoints();
  const auto r = cli("edit --ckpt1 s1.n3dc --ckpt2 s2.n3dc --source objs/source_00000.n3do "
                     "--instruction 'delete the zorp, a toy robot' --out e.n3do");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("error[vocab]:"), std::string::npos);
  EXPECT_NE(r.err.find("zorp"), std::string::npos);
}

TEST_F(Cli, SwappedCheckpointsAreConfigError) {
  tiny_checkpoints();
  const auto r = cli("edit --ckpt1 s2.n3dc --ckpt2 s1.n3dc --source objs/source_00000.n3do "
                     "--instruction 'delete the hat, a toy wizard' --out e.n3do");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("error[config]"), std::string::npos);
}

TEST_F(Cli, EvalWritesReport) {
  tiny_checkpoints();
  const auto r = cli("eval --ckpt1 s1.n3dc --ckpt2 s2.n3dc --data d.n3dd --report rep.txt --steps 2");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(slurp(path("rep.txt")).find("all"), std::string::npos);
  const std::string csv = slurp(path("rep.txt.csv"));
  EXPECT_EQ(csv.rfind("id,op,preservation_iou,", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);
}

TEST_F(Cli, RenderWritesFiveViews) {
  ASSERT_EQ(cli("gen-data --out d.n3dd --per-op 1 --seed 1 --objects-dir objs").code, 0);
  const auto obj = n3d::read_object(path("objs/source_00000.n3do"));
  ASSERT_FALSE(obj.parts.empty());
  const auto r = cli("render --object objs/source_00000.n3do --out views --highlight-part " + obj.parts.back().first);
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* v : {"front", "back", "left", "right", "top"}) {
    const std::string ppm = slurp(path(std::string("views/") + v + ".ppm"));
    EXPECT_EQ(ppm.rfind("P6\n", 0), 0u) << v;
  }
  const auto bad = cli("render --object objs/source_00000.n3do --out views --highlight-part nothing");
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.err.find("no part 'nothing'"), std::string::npos);
}

TEST_F(Cli, GradcheckNeedsF64) {
  const auto no = cli("gradcheck --strategy token-concat");
  EXPECT_EQ(no.code, 1);
  EXPECT_NE(no.err.find("--f64"), std::string::npos);
  const auto yes = cli("gradcheck --strategy cross-attn --f64");
  EXPECT_EQ(yes.code, 0) << yes.err;
  EXPECT_NE(yes.out.find("max relative error"), std::string::npos);
}
