#include <gtest/gtest.h>
#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run sh(const std::string& args) {
  const std::string cmd = std::string("cd '") + SWITCHHEAD_SOURCE_DIR + "' && '" + SWITCHHEAD_CLI + "' " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf{};
  std::size_t n;
  while ((n = fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("switchhead_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream f(p);
  f << text;
}

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string c;
    while (std::getline(ls, c, ',')) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

std::vector<double> grid(const fs::path& p) {
  std::vector<double> v;
  for (const auto& row : csv_rows(slurp(p)))
    for (const auto& c : row) v.push_back(std::stod(c));
  return v;
}

const char* kTinyListOps = R"([model]
n_layers = 1
d_model = 16
vocab = 17
head = classify
n_classes = 10
T = 32
dropout = 0.1

[attention]
variant = switchhead
position = rope
n_heads = 2
d_head = 8
n_experts = 3
k_active = 2
context_mult = 1
causal = false

[mlp]
kind = dense
d_ff = 32

[train]
steps = 5
batch = 8
lr = 0.001
log_every = 1

[task]
kind = listops
n_train = 32
n_valid = 16
max_depth = 2
max_len = 32
)";

const char* kDenseTemplate = R"([model]
n_layers = 2
d_model = 32
vocab = 50
T = 8

[attention]
variant = dense
n_heads = 4
d_head = 8

[mlp]
kind = dense
d_ff = 64
)";

}  // namespace

// ---- cost ---------------------------------------------------------------------------

TEST(CliCost, MatchesGoldenTable) {
  const auto dir = scratch("cost");
  const auto r = sh("cost --config configs/published_costs.cfg --out " + dir.string());
  ASSERT_EQ(r.code, 0) << r.out;
  const auto got = csv_rows(slurp(dir / "cost.csv"));
  const auto want = csv_rows(slurp(fs::path(SWITCHHEAD_SOURCE_DIR) / "tests/golden/published_cost.csv"));
  ASSERT_EQ(got.size(), want.size());
  const auto& header = got.front();
  const auto col = [&](const std::string& n) {
    return static_cast<std::size_t>(std::find(header.begin(), header.end(), n) - header.begin());
  };
  for (std::size_t i = 1; i < want.size(); ++i) {
    EXPECT_EQ(got[i][col("name")], want[i][0]);
    EXPECT_EQ(got[i][col("macs")], want[i][1]) << want[i][0];
    EXPECT_EQ(got[i][col("mem_floats")], want[i][2]) << want[i][0];
  }
  EXPECT_NE(r.out.find("3.5M"), std::string::npos);
  EXPECT_NE(r.out.find("0.8M"), std::string::npos);
}

TEST(CliCost, EmptyConfigGivesHeaderOnly) {
  const auto dir = scratch("cost_empty");
  write(dir / "empty.cfg", "# nothing\n");
  const auto r = sh("cost --config " + (dir / "empty.cfg").string() + " --out " + dir.string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(csv_rows(slurp(dir / "cost.csv")).size(), 1u);
}

TEST(CliCost, LayersAndBatchMultiply) {
  const auto dir = scratch("cost_scaled");
  ASSERT_EQ(sh("cost --config configs/published_costs.cfg --layers 16 --batch 2 --out " + dir.string()).code, 0);
  const auto rows = csv_rows(slurp(dir / "cost.csv"));
  EXPECT_EQ(rows[1][0], "xl_47m_h10");
  EXPECT_EQ(rows[1][13], std::to_string(3461120ULL * 32));
}

TEST(CliCost, BadRowIsUsageError) {
  const auto dir = scratch("cost_bad");
  write(dir / "bad.cfg", "[cost]\nvariant = dense\nn_heads = 0\nd_head = 4\nd_model = 8\nT = 4\n");
  EXPECT_EQ(sh("cost --config " + (dir / "bad.cfg").string()).code, 2);
  write(dir / "unknown.cfg", "[cost]\nvariant = dense\nn_heads = 1\nd_head = 4\nd_model = 8\nT = 4\nbogus = 1\n");
  EXPECT_EQ(sh("cost --config " + (dir / "unknown.cfg").string()).code, 2);
}

// ---- match ---------------------------------------------------------------------------

TEST(CliMatch, DenseTemplateIsFixedPoint) {
  const auto dir = scratch("match_fixed");
  write(dir / "dense.cfg", kDenseTemplate);
  const auto r = sh("match --config " + (dir / "dense.cfg").string() + " --template " + (dir / "dense.cfg").string() +
                    " --out " + dir.string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("slack 0\n"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("d_head 8\n"), std::string::npos) << r.out;
  EXPECT_NE(slurp(dir / "matched.cfg").find("d_ff = 64"), std::string::npos);
}

TEST(CliMatch, InfeasibleTargetExitsOne) {
  const auto r = sh("match --template configs/wt103_47m_switchhead.cfg --target-params 1000");
  EXPECT_EQ(r.code, 1) << r.out;
  EXPECT_NE(r.out.find("infeasible"), std::string::npos);
}

TEST(CliMatch, ReportsPublishedPairCalibration) {
  const auto r = sh("match --config configs/wt103_47m_dense.cfg --template configs/wt103_47m_switchhead.cfg");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("false,fill,76,2080,"), std::string::npos) << r.out;
}

// ---- train / eval -----------------------------------------------------------------------

TEST(CliTrain, MissingDatasetIsUsageError) {
  const auto dir = scratch("train_missing");
  std::string cfg = kTinyListOps;
  cfg += "path = /nonexistent/listops.tsv\n";
  write(dir / "run.cfg", cfg);
  const auto r = sh("train --config " + (dir / "run.cfg").string() + " --out " + dir.string());
  EXPECT_EQ(r.code, 2) << r.out;
  EXPECT_EQ(sh("train --config /nonexistent/run.cfg --out " + dir.string()).code, 2);
  EXPECT_EQ(sh("train --out " + dir.string()).code, 2);
}

TEST(CliTrain, UnknownSectionAndOverrideErrors) {
  const auto dir = scratch("train_unknown");
  write(dir / "run.cfg", std::string(kTinyListOps) + "\n[extra]\nx = 1\n");
  EXPECT_EQ(sh("train --config " + (dir / "run.cfg").string() + " --out " + dir.string()).code, 2);
  write(dir / "ok.cfg", kTinyListOps);
  EXPECT_EQ(sh("train --config " + (dir / "ok.cfg").string() + " --set train.steps=abc --out " + dir.string()).code, 2);
  EXPECT_EQ(sh("no-such-command").code, 2);
}

TEST(CliTrain, DeterministicAndEvalAgrees) {
  const auto a = scratch("train_a"), b = scratch("train_b");
  write(a / "run.cfg", kTinyListOps);
  const auto ra = sh("train --config " + (a / "run.cfg").string() + " --seed 3 --out " + a.string());
  const auto rb = sh("train --config " + (a / "run.cfg").string() + " --seed 3 --out " + b.string());
  ASSERT_EQ(ra.code, 0) << ra.out;
  ASSERT_EQ(rb.code, 0) << rb.out;
  EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));
  EXPECT_EQ(slurp(a / "summary.txt"), slurp(b / "summary.txt"));
  EXPECT_EQ(slurp(a / "checkpoint.bin"), slurp(b / "checkpoint.bin"));
  const auto e = sh("eval --config " + (a / "run.cfg").string() + " --checkpoint " + (a / "checkpoint.bin").string());
  ASSERT_EQ(e.code, 0) << e.out;
  EXPECT_EQ(e.out, slurp(a / "summary.txt"));
}

TEST(CliTrain, CharacterCorpusRuns) {
  const auto dir = scratch("train_chars");
  const auto r = sh("train --config configs/tiny_chars.cfg --set train.steps=2 --set train.log_every=1 --out " +
                    dir.string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("bpc "), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "checkpoint.bin"));
}

// ---- export-attn --------------------------------------------------------------------------

class CliExport : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = scratch("export_model");
    write(dir_ / "run.cfg", kTinyListOps);
    ASSERT_EQ(sh("train --config " + (dir_ / "run.cfg").string() + " --out " + dir_.string()).code, 0);
  }
  static fs::path ckpt() { return dir_ / "checkpoint.bin"; }
  static inline fs::path dir_;
};

TEST_F(CliExport, MapsAreDistributionsAndMaxIsElementwise) {
  const auto out = scratch("export_maps");
  const auto r = sh("export-attn --checkpoint " + ckpt().string() + " --input '(MAX 2 7 3)' --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.out;
  const auto h0 = grid(out / "layer0_head0.csv"), h1 = grid(out / "layer0_head1.csv"), mx = grid(out / "layer0_max.csv");
  ASSERT_EQ(h0.size(), 36u);
  for (std::size_t i = 0; i < h0.size(); ++i) EXPECT_DOUBLE_EQ(mx[i], std::max(h0[i], h1[i]));
  for (const auto* g : {&h0, &h1})
    for (std::size_t row = 0; row < 6; ++row) {
      double s = 0.0;
      for (std::size_t c = 0; c < 6; ++c) s += (*g)[row * 6 + c];
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  EXPECT_TRUE(fs::exists(out / "layer0_head0_sel_v.csv"));
  EXPECT_TRUE(fs::exists(out / "layer0_head1_sel_o.csv"));
  EXPECT_EQ(slurp(out / "tokens.txt"), "(\nMAX\n2\n7\n3\n)\n");
}

TEST_F(CliExport, SingleTokenMapIsOne) {
  const auto out = scratch("export_single");
  ASSERT_EQ(sh("export-attn --checkpoint " + ckpt().string() + " --input 7 --out " + out.string()).code, 0);
  EXPECT_EQ(grid(out / "layer0_head0.csv"), std::vector<double>{1.0});
  EXPECT_EQ(grid(out / "layer0_max.csv"), std::vector<double>{1.0});
}

TEST_F(CliExport, OutOfRangeSelectionFails) {
  const auto out = scratch("export_bad");
  EXPECT_EQ(sh("export-attn --checkpoint " + ckpt().string() + " --input 7 --head 9 --out " + out.string()).code, 1);
  EXPECT_EQ(sh("export-attn --checkpoint " + ckpt().string() + " --input 7 --layer 4 --out " + out.string()).code, 1);
}

// ---- gradcheck -------------------------------------------------------------------------------

TEST(CliGradcheck, PassesAtDefaultTolerance) {
  const auto r = sh("gradcheck --seeds 1");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("PASS"), std::string::npos);
  EXPECT_NE(r.out.find("switchall"), std::string::npos);
}
