#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <random>

#include "atseg/commands.hpp"
#include "atseg/config.hpp"
#include "atseg/errors.hpp"
#include "atseg/ops.hpp"
#include "binary_io.hpp"
#include "oracles.hpp"

using namespace atseg;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("atseg_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ExperimentConfig tiny_config(const fs::path& out) {
  ExperimentConfig c;
  c.out = out;
  c.seed = 11;
  c.data.n_train = 2;
  c.data.n_val = 1;
  c.data.n_test = 2;
  c.data.dims = VolumeDims{2, 16, 32, 6.0};
  c.train.base_channels = 2;
  c.train.max_epochs = 1;
  return c;
}

std::map<fs::path, std::vector<std::uint8_t>> tree_bytes(const fs::path& root) {
  std::map<fs::path, std::vector<std::uint8_t>> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root)] = binio::read_file(e.path());
  return out;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(ATSEG_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// x * x with a backward rule missing its factor of two.
Tensor faulty_square(Tape& tape, const Tensor& x) {
  Tensor out = tape.make_output(x.shape(), {&x});
  for (std::size_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] * x.data()[i];
  tape.record("faulty_square", out, [x](std::span<const double> og) {
    Tensor in = x;
    auto g = in.mutable_grad();
    for (std::size_t i = 0; i < og.size(); ++i) g[i] += og[i] * in.data()[i];
  });
  return out;
}

}  // namespace

TEST(Config, PresetsArePinned) {
  const auto ce_at = loss_preset("ce_at");
  EXPECT_TRUE(ce_at.amplified);
  EXPECT_EQ(ce_at.base, BaseLoss::ce);
  EXPECT_EQ(ce_at.omega, 8.0);
  EXPECT_EQ(ce_at.lambda1, 1.0);
  EXPECT_EQ(ce_at.lambda2, 8.0);
  const auto mse_at = loss_preset("mse_at");
  EXPECT_EQ(mse_at.base, BaseLoss::mse);
  EXPECT_EQ(mse_at.omega, 32.0);
  EXPECT_EQ(mse_at.lambda1, 1.0);
  EXPECT_EQ(mse_at.lambda2, 1.0);
  EXPECT_FALSE(loss_preset("ce").amplified);
  EXPECT_FALSE(loss_preset("mse").amplified);
  EXPECT_THROW(loss_preset("focal"), ParameterError);
}

TEST(Config, ResolvedLossUsesDefaultInterval) {
  const auto spec = resolve_loss(loss_preset("ce_at"), 128, 64);
  ASSERT_EQ(spec.terms.size(), 2u);
  const auto& w = std::get<AmplificationWeights>(spec.terms[1].transform);
  EXPECT_EQ(w.i0(), 32u);
  EXPECT_EQ(w.i1(), 96u);
  EXPECT_EQ(w.sigma(), 8.0);
  EXPECT_EQ(w.omega(), 8.0);
  EXPECT_EQ(resolve_loss(loss_preset("ce"), 128, 64).terms.size(), 1u);
}

TEST(Config, RoundTripAndDefaults) {
  const auto c = parse_config("{}");
  EXPECT_EQ(c.data.n_train, 34u);
  EXPECT_EQ(c.train.lr, 1e-4);
  EXPECT_EQ(c.train.patience_lr, 15u);
  EXPECT_EQ(c.train.patience_stop, 45u);
  EXPECT_EQ(c.threads, 1u);
  const std::string text = serialize_config(c);
  EXPECT_EQ(serialize_config(parse_config(text)), text);

  auto custom = parse_config(R"({"seed": 3, "loss": {"preset": "mse_at", "omega": 4}, "sweep": {"omegas": [2]}})");
  EXPECT_EQ(custom.seed, 3u);
  EXPECT_EQ(custom.loss.base, BaseLoss::mse);
  EXPECT_EQ(custom.loss.omega, 4.0);
  EXPECT_EQ(custom.sweep.omegas, std::vector<double>{2.0});
  const std::string t2 = serialize_config(custom);
  EXPECT_EQ(serialize_config(parse_config(t2)), t2);
}

TEST(Config, RejectsUnknownKeysAndBadJson) {
  EXPECT_THROW(parse_config(R"({"trian": {}})"), ParameterError);
  EXPECT_THROW(parse_config(R"({"train": {"learning_rate": 1}})"), ParameterError);
  EXPECT_THROW(parse_config("{\"seed\": }"), FormatError);
  auto c = parse_config("{}");
  c.threads = 0;
  EXPECT_THROW(validate_config(c), ParameterError);
}

TEST(Generate, RerunIsByteIdentical) {
  const auto a = temp_dir("gen");
  const auto c = tiny_config(a);
  const auto out = cmd_generate(c);
  EXPECT_TRUE(fs::exists(out.manifest));
  const auto first = tree_bytes(a / "data");
  EXPECT_EQ(first.size(), 5u * 3u + 2u);
  cmd_generate(c);
  EXPECT_EQ(tree_bytes(a / "data"), first);
}

TEST(Train, MissingDatasetIsReported) {
  const auto dir = temp_dir("nodata");
  try {
    cmd_train(tiny_config(dir), "ce");
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("generate"), std::string::npos);
  }
}

TEST(Sweep, SinglePointGridRunsAndWritesTable) {
  const auto dir = temp_dir("sweep1");
  auto c = tiny_config(dir);
  cmd_generate(c);
  c.sweep.omegas = {8};
  c.sweep.lambda1 = {1};
  c.sweep.lambda2 = {8};
  c.sweep.max_epochs = 1;
  const auto out = cmd_sweep(c);
  ASSERT_EQ(out.points.size(), 1u);
  EXPECT_EQ(out.best, 0u);
  EXPECT_EQ(out.points[0].best_epoch, 1u);
  EXPECT_GE(out.points[0].val_dice, 0.0);
  EXPECT_LE(out.points[0].val_dice, 1.0);
  EXPECT_EQ(binio::read_text(out.table), sweep_csv(out.points));
  EXPECT_TRUE(fs::exists(dir / "sweep" / "best.json"));
}

TEST(Sweep, GridGuards) {
  const auto dir = temp_dir("sweep_guard");
  auto c = tiny_config(dir);
  EXPECT_EQ(c.sweep.size(), 245u);
  EXPECT_THROW(cmd_sweep(c), ParameterError);
  c.sweep.omegas.clear();
  EXPECT_THROW(cmd_sweep(c), ParameterError);
}

TEST(Sweep, GridOrderAndSelectionMatchTableScan) {
  SweepConfig s;
  s.omegas = {2, 4};
  s.lambda1 = {0.1, 1};
  s.lambda2 = {1, 8};
  const auto grid = sweep_grid(s);
  ASSERT_EQ(grid.size(), 8u);
  EXPECT_EQ(grid[0].omega, 2.0);
  EXPECT_EQ(grid[1].lambda2, 8.0);
  EXPECT_EQ(grid[2].lambda1, 1.0);
  EXPECT_EQ(grid[4].omega, 4.0);

  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    auto pts = grid;
    for (auto& p : pts) p.val_dice = 0.8 + 0.05 * static_cast<double>(rng() % 3);
    std::size_t best = 0;
    for (std::size_t i = 1; i < pts.size(); ++i) {
      const auto key = [](const SweepPoint& p) { return std::make_tuple(-p.val_dice, p.omega, p.lambda2, p.lambda1); };
      if (key(pts[i]) < key(pts[best])) best = i;
    }
    EXPECT_EQ(select_sweep_best(pts), best);
  }
  EXPECT_THROW(select_sweep_best(std::vector<SweepPoint>{}), ParameterError);
}

TEST(Report, TruthMasksAsScoresGivePerfectDice) {
  const auto dir = temp_dir("report");
  auto c = tiny_config(dir);
  const auto gen = cmd_generate(c);
  for (const auto& id : gen.split.test) {
    const auto v = read_volume(c.data_dir() / id);
    write_score_volume(v, v.masks, dir / "truth_scores" / id);
  }
  const auto rep = cmd_report(c, {{"truth", dir / "truth_scores"}});
  EXPECT_EQ(rep.regions.size(), 4u);
  for (const auto& d : rep.dice) EXPECT_EQ(d.dice, 1.0);
  for (const auto& f : {"dice.csv", "summary.csv", "tests.csv", "boxplot.csv", "table.txt", "config.resolved.json"})
    EXPECT_TRUE(fs::exists(dir / "report" / f)) << f;
  EXPECT_NE(rep.table().find("CSF"), std::string::npos);
  EXPECT_NE(rep.table().find("Full volume"), std::string::npos);
}

TEST(Eval, ScoresEveryTestVolumeForEachModel) {
  const auto dir = temp_dir("eval");
  auto c = tiny_config(dir);
  cmd_generate(c);
  const auto trained = cmd_train(c, "m");
  EXPECT_TRUE(fs::exists(trained.log_csv));
  const auto rep = cmd_eval(c, {{"a", trained.checkpoint}, {"b", trained.checkpoint}});
  EXPECT_EQ(rep.models, (std::vector<std::string>{"a", "b"}));
  for (std::size_t i = 0; i < rep.dice.size() / 2; ++i) EXPECT_EQ(rep.dice[i].dice, rep.dice[i + rep.dice.size() / 2].dice);
  EXPECT_THROW(cmd_eval(c, {{"a", trained.checkpoint}, {"a", trained.checkpoint}}), ParameterError);
  save_checkpoint(init_segnet(1, 2, 3, 3), dir / "three.bin");
  EXPECT_THROW(cmd_eval(c, {{"x", dir / "three.bin"}}), ParameterError);
}

TEST(Gradcheck, AuditCoversOpsAndPasses) {
  const auto audit = cmd_gradcheck(0);
  EXPECT_GE(audit.cases.size(), 10u);
  EXPECT_TRUE(audit.passed()) << audit.report();
}

TEST(Gradcheck, FaultInjectionNamesCorruptedOp) {
  GradCase bad;
  bad.name = "faulty_square";
  bad.inputs = {random_tensor({2, 3}, 4)};
  bad.objective = [](Tape& t, const std::vector<Tensor>& in) { return ops::sum(t, faulty_square(t, in[0])); };
  const auto audit = cmd_gradcheck(0, {bad});
  EXPECT_FALSE(audit.passed());
  EXPECT_EQ(audit.failures(), "faulty_square");
}

TEST(ParallelFor, CoversRangeAndRethrows) {
  std::vector<int> hit(50, 0);
  parallel_for(50, 4, [&](std::size_t i) { hit[i] += 1; });
  for (int h : hit) EXPECT_EQ(h, 1);
  EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) {
                 if (i == 7) throw ParameterError("seven");
               }),
               ParameterError);
}

TEST(Binary, ExitCodes) {
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli(""), 2);
  EXPECT_EQ(run_cli("train --preset focal --out " + temp_dir("bin").string()), 1);
  EXPECT_EQ(run_cli("eval --out " + temp_dir("bin2").string()), 2);
  EXPECT_EQ(run_cli("report --scope sideways --scores a=b"), 1);
  const auto dir = temp_dir("bin3");
  EXPECT_EQ(run_cli("--out " + dir.string() + " generate --n-train 2 --n-val 1 --n-test 1"), 0);
  EXPECT_TRUE(fs::exists(dir / "data" / "split.json"));
}
