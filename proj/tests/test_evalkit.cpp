#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

#include "atseg/errors.hpp"
#include "atseg/evalkit.hpp"
#include "oracles.hpp"

using namespace atseg;
namespace fs = std::filesystem;

namespace {

OctVolume grid_volume(std::size_t bscans, std::size_t width, double mm_b, double mm_x, std::size_t height = 1) {
  OctVolume v;
  v.id = "grid";
  v.scans = Tensor::zeros({bscans, 1, height, width});
  v.masks = Tensor::zeros({bscans, 1, height, width});
  v.mm_per_px_b = mm_b;
  v.mm_per_px_x = mm_x;
  v.fovea_b = bscans / 2;
  v.fovea_x = width / 2;
  return v;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

Tensor random_mask(Shape shape, std::mt19937_64& rng, double p) {
  std::bernoulli_distribution d(p);
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data()) v = d(rng) ? 1.0 : 0.0;
  return t;
}

std::vector<int> as_ints(const Tensor& t) {
  std::vector<int> out;
  for (double v : t.data()) out.push_back(v > 0.5 ? 1 : 0);
  return out;
}

}  // namespace

TEST(Otsu, SingleOccupiedBinIsDegenerate) {
  const std::vector<double> s(100, 0.3);
  const auto r = otsu_threshold(s);
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.threshold, 0.5);
  Tensor scores = Tensor::zeros({1, 1, 5, 10});
  for (double& v : scores.data()) v = 0.9;
  const Tensor m = binarize_volume(scores);
  for (double v : m.data()) EXPECT_EQ(v, 1.0);
}

TEST(Otsu, TwoClustersSplitBetween) {
  std::vector<double> s(50, 0.2);
  s.insert(s.end(), 50, 0.8);
  const auto r = otsu_threshold(s);
  EXPECT_FALSE(r.degenerate);
  EXPECT_GT(r.threshold, 0.2);
  EXPECT_LT(r.threshold, 0.8);
  EXPECT_EQ(r.edge, oracle::otsu_edge(s));
  EXPECT_EQ(r.threshold, static_cast<double>(r.edge) / 256.0);
}

TEST(Otsu, MatchesExhaustiveOracleOnRandomSamples) {
  std::mt19937_64 rng(123);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 20 + rng() % 300;
    std::vector<double> s(n);
    const int shape = trial % 3;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> lo(0.25, 0.08), hi(0.7, 0.1);
    for (auto& v : s) {
      if (shape == 0) v = u(rng);
      else v = std::clamp(u(rng) < 0.4 ? lo(rng) : hi(rng), 0.0, 1.0);
      if (shape == 2) v = std::round(v * 16.0) / 16.0;
    }
    const auto r = otsu_threshold(s);
    if (r.degenerate) continue;
    EXPECT_EQ(r.edge, oracle::otsu_edge(s)) << "trial " << trial;
  }
}

TEST(Otsu, ShiftEquivarianceOnBinCentres) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> s, shifted;
    const std::size_t shift = 1 + rng() % 60;
    for (int i = 0; i < 200; ++i) {
      const std::size_t k = rng() % 180;
      s.push_back((static_cast<double>(k) + 0.5) / 256.0);
      shifted.push_back((static_cast<double>(k + shift) + 0.5) / 256.0);
    }
    EXPECT_EQ(otsu_threshold(shifted).edge, otsu_threshold(s).edge + shift);
  }
}

TEST(Otsu, BinningAndErrors) {
  EXPECT_EQ(otsu_bin(0.0), 0u);
  EXPECT_EQ(otsu_bin(1.0), 255u);
  EXPECT_EQ(otsu_bin(0.5), 128u);
  EXPECT_THROW(otsu_threshold(std::vector<double>{}), ParameterError);
  EXPECT_THROW(binarize_volume(Tensor::zeros({2, 2, 4, 4})), StructuralError);
}

TEST(Binarize, BscanScopeThresholdsEachScan) {
  Tensor scores = Tensor::zeros({2, 1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) {
    scores.data()[i] = i < 8 ? 0.1 : 0.3;
    scores.data()[16 + i] = i < 8 ? 0.6 : 0.9;
  }
  const Tensor per_scan = binarize_volume(scores, ThresholdScope::bscan);
  const Tensor per_volume = binarize_volume(scores, ThresholdScope::volume);
  double scan_fg = 0.0, vol_fg = 0.0;
  for (double v : per_scan.data()) scan_fg += v;
  for (double v : per_volume.data()) vol_fg += v;
  EXPECT_EQ(scan_fg, 16.0);
  EXPECT_EQ(vol_fg, 16.0);
  EXPECT_EQ(per_scan.at(0, 0, 3, 3), 1.0);
  EXPECT_EQ(per_volume.at(0, 0, 3, 3), 0.0);
}

TEST(Regions, FullSelectsEverything) {
  const auto v = grid_volume(4, 16, 1.0, 1.0);
  EXPECT_EQ(region_mask(v, Region::full).count(), 64u);
}

TEST(Regions, HalfMillimetreDiscOnCoarseGrid) {
  const auto v = grid_volume(9, 9, 0.5, 0.5);
  const auto m = disc_mask(v, 0.5);
  EXPECT_EQ(m.count(), 5u);
  EXPECT_TRUE(m.at(4, 4));
  EXPECT_TRUE(m.at(4, 5));
  EXPECT_TRUE(m.at(3, 4));
  EXPECT_FALSE(m.at(3, 3));
}

TEST(Regions, DiscAreaMatchesGeometry) {
  const auto v = grid_volume(128, 128, 0.05, 0.05);
  for (double r : {0.5, 1.5, 3.0}) {
    const double expected = M_PI * r * r / (0.05 * 0.05);
    EXPECT_NEAR(static_cast<double>(disc_mask(v, r).count()), expected, 0.15 * expected) << r;
  }
}

TEST(Regions, RingAndCentralDiscPartitionThreeMillimetreDisc) {
  const auto v = grid_volume(64, 128, 0.09, 0.047);
  const auto csf = region_mask(v, Region::csf), ring = region_mask(v, Region::ring_3_1);
  const auto cmm3 = region_mask(v, Region::cmm3);
  for (std::size_t i = 0; i < cmm3.selected.size(); ++i) {
    EXPECT_EQ(cmm3.selected[i], csf.selected[i] || ring.selected[i]);
    EXPECT_FALSE(csf.selected[i] && ring.selected[i]);
  }
  EXPECT_GT(csf.count(), 0u);
  EXPECT_GT(ring.count(), csf.count());
}

TEST(Regions, KeysAndLabels) {
  for (Region r : {Region::csf, Region::cmm3, Region::ring_3_1, Region::cmm6, Region::full})
    EXPECT_EQ(region_from_key(region_key(r)), r);
  EXPECT_EQ(region_label(Region::ring_3_1), "3-1 ring");
  EXPECT_EQ(default_regions().size(), 4u);
  EXPECT_THROW(region_from_key("macula"), ParameterError);
}

TEST(Dice, Examples) {
  Tensor a = Tensor::zeros({1, 1, 1, 5}), b = Tensor::zeros({1, 1, 1, 5});
  EXPECT_EQ(dice(a, b), 1.0);
  a.data()[0] = a.data()[1] = 1.0;
  b.data()[1] = b.data()[2] = b.data()[3] = 1.0;
  EXPECT_DOUBLE_EQ(dice(a, b), 0.4);
  EXPECT_DOUBLE_EQ(dice(b, a), 0.4);
  EXPECT_EQ(dice(a, a), 1.0);
  Tensor c = Tensor::zeros({1, 1, 1, 5});
  EXPECT_EQ(dice(a, c), 0.0);
  EXPECT_THROW(dice(a, Tensor::zeros({1, 1, 1, 4})), StructuralError);
}

TEST(Dice, MatchesOracleOnRandomMasksAndRegions) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor a = random_mask({3, 1, 6, 10}, rng, 0.4), b = random_mask({3, 1, 6, 10}, rng, 0.5);
    EXPECT_NEAR(dice(a, b), oracle::dice(as_ints(a), as_ints(b)), 1e-15);
    EXPECT_EQ(dice(a, b), dice(b, a));
  }
  auto v = grid_volume(3, 10, 1.0, 1.0, 6);
  const auto sel = disc_mask(v, 1.0);
  const Tensor a = random_mask({3, 1, 6, 10}, rng, 0.5), b = random_mask({3, 1, 6, 10}, rng, 0.5);
  std::vector<int> ia, ib;
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t h = 0; h < 6; ++h)
      for (std::size_t x = 0; x < 10; ++x)
        if (sel.at(s, x)) {
          ia.push_back(a.at(s, 0, h, x) > 0.5);
          ib.push_back(b.at(s, 0, h, x) > 0.5);
        }
  EXPECT_NEAR(dice(a, b, sel), oracle::dice(ia, ib), 1e-15);
}

TEST(Wilcoxon, AllPositiveFiveGivesOneThirtySecond) {
  const std::vector<double> d = {0.1, 0.2, 0.3, 0.4, 0.5};
  const auto r = wilcoxon_signed_rank(d, Tail::one_greater);
  EXPECT_TRUE(r.exact);
  EXPECT_EQ(r.statistic, 15.0);
  EXPECT_DOUBLE_EQ(r.p, 0.03125);
  EXPECT_DOUBLE_EQ(wilcoxon_signed_rank(d, Tail::two).p, 0.0625);
}

TEST(Wilcoxon, ExactMatchesEnumerationWithTiesAndZeros) {
  std::mt19937_64 rng(31);
  std::uniform_int_distribution<int> small(-4, 6);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t n = 1 + trial % 12;
    std::vector<double> d(n);
    for (auto& v : d) v = trial % 2 ? small(rng) * 0.05 : std::uniform_real_distribution<double>(-1, 1.5)(rng);
    const auto o = oracle::wilcoxon_enumerate(d);
    const auto g = wilcoxon_signed_rank(d, Tail::one_greater, PMethod::exact);
    const auto t = wilcoxon_signed_rank(d, Tail::two, PMethod::exact);
    if (g.degenerate) continue;
    EXPECT_EQ(g.statistic, o.w_plus) << trial;
    EXPECT_NEAR(g.p, o.p_greater, 1e-12) << trial;
    EXPECT_NEAR(t.p, o.p_two, 1e-12) << trial;
    if (g.p <= 0.5) {
      EXPECT_LE(g.p, t.p + 1e-15);
    }
  }
}

TEST(Wilcoxon, NormalApproximationCloseAtFifteen) {
  std::mt19937_64 rng(77);
  std::normal_distribution<double> d(0.3, 1.0);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> x(15);
    for (auto& v : x) v = d(rng);
    const auto approx = wilcoxon_signed_rank(x, Tail::one_greater);
    EXPECT_FALSE(approx.exact);
    EXPECT_NEAR(approx.p, oracle::wilcoxon_enumerate(x).p_greater, 0.02) << trial;
    EXPECT_GE(approx.p, 0.0);
    EXPECT_LE(approx.p, 1.0);
  }
}

TEST(Wilcoxon, DegenerateAndInvalid) {
  const std::vector<double> zeros(4, 0.0);
  const auto r = wilcoxon_signed_rank(zeros, Tail::two);
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.p, 1.0);
  const std::vector<double> bad = {1.0, NAN};
  EXPECT_THROW(wilcoxon_signed_rank(bad, Tail::two), ParameterError);
}

TEST(Statistics, QuantileMeanStd) {
  const std::vector<double> v = {3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0};
  for (double q : {0.0, 0.25, 0.5, 0.75, 1.0}) EXPECT_DOUBLE_EQ(quantile(v, q), oracle::quantile7(v, q));
  EXPECT_DOUBLE_EQ(sample_mean(v), 25.0 / 7.0);
  EXPECT_NEAR(sample_std(v), 2.819996622760558, 1e-12);
  EXPECT_EQ(sample_std(std::vector<double>{4.0}), 0.0);
}

namespace {

std::vector<OctVolume> report_truth(std::size_t n) {
  std::vector<OctVolume> out;
  std::mt19937_64 rng(3);
  for (std::size_t i = 0; i < n; ++i) {
    auto v = grid_volume(4, 32, 0.5, 0.1, 8);
    v.id = "v" + std::to_string(i);
    v.masks = random_mask({4, 1, 8, 32}, rng, 0.3);
    out.push_back(v);
  }
  return out;
}

}  // namespace

TEST(Report, PerfectPredictionScoresOne) {
  const auto truth = report_truth(3);
  ModelPrediction m{"truth", {}};
  for (const auto& v : truth) m.masks[v.id] = v.masks;
  const auto rep = make_report({m}, truth);
  for (const auto& d : rep.dice) EXPECT_EQ(d.dice, 1.0);
  for (const auto& s : rep.summary) {
    EXPECT_EQ(s.mean, 1.0);
    EXPECT_EQ(s.std, 0.0);
  }
  EXPECT_EQ(rep.dice.size(), 3u * 4u);
}

TEST(Report, SummaryTestsAndBoxplotAreConsistent) {
  const auto truth = report_truth(6);
  std::mt19937_64 rng(8);
  ModelPrediction a{"a", {}}, b{"b", {}};
  for (const auto& v : truth) {
    a.masks[v.id] = random_mask({4, 1, 8, 32}, rng, 0.3);
    b.masks[v.id] = random_mask({4, 1, 8, 32}, rng, 0.6);
  }
  const auto rep = make_report({a, b}, truth);
  for (const auto& model : {"a", "b"})
    for (Region r : rep.regions) {
      std::vector<double> vals;
      for (const auto& d : rep.dice)
        if (d.model == model && d.region == r) vals.push_back(d.dice);
      ASSERT_EQ(vals.size(), 6u);
      double mean = 0.0, ss = 0.0;
      for (double x : vals) mean += x;
      mean /= 6.0;
      for (double x : vals) ss += (x - mean) * (x - mean);
      EXPECT_NEAR(rep.summary_for(model, r).mean, mean, 1e-12);
      EXPECT_NEAR(rep.summary_for(model, r).std, std::sqrt(ss / 5.0), 1e-12);
    }
  // Ordered one-tailed pairs plus one unordered two-tailed pair per region.
  EXPECT_EQ(rep.tests.size(), 3u * rep.regions.size());
  for (const auto& t : rep.tests) {
    EXPECT_GE(t.result.p, 0.0);
    EXPECT_LE(t.result.p, 1.0);
  }

  std::istringstream box(rep.boxplot_csv());
  std::string line;
  std::getline(box, line);
  EXPECT_EQ(line, "model,region,n,min,q1,median,q3,max,mean,values");
  while (std::getline(box, line)) {
    const auto cells = split_csv_line(line);
    ASSERT_EQ(cells.size(), 10u);
    const auto vals = rep.values(cells[0], region_from_key(cells[1]));
    EXPECT_NEAR(std::stod(cells[4]), oracle::quantile7(vals, 0.25), 1e-15);
    EXPECT_NEAR(std::stod(cells[5]), oracle::quantile7(vals, 0.5), 1e-15);
    EXPECT_NEAR(std::stod(cells[6]), oracle::quantile7(vals, 0.75), 1e-15);
  }
  EXPECT_NE(rep.table().find("3-1 ring"), std::string::npos);
}

TEST(Report, MissingVolumeRejected) {
  const auto truth = report_truth(2);
  ModelPrediction m{"m", {}};
  m.masks[truth[0].id] = truth[0].masks;
  EXPECT_THROW(make_report({m}, truth), ParameterError);
  m.masks["other"] = truth[0].masks;
  EXPECT_THROW(make_report({m}, truth), ParameterError);
}

TEST(ScoreVolume, RoundTripAndMismatch) {
  const fs::path dir = fs::temp_directory_path() / "atseg_eval_scores";
  fs::remove_all(dir);
  auto v = grid_volume(2, 8, 0.5, 0.5, 4);
  v.id = "s";
  std::mt19937_64 rng(1);
  Tensor s = Tensor::zeros({2, 1, 4, 8});
  for (double& x : s.data()) x = std::uniform_real_distribution<double>(0, 1)(rng);
  write_score_volume(v, s, dir);
  const Tensor r = read_score_volume(dir, v);
  EXPECT_EQ(oracle::max_abs_diff(r.data(), s.data()), 0.0);
  auto other = v;
  other.id = "t";
  EXPECT_THROW(read_score_volume(dir, other), FormatError);
}
