#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "atseg/synthoct.hpp"
#include "atseg/tensor.hpp"

namespace atseg {

// ---------------------------------------------------------------- Otsu

struct OtsuResult {
  double threshold = 0.5;
  std::size_t edge = 128;  // threshold == edge / bins
  bool degenerate = false;
};

inline constexpr std::size_t kOtsuBins = 256;

/// Histogram bin of a score in [0,1]; 1.0 falls into the last bin.
std::size_t otsu_bin(double score, std::size_t bins = kOtsuBins);

/// Bin-edge threshold maximizing the between-class variance of a
/// `bins`-bin histogram over [0,1]. Ties go to the lowest edge. A histogram
/// with a single occupied bin yields 0.5 and the degenerate flag.
OtsuResult otsu_threshold(std::span<const double> scores, std::size_t bins = kOtsuBins);

enum class ThresholdScope { volume, bscan };

/// Photoreceptor-class scores [B,1,H,W] to a {0,1} mask (score > threshold).
/// `volume` uses one Otsu threshold for the whole volume; `bscan` one per B-scan.
Tensor binarize_volume(const Tensor& scores, ThresholdScope scope = ThresholdScope::volume);

// ---------------------------------------------------------------- regions

enum class Region { csf, cmm3, ring_3_1, cmm6, full };

std::string region_label(Region region);  // "CSF", "3 CMM", "3-1 ring", "6 CMM", "Full volume"
std::string region_key(Region region);    // "csf", "cmm3", "ring_3_1", "cmm6", "full"
Region region_from_key(const std::string& key);
/// The four regions reported by default, in table order.
std::vector<Region> default_regions();

/// En-face (B-scan, column) selection, row-major [B][W].
struct RegionMask {
  std::size_t bscans = 0;
  std::size_t width = 0;
  std::vector<bool> selected;

  bool at(std::size_t b, std::size_t x) const { return selected[b * width + x]; }
  std::size_t count() const;
};

/// Disc of radius r (mm) around the fovea, scaled by the volume's spacing.
RegionMask disc_mask(const OctVolume& vol, double radius_mm);
RegionMask region_mask(const OctVolume& vol, Region region);

// ---------------------------------------------------------------- Dice

/// 2|A n B| / (|A| + |B|) over the selected A-scans of [B,1,H,W] masks.
/// Both empty gives 1.
double dice(const Tensor& a, const Tensor& b, const RegionMask& selection);
double dice(const Tensor& a, const Tensor& b);

// ---------------------------------------------------------------- Wilcoxon

enum class Tail { one_greater, two };
enum class PMethod { automatic, exact, normal };

std::string tail_name(Tail tail);

inline constexpr std::size_t kExactWilcoxonMax = 12;

struct WilcoxonResult {
  double statistic = 0.0;  // W+, sum of ranks of positive differences
  double p = 1.0;
  std::size_t n = 0;       // non-zero differences
  bool exact = false;
  bool degenerate = false;  // every difference was zero
};

/// Signed-rank test of paired differences. Zero differences are dropped,
/// ties receive midranks. `automatic` is exact for n <= 12, otherwise the
/// tie-corrected normal approximation with continuity correction.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> differences, Tail tail,
                                    PMethod method = PMethod::automatic);

// ---------------------------------------------------------------- report

struct ModelPrediction {
  std::string name;
  std::map<std::string, Tensor> masks;  // volume id -> binary [B,1,H,W]
};

struct DiceRecord {
  std::string model, volume_id;
  Region region;
  double dice;
};

struct SummaryRecord {
  std::string model;
  Region region;
  double mean, std;  // sample standard deviation (n-1); 0 for a single volume
};

struct TestRecord {
  std::string model_a, model_b;
  Region region;
  Tail tail;
  WilcoxonResult result;
};

struct EvalReport {
  std::vector<std::string> models;
  std::vector<Region> regions;
  std::vector<DiceRecord> dice;  // model-major, then volume id, then region
  std::vector<SummaryRecord> summary;
  std::vector<TestRecord> tests;
  double alpha = 0.05;

  std::vector<double> values(const std::string& model, Region region) const;
  const SummaryRecord& summary_for(const std::string& model, Region region) const;

  std::string dice_csv() const;
  std::string summary_csv() const;
  std::string tests_csv() const;
  /// Per-model per-region value lists with quartiles, for boxplots.
  std::string boxplot_csv() const;
  /// Fixed-width "mean ± std" table, one row per model.
  std::string table() const;
  void write(const std::filesystem::path& dir) const;
};

/// Dice per model, volume and region; mean ± std; Wilcoxon tests for every
/// ordered model pair (one-tailed, a better than b) and every unordered
/// pair (two-tailed).
EvalReport make_report(const std::vector<ModelPrediction>& models, const std::vector<OctVolume>& truth,
                       const std::vector<Region>& regions = default_regions());

/// Linear-interpolation quantile (type 7) of a non-empty sample.
double quantile(std::vector<double> values, double q);
double sample_mean(std::span<const double> values);
double sample_std(std::span<const double> values);

/// Score volume I/O: meta.json of the source volume plus score.f32 holding
/// photoreceptor-class scores [B,H,W] as little-endian float64.
void write_score_volume(const OctVolume& source, const Tensor& scores, const std::filesystem::path& dir);
Tensor read_score_volume(const std::filesystem::path& dir, const OctVolume& reference);

}  // namespace atseg
