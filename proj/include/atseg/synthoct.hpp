#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "atseg/tensor.hpp"

namespace atseg {

/// A stack of B-scans with binary photoreceptor masks.
struct OctVolume {
  std::string id;
  Tensor scans;  // [B,1,H,W], intensities in [0,1]
  Tensor masks;  // [B,1,H,W], values in {0,1}
  double mm_per_px_x = 0.0;
  double mm_per_px_b = 0.0;
  std::size_t fovea_b = 0;
  std::size_t fovea_x = 0;
  double severity = 0.0;

  std::size_t bscans() const { return scans.dim(0); }
  std::size_t height() const { return scans.dim(2); }
  std::size_t width() const { return scans.dim(3); }
};

struct VolumeDims {
  std::size_t bscans = 8;
  std::size_t height = 64;
  std::size_t width = 128;
  /// Physical extent of the scanned square, in millimetres.
  double extent_mm = 6.0;
};

/// Fraction of central-half columns whose mask is empty, per unit severity.
inline constexpr double kDisruptionPerSeverity = 0.4;

/// Seeded OCT-like volume: layered retina, foveal pit, a photoreceptor band
/// thinned and disrupted around the fovea, multiplicative speckle.
OctVolume generate_volume(std::uint64_t seed, const VolumeDims& dims, double severity,
                          const std::string& id = "synthetic");

/// Fraction of columns in [x_begin, x_end) whose mask has no foreground, over all B-scans.
double empty_column_fraction(const OctVolume& vol, std::size_t x_begin, std::size_t x_end);

struct SeverityBucket {
  std::string name;
  double low = 0.0;
  double high = 1.0;
  double proportion = 0.0;
};

std::vector<SeverityBucket> default_severity_buckets();

struct DatasetSpec {
  std::size_t n_train = 34;
  std::size_t n_val = 4;
  std::size_t n_test = 15;
  /// Number of volumes to generate; 0 means n_train + n_val + n_test.
  std::size_t n_volumes = 0;
  VolumeDims dims;
  std::vector<SeverityBucket> buckets = default_severity_buckets();
};

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> validation;
  std::vector<std::string> test;
  std::map<std::string, std::string> bucket_of;
  std::map<std::string, double> severity_of;
};

/// Integer table counts[bucket][split] whose row sums are `bucket_totals`,
/// column sums are `split_sizes`, and every entry is the floor or ceiling
/// of bucket_total * split_size / total.
std::vector<std::vector<std::size_t>> stratified_allocation(const std::vector<std::size_t>& bucket_totals,
                                                            const std::vector<std::size_t>& split_sizes);

/// Largest-remainder apportionment of `total` items by `proportions`.
std::vector<std::size_t> apportion(std::size_t total, const std::vector<double>& proportions);

/// Generates the volumes, writes them under `root` with a split.json manifest.
DatasetSplit generate_dataset(std::uint64_t seed, const DatasetSpec& spec, const std::filesystem::path& root);

void write_volume(const OctVolume& vol, const std::filesystem::path& dir);
/// Writes only meta.json for `vol` into `dir`.
void write_volume_meta(const OctVolume& vol, const std::filesystem::path& dir);
OctVolume read_volume(const std::filesystem::path& dir);

void write_split(const DatasetSplit& split, const std::filesystem::path& path);
DatasetSplit read_split(const std::filesystem::path& path);

/// Writes a [B,1,H,W] float64 payload as little-endian bytes.
void write_f64_payload(const Tensor& values, const std::filesystem::path& path);
/// Reads a payload written by write_f64_payload, checking its size against `shape`.
Tensor read_f64_payload(const std::filesystem::path& path, const Shape& shape);

}  // namespace atseg
