#include "atseg/synthoct.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <queue>
#include <random>

#include <json.hpp>

#include "atseg/errors.hpp"
#include "binary_io.hpp"

namespace atseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVolumeMagic = "ATVOL1";

// Marks `count` disrupted columns in [lo, hi) as contiguous intervals whose
// centres cluster around `centre`.
void place_disruptions(std::mt19937_64& rng, std::vector<bool>& disrupted, std::size_t lo, std::size_t hi,
                       std::size_t count, double centre, double spread, std::size_t max_len) {
  const std::size_t span = hi - lo;
  count = std::min(count, span);
  std::normal_distribution<double> where(centre, spread);
  std::uniform_int_distribution<std::size_t> length(2, std::max<std::size_t>(3, max_len));
  std::size_t marked = 0;
  for (std::size_t x = lo; x < hi; ++x) marked += disrupted[x] ? 1 : 0;
  while (marked < count) {
    const std::size_t len = length(rng);
    const double c = std::clamp(where(rng), static_cast<double>(lo), static_cast<double>(hi) - 1.0);
    auto start = static_cast<long>(std::lround(c - 0.5 * static_cast<double>(len)));
    start = std::clamp(start, static_cast<long>(lo), static_cast<long>(hi) - 1);
    for (auto x = static_cast<std::size_t>(start); x < std::min(hi, static_cast<std::size_t>(start) + len); ++x) {
      if (marked == count) break;
      if (!disrupted[x]) {
        disrupted[x] = true;
        ++marked;
      }
    }
  }
}

double in_band(double row_centre, double top, double bottom) {
  return (row_centre >= top && row_centre < bottom) ? 1.0 : 0.0;
}

}  // namespace

OctVolume generate_volume(std::uint64_t seed, const VolumeDims& dims, double severity, const std::string& id) {
  if (dims.bscans == 0 || dims.height == 0 || dims.width == 0) throw ParameterError("volume dims must be positive");
  if (dims.height % 4 != 0 || dims.width % 4 != 0) {
    throw ParameterError("volume height and width must be divisible by 4");
  }
  if (!(severity >= 0.0 && severity <= 1.0)) throw ParameterError("severity must lie in [0,1]");

  const std::size_t nb = dims.bscans, h = dims.height, w = dims.width;
  const double hd = static_cast<double>(h), wd = static_cast<double>(w);

  OctVolume vol;
  vol.id = id;
  vol.severity = severity;
  vol.mm_per_px_x = dims.extent_mm / wd;
  vol.mm_per_px_b = dims.extent_mm / static_cast<double>(nb);
  vol.fovea_b = nb / 2;
  vol.fovea_x = w / 2;
  vol.scans = Tensor::zeros({nb, 1, h, w});
  vol.masks = Tensor::zeros({nb, 1, h, w});

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double two_pi = 2.0 * std::numbers::pi;

  // Volume-level anatomy.
  const double tilt = (unit(rng) - 0.5) * 0.08 * hd;
  const double wave_freq = 1.0 + 2.0 * unit(rng);
  const double wave_phase = two_pi * unit(rng);
  const double wave_amp = 0.015 * hd * (0.5 + unit(rng));
  const double pr_level = (0.56 + 0.04 * unit(rng)) * hd;
  const double base_thickness = hd / 12.0;
  const double pit_depth = 0.10 * hd;
  const double fluid_height = severity > 0.3 ? severity * hd / 10.0 * (0.5 + unit(rng)) : 0.0;

  const double fx = static_cast<double>(vol.fovea_x);
  const std::size_t central_lo = w / 4, central_hi = 3 * w / 4;
  const std::size_t central_count = central_hi - central_lo;
  const auto disrupted_central =
      static_cast<std::size_t>(std::lround(severity * kDisruptionPerSeverity * static_cast<double>(central_count)));
  const auto disrupted_lateral = static_cast<std::size_t>(
      std::lround(severity * 0.1 * kDisruptionPerSeverity * static_cast<double>(w - central_count)));

  std::uniform_real_distribution<double> speckle(0.7, 1.3);
  for (std::size_t b = 0; b < nb; ++b) {
    const double db_mm = (static_cast<double>(b) - static_cast<double>(vol.fovea_b)) * vol.mm_per_px_b;
    const double b_factor = std::exp(-db_mm * db_mm / (2.0 * 1.5 * 1.5));

    std::vector<bool> disrupted(w, false);
    place_disruptions(rng, disrupted, central_lo, central_hi, disrupted_central, fx, wd / 8.0, w / 16);
    if (disrupted_lateral > 0) {
      const std::size_t left = disrupted_lateral / 2;
      place_disruptions(rng, disrupted, 0, central_lo, left, wd / 8.0, wd / 8.0, 4);
      place_disruptions(rng, disrupted, central_hi, w, disrupted_lateral - left, 7.0 * wd / 8.0, wd / 8.0, 4);
    }
    const double b_phase = 0.3 * static_cast<double>(b);

    for (std::size_t x = 0; x < w; ++x) {
      const double xd = static_cast<double>(x);
      const double dx = xd - fx;
      const double dx_mm = dx * vol.mm_per_px_x;
      const double r2 = dx_mm * dx_mm + db_mm * db_mm;
      const double wave = wave_amp * std::sin(two_pi * wave_freq * xd / wd + wave_phase + b_phase);
      const double slope = tilt * dx / wd;

      const bool central = x >= central_lo && x < central_hi;
      const double thin_shape = central ? std::exp(-dx * dx / (2.0 * (wd / 8.0) * (wd / 8.0))) * b_factor : 0.0;
      const double thickness = std::max(1.2, base_thickness * (1.0 - severity * 0.7 * thin_shape));

      const double pr_top = pr_level + wave + slope;
      const double pr_bottom = pr_top + thickness;
      const double fluid = fluid_height * std::exp(-r2 / (2.0 * 0.5 * 0.5));
      const double onl_top = pr_top - 0.12 * hd - fluid;
      const double ilm = 0.2 * hd + slope + 0.6 * wave + pit_depth * std::exp(-r2 / (2.0 * 0.45 * 0.45)) - fluid;
      const double rpe_bottom = pr_bottom + 3.0;
      const double band_level = 0.8 - 0.25 * severity * thin_shape;

      for (std::size_t y = 0; y < h; ++y) {
        const double yc = static_cast<double>(y) + 0.5;
        double v;
        if (yc < ilm) {
          v = 0.04;
        } else if (yc < onl_top) {
          const double depth = (yc - ilm) / std::max(1.0, onl_top - ilm);
          v = 0.55 - 0.25 * depth + 0.08 * std::sin(two_pi * 3.0 * depth);
        } else if (yc < pr_top) {
          v = (fluid > 0.5 && yc >= pr_top - fluid) ? 0.06 : 0.18;
        } else if (yc < pr_bottom) {
          v = disrupted[x] ? 0.3 : band_level;
        } else if (yc < rpe_bottom) {
          v = 0.95;
        } else {
          v = 0.12 + 0.4 * std::exp(-(yc - rpe_bottom) / 8.0);
        }
        const double mask = disrupted[x] ? 0.0 : in_band(yc, pr_top, pr_bottom);
        vol.masks.at(b, 0, y, x) = mask;
        vol.scans.at(b, 0, y, x) = std::clamp(v * speckle(rng), 0.0, 1.0);
      }
    }
  }
  return vol;
}

double empty_column_fraction(const OctVolume& vol, std::size_t x_begin, std::size_t x_end) {
  std::size_t empty = 0, total = 0;
  for (std::size_t b = 0; b < vol.bscans(); ++b) {
    for (std::size_t x = x_begin; x < x_end; ++x) {
      bool any = false;
      for (std::size_t y = 0; y < vol.height() && !any; ++y) any = vol.masks.at(b, 0, y, x) > 0.5;
      empty += any ? 0 : 1;
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(empty) / static_cast<double>(total);
}

std::vector<SeverityBucket> default_severity_buckets() {
  return {{"mild", 0.0, 0.3, 0.3}, {"moderate", 0.3, 0.6, 0.4}, {"severe", 0.6, 1.0, 0.3}};
}

std::vector<std::size_t> apportion(std::size_t total, const std::vector<double>& proportions) {
  if (proportions.empty()) throw ParameterError("apportion needs at least one proportion");
  double sum = 0.0;
  for (double p : proportions) {
    if (!(p >= 0.0)) throw ParameterError("proportions must be non-negative");
    sum += p;
  }
  if (!(sum > 0.0)) throw ParameterError("proportions must not all be zero");
  std::vector<std::size_t> counts(proportions.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < proportions.size(); ++i) {
    const double quota = static_cast<double>(total) * proportions[i] / sum;
    counts[i] = static_cast<std::size_t>(std::floor(quota));
    assigned += counts[i];
    remainders.emplace_back(quota - std::floor(quota), i);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < total; ++k, ++assigned) ++counts[remainders[k % remainders.size()].second];
  return counts;
}

std::vector<std::vector<std::size_t>> stratified_allocation(const std::vector<std::size_t>& bucket_totals,
                                                            const std::vector<std::size_t>& split_sizes) {
  const std::size_t total = std::accumulate(bucket_totals.begin(), bucket_totals.end(), std::size_t{0});
  if (std::accumulate(split_sizes.begin(), split_sizes.end(), std::size_t{0}) != total) {
    throw ParameterError("bucket totals and split sizes disagree");
  }
  const std::size_t nb = bucket_totals.size(), ns = split_sizes.size();
  std::vector<std::vector<std::size_t>> counts(nb, std::vector<std::size_t>(ns, 0));
  if (total == 0) return counts;

  // Floors first, then route the remaining units through cells with a
  // fractional quota (capacity 1 each) as a bipartite max-flow.
  std::vector<std::size_t> row_need(nb), col_need(ns);
  std::vector<std::vector<bool>> fractional(nb, std::vector<bool>(ns));
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t s = 0; s < ns; ++s) {
      const std::size_t product = bucket_totals[b] * split_sizes[s];
      counts[b][s] = product / total;
      fractional[b][s] = product % total != 0;
    }
  }
  for (std::size_t b = 0; b < nb; ++b) {
    row_need[b] = bucket_totals[b] - std::accumulate(counts[b].begin(), counts[b].end(), std::size_t{0});
  }
  for (std::size_t s = 0; s < ns; ++s) {
    std::size_t used = 0;
    for (std::size_t b = 0; b < nb; ++b) used += counts[b][s];
    col_need[s] = split_sizes[s] - used;
  }

  // Nodes: source, rows, columns, sink.
  const std::size_t source = 0, sink = 1 + nb + ns, nodes = sink + 1;
  std::vector<std::vector<long>> cap(nodes, std::vector<long>(nodes, 0));
  for (std::size_t b = 0; b < nb; ++b) cap[source][1 + b] = static_cast<long>(row_need[b]);
  for (std::size_t s = 0; s < ns; ++s) cap[1 + nb + s][sink] = static_cast<long>(col_need[s]);
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t s = 0; s < ns; ++s) cap[1 + b][1 + nb + s] = fractional[b][s] ? 1 : 0;
  }
  const std::vector<std::vector<long>> initial = cap;
  for (;;) {
    std::vector<long> parent(nodes, -1);
    parent[source] = static_cast<long>(source);
    std::queue<std::size_t> frontier;
    frontier.push(source);
    while (!frontier.empty() && parent[sink] < 0) {
      const std::size_t u = frontier.front();
      frontier.pop();
      for (std::size_t v = 0; v < nodes; ++v) {
        if (parent[v] < 0 && cap[u][v] > 0) {
          parent[v] = static_cast<long>(u);
          frontier.push(v);
        }
      }
    }
    if (parent[sink] < 0) break;
    for (std::size_t v = sink; v != source; v = static_cast<std::size_t>(parent[v])) {
      const auto u = static_cast<std::size_t>(parent[v]);
      cap[u][v] -= 1;
      cap[v][u] += 1;
    }
  }
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t s = 0; s < ns; ++s) {
      if (initial[1 + b][1 + nb + s] == 1 && cap[1 + b][1 + nb + s] == 0) counts[b][s] += 1;
    }
  }
  for (std::size_t b = 0; b < nb; ++b) {
    if (std::accumulate(counts[b].begin(), counts[b].end(), std::size_t{0}) != bucket_totals[b]) {
      throw std::logic_error("stratified allocation failed to balance bucket " + std::to_string(b));
    }
  }
  return counts;
}

DatasetSplit generate_dataset(std::uint64_t seed, const DatasetSpec& spec, const fs::path& root) {
  const std::size_t requested = spec.n_train + spec.n_val + spec.n_test;
  const std::size_t n_volumes = spec.n_volumes == 0 ? requested : spec.n_volumes;
  if (requested > n_volumes) {
    throw ParameterError("split sizes (" + std::to_string(requested) + ") exceed generated volume count (" +
                         std::to_string(n_volumes) + ")");
  }
  if (spec.buckets.empty()) throw ParameterError("severity distribution needs at least one bucket");
  for (const auto& bucket : spec.buckets) {
    if (!(bucket.low >= 0.0 && bucket.low <= bucket.high && bucket.high <= 1.0)) {
      throw ParameterError("severity bucket '" + bucket.name + "' has an invalid range");
    }
  }

  std::vector<double> proportions;
  for (const auto& bucket : spec.buckets) proportions.push_back(bucket.proportion);
  const std::vector<std::size_t> bucket_totals = apportion(n_volumes, proportions);

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(n_volumes);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<std::size_t> bucket_index(n_volumes);
  std::vector<std::vector<std::size_t>> members(spec.buckets.size());
  {
    std::size_t cursor = 0;
    for (std::size_t b = 0; b < bucket_totals.size(); ++b) {
      for (std::size_t k = 0; k < bucket_totals[b]; ++k) {
        bucket_index[order[cursor]] = b;
        members[b].push_back(order[cursor]);
        ++cursor;
      }
    }
  }

  auto volume_id = [](std::size_t i) {
    std::string digits = std::to_string(i);
    return "vol" + std::string(digits.size() < 3 ? 3 - digits.size() : 0, '0') + digits;
  };

  DatasetSplit split;
  fs::create_directories(root);
  std::vector<double> severities(n_volumes);
  for (std::size_t i = 0; i < n_volumes; ++i) {
    const auto& bucket = spec.buckets[bucket_index[i]];
    severities[i] = bucket.low + (bucket.high - bucket.low) * std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  }
  for (std::size_t i = 0; i < n_volumes; ++i) {
    const std::string id = volume_id(i);
    const OctVolume vol = generate_volume(seed + i, spec.dims, severities[i], id);
    write_volume(vol, root / id);
    split.bucket_of[id] = spec.buckets[bucket_index[i]].name;
    split.severity_of[id] = severities[i];
  }

  // Stratify the requested subset; unrequested volumes stay on disk unassigned.
  const std::vector<std::size_t> split_sizes = {spec.n_train, spec.n_val, spec.n_test,
                                                n_volumes - requested};
  const auto table = stratified_allocation(bucket_totals, split_sizes);
  for (std::size_t b = 0; b < members.size(); ++b) {
    std::vector<std::size_t> pool = members[b];
    std::sort(pool.begin(), pool.end());
    std::shuffle(pool.begin(), pool.end(), rng);
    std::size_t cursor = 0;
    for (std::size_t s = 0; s < 3; ++s) {
      auto& target = s == 0 ? split.train : s == 1 ? split.validation : split.test;
      for (std::size_t k = 0; k < table[b][s]; ++k) target.push_back(volume_id(pool[cursor++]));
    }
  }
  for (auto* list : {&split.train, &split.validation, &split.test}) std::sort(list->begin(), list->end());
  write_split(split, root / "split.json");
  return split;
}

void write_f64_payload(const Tensor& values, const fs::path& path) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(values.numel() * 8);
  for (double v : values.data()) binio::put_f64(bytes, v);
  binio::write_file(path, bytes);
}

Tensor read_f64_payload(const fs::path& path, const Shape& shape) {
  const auto bytes = binio::read_file(path);
  const std::size_t expected = shape_numel(shape) * 8;
  if (bytes.size() != expected) {
    throw FormatError(path.filename().string() + " has " + std::to_string(bytes.size()) + " bytes, expected " +
                          std::to_string(expected),
                      std::min(bytes.size(), expected));
  }
  Tensor out = Tensor::zeros(shape);
  auto data = out.data();
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = binio::get_f64(bytes, 8 * i);
  return out;
}

void write_volume_meta(const OctVolume& vol, const fs::path& dir) {
  fs::create_directories(dir);
  json meta = {{"magic", kVolumeMagic},
               {"id", vol.id},
               {"B", vol.bscans()},
               {"H", vol.height()},
               {"W", vol.width()},
               {"mm_per_px_x", vol.mm_per_px_x},
               {"mm_per_px_b", vol.mm_per_px_b},
               {"fovea_b", vol.fovea_b},
               {"fovea_x", vol.fovea_x},
               {"severity", vol.severity}};
  binio::write_text(dir / "meta.json", meta.dump(2) + "\n");
}

void write_volume(const OctVolume& vol, const fs::path& dir) {
  write_volume_meta(vol, dir);
  write_f64_payload(vol.scans, dir / "scan.f32");
  std::vector<std::uint8_t> mask;
  mask.reserve(vol.masks.numel());
  for (double v : vol.masks.data()) mask.push_back(v > 0.5 ? 1 : 0);
  binio::write_file(dir / "mask.u8", mask);
}

OctVolume read_volume(const fs::path& dir) {
  json meta;
  try {
    meta = json::parse(binio::read_text(dir / "meta.json"));
  } catch (const json::parse_error& e) {
    throw FormatError("meta.json in " + dir.string() + " is not valid JSON", e.byte);
  }
  if (!meta.contains("magic") || meta["magic"] != kVolumeMagic) {
    throw FormatError("meta.json in " + dir.string() + " lacks magic " + kVolumeMagic, 0);
  }
  OctVolume vol;
  std::size_t nb = 0, h = 0, w = 0;
  try {
    vol.id = meta.at("id").get<std::string>();
    nb = meta.at("B").get<std::size_t>();
    h = meta.at("H").get<std::size_t>();
    w = meta.at("W").get<std::size_t>();
    vol.mm_per_px_x = meta.at("mm_per_px_x").get<double>();
    vol.mm_per_px_b = meta.at("mm_per_px_b").get<double>();
    vol.fovea_b = meta.at("fovea_b").get<std::size_t>();
    vol.fovea_x = meta.at("fovea_x").get<std::size_t>();
    vol.severity = meta.value("severity", 0.0);
  } catch (const json::exception& e) {
    throw FormatError("meta.json in " + dir.string() + ": " + e.what(), 0);
  }
  if (nb == 0 || h == 0 || w == 0) throw FormatError("meta.json in " + dir.string() + " has an empty shape", 0);
  if (vol.fovea_b >= nb || vol.fovea_x >= w) {
    throw FormatError("meta.json in " + dir.string() + " places the fovea outside the volume", 0);
  }
  const Shape shape = {nb, 1, h, w};
  vol.scans = read_f64_payload(dir / "scan.f32", shape);
  const auto scans = vol.scans.data();
  for (std::size_t i = 0; i < scans.size(); ++i) {
    if (!(scans[i] >= 0.0 && scans[i] <= 1.0)) {
      throw FormatError("scan.f32 value outside [0,1]", 8 * i);
    }
  }

  const auto mask_bytes = binio::read_file(dir / "mask.u8");
  if (mask_bytes.size() != shape_numel(shape)) {
    throw FormatError("mask.u8 has " + std::to_string(mask_bytes.size()) + " bytes, expected " +
                          std::to_string(shape_numel(shape)),
                      std::min(mask_bytes.size(), shape_numel(shape)));
  }
  vol.masks = Tensor::zeros(shape);
  auto masks = vol.masks.data();
  for (std::size_t i = 0; i < mask_bytes.size(); ++i) {
    if (mask_bytes[i] > 1) throw FormatError("mask.u8 byte is not 0 or 1", i);
    masks[i] = mask_bytes[i];
  }
  return vol;
}

void write_split(const DatasetSplit& split, const fs::path& path) {
  json j = {{"train", split.train}, {"validation", split.validation}, {"test", split.test},
            {"buckets", split.bucket_of}, {"severity", split.severity_of}};
  binio::write_text(path, j.dump(2) + "\n");
}

DatasetSplit read_split(const fs::path& path) {
  json j;
  try {
    j = json::parse(binio::read_text(path));
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + " is not valid JSON", e.byte);
  }
  DatasetSplit split;
  try {
    split.train = j.at("train").get<std::vector<std::string>>();
    split.validation = j.at("validation").get<std::vector<std::string>>();
    split.test = j.at("test").get<std::vector<std::string>>();
    split.bucket_of = j.value("buckets", std::map<std::string, std::string>{});
    split.severity_of = j.value("severity", std::map<std::string, double>{});
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what(), 0);
  }
  return split;
}

}  // namespace atseg
