#include "atseg/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "atseg/errors.hpp"
#include "binary_io.hpp"

namespace atseg {

namespace fs = std::filesystem;

namespace {

std::string fmt17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------- Otsu

std::size_t otsu_bin(double score, std::size_t bins) {
  const auto b = static_cast<long>(std::floor(score * static_cast<double>(bins)));
  return static_cast<std::size_t>(std::clamp(b, 0L, static_cast<long>(bins) - 1));
}

OtsuResult otsu_threshold(std::span<const double> scores, std::size_t bins) {
  if (scores.empty()) throw ParameterError("otsu_threshold needs at least one score");
  if (bins < 2) throw ParameterError("otsu_threshold needs at least two bins");
  std::vector<double> hist(bins, 0.0);
  for (double s : scores) hist[otsu_bin(s, bins)] += 1.0;

  OtsuResult result;
  result.edge = bins / 2;
  result.threshold = 0.5;
  const auto occupied = std::count_if(hist.begin(), hist.end(), [](double c) { return c > 0.0; });
  if (occupied <= 1) {
    result.degenerate = true;
    return result;
  }

  if (scores.size() > (std::size_t{1} << 24) || bins > 512) {
    throw ParameterError("otsu_threshold supports at most 2^24 scores and 512 bins");
  }
  // Between-class variance at an edge is proportional to D^2 / (n0 n1) with
  // D = n1 S0 - n0 S1, S the sum of doubled bin centres (2k + 1). Candidates
  // are compared exactly as quotient and remainder in 128-bit integers.
  using u128 = unsigned __int128;
  std::uint64_t total_n = scores.size(), total_s = 0;
  for (std::size_t k = 0; k < bins; ++k) total_s += static_cast<std::uint64_t>(hist[k]) * (2 * k + 1);
  std::uint64_t n0 = 0, s0 = 0;
  bool have_best = false;
  u128 best_q = 0, best_r = 0, best_m = 1;
  for (std::size_t edge = 1; edge < bins; ++edge) {
    n0 += static_cast<std::uint64_t>(hist[edge - 1]);
    s0 += static_cast<std::uint64_t>(hist[edge - 1]) * (2 * edge - 1);
    const std::uint64_t n1 = total_n - n0, s1 = total_s - s0;
    if (n0 == 0 || n1 == 0) continue;
    const u128 a = static_cast<u128>(n1) * s0, b = static_cast<u128>(n0) * s1;
    const u128 d = a > b ? a - b : b - a;
    const u128 m = static_cast<u128>(n0) * n1;
    const u128 q = d * d / m, r = d * d % m;
    if (!have_best || q > best_q || (q == best_q && r * best_m > best_r * m)) {
      have_best = true;
      best_q = q;
      best_r = r;
      best_m = m;
      result.edge = edge;
    }
  }
  result.threshold = static_cast<double>(result.edge) / static_cast<double>(bins);
  return result;
}

Tensor binarize_volume(const Tensor& scores, ThresholdScope scope) {
  if (scores.rank() != 4 || scores.dim(1) != 1) {
    throw StructuralError("binarize_volume expects [B,1,H,W] scores, got " + shape_string(scores.shape()));
  }
  Tensor out = Tensor::zeros(scores.shape());
  const std::size_t plane = scores.dim(2) * scores.dim(3);
  const auto s = scores.data();
  auto o = out.data();
  if (scope == ThresholdScope::volume) {
    const double t = otsu_threshold(s).threshold;
    for (std::size_t i = 0; i < s.size(); ++i) o[i] = s[i] > t ? 1.0 : 0.0;
    return out;
  }
  for (std::size_t b = 0; b < scores.dim(0); ++b) {
    const auto slice = s.subspan(b * plane, plane);
    const double t = otsu_threshold(slice).threshold;
    for (std::size_t i = 0; i < plane; ++i) o[b * plane + i] = slice[i] > t ? 1.0 : 0.0;
  }
  return out;
}

// ---------------------------------------------------------------- regions

std::string region_label(Region region) {
  switch (region) {
    case Region::csf: return "CSF";
    case Region::cmm3: return "3 CMM";
    case Region::ring_3_1: return "3-1 ring";
    case Region::cmm6: return "6 CMM";
    case Region::full: return "Full volume";
  }
  return "?";
}

std::string region_key(Region region) {
  switch (region) {
    case Region::csf: return "csf";
    case Region::cmm3: return "cmm3";
    case Region::ring_3_1: return "ring_3_1";
    case Region::cmm6: return "cmm6";
    case Region::full: return "full";
  }
  return "?";
}

Region region_from_key(const std::string& key) {
  for (Region r : {Region::csf, Region::cmm3, Region::ring_3_1, Region::cmm6, Region::full}) {
    if (region_key(r) == key) return r;
  }
  throw ParameterError("unknown region '" + key + "'");
}

std::vector<Region> default_regions() { return {Region::csf, Region::cmm3, Region::ring_3_1, Region::full}; }

std::size_t RegionMask::count() const {
  return static_cast<std::size_t>(std::count(selected.begin(), selected.end(), true));
}

RegionMask disc_mask(const OctVolume& vol, double radius_mm) {
  if (vol.fovea_b >= vol.bscans() || vol.fovea_x >= vol.width()) {
    throw ParameterError("fovea lies outside volume " + vol.id);
  }
  RegionMask mask{vol.bscans(), vol.width(), std::vector<bool>(vol.bscans() * vol.width(), false)};
  const double r2 = radius_mm * radius_mm;
  for (std::size_t b = 0; b < mask.bscans; ++b) {
    const double db = (static_cast<double>(b) - static_cast<double>(vol.fovea_b)) * vol.mm_per_px_b;
    for (std::size_t x = 0; x < mask.width; ++x) {
      const double dx = (static_cast<double>(x) - static_cast<double>(vol.fovea_x)) * vol.mm_per_px_x;
      mask.selected[b * mask.width + x] = db * db + dx * dx <= r2 * (1.0 + 1e-12);
    }
  }
  return mask;
}

RegionMask region_mask(const OctVolume& vol, Region region) {
  switch (region) {
    case Region::csf: return disc_mask(vol, 0.5);
    case Region::cmm3: return disc_mask(vol, 1.5);
    case Region::cmm6: return disc_mask(vol, 3.0);
    case Region::ring_3_1: {
      RegionMask outer = disc_mask(vol, 1.5);
      const RegionMask inner = disc_mask(vol, 0.5);
      for (std::size_t i = 0; i < outer.selected.size(); ++i) outer.selected[i] = outer.selected[i] && !inner.selected[i];
      return outer;
    }
    case Region::full:
      return RegionMask{vol.bscans(), vol.width(), std::vector<bool>(vol.bscans() * vol.width(), true)};
  }
  throw ParameterError("unknown region");
}

// ---------------------------------------------------------------- Dice

double dice(const Tensor& a, const Tensor& b, const RegionMask& selection) {
  if (a.shape() != b.shape()) {
    throw StructuralError("dice: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  if (a.rank() != 4 || a.dim(1) != 1) throw StructuralError("dice expects [B,1,H,W] masks");
  if (selection.bscans != a.dim(0) || selection.width != a.dim(3)) {
    throw StructuralError("dice: region selection does not match mask extent");
  }
  const std::size_t h = a.dim(2), w = a.dim(3);
  std::size_t inter = 0, size_a = 0, size_b = 0;
  const auto da = a.data(), db = b.data();
  for (std::size_t s = 0; s < a.dim(0); ++s) {
    for (std::size_t y = 0; y < h; ++y) {
      const std::size_t row = (s * h + y) * w;
      for (std::size_t x = 0; x < w; ++x) {
        if (!selection.at(s, x)) continue;
        const bool in_a = da[row + x] > 0.5, in_b = db[row + x] > 0.5;
        size_a += in_a;
        size_b += in_b;
        inter += in_a && in_b;
      }
    }
  }
  if (size_a + size_b == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(size_a + size_b);
}

double dice(const Tensor& a, const Tensor& b) {
  if (a.rank() != 4) throw StructuralError("dice expects [B,1,H,W] masks");
  RegionMask all{a.dim(0), a.dim(3), std::vector<bool>(a.dim(0) * a.dim(3), true)};
  return dice(a, b, all);
}

// ---------------------------------------------------------------- report helpers

double sample_mean(std::span<const double> values) {
  if (values.empty()) throw ParameterError("mean of an empty sample");
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

double sample_std(std::span<const double> values) {
  if (values.size() < 2) return 0.0;
  const double m = sample_mean(values);
  double ss = 0.0;
  for (double v : values) ss += (v - m) * (v - m);
  return std::sqrt(ss / static_cast<double>(values.size() - 1));
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw ParameterError("quantile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

std::vector<double> EvalReport::values(const std::string& model, Region region) const {
  std::vector<double> out;
  for (const auto& r : dice) {
    if (r.model == model && r.region == region) out.push_back(r.dice);
  }
  return out;
}

const SummaryRecord& EvalReport::summary_for(const std::string& model, Region region) const {
  for (const auto& s : summary) {
    if (s.model == model && s.region == region) return s;
  }
  throw ParameterError("no summary for model '" + model + "' region " + region_key(region));
}

std::string EvalReport::dice_csv() const {
  std::ostringstream os;
  os << "model,volume_id,region,dice\n";
  for (const auto& r : dice) os << r.model << ',' << r.volume_id << ',' << region_key(r.region) << ',' << fmt17(r.dice) << '\n';
  return os.str();
}

std::string EvalReport::summary_csv() const {
  std::ostringstream os;
  os << "model,region,mean,std\n";
  for (const auto& s : summary) os << s.model << ',' << region_key(s.region) << ',' << fmt17(s.mean) << ',' << fmt17(s.std) << '\n';
  return os.str();
}

std::string EvalReport::tests_csv() const {
  std::ostringstream os;
  os << "model_a,model_b,region,tail,statistic,p,n,method\n";
  for (const auto& t : tests) {
    os << t.model_a << ',' << t.model_b << ',' << region_key(t.region) << ',' << tail_name(t.tail) << ','
       << fmt17(t.result.statistic) << ',' << fmt17(t.result.p) << ',' << t.result.n << ','
       << (t.result.degenerate ? "degenerate" : t.result.exact ? "exact" : "normal") << '\n';
  }
  return os.str();
}

std::string EvalReport::boxplot_csv() const {
  std::ostringstream os;
  os << "model,region,n,min,q1,median,q3,max,mean,values\n";
  for (const auto& m : models) {
    for (Region r : regions) {
      const auto v = values(m, r);
      if (v.empty()) continue;
      os << m << ',' << region_key(r) << ',' << v.size() << ',' << fmt17(quantile(v, 0.0)) << ','
         << fmt17(quantile(v, 0.25)) << ',' << fmt17(quantile(v, 0.5)) << ',' << fmt17(quantile(v, 0.75)) << ','
         << fmt17(quantile(v, 1.0)) << ',' << fmt17(sample_mean(v)) << ',';
      for (std::size_t i = 0; i < v.size(); ++i) os << (i ? ";" : "") << fmt17(v[i]);
      os << '\n';
    }
  }
  return os.str();
}

std::string EvalReport::table() const {
  std::ostringstream os;
  std::size_t name_width = 6;
  for (const auto& m : models) name_width = std::max(name_width, m.size());
  // Width in code points, so the UTF-8 "±" counts once.
  auto pad = [](std::string s, std::size_t w) {
    std::size_t glyphs = 0;
    for (unsigned char ch : s) glyphs += (ch & 0xC0) != 0x80 ? 1 : 0;
    if (glyphs < w) s.append(w - glyphs, ' ');
    return s;
  };
  os << pad("Method", name_width);
  for (Region r : regions) os << " | " << pad(region_label(r), 15);
  os << '\n';
  for (const auto& m : models) {
    os << pad(m, name_width);
    for (Region r : regions) {
      const auto& s = summary_for(m, r);
      os << " | " << pad(fmt3(s.mean) + " ± " + fmt3(s.std), 15);
    }
    os << '\n';
  }
  return os.str();
}

void EvalReport::write(const fs::path& dir) const {
  fs::create_directories(dir);
  binio::write_text(dir / "dice.csv", dice_csv());
  binio::write_text(dir / "summary.csv", summary_csv());
  binio::write_text(dir / "tests.csv", tests_csv());
  binio::write_text(dir / "boxplot.csv", boxplot_csv());
  binio::write_text(dir / "table.txt", table());
}

EvalReport make_report(const std::vector<ModelPrediction>& models, const std::vector<OctVolume>& truth,
                       const std::vector<Region>& regions) {
  if (models.empty()) throw ParameterError("report needs at least one model");
  if (truth.empty()) throw ParameterError("report needs at least one volume");
  std::vector<const OctVolume*> ordered;
  for (const auto& v : truth) ordered.push_back(&v);
  std::sort(ordered.begin(), ordered.end(), [](const auto* a, const auto* b) { return a->id < b->id; });

  EvalReport report;
  report.regions = regions;
  for (const auto& m : models) {
    if (m.masks.size() != truth.size()) {
      throw ParameterError("model '" + m.name + "' covers " + std::to_string(m.masks.size()) + " volumes, expected " +
                           std::to_string(truth.size()));
    }
    for (const auto* v : ordered) {
      if (!m.masks.contains(v->id)) throw ParameterError("model '" + m.name + "' lacks volume " + v->id);
    }
    report.models.push_back(m.name);
  }

  for (const auto& m : models) {
    for (const auto* v : ordered) {
      const Tensor& pred = m.masks.at(v->id);
      for (Region r : regions) report.dice.push_back({m.name, v->id, r, dice(pred, v->masks, region_mask(*v, r))});
    }
  }
  for (const auto& m : models) {
    for (Region r : regions) {
      const auto v = report.values(m.name, r);
      report.summary.push_back({m.name, r, sample_mean(v), sample_std(v)});
    }
  }
  for (std::size_t i = 0; i < models.size(); ++i) {
    for (std::size_t j = 0; j < models.size(); ++j) {
      if (i == j) continue;
      for (Region r : regions) {
        const auto a = report.values(models[i].name, r);
        const auto b = report.values(models[j].name, r);
        std::vector<double> d(a.size());
        for (std::size_t k = 0; k < a.size(); ++k) d[k] = a[k] - b[k];
        report.tests.push_back({models[i].name, models[j].name, r, Tail::one_greater,
                                wilcoxon_signed_rank(d, Tail::one_greater)});
        if (i < j) report.tests.push_back({models[i].name, models[j].name, r, Tail::two, wilcoxon_signed_rank(d, Tail::two)});
      }
    }
  }
  return report;
}

void write_score_volume(const OctVolume& source, const Tensor& scores, const fs::path& dir) {
  if (scores.shape() != source.scans.shape()) {
    throw StructuralError("score volume " + shape_string(scores.shape()) + " does not match volume " +
                          shape_string(source.scans.shape()));
  }
  write_volume_meta(source, dir);
  write_f64_payload(scores, dir / "score.f32");
}

Tensor read_score_volume(const fs::path& dir, const OctVolume& reference) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(binio::read_text(dir / "meta.json"));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("meta.json in " + dir.string() + " is not valid JSON", e.byte);
  }
  if (meta.value("id", std::string{}) != reference.id || meta.value("B", 0UL) != reference.bscans() ||
      meta.value("H", 0UL) != reference.height() || meta.value("W", 0UL) != reference.width()) {
    throw FormatError("score volume in " + dir.string() + " does not match volume " + reference.id, 0);
  }
  Tensor scores = read_f64_payload(dir / "score.f32", reference.scans.shape());
  const auto s = scores.data();
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!(s[i] >= 0.0 && s[i] <= 1.0)) throw FormatError("score.f32 value outside [0,1]", 8 * i);
  }
  return scores;
}

}  // namespace atseg
