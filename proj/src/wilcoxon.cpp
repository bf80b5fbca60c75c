#include <algorithm>
#include <cmath>
#include <numeric>

#include "atseg/errors.hpp"
#include "atseg/evalkit.hpp"

namespace atseg {

std::string tail_name(Tail tail) { return tail == Tail::one_greater ? "one_greater" : "two"; }

namespace {

// Midranks of |d|, doubled so that every rank is an integer.
std::vector<long> doubled_midranks(const std::vector<double>& magnitudes) {
  const std::size_t n = magnitudes.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return magnitudes[a] < magnitudes[b]; });
  std::vector<long> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && magnitudes[order[j + 1]] == magnitudes[order[i]]) ++j;
    // Ranks i+1..j+1 share their mean; doubled: (i+1) + (j+1).
    const auto shared = static_cast<long>(i + j + 2);
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = shared;
    i = j + 1;
  }
  return ranks;
}

double normal_upper_tail(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

}  // namespace

WilcoxonResult wilcoxon_signed_rank(std::span<const double> differences, Tail tail, PMethod method) {
  std::vector<double> magnitudes;
  std::vector<bool> positive;
  for (double d : differences) {
    if (!std::isfinite(d)) throw ParameterError("wilcoxon: differences must be finite");
    if (d == 0.0) continue;
    magnitudes.push_back(std::fabs(d));
    positive.push_back(d > 0.0);
  }
  WilcoxonResult result;
  result.n = magnitudes.size();
  if (result.n == 0) {
    result.degenerate = true;
    result.p = 1.0;
    return result;
  }

  const std::vector<long> ranks = doubled_midranks(magnitudes);
  long observed = 0;
  for (std::size_t i = 0; i < ranks.size(); ++i) observed += positive[i] ? ranks[i] : 0;
  result.statistic = static_cast<double>(observed) / 2.0;

  const std::size_t n = result.n;
  const bool exact = method == PMethod::exact || (method == PMethod::automatic && n <= kExactWilcoxonMax);
  result.exact = exact;

  if (exact) {
    if (n > 60) throw ParameterError("wilcoxon: exact distribution limited to n <= 60");
    // Count sign assignments by their doubled W+ via subset-sum dynamic programming.
    const long max_sum = std::accumulate(ranks.begin(), ranks.end(), 0L);
    std::vector<double> ways(static_cast<std::size_t>(max_sum) + 1, 0.0);
    ways[0] = 1.0;
    long reach = 0;
    for (long r : ranks) {
      for (long s = reach; s >= 0; --s) ways[static_cast<std::size_t>(s + r)] += ways[static_cast<std::size_t>(s)];
      reach += r;
    }
    const double total = std::ldexp(1.0, static_cast<int>(n));
    double upper = 0.0, lower = 0.0;
    for (long s = 0; s <= max_sum; ++s) {
      if (s >= observed) upper += ways[static_cast<std::size_t>(s)];
      if (s <= observed) lower += ways[static_cast<std::size_t>(s)];
    }
    upper /= total;
    lower /= total;
    result.p = tail == Tail::one_greater ? upper : std::min(1.0, 2.0 * std::min(upper, lower));
    return result;
  }

  const double nd = static_cast<double>(n);
  const double mean = nd * (nd + 1.0) / 4.0;
  double tie_term = 0.0;
  {
    std::vector<long> sorted = ranks;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size();) {
      std::size_t j = i;
      while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
      const double t = static_cast<double>(j - i);
      tie_term += t * t * t - t;
      i = j;
    }
  }
  const double variance = nd * (nd + 1.0) * (2.0 * nd + 1.0) / 24.0 - tie_term / 48.0;
  const double sd = std::sqrt(variance);
  if (tail == Tail::one_greater) {
    result.p = std::clamp(normal_upper_tail((result.statistic - mean - 0.5) / sd), 0.0, 1.0);
  } else {
    const double z = (std::fabs(result.statistic - mean) - 0.5) / sd;
    result.p = std::clamp(2.0 * normal_upper_tail(z), 0.0, 1.0);
  }
  return result;
}

}  // namespace atseg
