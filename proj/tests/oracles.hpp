// Independent reference implementations used as test oracles.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "atseg/tensor.hpp"

namespace oracle {

using atseg::Tensor;

inline Tensor uniform(atseg::Shape shape, std::uint64_t seed, double lo = -2.0, double hi = 2.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data()) v = d(rng);
  return t;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

inline Tensor conv2d(const Tensor& x, const Tensor& k, const Tensor& b, std::size_t pad) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t f = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t oh = h + 2 * pad - kh + 1, ow = w + 2 * pad - kw + 1;
  Tensor out = Tensor::zeros({n, f, oh, ow});
  for (std::size_t in = 0; in < n; ++in)
    for (std::size_t jf = 0; jf < f; ++jf)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          double acc = b.data()[jf];
          for (std::size_t ic = 0; ic < c; ++ic)
            for (std::size_t dy = 0; dy < kh; ++dy)
              for (std::size_t dx = 0; dx < kw; ++dx) {
                const long sy = static_cast<long>(y + dy) - static_cast<long>(pad);
                const long sx = static_cast<long>(xx + dx) - static_cast<long>(pad);
                if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(w)) continue;
                acc += x.at(in, ic, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx)) * k.at(jf, ic, dy, dx);
              }
          out.at(in, jf, y, xx) = acc;
        }
  return out;
}

inline Tensor maxpool2(const Tensor& x) {
  Tensor out = Tensor::zeros({x.dim(0), x.dim(1), x.dim(2) / 2, x.dim(3) / 2});
  for (std::size_t n = 0; n < x.dim(0); ++n)
    for (std::size_t c = 0; c < x.dim(1); ++c)
      for (std::size_t y = 0; y < x.dim(2) / 2; ++y)
        for (std::size_t xx = 0; xx < x.dim(3) / 2; ++xx) {
          double m = -INFINITY;
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) m = std::max(m, x.at(n, c, 2 * y + dy, 2 * xx + dx));
          out.at(n, c, y, xx) = m;
        }
  return out;
}

// Weight matrix by direct 2-D convolution of the step image with a separable
// truncated Gaussian, replicate padding on both axes.
inline std::vector<std::vector<double>> weight_matrix(std::size_t width, std::size_t height, double omega,
                                                      std::size_t i0, std::size_t i1, double sigma) {
  const long r = static_cast<long>(std::ceil(3.0 * sigma));
  std::vector<double> g;
  double norm = 0.0;
  for (long d = -r; d <= r; ++d) {
    g.push_back(std::exp(-0.5 * static_cast<double>(d * d) / (sigma * sigma)));
    norm += g.back();
  }
  for (double& v : g) v /= norm;
  auto step = [&](long col) {
    const double centre = static_cast<double>(col) + 0.5;
    return (centre > static_cast<double>(i0) && centre < static_cast<double>(i1)) ? omega : 1.0;
  };
  auto clampl = [](long v, long hi) { return std::clamp(v, 0L, hi - 1); };
  std::vector<std::vector<double>> w(height, std::vector<double>(width, 0.0));
  // The step image is constant along rows, so the clamped row index only
  // selects which row value is read.
  for (long j = 0; j < static_cast<long>(height); ++j)
    for (long i = 0; i < static_cast<long>(width); ++i) {
      double acc = 0.0;
      for (long dy = -r; dy <= r; ++dy)
        for (long dx = -r; dx <= r; ++dx) {
          acc += g[static_cast<std::size_t>(dy + r)] * g[static_cast<std::size_t>(dx + r)] *
                 step(clampl(i + dx, static_cast<long>(width)));
        }
      w[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] = acc;
    }
  return w;
}

inline double mse(const Tensor& y, const Tensor& p) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.numel(); ++i) s += (y.data()[i] - p.data()[i]) * (y.data()[i] - p.data()[i]);
  return s / static_cast<double>(y.numel());
}

inline double ce(const Tensor& y, const Tensor& p, double eps = 1e-7) {
  double s = 0.0;
  for (std::size_t n = 0; n < y.dim(0); ++n)
    for (std::size_t h = 0; h < y.dim(2); ++h)
      for (std::size_t w = 0; w < y.dim(3); ++w)
        for (std::size_t c = 0; c < y.dim(1); ++c) s -= y.at(n, c, h, w) * std::log(p.at(n, c, h, w) + eps);
  return s / static_cast<double>(y.dim(0) * y.dim(2) * y.dim(3));
}

// Exhaustive Otsu: every edge scored with exact rational arithmetic on
// bin-centre class means.
inline std::size_t otsu_edge(std::span<const double> scores, std::size_t bins = 256) {
  using boost::multiprecision::cpp_rational;
  std::vector<long> hist(bins, 0);
  for (double s : scores) {
    long b = static_cast<long>(std::floor(s * static_cast<double>(bins)));
    hist[static_cast<std::size_t>(std::clamp(b, 0L, static_cast<long>(bins) - 1))]++;
  }
  const cpp_rational total(static_cast<long>(scores.size()));
  std::size_t best_edge = 0;
  cpp_rational best(-1);
  for (std::size_t edge = 1; edge < bins; ++edge) {
    cpp_rational n0(0), n1(0), m0(0), m1(0);
    for (std::size_t k = 0; k < bins; ++k) {
      const cpp_rational centre(static_cast<long>(2 * k + 1), static_cast<long>(2 * bins));
      if (k < edge) {
        n0 += hist[k];
        m0 += centre * hist[k];
      } else {
        n1 += hist[k];
        m1 += centre * hist[k];
      }
    }
    if (n0 == 0 || n1 == 0) continue;
    const cpp_rational diff = m0 / n0 - m1 / n1;
    const cpp_rational v = (n0 / total) * (n1 / total) * diff * diff;
    if (v > best) {
      best = v;
      best_edge = edge;
    }
  }
  return best_edge;
}

inline double dice(const std::vector<int>& a, const std::vector<int>& b) {
  long inter = 0, sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += (a[i] && b[i]) ? 1 : 0;
    sa += a[i] ? 1 : 0;
    sb += b[i] ? 1 : 0;
  }
  return sa + sb == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(sa + sb);
}

struct WilcoxonOracle {
  double w_plus;
  double p_greater;
  double p_two;
};

// Full 2^n enumeration of sign patterns over midranks of |d|.
inline WilcoxonOracle wilcoxon_enumerate(const std::vector<double>& d) {
  std::vector<double> mag;
  std::vector<int> sign;
  for (double v : d) {
    if (v == 0.0) continue;
    mag.push_back(std::fabs(v));
    sign.push_back(v > 0 ? 1 : 0);
  }
  const std::size_t n = mag.size();
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n; ++i) {
    double less = 0, equal = 0;
    for (std::size_t j = 0; j < n; ++j) {
      less += mag[j] < mag[i] ? 1 : 0;
      equal += mag[j] == mag[i] ? 1 : 0;
    }
    rank[i] = less + (equal + 1.0) / 2.0;
  }
  double observed = 0.0;
  for (std::size_t i = 0; i < n; ++i) observed += sign[i] ? rank[i] : 0.0;
  std::uint64_t ge = 0, le = 0;
  const std::uint64_t patterns = std::uint64_t{1} << n;
  for (std::uint64_t m = 0; m < patterns; ++m) {
    double w = 0.0;
    for (std::size_t i = 0; i < n; ++i) w += (m >> i & 1) ? rank[i] : 0.0;
    ge += w >= observed - 1e-9 ? 1 : 0;
    le += w <= observed + 1e-9 ? 1 : 0;
  }
  const double upper = static_cast<double>(ge) / static_cast<double>(patterns);
  const double lower = static_cast<double>(le) / static_cast<double>(patterns);
  return {observed, upper, std::min(1.0, 2.0 * std::min(upper, lower))};
}

inline double quantile7(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * q;
  const double lo = std::floor(h);
  const auto i = static_cast<std::size_t>(lo);
  if (i + 1 >= v.size()) return v.back();
  return v[i] + (h - lo) * (v[i + 1] - v[i]);
}

}  // namespace oracle
