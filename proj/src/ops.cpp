#include "atseg/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "atseg/errors.hpp"

namespace atseg::ops {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

void require_rank4(const Tensor& t, const char* op) {
  if (t.rank() != 4) {
    throw StructuralError(std::string(op) + ": expected [N,C,H,W], got " + shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw StructuralError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                          shape_string(b.shape()));
  }
}

struct ConvGeometry {
  std::size_t n, c, h, w;
  std::size_t f, kh, kw;
  std::size_t pad;
  std::size_t oh, ow;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t pixels() const { return oh * ow; }
};

// Output rows [y0, y1) of the unfolded input; column stride is (y1 - y0) * ow.
void im2col_rows(const double* in, const ConvGeometry& g, std::size_t y0, std::size_t y1, double* cols) {
  const std::size_t tile = (y1 - y0) * g.ow;
  for (std::size_t c = 0; c < g.c; ++c) {
    const double* plane = in + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        double* row = cols + ((c * g.kh + ki) * g.kw + kj) * tile;
        const std::size_t x0 = std::min(g.ow, g.pad > kj ? g.pad - kj : 0);
        const std::size_t x1 = std::max(x0, std::min(g.ow, g.w + g.pad - kj));
        for (std::size_t oy = y0; oy < y1; ++oy) {
          const long iy = static_cast<long>(oy + ki) - static_cast<long>(g.pad);
          double* dst = row + (oy - y0) * g.ow;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.ow, 0.0);
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(iy) * g.w + kj - g.pad;
          std::fill(dst, dst + x0, 0.0);
          std::copy(src + x0, src + x1, dst + x0);
          std::fill(dst + x1, dst + g.ow, 0.0);
        }
      }
    }
  }
}

void col2im_rows_add(const double* cols, const ConvGeometry& g, std::size_t y0, std::size_t y1, double* in_grad) {
  const std::size_t tile = (y1 - y0) * g.ow;
  for (std::size_t c = 0; c < g.c; ++c) {
    double* plane = in_grad + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* row = cols + ((c * g.kh + ki) * g.kw + kj) * tile;
        const std::size_t x0 = std::min(g.ow, g.pad > kj ? g.pad - kj : 0);
        const std::size_t x1 = std::max(x0, std::min(g.ow, g.w + g.pad - kj));
        for (std::size_t oy = y0; oy < y1; ++oy) {
          const long iy = static_cast<long>(oy + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          double* dst = plane + static_cast<std::size_t>(iy) * g.w + kj - g.pad;
          const double* src = row + (oy - y0) * g.ow;
          for (std::size_t ox = x0; ox < x1; ++ox) dst[ox] += src[ox];
        }
      }
    }
  }
}

// Output rows per tile so that one unfolded tile stays cache resident.
std::size_t tile_rows(const ConvGeometry& g) {
  constexpr std::size_t kTileDoubles = 1 << 15;
  return std::clamp<std::size_t>(kTileDoubles / (g.patch() * g.ow), 1, g.oh);
}

using StridedMap = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;

}  // namespace

Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, const Tensor& bias,
              std::size_t padding) {
  require_rank4(input, "conv2d input");
  require_rank4(kernel, "conv2d kernel");
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3),
                 kernel.dim(0), kernel.dim(2), kernel.dim(3), padding, 0, 0};
  if (kernel.dim(1) != g.c) {
    throw StructuralError("conv2d: input has " + std::to_string(g.c) + " channels, kernel expects " +
                          std::to_string(kernel.dim(1)));
  }
  if (g.kh % 2 == 0 || g.kw % 2 == 0) throw StructuralError("conv2d: kernel size must be odd");
  if (bias.rank() != 1 || bias.dim(0) != g.f) {
    throw StructuralError("conv2d: bias shape " + shape_string(bias.shape()) + " for " +
                          std::to_string(g.f) + " filters");
  }
  if (g.h + 2 * padding < g.kh || g.w + 2 * padding < g.kw) {
    throw StructuralError("conv2d: kernel larger than padded input");
  }
  g.oh = g.h + 2 * padding - g.kh + 1;
  g.ow = g.w + 2 * padding - g.kw + 1;

  const std::size_t patch = g.patch();
  const std::size_t pixels = g.pixels();
  const std::size_t rows = tile_rows(g);
  std::vector<double> cols(patch * rows * g.ow);

  Tensor out = tape.make_output({g.n, g.f, g.oh, g.ow}, {&input, &kernel, &bias});
  ConstMatrixMap kmat(kernel.data().data(), g.f, patch);
  for (std::size_t n = 0; n < g.n; ++n) {
    const double* in = input.data().data() + n * g.c * g.h * g.w;
    double* o = out.data().data() + n * g.f * pixels;
    for (std::size_t y0 = 0; y0 < g.oh; y0 += rows) {
      const std::size_t y1 = std::min(g.oh, y0 + rows);
      const auto tile = static_cast<Eigen::Index>((y1 - y0) * g.ow);
      im2col_rows(in, g, y0, y1, cols.data());
      StridedMap ot(o + y0 * g.ow, static_cast<Eigen::Index>(g.f), tile, Eigen::OuterStride<>(pixels));
      ot.noalias() = kmat * ConstMatrixMap(cols.data(), static_cast<Eigen::Index>(patch), tile);
    }
    for (std::size_t f = 0; f < g.f; ++f) {
      double* plane = o + f * pixels;
      const double bf = bias.data()[f];
      for (std::size_t p = 0; p < pixels; ++p) plane[p] += bf;
    }
  }

  tape.record("conv2d", out, [input, kernel, bias, g](std::span<const double> og) {
    const std::size_t patch = g.patch();
    const std::size_t pixels = g.pixels();
    const std::size_t rows = tile_rows(g);
    ConstMatrixMap kmat(kernel.data().data(), g.f, patch);
    Tensor k = kernel;
    Tensor b = bias;
    Tensor x = input;
    std::vector<double> cols(patch * rows * g.ow);
    std::vector<double> dcols;
    if (x.requires_grad()) dcols.resize(cols.size());
    for (std::size_t n = 0; n < g.n; ++n) {
      const double* dout = og.data() + n * g.f * pixels;
      if (b.requires_grad()) {
        auto db = b.mutable_grad();
        for (std::size_t f = 0; f < g.f; ++f) {
          const double* plane = dout + f * pixels;
          double acc = 0.0;
          for (std::size_t p = 0; p < pixels; ++p) acc += plane[p];
          db[f] += acc;
        }
      }
      if (!k.requires_grad() && !x.requires_grad()) continue;
      const double* in = x.data().data() + n * g.c * g.h * g.w;
      for (std::size_t y0 = 0; y0 < g.oh; y0 += rows) {
        const std::size_t y1 = std::min(g.oh, y0 + rows);
        const auto tile = static_cast<Eigen::Index>((y1 - y0) * g.ow);
        ConstStridedMap dt(dout + y0 * g.ow, static_cast<Eigen::Index>(g.f), tile, Eigen::OuterStride<>(pixels));
        if (k.requires_grad()) {
          im2col_rows(in, g, y0, y1, cols.data());
          MatrixMap dk(k.mutable_grad().data(), g.f, patch);
          dk.noalias() += dt * ConstMatrixMap(cols.data(), static_cast<Eigen::Index>(patch), tile).transpose();
        }
        if (x.requires_grad()) {
          MatrixMap dc(dcols.data(), static_cast<Eigen::Index>(patch), tile);
          dc.noalias() = kmat.transpose() * dt;
          col2im_rows_add(dcols.data(), g, y0, y1, x.mutable_grad().data() + n * g.c * g.h * g.w);
        }
      }
    }
  });
  return out;
}

Tensor maxpool2(Tape& tape, const Tensor& input) {
  require_rank4(input, "maxpool2");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw StructuralError("maxpool2: spatial dims must be even, got " + shape_string(input.shape()));
  }
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor out = tape.make_output({n, c, oh, ow}, {&input});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
  const auto in = input.data();
  auto o = out.data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t ibase = plane * h * w;
    const std::size_t obase = plane * oh * ow;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        std::size_t best = ibase + 2 * y * w + 2 * x;
        const std::size_t candidates[3] = {best + 1, best + w, best + w + 1};
        for (std::size_t idx : candidates) {
          if (in[idx] > in[best]) best = idx;
        }
        o[obase + y * ow + x] = in[best];
        (*argmax)[obase + y * ow + x] = best;
      }
    }
  }
  tape.record("maxpool2", out, [input, argmax](std::span<const double> og) {
    Tensor x = input;
    auto gx = x.mutable_grad();
    for (std::size_t i = 0; i < og.size(); ++i) gx[(*argmax)[i]] += og[i];
  });
  return out;
}

Tensor upsample_nearest2(Tape& tape, const Tensor& input) {
  require_rank4(input, "upsample_nearest2");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t oh = 2 * h, ow = 2 * w;
  Tensor out = tape.make_output({n, c, oh, ow}, {&input});
  const auto in = input.data();
  auto o = out.data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    for (std::size_t y = 0; y < oh; ++y) {
      const double* src = in.data() + plane * h * w + (y / 2) * w;
      double* dst = o.data() + plane * oh * ow + y * ow;
      for (std::size_t x = 0; x < ow; ++x) dst[x] = src[x / 2];
    }
  }
  tape.record("upsample_nearest2", out, [input, n, c, h, w](std::span<const double> og) {
    Tensor x = input;
    auto gx = x.mutable_grad();
    const std::size_t ow = 2 * w;
    for (std::size_t plane = 0; plane < n * c; ++plane) {
      for (std::size_t y = 0; y < 2 * h; ++y) {
        const double* src = og.data() + plane * 4 * h * w + y * ow;
        double* dst = gx.data() + plane * h * w + (y / 2) * w;
        for (std::size_t xx = 0; xx < ow; ++xx) dst[xx / 2] += src[xx];
      }
    }
  });
  return out;
}

Tensor relu(Tape& tape, const Tensor& x) {
  Tensor out = tape.make_output(x.shape(), {&x});
  const auto in = x.data();
  auto o = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = in[i] > 0.0 ? in[i] : 0.0;
  tape.record("relu", out, [x](std::span<const double> og) {
    Tensor t = x;
    auto g = t.mutable_grad();
    const auto in = t.data();
    for (std::size_t i = 0; i < og.size(); ++i) {
      if (in[i] > 0.0) g[i] += og[i];
    }
  });
  return out;
}

Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b) {
  require_rank4(a, "concat_channels");
  require_rank4(b, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw StructuralError("concat_channels: non-channel dims differ " + shape_string(a.shape()) +
                          " vs " + shape_string(b.shape()));
  }
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  Tensor out = tape.make_output({n, ca + cb, a.dim(2), a.dim(3)}, {&a, &b});
  auto o = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.data().data() + i * ca * hw, ca * hw, o.data() + i * (ca + cb) * hw);
    std::copy_n(b.data().data() + i * cb * hw, cb * hw, o.data() + i * (ca + cb) * hw + ca * hw);
  }
  tape.record("concat_channels", out, [a, b, n, ca, cb, hw](std::span<const double> og) {
    for (std::size_t i = 0; i < n; ++i) {
      const double* src = og.data() + i * (ca + cb) * hw;
      if (a.requires_grad()) {
        Tensor t = a;
        double* dst = t.mutable_grad().data() + i * ca * hw;
        for (std::size_t j = 0; j < ca * hw; ++j) dst[j] += src[j];
      }
      if (b.requires_grad()) {
        Tensor t = b;
        double* dst = t.mutable_grad().data() + i * cb * hw;
        for (std::size_t j = 0; j < cb * hw; ++j) dst[j] += src[ca * hw + j];
      }
    }
  });
  return out;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = tape.make_output(a.shape(), {&a, &b});
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] + b.data()[i];
  tape.record("add", out, [a, b](std::span<const double> og) {
    accumulate_grad(a, og);
    accumulate_grad(b, og);
  });
  return out;
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = tape.make_output(a.shape(), {&a, &b});
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] - b.data()[i];
  tape.record("sub", out, [a, b](std::span<const double> og) {
    accumulate_grad(a, og);
    if (b.requires_grad()) {
      Tensor t = b;
      auto g = t.mutable_grad();
      for (std::size_t i = 0; i < og.size(); ++i) g[i] -= og[i];
    }
  });
  return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = tape.make_output(a.shape(), {&a, &b});
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] * b.data()[i];
  tape.record("mul", out, [a, b](std::span<const double> og) {
    if (a.requires_grad()) {
      Tensor t = a;
      auto g = t.mutable_grad();
      for (std::size_t i = 0; i < og.size(); ++i) g[i] += og[i] * b.data()[i];
    }
    if (b.requires_grad()) {
      Tensor t = b;
      auto g = t.mutable_grad();
      for (std::size_t i = 0; i < og.size(); ++i) g[i] += og[i] * a.data()[i];
    }
  });
  return out;
}

Tensor scale(Tape& tape, const Tensor& x, double factor) {
  Tensor out = tape.make_output(x.shape(), {&x});
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x.data()[i] * factor;
  tape.record("scale", out, [x, factor](std::span<const double> og) {
    Tensor t = x;
    auto g = t.mutable_grad();
    for (std::size_t i = 0; i < og.size(); ++i) g[i] += og[i] * factor;
  });
  return out;
}

Tensor add_scalar(Tape& tape, const Tensor& x, double offset) {
  Tensor out = tape.make_output(x.shape(), {&x});
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x.data()[i] + offset;
  tape.record("add_scalar", out, [x](std::span<const double> og) { accumulate_grad(x, og); });
  return out;
}

Tensor log(Tape& tape, const Tensor& x) {
  Tensor out = tape.make_output(x.shape(), {&x});
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::log(x.data()[i]);
  tape.record("log", out, [x](std::span<const double> og) {
    Tensor t = x;
    auto g = t.mutable_grad();
    for (std::size_t i = 0; i < og.size(); ++i) g[i] += og[i] / x.data()[i];
  });
  return out;
}

Tensor mul_spatial(Tape& tape, const Tensor& x, const Tensor& weights) {
  require_rank4(x, "mul_spatial");
  if (weights.rank() != 2 || weights.dim(0) != x.dim(2) || weights.dim(1) != x.dim(3)) {
    throw StructuralError("mul_spatial: weights " + shape_string(weights.shape()) +
                          " do not match spatial dims of " + shape_string(x.shape()));
  }
  const std::size_t planes = x.dim(0) * x.dim(1);
  const std::size_t hw = x.dim(2) * x.dim(3);
  Tensor out = tape.make_output(x.shape(), {&x, &weights});
  auto o = out.data();
  const auto w = weights.data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < hw; ++i) o[p * hw + i] = x.data()[p * hw + i] * w[i];
  }
  tape.record("mul_spatial", out, [x, weights, planes, hw](std::span<const double> og) {
    if (x.requires_grad()) {
      Tensor t = x;
      auto g = t.mutable_grad();
      for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t i = 0; i < hw; ++i) g[p * hw + i] += og[p * hw + i] * weights.data()[i];
      }
    }
    if (weights.requires_grad()) {
      Tensor t = weights;
      auto g = t.mutable_grad();
      for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t i = 0; i < hw; ++i) g[i] += og[p * hw + i] * x.data()[p * hw + i];
      }
    }
  });
  return out;
}

Tensor sum(Tape& tape, const Tensor& x) {
  Tensor out = tape.make_output({}, {&x});
  double s = 0.0;
  for (double v : x.data()) s += v;
  out.data()[0] = s;
  tape.record("sum", out, [x](std::span<const double> og) {
    Tensor t = x;
    for (double& g : t.mutable_grad()) g += og[0];
  });
  return out;
}

Tensor mean(Tape& tape, const Tensor& x) {
  if (x.numel() == 0) throw StructuralError("mean of an empty tensor");
  Tensor out = tape.make_output({}, {&x});
  double s = 0.0;
  for (double v : x.data()) s += v;
  const double inv = 1.0 / static_cast<double>(x.numel());
  out.data()[0] = s * inv;
  tape.record("mean", out, [x, inv](std::span<const double> og) {
    Tensor t = x;
    for (double& g : t.mutable_grad()) g += og[0] * inv;
  });
  return out;
}

Tensor softmax_channels(Tape& tape, const Tensor& logits) {
  require_rank4(logits, "softmax_channels");
  const std::size_t n = logits.dim(0), c = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  if (c < 2) throw StructuralError("softmax_channels: need at least 2 channels");
  Tensor out = tape.make_output(logits.shape(), {&logits});
  const auto in = logits.data();
  auto o = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t base = i * c * hw;
    for (std::size_t p = 0; p < hw; ++p) {
      double top = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < c; ++k) top = std::max(top, in[base + k * hw + p]);
      double z = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        const double e = std::exp(in[base + k * hw + p] - top);
        o[base + k * hw + p] = e;
        z += e;
      }
      for (std::size_t k = 0; k < c; ++k) o[base + k * hw + p] /= z;
    }
  }
  // The closure holds a weak reference to the output; the record itself owns it.
  std::weak_ptr<detail::TensorImpl> weak_out = out.impl();
  tape.record("softmax_channels", out, [logits, weak_out, n, c, hw](std::span<const double> og) {
    const auto y = weak_out.lock();
    Tensor t = logits;
    auto g = t.mutable_grad();
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t base = i * c * hw;
      for (std::size_t p = 0; p < hw; ++p) {
        double dot = 0.0;
        for (std::size_t k = 0; k < c; ++k) dot += og[base + k * hw + p] * y->data[base + k * hw + p];
        for (std::size_t k = 0; k < c; ++k) {
          const std::size_t idx = base + k * hw + p;
          g[idx] += y->data[idx] * (og[idx] - dot);
        }
      }
    }
  });
  return out;
}

Tensor flip_horizontal(const Tensor& x) {
  require_rank4(x, "flip_horizontal");
  const std::size_t rows = x.dim(0) * x.dim(1) * x.dim(2);
  const std::size_t w = x.dim(3);
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.data();
  const auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < w; ++j) o[r * w + j] = in[r * w + (w - 1 - j)];
  }
  return out;
}

}  // namespace atseg::ops
