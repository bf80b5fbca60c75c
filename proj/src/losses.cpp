#include "atseg/losses.hpp"

#include <algorithm>
#include <cmath>

#include "atseg/errors.hpp"
#include "atseg/ops.hpp"

namespace atseg {

std::vector<double> truncated_gaussian(double sigma) {
  if (!(sigma > 0.0)) throw ParameterError("gaussian sigma must be positive");
  const auto radius = static_cast<std::size_t>(std::ceil(3.0 * sigma));
  std::vector<double> taps(2 * radius + 1);
  double total = 0.0;
  for (std::size_t k = 0; k < taps.size(); ++k) {
    const double d = static_cast<double>(k) - static_cast<double>(radius);
    taps[k] = std::exp(-d * d / (2.0 * sigma * sigma));
    total += taps[k];
  }
  for (double& t : taps) t /= total;
  return taps;
}

AmplificationWeights::AmplificationWeights(std::size_t width, std::size_t height, double omega,
                                           std::size_t i0, std::size_t i1, double sigma)
    : width_(width), height_(height), omega_(omega), i0_(i0), i1_(i1), sigma_(sigma) {
  if (width == 0 || height == 0) throw ParameterError("amplification weights need a non-empty image");
  if (i0 >= i1) throw ParameterError("amplification interval needs i0 < i1");
  if (i1 > width) throw ParameterError("amplification interval exceeds image width");
  if (!(omega >= 1.0)) throw ParameterError("amplification omega must be >= 1");
  if (!(sigma > 0.0)) throw ParameterError("amplification sigma must be positive");

  const std::vector<double> taps = truncated_gaussian(sigma);
  radius_ = taps.size() / 2;

  std::vector<double> step(width, 1.0);
  for (std::size_t i = i0; i < i1; ++i) step[i] = omega;

  const long last = static_cast<long>(width) - 1;
  profile_.assign(width, 0.0);
  for (std::size_t i = 0; i < width; ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < taps.size(); ++k) {
      const long src = std::clamp(static_cast<long>(i) + static_cast<long>(k) - static_cast<long>(radius_),
                                  0L, last);
      acc += taps[k] * step[static_cast<std::size_t>(src)];
    }
    profile_[i] = acc;
  }

  matrix_ = Tensor::zeros({height, width});
  auto m = matrix_.data();
  for (std::size_t r = 0; r < height; ++r) std::copy(profile_.begin(), profile_.end(), m.begin() + r * width);
}

AmplificationWeights build_weights(std::size_t width, std::size_t height, double omega,
                                   std::size_t i0, std::size_t i1, double sigma) {
  return AmplificationWeights(width, height, omega, i0, i1, sigma);
}

std::string to_string(BaseLoss loss) { return loss == BaseLoss::ce ? "ce" : "mse"; }

BaseLoss base_loss_from_string(const std::string& name) {
  if (name == "ce") return BaseLoss::ce;
  if (name == "mse") return BaseLoss::mse;
  throw ParameterError("unknown base loss '" + name + "' (expected ce or mse)");
}

Tensor apply_transform(Tape& tape, const TargetTransform& transform, const Tensor& m) {
  if (std::holds_alternative<IdentityTransform>(transform)) return m;
  const auto& w = std::get<AmplificationWeights>(transform);
  if (m.rank() != 4 || m.dim(2) != w.height() || m.dim(3) != w.width()) {
    throw StructuralError("amplification weights " + std::to_string(w.height()) + "x" +
                          std::to_string(w.width()) + " do not fit tensor " + shape_string(m.shape()));
  }
  return ops::mul_spatial(tape, m, w.matrix());
}

Tensor mse(Tape& tape, const Tensor& y, const Tensor& y_hat) {
  if (y.shape() != y_hat.shape()) {
    throw StructuralError("mse: shape mismatch " + shape_string(y.shape()) + " vs " + shape_string(y_hat.shape()));
  }
  Tensor diff = ops::sub(tape, y_hat, y);
  return ops::mean(tape, ops::mul(tape, diff, diff));
}

Tensor ce(Tape& tape, const Tensor& y, const Tensor& y_hat, double eps) {
  if (y.shape() != y_hat.shape()) {
    throw StructuralError("ce: shape mismatch " + shape_string(y.shape()) + " vs " + shape_string(y_hat.shape()));
  }
  if (y.rank() != 4) throw StructuralError("ce: expected [N,C,H,W], got " + shape_string(y.shape()));
  if (!(eps > 0.0)) throw ParameterError("ce: epsilon must be positive");
  const double pixels = static_cast<double>(y.dim(0) * y.dim(2) * y.dim(3));
  Tensor log_p = ops::log(tape, ops::add_scalar(tape, y_hat, eps));
  return ops::scale(tape, ops::sum(tape, ops::mul(tape, y, log_p)), -1.0 / pixels);
}

Tensor base_loss(Tape& tape, BaseLoss kind, const Tensor& y, const Tensor& y_hat) {
  return kind == BaseLoss::ce ? ce(tape, y, y_hat) : mse(tape, y, y_hat);
}

void AtLossSpec::validate() const {
  if (terms.empty()) throw ParameterError("augmented-target loss needs at least one term");
  for (const auto& t : terms) {
    if (!(t.lambda >= 0.0) || !std::isfinite(t.lambda)) {
      throw ParameterError("augmented-target loss weights must be finite and non-negative");
    }
  }
}

Tensor at_loss(Tape& tape, const AtLossSpec& spec, const Tensor& y, const Tensor& y_hat) {
  spec.validate();
  Tensor total;
  for (const auto& term : spec.terms) {
    Tensor ty = apply_transform(tape, term.transform, y);
    Tensor ty_hat = apply_transform(tape, term.transform, y_hat);
    Tensor weighted = ops::scale(tape, base_loss(tape, term.base, ty, ty_hat), term.lambda);
    total = total.defined() ? ops::add(tape, total, weighted) : weighted;
  }
  return total;
}

}  // namespace atseg
