#pragma once

#include <cstddef>
#include <string>
#include <variant>
#include <vector>

#include "atseg/tensor.hpp"

namespace atseg {

/// Horizontal amplification profile used to weight the central columns of
/// a B-scan. The raw step profile is omega on columns whose centre lies in
/// (i0, i1), i.e. i0 <= i < i1, and 1 elsewhere. It is smoothed by a
/// normalized Gaussian truncated at ceil(3 sigma) with replicate padding
/// and broadcast to every row.
class AmplificationWeights {
 public:
  AmplificationWeights(std::size_t width, std::size_t height, double omega, std::size_t i0,
                       std::size_t i1, double sigma);

  std::size_t width() const noexcept { return width_; }
  std::size_t height() const noexcept { return height_; }
  double omega() const noexcept { return omega_; }
  std::size_t i0() const noexcept { return i0_; }
  std::size_t i1() const noexcept { return i1_; }
  double sigma() const noexcept { return sigma_; }
  std::size_t truncation_radius() const noexcept { return radius_; }

  /// Smoothed per-column weight, length width().
  const std::vector<double>& profile() const noexcept { return profile_; }
  double at(std::size_t /*row*/, std::size_t col) const { return profile_.at(col); }
  /// The [height, width] weight matrix.
  const Tensor& matrix() const noexcept { return matrix_; }

 private:
  std::size_t width_, height_;
  double omega_;
  std::size_t i0_, i1_;
  double sigma_;
  std::size_t radius_;
  std::vector<double> profile_;
  Tensor matrix_;
};

AmplificationWeights build_weights(std::size_t width, std::size_t height, double omega,
                                   std::size_t i0, std::size_t i1, double sigma);

/// Normalized Gaussian taps for offsets -radius..radius, radius = ceil(3 sigma).
std::vector<double> truncated_gaussian(double sigma);

struct IdentityTransform {};
using TargetTransform = std::variant<IdentityTransform, AmplificationWeights>;

enum class BaseLoss { ce, mse };

std::string to_string(BaseLoss loss);
BaseLoss base_loss_from_string(const std::string& name);

inline constexpr double kCrossEntropyEpsilon = 1e-7;

/// T(m): identity, or W applied entrywise to every channel plane.
Tensor apply_transform(Tape& tape, const TargetTransform& transform, const Tensor& m);

/// Mean over all elements of (y - y_hat)^2.
Tensor mse(Tape& tape, const Tensor& y, const Tensor& y_hat);

/// -mean over pixels of sum_c y_c log(y_hat_c + eps), for [N,C,H,W] inputs.
Tensor ce(Tape& tape, const Tensor& y, const Tensor& y_hat, double eps = kCrossEntropyEpsilon);

Tensor base_loss(Tape& tape, BaseLoss kind, const Tensor& y, const Tensor& y_hat);

struct AtTerm {
  double lambda = 1.0;
  TargetTransform transform = IdentityTransform{};
  BaseLoss base = BaseLoss::ce;
};

/// Weighted sum of base losses on transformed targets and predictions.
struct AtLossSpec {
  std::vector<AtTerm> terms;

  /// Throws ParameterError when empty or when a weight is negative.
  void validate() const;
};

/// sum_j lambda_j * L_j(T_j(y), T_j(y_hat)).
Tensor at_loss(Tape& tape, const AtLossSpec& spec, const Tensor& y, const Tensor& y_hat);

}  // namespace atseg
