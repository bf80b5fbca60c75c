#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "atseg/tensor.hpp"

namespace atseg {

/// Weights of a compact U-Net. Level l carries base_channels * 2^l feature
/// maps; the last level is the bottleneck. Tensors are stored in
/// declaration order (encoder, bottleneck, decoder from deepest to
/// shallowest, 1x1 head), each convolution as kernel then bias.
struct SegNetParams {
  std::uint32_t base_channels = 8;
  std::uint32_t levels = 3;
  std::uint32_t classes = 2;
  std::uint32_t seed = 0;
  std::vector<std::string> names;
  std::vector<Tensor> tensors;

  std::size_t parameter_count() const;
  /// Deep copy; the copy's tensors require gradients like the originals.
  SegNetParams clone() const;
  bool all_finite() const;
  void zero_grad();
};

/// Number of scalar parameters for a given configuration.
std::size_t segnet_parameter_count(std::uint32_t base_channels, std::uint32_t levels, std::uint32_t classes);

/// He-normal kernels, zero biases, deterministic in `seed`.
SegNetParams init_segnet(std::uint32_t seed, std::uint32_t base_channels = 8, std::uint32_t levels = 3,
                         std::uint32_t classes = 2);

/// Per-pixel class probabilities [N,classes,H,W] for input [N,1,H,W].
Tensor segnet_forward(Tape& tape, const SegNetParams& params, const Tensor& x);

void save_checkpoint(const SegNetParams& params, const std::filesystem::path& path);
SegNetParams load_checkpoint(const std::filesystem::path& path);

}  // namespace atseg
