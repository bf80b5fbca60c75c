#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "atseg/evalkit.hpp"
#include "atseg/losses.hpp"
#include "atseg/synthoct.hpp"
#include "atseg/trainer.hpp"

namespace atseg {

/// Two-term objective lambda1 * L(y, y_hat) + lambda2 * L(W y, W y_hat), or the
/// plain base loss when `amplified` is false. Unset sigma, i0 and i1 resolve
/// to X/16, X/4 and 3X/4 of the image width X.
struct LossConfig {
  std::string preset = "ce_at";
  BaseLoss base = BaseLoss::ce;
  bool amplified = true;
  double omega = 8.0;
  double lambda1 = 1.0;
  double lambda2 = 8.0;
  std::optional<double> sigma;
  std::optional<std::size_t> i0;
  std::optional<std::size_t> i1;
};

/// "ce", "mse", "ce_at" or "mse_at".
LossConfig loss_preset(const std::string& name);
std::vector<std::string> preset_names();

AtLossSpec resolve_loss(const LossConfig& loss, std::size_t width, std::size_t height);

struct EvalConfig {
  std::vector<Region> regions = default_regions();
  ThresholdScope scope = ThresholdScope::volume;
};

struct SweepConfig {
  BaseLoss base = BaseLoss::ce;
  std::vector<double> omegas{2, 4, 8, 16, 32};
  std::vector<double> lambda1{0.001, 0.01, 0.1, 1, 2, 4, 8};
  std::vector<double> lambda2{0.001, 0.01, 0.1, 1, 2, 4, 8};
  /// Epoch budget per grid point; mandatory for the full grid.
  std::optional<std::size_t> max_epochs;

  std::size_t size() const { return omegas.size() * lambda1.size() * lambda2.size(); }
};

inline constexpr std::size_t kFullSweepSize = 245;

struct ExperimentConfig {
  std::uint64_t seed = 7;
  std::size_t threads = 1;
  std::string out = "atseg_out";
  /// Dataset directory; empty means <out>/data.
  std::string data_root;
  DatasetSpec data;
  LossConfig loss;
  /// Optimization settings; its loss and seed are filled by resolve_train.
  TrainConfig train;
  EvalConfig eval;
  SweepConfig sweep;

  std::filesystem::path data_dir() const;
  std::filesystem::path out_dir() const { return out; }
};

/// Parses a (possibly partial) JSON document over the defaults. Unknown
/// keys are rejected.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Fully resolved JSON, every field present.
std::string serialize_config(const ExperimentConfig& config);
void validate_config(const ExperimentConfig& config);

/// TrainConfig with the resolved loss for the configured width and the global seed.
TrainConfig resolve_train(const ExperimentConfig& config);

}  // namespace atseg
