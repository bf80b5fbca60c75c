#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "atseg/config.hpp"
#include "atseg/evalkit.hpp"
#include "atseg/gradcheck.hpp"
#include "atseg/segnet.hpp"
#include "atseg/trainer.hpp"

namespace atseg {

/// Writes the resolved configuration as config.resolved.json in `dir`.
void echo_config(const ExperimentConfig& config, const std::filesystem::path& dir);

struct GenerateOutcome {
  std::filesystem::path manifest;
  DatasetSplit split;
};

GenerateOutcome cmd_generate(const ExperimentConfig& config);

struct TrainOutcome {
  std::filesystem::path checkpoint;
  std::filesystem::path log_csv;
  TrainResult result;
};

/// Trains `config.loss` on the configured dataset and writes
/// <out>/models/<name>/{checkpoint.bin, trainlog.csv, config.resolved.json}.
TrainOutcome cmd_train(const ExperimentConfig& config, const std::string& name);

struct SweepPoint {
  double omega = 1.0;
  double lambda1 = 1.0;
  double lambda2 = 0.0;
  double val_dice = 0.0;
  double val_loss = 0.0;
  std::size_t best_epoch = 0;
};

/// Grid points ordered by omega, then lambda1, then lambda2.
std::vector<SweepPoint> sweep_grid(const SweepConfig& sweep);

/// Highest validation Dice; ties go to the lower omega, then the lower
/// lambda2, then the lower lambda1.
std::size_t select_sweep_best(std::span<const SweepPoint> points);

std::string sweep_csv(std::span<const SweepPoint> points);

struct SweepOutcome {
  std::vector<SweepPoint> points;
  std::size_t best = 0;
  std::filesystem::path table;
};

/// Trains every grid point and scores it by mean full-volume validation
/// Dice. Writes <out>/sweep/{sweep.csv, best.json}.
SweepOutcome cmd_sweep(const ExperimentConfig& config);

/// Photoreceptor-class softmax scores [B,1,H,W] of every B-scan.
Tensor predict_scores(const SegNetParams& params, const OctVolume& vol);

using NamedPath = std::pair<std::string, std::filesystem::path>;

/// Forwards every test volume through each checkpoint, writes score volumes
/// to <out>/scores/<model>/<volume id>/ and the report to <out>/report/.
EvalReport cmd_eval(const ExperimentConfig& config, const std::vector<NamedPath>& checkpoints);

/// Report from existing score directories, each holding <volume id>/score.f32
/// for every test volume. Written to <out>/report/.
EvalReport cmd_report(const ExperimentConfig& config, const std::vector<NamedPath>& score_roots);

GradAudit cmd_gradcheck(std::uint64_t seed, const std::vector<GradCase>& extra = {});

/// Runs body(i) for i in [0, n) on up to `threads` workers. The first
/// exception is rethrown after all workers finish.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& body);

}  // namespace atseg
