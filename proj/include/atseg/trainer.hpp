#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "atseg/losses.hpp"
#include "atseg/segnet.hpp"
#include "atseg/synthoct.hpp"

namespace atseg {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First and second moment buffers for one parameter block.
struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
};

/// One Adam update of `param` in place. `step` is the 1-based update count
/// used for bias correction.
void adam_step(std::span<double> param, std::span<const double> grad, AdamMoments& moments, long step,
               double lr, const AdamConfig& config);

/// Adam over a fixed list of tensors, reading their accumulated gradients.
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Tensor> params, AdamConfig config);
  void step(double lr);
  long steps() const noexcept { return steps_; }

 private:
  std::vector<Tensor> params_;
  std::vector<AdamMoments> moments_;
  AdamConfig config_;
  long steps_ = 0;
};

/// Learning-rate halving and early stopping driven by the validation loss.
/// An epoch improves when its loss is strictly below the best so far. The
/// lr counter resets after each reduction; the stop counter only on
/// improvement. Both decisions of an epoch are evaluated in that order.
class PlateauSchedule {
 public:
  struct Decision {
    bool improved = false;
    bool lr_reduced = false;
    bool stop = false;
    double lr = 0.0;  // learning rate for the next epoch
  };

  PlateauSchedule(double initial_lr, std::size_t patience_lr, std::size_t patience_stop, double lr_factor);
  Decision observe(double val_loss);

  double lr() const noexcept { return lr_; }
  double best() const noexcept { return best_; }

 private:
  double lr_;
  std::size_t patience_lr_, patience_stop_;
  double factor_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t since_lr_ = 0, since_best_ = 0;
};

struct TrainConfig {
  AtLossSpec loss;
  double lr = 1e-4;
  std::size_t batch_size = 2;
  std::size_t patience_stop = 45;
  std::size_t patience_lr = 15;
  double lr_factor = 0.5;
  double flip_prob = 0.5;
  std::size_t max_epochs = 300;
  std::uint64_t seed = 0;
  std::uint32_t base_channels = 8;
  AdamConfig adam;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;  // learning rate used during the epoch
  bool improved = false;
  bool lr_reduced = false;
  bool stopped = false;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::size_t stop_epoch = 0;
  std::size_t best_epoch = 0;

  std::string to_csv() const;
};

/// One B-scan with its two-channel target (background, photoreceptor).
struct Sample {
  Tensor scan;    // [1,1,H,W]
  Tensor target;  // [1,2,H,W]
};

std::vector<Sample> samples_from_volume(const OctVolume& vol);
std::vector<Sample> samples_from_volumes(const std::vector<OctVolume>& vols);

/// Stacks samples into an input [N,1,H,W] and a target [N,2,H,W], mirroring
/// both scan and target of every sample whose flip flag is set.
std::pair<Tensor, Tensor> make_batch(std::span<const Sample* const> samples, std::span<const bool> flips);

/// Sample-weighted mean loss over `samples` in batches, no parameter update.
double dataset_loss(const SegNetParams& params, std::span<const Sample> samples, const AtLossSpec& loss,
                    std::size_t batch_size, std::span<const bool> flips = {});

struct TrainResult {
  SegNetParams params;  // weights of the best validation epoch
  TrainLog log;
};

TrainResult train(const TrainConfig& config, const SegNetParams& init, std::span<const Sample> train_set,
                  std::span<const Sample> val_set);

/// Loads the split's train and validation volumes from `data_root` and trains
/// a freshly initialized network.
TrainResult train(const TrainConfig& config, const DatasetSplit& split, const std::filesystem::path& data_root);

/// Replays a validation-loss history through PlateauSchedule.
std::vector<PlateauSchedule::Decision> replay_schedule(std::span<const double> val_losses, double initial_lr,
                                                       std::size_t patience_lr, std::size_t patience_stop,
                                                       double lr_factor);

}  // namespace atseg
