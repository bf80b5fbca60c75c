#include "atseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>

#include "atseg/errors.hpp"
#include "atseg/ops.hpp"

namespace atseg {

void adam_step(std::span<double> param, std::span<const double> grad, AdamMoments& moments, long step,
               double lr, const AdamConfig& config) {
  if (grad.size() != param.size()) throw StructuralError("adam_step: gradient size does not match parameters");
  if (moments.m.empty() && moments.v.empty()) {
    moments.m.assign(param.size(), 0.0);
    moments.v.assign(param.size(), 0.0);
  }
  if (moments.m.size() != param.size() || moments.v.size() != param.size()) {
    throw StructuralError("adam_step: moment buffers do not match parameters");
  }
  if (step < 1) throw ParameterError("adam_step: step count starts at 1");
  const double correction1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
  const double correction2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    moments.m[i] = config.beta1 * moments.m[i] + (1.0 - config.beta1) * g;
    moments.v[i] = config.beta2 * moments.v[i] + (1.0 - config.beta2) * g * g;
    const double m_hat = moments.m[i] / correction1;
    const double v_hat = moments.v[i] / correction2;
    param[i] -= lr * m_hat / (std::sqrt(v_hat) + config.epsilon);
  }
}

AdamOptimizer::AdamOptimizer(std::vector<Tensor> params, AdamConfig config)
    : params_(std::move(params)), moments_(params_.size()), config_(config) {}

void AdamOptimizer::step(double lr) {
  ++steps_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    adam_step(p.data(), p.mutable_grad(), moments_[i], steps_, lr, config_);
  }
}

PlateauSchedule::PlateauSchedule(double initial_lr, std::size_t patience_lr, std::size_t patience_stop,
                                 double lr_factor)
    : lr_(initial_lr), patience_lr_(patience_lr), patience_stop_(patience_stop), factor_(lr_factor) {}

PlateauSchedule::Decision PlateauSchedule::observe(double val_loss) {
  Decision d;
  if (val_loss < best_) {
    best_ = val_loss;
    since_lr_ = 0;
    since_best_ = 0;
    d.improved = true;
  } else {
    ++since_lr_;
    ++since_best_;
  }
  if (since_lr_ >= patience_lr_) {
    lr_ *= factor_;
    since_lr_ = 0;
    d.lr_reduced = true;
  }
  d.stop = since_best_ >= patience_stop_;
  d.lr = lr_;
  return d;
}

std::vector<PlateauSchedule::Decision> replay_schedule(std::span<const double> val_losses, double initial_lr,
                                                       std::size_t patience_lr, std::size_t patience_stop,
                                                       double lr_factor) {
  PlateauSchedule schedule(initial_lr, patience_lr, patience_stop, lr_factor);
  std::vector<PlateauSchedule::Decision> out;
  for (double v : val_losses) {
    out.push_back(schedule.observe(v));
    if (out.back().stop) break;
  }
  return out;
}

void TrainConfig::validate() const {
  loss.validate();
  if (!(lr > 0.0)) throw ParameterError("learning rate must be positive");
  if (batch_size == 0) throw ParameterError("batch size must be positive");
  if (!(lr_factor > 0.0 && lr_factor < 1.0)) throw ParameterError("lr factor must lie in (0,1)");
  if (patience_lr == 0 || patience_stop == 0) throw ParameterError("patience values must be positive");
  if (patience_lr > patience_stop) throw ParameterError("lr patience must not exceed stop patience");
  if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) throw ParameterError("flip probability must lie in [0,1]");
  if (max_epochs == 0) throw ParameterError("max_epochs must be positive");
}

namespace {

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string TrainLog::to_csv() const {
  std::ostringstream os;
  os << "epoch,train_loss,val_loss,lr,event\n";
  for (const auto& e : epochs) {
    std::vector<std::string> events;
    if (e.improved) events.emplace_back("best");
    if (e.lr_reduced) events.emplace_back("lr_halved");
    if (e.stopped) events.emplace_back("stop");
    std::string joined;
    for (std::size_t i = 0; i < events.size(); ++i) joined += (i ? ";" : "") + events[i];
    os << e.epoch << ',' << format_double(e.train_loss) << ',' << format_double(e.val_loss) << ','
       << format_double(e.lr) << ',' << joined << '\n';
  }
  return os.str();
}

std::vector<Sample> samples_from_volume(const OctVolume& vol) {
  const std::size_t h = vol.height(), w = vol.width(), hw = h * w;
  std::vector<Sample> out;
  for (std::size_t b = 0; b < vol.bscans(); ++b) {
    Tensor scan = Tensor::zeros({1, 1, h, w});
    Tensor target = Tensor::zeros({1, 2, h, w});
    const auto src = vol.scans.data().subspan(b * hw, hw);
    const auto mask = vol.masks.data().subspan(b * hw, hw);
    std::copy(src.begin(), src.end(), scan.data().begin());
    for (std::size_t i = 0; i < hw; ++i) {
      target.data()[i] = 1.0 - mask[i];
      target.data()[hw + i] = mask[i];
    }
    out.push_back({scan, target});
  }
  return out;
}

std::vector<Sample> samples_from_volumes(const std::vector<OctVolume>& vols) {
  std::vector<Sample> out;
  for (const auto& v : vols) {
    auto s = samples_from_volume(v);
    out.insert(out.end(), s.begin(), s.end());
  }
  return out;
}

std::pair<Tensor, Tensor> make_batch(std::span<const Sample* const> samples, std::span<const bool> flips) {
  if (samples.empty()) throw ParameterError("empty batch");
  const Shape& s = samples.front()->scan.shape();
  const Shape& t = samples.front()->target.shape();
  const std::size_t n = samples.size();
  Tensor x = Tensor::zeros({n, s[1], s[2], s[3]});
  Tensor y = Tensor::zeros({n, t[1], t[2], t[3]});
  const std::size_t xs = samples.front()->scan.numel(), ys = samples.front()->target.numel();
  for (std::size_t i = 0; i < n; ++i) {
    if (samples[i]->scan.shape() != s || samples[i]->target.shape() != t) {
      throw StructuralError("batch samples differ in shape");
    }
    const bool flip = !flips.empty() && flips[i];
    const Tensor scan = flip ? ops::flip_horizontal(samples[i]->scan) : samples[i]->scan;
    const Tensor target = flip ? ops::flip_horizontal(samples[i]->target) : samples[i]->target;
    std::copy(scan.data().begin(), scan.data().end(), x.data().begin() + i * xs);
    std::copy(target.data().begin(), target.data().end(), y.data().begin() + i * ys);
  }
  return {x, y};
}

double dataset_loss(const SegNetParams& params, std::span<const Sample> samples, const AtLossSpec& loss,
                    std::size_t batch_size, std::span<const bool> flips) {
  if (samples.empty()) throw ParameterError("dataset_loss on an empty set");
  if (!flips.empty() && flips.size() != samples.size()) throw StructuralError("one flip flag per sample expected");
  double total = 0.0;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const std::size_t end = std::min(samples.size(), start + batch_size);
    std::vector<const Sample*> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&samples[i]);
    const auto batch_flips = flips.empty() ? std::span<const bool>{} : flips.subspan(start, end - start);
    auto [x, y] = make_batch(batch, batch_flips);
    Tape tape;
    tape.set_recording(false);
    const Tensor value = at_loss(tape, loss, y, segnet_forward(tape, params, x));
    total += value.item() * static_cast<double>(end - start);
  }
  return total / static_cast<double>(samples.size());
}

TrainResult train(const TrainConfig& config, const SegNetParams& init, std::span<const Sample> train_set,
                  std::span<const Sample> val_set) {
  config.validate();
  if (train_set.empty()) throw ParameterError("training partition is empty");
  if (val_set.empty()) throw ParameterError("validation partition is empty");

  TrainResult result{init.clone(), {}};
  SegNetParams params = init.clone();
  for (auto& t : params.tensors) t.set_requires_grad(true);
  AdamOptimizer optimizer(params.tensors, config.adam);
  PlateauSchedule schedule(config.lr, config.patience_lr, config.patience_stop, config.lr_factor);

  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<std::size_t> order(train_set.size());
  std::unique_ptr<bool[]> flips(new bool[train_set.size()]);
  double lr = config.lr;

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < order.size(); ++i) flips[i] = unit(rng) < config.flip_prob;

    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<const Sample*> batch;
      for (std::size_t i = start; i < end; ++i) batch.push_back(&train_set[order[i]]);
      auto [x, y] = make_batch(batch, std::span<const bool>(flips.get() + start, end - start));

      Tape tape;
      const Tensor loss = at_loss(tape, config.loss, y, segnet_forward(tape, params, x));
      total += loss.item() * static_cast<double>(end - start);
      tape.backward(loss);
      optimizer.step(lr);
      params.zero_grad();
    }

    EpochRecord record;
    record.epoch = epoch;
    record.train_loss = total / static_cast<double>(order.size());
    record.val_loss = dataset_loss(params, val_set, config.loss, config.batch_size);
    record.lr = lr;
    const auto decision = schedule.observe(record.val_loss);
    record.improved = decision.improved;
    record.lr_reduced = decision.lr_reduced;
    record.stopped = decision.stop;
    result.log.epochs.push_back(record);

    if (decision.improved) {
      result.params = params.clone();
      result.log.best_epoch = epoch;
    }
    lr = decision.lr;
    if (decision.stop) break;
  }
  result.log.stop_epoch = result.log.epochs.back().epoch;
  return result;
}

TrainResult train(const TrainConfig& config, const DatasetSplit& split, const std::filesystem::path& data_root) {
  if (split.train.empty()) throw ParameterError("training partition is empty");
  if (split.validation.empty()) throw ParameterError("validation partition is empty");
  auto load = [&](const std::vector<std::string>& ids) {
    std::vector<OctVolume> vols;
    for (const auto& id : ids) vols.push_back(read_volume(data_root / id));
    return samples_from_volumes(vols);
  };
  const auto train_set = load(split.train);
  const auto val_set = load(split.validation);
  const SegNetParams init = init_segnet(static_cast<std::uint32_t>(config.seed), config.base_channels);
  return train(config, init, train_set, val_set);
}

}  // namespace atseg
