#include "atseg/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <exception>
#include <mutex>
#include <thread>

#include <json.hpp>

#include "atseg/errors.hpp"
#include "atseg/ops.hpp"
#include "binary_io.hpp"

namespace atseg {

namespace fs = std::filesystem;

namespace {

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

DatasetSplit load_split(const ExperimentConfig& config) {
  const fs::path manifest = config.data_dir() / "split.json";
  if (!fs::exists(manifest)) {
    throw IoError("dataset not found: " + manifest.string() + " is missing (run 'atseg generate' first)");
  }
  return read_split(manifest);
}

std::vector<OctVolume> load_volumes(const fs::path& root, const std::vector<std::string>& ids) {
  std::vector<OctVolume> vols;
  vols.reserve(ids.size());
  for (const auto& id : ids) vols.push_back(read_volume(root / id));
  return vols;
}

void check_compatible(const SegNetParams& params, const OctVolume& vol, const std::string& model) {
  if (params.classes != 2) {
    throw ParameterError("checkpoint '" + model + "' has " + std::to_string(params.classes) +
                         " classes; photoreceptor scoring needs 2");
  }
  const std::size_t factor = std::size_t{1} << (params.levels - 1);
  if (vol.height() % factor != 0 || vol.width() % factor != 0) {
    throw ParameterError("checkpoint '" + model + "' with " + std::to_string(params.levels) +
                         " levels cannot process volume " + vol.id + " of size " + std::to_string(vol.height()) +
                         "x" + std::to_string(vol.width()) + " (both must be multiples of " + std::to_string(factor) +
                         ")");
  }
}

}  // namespace

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& body) {
  const std::size_t workers = std::min(std::max<std::size_t>(threads, 1), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::mutex mu;
  std::size_t next = 0;
  std::exception_ptr error;
  auto run = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(mu);
        if (next >= n || error) return;
        i = next++;
      }
      try {
        body(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

void echo_config(const ExperimentConfig& config, const fs::path& dir) {
  ensure_dir(dir);
  binio::write_text(dir / "config.resolved.json", serialize_config(config));
}

GenerateOutcome cmd_generate(const ExperimentConfig& config) {
  validate_config(config);
  const fs::path root = config.data_dir();
  ensure_dir(root);
  GenerateOutcome out;
  out.split = generate_dataset(config.seed, config.data, root);
  out.manifest = root / "split.json";
  echo_config(config, root);
  return out;
}

TrainOutcome cmd_train(const ExperimentConfig& config, const std::string& name) {
  validate_config(config);
  if (name.empty()) throw ParameterError("model name must not be empty");
  const TrainConfig train_config = resolve_train(config);
  const DatasetSplit split = load_split(config);
  TrainOutcome out;
  out.result = train(train_config, split, config.data_dir());
  const fs::path dir = config.out_dir() / "models" / name;
  ensure_dir(dir);
  out.checkpoint = dir / "checkpoint.bin";
  out.log_csv = dir / "trainlog.csv";
  save_checkpoint(out.result.params, out.checkpoint);
  binio::write_text(out.log_csv, out.result.log.to_csv());
  echo_config(config, dir);
  return out;
}

std::vector<SweepPoint> sweep_grid(const SweepConfig& sweep) {
  std::vector<SweepPoint> points;
  for (double omega : sweep.omegas) {
    for (double l1 : sweep.lambda1) {
      for (double l2 : sweep.lambda2) {
        SweepPoint p;
        p.omega = omega;
        p.lambda1 = l1;
        p.lambda2 = l2;
        points.push_back(p);
      }
    }
  }
  return points;
}

std::size_t select_sweep_best(std::span<const SweepPoint> points) {
  if (points.empty()) throw ParameterError("sweep: empty grid");
  std::size_t best = 0;
  for (std::size_t i = 1; i < points.size(); ++i) {
    const SweepPoint& a = points[i];
    const SweepPoint& b = points[best];
    if (a.val_dice != b.val_dice) {
      if (a.val_dice > b.val_dice) best = i;
    } else if (a.omega != b.omega) {
      if (a.omega < b.omega) best = i;
    } else if (a.lambda2 != b.lambda2) {
      if (a.lambda2 < b.lambda2) best = i;
    } else if (a.lambda1 < b.lambda1) {
      best = i;
    }
  }
  return best;
}

std::string sweep_csv(std::span<const SweepPoint> points) {
  std::string out = "omega,lambda1,lambda2,val_dice,val_loss,best_epoch\n";
  for (const auto& p : points) {
    out += fmt17(p.omega) + "," + fmt17(p.lambda1) + "," + fmt17(p.lambda2) + "," + fmt17(p.val_dice) + "," +
           fmt17(p.val_loss) + "," + std::to_string(p.best_epoch) + "\n";
  }
  return out;
}

Tensor predict_scores(const SegNetParams& params, const OctVolume& vol) {
  Tape tape;
  tape.set_recording(false);
  const Tensor probs = segnet_forward(tape, params, vol.scans);
  const std::size_t b = vol.bscans(), hw = vol.height() * vol.width();
  Tensor scores = Tensor::zeros({b, 1, vol.height(), vol.width()});
  for (std::size_t i = 0; i < b; ++i) {
    std::copy_n(probs.data().begin() + static_cast<std::ptrdiff_t>((i * 2 + 1) * hw), hw,
                scores.data().begin() + static_cast<std::ptrdiff_t>(i * hw));
  }
  return scores;
}

SweepOutcome cmd_sweep(const ExperimentConfig& config) {
  validate_config(config);
  const SweepConfig& sweep = config.sweep;
  if (sweep.size() == 0) throw ParameterError("sweep: empty grid");
  if (sweep.size() >= kFullSweepSize && !sweep.max_epochs) {
    throw ParameterError("sweep: the " + std::to_string(sweep.size()) +
                         "-point grid requires an explicit epoch budget (--max-epochs)");
  }
  const DatasetSplit split = load_split(config);
  if (split.validation.empty()) throw ParameterError("sweep: validation partition is empty");
  const auto train_vols = load_volumes(config.data_dir(), split.train);
  const auto val_vols = load_volumes(config.data_dir(), split.validation);
  const auto train_set = samples_from_volumes(train_vols);
  const auto val_set = samples_from_volumes(val_vols);

  SweepOutcome out;
  out.points = sweep_grid(sweep);
  parallel_for(out.points.size(), config.threads, [&](std::size_t i) {
    SweepPoint& p = out.points[i];
    ExperimentConfig point = config;
    point.loss.preset = "custom";
    point.loss.base = sweep.base;
    point.loss.amplified = true;
    point.loss.omega = p.omega;
    point.loss.lambda1 = p.lambda1;
    point.loss.lambda2 = p.lambda2;
    point.seed = config.seed + i;
    if (sweep.max_epochs) point.train.max_epochs = *sweep.max_epochs;
    const TrainConfig tc = resolve_train(point);
    const SegNetParams init = init_segnet(static_cast<std::uint32_t>(tc.seed), tc.base_channels);
    const TrainResult r = train(tc, init, train_set, val_set);
    double total = 0.0;
    for (const auto& vol : val_vols) {
      const Tensor mask = binarize_volume(predict_scores(r.params, vol), config.eval.scope);
      total += dice(mask, vol.masks);
    }
    p.val_dice = total / static_cast<double>(val_vols.size());
    p.best_epoch = r.log.best_epoch;
    p.val_loss = r.log.epochs.at(r.log.best_epoch - 1).val_loss;
  });
  out.best = select_sweep_best(out.points);

  const fs::path dir = config.out_dir() / "sweep";
  ensure_dir(dir);
  out.table = dir / "sweep.csv";
  binio::write_text(out.table, sweep_csv(out.points));
  const SweepPoint& b = out.points[out.best];
  const nlohmann::ordered_json best = {{"base", to_string(sweep.base)}, {"omega", b.omega}, {"lambda1", b.lambda1},
                                       {"lambda2", b.lambda2}, {"val_dice", b.val_dice}};
  binio::write_text(dir / "best.json", best.dump(2) + "\n");
  echo_config(config, dir);
  return out;
}

namespace {

EvalReport finish_report(const ExperimentConfig& config, const std::vector<ModelPrediction>& models,
                         const std::vector<OctVolume>& truth) {
  const EvalReport report = make_report(models, truth, config.eval.regions);
  const fs::path dir = config.out_dir() / "report";
  report.write(dir);
  echo_config(config, dir);
  return report;
}

void check_unique_names(const std::vector<NamedPath>& items) {
  if (items.empty()) throw ParameterError("at least one model is required");
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].first.empty()) throw ParameterError("model names must not be empty");
    for (std::size_t j = 0; j < i; ++j) {
      if (items[i].first == items[j].first) throw ParameterError("duplicate model name '" + items[i].first + "'");
    }
  }
}

}  // namespace

EvalReport cmd_eval(const ExperimentConfig& config, const std::vector<NamedPath>& checkpoints) {
  validate_config(config);
  check_unique_names(checkpoints);
  const DatasetSplit split = load_split(config);
  const auto truth = load_volumes(config.data_dir(), split.test);

  std::vector<SegNetParams> params;
  for (const auto& [name, path] : checkpoints) {
    params.push_back(load_checkpoint(path));
    for (const auto& vol : truth) check_compatible(params.back(), vol, name);
  }

  std::vector<ModelPrediction> models(checkpoints.size());
  std::vector<Tensor> masks(checkpoints.size() * truth.size());
  parallel_for(masks.size(), config.threads, [&](std::size_t k) {
    const std::size_t m = k / truth.size(), v = k % truth.size();
    const OctVolume& vol = truth[v];
    const Tensor scores = predict_scores(params[m], vol);
    write_score_volume(vol, scores, config.out_dir() / "scores" / checkpoints[m].first / vol.id);
    masks[k] = binarize_volume(scores, config.eval.scope);
  });
  for (std::size_t m = 0; m < checkpoints.size(); ++m) {
    models[m].name = checkpoints[m].first;
    for (std::size_t v = 0; v < truth.size(); ++v) models[m].masks[truth[v].id] = masks[m * truth.size() + v];
  }
  return finish_report(config, models, truth);
}

EvalReport cmd_report(const ExperimentConfig& config, const std::vector<NamedPath>& score_roots) {
  validate_config(config);
  check_unique_names(score_roots);
  const DatasetSplit split = load_split(config);
  const auto truth = load_volumes(config.data_dir(), split.test);
  std::vector<ModelPrediction> models;
  for (const auto& [name, root] : score_roots) {
    ModelPrediction m;
    m.name = name;
    for (const auto& vol : truth) {
      m.masks[vol.id] = binarize_volume(read_score_volume(root / vol.id, vol), config.eval.scope);
    }
    models.push_back(std::move(m));
  }
  return finish_report(config, models, truth);
}

GradAudit cmd_gradcheck(std::uint64_t seed, const std::vector<GradCase>& extra) {
  std::vector<GradCase> cases = default_grad_cases(seed);
  cases.insert(cases.end(), extra.begin(), extra.end());
  return run_grad_audit(cases, 1e-5, 1e-4, seed);
}

}  // namespace atseg
