#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "atseg/commands.hpp"
#include "atseg/errors.hpp"

namespace {

using atseg::NamedPath;

std::vector<NamedPath> parse_named(const std::vector<std::string>& items, const std::string& flag) {
  std::vector<NamedPath> out;
  for (const auto& item : items) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == item.size()) {
      throw atseg::ParameterError(flag + " expects NAME=PATH, got '" + item + "'");
    }
    out.emplace_back(item.substr(0, eq), item.substr(eq + 1));
  }
  return out;
}

template <typename T>
void override_with(const std::optional<T>& flag, T& target) {
  if (flag) target = *flag;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Amplified-target loss experiments on synthetic OCT volumes"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> threads;
  std::optional<std::string> data;
  app.add_option("--config", config_path, "JSON experiment configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Global seed");
  app.add_option("--out", out, "Output directory");
  app.add_option("--threads", threads, "Worker threads (default 1)")->check(CLI::PositiveNumber);
  app.add_option("--data", data, "Dataset directory (default <out>/data)");

  auto* generate = app.add_subcommand("generate", "Generate the synthetic dataset");
  std::optional<std::size_t> n_train, n_val, n_test;
  generate->add_option("--n-train", n_train, "Training volumes");
  generate->add_option("--n-val", n_val, "Validation volumes");
  generate->add_option("--n-test", n_test, "Test volumes");

  auto* train = app.add_subcommand("train", "Train one model");
  std::optional<std::string> preset, name;
  std::optional<std::size_t> max_epochs;
  std::optional<double> omega, lambda1, lambda2, lr;
  train->add_option("--preset", preset, "Loss preset: ce, mse, ce_at, mse_at");
  train->add_option("--name", name, "Model name (default: the preset)");
  train->add_option("--max-epochs", max_epochs, "Epoch budget");
  train->add_option("--lr", lr, "Initial learning rate");
  train->add_option("--omega", omega, "Amplification factor");
  train->add_option("--lambda1", lambda1, "Weight of the plain term");
  train->add_option("--lambda2", lambda2, "Weight of the amplified term");

  auto* sweep = app.add_subcommand("sweep", "Grid search over omega, lambda1, lambda2");
  std::optional<std::string> sweep_base;
  std::vector<double> omegas, l1s, l2s;
  std::optional<std::size_t> sweep_epochs;
  sweep->add_option("--base", sweep_base, "Base loss: ce or mse");
  sweep->add_option("--omegas", omegas, "Amplification factors");
  sweep->add_option("--lambda1", l1s, "Plain-term weights");
  sweep->add_option("--lambda2", l2s, "Amplified-term weights");
  sweep->add_option("--max-epochs", sweep_epochs, "Epoch budget per grid point");

  auto* eval = app.add_subcommand("eval", "Evaluate checkpoints on the test volumes");
  std::vector<std::string> models;
  std::optional<std::string> scope;
  eval->add_option("--model", models, "NAME=CHECKPOINT, repeatable")->required();
  eval->add_option("--scope", scope, "Otsu scope: volume or bscan");

  auto* report = app.add_subcommand("report", "Report from score directories");
  std::vector<std::string> scores;
  report->add_option("--scores", scores, "NAME=DIR, repeatable")->required();
  report->add_option("--scope", scope, "Otsu scope: volume or bscan");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient audit");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    atseg::ExperimentConfig config = config_path.empty() ? atseg::ExperimentConfig{} : atseg::load_config(config_path);
    override_with(seed, config.seed);
    override_with(out, config.out);
    override_with(threads, config.threads);
    override_with(data, config.data_root);
    override_with(n_train, config.data.n_train);
    override_with(n_val, config.data.n_val);
    override_with(n_test, config.data.n_test);
    if (scope && *scope != "bscan" && *scope != "volume") throw atseg::ParameterError("--scope must be volume or bscan");
    if (scope) config.eval.scope = *scope == "bscan" ? atseg::ThresholdScope::bscan : atseg::ThresholdScope::volume;

    if (generate->parsed()) {
      const auto result = atseg::cmd_generate(config);
      std::cout << result.manifest.string() << "\n";
    } else if (train->parsed()) {
      if (preset) config.loss = atseg::loss_preset(*preset);
      const bool custom = omega || lambda1 || lambda2;
      override_with(omega, config.loss.omega);
      override_with(lambda1, config.loss.lambda1);
      override_with(lambda2, config.loss.lambda2);
      if (custom) {
        config.loss.preset = "custom";
        config.loss.amplified = true;
      }
      override_with(max_epochs, config.train.max_epochs);
      override_with(lr, config.train.lr);
      const auto result = atseg::cmd_train(config, name.value_or(config.loss.preset));
      std::cout << "checkpoint " << result.checkpoint.string() << "\n"
                << "log " << result.log_csv.string() << "\n"
                << "best epoch " << result.result.log.best_epoch << ", stopped after epoch "
                << result.result.log.stop_epoch << "\n";
    } else if (sweep->parsed()) {
      if (sweep_base) config.sweep.base = atseg::base_loss_from_string(*sweep_base);
      if (!omegas.empty()) config.sweep.omegas = omegas;
      if (!l1s.empty()) config.sweep.lambda1 = l1s;
      if (!l2s.empty()) config.sweep.lambda2 = l2s;
      if (sweep_epochs) config.sweep.max_epochs = sweep_epochs;
      const auto result = atseg::cmd_sweep(config);
      const auto& b = result.points[result.best];
      std::cout << "table " << result.table.string() << "\n"
                << "best omega=" << b.omega << " lambda1=" << b.lambda1 << " lambda2=" << b.lambda2
                << " val_dice=" << b.val_dice << "\n";
    } else if (eval->parsed()) {
      const auto result = atseg::cmd_eval(config, parse_named(models, "--model"));
      std::cout << result.table();
    } else if (report->parsed()) {
      const auto result = atseg::cmd_report(config, parse_named(scores, "--scores"));
      std::cout << result.table();
    } else if (gradcheck->parsed()) {
      const auto audit = atseg::cmd_gradcheck(config.seed);
      std::cout << audit.report();
      if (!audit.passed()) {
        std::cerr << "gradient check failed: " << audit.failures() << "\n";
        return 1;
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
