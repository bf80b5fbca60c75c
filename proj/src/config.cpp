#include "atseg/config.hpp"

#include <json.hpp>

#include "atseg/errors.hpp"
#include "binary_io.hpp"

namespace atseg {

using json = nlohmann::ordered_json;

LossConfig loss_preset(const std::string& name) {
  LossConfig c;
  c.preset = name;
  if (name == "ce" || name == "mse") {
    c.base = base_loss_from_string(name);
    c.amplified = false;
    c.omega = 1.0;
    c.lambda1 = 1.0;
    c.lambda2 = 0.0;
  } else if (name == "ce_at") {
    c.base = BaseLoss::ce;
    c.amplified = true;
    c.omega = 8.0;
    c.lambda1 = 1.0;
    c.lambda2 = 8.0;
  } else if (name == "mse_at") {
    c.base = BaseLoss::mse;
    c.amplified = true;
    c.omega = 32.0;
    c.lambda1 = 1.0;
    c.lambda2 = 1.0;
  } else {
    throw ParameterError("unknown loss preset '" + name + "' (expected ce, mse, ce_at or mse_at)");
  }
  return c;
}

std::vector<std::string> preset_names() { return {"ce", "mse", "ce_at", "mse_at"}; }

AtLossSpec resolve_loss(const LossConfig& loss, std::size_t width, std::size_t height) {
  AtLossSpec spec;
  spec.terms.push_back({loss.lambda1, IdentityTransform{}, loss.base});
  if (loss.amplified) {
    const double sigma = loss.sigma.value_or(static_cast<double>(width) / 16.0);
    const std::size_t i0 = loss.i0.value_or(width / 4);
    const std::size_t i1 = loss.i1.value_or(3 * width / 4);
    spec.terms.push_back({loss.lambda2, build_weights(width, height, loss.omega, i0, i1, sigma), loss.base});
  }
  spec.validate();
  return spec;
}

std::filesystem::path ExperimentConfig::data_dir() const {
  return data_root.empty() ? std::filesystem::path(out) / "data" : std::filesystem::path(data_root);
}

namespace {

ThresholdScope scope_from_string(const std::string& s) {
  if (s == "volume") return ThresholdScope::volume;
  if (s == "bscan") return ThresholdScope::bscan;
  throw ParameterError("unknown threshold scope '" + s + "' (expected volume or bscan)");
}

std::string to_string(ThresholdScope s) { return s == ThresholdScope::volume ? "volume" : "bscan"; }

template <typename T>
T read(const json& j, const std::string& path) {
  try {
    return j.get<T>();
  } catch (const json::exception&) {
    throw ParameterError("config: '" + path + "' has the wrong type");
  }
}

template <typename T>
std::optional<T> read_optional(const json& j, const std::string& path) {
  if (j.is_null()) return std::nullopt;
  return read<T>(j, path);
}

void require_object(const json& j, const std::string& path) {
  if (!j.is_object()) throw ParameterError("config: '" + path + "' must be an object");
}

[[noreturn]] void unknown_key(const std::string& path) { throw ParameterError("config: unknown key '" + path + "'"); }

template <typename T>
json optional_json(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

json loss_json(const LossConfig& l) {
  return {{"preset", l.preset}, {"base", to_string(l.base)}, {"amplified", l.amplified}, {"omega", l.omega},
          {"lambda1", l.lambda1}, {"lambda2", l.lambda2}, {"sigma", optional_json(l.sigma)},
          {"i0", optional_json(l.i0)}, {"i1", optional_json(l.i1)}};
}

bool same_objective(const LossConfig& a, const LossConfig& b) {
  return a.base == b.base && a.amplified == b.amplified && a.omega == b.omega && a.lambda1 == b.lambda1 &&
         a.lambda2 == b.lambda2;
}

LossConfig parse_loss(const json& j) {
  require_object(j, "loss");
  LossConfig l;
  if (j.contains("preset")) {
    const auto name = read<std::string>(j["preset"], "loss.preset");
    if (name != "custom") l = loss_preset(name);
    l.preset = name;
  }
  for (const auto& [key, v] : j.items()) {
    const std::string path = "loss." + key;
    if (key == "preset") continue;
    if (key == "base") l.base = base_loss_from_string(read<std::string>(v, path));
    else if (key == "amplified") l.amplified = read<bool>(v, path);
    else if (key == "omega") l.omega = read<double>(v, path);
    else if (key == "lambda1") l.lambda1 = read<double>(v, path);
    else if (key == "lambda2") l.lambda2 = read<double>(v, path);
    else if (key == "sigma") l.sigma = read_optional<double>(v, path);
    else if (key == "i0") l.i0 = read_optional<std::size_t>(v, path);
    else if (key == "i1") l.i1 = read_optional<std::size_t>(v, path);
    else unknown_key(path);
  }
  if (l.preset != "custom" && !same_objective(l, loss_preset(l.preset))) l.preset = "custom";
  return l;
}

void parse_data(const json& j, ExperimentConfig& c) {
  require_object(j, "data");
  for (const auto& [key, v] : j.items()) {
    const std::string path = "data." + key;
    if (key == "root") c.data_root = read<std::string>(v, path);
    else if (key == "n_train") c.data.n_train = read<std::size_t>(v, path);
    else if (key == "n_val") c.data.n_val = read<std::size_t>(v, path);
    else if (key == "n_test") c.data.n_test = read<std::size_t>(v, path);
    else if (key == "n_volumes") c.data.n_volumes = read<std::size_t>(v, path);
    else if (key == "bscans") c.data.dims.bscans = read<std::size_t>(v, path);
    else if (key == "height") c.data.dims.height = read<std::size_t>(v, path);
    else if (key == "width") c.data.dims.width = read<std::size_t>(v, path);
    else if (key == "extent_mm") c.data.dims.extent_mm = read<double>(v, path);
    else if (key == "severity_buckets") {
      if (!v.is_array()) throw ParameterError("config: '" + path + "' must be an array");
      c.data.buckets.clear();
      for (const auto& b : v) {
        require_object(b, path + "[]");
        SeverityBucket bucket;
        for (const auto& [bk, bv] : b.items()) {
          const std::string bpath = path + "[]." + bk;
          if (bk == "name") bucket.name = read<std::string>(bv, bpath);
          else if (bk == "low") bucket.low = read<double>(bv, bpath);
          else if (bk == "high") bucket.high = read<double>(bv, bpath);
          else if (bk == "proportion") bucket.proportion = read<double>(bv, bpath);
          else unknown_key(bpath);
        }
        c.data.buckets.push_back(bucket);
      }
    } else unknown_key(path);
  }
}

void parse_train(const json& j, TrainConfig& t) {
  require_object(j, "train");
  for (const auto& [key, v] : j.items()) {
    const std::string path = "train." + key;
    if (key == "lr") t.lr = read<double>(v, path);
    else if (key == "batch_size") t.batch_size = read<std::size_t>(v, path);
    else if (key == "patience_stop") t.patience_stop = read<std::size_t>(v, path);
    else if (key == "patience_lr") t.patience_lr = read<std::size_t>(v, path);
    else if (key == "lr_factor") t.lr_factor = read<double>(v, path);
    else if (key == "flip_prob") t.flip_prob = read<double>(v, path);
    else if (key == "max_epochs") t.max_epochs = read<std::size_t>(v, path);
    else if (key == "base_channels") t.base_channels = read<std::uint32_t>(v, path);
    else if (key == "adam") {
      require_object(v, path);
      for (const auto& [ak, av] : v.items()) {
        const std::string apath = path + "." + ak;
        if (ak == "beta1") t.adam.beta1 = read<double>(av, apath);
        else if (ak == "beta2") t.adam.beta2 = read<double>(av, apath);
        else if (ak == "epsilon") t.adam.epsilon = read<double>(av, apath);
        else unknown_key(apath);
      }
    } else unknown_key(path);
  }
}

void parse_eval(const json& j, EvalConfig& e) {
  require_object(j, "eval");
  for (const auto& [key, v] : j.items()) {
    const std::string path = "eval." + key;
    if (key == "regions") {
      e.regions.clear();
      for (const auto& name : read<std::vector<std::string>>(v, path)) e.regions.push_back(region_from_key(name));
    } else if (key == "threshold_scope") {
      e.scope = scope_from_string(read<std::string>(v, path));
    } else unknown_key(path);
  }
}

void parse_sweep(const json& j, SweepConfig& s) {
  require_object(j, "sweep");
  for (const auto& [key, v] : j.items()) {
    const std::string path = "sweep." + key;
    if (key == "base") s.base = base_loss_from_string(read<std::string>(v, path));
    else if (key == "omegas") s.omegas = read<std::vector<double>>(v, path);
    else if (key == "lambda1") s.lambda1 = read<std::vector<double>>(v, path);
    else if (key == "lambda2") s.lambda2 = read<std::vector<double>>(v, path);
    else if (key == "max_epochs") s.max_epochs = read_optional<std::size_t>(v, path);
    else unknown_key(path);
  }
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("config: invalid JSON: ") + e.what(), e.byte);
  }
  require_object(j, "<root>");
  ExperimentConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "seed") c.seed = read<std::uint64_t>(v, key);
    else if (key == "threads") c.threads = read<std::size_t>(v, key);
    else if (key == "out") c.out = read<std::string>(v, key);
    else if (key == "data") parse_data(v, c);
    else if (key == "loss") c.loss = parse_loss(v);
    else if (key == "train") parse_train(v, c.train);
    else if (key == "eval") parse_eval(v, c.eval);
    else if (key == "sweep") parse_sweep(v, c.sweep);
    else unknown_key(key);
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) { return parse_config(binio::read_text(path)); }

std::string serialize_config(const ExperimentConfig& c) {
  json buckets = json::array();
  for (const auto& b : c.data.buckets) {
    buckets.push_back({{"name", b.name}, {"low", b.low}, {"high", b.high}, {"proportion", b.proportion}});
  }
  json regions = json::array();
  for (Region r : c.eval.regions) regions.push_back(region_key(r));
  const TrainConfig& t = c.train;
  json j = {
      {"seed", c.seed},
      {"threads", c.threads},
      {"out", c.out},
      {"data",
       {{"root", c.data_root},
        {"n_train", c.data.n_train},
        {"n_val", c.data.n_val},
        {"n_test", c.data.n_test},
        {"n_volumes", c.data.n_volumes},
        {"bscans", c.data.dims.bscans},
        {"height", c.data.dims.height},
        {"width", c.data.dims.width},
        {"extent_mm", c.data.dims.extent_mm},
        {"severity_buckets", buckets}}},
      {"loss", loss_json(c.loss)},
      {"train",
       {{"lr", t.lr},
        {"batch_size", t.batch_size},
        {"patience_stop", t.patience_stop},
        {"patience_lr", t.patience_lr},
        {"lr_factor", t.lr_factor},
        {"flip_prob", t.flip_prob},
        {"max_epochs", t.max_epochs},
        {"base_channels", t.base_channels},
        {"adam", {{"beta1", t.adam.beta1}, {"beta2", t.adam.beta2}, {"epsilon", t.adam.epsilon}}}}},
      {"eval", {{"regions", regions}, {"threshold_scope", to_string(c.eval.scope)}}},
      {"sweep",
       {{"base", to_string(c.sweep.base)},
        {"omegas", c.sweep.omegas},
        {"lambda1", c.sweep.lambda1},
        {"lambda2", c.sweep.lambda2},
        {"max_epochs", optional_json(c.sweep.max_epochs)}}},
  };
  return j.dump(2) + "\n";
}

TrainConfig resolve_train(const ExperimentConfig& config) {
  TrainConfig t = config.train;
  t.loss = resolve_loss(config.loss, config.data.dims.width, config.data.dims.height);
  t.seed = config.seed;
  t.validate();
  return t;
}

void validate_config(const ExperimentConfig& config) {
  if (config.threads == 0) throw ParameterError("config: threads must be at least 1");
  if (config.out.empty()) throw ParameterError("config: out must not be empty");
  const VolumeDims& d = config.data.dims;
  if (d.bscans == 0 || d.height == 0 || d.width == 0) throw ParameterError("config: data dimensions must be positive");
  if (d.height % 4 != 0 || d.width % 4 != 0) {
    throw ParameterError("config: data height and width must be multiples of 4 for the network");
  }
  if (!(d.extent_mm > 0.0)) throw ParameterError("config: data.extent_mm must be positive");
  if (config.eval.regions.empty()) throw ParameterError("config: eval.regions must not be empty");
  resolve_train(config);
}

}  // namespace atseg
