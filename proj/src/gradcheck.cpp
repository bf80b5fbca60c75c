#include "atseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>

#include "atseg/errors.hpp"
#include "atseg/losses.hpp"
#include "atseg/ops.hpp"
#include "atseg/segnet.hpp"

namespace atseg {

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo, double hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

GradCaseResult check_gradient(const GradCase& c, double step, double tolerance, std::uint64_t seed) {
  GradCaseResult result;
  result.name = c.name;

  std::vector<Tensor> inputs = c.inputs;
  for (auto& t : inputs) t.zero_grad();
  {
    Tape tape;
    const Tensor loss = c.objective(tape, inputs);
    tape.backward(loss);
  }

  // Flat (tensor, element) index of every probe.
  std::vector<std::pair<std::size_t, std::size_t>> probes;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    if (!inputs[t].requires_grad()) continue;
    for (std::size_t i = 0; i < inputs[t].numel(); ++i) probes.emplace_back(t, i);
  }
  if (c.sample > 0 && c.sample < probes.size()) {
    std::mt19937_64 rng(seed);
    std::shuffle(probes.begin(), probes.end(), rng);
    probes.resize(c.sample);
    std::sort(probes.begin(), probes.end());
  }

  auto evaluate = [&]() {
    Tape tape;
    tape.set_recording(false);
    return c.objective(tape, inputs).item();
  };

  for (const auto& [t, i] : probes) {
    double& v = inputs[t].data()[i];
    const double saved = v;
    v = saved + step;
    const double plus = evaluate();
    v = saved - step;
    const double minus = evaluate();
    v = saved;
    const double numeric = (plus - minus) / (2.0 * step);
    const double analytic = inputs[t].has_grad() ? inputs[t].grad()[i] : 0.0;
    const double err = std::fabs(analytic - numeric) / std::max(1.0, std::fabs(numeric));
    result.max_rel_error = std::max(result.max_rel_error, err);
  }
  result.probed = probes.size();
  result.passed = result.max_rel_error <= tolerance && std::isfinite(result.max_rel_error);
  for (auto& t : inputs) t.zero_grad();
  return result;
}

bool GradAudit::passed() const {
  return std::all_of(cases.begin(), cases.end(), [](const auto& c) { return c.passed; });
}

std::string GradAudit::failures() const {
  std::string out;
  for (const auto& c : cases) {
    if (!c.passed) out += (out.empty() ? "" : ", ") + c.name;
  }
  return out;
}

std::string GradAudit::report() const {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-28s %8s %14s  %s\n", "operation", "probed", "max_rel_error", "status");
  os << line;
  for (const auto& c : cases) {
    std::snprintf(line, sizeof line, "%-28s %8zu %14.3e  %s\n", c.name.c_str(), c.probed, c.max_rel_error,
                  c.passed ? "PASS" : "FAIL");
    os << line;
  }
  std::snprintf(line, sizeof line, "tolerance %.1e at step %.1e: %s\n", tolerance, step, passed() ? "PASS" : "FAIL");
  os << line;
  return os.str();
}

GradAudit run_grad_audit(const std::vector<GradCase>& cases, double step, double tolerance, std::uint64_t seed) {
  GradAudit audit;
  audit.step = step;
  audit.tolerance = tolerance;
  for (std::size_t i = 0; i < cases.size(); ++i) audit.cases.push_back(check_gradient(cases[i], step, tolerance, seed + i));
  return audit;
}

namespace {

// Objective sum(op(inputs) * R) with a fixed random R, so every output
// element contributes a distinct weight.
GradCase projected(std::string name, std::vector<Tensor> inputs, Shape out_shape, std::uint64_t seed,
                   std::function<Tensor(Tape&, const std::vector<Tensor>&)> op) {
  Tensor r = random_tensor(std::move(out_shape), seed);
  r.set_requires_grad(false);
  GradCase c;
  c.name = std::move(name);
  c.inputs = std::move(inputs);
  c.objective = [r, op](Tape& tape, const std::vector<Tensor>& in) { return ops::sum(tape, ops::mul(tape, op(tape, in), r)); };
  return c;
}

Tensor away_from_zero(Tensor t, double margin) {
  for (double& v : t.data()) {
    if (std::fabs(v) < margin) v = v < 0 ? v - margin : v + margin;
  }
  return t;
}

// Distinct values so that no 2x2 window holds a near-tie.
Tensor distinct_values(Shape shape, std::uint64_t seed) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  std::vector<double> v(t.numel());
  std::iota(v.begin(), v.end(), 0.0);
  std::mt19937_64 rng(seed);
  std::shuffle(v.begin(), v.end(), rng);
  for (std::size_t i = 0; i < v.size(); ++i) t.data()[i] = -2.0 + 4.0 * v[i] / static_cast<double>(v.size());
  return t;
}

Tensor one_hot_target(std::size_t n, std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.4);
  Tensor y = Tensor::zeros({n, 2, h, w});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < h * w; ++p) {
      const double fg = coin(rng) ? 1.0 : 0.0;
      y.data()[(i * 2) * h * w + p] = 1.0 - fg;
      y.data()[(i * 2 + 1) * h * w + p] = fg;
    }
  }
  return y;
}

AtLossSpec two_term(BaseLoss base, double omega, double lambda1, double lambda2, std::size_t h, std::size_t w) {
  AtLossSpec spec;
  spec.terms.push_back({lambda1, IdentityTransform{}, base});
  spec.terms.push_back({lambda2, build_weights(w, h, omega, w / 4, 3 * w / 4, static_cast<double>(w) / 16.0), base});
  return spec;
}

}  // namespace

std::vector<GradCase> default_grad_cases(std::uint64_t seed) {
  std::vector<GradCase> cases;
  std::uint64_t s = seed * 1000;
  auto next = [&s] { return ++s; };

  cases.push_back(projected("conv2d", {random_tensor({2, 2, 5, 5}, next()), random_tensor({3, 2, 3, 3}, next()),
                                       random_tensor({3}, next())},
                            {2, 3, 5, 5}, next(),
                            [](Tape& t, const auto& in) { return ops::conv2d(t, in[0], in[1], in[2], 1); }));
  cases.push_back(projected("conv2d_k5_pad2", {random_tensor({1, 2, 6, 7}, next()), random_tensor({2, 2, 5, 5}, next()),
                                               random_tensor({2}, next())},
                            {1, 2, 6, 7}, next(),
                            [](Tape& t, const auto& in) { return ops::conv2d(t, in[0], in[1], in[2], 2); }));
  cases.push_back(projected("maxpool2", {distinct_values({2, 2, 6, 8}, next())}, {2, 2, 3, 4}, next(),
                            [](Tape& t, const auto& in) { return ops::maxpool2(t, in[0]); }));
  cases.push_back(projected("upsample_nearest2", {random_tensor({1, 2, 3, 4}, next())}, {1, 2, 6, 8}, next(),
                            [](Tape& t, const auto& in) { return ops::upsample_nearest2(t, in[0]); }));
  cases.push_back(projected("relu", {away_from_zero(random_tensor({2, 3, 4, 4}, next()), 1e-3)}, {2, 3, 4, 4}, next(),
                            [](Tape& t, const auto& in) { return ops::relu(t, in[0]); }));
  cases.push_back(projected("concat_channels", {random_tensor({2, 2, 3, 3}, next()), random_tensor({2, 1, 3, 3}, next())},
                            {2, 3, 3, 3}, next(),
                            [](Tape& t, const auto& in) { return ops::concat_channels(t, in[0], in[1]); }));
  cases.push_back(projected("add", {random_tensor({2, 5}, next()), random_tensor({2, 5}, next())}, {2, 5}, next(),
                            [](Tape& t, const auto& in) { return ops::add(t, in[0], in[1]); }));
  cases.push_back(projected("sub", {random_tensor({2, 5}, next()), random_tensor({2, 5}, next())}, {2, 5}, next(),
                            [](Tape& t, const auto& in) { return ops::sub(t, in[0], in[1]); }));
  cases.push_back(projected("mul", {random_tensor({2, 5}, next()), random_tensor({2, 5}, next())}, {2, 5}, next(),
                            [](Tape& t, const auto& in) { return ops::mul(t, in[0], in[1]); }));
  cases.push_back(projected("scale", {random_tensor({3, 4}, next())}, {3, 4}, next(),
                            [](Tape& t, const auto& in) { return ops::scale(t, in[0], -1.75); }));
  cases.push_back(projected("add_scalar", {random_tensor({3, 4}, next())}, {3, 4}, next(),
                            [](Tape& t, const auto& in) { return ops::add_scalar(t, in[0], 0.3); }));
  cases.push_back(projected("log", {random_tensor({3, 4}, next(), 0.25, 2.0)}, {3, 4}, next(),
                            [](Tape& t, const auto& in) { return ops::log(t, in[0]); }));
  cases.push_back(projected("mul_spatial", {random_tensor({2, 2, 3, 4}, next()), random_tensor({3, 4}, next())},
                            {2, 2, 3, 4}, next(),
                            [](Tape& t, const auto& in) { return ops::mul_spatial(t, in[0], in[1]); }));
  {
    GradCase c;
    c.name = "sum";
    c.inputs = {random_tensor({3, 4}, next())};
    c.objective = [](Tape& t, const auto& in) { return ops::sum(t, ops::mul(t, in[0], in[0])); };
    cases.push_back(c);
  }
  {
    GradCase c;
    c.name = "mean";
    c.inputs = {random_tensor({3, 4}, next())};
    c.objective = [](Tape& t, const auto& in) { return ops::mean(t, ops::mul(t, in[0], in[0])); };
    cases.push_back(c);
  }
  cases.push_back(projected("softmax_channels", {random_tensor({2, 3, 3, 4}, next())}, {2, 3, 3, 4}, next(),
                            [](Tape& t, const auto& in) { return ops::softmax_channels(t, in[0]); }));
  {
    const AmplificationWeights w = build_weights(32, 16, 8.0, 8, 24, 2.0);
    cases.push_back(projected("amplification_transform", {random_tensor({1, 2, 16, 32}, next())}, {1, 2, 16, 32},
                              next(), [w](Tape& t, const auto& in) { return apply_transform(t, w, in[0]); }));
  }
  {
    Tensor y = random_tensor({1, 2, 4, 6}, next());
    y.set_requires_grad(false);
    GradCase c;
    c.name = "mse";
    c.inputs = {random_tensor({1, 2, 4, 6}, next())};
    c.objective = [y](Tape& t, const auto& in) { return mse(t, y, in[0]); };
    cases.push_back(c);
  }
  {
    const Tensor y = one_hot_target(2, 4, 6, next());
    GradCase c;
    c.name = "ce";
    c.inputs = {random_tensor({2, 2, 4, 6}, next())};
    c.objective = [y](Tape& t, const auto& in) { return ce(t, y, ops::softmax_channels(t, in[0])); };
    cases.push_back(c);
  }
  for (const auto& [name, base, omega, l1, l2] :
       {std::tuple{"at_loss_ce", BaseLoss::ce, 8.0, 1.0, 8.0}, std::tuple{"at_loss_mse", BaseLoss::mse, 32.0, 1.0, 1.0}}) {
    const Tensor y = one_hot_target(1, 16, 32, next());
    const AtLossSpec spec = two_term(base, omega, l1, l2, 16, 32);
    GradCase c;
    c.name = name;
    c.inputs = {random_tensor({1, 2, 16, 32}, next())};
    c.objective = [y, spec](Tape& t, const auto& in) { return at_loss(t, spec, y, ops::softmax_channels(t, in[0])); };
    cases.push_back(c);
  }
  {
    const SegNetParams params = init_segnet(static_cast<std::uint32_t>(next()), 4);
    Tensor x = random_tensor({1, 1, 16, 32}, next(), 0.0, 1.0);
    x.set_requires_grad(false);
    const Tensor y = one_hot_target(1, 16, 32, next());
    const AtLossSpec spec = two_term(BaseLoss::ce, 8.0, 1.0, 8.0, 16, 32);
    const std::uint32_t levels = params.levels;
    const std::uint32_t base = params.base_channels;
    GradCase c;
    c.name = "segnet_at_loss_end_to_end";
    c.inputs = params.tensors;
    c.sample = 50;
    c.objective = [x, y, spec, levels, base](Tape& t, const std::vector<Tensor>& in) {
      SegNetParams p;
      p.levels = levels;
      p.base_channels = base;
      p.tensors = in;
      return at_loss(t, spec, y, segnet_forward(t, p, x));
    };
    cases.push_back(c);
  }
  return cases;
}

}  // namespace atseg
