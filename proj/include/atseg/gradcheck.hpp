#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "atseg/tensor.hpp"

namespace atseg {

/// A scalar objective of some leaf tensors, checked against central differences.
struct GradCase {
  std::string name;
  std::vector<Tensor> inputs;
  std::function<Tensor(Tape&, const std::vector<Tensor>&)> objective;
  /// Number of randomly chosen input elements to probe; 0 probes all of them.
  std::size_t sample = 0;
};

struct GradCaseResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t probed = 0;
  bool passed = false;
};

struct GradAudit {
  double step = 1e-5;
  double tolerance = 1e-4;
  std::vector<GradCaseResult> cases;

  bool passed() const;
  std::string failures() const;
  std::string report() const;
};

/// max over probed elements of |analytic - numeric| / max(1, |numeric|).
GradCaseResult check_gradient(const GradCase& c, double step = 1e-5, double tolerance = 1e-4,
                              std::uint64_t seed = 0);

/// Every differentiable primitive, the losses, the augmented-target
/// objectives and the end-to-end network objective.
std::vector<GradCase> default_grad_cases(std::uint64_t seed);

GradAudit run_grad_audit(const std::vector<GradCase>& cases, double step = 1e-5, double tolerance = 1e-4,
                         std::uint64_t seed = 0);

/// Tensor with entries uniform in [lo, hi), requiring a gradient.
Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -2.0, double hi = 2.0);

}  // namespace atseg
