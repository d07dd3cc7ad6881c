#pragma once

#include <functional>
#include <string>
#include <vector>

namespace nlte {

// Central finite differences with the default probe step used everywhere.
inline constexpr double kFdStep = 1e-5;

using ScalarFn = std::function<double(const std::vector<double>&)>;

std::vector<double> numeric_gradient(const ScalarFn& fn, std::vector<double> x,
                                     double step = kFdStep);

// Componentwise relative error. Components where both magnitudes sit below
// `floor` are treated as agreeing: finite differences cannot resolve them.
double rel_error(double analytic, double numeric, double floor = 1e-7);
double max_rel_error(const std::vector<double>& analytic,
                     const std::vector<double>& numeric, double floor = 1e-7);

struct GradCheckCase {
  std::string name;
  double max_rel_err = 0.0;
  bool pass = false;
};

// Finite-difference sweep over every differentiable path in the library:
// net forward/backward, softmax cross-entropy, binary cross-entropy,
// the entropy-aware discriminator concat path, the relation-regularizer
// path, and the gradient-reversal path. `instances` random cases per op.
std::vector<GradCheckCase> run_gradient_checks(std::uint64_t seed, int instances,
                                               double tolerance = 1e-4);

}  // namespace nlte
