#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cosynorm/autodiff.hpp"
#include "cosynorm/tensor.hpp"

namespace cosynorm {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

/// Central-difference check of `analytic` against f at x.
/// Relative error per coordinate: |a - c| / max(|a|, |c|, 1e-8).
/// Throws std::domain_error if f is non-finite anywhere it is evaluated.
GradCheckReport finite_diff_check(const std::function<double(std::span<const double>)>& f,
                                  std::span<const double> x, std::span<const double> analytic,
                                  double eps);

/// Same check over every parameter in `store`, with the analytic gradient
/// obtained from one backward pass of `loss`.
GradCheckReport finite_diff_check(ParameterStore<double>& store,
                                  const std::function<Var<double>(Tape<double>&)>& loss,
                                  double eps);

/// Overwrites every parameter with uniform(-bound, bound) draws so that
/// zero-initialized gates and heads do not mask gradient paths in checks.
void randomize_parameters(ParameterStore<double>& store, std::uint64_t seed, double bound);

}  // namespace cosynorm
