#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>

#include "clmr/tensor.hpp"

namespace clmr {

struct GradCheckOptions {
  /// 0 checks every element; otherwise at most this many seeded-random
  /// elements per parameter tensor.
  std::size_t max_coords_per_tensor = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares backward() against central differences (f(x+h) - f(x-h)) / 2h,
/// element-wise relative error |a-b| / max(|a|, |b|, 1e-8).
/// `loss_fn` must be deterministic and return a scalar built from `params`.
GradCheckReport finite_diff_report(const std::function<Tensor()>& loss_fn, std::span<Tensor> params, double step,
                                   const GradCheckOptions& options = {});

/// Maximum relative error of finite_diff_report.
double finite_diff_check(const std::function<Tensor()>& loss_fn, std::span<Tensor> params, double step,
                         const GradCheckOptions& options = {});

}  // namespace clmr
