#include "clmr/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "clmr/error.hpp"

namespace clmr {

namespace {

double eval_loss(const std::function<Tensor()>& loss_fn) {
  NoGradGuard guard;
  const double v = loss_fn().item();
  if (!std::isfinite(v)) throw NumericError("loss is not finite during finite-difference evaluation");
  return v;
}

std::vector<std::size_t> pick_coords(std::size_t n, std::size_t limit, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (limit == 0 || limit >= n) return idx;
  for (std::size_t i = 0; i < limit; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(limit);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

GradCheckReport finite_diff_report(const std::function<Tensor()>& loss_fn, std::span<Tensor> params, double step,
                                   const GradCheckOptions& options) {
  if (!(step >= 1e-7 && step <= 1e-3)) throw ConfigError("finite-difference step must lie in [1e-7, 1e-3]");
  for (auto& p : params) p.zero_grad();
  GradCheckReport report;
  {
    Tensor loss = loss_fn();
    if (!std::isfinite(loss.item())) throw NumericError("loss is not finite");
    if (loss.requires_grad()) backward(loss);
  }
  std::mt19937_64 rng(options.seed);
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto values = params[t].values();
    std::vector<double> analytic(values.size(), 0.0);
    if (params[t].has_grad()) {
      const auto g = std::as_const(params[t]).grad();
      std::copy(g.begin(), g.end(), analytic.begin());
    }
    for (std::size_t k : pick_coords(values.size(), options.max_coords_per_tensor, rng)) {
      const double original = values[k];
      values[k] = original + step;
      const double up = eval_loss(loss_fn);
      values[k] = original - step;
      const double down = eval_loss(loss_fn);
      values[k] = original;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[k];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double err = std::abs(a - numeric) / denom;
      ++report.coords_checked;
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_tensor = t;
        report.worst_index = k;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

double finite_diff_check(const std::function<Tensor()>& loss_fn, std::span<Tensor> params, double step,
                         const GradCheckOptions& options) {
  return finite_diff_report(loss_fn, params, step, options).max_rel_error;
}

}  // namespace clmr
