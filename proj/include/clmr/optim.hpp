#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "clmr/schedule.hpp"

namespace clmr {

enum class OptimizerKind { Sgd, Momentum, Nesterov, AdaGrad, Adam, Clr, Clmr };

std::string_view to_string(OptimizerKind kind);
/// Accepts the CLI spellings: sgd, momentum, nesterov, adagrad, adam, clr, clmr.
OptimizerKind parse_optimizer_kind(std::string_view name);

/// True for the kinds that differentiate at the momentum-shifted point.
bool uses_lookahead(OptimizerKind kind);

struct HyperParams {
  double alpha = 0.01;    // learning rate
  double beta = 0.9;      // momentum rate
  double beta1 = 0.9;     // Adam first-moment decay
  double beta2 = 0.999;   // Adam second-moment decay
  double epsilon = 1e-8;

  void validate() const;
};

/// Per-parameter auxiliary buffers. Only the buffers the kind needs are
/// allocated; each allocated buffer has the size of the parameter vector.
struct OptimizerState {
  OptimizerKind kind = OptimizerKind::Sgd;
  std::vector<double> prev_delta;     // theta_{i-1} - theta_{i-2}
  std::vector<double> grad_sq_accum;  // diagonal of G_i
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step_count = 0;
  std::size_t param_size = 0;

  static OptimizerState zeros(OptimizerKind kind, std::size_t size);
  std::size_t size() const { return param_size; }
};

/// Learning and momentum rate applied at one iteration.
struct Rates {
  double lr = 0.0;
  double mr = 0.0;
};

void sgd_step(std::span<double> params, std::span<const double> grad, const HyperParams& hp);

/// Heavy-ball update theta_i = theta_{i-1} - alpha*grad + beta*prev_delta.
void momentum_step(std::span<double> params, std::span<const double> grad, OptimizerState& state,
                   const HyperParams& hp);

/// theta + beta * prev_delta: where a Nesterov-family update expects its gradient.
std::vector<double> lookahead_point(std::span<const double> params, const OptimizerState& state, double beta);

/// Nesterov update. The caller must pass the gradient evaluated at
/// lookahead_point(params, state, hp.beta); this cannot be checked here.
void nesterov_step(std::span<double> params, std::span<const double> grad_at_lookahead, OptimizerState& state,
                   const HyperParams& hp);

void adagrad_step(std::span<double> params, std::span<const double> grad, OptimizerState& state,
                  const HyperParams& hp);

/// Bias-corrected Adam.
void adam_step(std::span<double> params, std::span<const double> grad, OptimizerState& state,
               const HyperParams& hp);

/// Rates a cyclic kind applies at `iteration`: CLMR takes both from the
/// waves, CLR takes the LR wave and `fixed_beta`.
Rates cyclic_rates(OptimizerKind kind, std::int64_t iteration, const CycleConfig& cycle, double fixed_beta);

/// Nesterov step with alpha = lr_at(i) and beta = mr_at(i) (CLMR), or
/// beta = hp.beta (CLR). The gradient must be taken at the look-ahead point
/// built from the same beta, see cyclic_rates.
void clmr_step(std::span<double> params, std::span<const double> grad_at_lookahead, OptimizerState& state,
               const TrainClock& clock, const CycleConfig& cycle, const HyperParams& hp = {});

/// Drives one of the update rules over a list of parameter buffers.
///
/// For look-ahead kinds a step is split in two: `prepare` moves every
/// parameter to its look-ahead point (keeping a copy of the current value),
/// the caller evaluates gradients there, and `apply` restores the saved values
/// before updating. Other kinds treat `prepare` as a no-op.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, HyperParams hp, std::optional<CycleConfig> cycle,
            const std::vector<std::size_t>& param_sizes);

  OptimizerKind kind() const { return kind_; }
  const HyperParams& hyper_params() const { return hp_; }
  const std::optional<CycleConfig>& cycle() const { return cycle_; }

  /// Rates applied at `iteration`; constants (alpha, beta) for fixed-rate kinds.
  Rates rates_at(std::int64_t iteration) const;

  void prepare(std::span<const std::span<double>> params, std::int64_t iteration);
  void apply(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads,
             std::int64_t iteration);

  const std::vector<OptimizerState>& states() const { return states_; }

 private:
  OptimizerKind kind_;
  HyperParams hp_;
  std::optional<CycleConfig> cycle_;
  std::vector<OptimizerState> states_;
  std::vector<std::vector<double>> saved_;
  bool prepared_ = false;
};

}  // namespace clmr
