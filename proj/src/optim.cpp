#include "clmr/optim.hpp"

#include <cmath>
#include <string>

#include "clmr/error.hpp"

namespace clmr {

namespace {

void check_sizes(std::span<const double> params, std::span<const double> grad) {
  if (params.size() != grad.size()) {
    throw ShapeError("gradient has " + std::to_string(grad.size()) + " elements, parameters have " +
                     std::to_string(params.size()));
  }
}

void check_state(const OptimizerState& state, std::size_t n, std::initializer_list<OptimizerKind> kinds) {
  bool ok = false;
  for (auto k : kinds) ok = ok || state.kind == k;
  if (!ok) throw ConfigError("optimizer state kind " + std::string(to_string(state.kind)) + " does not match update rule");
  if (state.size() != n) {
    throw ShapeError("optimizer state sized for " + std::to_string(state.size()) + " parameters, got " +
                     std::to_string(n));
  }
}

// theta_i = theta_{i-1} - lr * g + mr * prev_delta, shared by heavy-ball and Nesterov.
void momentum_update(std::span<double> params, std::span<const double> grad, std::vector<double>& prev_delta,
                     double lr, double mr) {
  for (std::size_t k = 0; k < params.size(); ++k) {
    const double delta = -lr * grad[k] + mr * prev_delta[k];
    params[k] += delta;
    prev_delta[k] = delta;
  }
}

}  // namespace

std::string_view to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::Sgd: return "sgd";
    case OptimizerKind::Momentum: return "momentum";
    case OptimizerKind::Nesterov: return "nesterov";
    case OptimizerKind::AdaGrad: return "adagrad";
    case OptimizerKind::Adam: return "adam";
    case OptimizerKind::Clr: return "clr";
    case OptimizerKind::Clmr: return "clmr";
  }
  return "unknown";
}

OptimizerKind parse_optimizer_kind(std::string_view name) {
  for (auto k : {OptimizerKind::Sgd, OptimizerKind::Momentum, OptimizerKind::Nesterov, OptimizerKind::AdaGrad,
                 OptimizerKind::Adam, OptimizerKind::Clr, OptimizerKind::Clmr}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown optimizer '" + std::string(name) + "'");
}

bool uses_lookahead(OptimizerKind kind) {
  return kind == OptimizerKind::Nesterov || kind == OptimizerKind::Clr || kind == OptimizerKind::Clmr;
}

void HyperParams::validate() const {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha must be finite and >= 0");
  if (!(beta >= 0.0 && beta < 1.0)) throw ConfigError("beta must lie in [0, 1)");
  if (!(beta1 > 0.0 && beta1 < 1.0)) throw ConfigError("beta1 must lie in (0, 1)");
  if (!(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("beta2 must lie in (0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("epsilon must be > 0");
}

OptimizerState OptimizerState::zeros(OptimizerKind kind, std::size_t size) {
  OptimizerState s;
  s.kind = kind;
  switch (kind) {
    case OptimizerKind::Momentum:
    case OptimizerKind::Nesterov:
    case OptimizerKind::Clr:
    case OptimizerKind::Clmr:
      s.prev_delta.assign(size, 0.0);
      break;
    case OptimizerKind::AdaGrad:
      s.grad_sq_accum.assign(size, 0.0);
      break;
    case OptimizerKind::Adam:
      s.m.assign(size, 0.0);
      s.v.assign(size, 0.0);
      break;
    case OptimizerKind::Sgd:
      break;
  }
  s.param_size = size;
  return s;
}

void sgd_step(std::span<double> params, std::span<const double> grad, const HyperParams& hp) {
  check_sizes(params, grad);
  for (std::size_t k = 0; k < params.size(); ++k) params[k] -= hp.alpha * grad[k];
}

void momentum_step(std::span<double> params, std::span<const double> grad, OptimizerState& state,
                   const HyperParams& hp) {
  check_sizes(params, grad);
  check_state(state, params.size(), {OptimizerKind::Momentum});
  momentum_update(params, grad, state.prev_delta, hp.alpha, hp.beta);
  ++state.step_count;
}

std::vector<double> lookahead_point(std::span<const double> params, const OptimizerState& state, double beta) {
  if (state.prev_delta.size() != params.size()) {
    throw ShapeError("look-ahead needs a prev_delta buffer matching the parameters");
  }
  std::vector<double> out(params.size());
  for (std::size_t k = 0; k < params.size(); ++k) out[k] = params[k] + beta * state.prev_delta[k];
  return out;
}

void nesterov_step(std::span<double> params, std::span<const double> grad_at_lookahead, OptimizerState& state,
                   const HyperParams& hp) {
  check_sizes(params, grad_at_lookahead);
  check_state(state, params.size(), {OptimizerKind::Nesterov, OptimizerKind::Clr, OptimizerKind::Clmr});
  momentum_update(params, grad_at_lookahead, state.prev_delta, hp.alpha, hp.beta);
  ++state.step_count;
}

void adagrad_step(std::span<double> params, std::span<const double> grad, OptimizerState& state,
                  const HyperParams& hp) {
  check_sizes(params, grad);
  check_state(state, params.size(), {OptimizerKind::AdaGrad});
  auto& acc = state.grad_sq_accum;
  for (std::size_t k = 0; k < params.size(); ++k) {
    acc[k] += grad[k] * grad[k];
    params[k] -= hp.alpha * grad[k] / std::sqrt(acc[k] + hp.epsilon);
  }
  ++state.step_count;
}

void adam_step(std::span<double> params, std::span<const double> grad, OptimizerState& state,
               const HyperParams& hp) {
  check_sizes(params, grad);
  check_state(state, params.size(), {OptimizerKind::Adam});
  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(hp.beta1, t);
  const double bc2 = 1.0 - std::pow(hp.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    state.m[k] = hp.beta1 * state.m[k] + (1.0 - hp.beta1) * grad[k];
    state.v[k] = hp.beta2 * state.v[k] + (1.0 - hp.beta2) * grad[k] * grad[k];
    const double m_hat = state.m[k] / bc1;
    const double v_hat = state.v[k] / bc2;
    params[k] -= hp.alpha * m_hat / (std::sqrt(v_hat) + hp.epsilon);
  }
}

Rates cyclic_rates(OptimizerKind kind, std::int64_t iteration, const CycleConfig& cycle, double fixed_beta) {
  switch (kind) {
    case OptimizerKind::Clmr: return {lr_at(iteration, cycle), mr_at(iteration, cycle)};
    case OptimizerKind::Clr: return {lr_at(iteration, cycle), fixed_beta};
    default: throw ConfigError("cyclic rates requested for non-cyclic optimizer " + std::string(to_string(kind)));
  }
}

void clmr_step(std::span<double> params, std::span<const double> grad_at_lookahead, OptimizerState& state,
               const TrainClock& clock, const CycleConfig& cycle, const HyperParams& hp) {
  if (state.kind != OptimizerKind::Clmr && state.kind != OptimizerKind::Clr) {
    throw ConfigError("clmr_step needs a CLR or CLMR state");
  }
  const Rates r = cyclic_rates(state.kind, clock.iteration, cycle, hp.beta);
  HyperParams applied = hp;
  applied.alpha = r.lr;
  applied.beta = r.mr;
  nesterov_step(params, grad_at_lookahead, state, applied);
}

Optimizer::Optimizer(OptimizerKind kind, HyperParams hp, std::optional<CycleConfig> cycle,
                     const std::vector<std::size_t>& param_sizes)
    : kind_(kind), hp_(hp), cycle_(std::move(cycle)) {
  hp_.validate();
  if (kind_ == OptimizerKind::Clr || kind_ == OptimizerKind::Clmr) {
    if (!cycle_) throw ConfigError(std::string(to_string(kind_)) + " needs a cycle configuration");
    cycle_->validate();
  }
  states_.reserve(param_sizes.size());
  for (auto n : param_sizes) states_.push_back(OptimizerState::zeros(kind_, n));
  if (uses_lookahead(kind_)) {
    saved_.resize(param_sizes.size());
    for (std::size_t p = 0; p < param_sizes.size(); ++p) saved_[p].resize(param_sizes[p]);
  }
}

Rates Optimizer::rates_at(std::int64_t iteration) const {
  if (kind_ == OptimizerKind::Clr || kind_ == OptimizerKind::Clmr) {
    return cyclic_rates(kind_, iteration, *cycle_, hp_.beta);
  }
  if (kind_ == OptimizerKind::Sgd || kind_ == OptimizerKind::AdaGrad || kind_ == OptimizerKind::Adam) {
    return {hp_.alpha, 0.0};
  }
  return {hp_.alpha, hp_.beta};
}

void Optimizer::prepare(std::span<const std::span<double>> params, std::int64_t iteration) {
  if (params.size() != states_.size()) throw ShapeError("parameter list length changed");
  if (!uses_lookahead(kind_)) return;
  const double beta = rates_at(iteration).mr;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& prev = states_[p].prev_delta;
    if (params[p].size() != prev.size()) throw ShapeError("parameter size changed after initialization");
    auto& saved = saved_[p];
    for (std::size_t k = 0; k < prev.size(); ++k) {
      saved[k] = params[p][k];
      params[p][k] = saved[k] + beta * prev[k];
    }
  }
  prepared_ = true;
}

void Optimizer::apply(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads,
                      std::int64_t iteration) {
  if (params.size() != states_.size() || grads.size() != states_.size()) {
    throw ShapeError("parameter list length changed");
  }
  if (uses_lookahead(kind_)) {
    if (!prepared_) throw ConfigError("look-ahead optimizer stepped without prepare()");
    for (std::size_t p = 0; p < params.size(); ++p) {
      if (params[p].size() != saved_[p].size()) throw ShapeError("parameter size changed after initialization");
      std::copy(saved_[p].begin(), saved_[p].end(), params[p].begin());
    }
    prepared_ = false;
  }
  const Rates r = rates_at(iteration);
  HyperParams applied = hp_;
  applied.alpha = r.lr;
  applied.beta = r.mr;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& st = states_[p];
    switch (kind_) {
      case OptimizerKind::Sgd:
        if (params[p].size() != st.size()) throw ShapeError("parameter size changed after initialization");
        sgd_step(params[p], grads[p], applied);
        ++st.step_count;
        break;
      case OptimizerKind::Momentum: momentum_step(params[p], grads[p], st, applied); break;
      case OptimizerKind::Nesterov: nesterov_step(params[p], grads[p], st, applied); break;
      case OptimizerKind::AdaGrad: adagrad_step(params[p], grads[p], st, hp_); break;
      case OptimizerKind::Adam: adam_step(params[p], grads[p], st, hp_); break;
      case OptimizerKind::Clr:
      case OptimizerKind::Clmr: clmr_step(params[p], grads[p], st, {iteration, 1}, *cycle_, hp_); break;
    }
  }
}

}  // namespace clmr
