#include "clmr/schedule.hpp"

#include <cstdio>
#include <fstream>
#include <ostream>
#include <string>

#include "clmr/error.hpp"

namespace clmr {

namespace {

void check_multiplier(std::int64_t c, const char* name) {
  if (c < 2 || c % 2 != 0) {
    throw ConfigError(std::string(name) + " must be a positive even integer, got " + std::to_string(c));
  }
}

}  // namespace

void CycleConfig::validate() const {
  if (!(min_lr > 0.0)) throw ConfigError("min_lr must be > 0");
  if (!(min_lr <= max_lr)) throw ConfigError("min_lr must not exceed max_lr");
  if (!(min_mr >= 0.0 && max_mr < 1.0)) throw ConfigError("momentum rates must lie in [0, 1)");
  if (!(min_mr <= max_mr)) throw ConfigError("min_mr must not exceed max_mr");
  check_multiplier(c_lr, "c_lr");
  check_multiplier(c_mr, "c_mr");
  if (it_per_epoch < 1) throw ConfigError("it_per_epoch must be >= 1");
}

CycleConfig CycleConfig::constant(double lr, double mr, std::int64_t it_per_epoch) {
  CycleConfig cfg;
  cfg.min_lr = cfg.max_lr = lr;
  cfg.min_mr = cfg.max_mr = mr;
  cfg.c_lr = cfg.c_mr = 2;
  cfg.it_per_epoch = it_per_epoch;
  return cfg;
}

std::int64_t cycle_length(std::int64_t c, std::int64_t it_per_epoch) {
  check_multiplier(c, "cycle multiplier");
  if (it_per_epoch < 1) {
    throw ConfigError("it_per_epoch must be >= 1, got " + std::to_string(it_per_epoch));
  }
  return c * it_per_epoch;
}

double triangle_at(std::int64_t i, std::int64_t period, double lo, double hi) {
  if (i < 0) throw DomainError("iteration must be non-negative");
  if (period < 2 || period % 2 != 0) throw ConfigError("triangle period must be a positive even integer");
  // The ramp is applied to the phase within the current cycle, never to the
  // global iteration, so every cycle repeats the first one.
  const std::int64_t phase = i % period;
  const std::int64_t half = period / 2;
  const double slope = 2.0 * (hi - lo) / static_cast<double>(period);
  if (phase < half) return lo + slope * static_cast<double>(phase);
  return hi - slope * static_cast<double>(phase - half);
}

double lr_at(std::int64_t i, const CycleConfig& cfg) {
  return triangle_at(i, cycle_length(cfg.c_lr, cfg.it_per_epoch), cfg.min_lr, cfg.max_lr);
}

double mr_at(std::int64_t i, const CycleConfig& cfg) {
  return triangle_at(i, cycle_length(cfg.c_mr, cfg.it_per_epoch), cfg.min_mr, cfg.max_mr);
}

std::vector<WaveformRow> waveform(const CycleConfig& cfg, std::int64_t total_iterations) {
  cfg.validate();
  if (total_iterations < 1) throw ConfigError("total_iterations must be >= 1");
  const std::int64_t lr_period = cycle_length(cfg.c_lr, cfg.it_per_epoch);
  const std::int64_t mr_period = cycle_length(cfg.c_mr, cfg.it_per_epoch);
  std::vector<WaveformRow> rows;
  rows.reserve(static_cast<std::size_t>(total_iterations));
  for (std::int64_t i = 0; i < total_iterations; ++i) {
    rows.push_back({i, triangle_at(i, lr_period, cfg.min_lr, cfg.max_lr),
                    triangle_at(i, mr_period, cfg.min_mr, cfg.max_mr)});
  }
  return rows;
}

void write_waveform_csv(std::ostream& out, const std::vector<WaveformRow>& rows) {
  out << "iteration,lr,mr\n";
  char buf[96];
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g\n", static_cast<long long>(row.iteration), row.lr,
                  row.mr);
    out << buf;
  }
}

void write_waveform_csv(const std::string& path, const std::vector<WaveformRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  write_waveform_csv(out, rows);
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace clmr
