#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace clmr {

/// Constants of the triangular learning-rate and momentum-rate waves.
///
/// The LR wave has period `c_lr * it_per_epoch` iterations and the MR wave
/// `c_mr * it_per_epoch`; both start at their minimum, peak at the half period
/// and return linearly to the minimum.
struct CycleConfig {
  double min_lr = 0.0005;
  double max_lr = 0.05;
  double min_mr = 0.85;
  double max_mr = 0.95;
  std::int64_t c_lr = 20;
  std::int64_t c_mr = 20;
  std::int64_t it_per_epoch = 1;

  /// Throws ConfigError on the first violated invariant.
  void validate() const;

  /// Same bounds with both waves collapsed to the given constants.
  static CycleConfig constant(double lr, double mr, std::int64_t it_per_epoch = 1);
};

/// Position of a training loop: global iteration `i` and total epochs.
struct TrainClock {
  std::int64_t iteration = 0;
  std::int64_t epochs_total = 1;
};

/// Number of iterations in one triangle period: c * it_per_epoch.
/// Rejects odd or non-positive multipliers and non-positive epoch lengths.
std::int64_t cycle_length(std::int64_t c, std::int64_t it_per_epoch);

/// Triangle wave over [lo, hi] with the given period, evaluated at iteration i.
/// Exposed for callers needing a custom wave; lr_at/mr_at are thin wrappers.
double triangle_at(std::int64_t i, std::int64_t period, double lo, double hi);

double lr_at(std::int64_t i, const CycleConfig& cfg);
double mr_at(std::int64_t i, const CycleConfig& cfg);

struct WaveformRow {
  std::int64_t iteration = 0;
  double lr = 0.0;
  double mr = 0.0;
};

/// Dense table of both schedules for iterations [0, total_iterations).
std::vector<WaveformRow> waveform(const CycleConfig& cfg, std::int64_t total_iterations);

/// CSV with header `iteration,lr,mr` and 17 significant digits per rate.
void write_waveform_csv(std::ostream& out, const std::vector<WaveformRow>& rows);
void write_waveform_csv(const std::string& path, const std::vector<WaveformRow>& rows);

}  // namespace clmr
