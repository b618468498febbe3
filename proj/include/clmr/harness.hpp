#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "clmr/data.hpp"
#include "clmr/metrics.hpp"
#include "clmr/model.hpp"
#include "clmr/optim.hpp"
#include "clmr/schedule.hpp"

namespace clmr {

/// Where training data comes from. A non-empty `path` loads a saved dataset;
/// otherwise phantoms are generated from the remaining fields.
struct DataSource {
  std::string path;
  std::size_t count = 200;
  std::size_t size = 64;
  std::uint64_t seed = 1;
  PhantomMode mode = PhantomMode::Multi;
  /// Train and evaluate on every sample (memorization runs).
  bool memorize = false;

  bool operator==(const DataSource&) const = default;
};

struct ExperimentConfig {
  ModelSpec model = ModelSpec::micro(Arch::UNet);
  OptimizerKind optimizer = OptimizerKind::Clmr;
  HyperParams hyper;
  /// Bounds and multipliers; it_per_epoch is overwritten from the data.
  CycleConfig cycle;
  std::int64_t epochs = 30;
  std::size_t batch_size = 8;
  DataSource data;
  /// Drives weight init and shuffling.
  std::uint64_t seed = 1;
  /// Empty: nothing is written.
  std::string out_dir;

  void validate() const;
};

/// Reads the training-relevant keys of a JSON object into `base`. Unknown
/// keys raise ConfigError.
ExperimentConfig experiment_from_json(const std::string& text, ExperimentConfig base = {});
std::string experiment_to_json(const ExperimentConfig& config);

/// floor(train_samples / batch_size); ConfigError when that is zero.
std::int64_t iterations_per_epoch(std::size_t train_samples, std::size_t batch_size);

struct TrainResult {
  std::vector<MetricRecord> records;
  std::int64_t it_per_epoch = 0;
  std::int64_t total_iterations = 0;
  /// Validation pass with the highest dice_avg (first one on ties).
  std::int64_t best_epoch = 0;
  double best_dice_avg = 0.0;
  std::vector<double> best_dice_per_class;
  double final_val_loss = 0.0;
};

Dataset load_or_generate(const DataSource& source);

/// Trains on `data` (which must match config.data). Writes metrics.csv,
/// summary.json and the final/ and best/ checkpoints when out_dir is set.
/// Throws NumericError naming the iteration, lr and mr on a non-finite loss.
TrainResult train(const ExperimentConfig& config, const Dataset& data);
TrainResult train(const ExperimentConfig& config);

/// Worker threads for grid and comparison runs, from CLMR_WORKERS (default 1).
std::size_t worker_count();

struct GridCell {
  std::int64_t c_lr = 0;
  std::int64_t c_mr = 0;
  bool failed = false;
  std::string error;
  /// Medians over seeds; NaN for failed cells.
  double best_dice_avg = 0.0;
  double final_val_loss = 0.0;
  std::vector<double> seed_dice;
};

struct GridSearchResult {
  /// Ranked: best median dice first, ties by smaller (c_lr, c_mr), failed cells last.
  std::vector<GridCell> cells;
  /// Index into `cells` of the best non-failed cell; absent when all failed.
  std::optional<std::size_t> argmax;
};

/// Trains every (c_lr, c_mr) pair for every seed with the base bounds fixed.
/// A failing run marks its cell and the grid continues.
GridSearchResult grid_search(const ExperimentConfig& base, const std::vector<std::int64_t>& c_lr_values,
                             const std::vector<std::int64_t>& c_mr_values, const std::vector<std::uint64_t>& seeds);

struct CompareRow {
  Arch arch = Arch::UNet;
  OptimizerKind optimizer = OptimizerKind::Clmr;
  bool failed = false;
  std::string error;
  /// Medians over seeds of each class's Dice at the best validation epoch.
  std::vector<double> dice_per_class;
  double dice_avg = 0.0;
  std::vector<double> seed_dice;
};

struct CompareReport {
  std::vector<CompareRow> rows;
};

/// Trains every config for every seed. All configs must share one DataSource.
/// With an out_dir on the first config, writes table.csv and curves.csv there.
CompareReport compare(const std::vector<ExperimentConfig>& configs, const std::vector<std::uint64_t>& seeds);

struct GridPlan {
  ExperimentConfig base;
  std::vector<std::int64_t> c_lr_values;
  std::vector<std::int64_t> c_mr_values;
  std::vector<std::uint64_t> seeds;
};

struct ComparePlan {
  std::vector<ExperimentConfig> configs;
  std::vector<std::uint64_t> seeds;
};

GridPlan load_grid_plan(const std::string& path);
ComparePlan load_compare_plan(const std::string& path);

double median(std::vector<double> values);

}  // namespace clmr
