#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clmr/tensor.hpp"

namespace clmr {

/// 2|P ∩ T| / (|P| + |T|) for one class; 1.0 when the class is absent from both.
double dice_index(std::span<const std::int32_t> pred, std::span<const std::int32_t> truth, std::int32_t class_id);

/// Mean pixel-wise softmax cross-entropy without recording a graph.
double cross_entropy(const Tensor& logits, std::span<const std::int32_t> truth);

/// Per-pixel argmax over the class axis of N x C x H x W logits.
std::vector<std::int32_t> argmax_labels(const Tensor& logits);

/// Per-iteration log row. Validation fields are set on rows where a
/// validation pass ran (the last iteration of each epoch).
struct MetricRecord {
  std::int64_t iteration = 0;
  std::int64_t epoch = 0;
  double lr = 0.0;
  double mr = 0.0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
  std::vector<double> dice_per_class;  // foreground classes, ascending id
  std::optional<double> dice_avg;
};

/// Mean of the foreground Dice values.
double foreground_average(const std::vector<double>& dice_per_class);

/// Header `iteration,epoch,lr,mr,train_loss,val_loss,dice_rv,dice_myo,dice_lv,dice_avg`.
/// Rates and losses use 17 significant digits. Missing values are empty; a
/// single-foreground run reports its class under dice_lv.
void write_metrics_csv(std::ostream& out, const std::vector<MetricRecord>& records);
void write_metrics_csv(const std::string& path, const std::vector<MetricRecord>& records);

}  // namespace clmr
