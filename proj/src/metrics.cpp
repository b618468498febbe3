#include "clmr/metrics.hpp"

#include <cstdio>
#include <fstream>
#include <ostream>

#include "clmr/error.hpp"
#include "clmr/ops.hpp"

namespace clmr {

double dice_index(std::span<const std::int32_t> pred, std::span<const std::int32_t> truth, std::int32_t class_id) {
  if (pred.size() != truth.size()) {
    throw ShapeError("dice_index on masks of " + std::to_string(pred.size()) + " and " + std::to_string(truth.size()) +
                     " pixels");
  }
  std::size_t inter = 0, p = 0, t = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool in_p = pred[i] == class_id;
    const bool in_t = truth[i] == class_id;
    p += in_p;
    t += in_t;
    inter += in_p && in_t;
  }
  if (p + t == 0) return 1.0;
  return 2.0 * double(inter) / double(p + t);
}

double cross_entropy(const Tensor& logits, std::span<const std::int32_t> truth) {
  NoGradGuard guard;
  return softmax_cross_entropy(logits, truth).item();
}

std::vector<std::int32_t> argmax_labels(const Tensor& logits) {
  if (logits.rank() != 4) throw ShapeError("argmax_labels needs N x C x H x W logits");
  const std::size_t n = logits.dim(0), c = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  const auto z = logits.values();
  std::vector<std::int32_t> out(n * hw);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < hw; ++i) {
      const double* zp = z.data() + s * c * hw + i;
      std::size_t best = 0;
      for (std::size_t k = 1; k < c; ++k) {
        if (zp[k * hw] > zp[best * hw]) best = k;
      }
      out[s * hw + i] = std::int32_t(best);
    }
  }
  return out;
}

double foreground_average(const std::vector<double>& dice_per_class) {
  if (dice_per_class.empty()) return 0.0;
  double s = 0.0;
  for (double d : dice_per_class) s += d;
  return s / double(dice_per_class.size());
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void write_metrics_csv(std::ostream& out, const std::vector<MetricRecord>& records) {
  out << "iteration,epoch,lr,mr,train_loss,val_loss,dice_rv,dice_myo,dice_lv,dice_avg\n";
  for (const auto& r : records) {
    out << r.iteration << ',' << r.epoch << ',' << fmt(r.lr) << ',' << fmt(r.mr) << ',' << fmt(r.train_loss) << ',';
    out << (r.val_loss ? fmt(*r.val_loss) : "") << ',';
    std::string cols[3];
    if (r.dice_per_class.size() == 3) {
      for (int k = 0; k < 3; ++k) cols[k] = fmt(r.dice_per_class[std::size_t(k)]);
    } else if (r.dice_per_class.size() == 1) {
      cols[2] = fmt(r.dice_per_class[0]);
    }
    out << cols[0] << ',' << cols[1] << ',' << cols[2] << ',' << (r.dice_avg ? fmt(*r.dice_avg) : "") << '\n';
  }
}

void write_metrics_csv(const std::string& path, const std::vector<MetricRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  write_metrics_csv(out, records);
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace clmr
