#include "clmr/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <mutex>
#include <nlohmann/json.hpp>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "clmr/error.hpp"
#include "clmr/ops.hpp"

namespace clmr {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kShuffleSalt = 0x9e3779b97f4a7c15ULL;

bool is_cyclic(OptimizerKind kind) { return kind == OptimizerKind::Clr || kind == OptimizerKind::Clmr; }

std::string fmt(double v, const char* pattern = "%.17g") {
  char buf[40];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

std::string join(const fs::path& dir, const std::string& name) { return (dir / name).string(); }

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  return out;
}

struct Evaluation {
  double loss = 0.0;
  std::vector<double> dice;
};

Evaluation evaluate(Network& net, const Dataset& data, const std::vector<std::size_t>& idx, std::size_t batch_size) {
  NoGradGuard guard;
  const std::size_t classes = net.spec().num_classes;
  Evaluation ev;
  ev.dice.assign(classes - 1, 0.0);
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    const std::size_t stop = std::min(idx.size(), start + batch_size);
    const std::vector<std::size_t> chunk(idx.begin() + std::ptrdiff_t(start), idx.begin() + std::ptrdiff_t(stop));
    const Batch batch = make_batch(data, chunk);
    const Tensor logits = net.forward(batch.images, Mode::Eval);
    ev.loss += cross_entropy(logits, batch.labels) * double(chunk.size());
    const auto pred = argmax_labels(logits);
    const std::size_t hw = pred.size() / chunk.size();
    for (std::size_t s = 0; s < chunk.size(); ++s) {
      const std::span<const std::int32_t> p(pred.data() + s * hw, hw);
      const std::span<const std::int32_t> t(batch.labels.data() + s * hw, hw);
      for (std::size_t c = 1; c < classes; ++c) ev.dice[c - 1] += dice_index(p, t, std::int32_t(c));
    }
  }
  const double n = double(idx.size());
  ev.loss /= n;
  for (auto& d : ev.dice) d /= n;
  return ev;
}

json result_json(const ExperimentConfig& cfg, const TrainResult& r) {
  json obj;
  obj["config"] = json::parse(experiment_to_json(cfg));
  obj["it_per_epoch"] = r.it_per_epoch;
  obj["total_iterations"] = r.total_iterations;
  obj["best_epoch"] = r.best_epoch;
  obj["best_dice_avg"] = r.best_dice_avg;
  obj["best_dice_per_class"] = r.best_dice_per_class;
  obj["final_val_loss"] = r.final_val_loss;
  return obj;
}

// Runs job(k) for k in [0, n) on up to `workers` threads. Jobs must not throw.
void run_parallel(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& job) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t k = 0; k < n; ++k) job(k);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t k = next++; k < n; k = next++) job(k);
    });
  }
  for (auto& t : pool) t.join();
}

struct RunOutcome {
  std::optional<TrainResult> result;
  std::string error;
};

RunOutcome guarded_train(const ExperimentConfig& cfg, const Dataset& data) {
  RunOutcome out;
  try {
    out.result = train(cfg, data);
  } catch (const Error& e) {
    out.error = std::string(e.kind()) + ": " + e.what();
  } catch (const std::exception& e) {
    out.error = std::string("error: ") + e.what();
  }
  return out;
}

std::string seed_dir(const std::string& root, const std::string& sub, std::uint64_t seed) {
  if (root.empty()) return {};
  return (fs::path(root) / sub / ("seed" + std::to_string(seed))).string();
}

}  // namespace

double median(std::vector<double> values) {
  if (values.empty()) throw DomainError("median of an empty list");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

void ExperimentConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  model.validate();
  hyper.validate();
  if (is_cyclic(optimizer)) {
    CycleConfig probe = cycle;
    probe.it_per_epoch = 1;
    probe.validate();
  }
  if (data.path.empty()) {
    const std::size_t classes = data.mode == PhantomMode::Single ? 2 : 4;
    if (model.num_classes != classes) {
      throw ConfigError("model has " + std::to_string(model.num_classes) + " classes but " +
                        std::string(to_string(data.mode)) + " phantoms have " + std::to_string(classes));
    }
  }
}

std::int64_t iterations_per_epoch(std::size_t train_samples, std::size_t batch_size) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (train_samples < batch_size) {
    throw ConfigError("batch_size " + std::to_string(batch_size) + " exceeds the " + std::to_string(train_samples) +
                      " training samples");
  }
  return std::int64_t(train_samples / batch_size);
}

Dataset load_or_generate(const DataSource& source) {
  if (!source.path.empty()) return load_dataset(source.path);
  return generate_phantoms(source.count, source.size, source.seed, source.mode);
}

TrainResult train(const ExperimentConfig& config) {
  config.validate();
  return train(config, load_or_generate(config.data));
}

TrainResult train(const ExperimentConfig& config, const Dataset& data) {
  config.validate();
  if (data.num_classes != config.model.num_classes) {
    throw ConfigError("dataset has " + std::to_string(data.num_classes) + " classes, model expects " +
                      std::to_string(config.model.num_classes));
  }
  std::vector<std::size_t> train_idx, eval_idx;
  if (config.data.memorize) {
    train_idx.resize(data.samples.size());
    std::iota(train_idx.begin(), train_idx.end(), std::size_t{0});
    eval_idx = train_idx;
  } else {
    train_idx = data.indices(Split::Train);
    eval_idx = data.indices(Split::Val);
  }
  if (eval_idx.empty()) throw ConfigError("no validation samples");
  const std::int64_t it_per_epoch = iterations_per_epoch(train_idx.size(), config.batch_size);

  CycleConfig cycle = config.cycle;
  cycle.it_per_epoch = it_per_epoch;
  std::optional<CycleConfig> cyc;
  if (is_cyclic(config.optimizer)) {
    cycle.validate();
    cyc = cycle;
  }

  Network net = Network::build(config.model, config.seed);
  std::vector<Tensor> params = net.parameter_tensors();
  std::vector<std::size_t> sizes;
  std::vector<std::span<double>> views;
  for (auto& p : params) {
    sizes.push_back(p.numel());
    views.push_back(p.values());
  }
  Optimizer opt(config.optimizer, config.hyper, cyc, sizes);

  const bool write = !config.out_dir.empty();
  if (write) ensure_dir(config.out_dir);

  TrainResult result;
  result.it_per_epoch = it_per_epoch;
  result.total_iterations = it_per_epoch * config.epochs;
  result.best_dice_avg = -std::numeric_limits<double>::infinity();

  std::mt19937_64 rng(config.seed ^ kShuffleSalt);
  std::vector<std::size_t> order = train_idx;
  std::vector<std::span<const double>> grads(params.size());
  const auto B = std::ptrdiff_t(config.batch_size);

  try {
    for (std::int64_t epoch = 1; epoch <= config.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      for (std::int64_t b = 0; b < it_per_epoch; ++b) {
        const std::int64_t i = (epoch - 1) * it_per_epoch + b;
        const Rates rates = opt.rates_at(i);
        opt.prepare(views, i);
        net.zero_grad();
        const std::vector<std::size_t> chunk(order.begin() + b * B, order.begin() + (b + 1) * B);
        const Batch batch = make_batch(data, chunk);
        const Tensor loss = softmax_cross_entropy(net.forward(batch.images, Mode::Train), batch.labels);
        const double value = loss.item();
        if (!std::isfinite(value)) {
          throw NumericError("non-finite training loss at iteration " + std::to_string(i) + " (epoch " +
                             std::to_string(epoch) + ", lr=" + fmt(rates.lr) + ", mr=" + fmt(rates.mr) + ")");
        }
        backward(loss);
        for (std::size_t k = 0; k < params.size(); ++k) grads[k] = params[k].grad();
        opt.apply(views, grads, i);

        MetricRecord rec;
        rec.iteration = i;
        rec.epoch = epoch;
        rec.lr = rates.lr;
        rec.mr = rates.mr;
        rec.train_loss = value;
        if (b == it_per_epoch - 1) {
          const Evaluation ev = evaluate(net, data, eval_idx, config.batch_size);
          rec.val_loss = ev.loss;
          rec.dice_per_class = ev.dice;
          rec.dice_avg = foreground_average(ev.dice);
          result.final_val_loss = ev.loss;
          if (*rec.dice_avg > result.best_dice_avg) {
            result.best_dice_avg = *rec.dice_avg;
            result.best_dice_per_class = ev.dice;
            result.best_epoch = epoch;
            if (write) save_checkpoint(join(config.out_dir, "best"), net);
          }
        }
        result.records.push_back(std::move(rec));
      }
    }
  } catch (...) {
    if (write) write_metrics_csv(join(config.out_dir, "metrics.csv"), result.records);
    throw;
  }

  if (write) {
    write_metrics_csv(join(config.out_dir, "metrics.csv"), result.records);
    save_checkpoint(join(config.out_dir, "final"), net);
    auto out = open_out(join(config.out_dir, "summary.json"));
    out << result_json(config, result).dump(2) << '\n';
  }
  return result;
}

std::size_t worker_count() {
  const char* env = std::getenv("CLMR_WORKERS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1) throw ConfigError(std::string("CLMR_WORKERS must be a positive integer, got '") + env + "'");
  return std::size_t(n);
}

GridSearchResult grid_search(const ExperimentConfig& base, const std::vector<std::int64_t>& c_lr_values,
                             const std::vector<std::int64_t>& c_mr_values, const std::vector<std::uint64_t>& seeds) {
  if (c_lr_values.empty() || c_mr_values.empty()) throw ConfigError("grid value lists must not be empty");
  if (seeds.empty()) throw ConfigError("grid needs at least one seed");
  if (!is_cyclic(base.optimizer)) throw ConfigError("grid search needs a cyclic optimizer (clr or clmr)");
  for (const auto* list : {&c_lr_values, &c_mr_values}) {
    for (auto c : *list) cycle_length(c, 1);
    auto sorted = *list;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
      throw ConfigError("grid value lists must not repeat a value");
    }
  }
  base.validate();
  const Dataset data = load_or_generate(base.data);

  std::vector<GridCell> cells;
  for (auto a : c_lr_values) {
    for (auto m : c_mr_values) {
      GridCell cell;
      cell.c_lr = a;
      cell.c_mr = m;
      cells.push_back(cell);
    }
  }
  const std::size_t S = seeds.size();
  std::vector<RunOutcome> outcomes(cells.size() * S);
  run_parallel(outcomes.size(), worker_count(), [&](std::size_t k) {
    const GridCell& cell = cells[k / S];
    ExperimentConfig cfg = base;
    cfg.cycle.c_lr = cell.c_lr;
    cfg.cycle.c_mr = cell.c_mr;
    cfg.seed = seeds[k % S];
    cfg.out_dir = seed_dir(base.out_dir, "clr" + std::to_string(cell.c_lr) + "_cmr" + std::to_string(cell.c_mr),
                           cfg.seed);
    outcomes[k] = guarded_train(cfg, data);
  });

  for (std::size_t c = 0; c < cells.size(); ++c) {
    GridCell& cell = cells[c];
    std::vector<double> losses;
    for (std::size_t s = 0; s < S; ++s) {
      const RunOutcome& o = outcomes[c * S + s];
      if (!o.result) {
        if (!cell.failed) cell.error = "seed " + std::to_string(seeds[s]) + ": " + o.error;
        cell.failed = true;
        continue;
      }
      cell.seed_dice.push_back(o.result->best_dice_avg);
      losses.push_back(o.result->final_val_loss);
    }
    if (cell.failed) {
      cell.best_dice_avg = cell.final_val_loss = std::numeric_limits<double>::quiet_NaN();
    } else {
      cell.best_dice_avg = median(cell.seed_dice);
      cell.final_val_loss = median(losses);
    }
  }

  std::sort(cells.begin(), cells.end(), [](const GridCell& x, const GridCell& y) {
    if (x.failed != y.failed) return !x.failed;
    if (!x.failed && x.best_dice_avg != y.best_dice_avg) return x.best_dice_avg > y.best_dice_avg;
    if (x.c_lr != y.c_lr) return x.c_lr < y.c_lr;
    return x.c_mr < y.c_mr;
  });
  GridSearchResult result;
  result.cells = std::move(cells);
  if (!result.cells.front().failed) result.argmax = 0;

  if (!base.out_dir.empty()) {
    ensure_dir(base.out_dir);
    auto out = open_out(join(base.out_dir, "grid.csv"));
    out << "rank,c_lr,c_mr,status,best_dice_avg,final_val_loss,error\n";
    for (std::size_t r = 0; r < result.cells.size(); ++r) {
      const GridCell& c = result.cells[r];
      out << r + 1 << ',' << c.c_lr << ',' << c.c_mr << ',' << (c.failed ? "failed" : "ok") << ',';
      if (c.failed) {
        std::string msg = c.error;
        std::replace(msg.begin(), msg.end(), '"', '\'');
        out << ",,\"" << msg << "\"\n";
      } else {
        out << fmt(c.best_dice_avg) << ',' << fmt(c.final_val_loss) << ",\n";
      }
    }
  }
  return result;
}

CompareReport compare(const std::vector<ExperimentConfig>& configs, const std::vector<std::uint64_t>& seeds) {
  if (configs.empty()) throw ConfigError("compare needs at least one config");
  if (seeds.empty()) throw ConfigError("compare needs at least one seed");
  for (const auto& c : configs) {
    if (!(c.data == configs.front().data)) throw ConfigError("compare configs use mismatched dataset settings");
    c.validate();
  }
  const Dataset data = load_or_generate(configs.front().data);
  const std::string root = configs.front().out_dir;

  auto run_name = [&](std::size_t k) {
    return "run" + std::to_string(k) + "_" + std::string(to_string(configs[k].model.arch)) + "_" +
           std::string(to_string(configs[k].optimizer));
  };
  const std::size_t S = seeds.size();
  std::vector<RunOutcome> outcomes(configs.size() * S);
  run_parallel(outcomes.size(), worker_count(), [&](std::size_t k) {
    ExperimentConfig cfg = configs[k / S];
    cfg.seed = seeds[k % S];
    cfg.out_dir = seed_dir(root, run_name(k / S), cfg.seed);
    outcomes[k] = guarded_train(cfg, data);
  });

  CompareReport report;
  const std::size_t fg = data.num_classes - 1;
  for (std::size_t r = 0; r < configs.size(); ++r) {
    CompareRow row;
    row.arch = configs[r].model.arch;
    row.optimizer = configs[r].optimizer;
    std::vector<std::vector<double>> per_class(fg);
    for (std::size_t s = 0; s < S; ++s) {
      const RunOutcome& o = outcomes[r * S + s];
      if (!o.result) {
        if (!row.failed) row.error = "seed " + std::to_string(seeds[s]) + ": " + o.error;
        row.failed = true;
        continue;
      }
      row.seed_dice.push_back(o.result->best_dice_avg);
      for (std::size_t c = 0; c < fg; ++c) per_class[c].push_back(o.result->best_dice_per_class[c]);
    }
    if (row.failed) {
      row.dice_avg = std::numeric_limits<double>::quiet_NaN();
      row.dice_per_class.assign(fg, row.dice_avg);
    } else {
      row.dice_avg = median(row.seed_dice);
      for (auto& v : per_class) row.dice_per_class.push_back(median(v));
    }
    report.rows.push_back(std::move(row));
  }

  if (!root.empty()) {
    ensure_dir(root);
    auto dice_cols = [&](const std::vector<double>& d) {
      std::string cols[3];
      if (d.size() == 3) {
        for (int k = 0; k < 3; ++k) cols[k] = fmt(d[std::size_t(k)]);
      } else if (d.size() == 1) {
        cols[2] = fmt(d[0]);
      }
      return cols[0] + ',' + cols[1] + ',' + cols[2];
    };
    auto table = open_out(join(root, "table.csv"));
    table << "arch,optimizer,status,dice_rv,dice_myo,dice_lv,dice_avg\n";
    for (const auto& row : report.rows) {
      table << to_string(row.arch) << ',' << to_string(row.optimizer) << ',' << (row.failed ? "failed" : "ok") << ',';
      if (row.failed) {
        table << ",,,\n";
      } else {
        table << dice_cols(row.dice_per_class) << ',' << fmt(row.dice_avg) << '\n';
      }
    }
    auto curves = open_out(join(root, "curves.csv"));
    curves << "run,arch,optimizer,seed,epoch,iteration,train_loss,val_loss,dice_rv,dice_myo,dice_lv,dice_avg\n";
    for (std::size_t k = 0; k < outcomes.size(); ++k) {
      if (!outcomes[k].result) continue;
      const ExperimentConfig& cfg = configs[k / S];
      double loss_sum = 0.0;
      std::size_t loss_n = 0;
      for (const auto& rec : outcomes[k].result->records) {
        loss_sum += rec.train_loss;
        ++loss_n;
        if (!rec.val_loss) continue;
        curves << run_name(k / S) << ',' << to_string(cfg.model.arch) << ',' << to_string(cfg.optimizer) << ','
               << seeds[k % S] << ',' << rec.epoch << ',' << rec.iteration << ',' << fmt(loss_sum / double(loss_n))
               << ',' << fmt(*rec.val_loss) << ',' << dice_cols(rec.dice_per_class) << ',' << fmt(*rec.dice_avg)
               << '\n';
        loss_sum = 0.0;
        loss_n = 0;
      }
    }
  }
  return report;
}

}  // namespace clmr
