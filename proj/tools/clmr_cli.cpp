// clmr: train, grid-search and compare segmentation runs on phantom data.

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>
#include <string>

#include "clmr/error.hpp"
#include "clmr/harness.hpp"
#include "clmr/runtime.hpp"

namespace {

using namespace clmr;

std::string quote(std::string s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

int fail(const char* kind, const std::string& message) {
  std::cerr << "error kind=" << kind << " message=" << quote(message) << '\n';
  return 1;
}

std::string dice_text(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

struct TrainArgs {
  std::string arch = "unet";
  std::string opt = "clmr";
  std::string scale = "micro";
  std::string mode = "multi";
  CycleConfig cycle;
  HyperParams hyper;
  std::int64_t epochs = 30;
  std::size_t batch = 8;
  std::uint64_t seed = 1;
  std::string data;
  std::size_t count = 200;
  std::size_t size = 64;
  std::uint64_t data_seed = 1;
  bool memorize = false;
  std::string out;
};

ExperimentConfig to_config(const TrainArgs& a) {
  ExperimentConfig cfg;
  cfg.data.path = a.data;
  cfg.data.count = a.count;
  cfg.data.size = a.size;
  cfg.data.seed = a.data_seed;
  cfg.data.mode = parse_phantom_mode(a.mode);
  cfg.data.memorize = a.memorize;
  const std::size_t classes = cfg.data.mode == PhantomMode::Single ? 2 : 4;
  const Arch arch = parse_arch(a.arch);
  if (a.scale == "micro") {
    cfg.model = ModelSpec::micro(arch, classes);
  } else if (a.scale == "paper") {
    cfg.model = ModelSpec::paper(arch, classes);
  } else {
    throw ConfigError("--scale must be micro or paper");
  }
  cfg.optimizer = parse_optimizer_kind(a.opt);
  cfg.hyper = a.hyper;
  cfg.cycle = a.cycle;
  cfg.epochs = a.epochs;
  cfg.batch_size = a.batch;
  cfg.seed = a.seed;
  cfg.out_dir = a.out;
  return cfg;
}

void print_grid(const GridSearchResult& r) {
  std::cout << "rank  c_lr  c_mr  best_dice_avg  final_val_loss\n";
  for (std::size_t k = 0; k < r.cells.size(); ++k) {
    const auto& c = r.cells[k];
    std::printf("%4zu  %4lld  %4lld  ", k + 1, (long long)c.c_lr, (long long)c.c_mr);
    if (c.failed) {
      std::printf("failed: %s\n", c.error.c_str());
    } else {
      std::printf("%13.4f  %14.6f\n", c.best_dice_avg, c.final_val_loss);
    }
  }
  if (r.argmax) {
    const auto& best = r.cells[*r.argmax];
    std::printf("argmax c_lr=%lld c_mr=%lld\n", (long long)best.c_lr, (long long)best.c_mr);
  }
}

void print_compare(const CompareReport& r) {
  std::cout << "arch       optimizer  rv      myo     lv      avg\n";
  for (const auto& row : r.rows) {
    std::printf("%-10s %-10s ", std::string(to_string(row.arch)).c_str(), std::string(to_string(row.optimizer)).c_str());
    if (row.failed) {
      std::printf("failed: %s\n", row.error.c_str());
      continue;
    }
    const auto& d = row.dice_per_class;
    if (d.size() == 3) {
      std::printf("%s  %s  %s  %s\n", dice_text(d[0]).c_str(), dice_text(d[1]).c_str(), dice_text(d[2]).c_str(),
                  dice_text(row.dice_avg).c_str());
    } else {
      std::printf("-       -       %s  %s\n", dice_text(d.back()).c_str(), dice_text(row.dice_avg).c_str());
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Cyclic learning/momentum rate training harness"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train one architecture with one optimizer");
  train_cmd->add_option("--arch", ta.arch, "encdec|unet|densenet1|densenet2")->capture_default_str();
  train_cmd->add_option("--opt", ta.opt, "sgd|momentum|nesterov|adagrad|adam|clr|clmr")->capture_default_str();
  train_cmd->add_option("--scale", ta.scale, "micro|paper")->capture_default_str();
  train_cmd->add_option("--c-lr", ta.cycle.c_lr, "LR cycle multiplier (even)")->capture_default_str();
  train_cmd->add_option("--c-mr", ta.cycle.c_mr, "MR cycle multiplier (even)")->capture_default_str();
  train_cmd->add_option("--min-lr", ta.cycle.min_lr)->capture_default_str();
  train_cmd->add_option("--max-lr", ta.cycle.max_lr)->capture_default_str();
  train_cmd->add_option("--min-mr", ta.cycle.min_mr)->capture_default_str();
  train_cmd->add_option("--max-mr", ta.cycle.max_mr)->capture_default_str();
  train_cmd->add_option("--alpha", ta.hyper.alpha, "fixed learning rate")->capture_default_str();
  train_cmd->add_option("--beta", ta.hyper.beta, "fixed momentum rate")->capture_default_str();
  train_cmd->add_option("--epochs", ta.epochs)->capture_default_str();
  train_cmd->add_option("--batch", ta.batch)->capture_default_str();
  train_cmd->add_option("--seed", ta.seed)->capture_default_str();
  train_cmd->add_option("--data", ta.data, "dataset directory (default: generate phantoms)");
  train_cmd->add_option("--count", ta.count, "phantoms to generate")->capture_default_str();
  train_cmd->add_option("--size", ta.size, "phantom side length")->capture_default_str();
  train_cmd->add_option("--data-seed", ta.data_seed)->capture_default_str();
  train_cmd->add_option("--mode", ta.mode, "single|multi")->capture_default_str();
  train_cmd->add_flag("--memorize", ta.memorize, "train and evaluate on every sample");
  train_cmd->add_option("--out", ta.out, "output directory");

  std::string grid_config;
  auto* grid_cmd = app.add_subcommand("gridsearch", "Search over (c_lr, c_mr)");
  grid_cmd->add_option("--config", grid_config, "JSON plan")->required();

  std::string compare_config;
  auto* compare_cmd = app.add_subcommand("compare", "Compare (architecture, optimizer) pairs");
  compare_cmd->add_option("--config", compare_config, "JSON plan")->required();

  CycleConfig wave;
  std::int64_t iters = 0;
  std::string wave_out;
  auto* wave_cmd = app.add_subcommand("waveform", "Write the lr/mr schedule as CSV");
  wave_cmd->add_option("--c-lr", wave.c_lr)->capture_default_str();
  wave_cmd->add_option("--c-mr", wave.c_mr)->capture_default_str();
  wave_cmd->add_option("--it-per-epoch", wave.it_per_epoch)->capture_default_str();
  wave_cmd->add_option("--min-lr", wave.min_lr)->capture_default_str();
  wave_cmd->add_option("--max-lr", wave.max_lr)->capture_default_str();
  wave_cmd->add_option("--min-mr", wave.min_mr)->capture_default_str();
  wave_cmd->add_option("--max-mr", wave.max_mr)->capture_default_str();
  wave_cmd->add_option("--iters", iters)->required();
  wave_cmd->add_option("--out", wave_out, "CSV path (default: stdout)");

  DataSource ph;
  std::string ph_mode = "multi";
  std::string ph_out;
  auto* ph_cmd = app.add_subcommand("phantoms", "Generate and save a phantom dataset");
  ph_cmd->add_option("--count", ph.count)->capture_default_str();
  ph_cmd->add_option("--size", ph.size)->capture_default_str();
  ph_cmd->add_option("--seed", ph.seed)->capture_default_str();
  ph_cmd->add_option("--mode", ph_mode, "single|multi")->capture_default_str();
  ph_cmd->add_option("--out", ph_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what());
  }

  try {
    if (*train_cmd) {
      const ExperimentConfig cfg = to_config(ta);
      const TrainResult r = train(cfg);
      std::printf("iterations=%lld it_per_epoch=%lld best_epoch=%lld best_dice_avg=%.6f final_val_loss=%.6f\n",
                  (long long)r.total_iterations, (long long)r.it_per_epoch, (long long)r.best_epoch,
                  r.best_dice_avg, r.final_val_loss);
    } else if (*grid_cmd) {
      const GridPlan plan = load_grid_plan(grid_config);
      print_grid(grid_search(plan.base, plan.c_lr_values, plan.c_mr_values, plan.seeds));
    } else if (*compare_cmd) {
      const ComparePlan plan = load_compare_plan(compare_config);
      print_compare(compare(plan.configs, plan.seeds));
    } else if (*wave_cmd) {
      const auto rows = waveform(wave, iters);
      if (wave_out.empty()) {
        write_waveform_csv(std::cout, rows);
      } else {
        write_waveform_csv(wave_out, rows);
      }
    } else if (*ph_cmd) {
      ph.mode = parse_phantom_mode(ph_mode);
      save_dataset(ph_out, load_or_generate(ph));
    }
  } catch (const Error& e) {
    return fail(e.kind(), e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
  return 0;
}
