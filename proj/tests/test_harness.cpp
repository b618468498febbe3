#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "clmr/error.hpp"
#include "clmr/harness.hpp"

using namespace clmr;
namespace fs = std::filesystem;

namespace {

// 20 phantoms at 32x32 with a 4-block micro U-Net keeps each run well under a second.
ExperimentConfig small_config() {
  ExperimentConfig cfg;
  cfg.model.arch = Arch::UNet;
  cfg.model.blocks = {{1, 4}, {1, 8}, {1, 8}, {1, 4}};
  cfg.model.skip_connections = true;
  cfg.model.num_classes = 4;
  cfg.data.count = 20;
  cfg.data.size = 32;
  cfg.data.seed = 3;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.cycle.c_lr = 2;
  cfg.cycle.c_mr = 2;
  return cfg;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST(Harness, IterationAccounting) {
  EXPECT_EQ(iterations_per_epoch(1690, 10), 169);
  EXPECT_EQ(iterations_per_epoch(17, 4), 4);
  EXPECT_THROW(iterations_per_epoch(3, 4), ConfigError);
  EXPECT_THROW(iterations_per_epoch(3, 0), ConfigError);
}

TEST(Harness, RecordsOneRowPerIteration) {
  auto cfg = small_config();
  const auto res = train(cfg);
  EXPECT_EQ(res.it_per_epoch, 4);  // 16 training samples
  EXPECT_EQ(res.total_iterations, 8);
  ASSERT_EQ(res.records.size(), 8u);
  for (std::size_t i = 0; i < 8; ++i) {
    const auto& r = res.records[i];
    EXPECT_EQ(r.iteration, std::int64_t(i));
    EXPECT_EQ(r.epoch, std::int64_t(i / 4 + 1));
    EXPECT_EQ(r.val_loss.has_value(), i % 4 == 3);
    if (r.dice_avg) EXPECT_EQ(r.dice_per_class.size(), 3u);
  }
}

TEST(Harness, WholeSetBatchGivesOneIterationPerEpoch) {
  auto cfg = small_config();
  cfg.epochs = 1;
  cfg.batch_size = 16;
  const auto res = train(cfg);
  EXPECT_EQ(res.total_iterations, 1);
  EXPECT_EQ(res.records.size(), 1u);
  EXPECT_EQ(res.best_epoch, 1);
}

TEST(Harness, LoggedRatesFollowTheSchedule) {
  auto cfg = small_config();
  cfg.epochs = 3;
  cfg.cycle.c_mr = 4;
  const auto res = train(cfg);
  auto cyc = cfg.cycle;
  cyc.it_per_epoch = res.it_per_epoch;
  for (const auto& r : res.records) {
    EXPECT_EQ(r.lr, lr_at(r.iteration, cyc));
    EXPECT_EQ(r.mr, mr_at(r.iteration, cyc));
  }
  cfg.optimizer = OptimizerKind::Adam;
  for (const auto& r : train(cfg).records) EXPECT_EQ(r.lr, cfg.hyper.alpha);
}

TEST(Harness, RunsAreByteIdentical) {
  auto cfg = small_config();
  const auto a = fresh_dir("clmr_det_a"), b = fresh_dir("clmr_det_bb");
  cfg.out_dir = a.string();
  train(cfg);
  cfg.out_dir = b.string();
  train(cfg);
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file() || entry.path().filename() == "summary.json") continue;
    const auto rel = fs::relative(entry.path(), a);
    EXPECT_EQ(slurp(entry.path()), slurp(b / rel)) << rel;
  }
  EXPECT_TRUE(fs::exists(a / "metrics.csv"));
  EXPECT_TRUE(fs::exists(a / "best" / "manifest.json"));
  EXPECT_TRUE(fs::exists(a / "final" / "manifest.json"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Harness, NonFiniteLossIsReported) {
  const auto dir = fresh_dir("clmr_nan_data");
  auto data = generate_phantoms(20, 32, 3, PhantomMode::Multi);
  for (auto& s : data.samples) s.image.values()[5] = std::nan("");
  save_dataset(dir.string(), data);
  auto cfg = small_config();
  cfg.data.path = dir.string();
  try {
    train(cfg);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("iteration 0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("lr="), std::string::npos);
    EXPECT_NE(msg.find("mr="), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(Harness, ConfigValidation) {
  auto cfg = small_config();
  cfg.epochs = 0;
  EXPECT_THROW(train(cfg), ConfigError);
  cfg = small_config();
  cfg.cycle.c_lr = 3;
  EXPECT_THROW(train(cfg), ConfigError);
  cfg = small_config();
  cfg.batch_size = 17;
  EXPECT_THROW(train(cfg), ConfigError);
}

TEST(Harness, MedianOfEvenAndOdd) {
  EXPECT_DOUBLE_EQ(median({3, 1, 2}), 2.0);
  EXPECT_DOUBLE_EQ(median({4, 1, 3, 2}), 2.5);
}

TEST(GridSearch, CoversEveryPairAndMatchesTrain) {
  auto cfg = small_config();
  cfg.epochs = 1;
  const auto grid = grid_search(cfg, {2, 4}, {2, 6}, {1});
  ASSERT_EQ(grid.cells.size(), 4u);
  std::vector<std::pair<std::int64_t, std::int64_t>> seen;
  for (const auto& c : grid.cells) seen.emplace_back(c.c_lr, c.c_mr);
  std::sort(seen.begin(), seen.end());
  EXPECT_EQ(seen, (std::vector<std::pair<std::int64_t, std::int64_t>>{{2, 2}, {2, 6}, {4, 2}, {4, 6}}));
  ASSERT_TRUE(grid.argmax.has_value());
  EXPECT_EQ(*grid.argmax, 0u);
  for (std::size_t i = 1; i < grid.cells.size(); ++i) {
    EXPECT_GE(grid.cells[i - 1].best_dice_avg, grid.cells[i].best_dice_avg);
  }

  for (const auto& cell : grid.cells) {
    auto one = cfg;
    one.cycle.c_lr = cell.c_lr;
    one.cycle.c_mr = cell.c_mr;
    one.seed = 1;
    EXPECT_EQ(train(one).best_dice_avg, cell.best_dice_avg);
  }

  const auto permuted = grid_search(cfg, {4, 2}, {6, 2}, {1});
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(permuted.cells[i].c_lr, grid.cells[i].c_lr);
    EXPECT_EQ(permuted.cells[i].c_mr, grid.cells[i].c_mr);
    EXPECT_EQ(permuted.cells[i].best_dice_avg, grid.cells[i].best_dice_avg);
  }
  EXPECT_THROW(grid_search(cfg, {2, 2}, {2}, {1}), ConfigError);
  EXPECT_THROW(grid_search(cfg, {3}, {2}, {1}), ConfigError);
}

TEST(GridSearch, FailingRunsMarkTheirCells) {
  const auto dir = fresh_dir("clmr_nan_grid");
  auto data = generate_phantoms(20, 32, 3, PhantomMode::Multi);
  for (auto& s : data.samples) s.image.values()[0] = std::nan("");
  save_dataset(dir.string(), data);
  auto cfg = small_config();
  cfg.data.path = dir.string();
  const auto grid = grid_search(cfg, {4, 2}, {2}, {1});
  ASSERT_EQ(grid.cells.size(), 2u);
  for (const auto& cell : grid.cells) {
    EXPECT_TRUE(cell.failed);
    EXPECT_TRUE(std::isnan(cell.best_dice_avg));
    EXPECT_NE(cell.error.find("numeric"), std::string::npos) << cell.error;
  }
  EXPECT_EQ(grid.cells[0].c_lr, 2);  // failed cells keep (c_lr, c_mr) order
  EXPECT_FALSE(grid.argmax.has_value());
  fs::remove_all(dir);
}

TEST(Compare, TablesAndCurves) {
  auto a = small_config();
  a.epochs = 1;
  auto b = a;
  b.optimizer = OptimizerKind::Nesterov;
  const auto dir = fresh_dir("clmr_compare_test");
  a.out_dir = dir.string();
  const auto report = compare({a, b}, {1, 2});
  ASSERT_EQ(report.rows.size(), 2u);
  EXPECT_EQ(report.rows[1].optimizer, OptimizerKind::Nesterov);
  EXPECT_EQ(report.rows[0].seed_dice.size(), 2u);
  EXPECT_EQ(report.rows[0].dice_per_class.size(), 3u);
  EXPECT_DOUBLE_EQ(report.rows[0].dice_avg, median(report.rows[0].seed_dice));

  std::istringstream table(slurp(dir / "table.csv"));
  std::string line;
  std::getline(table, line);
  EXPECT_EQ(line, "arch,optimizer,status,dice_rv,dice_myo,dice_lv,dice_avg");
  int rows = 0;
  while (std::getline(table, line)) ++rows;
  EXPECT_EQ(rows, 2);

  std::istringstream curves(slurp(dir / "curves.csv"));
  std::getline(curves, line);
  EXPECT_EQ(line.substr(0, 30), "run,arch,optimizer,seed,epoch,");
  rows = 0;
  while (std::getline(curves, line)) ++rows;
  EXPECT_EQ(rows, 4);  // 2 runs x 2 seeds x 1 epoch
  fs::remove_all(dir);

  auto c = b;
  c.data.seed = 99;
  EXPECT_THROW(compare({a, c}, {1}), ConfigError);
}
