#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "clmr/error.hpp"
#include "clmr/harness.hpp"

using namespace clmr;

TEST(Config, ParsesExperimentKeys) {
  const auto cfg = experiment_from_json(R"({
    "arch": "densenet2", "optimizer": "nesterov", "alpha": 0.02, "beta": 0.8,
    "c_lr": 8, "c_mr": 20, "epochs": 7, "batch": 4, "seed": 11,
    "data": {"count": 40, "size": 32, "mode": "single", "memorize": true}
  })");
  EXPECT_EQ(cfg.model.arch, Arch::DenseNet2);
  EXPECT_EQ(cfg.model.num_classes, 2u);
  EXPECT_EQ(cfg.optimizer, OptimizerKind::Nesterov);
  EXPECT_EQ(cfg.hyper.alpha, 0.02);
  EXPECT_EQ(cfg.hyper.beta, 0.8);
  EXPECT_EQ(cfg.cycle.c_lr, 8);
  EXPECT_EQ(cfg.cycle.c_mr, 20);
  EXPECT_EQ(cfg.epochs, 7);
  EXPECT_EQ(cfg.batch_size, 4u);
  EXPECT_EQ(cfg.seed, 11u);
  EXPECT_EQ(cfg.data.count, 40u);
  EXPECT_EQ(cfg.data.mode, PhantomMode::Single);
  EXPECT_TRUE(cfg.data.memorize);
}

TEST(Config, RoundTripsThroughJson) {
  auto cfg = experiment_from_json(R"({"arch": "encdec", "optimizer": "adam", "epochs": 3})");
  const auto again = experiment_from_json(experiment_to_json(cfg));
  EXPECT_EQ(again.model, cfg.model);
  EXPECT_EQ(again.optimizer, cfg.optimizer);
  EXPECT_EQ(again.epochs, cfg.epochs);
  EXPECT_EQ(again.data, cfg.data);
}

TEST(Config, RejectsUnknownOrMalformed) {
  EXPECT_THROW(experiment_from_json(R"({"learning_rate": 0.1})"), ConfigError);
  EXPECT_THROW(experiment_from_json(R"({"data": {"colour": 1}})"), ConfigError);
  EXPECT_THROW(experiment_from_json(R"({"epochs": "many"})"), ConfigError);
  EXPECT_THROW(experiment_from_json("{"), ConfigError);
  EXPECT_THROW(experiment_from_json(R"({"scale": "huge"})"), ConfigError);
  EXPECT_THROW(experiment_from_json("[1, 2]"), ConfigError);
}

TEST(Config, PlansFromFiles) {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "clmr_plan_test";
  fs::create_directories(dir);
  {
    std::ofstream g(dir / "grid.json");
    g << R"({"optimizer": "clmr", "epochs": 2, "c_lr_values": [2, 4], "seeds": [5, 6]})";
    std::ofstream c(dir / "cmp.json");
    c << R"({"epochs": 2, "runs": [{"optimizer": "clmr"}, {"optimizer": "clr", "arch": "densenet1"}]})";
  }
  const auto grid = load_grid_plan((dir / "grid.json").string());
  EXPECT_EQ(grid.c_lr_values, (std::vector<std::int64_t>{2, 4}));
  EXPECT_EQ(grid.c_mr_values, (std::vector<std::int64_t>{2, 8, 20}));
  EXPECT_EQ(grid.seeds, (std::vector<std::uint64_t>{5, 6}));
  EXPECT_EQ(grid.base.epochs, 2);

  const auto cmp = load_compare_plan((dir / "cmp.json").string());
  ASSERT_EQ(cmp.configs.size(), 2u);
  EXPECT_EQ(cmp.configs[1].optimizer, OptimizerKind::Clr);
  EXPECT_EQ(cmp.configs[1].model.arch, Arch::DenseNet1);
  EXPECT_EQ(cmp.configs[1].epochs, 2);
  EXPECT_THROW(load_grid_plan((dir / "missing.json").string()), IoError);
  fs::remove_all(dir);
}
