#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "clmr/data.hpp"
#include "clmr/error.hpp"

using namespace clmr;
namespace fs = std::filesystem;

TEST(Phantoms, SameSeedSameData) {
  const auto a = generate_phantoms(10, 32, 5, PhantomMode::Multi);
  const auto b = generate_phantoms(10, 32, 5, PhantomMode::Multi);
  const auto c = generate_phantoms(10, 32, 6, PhantomMode::Multi);
  ASSERT_EQ(a.samples.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(a.samples[i].mask, b.samples[i].mask);
    EXPECT_TRUE(std::ranges::equal(a.samples[i].image.values(), b.samples[i].image.values()));
  }
  EXPECT_EQ(a.splits, b.splits);
  EXPECT_NE(a.samples[0].mask, c.samples[0].mask);
}

TEST(Phantoms, EightyTwentySplit) {
  const auto d = generate_phantoms(50, 32, 2, PhantomMode::Multi);
  EXPECT_EQ(d.indices(Split::Val).size(), 10u);
  EXPECT_EQ(d.indices(Split::Train).size(), 40u);
}

TEST(Phantoms, EveryClassPresentAndImageInRange) {
  const auto d = generate_phantoms(8, 64, 3, PhantomMode::Multi);
  EXPECT_EQ(d.num_classes, 4u);
  for (const auto& s : d.samples) {
    EXPECT_EQ(s.image.shape(), (Shape{1, 64, 64}));
    for (std::int32_t c = 0; c < 4; ++c) EXPECT_NE(std::count(s.mask.begin(), s.mask.end(), c), 0) << c;
    const auto [lo, hi] = std::minmax_element(s.image.values().begin(), s.image.values().end());
    EXPECT_GE(*lo, 0.0);
    EXPECT_LE(*hi, 1.0);
  }
}

TEST(Phantoms, SingleModeLabelsLvOnly) {
  const auto multi = generate_phantoms(4, 32, 9, PhantomMode::Multi);
  const auto single = generate_phantoms(4, 32, 9, PhantomMode::Single);
  EXPECT_EQ(single.num_classes, 2u);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t p = 0; p < multi.samples[i].mask.size(); ++p) {
      EXPECT_EQ(single.samples[i].mask[p], multi.samples[i].mask[p] == label::kLv ? 1 : 0);
    }
  }
}

TEST(Phantoms, RejectsBadArguments) {
  EXPECT_THROW(generate_phantoms(4, 31, 1, PhantomMode::Multi), ConfigError);
  EXPECT_THROW(generate_phantoms(4, 16, 1, PhantomMode::Multi), ConfigError);
  EXPECT_THROW(generate_phantoms(0, 32, 1, PhantomMode::Multi), ConfigError);
  EXPECT_THROW(parse_phantom_mode("triple"), ConfigError);
}

TEST(Phantoms, MakeBatchStacks) {
  const auto d = generate_phantoms(4, 32, 1, PhantomMode::Multi);
  const auto b = make_batch(d, {2, 0});
  EXPECT_EQ(b.images.shape(), (Shape{2, 1, 32, 32}));
  ASSERT_EQ(b.labels.size(), 2u * 32 * 32);
  EXPECT_TRUE(std::equal(d.samples[2].mask.begin(), d.samples[2].mask.end(), b.labels.begin()));
  EXPECT_EQ(b.images.values()[32 * 32], d.samples[0].image.values()[0]);
  EXPECT_THROW(make_batch(d, {}), ConfigError);
}

TEST(Phantoms, SaveLoadRoundTrip) {
  const auto dir = fs::temp_directory_path() / "clmr_data_test";
  fs::remove_all(dir);
  const auto d = generate_phantoms(6, 32, 4, PhantomMode::Multi);
  save_dataset(dir.string(), d);
  const auto e = load_dataset(dir.string());
  EXPECT_EQ(e.num_classes, 4u);
  EXPECT_EQ(e.splits, d.splits);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(e.samples[i].mask, d.samples[i].mask);
    EXPECT_TRUE(std::ranges::equal(e.samples[i].image.values(), d.samples[i].image.values()));
  }
  EXPECT_THROW(load_dataset(dir.string(), 2), DomainError);
  {
    std::ofstream idx(dir / "index.txt", std::ios::app);
    idx << "garbage\n";
  }
  EXPECT_THROW(load_dataset(dir.string()), FormatError);
  EXPECT_THROW(load_dataset((dir / "nope").string()), IoError);
  fs::remove_all(dir);
}
