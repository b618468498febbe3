#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "clmr/tensor.hpp"

namespace clmr {

enum class PhantomMode { Single, Multi };
enum class Split { Train, Val };

std::string_view to_string(PhantomMode mode);
PhantomMode parse_phantom_mode(std::string_view name);

/// Class indices of the multi-object phantoms.
namespace label {
inline constexpr std::int32_t kBackground = 0;
inline constexpr std::int32_t kRv = 1;
inline constexpr std::int32_t kMyo = 2;
inline constexpr std::int32_t kLv = 3;
}  // namespace label

/// One synthetic short-axis slice: a 1 x H x W image in [0, 1] and an H x W
/// label map. Multi mode labels background/RV/Myo/LV; single mode labels LV
/// against everything else as {0, 1}.
struct PhantomSample {
  Tensor image;
  std::vector<std::int32_t> mask;
  std::size_t height = 0;
  std::size_t width = 0;
};

struct Dataset {
  std::vector<PhantomSample> samples;
  std::vector<Split> splits;
  std::size_t num_classes = 4;

  std::vector<std::size_t> indices(Split split) const;
};

/// Deterministic phantom set. Size must be even and >= 32. Splits are drawn
/// 80/20 train/validation from the same seed.
Dataset generate_phantoms(std::size_t count, std::size_t size, std::uint64_t seed, PhantomMode mode);

/// images/NNNN.tnsr, masks/NNNN.tnsr and index.txt ("NNNN train|val" per line).
void save_dataset(const std::string& dir, const Dataset& data);
/// `num_classes` 0 infers the class count from the largest label present.
Dataset load_dataset(const std::string& dir, std::size_t num_classes = 0);

/// Stacks samples into an N x 1 x H x W batch and the matching N x H x W labels.
struct Batch {
  Tensor images;
  std::vector<std::int32_t> labels;
};
Batch make_batch(const Dataset& data, const std::vector<std::size_t>& indices);

}  // namespace clmr
