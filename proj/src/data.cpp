#include "clmr/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "clmr/error.hpp"
#include "clmr/tensor_io.hpp"

namespace clmr {

namespace fs = std::filesystem;

namespace {

struct Ellipse {
  double cx, cy, a, b, theta;

  // <= 1 inside.
  double level(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(theta), s = std::sin(theta);
    const double u = (dx * c + dy * s) / a;
    const double v = (-dx * s + dy * c) / b;
    return u * u + v * v;
  }
};

constexpr double kNoiseSigma = 0.05;

// Draws one multi-class label map and its image. Returns false when the
// geometry left a structure empty so the caller can redraw.
bool draw_phantom(std::size_t size, std::mt19937_64& rng, std::vector<std::int32_t>& mask, std::vector<double>& img) {
  const double S = double(size);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };

  const double cx = S / 2 + uni(-0.08, 0.08) * S;
  const double cy = S / 2 + uni(-0.08, 0.08) * S;
  const double lv_a = uni(0.09, 0.14) * S;
  const double lv_b = lv_a * uni(0.8, 1.0);
  const double rot = uni(0.0, std::numbers::pi);
  const double wall = uni(0.05, 0.08) * S;
  const Ellipse lv{cx, cy, lv_a, lv_b, rot};
  const Ellipse myo{cx, cy, lv_a + wall, lv_b + wall, rot};

  // RV: a wider ellipse pushed to one side of the LV; the part outside the
  // myocardium forms a crescent.
  const double side = std::numbers::pi + uni(-0.6, 0.6);
  const double reach = (lv_a + wall) * uni(0.55, 0.85);
  const double rv_a = (lv_a + wall) * uni(1.05, 1.35);
  const double rv_b = rv_a * uni(0.55, 0.8);
  const Ellipse rv{cx + reach * std::cos(side), cy + reach * std::sin(side), rv_b, rv_a, side};
  const Ellipse myo_gap{cx, cy, lv_a + wall + 1.0, lv_b + wall + 1.0, rot};

  const double lv_int = uni(0.8, 0.92);
  const double rv_int = uni(0.68, 0.8);
  const double myo_int = uni(0.32, 0.42);
  const double bg_int = uni(0.12, 0.24);
  const double grad_mag = uni(-0.12, 0.12);
  const double grad_dir = uni(0.0, 2 * std::numbers::pi);
  std::normal_distribution<double> noise(0.0, kNoiseSigma);

  std::size_t counts[4] = {0, 0, 0, 0};
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double px = double(x) + 0.5, py = double(y) + 0.5;
      std::int32_t cls = label::kBackground;
      double base = bg_int;
      if (lv.level(px, py) <= 1.0) {
        cls = label::kLv;
        base = lv_int;
      } else if (myo.level(px, py) <= 1.0) {
        cls = label::kMyo;
        base = myo_int;
      } else if (rv.level(px, py) <= 1.0 && myo_gap.level(px, py) > 1.0) {
        cls = label::kRv;
        base = rv_int;
      }
      const double ramp = grad_mag * ((px / S - 0.5) * std::cos(grad_dir) + (py / S - 0.5) * std::sin(grad_dir));
      const std::size_t k = y * size + x;
      mask[k] = cls;
      img[k] = std::clamp(base + ramp + noise(rng), 0.0, 1.0);
      ++counts[cls];
    }
  }
  return counts[label::kRv] >= 8 && counts[label::kMyo] > 0 && counts[label::kLv] > 0;
}

}  // namespace

std::string_view to_string(PhantomMode mode) { return mode == PhantomMode::Single ? "single" : "multi"; }

PhantomMode parse_phantom_mode(std::string_view name) {
  if (name == "single") return PhantomMode::Single;
  if (name == "multi") return PhantomMode::Multi;
  throw ConfigError("phantom mode must be single or multi, got '" + std::string(name) + "'");
}

std::vector<std::size_t> Dataset::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < splits.size(); ++i) {
    if (splits[i] == split) out.push_back(i);
  }
  return out;
}

Dataset generate_phantoms(std::size_t count, std::size_t size, std::uint64_t seed, PhantomMode mode) {
  if (size < 32 || size % 2 != 0) {
    throw ConfigError("phantom size must be even and >= 32 to hold the structures, got " + std::to_string(size));
  }
  if (count == 0) throw ConfigError("phantom count must be >= 1");
  Dataset data;
  data.num_classes = mode == PhantomMode::Multi ? 4 : 2;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    PhantomSample s;
    s.height = s.width = size;
    s.mask.resize(size * size);
    std::vector<double> img(size * size);
    while (!draw_phantom(size, rng, s.mask, img)) {
    }
    if (mode == PhantomMode::Single) {
      for (auto& m : s.mask) m = m == label::kLv ? 1 : 0;
    }
    s.image = Tensor({1, size, size}, std::move(img));
    data.samples.push_back(std::move(s));
  }
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  std::mt19937_64 split_rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::shuffle(order.begin(), order.end(), split_rng);
  const std::size_t n_val = count / 5;
  data.splits.assign(count, Split::Train);
  for (std::size_t i = 0; i < n_val; ++i) data.splits[order[i]] = Split::Val;
  return data;
}

void save_dataset(const std::string& dir, const Dataset& data) {
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "images", ec);
  fs::create_directories(fs::path(dir) / "masks", ec);
  if (ec) throw IoError("cannot create dataset directory " + dir + ": " + ec.message());
  std::ofstream index(fs::path(dir) / "index.txt", std::ios::binary);
  if (!index) throw IoError("cannot write index.txt in " + dir);
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    char id[16];
    std::snprintf(id, sizeof(id), "%04zu", i);
    const auto& s = data.samples[i];
    save_tensor((fs::path(dir) / "images" / (std::string(id) + ".tnsr")).string(), s.image);
    std::vector<double> mask(s.mask.begin(), s.mask.end());
    save_tensor((fs::path(dir) / "masks" / (std::string(id) + ".tnsr")).string(),
                Tensor({s.height, s.width}, std::move(mask)));
    index << id << ' ' << (data.splits[i] == Split::Train ? "train" : "val") << '\n';
  }
}

Dataset load_dataset(const std::string& dir, std::size_t num_classes) {
  std::ifstream index(fs::path(dir) / "index.txt");
  if (!index) throw IoError("no index.txt in " + dir);
  Dataset data;
  std::int32_t max_label = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(index, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string id, split;
    if (!(fields >> id >> split) || (split != "train" && split != "val")) {
      throw FormatError(dir + "/index.txt line " + std::to_string(line_no) + ": expected '<id> train|val'");
    }
    PhantomSample s;
    s.image = load_tensor((fs::path(dir) / "images" / (id + ".tnsr")).string());
    const Tensor mask = load_tensor((fs::path(dir) / "masks" / (id + ".tnsr")).string());
    if (s.image.rank() != 3 || s.image.dim(0) != 1 || mask.rank() != 2 || mask.dim(0) != s.image.dim(1) ||
        mask.dim(1) != s.image.dim(2)) {
      throw ShapeError("sample " + id + ": image " + shape_string(s.image.shape()) + " and mask " +
                       shape_string(mask.shape()) + " do not match");
    }
    s.height = mask.dim(0);
    s.width = mask.dim(1);
    s.mask.reserve(mask.numel());
    for (double v : mask.values()) {
      if (v < 0 || v != std::floor(v)) throw FormatError("sample " + id + ": mask holds a non-class value");
      s.mask.push_back(std::int32_t(v));
      max_label = std::max(max_label, s.mask.back());
    }
    data.samples.push_back(std::move(s));
    data.splits.push_back(split == "train" ? Split::Train : Split::Val);
  }
  if (data.samples.empty()) throw FormatError(dir + "/index.txt lists no samples");
  data.num_classes = num_classes ? num_classes : std::max<std::size_t>(2, std::size_t(max_label) + 1);
  if (std::size_t(max_label) >= data.num_classes) {
    throw DomainError("dataset label " + std::to_string(max_label) + " exceeds class count");
  }
  return data;
}

Batch make_batch(const Dataset& data, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ConfigError("empty batch");
  const auto& first = data.samples.at(indices.front());
  const std::size_t h = first.height, w = first.width;
  std::vector<double> images;
  Batch batch;
  images.reserve(indices.size() * h * w);
  batch.labels.reserve(indices.size() * h * w);
  for (auto i : indices) {
    const auto& s = data.samples.at(i);
    if (s.height != h || s.width != w) throw ShapeError("samples in a batch must share their size");
    const auto v = s.image.values();
    images.insert(images.end(), v.begin(), v.end());
    batch.labels.insert(batch.labels.end(), s.mask.begin(), s.mask.end());
  }
  batch.images = Tensor({indices.size(), 1, h, w}, std::move(images));
  return batch;
}

}  // namespace clmr
