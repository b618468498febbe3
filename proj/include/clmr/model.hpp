#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "clmr/ops.hpp"
#include "clmr/tensor.hpp"

namespace clmr {

enum class Arch { EncDec, UNet, DenseNet1, DenseNet2 };
enum class Scale { Micro, Paper };

std::string_view to_string(Arch arch);
/// Accepts encdec, unet, densenet1, densenet2.
Arch parse_arch(std::string_view name);

struct BlockSpec {
  std::size_t layers = 1;
  /// Filters per layer for CNN blocks, growth rate for dense blocks.
  std::size_t filters_or_growth = 1;

  bool operator==(const BlockSpec&) const = default;
};

/// Architecture description. `blocks` lists encoder blocks followed by
/// decoder blocks and must read the same backwards. 2x2 pooling separates
/// encoder blocks; each decoder block after the first is preceded by a
/// nearest-neighbour upsample and a 3x3 conv.
struct ModelSpec {
  Arch arch = Arch::UNet;
  std::vector<BlockSpec> blocks;
  std::size_t growth_rate = 0;   // dense variants
  std::size_t compression = 1;   // channel divisor at dense-block exits
  bool skip_connections = true;
  std::size_t num_classes = 4;
  std::size_t in_channels = 1;
  std::size_t stem_channels = 0;  // dense variants: CBR layer ahead of the first block
  Scale scale = Scale::Micro;

  void validate() const;
  std::size_t depth() const { return blocks.size() / 2; }
  bool dense() const { return arch == Arch::DenseNet1 || arch == Arch::DenseNet2; }

  /// Desk-scale configuration: layers (2,2,3,3,4) and filters (8,16,32,64,64),
  /// mirrored; growth 8 (DenseNet_1) or 12 with compression 2 (DenseNet_2).
  static ModelSpec micro(Arch arch, std::size_t num_classes = 4);
  /// Full-size block table (6,8,11,15,20 layers; 32..512 filters; GR 16/24).
  static ModelSpec paper(Arch arch, std::size_t num_classes = 4);

  std::string to_json() const;
  static ModelSpec from_json(const std::string& text);

  bool operator==(const ModelSpec&) const = default;
};

struct DenseBlockConfig {
  std::size_t num_layers = 1;     // L
  std::size_t in_channels = 1;    // K_in1
  std::size_t out_per_layer = 1;  // K_out
};

/// Input channels seen by each layer: K_in1 + l * K_out for l = 0..L-1.
std::vector<std::size_t> dense_block_channels(const DenseBlockConfig& cfg);

/// Conv (no bias) + batch norm + ReLU.
struct CbrLayer {
  Tensor kernel;
  Tensor gamma;
  Tensor shift;
  BatchNormStats stats;
};

Tensor cbr_forward(const Tensor& input, CbrLayer& layer, Mode mode);

struct DenseBlock {
  DenseBlockConfig cfg;
  std::vector<CbrLayer> layers;
};

/// Layer l consumes the concatenation of the block input and all earlier
/// layer outputs; the block returns the full concatenation
/// (L * K_out + K_in1 channels). `widths`, when given, receives the channel
/// count each layer consumed followed by the block's output width.
Tensor dense_block_forward(const Tensor& input, DenseBlock& block, Mode mode,
                           std::vector<std::size_t>* widths = nullptr);

/// 1x1 convolution from C_in to C_in / compression channels.
Tensor compress_channels(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t compression);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

std::size_t param_count(std::span<const Tensor> params);

/// A built segmentation network. Structure is fixed at build time; parameter
/// values change during training. Move-only because members alias storage.
class Network {
 public:
  static Network build(const ModelSpec& spec, std::uint64_t seed);

  Network(Network&&) = default;
  Network& operator=(Network&&) = default;
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  /// N x in_channels x H x W -> N x num_classes x H x W logits. H and W must
  /// be divisible by 2^(depth-1).
  Tensor forward(const Tensor& input, Mode mode);

  const ModelSpec& spec() const { return spec_; }
  const std::vector<NamedTensor>& parameters() const { return params_; }
  std::vector<Tensor> parameter_tensors() const;
  std::size_t param_count() const;
  void zero_grad();

  /// Batch-norm running statistics, exposed as tensors for checkpointing.
  std::vector<NamedTensor> buffers() const;
  void load_buffers(const std::vector<NamedTensor>& buffers);

  /// Per dense block of the last forward pass: the input width of each layer,
  /// then the block output width.
  const std::vector<std::vector<std::size_t>>& observed_dense_channels() const { return observed_dense_; }

 private:
  struct Stage {
    std::vector<CbrLayer> cnn;   // CNN block layers
    DenseBlock dense;            // dense block (dense variants)
    Tensor compress_kernel;      // DenseNet_2
    Tensor compress_bias;
    Tensor up_kernel;            // decoder stages after the first
    Tensor up_bias;
    std::size_t out_channels = 0;
  };

  Network() = default;
  Tensor run_stage(Stage& stage, const Tensor& x, Mode mode);
  std::vector<CbrLayer*> all_cbr();

  ModelSpec spec_;
  CbrLayer stem_;
  bool has_stem_ = false;
  std::vector<Stage> encoder_;
  std::vector<Stage> decoder_;
  Tensor head_kernel_;
  Tensor head_bias_;
  std::vector<NamedTensor> params_;
  std::vector<std::vector<std::size_t>> observed_dense_;
};

/// Directory of TNSR files plus `manifest.json` naming every parameter and
/// buffer with its shape, and the ModelSpec.
void save_checkpoint(const std::string& dir, const Network& net);
Network load_checkpoint(const std::string& dir);

}  // namespace clmr
