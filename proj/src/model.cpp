#include "clmr/model.hpp"

#include <cmath>
#include <nlohmann/json.hpp>
#include <random>
#include <string>

#include "clmr/error.hpp"

namespace clmr {

namespace {

using nlohmann::json;

const std::vector<std::size_t> kMicroLayers{2, 2, 3, 3, 4};
const std::vector<std::size_t> kMicroFilters{8, 16, 32, 64, 64};
const std::vector<std::size_t> kPaperLayers{6, 8, 11, 15, 20};
const std::vector<std::size_t> kPaperFilters{32, 64, 128, 256, 512};

std::vector<BlockSpec> mirrored(const std::vector<std::size_t>& layers, const std::vector<std::size_t>& filters) {
  std::vector<BlockSpec> blocks;
  for (std::size_t i = 0; i < layers.size(); ++i) blocks.push_back({layers[i], filters[i]});
  for (std::size_t i = layers.size(); i-- > 0;) blocks.push_back({layers[i], filters[i]});
  return blocks;
}

ModelSpec make_spec(Arch arch, std::size_t num_classes, Scale scale) {
  const bool micro = scale == Scale::Micro;
  const auto& layers = micro ? kMicroLayers : kPaperLayers;
  ModelSpec spec;
  spec.arch = arch;
  spec.scale = scale;
  spec.num_classes = num_classes;
  spec.skip_connections = arch != Arch::EncDec;
  if (arch == Arch::EncDec || arch == Arch::UNet) {
    spec.blocks = mirrored(layers, micro ? kMicroFilters : kPaperFilters);
    return spec;
  }
  spec.growth_rate = arch == Arch::DenseNet1 ? (micro ? 8 : 16) : (micro ? 12 : 24);
  spec.compression = arch == Arch::DenseNet2 ? 2 : 1;
  spec.stem_channels = micro ? 8 : 16;
  spec.blocks = mirrored(layers, std::vector<std::size_t>(layers.size(), spec.growth_rate));
  return spec;
}

void fill_he_uniform(Tensor& kernel, std::mt19937_64& rng) {
  const std::size_t fan_in = kernel.dim(1) * kernel.dim(2) * kernel.dim(3);
  const double bound = std::sqrt(6.0 / double(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : kernel.values()) v = dist(rng);
}

}  // namespace

std::string_view to_string(Arch arch) {
  switch (arch) {
    case Arch::EncDec: return "encdec";
    case Arch::UNet: return "unet";
    case Arch::DenseNet1: return "densenet1";
    case Arch::DenseNet2: return "densenet2";
  }
  return "unknown";
}

Arch parse_arch(std::string_view name) {
  for (auto a : {Arch::EncDec, Arch::UNet, Arch::DenseNet1, Arch::DenseNet2}) {
    if (to_string(a) == name) return a;
  }
  throw ConfigError("unknown architecture '" + std::string(name) + "'");
}

void ModelSpec::validate() const {
  if (blocks.empty() || blocks.size() % 2 != 0) {
    throw ConfigError("model needs an even, non-zero number of blocks (encoder + decoder)");
  }
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (blocks[i].layers == 0 || blocks[i].filters_or_growth == 0) {
      throw ConfigError("block " + std::to_string(i) + " has zero layers or filters");
    }
    if (!(blocks[i] == blocks[blocks.size() - 1 - i])) {
      throw ConfigError("encoder and decoder blocks must mirror each other (block " + std::to_string(i) + ")");
    }
  }
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (in_channels == 0) throw ConfigError("in_channels must be >= 1");
  if (compression == 0) throw ConfigError("compression must be >= 1");
  const bool wants_skip = arch != Arch::EncDec;
  if (skip_connections != wants_skip) {
    throw ConfigError(std::string(to_string(arch)) + (wants_skip ? " requires" : " forbids") + " skip connections");
  }
  if (dense()) {
    if (growth_rate == 0) throw ConfigError("dense architectures need a growth rate");
    if (stem_channels == 0) throw ConfigError("dense architectures need stem channels");
    for (const auto& b : blocks) {
      if (b.filters_or_growth != growth_rate) throw ConfigError("dense block growth must equal growth_rate");
    }
    if (arch == Arch::DenseNet2 && compression != 2) throw ConfigError("densenet2 uses compression 2");
    if (arch == Arch::DenseNet1 && compression != 1) throw ConfigError("densenet1 has no compression");
  } else if (compression != 1 || growth_rate != 0 || stem_channels != 0) {
    throw ConfigError("CNN architectures take no growth rate, compression or stem");
  }
}

ModelSpec ModelSpec::micro(Arch arch, std::size_t num_classes) { return make_spec(arch, num_classes, Scale::Micro); }
ModelSpec ModelSpec::paper(Arch arch, std::size_t num_classes) { return make_spec(arch, num_classes, Scale::Paper); }

std::string ModelSpec::to_json() const {
  json j;
  j["arch"] = std::string(to_string(arch));
  json b = json::array();
  for (const auto& blk : blocks) b.push_back({{"layers", blk.layers}, {"filters_or_growth", blk.filters_or_growth}});
  j["blocks"] = b;
  j["growth_rate"] = growth_rate;
  j["compression"] = compression;
  j["skip_connections"] = skip_connections;
  j["num_classes"] = num_classes;
  j["in_channels"] = in_channels;
  j["stem_channels"] = stem_channels;
  j["scale"] = scale == Scale::Micro ? "micro" : "paper";
  return j.dump(2);
}

ModelSpec ModelSpec::from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    const Arch arch = parse_arch(j.at("arch").get<std::string>());
    const std::string scale_name = j.value("scale", "micro");
    if (scale_name != "micro" && scale_name != "paper") throw ConfigError("scale must be micro or paper");
    ModelSpec spec = make_spec(arch, j.value("num_classes", std::size_t(4)),
                               scale_name == "micro" ? Scale::Micro : Scale::Paper);
    if (j.contains("blocks")) {
      spec.blocks.clear();
      for (const auto& b : j.at("blocks")) {
        spec.blocks.push_back({b.at("layers").get<std::size_t>(), b.at("filters_or_growth").get<std::size_t>()});
      }
    }
    spec.growth_rate = j.value("growth_rate", spec.growth_rate);
    spec.compression = j.value("compression", spec.compression);
    spec.skip_connections = j.value("skip_connections", spec.skip_connections);
    spec.in_channels = j.value("in_channels", spec.in_channels);
    spec.stem_channels = j.value("stem_channels", spec.stem_channels);
    spec.validate();
    return spec;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid model spec: ") + e.what());
  }
}

std::vector<std::size_t> dense_block_channels(const DenseBlockConfig& cfg) {
  if (cfg.num_layers == 0) throw ConfigError("dense block needs at least one layer");
  if (cfg.in_channels == 0) throw ConfigError("dense block needs at least one input channel");
  if (cfg.out_per_layer == 0) throw ConfigError("dense block layers must emit at least one channel");
  std::vector<std::size_t> channels(cfg.num_layers);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) channels[l] = l * cfg.out_per_layer + cfg.in_channels;
  return channels;
}

Tensor cbr_forward(const Tensor& input, CbrLayer& layer, Mode mode) {
  Tensor z = conv2d(input, layer.kernel, Tensor{}, Padding::Same);
  return relu(batch_norm(z, layer.gamma, layer.shift, layer.stats, mode));
}

Tensor dense_block_forward(const Tensor& input, DenseBlock& block, Mode mode, std::vector<std::size_t>* widths) {
  const auto expected = dense_block_channels(block.cfg);
  if (block.layers.size() != block.cfg.num_layers) throw ShapeError("dense block layer count mismatch");
  Tensor features = input;
  for (std::size_t l = 0; l < block.layers.size(); ++l) {
    if (features.dim(1) != expected[l]) {
      throw ShapeError("dense layer " + std::to_string(l) + " expects " + std::to_string(expected[l]) +
                       " input channels, got " + std::to_string(features.dim(1)));
    }
    if (widths) widths->push_back(features.dim(1));
    features = concat_channels(features, cbr_forward(features, block.layers[l], mode));
  }
  if (widths) widths->push_back(features.dim(1));
  return features;
}

Tensor compress_channels(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t compression) {
  if (compression == 0) throw ConfigError("compression must be >= 1");
  const std::size_t cin = input.dim(1);
  if (cin % compression != 0) {
    throw ShapeError(std::to_string(cin) + " channels are not divisible by compression " + std::to_string(compression));
  }
  if (kernel.rank() != 4 || kernel.dim(0) != cin / compression || kernel.dim(2) != 1 || kernel.dim(3) != 1) {
    throw ShapeError("compression kernel must be " + std::to_string(cin / compression) + "x" + std::to_string(cin) +
                     "x1x1");
  }
  return conv2d(input, kernel, bias, Padding::Same);
}

std::size_t param_count(std::span<const Tensor> params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.numel();
  return n;
}

Network Network::build(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Network net;
  net.spec_ = spec;
  std::mt19937_64 rng(seed);

  auto kernel = [&](const std::string& name, std::size_t cout, std::size_t cin, std::size_t k) {
    Tensor t({cout, cin, k, k}, 0.0, true);
    fill_he_uniform(t, rng);
    net.params_.push_back({name, t});
    return t;
  };
  auto vec = [&](const std::string& name, std::size_t n, double fill) {
    Tensor t({n}, fill, true);
    net.params_.push_back({name, t});
    return t;
  };
  auto cbr = [&](const std::string& name, std::size_t cin, std::size_t cout) {
    CbrLayer layer;
    layer.kernel = kernel(name + ".kernel", cout, cin, 3);
    layer.gamma = vec(name + ".gamma", cout, 1.0);
    layer.shift = vec(name + ".shift", cout, 0.0);
    layer.stats = BatchNormStats::init(cout);
    return layer;
  };
  auto block = [&](Stage& stage, const std::string& name, std::size_t cin, const BlockSpec& bs) {
    if (!spec.dense()) {
      for (std::size_t l = 0; l < bs.layers; ++l) {
        stage.cnn.push_back(cbr(name + ".l" + std::to_string(l), l == 0 ? cin : bs.filters_or_growth,
                                bs.filters_or_growth));
      }
      stage.out_channels = bs.filters_or_growth;
      return;
    }
    stage.dense.cfg = {bs.layers, cin, bs.filters_or_growth};
    const auto channels = dense_block_channels(stage.dense.cfg);
    for (std::size_t l = 0; l < bs.layers; ++l) {
      stage.dense.layers.push_back(cbr(name + ".l" + std::to_string(l), channels[l], bs.filters_or_growth));
    }
    std::size_t out = cin + bs.layers * bs.filters_or_growth;
    if (spec.compression > 1) {
      if (out % spec.compression != 0) {
        throw ConfigError(name + " emits " + std::to_string(out) + " channels, not divisible by compression " +
                          std::to_string(spec.compression));
      }
      stage.compress_kernel = kernel(name + ".compress.kernel", out / spec.compression, out, 1);
      stage.compress_bias = vec(name + ".compress.bias", out / spec.compression, 0.0);
      out /= spec.compression;
    }
    stage.out_channels = out;
  };

  std::size_t ch = spec.in_channels;
  if (spec.dense()) {
    net.stem_ = cbr("stem", ch, spec.stem_channels);
    net.has_stem_ = true;
    ch = spec.stem_channels;
  }
  const std::size_t depth = spec.depth();
  std::vector<std::size_t> skip_channels;
  for (std::size_t b = 0; b < depth; ++b) {
    Stage stage;
    block(stage, "enc" + std::to_string(b), ch, spec.blocks[b]);
    ch = stage.out_channels;
    skip_channels.push_back(ch);
    net.encoder_.push_back(std::move(stage));
  }
  for (std::size_t j = 0; j < depth; ++j) {
    Stage stage;
    const std::string name = "dec" + std::to_string(j);
    if (j > 0) {
      const std::size_t target = skip_channels[depth - 1 - j];
      stage.up_kernel = kernel(name + ".up.kernel", target, ch, 3);
      stage.up_bias = vec(name + ".up.bias", target, 0.0);
      ch = target;
      if (spec.skip_connections) ch += skip_channels[depth - 1 - j];
    }
    block(stage, name, ch, spec.blocks[depth + j]);
    ch = stage.out_channels;
    net.decoder_.push_back(std::move(stage));
  }
  net.head_kernel_ = kernel("head.kernel", spec.num_classes, ch, 1);
  net.head_bias_ = vec("head.bias", spec.num_classes, 0.0);
  return net;
}

Tensor Network::run_stage(Stage& stage, const Tensor& x, Mode mode) {
  Tensor y = x;
  if (spec_.dense()) {
    observed_dense_.emplace_back();
    y = dense_block_forward(y, stage.dense, mode, &observed_dense_.back());
    if (stage.compress_kernel.defined()) y = compress_channels(y, stage.compress_kernel, stage.compress_bias, spec_.compression);
  } else {
    for (auto& layer : stage.cnn) y = cbr_forward(y, layer, mode);
  }
  return y;
}

Tensor Network::forward(const Tensor& input, Mode mode) {
  if (input.rank() != 4 || input.dim(1) != spec_.in_channels) {
    throw ShapeError("network expects N x " + std::to_string(spec_.in_channels) + " x H x W input, got " +
                     shape_string(input.shape()));
  }
  const std::size_t depth = spec_.depth();
  const std::size_t factor = std::size_t(1) << (depth - 1);
  if (input.dim(2) % factor != 0 || input.dim(3) % factor != 0) {
    throw ShapeError("input spatial size must be divisible by " + std::to_string(factor));
  }
  observed_dense_.clear();
  Tensor x = input;
  if (has_stem_) x = cbr_forward(x, stem_, mode);
  std::vector<Tensor> skips;
  for (std::size_t b = 0; b < depth; ++b) {
    x = run_stage(encoder_[b], x, mode);
    skips.push_back(x);
    if (b + 1 < depth) x = max_pool2x2(x);
  }
  for (std::size_t j = 0; j < depth; ++j) {
    auto& stage = decoder_[j];
    if (j > 0) {
      x = conv2d(upsample2x(x), stage.up_kernel, stage.up_bias, Padding::Same);
      if (spec_.skip_connections) x = concat_channels(x, skips[depth - 1 - j]);
    }
    x = run_stage(stage, x, mode);
  }
  return conv2d(x, head_kernel_, head_bias_, Padding::Same);
}

std::vector<Tensor> Network::parameter_tensors() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.tensor);
  return out;
}

std::size_t Network::param_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

void Network::zero_grad() {
  for (auto& p : params_) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

std::vector<CbrLayer*> Network::all_cbr() {
  std::vector<CbrLayer*> out;
  if (has_stem_) out.push_back(&stem_);
  for (auto* stages : {&encoder_, &decoder_}) {
    for (auto& s : *stages) {
      for (auto& l : s.cnn) out.push_back(&l);
      for (auto& l : s.dense.layers) out.push_back(&l);
    }
  }
  return out;
}

std::vector<NamedTensor> Network::buffers() const {
  // Names follow the owning layer's kernel parameter.
  std::vector<NamedTensor> out;
  std::vector<const CbrLayer*> layers;
  if (has_stem_) layers.push_back(&stem_);
  for (const auto* stages : {&encoder_, &decoder_}) {
    for (const auto& s : *stages) {
      for (const auto& l : s.cnn) layers.push_back(&l);
      for (const auto& l : s.dense.layers) layers.push_back(&l);
    }
  }
  std::size_t idx = 0;
  for (const auto& p : params_) {
    const std::string suffix = ".kernel";
    if (idx >= layers.size()) break;
    if (p.tensor.impl() != layers[idx]->kernel.impl()) continue;
    const std::string base = p.name.substr(0, p.name.size() - suffix.size());
    const auto& st = layers[idx]->stats;
    out.push_back({base + ".running_mean", Tensor({st.running_mean.size()}, st.running_mean)});
    out.push_back({base + ".running_var", Tensor({st.running_var.size()}, st.running_var)});
    ++idx;
  }
  return out;
}

void Network::load_buffers(const std::vector<NamedTensor>& buffers) {
  const auto layers = all_cbr();
  if (buffers.size() != 2 * layers.size()) {
    throw ShapeError("expected " + std::to_string(2 * layers.size()) + " batch-norm buffers, got " +
                     std::to_string(buffers.size()));
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto& st = layers[i]->stats;
    const auto mean = buffers[2 * i].tensor.values();
    const auto var = buffers[2 * i + 1].tensor.values();
    if (mean.size() != st.running_mean.size() || var.size() != st.running_var.size()) {
      throw ShapeError("batch-norm buffer " + buffers[2 * i].name + " has the wrong size");
    }
    st.running_mean.assign(mean.begin(), mean.end());
    st.running_var.assign(var.begin(), var.end());
  }
}

}  // namespace clmr
