#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>

#include "clmr/error.hpp"
#include "clmr/model.hpp"
#include "clmr/tensor_io.hpp"

namespace clmr {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json describe(const std::vector<NamedTensor>& tensors) {
  json list = json::array();
  for (const auto& t : tensors) {
    list.push_back({{"name", t.name}, {"shape", t.tensor.shape()}, {"file", t.name + ".tnsr"}});
  }
  return list;
}

}  // namespace

void save_checkpoint(const std::string& dir, const Network& net) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir + ": " + ec.message());
  const auto buffers = net.buffers();
  json manifest;
  manifest["format"] = "clmr-checkpoint/1";
  manifest["spec"] = json::parse(net.spec().to_json());
  manifest["param_count"] = net.param_count();
  manifest["parameters"] = describe(net.parameters());
  manifest["buffers"] = describe(buffers);
  for (const auto& p : net.parameters()) save_tensor((fs::path(dir) / (p.name + ".tnsr")).string(), p.tensor);
  for (const auto& b : buffers) save_tensor((fs::path(dir) / (b.name + ".tnsr")).string(), b.tensor);
  std::ofstream out(fs::path(dir) / "manifest.json", std::ios::binary);
  if (!out) throw IoError("cannot write manifest in " + dir);
  out << manifest.dump(2) << '\n';
}

Network load_checkpoint(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.json", std::ios::binary);
  if (!in) throw IoError("no manifest.json in " + dir);
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("malformed checkpoint manifest in " + dir + ": " + e.what());
  }
  if (manifest.value("format", "") != "clmr-checkpoint/1") throw FormatError("unknown checkpoint format in " + dir);
  Network net = Network::build(ModelSpec::from_json(manifest.at("spec").dump()), 0);

  std::map<std::string, Tensor> by_name;
  for (const auto& p : net.parameters()) by_name.emplace(p.name, p.tensor);
  const auto& listed = manifest.at("parameters");
  if (listed.size() != by_name.size()) throw FormatError("checkpoint parameter list does not match its spec");
  for (const auto& entry : listed) {
    const auto name = entry.at("name").get<std::string>();
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint names unknown parameter " + name);
    Tensor loaded = load_tensor((fs::path(dir) / entry.at("file").get<std::string>()).string());
    if (loaded.shape() != it->second.shape()) {
      throw ShapeError("parameter " + name + " has shape " + shape_string(loaded.shape()) + ", expected " +
                       shape_string(it->second.shape()));
    }
    auto dst = it->second.values();
    const auto src = loaded.values();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  std::vector<NamedTensor> buffers;
  for (const auto& entry : manifest.at("buffers")) {
    buffers.push_back({entry.at("name").get<std::string>(),
                       load_tensor((fs::path(dir) / entry.at("file").get<std::string>()).string())});
  }
  net.load_buffers(buffers);
  return net;
}

}  // namespace clmr
