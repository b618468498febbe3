#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "clmr/error.hpp"
#include "clmr/harness.hpp"

namespace clmr {

using nlohmann::json;

namespace {

const std::set<std::string> kExperimentKeys = {
    "arch",  "scale",  "model", "optimizer", "alpha", "beta", "beta1", "beta2", "epsilon", "min_lr", "max_lr",
    "min_mr", "max_mr", "c_lr", "c_mr",      "epochs", "batch", "seed", "out",  "data"};
const std::set<std::string> kDataKeys = {"path", "count", "size", "seed", "mode", "memorize"};

template <typename T>
T get(const json& obj, const char* key, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

json parse_text(const std::string& text, const std::string& where) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError("malformed JSON in " + where + ": " + e.what());
  }
}

json read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_text(ss.str(), path);
}

void check_keys(const json& obj, const std::set<std::string>& allowed, const std::set<std::string>& extra,
                const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& item : obj.items()) {
    if (!allowed.count(item.key()) && !extra.count(item.key())) {
      throw ConfigError("unknown key '" + item.key() + "' in " + where);
    }
  }
}

std::size_t classes_for(PhantomMode mode) { return mode == PhantomMode::Single ? 2 : 4; }

ExperimentConfig apply_json(const json& obj, ExperimentConfig cfg) {
  bool rebuild = false;
  if (obj.contains("data")) {
    const json& d = obj.at("data");
    check_keys(d, kDataKeys, {}, "data");
    DataSource& src = cfg.data;
    src.path = get<std::string>(d, "path", src.path);
    src.count = get<std::size_t>(d, "count", src.count);
    src.size = get<std::size_t>(d, "size", src.size);
    src.seed = get<std::uint64_t>(d, "seed", src.seed);
    src.memorize = get<bool>(d, "memorize", src.memorize);
    if (d.contains("mode")) {
      src.mode = parse_phantom_mode(get<std::string>(d, "mode", ""));
      rebuild = true;
    }
  }

  Arch arch = cfg.model.arch;
  Scale scale = cfg.model.scale;
  if (obj.contains("arch")) {
    arch = parse_arch(get<std::string>(obj, "arch", ""));
    rebuild = true;
  }
  if (obj.contains("scale")) {
    const auto s = get<std::string>(obj, "scale", "");
    if (s == "micro") {
      scale = Scale::Micro;
    } else if (s == "paper") {
      scale = Scale::Paper;
    } else {
      throw ConfigError("unknown scale '" + s + "' (expected micro or paper)");
    }
    rebuild = true;
  }
  if (obj.contains("model")) {
    cfg.model = ModelSpec::from_json(obj.at("model").dump());
  } else if (rebuild) {
    const std::size_t classes = classes_for(cfg.data.mode);
    cfg.model = scale == Scale::Paper ? ModelSpec::paper(arch, classes) : ModelSpec::micro(arch, classes);
  }

  if (obj.contains("optimizer")) cfg.optimizer = parse_optimizer_kind(get<std::string>(obj, "optimizer", ""));
  cfg.hyper.alpha = get<double>(obj, "alpha", cfg.hyper.alpha);
  cfg.hyper.beta = get<double>(obj, "beta", cfg.hyper.beta);
  cfg.hyper.beta1 = get<double>(obj, "beta1", cfg.hyper.beta1);
  cfg.hyper.beta2 = get<double>(obj, "beta2", cfg.hyper.beta2);
  cfg.hyper.epsilon = get<double>(obj, "epsilon", cfg.hyper.epsilon);
  cfg.cycle.min_lr = get<double>(obj, "min_lr", cfg.cycle.min_lr);
  cfg.cycle.max_lr = get<double>(obj, "max_lr", cfg.cycle.max_lr);
  cfg.cycle.min_mr = get<double>(obj, "min_mr", cfg.cycle.min_mr);
  cfg.cycle.max_mr = get<double>(obj, "max_mr", cfg.cycle.max_mr);
  cfg.cycle.c_lr = get<std::int64_t>(obj, "c_lr", cfg.cycle.c_lr);
  cfg.cycle.c_mr = get<std::int64_t>(obj, "c_mr", cfg.cycle.c_mr);
  cfg.epochs = get<std::int64_t>(obj, "epochs", cfg.epochs);
  cfg.batch_size = get<std::size_t>(obj, "batch", cfg.batch_size);
  cfg.seed = get<std::uint64_t>(obj, "seed", cfg.seed);
  cfg.out_dir = get<std::string>(obj, "out", cfg.out_dir);
  return cfg;
}

std::vector<std::uint64_t> read_seeds(const json& obj, std::uint64_t fallback) {
  if (!obj.contains("seeds")) return {fallback};
  auto seeds = get<std::vector<std::uint64_t>>(obj, "seeds", {});
  if (seeds.empty()) throw ConfigError("'seeds' must not be empty");
  return seeds;
}

}  // namespace

ExperimentConfig experiment_from_json(const std::string& text, ExperimentConfig base) {
  const json obj = parse_text(text, "experiment config");
  check_keys(obj, kExperimentKeys, {}, "experiment config");
  return apply_json(obj, std::move(base));
}

std::string experiment_to_json(const ExperimentConfig& c) {
  json obj;
  obj["model"] = json::parse(c.model.to_json());
  obj["optimizer"] = std::string(to_string(c.optimizer));
  obj["alpha"] = c.hyper.alpha;
  obj["beta"] = c.hyper.beta;
  obj["beta1"] = c.hyper.beta1;
  obj["beta2"] = c.hyper.beta2;
  obj["epsilon"] = c.hyper.epsilon;
  obj["min_lr"] = c.cycle.min_lr;
  obj["max_lr"] = c.cycle.max_lr;
  obj["min_mr"] = c.cycle.min_mr;
  obj["max_mr"] = c.cycle.max_mr;
  obj["c_lr"] = c.cycle.c_lr;
  obj["c_mr"] = c.cycle.c_mr;
  obj["epochs"] = c.epochs;
  obj["batch"] = c.batch_size;
  obj["seed"] = c.seed;
  obj["out"] = c.out_dir;
  obj["data"] = {{"path", c.data.path},
                 {"count", c.data.count},
                 {"size", c.data.size},
                 {"seed", c.data.seed},
                 {"mode", std::string(to_string(c.data.mode))},
                 {"memorize", c.data.memorize}};
  return obj.dump(2);
}

GridPlan load_grid_plan(const std::string& path) {
  const json obj = read_file(path);
  check_keys(obj, kExperimentKeys, {"c_lr_values", "c_mr_values", "seeds"}, path);
  GridPlan plan;
  json base = obj;
  for (const char* k : {"c_lr_values", "c_mr_values", "seeds"}) base.erase(k);
  plan.base = apply_json(base, {});
  plan.c_lr_values = get<std::vector<std::int64_t>>(obj, "c_lr_values", {2, 8, 20});
  plan.c_mr_values = get<std::vector<std::int64_t>>(obj, "c_mr_values", {2, 8, 20});
  plan.seeds = read_seeds(obj, plan.base.seed);
  return plan;
}

ComparePlan load_compare_plan(const std::string& path) {
  const json obj = read_file(path);
  check_keys(obj, kExperimentKeys, {"runs", "seeds"}, path);
  json base_obj = obj;
  base_obj.erase("runs");
  base_obj.erase("seeds");
  const ExperimentConfig base = apply_json(base_obj, {});

  ComparePlan plan;
  plan.seeds = read_seeds(obj, base.seed);
  if (!obj.contains("runs") || !obj.at("runs").is_array() || obj.at("runs").empty()) {
    throw ConfigError(path + ": 'runs' must be a non-empty array");
  }
  for (const auto& run : obj.at("runs")) {
    check_keys(run, kExperimentKeys, {}, path + " run entry");
    plan.configs.push_back(apply_json(run, base));
  }
  return plan;
}

}  // namespace clmr
