#include "disdyn/config.hpp"

#include <algorithm>
#include <fstream>

#include "disdyn/errors.hpp"

namespace disdyn::config {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
      throw ConfigError("unknown " + where + " key '" + key + "'");
    }
  }
}

}  // namespace

ProjectConfig default_config(dynsys::SystemKind system) {
  ProjectConfig cfg;
  cfg.system = system;
  for (auto s : datagen::kAllSplits) cfg.splits[s] = datagen::default_split(system, s);
  cfg.model = {{"family", "vae"}};
  return cfg;
}

std::uint64_t split_seed(std::uint64_t global_seed, datagen::Split split) {
  return derive_seed(global_seed, static_cast<std::uint64_t>(split));
}

void set_seed(ProjectConfig& cfg, std::uint64_t seed) {
  cfg.seed = seed;
  if (!cfg.train_seed_set) cfg.train.seed = seed;
}

ProjectConfig parse_config(const json& j) {
  reject_unknown(j, {"system", "seed", "out", "three_body_coupling", "tolerance", "splits", "model", "train", "grid", "eval"},
                 "config");
  try {
    const auto system = dynsys::parse_system(j.value("system", std::string("pendulum")));
    ProjectConfig cfg = default_config(system);
    const std::size_t k = dynsys::factor_count(system);
    if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("out")) cfg.out = j["out"].get<std::string>();
    if (j.contains("three_body_coupling")) cfg.coupling = dynsys::parse_coupling(j["three_body_coupling"].get<std::string>());
    if (j.contains("tolerance")) {
      cfg.tolerance = j["tolerance"].get<double>();
      if (!(cfg.tolerance > 0.0)) throw ConfigError("tolerance must be positive");
    }

    if (j.contains("splits")) {
      const auto& splits = j["splits"];
      if (!splits.is_object()) throw ConfigError("splits must be a JSON object");
      for (const auto& [name, body] : splits.items()) {
        const auto split = datagen::parse_split(name);
        reject_unknown(body, {"n_sequences", "noise_var", "seq_len", "ranges"}, "split '" + name + "'");
        auto& spec = cfg.splits[split];
        if (body.contains("n_sequences")) spec.n_sequences = body["n_sequences"].get<std::size_t>();
        if (body.contains("noise_var")) spec.noise_var = body["noise_var"].get<double>();
        if (body.contains("seq_len")) spec.seq_len = body["seq_len"].get<std::size_t>();
        if (body.contains("ranges")) {
          spec.factor_ranges.clear();
          for (const auto& r : body["ranges"]) {
            if (!r.is_array() || r.size() != 2) throw ConfigError("split '" + name + "': each range is [min, max]");
            spec.factor_ranges.push_back({r[0].get<double>(), r[1].get<double>()});
          }
        }
        if (spec.factor_ranges.size() != k) {
          throw ConfigError("split '" + name + "' lists " + std::to_string(spec.factor_ranges.size()) +
                            " factor ranges but " + std::string(dynsys::to_string(system)) + " has " +
                            std::to_string(k));
        }
        spec.validate();
      }
    }

    if (j.contains("model")) {
      cfg.model = j["model"];
      if (!cfg.model.is_object()) throw ConfigError("model must be a JSON object");
      if (cfg.model.contains("system") &&
          dynsys::parse_system(cfg.model["system"].get<std::string>()) != system) {
        throw ConfigError("model system does not match the config system");
      }
      if (!cfg.model.contains("family")) cfg.model["family"] = "vae";
      // surface spec errors (unknown keys, delta on unsupervised families) before any work
      json probe = cfg.model;
      probe["system"] = dynsys::to_string(system);
      neural::ModelSpec spec = probe.get<neural::ModelSpec>();
      if (spec.factor_ranges.empty() && neural::is_supervised(spec.family)) spec.factor_ranges = datagen::training_ranges(system);
      spec.validate();
    }

    if (j.contains("train")) {
      cfg.train = j["train"].get<trainer::TrainConfig>();
      cfg.train_seed_set = j["train"].contains("seed");
      cfg.train.validate();
    }
    if (!cfg.train_seed_set) cfg.train.seed = cfg.seed;

    if (j.contains("grid")) {
      const auto& g = j["grid"];
      reject_unknown(g, {"preset", "axes", "budget", "workers"}, "grid");
      if (g.contains("preset")) {
        const auto p = g["preset"].get<std::string>();
        if (p != "paper" && p != "none") throw ConfigError("unknown grid preset '" + p + "'");
        cfg.grid.paper_preset = p == "paper";
      }
      if (g.contains("axes")) {
        if (!g["axes"].is_object()) throw ConfigError("grid axes must be a JSON object");
        const auto& names = trainer::grid_axis_names();
        for (const auto& [axis, values] : g["axes"].items()) {
          if (std::find(names.begin(), names.end(), axis) == names.end()) {
            throw ConfigError("unknown grid axis '" + axis + "'");
          }
          if (!values.is_array() || values.empty()) throw ConfigError("grid axis '" + axis + "' needs a non-empty list");
          cfg.grid.axes[axis] = values.get<std::vector<json>>();
        }
      }
      if (g.contains("budget")) cfg.grid.budget = g["budget"].get<std::size_t>();
      if (g.contains("workers")) cfg.grid.workers = g["workers"].get<std::size_t>();
    }

    if (j.contains("eval")) {
      const auto& e = j["eval"];
      reject_unknown(e, {"horizon", "n_eval", "top_k"}, "eval");
      if (e.contains("horizon")) cfg.eval.horizon = e["horizon"].get<std::size_t>();
      if (e.contains("n_eval")) cfg.eval.n_eval = e["n_eval"].get<std::size_t>();
      if (e.contains("top_k")) cfg.eval.top_k = e["top_k"].get<std::size_t>();
      if (cfg.eval.horizon == 0 || cfg.eval.top_k == 0) throw ConfigError("eval horizon and top_k must be positive");
    }
    return cfg;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

ProjectConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

neural::ModelSpec model_spec(const ProjectConfig& cfg, const datagen::Dataset* train) {
  json m = cfg.model;
  m["system"] = dynsys::to_string(cfg.system);
  if (!m.contains("seed")) m["seed"] = cfg.seed;
  neural::ModelSpec spec;
  try {
    spec = m.get<neural::ModelSpec>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  if (neural::is_supervised(spec.family) && !cfg.model.contains("factor_ranges")) {
    if (train != nullptr) spec.factor_ranges = datagen::empirical_ranges(*train);
    else spec.factor_ranges = datagen::training_ranges(cfg.system);
  }
  spec.validate();
  return spec;
}

}  // namespace disdyn::config
