/**
 * @file config.hpp
 * @brief The project configuration document read by every subcommand.
 *
 * {
 *   "system": "pendulum", "seed": 7, "out": "runs/x",
 *   "three_body_coupling": "force", "tolerance": 1e-8,
 *   "splits": {"train": {"n_sequences": 800, "noise_var": 1e-4, "seq_len": 1000,
 *                        "ranges": [[1.0, 1.5]]}, ...},
 *   "model": {"family": "vae_sd", "latent_size": 8, ...},
 *   "train": {"lr": 1e-3, "max_epochs": 300, ...},
 *   "grid": {"preset": "paper", "axes": {"latent_size": [8, 16]}, "budget": 100, "workers": 4},
 *   "eval": {"horizon": 200, "n_eval": 0, "top_k": 5}
 * }
 *
 * Every section is optional; unknown keys are rejected.
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include "disdyn/datagen.hpp"
#include "disdyn/neural.hpp"
#include "disdyn/run_record.hpp"
#include "disdyn/trainer.hpp"
#include "json.hpp"

namespace disdyn::config {

struct GridConfig {
  /// Start from the published grid of the model's system and family.
  bool paper_preset = false;
  /// Extra or replacement axes, applied over the preset.
  trainer::GridAxes axes;
  std::size_t budget = 10000;
  std::size_t workers = 1;
};

struct EvalConfig {
  std::size_t horizon = 200;
  /// Trajectories per split; 0 = all.
  std::size_t n_eval = 0;
  std::size_t top_k = 5;
};

struct ProjectConfig {
  dynsys::SystemKind system = dynsys::SystemKind::Pendulum;
  std::uint64_t seed = 0;
  std::optional<std::string> out;
  dynsys::ThreeBodyCoupling coupling = dynsys::ThreeBodyCoupling::Force;
  double tolerance = dynsys::kDefaultTolerance;
  std::map<datagen::Split, datagen::SplitSpec> splits;
  /// Raw model section; resolved against the training data by model_spec().
  nlohmann::json model = nlohmann::json::object();
  trainer::TrainConfig train;
  bool train_seed_set = false;
  GridConfig grid;
  EvalConfig eval;
};

/// Defaults for a system: tabulated splits, VAE model, default training.
[[nodiscard]] ProjectConfig default_config(dynsys::SystemKind system);

/// Validates against the system's factor count and rejects unknown keys.
[[nodiscard]] ProjectConfig parse_config(const nlohmann::json& j);
[[nodiscard]] ProjectConfig load_config(const std::filesystem::path& path);

/// Replaces the global seed and every seed derived from it.
void set_seed(ProjectConfig& cfg, std::uint64_t seed);

/// Seed of one generated split.
[[nodiscard]] std::uint64_t split_seed(std::uint64_t global_seed, datagen::Split split);

/**
 * @brief Model spec for this config. Supervised families with linear scaling take
 *        their ranges from the training data unless the config lists them.
 */
[[nodiscard]] neural::ModelSpec model_spec(const ProjectConfig& cfg, const datagen::Dataset* train);

}  // namespace disdyn::config
