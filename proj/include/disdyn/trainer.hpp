/**
 * @file trainer.hpp
 * @brief Adam, plateau scheduling, gradient clipping, random-window batching,
 *        the training loop and grid search.
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "disdyn/datagen.hpp"
#include "disdyn/neural.hpp"
#include "disdyn/objective.hpp"
#include "disdyn/rng.hpp"
#include "disdyn/run_record.hpp"
#include "json.hpp"

namespace disdyn::trainer {

struct AdamConfig {
  double b1 = 0.9;
  double b2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<ad::Tensor> m;
  std::vector<ad::Tensor> v;
  std::size_t step = 0;
};

/**
 * @brief One bias-corrected Adam update.
 *
 * Returns false, leaving params and state untouched, when any gradient entry is
 * NaN or infinite.
 */
bool adam_step(std::vector<ad::Parameter>& params, const std::vector<ad::Tensor>& grads, AdamState& state, double lr,
               const AdamConfig& cfg = {});

[[nodiscard]] double global_norm(const std::vector<ad::Tensor>& grads);

/// Rescales grads to global L2 norm max_norm when above it. Returns the norm before clipping.
double clip_gradients(std::vector<ad::Tensor>& grads, double max_norm);

struct PlateauState {
  double lr = 1e-3;
  double best = 0.0;
  bool has_best = false;
  std::size_t stall = 0;
};

/// True when `metric` beats `best` by the relative threshold.
[[nodiscard]] bool improves(double metric, double best);

/// Feeds one validation metric; reduces lr once the stall exceeds the patience. Returns true on reduction.
bool scheduler_step(PlateauState& state, double metric, const SchedulerConfig& cfg);

/// batch_size random windows: trajectory uniform, start uniform in [0, T - n_in - n_out], noisy states.
[[nodiscard]] objective::Batch sample_windows(const datagen::Dataset& ds, std::size_t n_in, std::size_t n_out,
                                              std::size_t batch_size, Rng& rng);

using EpochCallback = std::function<void(const EpochLog&)>;

/**
 * @brief Trains `model` in place and leaves it holding the best-validation parameters.
 *
 * Divergence (non-finite loss or gradient) stops the run with StopReason::Diverged.
 */
RunRecord fit(neural::Model& model, const datagen::Dataset& train, const datagen::Dataset& val,
              const TrainConfig& config, const EpochCallback& on_epoch = {});

/// Axis name -> values. Enumeration is in key order with the last axis varying fastest.
using GridAxes = std::map<std::string, std::vector<nlohmann::json>>;

/// Names accepted as grid axes.
[[nodiscard]] const std::vector<std::string>& grid_axis_names();

/// Applies one axis value to a spec/config pair; unknown axes raise ConfigError.
void apply_axis(neural::ModelSpec& spec, TrainConfig& config, const std::string& axis, const nlohmann::json& value);

[[nodiscard]] std::size_t grid_size(const GridAxes& axes);

/// The i-th configuration in enumeration order, as axis -> value.
[[nodiscard]] nlohmann::json grid_point(const GridAxes& axes, std::size_t index);

/// The published hyperparameter grid for one system and family.
[[nodiscard]] GridAxes paper_grid(dynsys::SystemKind system, neural::Family family);

struct GridOptions {
  neural::ModelSpec base_spec;
  TrainConfig base_config;
  GridAxes axes;
  std::size_t budget = 10000;
  std::size_t workers = 1;
  /// Seeds runs without a "seed" axis: derive_seed(base_seed, run index).
  std::uint64_t base_seed = 0;
  /// When set, each run writes <out_dir>/<run_id>/{record.json, checkpoint/} as soon as it finishes.
  std::optional<std::filesystem::path> out_dir;
};

/// One fit per configuration; failures are recorded as diverged runs. Returns records in enumeration order.
[[nodiscard]] std::vector<RunRecord> grid_search(const datagen::Dataset& train, const datagen::Dataset& val,
                                                 const GridOptions& options);

/// Writes record.json (and checkpoint/ when model is given) into dir.
void write_run(const std::filesystem::path& dir, const RunRecord& record, const neural::Model* model);
[[nodiscard]] RunRecord read_record(const std::filesystem::path& file);

}  // namespace disdyn::trainer
