/**
 * @file run_record.hpp
 * @brief Training configuration and the persisted record of one training run.
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "disdyn/neural.hpp"
#include "json.hpp"

namespace disdyn::trainer {

struct SchedulerConfig {
  std::size_t patience = 20;
  double factor = 0.3;
  double min_lr = 1e-6;
};

enum class StopMetric { ValLoss, ValMae };

struct EarlyStopConfig {
  std::size_t patience = 50;
  StopMetric metric = StopMetric::ValLoss;
};

/// Relative improvement needed by the scheduler and early stopping.
inline constexpr double kImprovementThreshold = 1e-4;

struct TrainConfig {
  double lr = 1e-3;
  std::size_t batch_size = 16;
  std::size_t max_epochs = 2000;
  SchedulerConfig scheduler;
  std::optional<double> grad_clip;
  EarlyStopConfig early_stop;
  /// Batches per epoch; default ceil(n_sequences / batch_size).
  std::optional<std::size_t> windows_per_epoch;
  /// Fixed validation windows scored every epoch.
  std::size_t val_windows = 256;
  /// Validation trajectories rolled out for the final MAE (and per epoch with StopMetric::ValMae).
  std::size_t val_trajectories = 50;
  std::size_t eval_horizon = 200;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

enum class StopReason { EarlyStop, MaxEpochs, Diverged };

[[nodiscard]] std::string_view to_string(StopReason r);
[[nodiscard]] StopReason parse_stop_reason(std::string_view name);

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
};

struct RunRecord {
  std::string run_id;
  neural::ModelSpec spec;
  TrainConfig config;
  /// Grid axis values that produced this run, empty for single runs.
  nlohmann::json overrides = nlohmann::json::object();
  std::vector<EpochLog> epochs;
  std::size_t best_epoch = 0;  // 0: untrained parameters
  double best_val_loss = 0.0;
  /// Mean validation rollout MAE; absent when every validation rollout diverged.
  std::optional<double> val_mae;
  std::size_t val_diverged = 0;
  StopReason stop = StopReason::MaxEpochs;
  /// Checkpoint directory relative to the record file.
  std::string checkpoint;
  /// Set when the run failed before or during training.
  std::string error;
  /// Measured, but kept out of the JSON so records stay reproducible.
  double wall_time_s = 0.0;
};

/// Non-finite losses serialize as null.
void to_json(nlohmann::json& j, const RunRecord& r);
void from_json(const nlohmann::json& j, RunRecord& r);

}  // namespace disdyn::trainer
