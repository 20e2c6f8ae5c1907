/**
 * @file evalkit.hpp
 * @brief Recursive rollout, MAE, divergence accounting, top-k selection and reports.
 */
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "disdyn/autodiff.hpp"
#include "disdyn/datagen.hpp"
#include "disdyn/neural.hpp"
#include "disdyn/rng.hpp"
#include "disdyn/run_record.hpp"
#include "json.hpp"

namespace disdyn::evalkit {

inline constexpr double kDivergenceThreshold = 1e6;
inline constexpr std::size_t kDefaultHorizon = 200;

[[nodiscard]] bool is_divergent(double v);

struct RolloutResult {
  /// horizon x state_dim. Rows after a divergence hold whatever the model produced.
  ad::Tensor predicted;
  bool diverged = false;
  std::optional<std::size_t> diverged_at;  // 0-based step
};

/// Refeeds predictions: ceil(horizon / n_out) calls, output trimmed to horizon steps.
[[nodiscard]] RolloutResult rollout(const neural::Predictor& model, std::span<const double> seed_window,
                                    std::size_t horizon);

/// Batched rollout, one seed window per row.
[[nodiscard]] std::vector<RolloutResult> rollout_batch(const neural::Predictor& model, const ad::Tensor& seeds,
                                                       std::size_t horizon);

/// Mean |pred - truth| over the first horizon rows.
[[nodiscard]] double mae_at(const ad::Tensor& pred, const ad::Tensor& truth, std::size_t horizon = kDefaultHorizon);

struct SplitEval {
  std::optional<double> mae_mean;  // over non-diverged trajectories
  std::size_t diverged_count = 0;
  std::size_t n_evaluated = 0;
  std::vector<std::size_t> trajectories;
  std::vector<double> mae;  // per trajectory, NaN where diverged
};

/**
 * @brief Rolls out n_eval trajectories of ds from their first n_in noisy steps and
 *        scores them against clean steps [n_in, n_in + horizon).
 *
 * All trajectories are used in order when n_eval == ds.size(); otherwise a subset
 * is drawn without replacement from rng.
 */
[[nodiscard]] SplitEval evaluate_split(const neural::Predictor& model, const datagen::Dataset& ds,
                                       std::size_t horizon, std::size_t n_eval, Rng& rng);

/// FNV-1a of the record's spec and config JSON.
[[nodiscard]] std::uint64_t config_hash(const trainer::RunRecord& r);

/// Ascending validation MAE; runs without one rank last; ties by (seed, config hash).
[[nodiscard]] std::vector<trainer::RunRecord> select_top_k(std::vector<trainer::RunRecord> records,
                                                           std::size_t k = 5);

using datagen::Split;

inline constexpr std::array<Split, 3> kReportSplits{Split::Test, Split::OodEasy, Split::OodHard};

struct ReportRow {
  std::string system;
  std::string family;
  std::string split;
  std::optional<double> mae_mean;
  std::optional<double> mae_std;
  std::size_t n_models = 0;
  double diverged_pct = 0.0;
};

/// Per-model MAE ordering test <= ood_easy <= ood_hard.
struct TrendFlag {
  std::string family;
  std::string run_id;
  std::map<std::string, std::optional<double>> mae;
  bool ordered = false;
};

struct EvalReport {
  std::vector<ReportRow> rows;
  std::vector<TrendFlag> trends;
  /// Same check on the family means.
  std::map<std::string, bool> family_ordered;
};

struct ReportModel {
  std::string run_id;
  const neural::Predictor* model = nullptr;
};

struct ReportOptions {
  std::size_t horizon = kDefaultHorizon;
  /// Trajectories per split and model; 0 = all.
  std::size_t n_eval = 0;
  std::uint64_t seed = 0;
};

/**
 * @brief Evaluates every model on each available report split.
 *
 * mae_mean / mae_std (population) are taken over models with at least one
 * non-diverged trajectory; diverged_pct is the share of models with at least one
 * diverged trajectory.
 */
[[nodiscard]] EvalReport build_report(dynsys::SystemKind system,
                                      const std::map<std::string, std::vector<ReportModel>>& models_by_family,
                                      const std::map<Split, const datagen::Dataset*>& datasets,
                                      const ReportOptions& options = {});

inline constexpr std::string_view kReportCsvHeader = "system,family,split,mae_mean,mae_std,n_models,diverged_pct";

[[nodiscard]] std::string report_csv(const EvalReport& report);
[[nodiscard]] nlohmann::json report_json(const EvalReport& report);

}  // namespace disdyn::evalkit
