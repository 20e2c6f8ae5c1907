#include "disdyn/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <tuple>

#include "disdyn/errors.hpp"

namespace disdyn::evalkit {

using nlohmann::json;

namespace {

constexpr std::size_t kRolloutChunk = 256;

// Neumaier-compensated sum, so aggregates do not depend on summation luck.
double compensated_sum(std::span<const double> xs) {
  double sum = 0.0, c = 0.0;
  for (double x : xs) {
    const double t = sum + x;
    if (std::abs(sum) >= std::abs(x)) c += (sum - t) + x;
    else c += (x - t) + sum;
    sum = t;
  }
  return sum + c;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

bool is_divergent(double v) { return !std::isfinite(v) || std::abs(v) > kDivergenceThreshold; }

std::vector<RolloutResult> rollout_batch(const neural::Predictor& model, const ad::Tensor& seeds, std::size_t horizon) {
  const std::size_t d = model.state_dim();
  const std::size_t n_in = model.input_steps();
  const std::size_t n_out = model.output_steps();
  const std::size_t n = seeds.rows();
  if (seeds.cols() != n_in * d) {
    throw ShapeError("rollout: seed window has " + std::to_string(seeds.cols()) + " values, expected " +
                     std::to_string(n_in * d));
  }
  std::vector<RolloutResult> out(n);
  for (auto& r : out) r.predicted = ad::Tensor(horizon, d, std::numeric_limits<double>::quiet_NaN());
  if (horizon == 0 || n == 0) return out;

  ad::Tensor window = seeds;
  std::vector<double> joined((n_in + n_out) * d);
  std::size_t emitted = 0;
  while (emitted < horizon) {
    const ad::Tensor y = model.predict_batch(window);
    if (y.rows() != n || y.cols() != n_out * d) {
      throw ShapeError("rollout: model returned " + ad::to_string(y.shape()) + " for " + std::to_string(n) + " windows");
    }
    const std::size_t take = std::min(n_out, horizon - emitted);
    bool all_diverged = true;
    for (std::size_t r = 0; r < n; ++r) {
      auto& res = out[r];
      for (std::size_t s = 0; s < take; ++s) {
        for (std::size_t j = 0; j < d; ++j) {
          const double v = y(r, s * d + j);
          res.predicted(emitted + s, j) = v;
          if (!res.diverged && is_divergent(v)) {
            res.diverged = true;
            res.diverged_at = emitted + s;
          }
        }
      }
      all_diverged = all_diverged && res.diverged;
      // slide the window: keep the newest n_in steps of [window, y]
      const auto w = window.row_span(r);
      const auto yr = y.row_span(r);
      std::copy(w.begin(), w.end(), joined.begin());
      std::copy(yr.begin(), yr.end(), joined.begin() + static_cast<std::ptrdiff_t>(n_in * d));
      std::copy_n(joined.begin() + static_cast<std::ptrdiff_t>(n_out * d), n_in * d,
                  window.data().begin() + static_cast<std::ptrdiff_t>(r * n_in * d));
    }
    emitted += take;
    if (all_diverged) break;
  }
  return out;
}

RolloutResult rollout(const neural::Predictor& model, std::span<const double> seed_window, std::size_t horizon) {
  ad::Tensor seeds(1, seed_window.size(), std::vector<double>(seed_window.begin(), seed_window.end()));
  return std::move(rollout_batch(model, seeds, horizon).front());
}

double mae_at(const ad::Tensor& pred, const ad::Tensor& truth, std::size_t horizon) {
  if (pred.cols() != truth.cols()) {
    throw ShapeError("mae_at: prediction " + ad::to_string(pred.shape()) + " vs truth " + ad::to_string(truth.shape()));
  }
  if (pred.rows() < horizon || truth.rows() < horizon) {
    throw ShapeError("mae_at: horizon " + std::to_string(horizon) + " exceeds prediction " +
                     ad::to_string(pred.shape()) + " or truth " + ad::to_string(truth.shape()));
  }
  if (horizon == 0 || pred.cols() == 0) throw ShapeError("mae_at: empty comparison");
  std::vector<double> err(horizon * pred.cols());
  for (std::size_t i = 0; i < err.size(); ++i) err[i] = std::abs(pred[i] - truth[i]);
  return compensated_sum(err) / static_cast<double>(err.size());
}

SplitEval evaluate_split(const neural::Predictor& model, const datagen::Dataset& ds, std::size_t horizon,
                         std::size_t n_eval, Rng& rng) {
  const std::size_t n_in = model.input_steps();
  const std::size_t d = model.state_dim();
  if (d != ds.state_dim()) throw ConfigError("model state size does not match the dataset");
  if (n_in + horizon > ds.seq_len()) {
    throw ConfigError("horizon " + std::to_string(horizon) + " after " + std::to_string(n_in) +
                      " seed steps exceeds the sequence length " + std::to_string(ds.seq_len()));
  }
  if (n_eval == 0 || n_eval > ds.size()) {
    throw ConfigError("cannot evaluate " + std::to_string(n_eval) + " of " + std::to_string(ds.size()) +
                      " trajectories");
  }
  SplitEval ev;
  ev.trajectories.resize(ds.size());
  std::iota(ev.trajectories.begin(), ev.trajectories.end(), std::size_t{0});
  if (n_eval < ds.size()) {
    for (std::size_t i = 0; i < n_eval; ++i) std::swap(ev.trajectories[i], ev.trajectories[i + rng.index(ds.size() - i)]);
    ev.trajectories.resize(n_eval);
    std::sort(ev.trajectories.begin(), ev.trajectories.end());
  }
  ev.n_evaluated = n_eval;
  ev.mae.assign(n_eval, std::numeric_limits<double>::quiet_NaN());

  std::vector<double> ok;
  for (std::size_t begin = 0; begin < n_eval; begin += kRolloutChunk) {
    const std::size_t end = std::min(n_eval, begin + kRolloutChunk);
    ad::Tensor seeds(end - begin, n_in * d);
    for (std::size_t i = begin; i < end; ++i) {
      const auto& noisy = ds.noisy_states[ev.trajectories[i]];
      std::copy_n(noisy.begin(), n_in * d, seeds.data().begin() + static_cast<std::ptrdiff_t>((i - begin) * n_in * d));
    }
    const auto results = rollout_batch(model, seeds, horizon);
    for (std::size_t i = begin; i < end; ++i) {
      const auto& res = results[i - begin];
      if (res.diverged) {
        ++ev.diverged_count;
        continue;
      }
      const auto& states = ds.trajectories[ev.trajectories[i]].states;
      ad::Tensor truth(horizon, d,
                       std::vector<double>(states.begin() + static_cast<std::ptrdiff_t>(n_in * d),
                                           states.begin() + static_cast<std::ptrdiff_t>((n_in + horizon) * d)));
      ev.mae[i] = mae_at(res.predicted, truth, horizon);
      ok.push_back(ev.mae[i]);
    }
  }
  if (!ok.empty()) ev.mae_mean = compensated_sum(ok) / static_cast<double>(ok.size());
  return ev;
}

std::uint64_t config_hash(const trainer::RunRecord& r) {
  const std::string text = json{{"spec", r.spec}, {"config", r.config}}.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<trainer::RunRecord> select_top_k(std::vector<trainer::RunRecord> records, std::size_t k) {
  auto key = [](const trainer::RunRecord& r) {
    const bool usable = r.val_mae && std::isfinite(*r.val_mae);
    return std::make_tuple(usable ? 0 : 1, usable ? *r.val_mae : 0.0, r.spec.seed, config_hash(r));
  };
  std::stable_sort(records.begin(), records.end(),
                   [&](const trainer::RunRecord& a, const trainer::RunRecord& b) { return key(a) < key(b); });
  if (records.size() > k) records.resize(k);
  return records;
}

EvalReport build_report(dynsys::SystemKind system, const std::map<std::string, std::vector<ReportModel>>& models_by_family,
                        const std::map<Split, const datagen::Dataset*>& datasets, const ReportOptions& options) {
  EvalReport report;
  for (const auto& [family, models] : models_by_family) {
    std::vector<TrendFlag> flags(models.size());
    for (std::size_t m = 0; m < models.size(); ++m) {
      flags[m].family = family;
      flags[m].run_id = models[m].run_id;
    }
    std::map<std::string, std::optional<double>> family_means;
    for (Split split : kReportSplits) {
      const auto it = datasets.find(split);
      if (it == datasets.end() || it->second == nullptr) continue;
      const datagen::Dataset& ds = *it->second;
      if (ds.system != system) throw ConfigError("report dataset system does not match");
      const std::string split_name(datagen::to_string(split));
      const std::size_t n_eval = options.n_eval == 0 ? ds.size() : std::min(options.n_eval, ds.size());

      ReportRow row;
      row.system = dynsys::to_string(system);
      row.family = family;
      row.split = split_name;
      row.n_models = models.size();
      std::vector<double> maes;
      std::size_t with_divergence = 0;
      for (std::size_t m = 0; m < models.size(); ++m) {
        Rng rng(derive_seed(options.seed, static_cast<std::uint64_t>(split)));
        const auto ev = evaluate_split(*models[m].model, ds, options.horizon, n_eval, rng);
        if (ev.diverged_count > 0) ++with_divergence;
        if (ev.mae_mean) maes.push_back(*ev.mae_mean);
        flags[m].mae[split_name] = ev.mae_mean;
      }
      if (!maes.empty()) {
        const double mean = compensated_sum(maes) / static_cast<double>(maes.size());
        std::vector<double> sq;
        for (double v : maes) sq.push_back((v - mean) * (v - mean));
        row.mae_mean = mean;
        row.mae_std = std::sqrt(compensated_sum(sq) / static_cast<double>(maes.size()));
      }
      row.diverged_pct =
          models.empty() ? 0.0 : 100.0 * static_cast<double>(with_divergence) / static_cast<double>(models.size());
      family_means[split_name] = row.mae_mean;
      report.rows.push_back(std::move(row));
    }

    auto ordered = [](const std::map<std::string, std::optional<double>>& mae) {
      const auto get = [&](const char* s) -> std::optional<double> {
        const auto f = mae.find(s);
        return f == mae.end() ? std::nullopt : f->second;
      };
      const auto t = get("test"), e = get("ood_easy"), h = get("ood_hard");
      return t && e && h && *t <= *e && *e <= *h;
    };
    for (auto& f : flags) {
      f.ordered = ordered(f.mae);
      report.trends.push_back(std::move(f));
    }
    report.family_ordered[family] = ordered(family_means);
  }
  return report;
}

std::string report_csv(const EvalReport& report) {
  std::string out(kReportCsvHeader);
  out += "\n";
  for (const auto& r : report.rows) {
    out += r.system + "," + r.family + "," + r.split + "," + (r.mae_mean ? fmt(*r.mae_mean) : "") + "," +
           (r.mae_std ? fmt(*r.mae_std) : "") + "," + std::to_string(r.n_models) + "," + fmt(r.diverged_pct) + "\n";
  }
  return out;
}

json report_json(const EvalReport& report) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  json rows = json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"system", r.system},
                    {"family", r.family},
                    {"split", r.split},
                    {"mae_mean", opt(r.mae_mean)},
                    {"mae_std", opt(r.mae_std)},
                    {"n_models", r.n_models},
                    {"diverged_pct", r.diverged_pct}});
  }
  json models = json::array();
  for (const auto& t : report.trends) {
    json mae = json::object();
    for (const auto& [split, v] : t.mae) mae[split] = opt(v);
    models.push_back({{"family", t.family}, {"run_id", t.run_id}, {"mae", mae}, {"ordered", t.ordered}});
  }
  json families = json::object();
  for (const auto& [family, ok] : report.family_ordered) families[family] = ok;
  return {{"rows", rows}, {"trend", {{"check", "test <= ood_easy <= ood_hard"}, {"models", models}, {"families", families}}}};
}

}  // namespace disdyn::evalkit
