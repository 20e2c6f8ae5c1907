#include "disdyn/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <limits>
#include <mutex>
#include <thread>

#include "disdyn/errors.hpp"
#include "disdyn/evalkit.hpp"

namespace disdyn::trainer {

namespace fs = std::filesystem;
using nlohmann::json;

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(scheduler.factor > 0.0 && scheduler.factor < 1.0)) throw ConfigError("scheduler factor must lie in (0, 1)");
  if (scheduler.patience == 0 || early_stop.patience == 0) throw ConfigError("patience must be at least 1");
  if (!(scheduler.min_lr >= 0.0)) throw ConfigError("min_lr must be non-negative");
  if (grad_clip && !(*grad_clip > 0.0)) throw ConfigError("grad_clip must be positive");
  if (windows_per_epoch && *windows_per_epoch == 0) throw ConfigError("windows_per_epoch must be positive");
  if (val_windows == 0) throw ConfigError("val_windows must be positive");
}

void to_json(json& j, const TrainConfig& c) {
  j = json{
      {"lr", c.lr},
      {"batch_size", c.batch_size},
      {"max_epochs", c.max_epochs},
      {"scheduler", {{"patience", c.scheduler.patience}, {"factor", c.scheduler.factor}, {"min_lr", c.scheduler.min_lr}}},
      {"grad_clip", c.grad_clip ? json(*c.grad_clip) : json(nullptr)},
      {"early_stop",
       {{"patience", c.early_stop.patience},
        {"metric", c.early_stop.metric == StopMetric::ValLoss ? "val_loss" : "val_mae"}}},
      {"windows_per_epoch", c.windows_per_epoch ? json(*c.windows_per_epoch) : json(nullptr)},
      {"val_windows", c.val_windows},
      {"val_trajectories", c.val_trajectories},
      {"eval_horizon", c.eval_horizon},
      {"seed", c.seed},
  };
}

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
      throw ConfigError("unknown " + where + " key '" + key + "'");
    }
  }
}

}  // namespace

void from_json(const json& j, TrainConfig& c) {
  reject_unknown(j,
                 {"lr", "batch_size", "max_epochs", "scheduler", "grad_clip", "early_stop", "windows_per_epoch",
                  "val_windows", "val_trajectories", "eval_horizon", "seed"},
                 "train config");
  c = TrainConfig{};
  if (j.contains("lr")) c.lr = j["lr"].get<double>();
  if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<std::size_t>();
  if (j.contains("max_epochs")) c.max_epochs = j["max_epochs"].get<std::size_t>();
  if (j.contains("scheduler")) {
    const auto& s = j["scheduler"];
    reject_unknown(s, {"patience", "factor", "min_lr"}, "scheduler");
    if (s.contains("patience")) c.scheduler.patience = s["patience"].get<std::size_t>();
    if (s.contains("factor")) c.scheduler.factor = s["factor"].get<double>();
    if (s.contains("min_lr")) c.scheduler.min_lr = s["min_lr"].get<double>();
  }
  if (j.contains("grad_clip") && !j["grad_clip"].is_null()) c.grad_clip = j["grad_clip"].get<double>();
  if (j.contains("early_stop")) {
    const auto& e = j["early_stop"];
    reject_unknown(e, {"patience", "metric"}, "early_stop");
    if (e.contains("patience")) c.early_stop.patience = e["patience"].get<std::size_t>();
    if (e.contains("metric")) {
      const auto m = e["metric"].get<std::string>();
      if (m == "val_loss") c.early_stop.metric = StopMetric::ValLoss;
      else if (m == "val_mae") c.early_stop.metric = StopMetric::ValMae;
      else throw ConfigError("unknown early-stop metric '" + m + "'");
    }
  }
  if (j.contains("windows_per_epoch") && !j["windows_per_epoch"].is_null()) {
    c.windows_per_epoch = j["windows_per_epoch"].get<std::size_t>();
  }
  if (j.contains("val_windows")) c.val_windows = j["val_windows"].get<std::size_t>();
  if (j.contains("val_trajectories")) c.val_trajectories = j["val_trajectories"].get<std::size_t>();
  if (j.contains("eval_horizon")) c.eval_horizon = j["eval_horizon"].get<std::size_t>();
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
}

std::string_view to_string(StopReason r) {
  switch (r) {
    case StopReason::EarlyStop: return "early-stop";
    case StopReason::MaxEpochs: return "max-epochs";
    case StopReason::Diverged: return "diverged";
  }
  return "unknown";
}

StopReason parse_stop_reason(std::string_view name) {
  for (StopReason r : {StopReason::EarlyStop, StopReason::MaxEpochs, StopReason::Diverged}) {
    if (to_string(r) == name) return r;
  }
  throw ConfigError("unknown stop reason '" + std::string(name) + "'");
}

namespace {

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double number_or_nan(const json& v) { return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>(); }

}  // namespace

void to_json(json& j, const RunRecord& r) {
  json epochs = json::array();
  for (const auto& e : r.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", finite_or_null(e.train_loss)},
                      {"val_loss", finite_or_null(e.val_loss)},
                      {"lr", e.lr}});
  }
  j = json{
      {"run_id", r.run_id},
      {"model_spec", r.spec},
      {"train_config", r.config},
      {"overrides", r.overrides},
      {"epochs", epochs},
      {"best_epoch", r.best_epoch},
      {"best_val_loss", finite_or_null(r.best_val_loss)},
      {"val_mae", r.val_mae ? finite_or_null(*r.val_mae) : json(nullptr)},
      {"val_diverged", r.val_diverged},
      {"stop_reason", std::string(to_string(r.stop))},
      {"checkpoint", r.checkpoint},
  };
  if (!r.error.empty()) j["error"] = r.error;
}

void from_json(const json& j, RunRecord& r) {
  r = RunRecord{};
  r.run_id = j.at("run_id").get<std::string>();
  r.spec = j.at("model_spec").get<neural::ModelSpec>();
  r.config = j.at("train_config").get<TrainConfig>();
  r.overrides = j.value("overrides", json::object());
  for (const auto& e : j.at("epochs")) {
    r.epochs.push_back({e.at("epoch").get<std::size_t>(), number_or_nan(e.at("train_loss")),
                        number_or_nan(e.at("val_loss")), e.at("lr").get<double>()});
  }
  r.best_epoch = j.at("best_epoch").get<std::size_t>();
  r.best_val_loss = number_or_nan(j.at("best_val_loss"));
  if (!j.at("val_mae").is_null()) r.val_mae = j["val_mae"].get<double>();
  r.val_diverged = j.at("val_diverged").get<std::size_t>();
  r.stop = parse_stop_reason(j.at("stop_reason").get<std::string>());
  r.checkpoint = j.at("checkpoint").get<std::string>();
  r.error = j.value("error", std::string());
}

// ---------------------------------------------------------------------------
// Optimizer pieces

bool adam_step(std::vector<ad::Parameter>& params, const std::vector<ad::Tensor>& grads, AdamState& state, double lr,
               const AdamConfig& cfg) {
  if (grads.size() != params.size()) {
    throw ShapeError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                     std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].value.shape()) {
      throw ShapeError("adam_step: gradient " + ad::to_string(grads[i].shape()) + " for parameter " +
                       params[i].name + " " + ad::to_string(params[i].value.shape()));
    }
    for (double g : grads[i].data()) {
      if (!std::isfinite(g)) return false;
    }
  }
  if (state.m.size() != params.size()) {
    state.m.clear();
    state.v.clear();
    for (const auto& p : params) {
      state.m.emplace_back(p.value.rows(), p.value.cols());
      state.v.emplace_back(p.value.rows(), p.value.cols());
    }
    state.step = 0;
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.b1, t);
  const double c2 = 1.0 - std::pow(cfg.b2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].value.data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    const auto g = grads[i].data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = cfg.b1 * m[k] + (1.0 - cfg.b1) * g[k];
      v[k] = cfg.b2 * v[k] + (1.0 - cfg.b2) * g[k] * g[k];
      const double m_hat = m[k] / c1;
      const double v_hat = v[k] / c2;
      w[k] -= lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
  }
  return true;
}

double global_norm(const std::vector<ad::Tensor>& grads) {
  double sq = 0.0;
  for (const auto& g : grads) {
    for (double x : g.data()) sq += x * x;
  }
  return std::sqrt(sq);
}

double clip_gradients(std::vector<ad::Tensor>& grads, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("clip_gradients: max_norm must be positive");
  const double norm = global_norm(grads);
  if (norm > max_norm && std::isfinite(norm)) {
    const double s = max_norm / norm;
    for (auto& g : grads) {
      for (double& x : g.data()) x *= s;
    }
  }
  return norm;
}

bool improves(double metric, double best) {
  if (!std::isfinite(metric)) return false;
  return metric < best - kImprovementThreshold * std::abs(best);
}

bool scheduler_step(PlateauState& state, double metric, const SchedulerConfig& cfg) {
  if (!state.has_best || improves(metric, state.best)) {
    state.best = metric;
    state.has_best = true;
    state.stall = 0;
    return false;
  }
  if (++state.stall > cfg.patience) {
    state.stall = 0;
    const double reduced = std::max(state.lr * cfg.factor, cfg.min_lr);
    const bool changed = reduced < state.lr;
    state.lr = reduced;
    return changed;
  }
  return false;
}

objective::Batch sample_windows(const datagen::Dataset& ds, std::size_t n_in, std::size_t n_out,
                                std::size_t batch_size, Rng& rng) {
  const std::size_t T = ds.seq_len();
  if (n_in + n_out > T) {
    throw ConfigError("window of " + std::to_string(n_in) + "+" + std::to_string(n_out) +
                      " steps does not fit sequences of length " + std::to_string(T));
  }
  if (ds.size() == 0) throw ConfigError("cannot sample windows from an empty dataset");
  const std::size_t d = ds.state_dim();
  const std::size_t k = ds.factor_count();
  objective::Batch b{ad::Tensor(batch_size, n_in * d), ad::Tensor(batch_size, n_out * d), ad::Tensor(batch_size, k)};
  for (std::size_t r = 0; r < batch_size; ++r) {
    const std::size_t seq = rng.index(ds.size());
    const std::size_t start = rng.index(T - n_in - n_out + 1);
    const auto& noisy = ds.noisy_states[seq];
    const double* src = noisy.data() + start * d;
    std::copy_n(src, n_in * d, b.inputs.data().begin() + static_cast<std::ptrdiff_t>(r * n_in * d));
    std::copy_n(src + n_in * d, n_out * d, b.targets.data().begin() + static_cast<std::ptrdiff_t>(r * n_out * d));
    const auto& xi = ds.trajectories[seq].factors.values;
    for (std::size_t j = 0; j < k; ++j) b.factors(r, j) = xi[j];
  }
  return b;
}

// ---------------------------------------------------------------------------
// fit

namespace {

void check_dataset(const neural::ModelSpec& spec, const datagen::Dataset& ds, const char* which) {
  if (ds.system != spec.system) {
    throw ConfigError(std::string(which) + " dataset holds " + std::string(dynsys::to_string(ds.system)) +
                      " data but the model is for " + std::string(dynsys::to_string(spec.system)));
  }
  if (ds.size() == 0) throw ConfigError(std::string(which) + " dataset is empty");
  if (spec.input_steps + spec.output_steps > ds.seq_len()) {
    throw ConfigError(std::string(which) + " sequences are shorter than one training window");
  }
}

std::vector<ad::Tensor> snapshot(const neural::Model& model) {
  std::vector<ad::Tensor> out;
  for (const auto& p : model.parameters()) out.push_back(p.value);
  return out;
}

void restore(neural::Model& model, const std::vector<ad::Tensor>& values) {
  auto& params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) params[i].value = values[i];
}

double validation_loss(const neural::Model& model, const objective::Batch& batch, const ad::Tensor& eps) {
  ad::Tape tape(false);
  const auto b = model.bind(tape);
  return objective::total_loss(tape, model, b, batch, eps, nullptr, neural::TeacherForcing::None).parts.total;
}

std::size_t clamp_horizon(const neural::ModelSpec& spec, const datagen::Dataset& ds, std::size_t horizon) {
  return std::min(horizon, ds.seq_len() - spec.input_steps);
}

evalkit::SplitEval validation_rollouts(const neural::Model& model, const datagen::Dataset& val,
                                       const TrainConfig& config) {
  Rng rng(derive_seed(config.seed, 2));
  const std::size_t n = std::min(config.val_trajectories == 0 ? val.size() : config.val_trajectories, val.size());
  return evalkit::evaluate_split(model, val, clamp_horizon(model.spec(), val, config.eval_horizon), n, rng);
}

}  // namespace

RunRecord fit(neural::Model& model, const datagen::Dataset& train, const datagen::Dataset& val,
              const TrainConfig& config, const EpochCallback& on_epoch) {
  const auto started = std::chrono::steady_clock::now();
  config.validate();
  const auto& spec = model.spec();
  check_dataset(spec, train, "training");
  check_dataset(spec, val, "validation");

  RunRecord record;
  record.spec = spec;
  record.config = config;

  Rng rng(config.seed);
  Rng val_rng(derive_seed(config.seed, 1));
  const objective::Batch val_batch =
      sample_windows(val, spec.input_steps, spec.output_steps, config.val_windows, val_rng);
  const ad::Tensor val_eps = objective::draw_eps(model, config.val_windows, val_rng);

  auto metric_of = [&](double val_loss) {
    if (config.early_stop.metric == StopMetric::ValLoss) return val_loss;
    const auto ev = validation_rollouts(model, val, config);
    return ev.mae_mean.value_or(std::numeric_limits<double>::infinity());
  };

  double val_loss = validation_loss(model, val_batch, val_eps);
  double best_metric = metric_of(val_loss);
  record.best_val_loss = val_loss;
  record.best_epoch = 0;
  std::vector<ad::Tensor> best = snapshot(model);

  const std::size_t batches = config.windows_per_epoch.value_or((train.size() + config.batch_size - 1) / config.batch_size);
  PlateauState plateau{config.lr, 0.0, false, 0};
  AdamState adam;
  std::size_t since_best = 0;
  record.stop = StopReason::MaxEpochs;
  if (!std::isfinite(val_loss)) record.stop = StopReason::Diverged;

  for (std::size_t epoch = 1; epoch <= config.max_epochs && record.stop != StopReason::Diverged; ++epoch) {
    const double lr = plateau.lr;
    double loss_sum = 0.0;
    bool diverged = false;
    for (std::size_t bi = 0; bi < batches; ++bi) {
      const auto batch = sample_windows(train, spec.input_steps, spec.output_steps, config.batch_size, rng);
      ad::Tape tape;
      const auto bound = model.bind(tape);
      const auto loss = objective::total_loss(tape, model, bound, batch, rng);
      if (!std::isfinite(loss.parts.total)) {
        diverged = true;
        loss_sum = loss.parts.total;
        break;
      }
      loss_sum += loss.parts.total;
      tape.backward(loss.total);
      std::vector<ad::Tensor> grads;
      grads.reserve(bound.size());
      for (const auto& v : bound) grads.push_back(tape.grad(v));
      if (config.grad_clip) clip_gradients(grads, *config.grad_clip);
      if (!adam_step(model.parameters(), grads, adam, lr)) {
        diverged = true;
        loss_sum = std::numeric_limits<double>::quiet_NaN();
        break;
      }
    }

    EpochLog log{epoch, diverged ? loss_sum : loss_sum / static_cast<double>(batches),
                 std::numeric_limits<double>::quiet_NaN(), lr};
    if (!diverged) {
      val_loss = validation_loss(model, val_batch, val_eps);
      log.val_loss = val_loss;
      diverged = !std::isfinite(val_loss);
    }
    record.epochs.push_back(log);
    if (on_epoch) on_epoch(log);
    if (diverged) {
      record.stop = StopReason::Diverged;
      break;
    }

    const double metric = metric_of(val_loss);
    scheduler_step(plateau, metric, config.scheduler);
    if (improves(metric, best_metric)) {
      best_metric = metric;
      record.best_epoch = epoch;
      record.best_val_loss = val_loss;
      best = snapshot(model);
      since_best = 0;
    } else if (++since_best >= config.early_stop.patience) {
      record.stop = StopReason::EarlyStop;
      break;
    }
  }

  restore(model, best);
  const auto ev = validation_rollouts(model, val, config);
  record.val_mae = ev.mae_mean;
  record.val_diverged = ev.diverged_count;
  record.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return record;
}

// ---------------------------------------------------------------------------
// Grid search

const std::vector<std::string>& grid_axis_names() {
  static const std::vector<std::string> names = {
      "batch_size",   "decoder_gamma", "grad_clip",     "hidden",         "input_steps",      "latent_size",
      "layer_norm_latent", "lr",       "lstm_hidden",   "lstm_layers",    "max_epochs",       "output_steps",
      "sched_factor", "sched_patience", "seed",         "sup_scaling",    "supervision_delta", "teacher_forcing"};
  return names;
}

void apply_axis(neural::ModelSpec& spec, TrainConfig& config, const std::string& axis, const json& value) {
  try {
    if (axis == "batch_size") config.batch_size = value.get<std::size_t>();
    else if (axis == "decoder_gamma") spec.decoder_gamma = value.get<double>();
    else if (axis == "grad_clip") config.grad_clip = value.is_null() ? std::nullopt : std::optional(value.get<double>());
    else if (axis == "hidden") spec.hidden = value.get<std::vector<std::size_t>>();
    else if (axis == "input_steps") spec.input_steps = value.get<std::size_t>();
    else if (axis == "latent_size") spec.latent_size = value.get<std::size_t>();
    else if (axis == "layer_norm_latent") spec.layer_norm_latent = value.get<bool>();
    else if (axis == "lr") config.lr = value.get<double>();
    else if (axis == "lstm_hidden") spec.lstm.hidden_size = value.get<std::size_t>();
    else if (axis == "lstm_layers") spec.lstm.num_layers = value.get<std::size_t>();
    else if (axis == "max_epochs") config.max_epochs = value.get<std::size_t>();
    else if (axis == "output_steps") spec.output_steps = value.get<std::size_t>();
    else if (axis == "sched_factor") config.scheduler.factor = value.get<double>();
    else if (axis == "sched_patience") config.scheduler.patience = value.get<std::size_t>();
    else if (axis == "seed") spec.seed = config.seed = value.get<std::uint64_t>();
    else if (axis == "sup_scaling") spec.sup_scaling = neural::parse_scaling(value.get<std::string>());
    else if (axis == "supervision_delta") spec.supervision_delta = value.get<double>();
    else if (axis == "teacher_forcing") spec.lstm.teacher_forcing = neural::parse_teacher_forcing(value.get<std::string>());
    else throw ConfigError("unknown grid axis '" + axis + "'");
  } catch (const json::exception& e) {
    throw ConfigError("bad value " + value.dump() + " for grid axis '" + axis + "': " + e.what());
  }
}

std::size_t grid_size(const GridAxes& axes) {
  std::size_t n = 1;
  for (const auto& [name, values] : axes) n *= values.size();
  return n;
}

json grid_point(const GridAxes& axes, std::size_t index) {
  json point = json::object();
  for (auto it = axes.rbegin(); it != axes.rend(); ++it) {
    const auto& values = it->second;
    if (values.empty()) throw ConfigError("grid axis '" + it->first + "' has no values");
    point[it->first] = values[index % values.size()];
    index /= values.size();
  }
  return point;
}

GridAxes paper_grid(dynsys::SystemKind system, neural::Family family) {
  using neural::Family;
  using V = std::vector<json>;
  GridAxes g;
  switch (system) {
    case dynsys::SystemKind::Pendulum:
      g["input_steps"] = V{10, 50};
      g["output_steps"] = V{1, 10};
      g["sched_factor"] = V{0.3};
      switch (family) {
        case Family::MlpAe:
          g["latent_size"] = V{4, 8, 16};
          g["batch_size"] = V{16, 32};
          g["sched_patience"] = V{20, 30, 40};
          g["grad_clip"] = V{nullptr};
          break;
        case Family::MlpSd:
          g["latent_size"] = V{4, 8, 16};
          g["batch_size"] = V{16};
          g["sched_patience"] = V{20, 30};
          g["grad_clip"] = V{1.0};
          g["supervision_delta"] = V{0.1, 0.2, 0.3};
          break;
        case Family::Vae:
          g["latent_size"] = V{4, 8, 16};
          g["batch_size"] = V{16, 32};
          g["sched_patience"] = V{20};
          g["grad_clip"] = V{1.0};
          g["layer_norm_latent"] = V{true};
          g["decoder_gamma"] = V{1e-3, 1e-4, 1e-5};
          break;
        case Family::VaeSd:
        case Family::VaeSsd:
          g["latent_size"] = V{4, 8, 16};
          g["batch_size"] = V{16};
          g["sched_patience"] = V{20};
          g["grad_clip"] = V{1.0};
          g["layer_norm_latent"] = V{true};
          g["decoder_gamma"] = V{1e-3, 1e-4};
          g["supervision_delta"] = V{0.01, 0.1, 0.2};
          break;
        case Family::Lstm:
          g["lstm_hidden"] = V{50, 100, 200};
          g["lstm_layers"] = V{1, 2, 3};
          g["batch_size"] = V{16, 64};
          g["sched_patience"] = V{30};
          g["teacher_forcing"] = V{"partial"};
          break;
      }
      break;
    case dynsys::SystemKind::LotkaVolterra:
      g["input_steps"] = V{50};
      g["output_steps"] = V{10};
      switch (family) {
        case Family::MlpAe:
          g["latent_size"] = V{8, 16, 32};
          g["lr"] = V{1e-3, 1e-4};
          g["batch_size"] = V{16, 32, 64};
          g["sched_patience"] = V{20, 30};
          g["sched_factor"] = V{0.3, 0.4};
          break;
        case Family::MlpSd:
          g["latent_size"] = V{8, 16, 32};
          g["lr"] = V{1e-3, 1e-4};
          g["batch_size"] = V{16, 32};
          g["sched_patience"] = V{20, 30};
          g["sched_factor"] = V{0.3};
          g["supervision_delta"] = V{0.1, 0.2, 0.3};
          break;
        case Family::Vae:
          g["latent_size"] = V{8, 16, 32};
          g["lr"] = V{1e-3, 1e-4};
          g["batch_size"] = V{16, 32};
          g["sched_patience"] = V{20};
          g["sched_factor"] = V{0.3};
          g["grad_clip"] = V{0.1, 1.0};
          g["decoder_gamma"] = V{1e-4, 1e-5, 1e-6};
          break;
        case Family::VaeSd:
        case Family::VaeSsd:
          g["latent_size"] = V{8, 16, 32};
          g["lr"] = V{1e-3};
          g["batch_size"] = V{16};
          g["sched_patience"] = V{20};
          g["sched_factor"] = V{0.3};
          g["grad_clip"] = V{0.1, 1.0};
          g["decoder_gamma"] = V{1e-4, 1e-5, 1e-6};
          g["supervision_delta"] = V{0.01, 0.1, 0.2, 0.3};
          break;
        case Family::Lstm:
          g["lstm_hidden"] = V{50, 100};
          g["lstm_layers"] = V{1, 2, 3};
          g["batch_size"] = V{10, 64, 128};
          g["sched_patience"] = V{20, 30};
          g["sched_factor"] = V{0.3};
          g["teacher_forcing"] = V{"partial", "none"};
          break;
      }
      break;
    case dynsys::SystemKind::ThreeBody:
      g["input_steps"] = V{50};
      g["output_steps"] = V{10};
      switch (family) {
        case Family::MlpAe:
          g["latent_size"] = V{8, 16, 32};
          g["lr"] = V{1e-3, 1e-4};
          g["batch_size"] = V{16, 32};
          g["sched_patience"] = V{30, 40, 50, 60};
          g["sched_factor"] = V{0.3, 0.4};
          break;
        case Family::MlpSd:
          g["latent_size"] = V{8, 16, 32};
          g["lr"] = V{1e-3, 1e-4};
          g["batch_size"] = V{16};
          g["sched_patience"] = V{30, 40, 50, 60};
          g["sched_factor"] = V{0.3};
          g["supervision_delta"] = V{0.05, 0.1, 0.2, 0.3};
          break;
        case Family::Vae:
          g["latent_size"] = V{8, 16, 32};
          g["lr"] = V{1e-3, 1e-4};
          g["batch_size"] = V{16};
          g["sched_patience"] = V{30, 40, 50, 60};
          g["sched_factor"] = V{0.3, 0.4};
          g["decoder_gamma"] = V{1e-5, 1e-6};
          break;
        case Family::VaeSd:
        case Family::VaeSsd:
          g["latent_size"] = V{8, 16, 32};
          g["lr"] = V{1e-3};
          g["batch_size"] = V{16};
          g["sched_patience"] = V{30, 40, 50, 60};
          g["sched_factor"] = V{0.3, 0.4};
          g["decoder_gamma"] = V{1e-5, 1e-6};
          g["supervision_delta"] = V{0.1, 0.2};
          break;
        case Family::Lstm:
          g["lstm_hidden"] = V{50, 100};
          g["lstm_layers"] = V{1, 2, 3};
          g["batch_size"] = V{16, 64, 128};
          g["sched_patience"] = V{20, 30};
          g["sched_factor"] = V{0.3};
          g["teacher_forcing"] = V{"partial"};
          break;
      }
      break;
  }
  return g;
}

void write_run(const fs::path& dir, const RunRecord& record, const neural::Model* model) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  if (model != nullptr) {
    model->save(dir / record.checkpoint,
                {{"best_epoch", record.best_epoch}, {"stop_reason", std::string(to_string(record.stop))}});
  }
  const fs::path file = dir / "record.json";
  const fs::path tmp = dir / "record.json.tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << json(record).dump(2) << "\n";
  }
  fs::rename(tmp, file, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " into place: " + ec.message());
}

RunRecord read_record(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read " + file.string());
  try {
    return json::parse(in).get<RunRecord>();
  } catch (const json::exception& e) {
    throw IoError(file.string() + ": " + e.what());
  }
}

namespace {

std::string run_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "run-%04zu", index);
  return buf;
}

}  // namespace

std::vector<RunRecord> grid_search(const datagen::Dataset& train, const datagen::Dataset& val,
                                   const GridOptions& options) {
  const std::size_t n = grid_size(options.axes);
  if (n > options.budget) {
    throw ConfigError("grid has " + std::to_string(n) + " configurations, over the budget of " +
                      std::to_string(options.budget));
  }
  for (const auto& [axis, values] : options.axes) {
    const auto& names = grid_axis_names();
    if (std::find(names.begin(), names.end(), axis) == names.end()) throw ConfigError("unknown grid axis '" + axis + "'");
    if (values.empty()) throw ConfigError("grid axis '" + axis + "' has no values");
  }

  std::vector<RunRecord> records(n);
  std::mutex io_mutex;
  std::atomic<std::size_t> next{0};

  auto run_one = [&](std::size_t i) {
    RunRecord rec;
    rec.run_id = run_name(i);
    rec.overrides = grid_point(options.axes, i);
    neural::ModelSpec spec = options.base_spec;
    TrainConfig config = options.base_config;
    if (!options.axes.contains("seed")) spec.seed = config.seed = derive_seed(options.base_seed, i);
    std::optional<neural::Model> model;
    try {
      for (const auto& [axis, value] : rec.overrides.items()) apply_axis(spec, config, axis, value);
      rec.spec = spec;
      rec.config = config;
      model.emplace(spec);
      auto fitted = fit(*model, train, val, config);
      fitted.run_id = rec.run_id;
      fitted.overrides = rec.overrides;
      rec = std::move(fitted);
      rec.checkpoint = "checkpoint";
    } catch (const std::exception& e) {
      rec.spec = spec;
      rec.config = config;
      rec.stop = StopReason::Diverged;
      rec.error = e.what();
      model.reset();
    }
    if (options.out_dir) {
      std::lock_guard lock(io_mutex);
      write_run(*options.out_dir / rec.run_id, rec, model ? &*model : nullptr);
    }
    records[i] = std::move(rec);
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(options.workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) run_one(i);
    return records;
  }
  std::exception_ptr failure;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      try {
        for (std::size_t i = next++; i < n; i = next++) run_one(i);
      } catch (...) {
        std::lock_guard lock(io_mutex);
        if (!failure) failure = std::current_exception();
        next = n;
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return records;
}

}  // namespace disdyn::trainer
