/**
 * @file neural.hpp
 * @brief Model families: deterministic MLP autoencoders, VAEs with optional
 *        supervised latents, and a stacked-LSTM baseline.
 *
 * Every model maps a flattened window of `input_steps` states to the next
 * `output_steps` states. VAE-type models encode to a diagonal Gaussian and
 * decode the (sampled or mean) latent through a mirrored MLP.
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "disdyn/autodiff.hpp"
#include "disdyn/datagen.hpp"
#include "disdyn/dynsys.hpp"
#include "disdyn/rng.hpp"
#include "json.hpp"

namespace disdyn::neural {

using datagen::Range;
using dynsys::SystemKind;

enum class Family { MlpAe, MlpSd, Vae, VaeSd, VaeSsd, Lstm };
enum class SupScaling { None, Linear };
enum class TeacherForcing { Full, Partial, None };

inline constexpr double kPartialTeacherProbability = 0.5;

[[nodiscard]] std::string_view to_string(Family f);
[[nodiscard]] Family parse_family(std::string_view name);
[[nodiscard]] std::string_view to_string(SupScaling s);
[[nodiscard]] SupScaling parse_scaling(std::string_view name);
[[nodiscard]] std::string_view to_string(TeacherForcing t);
[[nodiscard]] TeacherForcing parse_teacher_forcing(std::string_view name);

[[nodiscard]] bool is_vae(Family f);
[[nodiscard]] bool is_supervised(Family f);

struct LstmSpec {
  std::size_t num_layers = 2;
  std::size_t hidden_size = 100;
  TeacherForcing teacher_forcing = TeacherForcing::Partial;
};

struct ModelSpec {
  Family family = Family::Vae;
  SystemKind system = SystemKind::Pendulum;
  std::size_t input_steps = 50;
  std::size_t output_steps = 10;
  std::vector<std::size_t> hidden{400, 200};
  std::size_t latent_size = 8;
  bool layer_norm_latent = false;
  double decoder_gamma = 1e-3;
  double supervision_delta = 0.0;
  SupScaling sup_scaling = SupScaling::None;
  /// Training-set min/max per factor, used by the linear latent scaling.
  std::vector<Range> factor_ranges;
  double leaky_slope = 0.01;
  LstmSpec lstm;
  std::uint64_t seed = 0;

  [[nodiscard]] std::size_t state_dim() const { return dynsys::state_dim(system); }
  [[nodiscard]] std::size_t factor_count() const { return dynsys::factor_count(system); }
  [[nodiscard]] std::size_t input_size() const { return input_steps * state_dim(); }
  [[nodiscard]] std::size_t output_size() const { return output_steps * state_dim(); }

  /// Throws ConfigError when the spec is inconsistent with its family or system.
  void validate() const;
};

/// Family defaults: supervised scaling per family, latent layer norm off.
[[nodiscard]] ModelSpec default_spec(Family family, SystemKind system);

void to_json(nlohmann::json& j, const ModelSpec& spec);
void from_json(const nlohmann::json& j, ModelSpec& spec);

/// Diagonal Gaussian posterior; sigma = exp(log_sigma).
struct GaussianLatent {
  std::vector<double> mu;
  std::vector<double> log_sigma;
};

/// G(mu)_i = mu_i (max_i - min_i) + min_i. Degenerate ranges raise ConfigError.
[[nodiscard]] std::vector<double> scale_latent(std::span<const double> mu, std::span<const Range> ranges);

/// z = mu + exp(log_sigma) * eps.
[[nodiscard]] std::vector<double> reparameterize(const GaussianLatent& latent, std::span<const double> eps);
[[nodiscard]] ad::Var reparameterize(ad::Var mu, ad::Var log_sigma, ad::Var eps);

/// Anything that maps an input window to the next output window.
class Predictor {
 public:
  virtual ~Predictor() = default;
  [[nodiscard]] virtual std::size_t input_steps() const = 0;
  [[nodiscard]] virtual std::size_t output_steps() const = 0;
  [[nodiscard]] virtual std::size_t state_dim() const = 0;
  /// window: input_steps x state_dim flattened; returns output_steps x state_dim.
  [[nodiscard]] virtual std::vector<double> predict(std::span<const double> window) const = 0;
  /// One window per row. The default loops over predict().
  [[nodiscard]] virtual ad::Tensor predict_batch(const ad::Tensor& windows) const;
};

/// Parameters of one model bound to a tape, in canonical order.
using Bindings = std::vector<ad::Var>;

/// Encoder heads on a tape. log_sigma is unbound for deterministic families.
struct Encoding {
  ad::Var mu;
  ad::Var log_sigma;
};

class Model final : public Predictor {
 public:
  /// Builds and initializes a model (Kaiming-uniform trunks, Xavier-uniform heads and LSTM,
  /// zero biases) from spec.seed.
  explicit Model(ModelSpec spec);

  [[nodiscard]] const ModelSpec& spec() const noexcept { return spec_; }
  [[nodiscard]] std::vector<ad::Parameter>& parameters() noexcept { return params_; }
  [[nodiscard]] const std::vector<ad::Parameter>& parameters() const noexcept { return params_; }
  [[nodiscard]] std::size_t parameter_count() const;
  [[nodiscard]] ad::Parameter& parameter(std::string_view name);

  [[nodiscard]] Bindings bind(ad::Tape& tape) const;

  // Tape-level forward passes over a batch (one sample per row).
  [[nodiscard]] Encoding encode(const Bindings& b, ad::Var x) const;
  [[nodiscard]] ad::Var decode(const Bindings& b, ad::Var z) const;
  /// Consumes `context` (batch x n_ctx*state_dim) and emits `horizon` predicted steps
  /// (batch x horizon*state_dim). `teacher` holds the true future steps and is required
  /// for Full and Partial forcing; rng drives the Partial coin flips.
  [[nodiscard]] ad::Var lstm_forward(const Bindings& b, ad::Var context, std::size_t horizon,
                                     const ad::Tensor* teacher, TeacherForcing mode, Rng* rng) const;

  // Single-sample conveniences, tracking disabled.
  [[nodiscard]] GaussianLatent encode(std::span<const double> x) const;
  [[nodiscard]] std::vector<double> decode(std::span<const double> z) const;

  [[nodiscard]] std::size_t input_steps() const override { return spec_.input_steps; }
  [[nodiscard]] std::size_t output_steps() const override { return spec_.output_steps; }
  [[nodiscard]] std::size_t state_dim() const override { return spec_.state_dim(); }
  /// Deterministic prediction: z = mu for VAE families, no teacher forcing for the LSTM.
  [[nodiscard]] std::vector<double> predict(std::span<const double> window) const override;
  /// Batched deterministic prediction, one window per row.
  [[nodiscard]] ad::Tensor predict_batch(const ad::Tensor& windows) const override;

  /// Checkpoint directory: meta.json (spec, parameter table, extra state) + params.bin.
  void save(const std::filesystem::path& dir, const nlohmann::json& training_state = {}) const;
  [[nodiscard]] static Model load(const std::filesystem::path& dir, nlohmann::json* training_state = nullptr);

 private:
  struct Dense {
    std::size_t weight;
    std::size_t bias;
  };

  std::size_t add_param(std::string name, std::size_t rows, std::size_t cols);
  Dense add_dense(const std::string& name, std::size_t in, std::size_t out);
  void build();
  void initialize();
  ad::Var apply(const Bindings& b, Dense d, ad::Var x) const;

  ModelSpec spec_;
  std::vector<ad::Parameter> params_;
  std::vector<Dense> encoder_;
  std::optional<std::size_t> ln_gain_, ln_bias_;
  Dense mu_head_{}, log_sigma_head_{};
  std::vector<Dense> decoder_;
  Dense out_head_{};
  struct LstmLayer {
    std::size_t w_ih, w_hh, bias;
  };
  std::vector<LstmLayer> lstm_layers_;
  std::vector<bool> is_head_;  // per parameter, for initialization
};

/// Closed-form parameter count of an MLP/VAE spec, from layer sizes alone.
[[nodiscard]] std::size_t expected_parameter_count(const ModelSpec& spec);

}  // namespace disdyn::neural
