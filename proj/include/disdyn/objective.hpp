/**
 * @file objective.hpp
 * @brief Training losses for every model family.
 *
 * VAE families minimise, averaged over the batch,
 *   (1/gamma) |x - mu_x|_1 + d log gamma
 *   + sum sigma^2 - sum log sigma^2 + sum mu^2
 *   + delta |xi - S(mu_{1:k})|_1
 * MLP families use the batch mean of the per-sample L1 prediction error
 * (plus the supervised term for MlpSd); the LSTM uses the same L1 error over
 * its predicted steps.
 */
#pragma once

#include <cstddef>
#include <optional>
#include <span>

#include "disdyn/autodiff.hpp"
#include "disdyn/neural.hpp"
#include "disdyn/rng.hpp"

namespace disdyn::objective {

using neural::GaussianLatent;
using neural::SupScaling;

/// (1/gamma) sum |x - mu_x| + d log gamma with d = x.size().
[[nodiscard]] double reconstruction_nll(std::span<const double> x, std::span<const double> mu_x, double gamma);

/// sum sigma^2 - sum log sigma^2 + sum mu^2 (twice the standard KL plus latent_size).
[[nodiscard]] double kl_term(const GaussianLatent& latent);

/// sum_i |xi_i - S(mu_i)|, S the identity or the linear range map. The weight delta is not applied.
[[nodiscard]] double sd_loss(std::span<const double> mu_k, std::span<const double> xi, SupScaling scaling,
                             std::span<const neural::Range> ranges = {});

/// One minibatch, one sample per row.
struct Batch {
  ad::Tensor inputs;   // n x input_steps*state_dim
  ad::Tensor targets;  // n x output_steps*state_dim
  ad::Tensor factors;  // n x k

  [[nodiscard]] std::size_t size() const noexcept { return inputs.rows(); }
};

/// Batch means of each term; total = reconstruction + kl + delta * supervised.
struct LossBreakdown {
  double reconstruction = 0.0;
  double kl = 0.0;
  double supervised = 0.0;
  double total = 0.0;
};

struct Loss {
  ad::Var total;
  LossBreakdown parts;
};

/**
 * @brief Records the family's loss on `tape`.
 *
 * eps (n x latent_size) is the reparameterization noise for VAE families and
 * is ignored otherwise. rng drives LSTM partial teacher forcing and may be null
 * for other families. `forcing` overrides the LSTM spec's teacher forcing mode.
 */
[[nodiscard]] Loss total_loss(ad::Tape& tape, const neural::Model& model, const neural::Bindings& params,
                              const Batch& batch, const ad::Tensor& eps, Rng* rng,
                              std::optional<neural::TeacherForcing> forcing = std::nullopt);

/// Same, drawing eps row-major from rng.
[[nodiscard]] Loss total_loss(ad::Tape& tape, const neural::Model& model, const neural::Bindings& params,
                              const Batch& batch, Rng& rng);

/// Standard normal noise of shape n x latent_size, or empty for non-VAE families.
[[nodiscard]] ad::Tensor draw_eps(const neural::Model& model, std::size_t n, Rng& rng);

}  // namespace disdyn::objective
