#include "disdyn/objective.hpp"

#include <cmath>
#include <string>

#include "disdyn/errors.hpp"

namespace disdyn::objective {

using neural::Family;

double reconstruction_nll(std::span<const double> x, std::span<const double> mu_x, double gamma) {
  if (!(gamma > 0.0)) throw DomainError("decoder gamma must be positive, got " + std::to_string(gamma));
  if (x.size() != mu_x.size()) {
    throw ShapeError("reconstruction_nll: target has " + std::to_string(x.size()) + " values, prediction " +
                     std::to_string(mu_x.size()));
  }
  double l1 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) l1 += std::abs(x[i] - mu_x[i]);
  return l1 / gamma + static_cast<double>(x.size()) * std::log(gamma);
}

double kl_term(const GaussianLatent& latent) {
  if (latent.mu.size() != latent.log_sigma.size()) throw ShapeError("kl_term: mu and log_sigma differ in length");
  double out = 0.0;
  for (std::size_t i = 0; i < latent.mu.size(); ++i) {
    const double ls = latent.log_sigma[i];
    out += std::exp(2.0 * ls) - 2.0 * ls + latent.mu[i] * latent.mu[i];
  }
  return out;
}

double sd_loss(std::span<const double> mu_k, std::span<const double> xi, SupScaling scaling,
               std::span<const neural::Range> ranges) {
  if (mu_k.size() != xi.size()) {
    throw ShapeError("sd_loss: " + std::to_string(mu_k.size()) + " latents for " + std::to_string(xi.size()) +
                     " factors");
  }
  std::vector<double> s(mu_k.begin(), mu_k.end());
  if (scaling == SupScaling::Linear) s = neural::scale_latent(mu_k, ranges);
  double out = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) out += std::abs(xi[i] - s[i]);
  return out;
}

ad::Tensor draw_eps(const neural::Model& model, std::size_t n, Rng& rng) {
  if (!neural::is_vae(model.spec().family)) return {};
  ad::Tensor eps(n, model.spec().latent_size);
  for (double& e : eps.data()) e = rng.normal();
  return eps;
}

namespace {

void check_batch(const neural::ModelSpec& spec, const Batch& batch) {
  const std::size_t n = batch.size();
  if (n == 0) throw ShapeError("empty batch");
  if (batch.inputs.cols() != spec.input_size() || batch.targets.rows() != n ||
      batch.targets.cols() != spec.output_size()) {
    throw ShapeError("batch shapes " + ad::to_string(batch.inputs.shape()) + " / " +
                     ad::to_string(batch.targets.shape()) + " do not fit the model");
  }
  if (neural::is_supervised(spec.family) &&
      (batch.factors.rows() != n || batch.factors.cols() != spec.factor_count())) {
    throw ShapeError("batch factors " + ad::to_string(batch.factors.shape()) + " do not match " +
                     std::to_string(spec.factor_count()) + " factors");
  }
}

// Batch mean of sum_i |xi_i - S(mu_i)| over the first k latents.
ad::Var supervised_term(ad::Tape& tape, const neural::ModelSpec& spec, ad::Var mu, const ad::Tensor& factors) {
  const std::size_t n = factors.rows();
  const std::size_t k = factors.cols();
  ad::Var s = ad::slice(mu, 0, k);
  if (spec.sup_scaling == SupScaling::Linear) {
    ad::Tensor width(n, k), lo(1, k);
    for (std::size_t j = 0; j < k; ++j) {
      const auto& r = spec.factor_ranges[j];
      lo[j] = r.min;
      for (std::size_t i = 0; i < n; ++i) width(i, j) = r.max - r.min;
    }
    s = ad::add(ad::mul(s, tape.constant(std::move(width))), tape.constant(std::move(lo)));
  }
  ad::Var diff = ad::sub(tape.constant_view(factors), s);
  return ad::scale(ad::sum(ad::abs(diff)), 1.0 / static_cast<double>(n));
}

ad::Var mean_l1(ad::Tape& tape, ad::Var pred, const ad::Tensor& targets) {
  const double n = static_cast<double>(targets.rows());
  return ad::scale(ad::sum(ad::abs(ad::sub(tape.constant_view(targets), pred))), 1.0 / n);
}

}  // namespace

Loss total_loss(ad::Tape& tape, const neural::Model& model, const neural::Bindings& params, const Batch& batch,
                const ad::Tensor& eps, Rng* rng, std::optional<neural::TeacherForcing> forcing) {
  const auto& spec = model.spec();
  check_batch(spec, batch);
  const std::size_t n = batch.size();
  ad::Var x = tape.constant_view(batch.inputs);
  Loss loss;

  if (spec.family == Family::Lstm) {
    ad::Var pred = model.lstm_forward(params, x, spec.output_steps, &batch.targets,
                                      forcing.value_or(spec.lstm.teacher_forcing), rng);
    loss.total = mean_l1(tape, pred, batch.targets);
    loss.parts.reconstruction = loss.parts.total = loss.total.value().item();
    return loss;
  }

  const neural::Encoding enc = model.encode(params, x);
  ad::Var sup;
  if (neural::is_supervised(spec.family)) {
    sup = supervised_term(tape, spec, enc.mu, batch.factors);
    loss.parts.supervised = sup.value().item();
  }

  if (!neural::is_vae(spec.family)) {
    ad::Var pred = model.decode(params, enc.mu);
    ad::Var rec = mean_l1(tape, pred, batch.targets);
    loss.parts.reconstruction = rec.value().item();
    loss.total = rec;
    if (sup.valid() && spec.supervision_delta != 0.0) loss.total = ad::add(rec, ad::scale(sup, spec.supervision_delta));
    loss.parts.total = loss.total.value().item();
    return loss;
  }

  if (eps.rows() != n || eps.cols() != spec.latent_size) {
    throw ShapeError("eps has shape " + ad::to_string(eps.shape()) + ", expected " +
                     ad::to_string({n, spec.latent_size}));
  }
  const double gamma = spec.decoder_gamma;
  const double nd = static_cast<double>(n);
  ad::Var z = neural::reparameterize(enc.mu, enc.log_sigma, tape.constant(eps));
  ad::Var mux = model.decode(params, z);
  ad::Var l1 = ad::sum(ad::abs(ad::sub(tape.constant_view(batch.targets), mux)));
  const double log_term = static_cast<double>(spec.output_size()) * std::log(gamma);
  ad::Var rec = ad::add(ad::scale(l1, 1.0 / (gamma * nd)), tape.constant(ad::Tensor::scalar(log_term)));

  ad::Var sigma2 = ad::sum(ad::square(ad::exp(enc.log_sigma)));
  ad::Var log_sigma2 = ad::scale(ad::sum(enc.log_sigma), 2.0);
  ad::Var mu2 = ad::sum(ad::square(enc.mu));
  ad::Var kl = ad::scale(ad::add(ad::sub(sigma2, log_sigma2), mu2), 1.0 / nd);

  loss.parts.reconstruction = rec.value().item();
  loss.parts.kl = kl.value().item();
  loss.total = ad::add(rec, kl);
  if (sup.valid() && spec.supervision_delta != 0.0) {
    loss.total = ad::add(loss.total, ad::scale(sup, spec.supervision_delta));
  }
  loss.parts.total = loss.total.value().item();
  return loss;
}

Loss total_loss(ad::Tape& tape, const neural::Model& model, const neural::Bindings& params, const Batch& batch,
                Rng& rng) {
  const ad::Tensor eps = draw_eps(model, batch.size(), rng);
  return total_loss(tape, model, params, batch, eps, &rng);
}

}  // namespace disdyn::objective
