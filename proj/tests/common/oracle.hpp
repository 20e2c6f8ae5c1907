// Plain-loop reference forward pass and loss, written against parameter names only.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "disdyn/neural.hpp"
#include "disdyn/objective.hpp"

namespace oracle {

using Vec = std::vector<double>;

inline const disdyn::ad::Tensor& param(const disdyn::neural::Model& m, const std::string& name) {
  for (const auto& p : m.parameters()) {
    if (p.name == name) return p.value;
  }
  throw std::runtime_error("oracle: no parameter " + name);
}

inline bool has_param(const disdyn::neural::Model& m, const std::string& name) {
  for (const auto& p : m.parameters()) {
    if (p.name == name) return true;
  }
  return false;
}

inline Vec dense(const disdyn::neural::Model& m, const std::string& name, const Vec& x) {
  const auto& w = param(m, name + ".weight");
  const auto& b = param(m, name + ".bias");
  Vec y(w.cols());
  for (std::size_t j = 0; j < w.cols(); ++j) {
    double s = b[j];
    for (std::size_t i = 0; i < w.rows(); ++i) s += x[i] * w(i, j);
    y[j] = s;
  }
  return y;
}

inline Vec leaky(Vec v, double slope) {
  for (double& e : v) e = e > 0.0 ? e : slope * e;
  return v;
}

struct Latent {
  Vec mu, log_sigma;
};

inline Latent encode(const disdyn::neural::Model& m, const Vec& x) {
  const auto& s = m.spec();
  Vec h = x;
  for (std::size_t i = 0; i < s.hidden.size(); ++i) h = leaky(dense(m, "enc." + std::to_string(i), h), s.leaky_slope);
  if (s.layer_norm_latent) {
    const auto& g = param(m, "enc.ln.gain");
    const auto& b = param(m, "enc.ln.bias");
    double mean = 0.0;
    for (double v : h) mean += v;
    mean /= static_cast<double>(h.size());
    double var = 0.0;
    for (double v : h) var += (v - mean) * (v - mean);
    var /= static_cast<double>(h.size());
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = (h[i] - mean) / std::sqrt(var + 1e-5) * g[i] + b[i];
  }
  if (disdyn::neural::is_vae(s.family)) return {dense(m, "enc.mu", h), dense(m, "enc.log_sigma", h)};
  return {dense(m, "enc.latent", h), {}};
}

inline Vec decode(const disdyn::neural::Model& m, const Vec& z) {
  const auto& s = m.spec();
  Vec h = z;
  for (std::size_t i = 0; i < s.hidden.size(); ++i) h = leaky(dense(m, "dec." + std::to_string(i), h), s.leaky_slope);
  return dense(m, "dec.out", h);
}

inline Vec row(const disdyn::ad::Tensor& t, std::size_t r) {
  const auto s = t.row_span(r);
  return {s.begin(), s.end()};
}

/// Batch-mean loss for the MLP and VAE families.
inline double loss(const disdyn::neural::Model& m, const disdyn::objective::Batch& b, const disdyn::ad::Tensor& eps) {
  using disdyn::neural::SupScaling;
  const auto& s = m.spec();
  const bool vae = disdyn::neural::is_vae(s.family);
  double total = 0.0;
  for (std::size_t n = 0; n < b.size(); ++n) {
    const Latent lat = encode(m, row(b.inputs, n));
    Vec z = lat.mu;
    double kl = 0.0;
    if (vae) {
      for (std::size_t i = 0; i < z.size(); ++i) {
        const double sigma = std::exp(lat.log_sigma[i]);
        z[i] += sigma * eps(n, i);
        kl += sigma * sigma - std::log(sigma * sigma) + lat.mu[i] * lat.mu[i];
      }
    }
    const Vec pred = decode(m, z);
    double l1 = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) l1 += std::abs(b.targets(n, i) - pred[i]);
    double sample = vae ? l1 / s.decoder_gamma + static_cast<double>(pred.size()) * std::log(s.decoder_gamma) + kl : l1;
    if (disdyn::neural::is_supervised(s.family)) {
      double sd = 0.0;
      for (std::size_t k = 0; k < b.factors.cols(); ++k) {
        double g = lat.mu[k];
        if (s.sup_scaling == SupScaling::Linear) g = g * (s.factor_ranges[k].max - s.factor_ranges[k].min) + s.factor_ranges[k].min;
        sd += std::abs(b.factors(n, k) - g);
      }
      sample += s.supervision_delta * sd;
    }
    total += sample;
  }
  return total / static_cast<double>(b.size());
}

}  // namespace oracle
