#include <doctest.h>

#include <cmath>

#include "disdyn/errors.hpp"
#include "disdyn/objective.hpp"
#include "oracle.hpp"

using namespace disdyn;
using namespace disdyn::objective;
using neural::Family;
using neural::Model;

namespace {

neural::ModelSpec small(Family f) {
  auto s = neural::default_spec(f, dynsys::SystemKind::Pendulum);
  s.input_steps = 4;
  s.output_steps = 2;
  s.hidden = {6, 5};
  s.latent_size = 3;
  s.layer_norm_latent = f != Family::MlpAe;
  s.factor_ranges = {{1.0, 1.5}};
  s.seed = 3;
  return s;
}

Batch random_batch(std::size_t n, const neural::ModelSpec& s, std::uint64_t seed) {
  Rng rng(seed);
  Batch b{ad::Tensor(n, s.input_size()), ad::Tensor(n, s.output_size()), ad::Tensor(n, s.factor_count())};
  for (double& v : b.inputs.data()) v = rng.uniform(-2.0, 2.0);
  for (double& v : b.targets.data()) v = rng.uniform(-2.0, 2.0);
  for (double& v : b.factors.data()) v = rng.uniform(1.0, 1.5);
  return b;
}

double tape_loss(const Model& m, const Batch& b, const ad::Tensor& eps) {
  ad::Tape tape(false);
  return total_loss(tape, m, m.bind(tape), b, eps, nullptr).total.value().item();
}

}  // namespace

TEST_SUITE("objective") {
  TEST_CASE("reconstruction examples") {
    CHECK(reconstruction_nll(std::vector<double>(20, 0.3), std::vector<double>(20, 0.3), 1.0) == 0.0);
    const std::vector<double> x(4, 1.0), mu(4, 0.0);
    CHECK(reconstruction_nll(x, mu, 1.0) == doctest::Approx(4.0));
    CHECK(reconstruction_nll(x, mu, 0.1) == doctest::Approx(40.0 + 4.0 * std::log(0.1)));
    CHECK(reconstruction_nll(x, mu, 0.1) == doctest::Approx(30.7897).epsilon(1e-5));
    CHECK_THROWS_AS((void)reconstruction_nll(x, mu, 0.0), DomainError);
  }

  TEST_CASE("KL examples") {
    CHECK(kl_term({std::vector<double>(4, 0.0), std::vector<double>(4, 0.0)}) == doctest::Approx(4.0));
    CHECK(kl_term({{1.0}, {0.0}}) == doctest::Approx(2.0));
    CHECK(kl_term({{0.0}, {std::log(2.0)}}) == doctest::Approx(2.6137).epsilon(1e-4));
  }

  TEST_CASE("KL term is bounded below by the latent size") {
    Rng rng(4);
    for (int i = 0; i < 200; ++i) {
      neural::GaussianLatent l;
      for (int j = 0; j < 5; ++j) {
        l.mu.push_back(rng.uniform(-3.0, 3.0));
        l.log_sigma.push_back(rng.uniform(-3.0, 3.0));
      }
      CHECK(kl_term(l) >= 5.0);
    }
  }

  TEST_CASE("KL term against a Monte-Carlo estimate") {
    // kl_term = 2 KL(q || N(0, I)) + latent_size
    const neural::GaussianLatent l{{0.4, -1.1}, {std::log(0.7), std::log(1.6)}};
    Rng rng(5);
    double kl = 0.0;
    const int n = 200000;
    for (int s = 0; s < n; ++s) {
      for (std::size_t i = 0; i < 2; ++i) {
        const double sigma = std::exp(l.log_sigma[i]);
        const double z = l.mu[i] + sigma * rng.normal();
        const double u = (z - l.mu[i]) / sigma;
        kl += -0.5 * u * u - std::log(sigma) + 0.5 * z * z;
      }
    }
    kl /= n;
    CHECK(kl_term(l) == doctest::Approx(2.0 * kl + 2.0).epsilon(0.01));
  }

  TEST_CASE("supervision examples") {
    const std::vector<neural::Range> r{{1.0, 1.5}};
    CHECK(sd_loss(std::vector{0.4}, std::vector{1.2}, neural::SupScaling::Linear, r) == doctest::Approx(0.0));
    CHECK(sd_loss(std::vector{0.0}, std::vector{1.2}, neural::SupScaling::Linear, r) == doctest::Approx(0.2));
    CHECK(sd_loss(std::vector{1.3}, std::vector{1.2}, neural::SupScaling::None) == doctest::Approx(0.1));
    CHECK_THROWS_AS((void)sd_loss(std::vector{1.0, 2.0}, std::vector{1.0}, neural::SupScaling::None), ShapeError);
  }

  TEST_CASE("tape loss matches the plain-loop oracle") {
    for (auto f : {Family::MlpAe, Family::MlpSd, Family::Vae, Family::VaeSd, Family::VaeSsd}) {
      auto s = small(f);
      if (neural::is_supervised(f)) s.supervision_delta = 0.3;
      Model m(s);
      Rng rng(11);
      for (int trial = 0; trial < 5; ++trial) {
        const auto b = random_batch(7, s, 100 + trial);
        const auto eps = draw_eps(m, b.size(), rng);
        const double want = oracle::loss(m, b, eps);
        CHECK(std::abs(tape_loss(m, b, eps) - want) <= 1e-12 * std::max(1.0, std::abs(want)));
      }
    }
  }

  TEST_CASE("breakdown adds up") {
    auto s = small(Family::VaeSsd);
    s.supervision_delta = 0.5;
    Model m(s);
    const auto b = random_batch(5, s, 7);
    Rng rng(1);
    ad::Tape tape(false);
    const auto loss = total_loss(tape, m, m.bind(tape), b, rng);
    const auto& p = loss.parts;
    CHECK(p.total == doctest::Approx(p.reconstruction + p.kl + 0.5 * p.supervised));
    CHECK(p.kl >= 3.0);
  }

  TEST_CASE("zero weight reproduces the plain VAE loss") {
    Model vae(small(Family::Vae));
    auto sd = small(Family::VaeSd);
    sd.supervision_delta = 0.0;
    Model vae_sd(sd);
    const auto b = random_batch(6, sd, 8);
    Rng r1(2), r2(2);
    ad::Tape t1, t2;
    const auto p1 = vae.bind(t1), p2 = vae_sd.bind(t2);
    const auto l1 = total_loss(t1, vae, p1, b, r1);
    const auto l2 = total_loss(t2, vae_sd, p2, b, r2);
    CHECK(l1.total.value().item() == l2.total.value().item());
    t1.backward(l1.total);
    t2.backward(l2.total);
    for (std::size_t i = 0; i < p1.size(); ++i) CHECK(t1.grad(p1[i]) == t2.grad(p2[i]));
  }

  TEST_CASE("duplicating the batch leaves the mean loss unchanged") {
    auto s = small(Family::MlpSd);
    s.supervision_delta = 0.2;
    Model m(s);
    const auto b = random_batch(3, s, 9);
    Batch twice{ad::Tensor(6, b.inputs.cols()), ad::Tensor(6, b.targets.cols()), ad::Tensor(6, b.factors.cols())};
    for (std::size_t r = 0; r < 6; ++r) {
      for (std::size_t c = 0; c < b.inputs.cols(); ++c) twice.inputs(r, c) = b.inputs(r % 3, c);
      for (std::size_t c = 0; c < b.targets.cols(); ++c) twice.targets(r, c) = b.targets(r % 3, c);
      for (std::size_t c = 0; c < b.factors.cols(); ++c) twice.factors(r, c) = b.factors(r % 3, c);
    }
    CHECK(tape_loss(m, twice, {}) == doctest::Approx(tape_loss(m, b, {})).epsilon(1e-13));
  }

  TEST_CASE("gradient of the full supervised VAE loss") {
    auto s = small(Family::VaeSsd);
    s.supervision_delta = 0.1;
    s.decoder_gamma = 0.5;
    Model m(s);
    auto b = random_batch(4, s, 10);
    Rng rng(6);
    const auto eps = draw_eps(m, 4, rng);
    for (const char* name : {"enc.0.weight", "enc.ln.gain", "enc.mu.weight", "enc.log_sigma.bias", "dec.1.weight", "dec.out.bias"}) {
      CAPTURE(name);
      const ad::Tensor at = m.parameter(name).value;
      const auto f = [&](ad::Tape& tape, ad::Var v) {
        auto bind = m.bind(tape);
        for (std::size_t i = 0; i < m.parameters().size(); ++i) {
          if (m.parameters()[i].name == name) bind[i] = v;
        }
        return total_loss(tape, m, bind, b, eps, nullptr).total;
      };
      CHECK(ad::gradient_check(f, at) < 1e-5);
    }
  }

  TEST_CASE("batch shape errors") {
    Model m(small(Family::VaeSd));
    auto b = random_batch(3, m.spec(), 1);
    ad::Tape tape;
    CHECK_THROWS_AS((void)total_loss(tape, m, m.bind(tape), b, ad::Tensor(2, 3), nullptr), ShapeError);
    b.factors = ad::Tensor(3, 2);
    Rng rng(1);
    CHECK_THROWS_AS((void)total_loss(tape, m, m.bind(tape), b, rng), ShapeError);
  }
}
