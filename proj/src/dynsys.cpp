#include "disdyn/dynsys.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "disdyn/errors.hpp"

namespace disdyn::dynsys {

std::size_t state_dim(SystemKind kind) {
  switch (kind) {
    case SystemKind::Pendulum: return 2;
    case SystemKind::LotkaVolterra: return 2;
    case SystemKind::ThreeBody: return 12;
  }
  return 0;
}

std::size_t factor_count(SystemKind kind) {
  switch (kind) {
    case SystemKind::Pendulum: return 1;
    case SystemKind::LotkaVolterra: return 4;
    case SystemKind::ThreeBody: return 4;
  }
  return 0;
}

std::size_t sequence_length(SystemKind kind) {
  return kind == SystemKind::Pendulum ? 2000 : 1000;
}

std::vector<std::string> factor_names(SystemKind kind) {
  switch (kind) {
    case SystemKind::Pendulum: return {"length"};
    case SystemKind::LotkaVolterra: return {"alpha", "beta", "gamma", "delta"};
    case SystemKind::ThreeBody: return {"K", "m1", "m2", "m3"};
  }
  return {};
}

std::string_view to_string(SystemKind kind) {
  switch (kind) {
    case SystemKind::Pendulum: return "pendulum";
    case SystemKind::LotkaVolterra: return "lotka_volterra";
    case SystemKind::ThreeBody: return "three_body";
  }
  return "unknown";
}

SystemKind parse_system(std::string_view name) {
  if (name == "pendulum") return SystemKind::Pendulum;
  if (name == "lotka_volterra" || name == "lv") return SystemKind::LotkaVolterra;
  if (name == "three_body" || name == "3body") return SystemKind::ThreeBody;
  throw ConfigError("unknown system '" + std::string(name) + "'");
}

std::string_view to_string(ThreeBodyCoupling coupling) {
  return coupling == ThreeBodyCoupling::Force ? "force" : "kinematic";
}

ThreeBodyCoupling parse_coupling(std::string_view name) {
  if (name == "force") return ThreeBodyCoupling::Force;
  if (name == "kinematic") return ThreeBodyCoupling::Kinematic;
  throw ConfigError("unknown 3-body coupling '" + std::string(name) + "'");
}

FactorVector make_factors(SystemKind kind, std::vector<double> values) {
  if (values.size() != factor_count(kind)) {
    throw ShapeError("system " + std::string(to_string(kind)) + " expects " +
                     std::to_string(factor_count(kind)) + " factors, got " +
                     std::to_string(values.size()));
  }
  for (double v : values) {
    if (!(v > 0.0) || !std::isfinite(v)) throw DomainError("factors must be finite and strictly positive");
  }
  return FactorVector{std::move(values), factor_names(kind)};
}

std::array<double, 2> pendulum_deriv(std::span<const double> state, double length) {
  if (!(length > 0.0)) throw DomainError("pendulum length must be positive");
  return {state[1], -(kGravity / length) * std::sin(state[0])};
}

std::array<double, 2> lotka_volterra_deriv(std::span<const double> state,
                                           std::span<const double> factors) {
  const double x = state[0];
  const double y = state[1];
  const double alpha = factors[0], beta = factors[1], gamma = factors[2], delta = factors[3];
  return {alpha * x - beta * x * y, delta * x * y - gamma * y};
}

std::array<double, 12> three_body_deriv(std::span<const double> state,
                                        std::span<const double> factors,
                                        ThreeBodyCoupling coupling) {
  const double k = factors[0];
  const double force_k = coupling == ThreeBodyCoupling::Force ? k : 1.0;
  const double kinematic_k = coupling == ThreeBodyCoupling::Kinematic ? k : 1.0;
  const double* mass = factors.data() + 1;

  std::array<double, 12> out{};
  for (int i = 0; i < 3; ++i) {
    out[2 * i] = kinematic_k * state[6 + 2 * i];
    out[2 * i + 1] = kinematic_k * state[6 + 2 * i + 1];
  }
  for (int i = 0; i < 3; ++i) {
    double ax = 0.0, ay = 0.0;
    for (int j = 0; j < 3; ++j) {
      if (j == i) continue;
      const double rx = state[2 * j] - state[2 * i];
      const double ry = state[2 * j + 1] - state[2 * i + 1];
      const double r = std::hypot(rx, ry);
      if (r < kCollisionDistance) {
        throw SingularityError("bodies " + std::to_string(i + 1) + " and " + std::to_string(j + 1) +
                               " coincide");
      }
      const double w = mass[j] / (r * r * r);
      ax += w * rx;
      ay += w * ry;
    }
    out[6 + 2 * i] = force_k * ax;
    out[6 + 2 * i + 1] = force_k * ay;
  }
  return out;
}

void derivative(SystemKind kind, std::span<const double> factors, std::span<const double> state,
                std::span<double> out, ThreeBodyCoupling coupling) {
  switch (kind) {
    case SystemKind::Pendulum: {
      const auto d = pendulum_deriv(state, factors[0]);
      std::copy(d.begin(), d.end(), out.begin());
      return;
    }
    case SystemKind::LotkaVolterra: {
      const auto d = lotka_volterra_deriv(state, factors);
      std::copy(d.begin(), d.end(), out.begin());
      return;
    }
    case SystemKind::ThreeBody: {
      const auto d = three_body_deriv(state, factors, coupling);
      std::copy(d.begin(), d.end(), out.begin());
      return;
    }
  }
}

namespace {

// Dormand-Prince 5(4) tableau.
constexpr double c2 = 1.0 / 5.0, c3 = 3.0 / 10.0, c4 = 4.0 / 5.0, c5 = 8.0 / 9.0;
constexpr double a21 = 1.0 / 5.0;
constexpr double a31 = 3.0 / 40.0, a32 = 9.0 / 40.0;
constexpr double a41 = 44.0 / 45.0, a42 = -56.0 / 15.0, a43 = 32.0 / 9.0;
constexpr double a51 = 19372.0 / 6561.0, a52 = -25360.0 / 2187.0, a53 = 64448.0 / 6561.0,
                 a54 = -212.0 / 729.0;
constexpr double a61 = 9017.0 / 3168.0, a62 = -355.0 / 33.0, a63 = 46732.0 / 5247.0,
                 a64 = 49.0 / 176.0, a65 = -5103.0 / 18656.0;
constexpr double a71 = 35.0 / 384.0, a73 = 500.0 / 1113.0, a74 = 125.0 / 192.0,
                 a75 = -2187.0 / 6784.0, a76 = 11.0 / 84.0;
// y5 - y4
constexpr double e1 = 71.0 / 57600.0, e3 = -71.0 / 16695.0, e4 = 71.0 / 1920.0,
                 e5 = -17253.0 / 339200.0, e6 = 22.0 / 525.0, e7 = -1.0 / 40.0;
// continuous extension
constexpr double d1 = -12715105075.0 / 11282082432.0, d3 = 87487479700.0 / 32700410799.0,
                 d4 = -10690763975.0 / 1880347072.0, d5 = 701980252875.0 / 199316789632.0,
                 d6 = -1453857185.0 / 822651844.0, d7 = 69997945.0 / 29380423.0;

// PI controller constants
constexpr double kSafety = 0.9;
constexpr double kBeta = 0.04;
constexpr double kExpo = 0.2 - 0.75 * kBeta;
constexpr double kMaxShrinkInv = 1.0 / 0.2;  // h may shrink to h/5
constexpr double kMaxGrowInv = 1.0 / 10.0;   // h may grow to 10h

using Vec = std::vector<double>;

double scaled_rms(const Vec& v, const Vec& y, double tol) {
  double acc = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double sc = tol + tol * std::abs(y[i]);
    acc += (v[i] / sc) * (v[i] / sc);
  }
  return std::sqrt(acc / static_cast<double>(v.size()));
}

class DormandPrince {
 public:
  DormandPrince(SystemKind kind, std::span<const double> factors, ThreeBodyCoupling coupling,
                std::size_t dim)
      : kind_(kind), factors_(factors), coupling_(coupling) {
    for (auto* v : {&k1_, &k2_, &k3_, &k4_, &k5_, &k6_, &k7_, &tmp_, &y_new_, &err_, &r1_, &r2_,
                    &r3_, &r4_, &r5_}) {
      v->assign(dim, 0.0);
    }
  }

  void rhs(const Vec& y, Vec& out) {
    derivative(kind_, factors_, y, out, coupling_);
    ++stats.rhs_evals;
  }

  double initial_step(const Vec& y0, double tol, double span) {
    rhs(y0, k1_);
    const double d0 = scaled_rms(y0, y0, tol);
    const double d1n = scaled_rms(k1_, y0, tol);
    double h0 = (d0 < 1e-5 || d1n < 1e-5) ? 1e-6 : 0.01 * d0 / d1n;
    h0 = std::min(h0, span);
    for (std::size_t i = 0; i < y0.size(); ++i) tmp_[i] = y0[i] + h0 * k1_[i];
    rhs(tmp_, k2_);
    for (std::size_t i = 0; i < y0.size(); ++i) err_[i] = k2_[i] - k1_[i];
    const double d2 = scaled_rms(err_, y0, tol) / h0;
    const double dmax = std::max(d1n, d2);
    const double h1 = dmax <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dmax, 0.2);
    return std::min({100.0 * h0, h1, span});
  }

  /// Attempts one step from (t, y) with size h; fills y_new_ and returns the error norm.
  double attempt(const Vec& y, double h, double tol) {
    const std::size_t n = y.size();
    for (std::size_t i = 0; i < n; ++i) tmp_[i] = y[i] + h * a21 * k1_[i];
    rhs(tmp_, k2_);
    for (std::size_t i = 0; i < n; ++i) tmp_[i] = y[i] + h * (a31 * k1_[i] + a32 * k2_[i]);
    rhs(tmp_, k3_);
    for (std::size_t i = 0; i < n; ++i)
      tmp_[i] = y[i] + h * (a41 * k1_[i] + a42 * k2_[i] + a43 * k3_[i]);
    rhs(tmp_, k4_);
    for (std::size_t i = 0; i < n; ++i)
      tmp_[i] = y[i] + h * (a51 * k1_[i] + a52 * k2_[i] + a53 * k3_[i] + a54 * k4_[i]);
    rhs(tmp_, k5_);
    for (std::size_t i = 0; i < n; ++i)
      tmp_[i] = y[i] + h * (a61 * k1_[i] + a62 * k2_[i] + a63 * k3_[i] + a64 * k4_[i] +
                            a65 * k5_[i]);
    rhs(tmp_, k6_);
    for (std::size_t i = 0; i < n; ++i)
      y_new_[i] = y[i] + h * (a71 * k1_[i] + a73 * k3_[i] + a74 * k4_[i] + a75 * k5_[i] +
                              a76 * k6_[i]);
    rhs(y_new_, k7_);

    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double e = h * (e1 * k1_[i] + e3 * k3_[i] + e4 * k4_[i] + e5 * k5_[i] + e6 * k6_[i] +
                            e7 * k7_[i]);
      const double sc = tol + tol * std::max(std::abs(y[i]), std::abs(y_new_[i]));
      acc += (e / sc) * (e / sc);
    }
    return std::sqrt(acc / static_cast<double>(n));
  }

  /// Prepares the continuous extension of the step just accepted.
  void prepare_dense(const Vec& y, double h) {
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double ydiff = y_new_[i] - y[i];
      const double bspl = h * k1_[i] - ydiff;
      r1_[i] = y[i];
      r2_[i] = ydiff;
      r3_[i] = bspl;
      r4_[i] = ydiff - h * k7_[i] - bspl;
      r5_[i] = h * (d1 * k1_[i] + d3 * k3_[i] + d4 * k4_[i] + d5 * k5_[i] + d6 * k6_[i] +
                    d7 * k7_[i]);
    }
  }

  void interpolate(double theta, std::span<double> out) const {
    const double theta1 = 1.0 - theta;
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = r1_[i] + theta * (r2_[i] + theta1 * (r3_[i] + theta * (r4_[i] + theta1 * r5_[i])));
    }
  }

  void accept(Vec& y) {
    y.swap(y_new_);
    k1_.swap(k7_);  // first-same-as-last
  }

  IntegratorStats stats;

 private:
  SystemKind kind_;
  std::span<const double> factors_;
  ThreeBodyCoupling coupling_;
  Vec k1_, k2_, k3_, k4_, k5_, k6_, k7_, tmp_, y_new_, err_;
  Vec r1_, r2_, r3_, r4_, r5_;
};

bool all_finite(const Vec& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace

Trajectory integrate(SystemKind kind, const FactorVector& factors, std::span<const double> initial,
                     std::size_t n_steps, double dt_out, const IntegratorOptions& options,
                     IntegratorStats* stats) {
  const std::size_t dim = state_dim(kind);
  if (n_steps < 1) throw ConfigError("integrate: n_steps must be at least 1");
  if (!(dt_out > 0.0)) throw ConfigError("integrate: output step must be positive");
  if (!(options.tolerance > 0.0)) throw ConfigError("integrate: tolerance must be positive");
  if (initial.size() != dim) {
    throw ShapeError("integrate: initial state has " + std::to_string(initial.size()) +
                     " entries, system needs " + std::to_string(dim));
  }
  if (factors.size() != factor_count(kind)) throw ShapeError("integrate: wrong factor count");

  Trajectory traj;
  traj.steps = n_steps;
  traj.dim = dim;
  traj.dt = dt_out;
  traj.factors = factors;
  traj.initial_state.assign(initial.begin(), initial.end());
  traj.states.assign(n_steps * dim, 0.0);
  std::copy(initial.begin(), initial.end(), traj.states.begin());

  const double t_end = static_cast<double>(n_steps - 1) * dt_out;
  if (n_steps == 1) return traj;

  Vec y(initial.begin(), initial.end());
  DormandPrince dp(kind, factors.values, options.coupling, dim);
  const double tol = options.tolerance;
  double t = 0.0;
  std::size_t next_out = 1;
  try {
    double h = dp.initial_step(y, tol, t_end);
    double fac_old = 1e-4;
    bool last_rejected = false;
    std::size_t steps = 0;
    while (next_out < n_steps) {
      if (++steps > options.max_steps) throw IntegrationError("step budget exhausted", t);
      if (h < 1e-14 * std::max(1.0, std::abs(t))) throw IntegrationError("step size underflow", t);

      const double err = dp.attempt(y, h, tol);
      if (!std::isfinite(err)) {
        ++dp.stats.rejected;
        h *= 0.1;
        last_rejected = true;
        continue;
      }
      const double fac11 = std::pow(err, kExpo);
      if (err <= 1.0) {
        double fac = fac11 / std::pow(fac_old, kBeta);
        fac = std::clamp(fac / kSafety, kMaxGrowInv, kMaxShrinkInv);
        double h_new = h / fac;
        fac_old = std::max(err, 1e-4);
        if (last_rejected) h_new = std::min(h_new, h);
        last_rejected = false;

        dp.prepare_dense(y, h);
        const double t_new = t + h;
        while (next_out < n_steps) {
          const double t_out = static_cast<double>(next_out) * dt_out;
          if (t_out > t_new) break;
          dp.interpolate((t_out - t) / h, std::span<double>(traj.states.data() + next_out * dim, dim));
          ++next_out;
        }
        dp.accept(y);
        if (!all_finite(y)) throw IntegrationError("non-finite state", t_new);
        t = t_new;
        ++dp.stats.accepted;
        h = std::min(h_new, std::max(t_end - t, dt_out));
      } else {
        ++dp.stats.rejected;
        h /= std::min(kMaxShrinkInv, fac11 / kSafety);
        last_rejected = true;
      }
    }
  } catch (const SingularityError& e) {
    throw IntegrationError(std::string("singular right-hand side: ") + e.what(), t);
  }
  for (double v : traj.states) {
    if (!std::isfinite(v)) throw IntegrationError("non-finite output sample", t);
  }
  if (stats != nullptr) *stats = dp.stats;
  return traj;
}

double pendulum_energy(std::span<const double> state, double length) {
  return 0.5 * state[1] * state[1] - (kGravity / length) * std::cos(state[0]);
}

double lotka_volterra_invariant(std::span<const double> state, std::span<const double> factors) {
  const double alpha = factors[0], beta = factors[1], gamma = factors[2], delta = factors[3];
  return delta * state[0] - gamma * std::log(state[0]) + beta * state[1] - alpha * std::log(state[1]);
}

std::array<double, 2> three_body_momentum(std::span<const double> state,
                                          std::span<const double> factors) {
  std::array<double, 2> p{0.0, 0.0};
  for (int i = 0; i < 3; ++i) {
    p[0] += factors[1 + i] * state[6 + 2 * i];
    p[1] += factors[1 + i] * state[6 + 2 * i + 1];
  }
  return p;
}

}  // namespace disdyn::dynsys
