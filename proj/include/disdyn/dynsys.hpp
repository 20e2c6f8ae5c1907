/**
 * @file dynsys.hpp
 * @brief The three benchmark ODE systems and an adaptive Dormand-Prince
 *        integrator sampling them on a uniform output grid.
 */
#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace disdyn::dynsys {

enum class SystemKind { Pendulum, LotkaVolterra, ThreeBody };

/// Which 3-body constant the first factor scales.
enum class ThreeBodyCoupling {
  Force,      ///< factor multiplies the gravitational term, kinematic constant fixed at 1
  Kinematic,  ///< factor multiplies dx/dt = K v, force constant fixed at 1
};

inline constexpr double kGravity = 9.81;
inline constexpr double kOutputStep = 0.01;
inline constexpr double kDefaultTolerance = 1e-8;
inline constexpr double kCollisionDistance = 1e-9;

[[nodiscard]] std::size_t state_dim(SystemKind kind);
[[nodiscard]] std::size_t factor_count(SystemKind kind);
[[nodiscard]] std::size_t sequence_length(SystemKind kind);
[[nodiscard]] std::vector<std::string> factor_names(SystemKind kind);

[[nodiscard]] std::string_view to_string(SystemKind kind);
[[nodiscard]] SystemKind parse_system(std::string_view name);
[[nodiscard]] std::string_view to_string(ThreeBodyCoupling coupling);
[[nodiscard]] ThreeBodyCoupling parse_coupling(std::string_view name);

/// Domain parameters that generated one trajectory.
struct FactorVector {
  std::vector<double> values;
  std::vector<std::string> names;

  [[nodiscard]] std::size_t size() const noexcept { return values.size(); }
};

/// Builds a validated factor vector (length k, all entries strictly positive).
[[nodiscard]] FactorVector make_factors(SystemKind kind, std::vector<double> values);

/// Row-major [steps x dim] state matrix plus the factors that produced it.
struct Trajectory {
  std::size_t steps = 0;
  std::size_t dim = 0;
  double dt = kOutputStep;
  std::vector<double> states;
  FactorVector factors;
  std::vector<double> initial_state;

  [[nodiscard]] std::span<const double> row(std::size_t t) const {
    return {states.data() + t * dim, dim};
  }
  [[nodiscard]] double at(std::size_t t, std::size_t j) const { return states[t * dim + j]; }
};

// Right-hand sides. States use SI units and radians.

[[nodiscard]] std::array<double, 2> pendulum_deriv(std::span<const double> state, double length);

/// factors = {alpha, beta, gamma, delta}.
[[nodiscard]] std::array<double, 2> lotka_volterra_deriv(std::span<const double> state,
                                                         std::span<const double> factors);

/// state = [x1 x2 x3 v1 v2 v3] with planar 2-vectors; factors = {K, m1, m2, m3}.
[[nodiscard]] std::array<double, 12> three_body_deriv(
    std::span<const double> state, std::span<const double> factors,
    ThreeBodyCoupling coupling = ThreeBodyCoupling::Force);

/// Dispatches to the system's right-hand side.
void derivative(SystemKind kind, std::span<const double> factors, std::span<const double> state,
                std::span<double> out, ThreeBodyCoupling coupling = ThreeBodyCoupling::Force);

struct IntegratorOptions {
  double tolerance = kDefaultTolerance;
  ThreeBodyCoupling coupling = ThreeBodyCoupling::Force;
  std::size_t max_steps = 10'000'000;
};

/// Counters from the last integration, for diagnostics and tests.
struct IntegratorStats {
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::size_t rhs_evals = 0;
};

/**
 * @brief Integrates a system and samples it at t = 0, dt_out, ..., (n_steps-1) dt_out.
 *
 * Dormand-Prince 5(4) with PI step control; output points come from the
 * 4th-order continuous extension, so the internal step is independent of the
 * output grid. Local error per step is held below `tolerance` in a mixed
 * absolute/relative RMS norm.
 *
 * Throws IntegrationError (carrying the failing time) on step-size underflow,
 * non-finite states or 3-body collisions.
 */
[[nodiscard]] Trajectory integrate(SystemKind kind, const FactorVector& factors,
                                   std::span<const double> initial, std::size_t n_steps,
                                   double dt_out = kOutputStep, const IntegratorOptions& options = {},
                                   IntegratorStats* stats = nullptr);

// Conserved quantities, used by tests and diagnostics.

/// E = w^2/2 - (g/l) cos(theta).
[[nodiscard]] double pendulum_energy(std::span<const double> state, double length);
/// V = delta x - gamma ln x + beta y - alpha ln y.
[[nodiscard]] double lotka_volterra_invariant(std::span<const double> state,
                                              std::span<const double> factors);
/// Total linear momentum sum_i m_i v_i.
[[nodiscard]] std::array<double, 2> three_body_momentum(std::span<const double> state,
                                                        std::span<const double> factors);

}  // namespace disdyn::dynsys
