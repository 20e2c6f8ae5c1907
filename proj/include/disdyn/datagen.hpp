/**
 * @file datagen.hpp
 * @brief Split definitions, factor sampling, noisy trajectory datasets and the
 *        DYNSET v1 on-disk format.
 *
 * DYNSET v1 is a directory holding
 *   meta.json   UTF-8 metadata (system, split, ranges, k, T, state_dim, n, seed,
 *               format version, byte size and CRC32 of each binary file)
 *   states.bin  clean states   [n][T][state_dim]
 *   noisy.bin   noisy states   [n][T][state_dim]
 *   factors.bin factor values  [n][k]
 * Binaries are flat little-endian IEEE-754 doubles, row-major.
 */
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "disdyn/dynsys.hpp"
#include "disdyn/rng.hpp"

namespace disdyn::datagen {

using dynsys::FactorVector;
using dynsys::SystemKind;
using dynsys::Trajectory;

enum class Split { Train, Val, Test, OodEasy, OodHard };

inline constexpr std::array<Split, 5> kAllSplits = {Split::Train, Split::Val, Split::Test,
                                                    Split::OodEasy, Split::OodHard};

[[nodiscard]] std::string_view to_string(Split split);
[[nodiscard]] Split parse_split(std::string_view name);
[[nodiscard]] inline bool is_ood(Split s) { return s == Split::OodEasy || s == Split::OodHard; }

struct Range {
  double min = 0.0;
  double max = 0.0;

  [[nodiscard]] bool contains(double v) const noexcept { return v >= min && v <= max; }
  [[nodiscard]] double width() const noexcept { return max - min; }
  friend bool operator==(const Range&, const Range&) = default;
};

struct SplitSpec {
  Split split = Split::Train;
  std::vector<Range> factor_ranges;
  std::size_t n_sequences = 0;
  double noise_var = 0.0;
  std::size_t seq_len = 0;

  /// Throws ConfigError on min >= max, n_sequences == 0, noise_var < 0 or seq_len == 0.
  void validate() const;
};

/// Factor ranges shared by the train, validation and in-distribution test splits.
[[nodiscard]] std::vector<Range> training_ranges(SystemKind kind);

/// The split as tabulated for the benchmark (ranges, sequence counts, noise, length).
[[nodiscard]] SplitSpec default_split(SystemKind kind, Split split);

[[nodiscard]] double default_noise_var(SystemKind kind);

/// Generation knobs that are not part of the split itself.
struct BuildOptions {
  double tolerance = dynsys::kDefaultTolerance;
  dynsys::ThreeBodyCoupling coupling = dynsys::ThreeBodyCoupling::Force;
  std::size_t workers = 1;
};

struct Dataset {
  SystemKind system = SystemKind::Pendulum;
  SplitSpec spec;
  std::vector<Trajectory> trajectories;
  std::vector<std::vector<double>> noisy_states;  ///< parallel to trajectories
  std::uint64_t seed = 0;
  dynsys::ThreeBodyCoupling coupling = dynsys::ThreeBodyCoupling::Force;

  [[nodiscard]] std::size_t size() const noexcept { return trajectories.size(); }
  [[nodiscard]] std::size_t seq_len() const noexcept { return spec.seq_len; }
  [[nodiscard]] std::size_t state_dim() const { return dynsys::state_dim(system); }
  [[nodiscard]] std::size_t factor_count() const { return dynsys::factor_count(system); }
};

/// Maximum draws before sample_factors gives up on an OOD split.
inline constexpr std::size_t kMaxRejections = 1'000'000;

/**
 * @brief Draws one factor vector uniformly from the split's ranges.
 *
 * For OOD splits the draw is repeated until at least one factor lies strictly
 * outside its training range; a split whose ranges never allow that raises
 * ConfigError after kMaxRejections attempts.
 */
[[nodiscard]] FactorVector sample_factors(SystemKind kind, const SplitSpec& spec,
                                          std::span<const Range> train_ranges, Rng& rng);

/// Maps u in [0,1] to the pendulum's initial angle, 10 to 170 degrees, in radians.
[[nodiscard]] double pendulum_initial_angle(double u);

/// Pendulum: random angle, zero velocity. Lotka-Volterra and 3-body: fixed states.
[[nodiscard]] std::vector<double> initial_state(SystemKind kind, Rng& rng);

/// Clean states plus i.i.d. N(0, noise_var) per entry. The trajectory is not modified.
[[nodiscard]] std::vector<double> add_noise(const Trajectory& traj, double noise_var, Rng& rng);

/**
 * @brief Simulates `spec.n_sequences` trajectories.
 *
 * Sequence i uses its own stream seeded with derive_seed(seed, i), so content
 * does not depend on the worker count. Integration failures are rethrown with
 * the sequence index attached.
 */
[[nodiscard]] Dataset build_dataset(SystemKind kind, const SplitSpec& spec, std::uint64_t seed,
                                    const BuildOptions& options = {});

inline constexpr int kDynsetVersion = 1;

void write_dataset(const Dataset& ds, const std::filesystem::path& dir);

/// Reads and validates a DYNSET directory; throws IoError on any inconsistency.
[[nodiscard]] Dataset read_dataset(const std::filesystem::path& dir);

/// Per-factor min/max observed across a dataset.
[[nodiscard]] std::vector<Range> empirical_ranges(const Dataset& ds);

// Little-endian float64 helpers, shared by the checkpoint format.
void write_f64_file(const std::filesystem::path& path, std::span<const double> values);
[[nodiscard]] std::vector<double> read_f64_file(const std::filesystem::path& path,
                                                std::size_t expected_count);
[[nodiscard]] std::uint32_t crc32_of_file(const std::filesystem::path& path);
[[nodiscard]] std::uint32_t crc32_of(std::span<const double> values);

}  // namespace disdyn::datagen
