#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "disdyn/datagen.hpp"
#include "disdyn/errors.hpp"
#include "json.hpp"

using namespace disdyn;
using namespace disdyn::datagen;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("disdyn_datagen_" + name);
  fs::remove_all(p);
  return p;
}

SplitSpec small(SystemKind kind, Split split, std::size_t n, std::size_t len = 120) {
  auto s = default_split(kind, split);
  s.n_sequences = n;
  s.seq_len = len;
  return s;
}

}  // namespace

TEST_SUITE("datagen") {
  TEST_CASE("default splits follow the dataset table") {
    for (auto kind : {SystemKind::Pendulum, SystemKind::LotkaVolterra, SystemKind::ThreeBody}) {
      CHECK(default_split(kind, Split::Train).n_sequences == 8000);
      for (auto s : {Split::Val, Split::Test, Split::OodEasy, Split::OodHard}) CHECK(default_split(kind, s).n_sequences == 1000);
    }
    CHECK(default_split(SystemKind::Pendulum, Split::Train).factor_ranges == std::vector<Range>{{1.0, 1.5}});
    CHECK(default_split(SystemKind::Pendulum, Split::OodEasy).factor_ranges == std::vector<Range>{{1.5, 1.6}});
    CHECK(default_split(SystemKind::Pendulum, Split::OodHard).factor_ranges == std::vector<Range>{{0.9, 1.0}});
    CHECK(default_split(SystemKind::ThreeBody, Split::Train).noise_var == 0.01);
    CHECK(default_split(SystemKind::LotkaVolterra, Split::Val).noise_var == 0.05);
    const auto lv_hard = default_split(SystemKind::LotkaVolterra, Split::OodHard).factor_ranges;
    CHECK(lv_hard[0].min == doctest::Approx(1.93));
    CHECK(lv_hard[0].max == doctest::Approx(2.07));
  }

  TEST_CASE("in-distribution factors stay inside the training ranges") {
    Rng rng(5);
    const auto spec = default_split(SystemKind::LotkaVolterra, Split::Test);
    const auto train = training_ranges(SystemKind::LotkaVolterra);
    for (int i = 0; i < 1000; ++i) {
      const auto f = sample_factors(SystemKind::LotkaVolterra, spec, train, rng);
      for (std::size_t j = 0; j < f.size(); ++j) REQUIRE(train[j].contains(f.values[j]));
    }
  }

  TEST_CASE("OOD factors always leave the training box") {
    Rng rng(6);
    for (auto kind : {SystemKind::LotkaVolterra, SystemKind::ThreeBody}) {
      for (auto split : {Split::OodEasy, Split::OodHard}) {
        const auto spec = default_split(kind, split);
        const auto train = training_ranges(kind);
        for (int i = 0; i < 500; ++i) {
          const auto f = sample_factors(kind, spec, train, rng);
          bool outside = false;
          for (std::size_t j = 0; j < f.size(); ++j) {
            REQUIRE(spec.factor_ranges[j].contains(f.values[j]));
            outside = outside || !train[j].contains(f.values[j]);
          }
          REQUIRE(outside);
        }
      }
    }
  }

  TEST_CASE("an OOD split inside the training box is rejected") {
    Rng rng(1);
    auto spec = default_split(SystemKind::Pendulum, Split::OodEasy);
    spec.factor_ranges = {{1.1, 1.2}};
    CHECK_THROWS_AS((void)sample_factors(SystemKind::Pendulum, spec, training_ranges(SystemKind::Pendulum), rng), ConfigError);
  }

  TEST_CASE("pendulum lengths are uniform over the range") {
    Rng rng(7);
    const auto spec = default_split(SystemKind::Pendulum, Split::Train);
    std::vector<int> deciles(10, 0);
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
      const double l = sample_factors(SystemKind::Pendulum, spec, training_ranges(SystemKind::Pendulum), rng).values[0];
      ++deciles[std::min(9, static_cast<int>((l - 1.0) / 0.05))];
    }
    double chi2 = 0.0;
    for (int c : deciles) chi2 += (c - n / 10.0) * (c - n / 10.0) / (n / 10.0);
    CHECK(chi2 < 27.9);  // 9 dof, p ~ 0.001
  }

  TEST_CASE("initial angle spans 10 to 170 degrees") {
    CHECK(pendulum_initial_angle(0.0) == doctest::Approx(10.0 * std::numbers::pi / 180.0));
    CHECK(pendulum_initial_angle(1.0) == doctest::Approx(170.0 * std::numbers::pi / 180.0));
    Rng rng(8);
    for (int i = 0; i < 1000; ++i) {
      const auto s = initial_state(SystemKind::Pendulum, rng);
      REQUIRE(s[1] == 0.0);
      REQUIRE(s[0] >= pendulum_initial_angle(0.0));
      REQUIRE(s[0] <= pendulum_initial_angle(1.0));
    }
  }

  TEST_CASE("noise has the requested variance") {
    dynsys::Trajectory t;
    t.steps = 50000;
    t.dim = 2;
    t.states.assign(100000, 1.5);
    Rng rng(9);
    const auto noisy = add_noise(t, 0.05, rng);
    double s = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < noisy.size(); ++i) {
      const double e = noisy[i] - t.states[i];
      s += e;
      s2 += e * e;
    }
    const double n = static_cast<double>(noisy.size());
    CHECK(std::abs(s / n) < 0.003);
    CHECK(s2 / n == doctest::Approx(0.05).epsilon(0.02));
    CHECK(add_noise(t, 0.0, rng) == t.states);
    CHECK_THROWS_AS((void)add_noise(t, -1.0, rng), DomainError);
  }

  TEST_CASE("datasets do not depend on the worker count") {
    const auto spec = small(SystemKind::ThreeBody, Split::Train, 9, 80);
    const auto a = build_dataset(SystemKind::ThreeBody, spec, 11, {.workers = 1});
    const auto b = build_dataset(SystemKind::ThreeBody, spec, 11, {.workers = 4});
    REQUIRE(a.size() == 9);
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a.trajectories[i].states == b.trajectories[i].states);
      CHECK(a.noisy_states[i] == b.noisy_states[i]);
      CHECK(a.trajectories[i].factors.values == b.trajectories[i].factors.values);
    }
    const auto c = build_dataset(SystemKind::ThreeBody, spec, 12);
    CHECK(c.noisy_states[0] != a.noisy_states[0]);
  }

  TEST_CASE("DYNSET round trip is exact") {
    const auto dir = scratch("roundtrip");
    const auto ds = build_dataset(SystemKind::LotkaVolterra, small(SystemKind::LotkaVolterra, Split::OodEasy, 4), 3);
    write_dataset(ds, dir);
    const auto back = read_dataset(dir);
    CHECK(back.system == ds.system);
    CHECK(back.spec.split == Split::OodEasy);
    CHECK(back.seed == 3);
    CHECK(back.spec.factor_ranges == ds.spec.factor_ranges);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      CHECK(back.trajectories[i].states == ds.trajectories[i].states);
      CHECK(back.noisy_states[i] == ds.noisy_states[i]);
      CHECK(back.trajectories[i].factors.values == ds.trajectories[i].factors.values);
    }
    const auto meta = nlohmann::json::parse(std::ifstream(dir / "meta.json"));
    CHECK(meta["format"] == "DYNSET");
    CHECK(meta["format_version"] == 1);
    CHECK(meta["files"]["states.bin"]["bytes"] == 4 * 120 * 2 * 8);
    fs::remove_all(dir);
  }

  TEST_CASE("corrupted DYNSET files are rejected") {
    const auto dir = scratch("corrupt");
    const auto ds = build_dataset(SystemKind::Pendulum, small(SystemKind::Pendulum, Split::Train, 3), 4);
    write_dataset(ds, dir);

    SUBCASE("flipped byte") {
      std::fstream f(dir / "noisy.bin", std::ios::in | std::ios::out | std::ios::binary);
      f.seekp(17);
      f.put('\x55');
      f.close();
      CHECK_THROWS_AS((void)read_dataset(dir), IoError);
    }
    SUBCASE("truncated file") {
      fs::resize_file(dir / "states.bin", 100);
      CHECK_THROWS_AS((void)read_dataset(dir), IoError);
    }
    SUBCASE("future version") {
      auto meta = nlohmann::json::parse(std::ifstream(dir / "meta.json"));
      meta["format_version"] = 2;
      std::ofstream(dir / "meta.json") << meta.dump();
      CHECK_THROWS_AS((void)read_dataset(dir), IoError);
    }
    SUBCASE("missing directory") { CHECK_THROWS_AS((void)read_dataset(dir / "nope"), IoError); }
    fs::remove_all(dir);
  }

  TEST_CASE("empirical ranges bracket the sampled factors") {
    const auto ds = build_dataset(SystemKind::Pendulum, small(SystemKind::Pendulum, Split::Train, 40, 20), 5);
    const auto r = empirical_ranges(ds);
    REQUIRE(r.size() == 1);
    CHECK(r[0].min >= 1.0);
    CHECK(r[0].max <= 1.5);
    CHECK(r[0].min < r[0].max);
    for (const auto& t : ds.trajectories) CHECK(r[0].contains(t.factors.values[0]));
  }

  TEST_CASE("split validation") {
    auto s = small(SystemKind::Pendulum, Split::Train, 0);
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s.n_sequences = 2;
    s.factor_ranges = {{1.5, 1.0}};
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s.factor_ranges = {{1.0, 1.5}, {1.0, 1.5}};
    CHECK_THROWS_AS((void)build_dataset(SystemKind::Pendulum, s, 1), ConfigError);
  }
}
