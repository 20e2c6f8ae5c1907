#include <doctest.h>

#include <cmath>
#include <functional>

#include "disdyn/errors.hpp"
#include "disdyn/evalkit.hpp"

using namespace disdyn;
using namespace disdyn::evalkit;
using trainer::RunRecord;

namespace {

// Maps the last state of the window to the next n_out states.
class Stub final : public neural::Predictor {
 public:
  using Step = std::function<std::vector<double>(std::span<const double> last)>;
  Stub(std::size_t n_in, std::size_t n_out, std::size_t d, Step step) : n_in_(n_in), n_out_(n_out), d_(d), step_(std::move(step)) {}

  std::size_t input_steps() const override { return n_in_; }
  std::size_t output_steps() const override { return n_out_; }
  std::size_t state_dim() const override { return d_; }
  std::vector<double> predict(std::span<const double> window) const override {
    ++calls;
    std::vector<double> out;
    std::vector<double> last(window.end() - static_cast<std::ptrdiff_t>(d_), window.end());
    for (std::size_t s = 0; s < n_out_; ++s) {
      last = step_(last);
      out.insert(out.end(), last.begin(), last.end());
    }
    return out;
  }

  mutable std::size_t calls = 0;

 private:
  std::size_t n_in_, n_out_, d_;
  Step step_;
};

Stub hold(std::size_t n_in, std::size_t n_out) {
  return Stub(n_in, n_out, 2, [](std::span<const double> x) { return std::vector<double>(x.begin(), x.end()); });
}

Stub blow_up() {
  return Stub(5, 1, 2, [](std::span<const double>) { return std::vector<double>{1e7, 0.0}; });
}

datagen::Dataset pendulum(datagen::Split split, std::size_t n, std::size_t len, std::uint64_t seed) {
  auto s = datagen::default_split(dynsys::SystemKind::Pendulum, split);
  s.n_sequences = n;
  s.seq_len = len;
  return datagen::build_dataset(dynsys::SystemKind::Pendulum, s, seed);
}

RunRecord record(std::optional<double> mae, std::uint64_t seed, std::size_t latent = 8) {
  RunRecord r;
  r.spec = neural::default_spec(neural::Family::Vae, dynsys::SystemKind::Pendulum);
  r.spec.seed = seed;
  r.spec.latent_size = latent;
  r.val_mae = mae;
  r.run_id = "run-" + std::to_string(seed);
  return r;
}

}  // namespace

TEST_SUITE("evalkit") {
  TEST_CASE("divergence threshold") {
    CHECK_FALSE(is_divergent(1e6));
    CHECK(is_divergent(1.0000001e6));
    CHECK(is_divergent(-2e6));
    CHECK(is_divergent(NAN));
    CHECK(is_divergent(INFINITY));
  }

  TEST_CASE("rollout refeeds and trims to the horizon") {
    auto s = Stub(4, 10, 2, [](std::span<const double> x) { return std::vector<double>{x[0] + 1.0, x[1]}; });
    const std::vector<double> seed(8, 0.0);
    const auto r = rollout(s, seed, 200);
    CHECK(s.calls == 20);
    CHECK(r.predicted.rows() == 200);
    CHECK_FALSE(r.diverged);
    for (std::size_t t = 0; t < 200; ++t) REQUIRE(r.predicted(t, 0) == static_cast<double>(t + 1));

    s.calls = 0;
    (void)rollout(s, seed, 25);
    CHECK(s.calls == 3);
  }

  TEST_CASE("rollout with an identity predictor repeats the seed") {
    auto s = hold(3, 2);
    const auto r = rollout(s, std::vector{0.0, 0.0, 0.0, 0.0, 0.7, -0.2}, 9);
    for (std::size_t t = 0; t < 9; ++t) {
      CHECK(r.predicted(t, 0) == 0.7);
      CHECK(r.predicted(t, 1) == -0.2);
    }
  }

  TEST_CASE("divergence is located at its first step") {
    auto s = Stub(2, 1, 2, [](std::span<const double> x) {
      return std::vector<double>{x[0] >= 3.0 ? 1e7 : x[0] + 1.0, 0.0};
    });
    const auto r = rollout(s, std::vector<double>(4, 0.0), 50);
    CHECK(r.diverged);
    REQUIRE(r.diverged_at.has_value());
    CHECK(*r.diverged_at == 3);
  }

  TEST_CASE("batched rollout stops once every row diverged") {
    auto s = blow_up();
    ad::Tensor seeds(3, 10);
    const auto r = rollout_batch(s, seeds, 40);
    CHECK(s.calls == 3);
    for (const auto& x : r) {
      CHECK(x.diverged);
      CHECK(*x.diverged_at == 0);
      CHECK(std::isnan(x.predicted(39, 0)));
    }
    CHECK_THROWS_AS((void)rollout_batch(s, ad::Tensor(1, 7), 5), ShapeError);
  }

  TEST_CASE("MAE examples") {
    ad::Tensor truth(200, 2);
    for (std::size_t i = 0; i < truth.size(); ++i) truth[i] = std::sin(0.01 * static_cast<double>(i));
    CHECK(mae_at(truth, truth) == 0.0);
    ad::Tensor off = truth;
    for (double& v : off.data()) v += 0.1;
    CHECK(mae_at(off, truth) == doctest::Approx(0.1).epsilon(1e-12));
    ad::Tensor half = truth;
    for (std::size_t i = 0; i < 20; ++i) half[i] += 1.0;
    CHECK(mae_at(half, truth, 10) == doctest::Approx(1.0));
    CHECK(mae_at(half, truth, 200) == doctest::Approx(20.0 / 400.0));
    CHECK_THROWS_AS((void)mae_at(ad::Tensor(200, 3), truth), ShapeError);
    CHECK_THROWS_AS((void)mae_at(ad::Tensor(100, 2), truth), ShapeError);
  }

  TEST_CASE("split evaluation scores clean future steps") {
    const auto ds = pendulum(datagen::Split::Test, 6, 40, 3);
    auto model = hold(5, 5);
    Rng rng(1);
    const auto all = evaluate_split(model, ds, 30, 6, rng);
    CHECK(all.n_evaluated == 6);
    CHECK(all.trajectories == std::vector<std::size_t>{0, 1, 2, 3, 4, 5});
    // oracle: hold the last noisy seed state
    double total = 0.0;
    for (std::size_t i = 0; i < 6; ++i) {
      const auto& noisy = ds.noisy_states[i];
      const auto& clean = ds.trajectories[i].states;
      double e = 0.0;
      for (std::size_t t = 5; t < 35; ++t) {
        for (std::size_t j = 0; j < 2; ++j) e += std::abs(noisy[4 * 2 + j] - clean[t * 2 + j]);
      }
      CHECK(all.mae[i] == doctest::Approx(e / 60.0).epsilon(1e-12));
      total += e / 60.0;
    }
    CHECK(*all.mae_mean == doctest::Approx(total / 6.0).epsilon(1e-12));

    Rng r1(9), r2(9);
    const auto sub1 = evaluate_split(model, ds, 30, 3, r1);
    const auto sub2 = evaluate_split(model, ds, 30, 3, r2);
    CHECK(sub1.trajectories.size() == 3);
    CHECK(sub1.trajectories == sub2.trajectories);
    CHECK(std::is_sorted(sub1.trajectories.begin(), sub1.trajectories.end()));

    CHECK_THROWS_AS((void)evaluate_split(model, ds, 36, 6, rng), ConfigError);
    CHECK_THROWS_AS((void)evaluate_split(model, ds, 30, 7, rng), ConfigError);
    CHECK_THROWS_AS((void)evaluate_split(model, ds, 30, 0, rng), ConfigError);
  }

  TEST_CASE("fully diverged splits have no MAE") {
    const auto ds = pendulum(datagen::Split::Test, 4, 30, 4);
    auto model = blow_up();
    Rng rng(1);
    const auto ev = evaluate_split(model, ds, 20, 4, rng);
    CHECK_FALSE(ev.mae_mean.has_value());
    CHECK(ev.diverged_count == 4);
    for (double m : ev.mae) CHECK(std::isnan(m));
  }

  TEST_CASE("top-k selection") {
    const std::vector<RunRecord> three{record(0.5, 1), record(0.2, 2), record(0.9, 3)};
    CHECK(select_top_k(three, 5).size() == 3);
    const auto two = select_top_k(three, 2);
    REQUIRE(two.size() == 2);
    CHECK(*two[0].val_mae == 0.2);
    CHECK(*two[1].val_mae == 0.5);

    const std::vector<RunRecord> with_missing{record(std::nullopt, 1), record(0.7, 2), record(NAN, 3)};
    const auto ranked = select_top_k(with_missing, 3);
    CHECK(ranked[0].spec.seed == 2);

    std::vector<RunRecord> ties{record(0.3, 5, 16), record(0.3, 5, 4), record(0.3, 4, 8)};
    const auto a = select_top_k(ties, 3);
    std::swap(ties[0], ties[2]);
    const auto b = select_top_k(ties, 3);
    CHECK(a[0].spec.seed == 4);
    for (std::size_t i = 0; i < 3; ++i) CHECK(config_hash(a[i]) == config_hash(b[i]));
    CHECK(config_hash(ties[0]) != config_hash(ties[1]));
  }

  TEST_CASE("report aggregates over models") {
    const auto test = pendulum(datagen::Split::Test, 5, 30, 5);
    const auto easy = pendulum(datagen::Split::OodEasy, 5, 30, 6);
    const auto hard = pendulum(datagen::Split::OodHard, 5, 30, 7);
    const std::map<Split, const datagen::Dataset*> data{
        {Split::Test, &test}, {Split::OodEasy, &easy}, {Split::OodHard, &hard}};
    auto h = hold(5, 5);
    auto bad = blow_up();
    std::map<std::string, std::vector<ReportModel>> models{
        {"vae", {{"a", &h}, {"b", &h}, {"c", &h}, {"d", &h}, {"e", &bad}}}};
    const auto rep = build_report(dynsys::SystemKind::Pendulum, models, data, {.horizon = 20});
    REQUIRE(rep.rows.size() == 3);
    for (const auto& row : rep.rows) {
      CHECK(row.n_models == 5);
      CHECK(row.diverged_pct == 20.0);
      CHECK(*row.mae_std == doctest::Approx(0.0).epsilon(1e-15));
      CHECK(row.system == "pendulum");
    }
    CHECK(rep.rows[0].split == "test");
    CHECK(rep.rows[2].split == "ood_hard");
    CHECK(rep.trends.size() == 5);
    CHECK_FALSE(rep.trends[4].ordered);

    const auto csv = report_csv(rep);
    CHECK(csv.starts_with(std::string(kReportCsvHeader) + "\n"));
    CHECK(csv.find("pendulum,vae,ood_easy,") != std::string::npos);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
    const auto j = report_json(rep);
    CHECK(j["rows"].size() == 3);
    CHECK(j["trend"]["models"].size() == 5);
    CHECK(j["trend"]["families"].contains("vae"));
  }

  TEST_CASE("report with every model diverged leaves MAE empty") {
    const auto test = pendulum(datagen::Split::Test, 3, 30, 5);
    auto bad = blow_up();
    const auto rep = build_report(dynsys::SystemKind::Pendulum, {{"mlp", {{"x", &bad}}}}, {{Split::Test, &test}},
                                  {.horizon = 20});
    REQUIRE(rep.rows.size() == 1);
    CHECK_FALSE(rep.rows[0].mae_mean.has_value());
    CHECK(rep.rows[0].diverged_pct == 100.0);
    CHECK(report_csv(rep).find("pendulum,mlp,test,,,1,100\n") != std::string::npos);
  }

  TEST_CASE("trend ordering") {
    auto grow = Stub(5, 5, 2, [](std::span<const double> x) { return std::vector<double>{x[0], x[1]}; });
    const auto t = pendulum(datagen::Split::Test, 4, 30, 5);
    const std::map<Split, const datagen::Dataset*> same{{Split::Test, &t}, {Split::OodEasy, &t}, {Split::OodHard, &t}};
    const auto rep = build_report(dynsys::SystemKind::Pendulum, {{"m", {{"r", &grow}}}}, same, {.horizon = 20});
    CHECK(rep.trends[0].ordered);  // equal MAEs count as ordered
    CHECK(rep.family_ordered.at("m"));
  }
}
