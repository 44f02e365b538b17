#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "stmoe/errors.hpp"
#include "stmoe/eval_stats.hpp"
#include "stmoe/synthgen.hpp"

using namespace stmoe;
using namespace stmoe::synth;

namespace {

SynthConfig two_by_two(std::size_t weeks = 2) {
  SynthConfig c;
  c.grid.height = c.grid.width = 2;
  c.grid.interval_minutes = 60;
  c.weeks = weeks;
  c.seed = 3;
  return c;
}

PatternSpec constant_pattern(const std::string& name, std::vector<double> mask, double in, double out) {
  PatternSpec p;
  p.name = name;
  p.spatial_mask = Tensor(Shape{2, 2}, std::move(mask));
  p.weekly_profile = Tensor(Shape{2, 168});
  for (std::size_t s = 0; s < 168; ++s) {
    p.weekly_profile[s] = in;
    p.weekly_profile[168 + s] = out;
  }
  return p;
}

}  // namespace

TEST_CASE("presets") {
  CHECK(preset_names() == std::vector<std::string>{"tiny8", "ring16"});
  const auto t = builtin_city("tiny8");
  CHECK(t.grid.height == 8);
  CHECK(t.grid.width == 8);
  CHECK(t.patterns.size() == 3);
  CHECK(t.weeks == 4);
  CHECK(t.grid.interval_minutes == 30.0);
  CHECK(patterns_json(t) == patterns_json(builtin_city("tiny8")));

  const auto r = builtin_city("ring16");
  CHECK(r.grid.height == 16);
  REQUIRE(r.patterns.size() == 4);
  for (std::size_t a = 0; a < 4; ++a) {
    for (std::size_t b = a + 1; b < 4; ++b) {
      const double c = eval::pearson(r.patterns[a].spatial_mask.data(), r.patterns[b].spatial_mask.data());
      INFO(r.patterns[a].name << " vs " << r.patterns[b].name);
      CHECK(c <= 0.2);
    }
  }
  CHECK_THROWS_AS(builtin_city("metropolis"), ConfigError);
}

TEST_CASE("deterministic mode yields the programmed intensity") {
  auto cfg = two_by_two();
  cfg.deterministic = true;
  cfg.patterns.push_back(constant_pattern("flat", {1.0, 0.5, 0.25, 0.0}, 8.0, 4.0));
  const auto d = generate(cfg);
  CHECK(d.series.size() == 2 * 168);
  for (const auto& s : d.series.snapshots) {
    CHECK(s.flow == Tensor(Shape{2, 2, 2}, std::vector<double>{8, 4, 2, 0, 4, 2, 1, 0}));
  }
  REQUIRE(d.truth_masks);
  CHECK(*d.truth_masks == Tensor(Shape{1, 2, 2}, std::vector<double>{1.0, 0.5, 0.25, 0.0}));
}

TEST_CASE("disjoint masks give each region exactly one profile") {
  auto cfg = two_by_two();
  cfg.deterministic = true;
  auto a = constant_pattern("a", {1, 1, 0, 0}, 0, 0);
  auto b = constant_pattern("b", {0, 0, 1, 1}, 0, 0);
  for (std::size_t s = 0; s < 168; ++s) {
    a.weekly_profile[s] = 5.0 + std::sin(0.3 * static_cast<double>(s));
    b.weekly_profile[s] = 9.0 + std::cos(0.2 * static_cast<double>(s));
    a.weekly_profile[168 + s] = 1.0;
    b.weekly_profile[168 + s] = 2.0;
  }
  cfg.patterns = {a, b};
  const auto d = generate(cfg);
  for (const auto& s : d.series.snapshots) {
    const auto step = static_cast<std::size_t>(s.t) % 168;
    CHECK(s.inflow(0, 1) == a.weekly_profile[step]);
    CHECK(s.inflow(1, 0) == b.weekly_profile[step]);
    CHECK(s.outflow(1, 1) == 2.0);
  }
}

TEST_CASE("same seed gives the same series and a different seed differs") {
  auto cfg = builtin_city("tiny8");
  cfg.weeks = 2;
  const auto a = generate(cfg), b = generate(cfg);
  cfg.seed = 1;
  const auto c = generate(cfg);
  bool differs = false;
  for (std::size_t t = 0; t < a.series.size(); ++t) {
    CHECK(a.series.snapshots[t].flow == b.series.snapshots[t].flow);
    differs = differs || a.series.snapshots[t].flow != c.series.snapshots[t].flow;
  }
  CHECK(differs);
  for (const auto& s : a.series.snapshots)
    for (double v : s.flow.data()) CHECK(v == std::round(v));
}

TEST_CASE("commuting inflow has two peaks above the daily mean on weekdays") {
  auto cfg = builtin_city("tiny8");
  cfg.patterns.resize(1);
  REQUIRE(cfg.patterns[0].name == "commuting");
  cfg.weeks = 2;
  cfg.deterministic = true;
  const auto d = generate(cfg);
  const auto& mask = cfg.patterns[0].spatial_mask;
  const std::size_t q = cfg.grid.steps_per_day();
  std::vector<double> series;
  for (const auto& s : d.series.snapshots) {
    double sum = 0.0, count = 0.0;
    for (std::size_t j = 0; j < 64; ++j) {
      if (mask[j] < 0.5) continue;
      sum += s.flow[j];
      count += 1.0;
    }
    REQUIRE(count > 0.0);
    series.push_back(sum / count);
  }
  for (std::size_t day = 0; day < 14; ++day) {
    if (day % 7 >= 5) continue;
    double mean = 0.0;
    for (std::size_t k = 0; k < q; ++k) mean += series[day * q + k] / static_cast<double>(q);
    int peaks = 0;
    for (std::size_t k = 1; k + 1 < q; ++k) {
      const double v = series[day * q + k];
      if (v > mean && v > series[day * q + k - 1] && v > series[day * q + k + 1]) ++peaks;
    }
    INFO("day " << day);
    CHECK(peaks == 2);
  }
}

TEST_CASE("empirical cell means converge to the programmed intensity") {
  auto cfg = builtin_city("tiny8");
  cfg.weeks = 8;
  cfg.seed = 11;
  const auto d = generate(cfg);
  const std::size_t steps = d.series.size();
  Tensor empirical(Shape{2, 8, 8}), expected(Shape{2, 8, 8});
  for (std::size_t t = 0; t < steps; ++t) {
    const Tensor lam = intensity_at(cfg, static_cast<long>(t));
    for (std::size_t i = 0; i < 128; ++i) {
      empirical[i] += d.series.snapshots[t].flow[i] / static_cast<double>(steps);
      expected[i] += lam[i] / static_cast<double>(steps);
    }
  }
  std::size_t checked = 0;
  for (std::size_t i = 0; i < 128; ++i) {
    if (expected[i] < 5.0) continue;
    ++checked;
    CHECK(std::abs(empirical[i] - expected[i]) / expected[i] < 0.05);
  }
  CHECK(checked > 0);
}

TEST_CASE("weekend regime follows the weekend_shift switch") {
  auto cfg = builtin_city("tiny8");
  cfg.weeks = 2;
  cfg.deterministic = true;
  const std::size_t q = cfg.grid.steps_per_day();
  auto day_means = [&](const flow::StFlowData& d) {
    double weekday = 0.0, weekend = 0.0;
    for (const auto& s : d.series.snapshots) {
      double total = 0.0;
      for (double v : s.flow.data()) total += v;
      const std::size_t dow = (static_cast<std::size_t>(s.t) / q) % 7;
      (dow >= 5 ? weekend : weekday) += total / (dow >= 5 ? 4.0 * q : 10.0 * q);
    }
    return std::pair{weekday, weekend};
  };
  auto programmed = [&](const SynthConfig& c) {
    double weekday = 0.0, weekend = 0.0;
    for (const auto& p : c.patterns) {
      const Tensor prof = effective_profile(c, p);
      double mass = 0.0;
      for (double m : p.spatial_mask.data()) mass += m;
      mass *= p.noise_scale;
      for (std::size_t ch = 0; ch < 2; ++ch) {
        for (std::size_t s = 0; s < 7 * q; ++s) {
          const double v = prof[ch * 7 * q + s] * mass;
          (s / q >= 5 ? weekend : weekday) += v / (s / q >= 5 ? 2.0 * q : 5.0 * q);
        }
      }
    }
    return std::pair{weekday, weekend};
  };
  const auto on = day_means(generate(cfg));
  const auto on_expected = programmed(cfg);
  CHECK(on.first == doctest::Approx(on_expected.first).epsilon(1e-9));
  CHECK(on.second == doctest::Approx(on_expected.second).epsilon(1e-9));
  CHECK(std::abs(on.first - on.second) > 0.05 * on.first);

  cfg.weekend_shift = false;
  const auto off = day_means(generate(cfg));
  CHECK(off.first == doctest::Approx(off.second).epsilon(1e-9));
}

TEST_CASE("calendar externals") {
  const auto schema = calendar_schema();
  CHECK(schema.width() == 9);
  auto v = flow::encode_external(calendar_record(0, 48), schema);
  CHECK(v.values == std::vector<double>{1, 0, 0, 0, 0, 0, 0, 1, 0});
  v = flow::encode_external(calendar_record(5 * 48 + 47, 48), schema);
  CHECK(v.values == std::vector<double>{0, 0, 0, 0, 0, 1, 0, 0, 1});
  v = flow::encode_external(calendar_record(7 * 48, 48), schema);
  CHECK(v.values[0] == 1.0);
  auto cfg = builtin_city("tiny8");
  cfg.weeks = 2;
  const auto d = generate(cfg);
  CHECK(d.externals.size() == d.series.size());
  CHECK(d.externals[6 * 48].values[6] == 1.0);
}

TEST_CASE("configuration errors") {
  auto cfg = two_by_two();
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.patterns.push_back(constant_pattern("zero", {0, 0, 0, 0}, 3, 3));
  CHECK_THROWS_AS(generate(cfg), ConfigError);
  cfg.patterns[0] = constant_pattern("neg", {1, -1, 0, 0}, 3, 3);
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.patterns[0] = constant_pattern("ok", {1, 1, 0, 0}, 3, 3);
  CHECK_NOTHROW(cfg.validate());
  cfg.weeks = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.weeks = 2;
  cfg.patterns[0].weekly_profile = Tensor(Shape{2, 100}, 1.0);
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("synthetic container round-trips with masks and patterns") {
  testutil::TempDir dir("synth");
  auto cfg = builtin_city("tiny8");
  cfg.weeks = 2;
  const auto d = generate(cfg);
  write_synthetic(dir.path(), cfg, d);
  CHECK(std::filesystem::exists(dir / "patterns.json"));
  const auto back = flow::read_stflow(dir.path());
  CHECK(back.series.size() == d.series.size());
  REQUIRE(back.truth_masks);
  for (std::size_t i = 0; i < d.truth_masks->size(); ++i)
    CHECK((*back.truth_masks)[i] == doctest::Approx((*d.truth_masks)[i]).epsilon(1e-6));
  CHECK(back.series.snapshots[100].flow == d.series.snapshots[100].flow);
}
