#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <sstream>

#include "helpers.hpp"
#include "stmoe/errors.hpp"
#include "stmoe/flow_core.hpp"
#include "stmoe/io.hpp"
#include "stmoe/log.hpp"
#include "stmoe/stflow.hpp"

using namespace stmoe;
using namespace stmoe::flow;

namespace {

GridSpec grid4() {
  GridSpec g;
  g.height = g.width = 4;
  g.bounds = {0.0, 4.0, 10.0, 14.0};
  return g;
}

bool in_cell(const GridSpec& g, const TrajectoryPoint& p, std::size_t i, std::size_t j) {
  const double lat_hi = i + 1 == g.height ? g.bounds.max_lat : g.lat_edge(i + 1);
  const double lon_hi = j + 1 == g.width ? g.bounds.max_lon : g.lon_edge(j + 1);
  return p.lat >= g.lat_edge(i) && p.lat < lat_hi && p.lon >= g.lon_edge(j) && p.lon < lon_hi;
}

// Per-definition enumeration: for each region and each k, test the predicates.
Tensor brute_force(const std::vector<Trajectory>& trs, const GridSpec& g, long t) {
  Tensor out(Shape{2, g.height, g.width});
  for (std::size_t i = 0; i < g.height; ++i) {
    for (std::size_t j = 0; j < g.width; ++j) {
      for (const auto& tr : trs) {
        const auto& v = tr.points;
        for (std::size_t k = 1; k < v.size(); ++k) {
          if (v[k - 1].t != t) continue;
          if (!in_cell(g, v[k - 1], i, j) && in_cell(g, v[k], i, j)) out.at({0, i, j}) += 1;
        }
        for (std::size_t k = 0; k + 1 < v.size(); ++k) {
          if (v[k].t != t) continue;
          if (in_cell(g, v[k], i, j) && !in_cell(g, v[k + 1], i, j)) out.at({1, i, j}) += 1;
        }
      }
    }
  }
  return out;
}

std::vector<Trajectory> random_trajectories(std::size_t n, Rng& rng) {
  std::vector<Trajectory> out;
  for (std::size_t r = 0; r < n; ++r) {
    Trajectory tr{"traj" + std::to_string(r), {}};
    const auto len = 1 + static_cast<std::size_t>(uniform01(rng) * 8);
    long t = static_cast<long>(uniform01(rng) * 3);
    for (std::size_t k = 0; k < len; ++k) {
      // Some points outside the bounds, some exactly on grid lines.
      double lat = uniform(rng, -0.5, 4.5), lon = uniform(rng, 9.5, 14.5);
      if (uniform01(rng) < 0.2) lat = std::floor(lat);
      if (uniform01(rng) < 0.2) lon = std::floor(lon);
      tr.points.push_back({lat, lon, t});
      if (uniform01(rng) < 0.3) ++t;
    }
    out.push_back(tr);
  }
  return out;
}

}  // namespace

TEST_CASE("grid cells are half-open with the larger index on interior boundaries") {
  const auto g = grid4();
  CHECK(g.locate(1.0, 11.0) == RegionIndex{1, 1});
  CHECK(g.locate(0.0, 10.0) == RegionIndex{0, 0});
  CHECK(g.locate(3.999, 13.999) == RegionIndex{3, 3});
  CHECK_FALSE(g.locate(4.0, 11.0));
  CHECK_FALSE(g.locate(1.0, 14.0));
  CHECK_FALSE(g.locate(-0.1, 11.0));
  CHECK(g.contains(3, 3));
  CHECK_FALSE(g.contains(4, 0));
  GridSpec bad = g;
  bad.height = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = g;
  bad.bounds.max_lon = bad.bounds.min_lon;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("steps per day from the interval") {
  GridSpec g = grid4();
  g.interval_minutes = 30;
  CHECK(g.steps_per_day() == 48);
  g.interval_minutes = 7;
  CHECK_THROWS_AS(g.steps_per_day(), ConfigError);
}

TEST_CASE("inflow/outflow edge cases") {
  const auto g = grid4();
  SUBCASE("empty set") {
    const auto s = compute_inflow_outflow({}, g, 0);
    CHECK(std::all_of(s.flow.data().begin(), s.flow.data().end(), [](double v) { return v == 0.0; }));
  }
  SUBCASE("both points in one region") {
    std::vector<Trajectory> trs{{"a", {{0.5, 10.5, 0}, {0.7, 10.2, 0}}}};
    const auto s = compute_inflow_outflow(trs, g, 0);
    CHECK(std::all_of(s.flow.data().begin(), s.flow.data().end(), [](double v) { return v == 0.0; }));
  }
  SUBCASE("crossing into an adjacent region") {
    std::vector<Trajectory> trs{{"a", {{0.5, 10.5, 0}, {0.5, 11.5, 0}}}};
    const auto s = compute_inflow_outflow(trs, g, 0);
    CHECK(s.outflow(0, 0) == 1.0);
    CHECK(s.inflow(0, 1) == 1.0);
    double total = 0.0;
    for (double v : s.flow.data()) total += v;
    CHECK(total == 2.0);
  }
  SUBCASE("transition attributed to the interval of its earlier point") {
    std::vector<Trajectory> trs{{"a", {{0.5, 10.5, 3}, {0.5, 11.5, 4}}}};
    CHECK(compute_inflow_outflow(trs, g, 3).inflow(0, 1) == 1.0);
    CHECK(compute_inflow_outflow(trs, g, 4).inflow(0, 1) == 0.0);
  }
  SUBCASE("leaving the bounds counts outflow only") {
    std::vector<Trajectory> trs{{"a", {{0.5, 10.5, 0}, {5.0, 10.5, 0}, {0.5, 10.5, 0}}}};
    const auto s = compute_inflow_outflow(trs, g, 0);
    CHECK(s.outflow(0, 0) == 1.0);
    CHECK(s.inflow(0, 0) == 1.0);
  }
  SUBCASE("errors") {
    std::vector<Trajectory> bad{{"broken-7", {{std::nan(""), 10.5, 0}, {0.5, 10.5, 0}}}};
    try {
      compute_inflow_outflow(bad, g, 0);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("broken-7") != std::string::npos);
    }
    CHECK_THROWS_AS(compute_inflow_outflow({}, g, -1), ConfigError);
    GridSpec empty = g;
    empty.width = 0;
    CHECK_THROWS_AS(compute_inflow_outflow({}, empty, 0), ConfigError);
  }
}

TEST_CASE("inflow/outflow equals per-definition enumeration on random trajectories") {
  const auto g = grid4();
  Rng rng(99);
  for (int rep = 0; rep < 10; ++rep) {
    const auto trs = random_trajectories(20, rng);
    for (long t = 0; t < 4; ++t) {
      const auto s = compute_inflow_outflow(trs, g, t);
      CHECK(s.flow == brute_force(trs, g, t));
    }
  }
}

TEST_CASE("relabeling and reordering trajectories leaves the snapshot unchanged") {
  const auto g = grid4();
  Rng rng(5);
  auto trs = random_trajectories(20, rng);
  const auto before = compute_inflow_outflow(trs, g, 1);
  std::reverse(trs.begin(), trs.end());
  for (auto& tr : trs) tr.id = "x" + tr.id;
  CHECK(compute_inflow_outflow(trs, g, 1).flow == before.flow);
}

TEST_CASE("trajectory csv parsing") {
  std::istringstream in("traj_id,t,lat,lon\na,0,0.5,10.5\nb,0,1.5,10.5\na,0,0.5,11.5\n");
  const auto trs = read_trajectory_csv(in);
  REQUIRE(trs.size() == 2);
  CHECK(trs[0].id == "a");
  CHECK(trs[0].points.size() == 2);
  CHECK(trs[0].points[1].lon == 11.5);
  std::istringstream bad("a,0,zz,10\n");
  CHECK_THROWS_AS(read_trajectory_csv(bad), DataError);
}

TEST_CASE("min-max statistics and mapping") {
  FlowSeries s;
  s.grid.height = 1;
  s.grid.width = 2;
  for (long t = 0; t < 2; ++t) {
    Tensor f(Shape{2, 1, 2});
    f[0] = t == 0 ? 0.0 : 100.0;
    f[1] = 40.0;
    f[2] = t == 0 ? 3.0 : 7.0;
    f[3] = 5.0;
    s.snapshots.push_back({f, t});
  }
  const auto st = minmax_fit(s);
  CHECK(st.min[0] == 0.0);
  CHECK(st.max[0] == 100.0);
  CHECK(st.min[1] == 3.0);
  CHECK(st.max[1] == 7.0);

  Tensor x(Shape{2, 1, 2}, std::vector<double>{0.0, 100.0, 5.0, 7.0});
  const Tensor y = minmax_apply(x, st);
  CHECK(y[0] == -1.0);
  CHECK(y[1] == 1.0);
  CHECK(y[2] == doctest::Approx(0.0));
  CHECK(y[3] == 1.0);

  const auto unit = minmax_fit(s, NormRange::unit);
  const Tensor u = minmax_apply(x, unit);
  CHECK(u[0] == 0.0);
  CHECK(u[1] == 1.0);
  CHECK(u[2] == doctest::Approx(0.5));

  FlowSeries flat = s;
  for (auto& snap : flat.snapshots) snap.flow.fill(2.0);
  CHECK_THROWS_AS(minmax_fit(flat), DataError);
}

TEST_CASE("invert after apply is the identity") {
  Rng rng(17);
  NormStats st;
  st.min = {3.0, -2.0};
  st.max = {250.0, 80.0};
  double worst = 0.0;
  for (int rep = 0; rep < 1000; ++rep) {
    const Tensor x = testutil::random_tensor({3, 2, 2, 3}, rng, -50.0, 400.0);
    const Tensor back = minmax_invert(minmax_apply(x, st), st);
    for (std::size_t i = 0; i < x.size(); ++i) {
      worst = std::max(worst, std::abs(back[i] - x[i]) / std::max(1.0, std::abs(x[i])));
    }
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("external encoding") {
  ExternalSchema schema;
  schema.fields.push_back({"DayOfWeek", FieldKind::categorical,
                           {"Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday"}});
  schema.fields.push_back({"Weekend", FieldKind::categorical, {"false", "true"}});
  schema.fields.push_back({"Temperature", FieldKind::continuous, {}, -10.0, 30.0});
  CHECK(schema.width() == 10);

  auto v = encode_external({{"DayOfWeek", std::string("Monday")},
                            {"Weekend", std::string("true")},
                            {"Temperature", 10.0}},
                           schema);
  CHECK(v.values == std::vector<double>{1, 0, 0, 0, 0, 0, 0, 0, 1, 0.5});
  v = encode_external({{"DayOfWeek", std::string("Sunday")},
                       {"Weekend", std::string("false")},
                       {"Temperature", -10.0}},
                      schema);
  CHECK(v.values == std::vector<double>{0, 0, 0, 0, 0, 0, 1, 1, 0, 0});

  try {
    encode_external({{"DayOfWeek", std::string("Funday")},
                     {"Weekend", std::string("true")},
                     {"Temperature", 1.0}},
                    schema);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("Wednesday") != std::string::npos);
  }

  std::vector<std::string> warnings;
  auto prev = set_warning_sink([&](const std::string& m) { warnings.push_back(m); });
  v = encode_external({{"DayOfWeek", std::string("Friday")},
                       {"Weekend", std::string("false")},
                       {"Temperature", 45.0}},
                      schema);
  set_warning_sink(prev);
  CHECK(v.values.back() == 1.0);
  CHECK(warnings.size() == 1);
}

TEST_CASE("stflow container round-trips") {
  testutil::TempDir dir("stflow");
  StFlowData d;
  d.series.grid = grid4();
  d.series.grid.interval_minutes = 60;
  d.schema.fields.push_back({"Weekend", FieldKind::categorical, {"false", "true"}});
  Rng rng(3);
  for (long t = 5; t < 9; ++t) {
    Tensor f = testutil::random_tensor({2, 4, 4}, rng, 0.0, 50.0);
    for (auto& v : f.data()) v = std::round(v);
    d.series.snapshots.push_back({f, t});
    d.externals.push_back({{t % 2 ? 1.0 : 0.0, t % 2 ? 0.0 : 1.0}});
  }
  d.truth_masks = testutil::random_tensor({2, 4, 4}, rng, 0.0, 1.0);
  for (auto& v : d.truth_masks->data()) v = static_cast<float>(v);
  d.start_timestamp = "2026-01-05T00:00:00";
  write_stflow(dir.path(), d);
  const auto back = read_stflow(dir.path());
  CHECK(back.series.size() == 4);
  CHECK(back.series.snapshots.front().t == 5);
  CHECK(back.series.grid.height == 4);
  CHECK(back.series.grid.interval_minutes == 60);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(back.series.snapshots[i].flow == d.series.snapshots[i].flow);
    CHECK(back.externals[i].values == d.externals[i].values);
  }
  REQUIRE(back.truth_masks);
  CHECK(*back.truth_masks == *d.truth_masks);
  CHECK(back.start_timestamp == d.start_timestamp);
  CHECK(manifest_hash(dir.path()).size() == 40);
  CHECK(manifest_hash(dir.path()) == manifest_hash(dir.path()));

  std::filesystem::remove(dir / "flow.bin");
  CHECK_THROWS_AS(read_stflow(dir.path()), DataError);
}

TEST_CASE("git blob hash matches the reference for known content") {
  // git hash-object of "hello\n"
  CHECK(io::git_blob_sha1("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
}
