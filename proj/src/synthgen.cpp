#include "stmoe/synthgen.hpp"

#include <json.hpp>

#include <cmath>
#include <random>

#include "stmoe/errors.hpp"
#include "stmoe/io.hpp"
#include "stmoe/random.hpp"

namespace stmoe::synth {

void SynthConfig::validate() const {
  grid.validate();
  if (patterns.empty()) throw ConfigError("synthetic city needs at least one pattern");
  if (weeks < 2) throw ConfigError("synthetic city needs at least 2 weeks");
  const Shape mask_shape{grid.height, grid.width};
  const Shape profile_shape{2, steps_per_week()};
  for (const auto& p : patterns) {
    if (p.spatial_mask.shape() != mask_shape) {
      throw ConfigError("pattern '" + p.name + "' mask shape " + shape_string(p.spatial_mask.shape()) +
                        " does not match grid " + shape_string(mask_shape));
    }
    if (p.weekly_profile.shape() != profile_shape) {
      throw ConfigError("pattern '" + p.name + "' profile shape " +
                        shape_string(p.weekly_profile.shape()) + ", expected " +
                        shape_string(profile_shape));
    }
    for (double v : p.spatial_mask.data()) {
      if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("pattern '" + p.name + "' mask outside [0, 1]");
    }
    for (double v : p.weekly_profile.data()) {
      if (!(v >= 0.0) || !std::isfinite(v)) {
        throw ConfigError("pattern '" + p.name + "' profile must be finite and non-negative");
      }
    }
    if (!(p.noise_scale >= 0.0)) throw ConfigError("pattern '" + p.name + "' noise_scale < 0");
  }
}

Tensor effective_profile(const SynthConfig& cfg, const PatternSpec& p) {
  if (cfg.weekend_shift) return p.weekly_profile;
  const std::size_t q = cfg.grid.steps_per_day(), week = 7 * q;
  Tensor out = p.weekly_profile;
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t s = 0; s < q; ++s) {
      double mean = 0.0;
      for (std::size_t d = 0; d < 5; ++d) mean += p.weekly_profile[c * week + d * q + s];
      mean /= 5.0;
      for (std::size_t d = 5; d < 7; ++d) out[c * week + d * q + s] = mean;
    }
  }
  return out;
}

namespace {

struct Prepared {
  std::vector<Tensor> profiles;
};

Prepared prepare(const SynthConfig& cfg) {
  Prepared p;
  for (const auto& pat : cfg.patterns) p.profiles.push_back(effective_profile(cfg, pat));
  return p;
}

Tensor intensity(const SynthConfig& cfg, const Prepared& prep, long t) {
  const std::size_t h = cfg.grid.height, w = cfg.grid.width, week = cfg.steps_per_week();
  const auto s = static_cast<std::size_t>(((t % static_cast<long>(week)) + static_cast<long>(week)) %
                                          static_cast<long>(week));
  Tensor out(Shape{2, h, w});
  for (std::size_t m = 0; m < cfg.patterns.size(); ++m) {
    const auto& pat = cfg.patterns[m];
    for (std::size_t c = 0; c < 2; ++c) {
      const double level = pat.noise_scale * prep.profiles[m][c * week + s];
      for (std::size_t k = 0; k < h * w; ++k) out[c * h * w + k] += pat.spatial_mask[k] * level;
    }
  }
  return out;
}

}  // namespace

Tensor intensity_at(const SynthConfig& cfg, long t) { return intensity(cfg, prepare(cfg), t); }

flow::ExternalSchema calendar_schema() {
  flow::ExternalSchema s;
  s.fields.push_back({"DayOfWeek", flow::FieldKind::categorical,
                      {"Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"}});
  s.fields.push_back({"Weekend", flow::FieldKind::categorical, {"false", "true"}});
  return s;
}

flow::ExternalRecord calendar_record(long t, std::size_t steps_per_day) {
  static const char* days[] = {"Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"};
  const long day = ((t / static_cast<long>(steps_per_day)) % 7 + 7) % 7;
  return {{"DayOfWeek", std::string(days[day])}, {"Weekend", std::string(day >= 5 ? "true" : "false")}};
}

flow::StFlowData generate(const SynthConfig& cfg) {
  cfg.validate();
  const Prepared prep = prepare(cfg);
  const std::size_t total = cfg.weeks * cfg.steps_per_week();
  bool any = false;
  for (std::size_t s = 0; s < cfg.steps_per_week() && !any; ++s) {
    const Tensor lam = intensity(cfg, prep, static_cast<long>(s));
    for (double v : lam.data()) any = any || v > 0.0;
  }
  if (!any) throw ConfigError("synthetic city has zero intensity everywhere");

  flow::StFlowData d;
  d.series.grid = cfg.grid;
  d.start_timestamp = cfg.start_timestamp;
  d.schema = calendar_schema();
  Rng rng(cfg.seed);
  for (std::size_t t = 0; t < total; ++t) {
    Tensor f = intensity(cfg, prep, static_cast<long>(t));
    if (!cfg.deterministic) {
      for (auto& v : f.data()) {
        if (v > 0.0) v = static_cast<double>(std::poisson_distribution<long>(v)(rng));
      }
    }
    d.series.snapshots.push_back({std::move(f), static_cast<long>(t)});
    d.externals.push_back(
        flow::encode_external(calendar_record(static_cast<long>(t), cfg.grid.steps_per_day()), d.schema));
  }
  Tensor masks(Shape{cfg.patterns.size(), cfg.grid.height, cfg.grid.width});
  const std::size_t plane = cfg.grid.cells();
  for (std::size_t m = 0; m < cfg.patterns.size(); ++m) {
    std::copy(cfg.patterns[m].spatial_mask.data().begin(), cfg.patterns[m].spatial_mask.data().end(),
              masks.data().begin() + static_cast<long>(m * plane));
  }
  d.truth_masks = std::move(masks);
  return d;
}

namespace {

double bump(double hour, double mu, double sigma) {
  const double z = (hour - mu) / sigma;
  return std::exp(-0.5 * z * z);
}

struct Bump {
  double amp, mu, sigma;
};

struct DayShape {
  double base;
  std::vector<Bump> bumps;
  double at(double hour) const {
    double v = base;
    for (const auto& b : bumps) v += b.amp * bump(hour, b.mu, b.sigma);
    return v;
  }
};

struct ChannelShapes {
  DayShape weekday_in, weekday_out, weekend_in, weekend_out;
};

Tensor weekly(const ChannelShapes& s, std::size_t q) {
  Tensor out(Shape{2, 7 * q});
  for (std::size_t d = 0; d < 7; ++d) {
    const bool weekend = d >= 5;
    for (std::size_t k = 0; k < q; ++k) {
      const double hour = 24.0 * static_cast<double>(k) / static_cast<double>(q);
      out[d * q + k] = (weekend ? s.weekend_in : s.weekday_in).at(hour);
      out[7 * q + d * q + k] = (weekend ? s.weekend_out : s.weekday_out).at(hour);
    }
  }
  return out;
}

ChannelShapes commuting() {
  return {{3, {{30, 8.0, 1.2}, {25, 18.0, 1.5}}},
          {3, {{25, 8.5, 1.2}, {30, 17.5, 1.5}}},
          {3, {{8, 11.0, 3.0}}},
          {3, {{8, 16.0, 3.0}}}};
}

ChannelShapes commercial() {
  return {{2, {{25, 12.5, 2.5}, {12, 19.5, 1.5}}},
          {2, {{18, 14.5, 2.5}, {25, 21.0, 1.5}}},
          {2, {{40, 14.0, 3.0}}},
          {2, {{40, 17.0, 3.0}}}};
}

ChannelShapes residential() {
  return {{4, {{30, 19.0, 2.0}}},
          {4, {{30, 7.5, 1.5}}},
          {4, {{18, 17.0, 3.0}}},
          {4, {{14, 10.5, 3.0}}}};
}

ChannelShapes ring_road() {
  return {{10, {{25, 8.0, 1.5}, {25, 18.0, 2.0}}},
          {10, {{25, 8.0, 1.5}, {25, 18.0, 2.0}}},
          {6, {{12, 14.0, 4.0}}},
          {6, {{12, 14.0, 4.0}}}};
}

// Soft Voronoi partition of the grid around `centers`.
std::vector<Tensor> soft_voronoi(std::size_t h, std::size_t w,
                                 const std::vector<std::pair<double, double>>& centers, double tau) {
  std::vector<Tensor> masks(centers.size(), Tensor(Shape{h, w}));
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      std::vector<double> s;
      double z = 0.0;
      for (const auto& [ci, cj] : centers) {
        const double d2 = (static_cast<double>(i) - ci) * (static_cast<double>(i) - ci) +
                          (static_cast<double>(j) - cj) * (static_cast<double>(j) - cj);
        s.push_back(std::exp(-d2 / tau));
        z += s.back();
      }
      for (std::size_t m = 0; m < centers.size(); ++m) masks[m].at({i, j}) = s[m] / z;
    }
  }
  return masks;
}

}  // namespace

std::vector<std::string> preset_names() { return {"tiny8", "ring16"}; }

SynthConfig builtin_city(const std::string& preset) {
  SynthConfig cfg;
  cfg.grid.interval_minutes = 30.0;
  cfg.weeks = 4;
  cfg.weekend_shift = true;
  const std::size_t q = 48;
  if (preset == "tiny8") {
    cfg.grid.height = cfg.grid.width = 8;
    cfg.grid.bounds = {39.80, 40.00, 116.20, 116.50};
    auto masks = soft_voronoi(8, 8, {{1.5, 1.5}, {1.5, 6.0}, {6.0, 3.5}}, 3.0);
    cfg.patterns = {{"commuting", masks[0], weekly(commuting(), q)},
                    {"commercial", masks[1], weekly(commercial(), q)},
                    {"residential", masks[2], weekly(residential(), q)}};
  } else if (preset == "ring16") {
    cfg.grid.height = cfg.grid.width = 16;
    cfg.grid.bounds = {39.75, 40.05, 116.15, 116.60};
    Tensor ring(Shape{16, 16});
    for (std::size_t i = 0; i < 16; ++i) {
      for (std::size_t j = 0; j < 16; ++j) {
        const double r = std::hypot(static_cast<double>(i) - 7.5, static_cast<double>(j) - 7.5);
        ring.at({i, j}) = bump(r, 5.0, 0.9);
      }
    }
    auto sectors = soft_voronoi(16, 16, {{2.5, 2.5}, {2.5, 12.5}, {13.0, 7.5}}, 8.0);
    for (auto& s : sectors) {
      for (std::size_t k = 0; k < ring.size(); ++k) s[k] *= 1.0 - ring[k];
    }
    cfg.patterns = {{"commuting", sectors[0], weekly(commuting(), q)},
                    {"commercial", sectors[1], weekly(commercial(), q)},
                    {"residential", sectors[2], weekly(residential(), q)},
                    {"ring_road", ring, weekly(ring_road(), q)}};
  } else {
    std::string names;
    for (const auto& n : preset_names()) names += (names.empty() ? "" : ", ") + n;
    throw ConfigError("unknown preset '" + preset + "' (available: " + names + ")");
  }
  return cfg;
}

std::string patterns_json(const SynthConfig& cfg) {
  nlohmann::ordered_json j;
  j["weeks"] = cfg.weeks;
  j["seed"] = cfg.seed;
  j["weekend_shift"] = cfg.weekend_shift;
  j["deterministic"] = cfg.deterministic;
  j["steps_per_week"] = cfg.steps_per_week();
  auto& arr = j["patterns"] = nlohmann::ordered_json::array();
  for (std::size_t m = 0; m < cfg.patterns.size(); ++m) {
    const auto& p = cfg.patterns[m];
    const Tensor prof = effective_profile(cfg, p);
    const std::size_t week = cfg.steps_per_week();
    std::vector<double> in(prof.data().begin(), prof.data().begin() + static_cast<long>(week));
    std::vector<double> out(prof.data().begin() + static_cast<long>(week), prof.data().end());
    arr.push_back({{"index", m},
                   {"name", p.name},
                   {"noise_scale", p.noise_scale},
                   {"mask", p.spatial_mask.vec()},
                   {"inflow_profile", in},
                   {"outflow_profile", out}});
  }
  return j.dump(2) + "\n";
}

void write_synthetic(const std::filesystem::path& dir, const SynthConfig& cfg,
                     const flow::StFlowData& data) {
  flow::write_stflow(dir, data);
  io::write_file(dir / "patterns.json", patterns_json(cfg));
}

}  // namespace stmoe::synth
