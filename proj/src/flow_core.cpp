#include "stmoe/flow_core.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>

#include "stmoe/errors.hpp"
#include "stmoe/log.hpp"

namespace stmoe::flow {

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Index of the half-open cell containing v, or -1 outside [lo, hi).
long cell_index(double v, double lo, double hi, std::size_t n) {
  if (!(v >= lo) || !(v < hi)) return -1;
  const double step = (hi - lo) / static_cast<double>(n);
  auto edge = [&](long k) { return lo + static_cast<double>(k) * step; };
  long idx = static_cast<long>(std::floor((v - lo) / step));
  idx = std::clamp(idx, 0L, static_cast<long>(n) - 1);
  // The floor can be off by one next to an edge; settle against the edges.
  while (idx > 0 && v < edge(idx)) --idx;
  while (idx + 1 < static_cast<long>(n) && v >= edge(idx + 1)) ++idx;
  return idx;
}

void check_coordinate(const Trajectory& tr, const TrajectoryPoint& p) {
  if (!std::isfinite(p.lat) || !std::isfinite(p.lon) || std::abs(p.lat) > 90.0 ||
      std::abs(p.lon) > 180.0) {
    throw DataError("trajectory '" + tr.id + "' has malformed coordinate (" +
                    std::to_string(p.lat) + ", " + std::to_string(p.lon) + ")");
  }
}

}  // namespace

void GridSpec::validate() const {
  if (height == 0 || width == 0) {
    throw ConfigError("grid must have at least one row and one column");
  }
  if (!(bounds.max_lat > bounds.min_lat) || !(bounds.max_lon > bounds.min_lon)) {
    throw ConfigError("grid bounds are degenerate");
  }
  if (!(interval_minutes > 0.0)) throw ConfigError("grid interval must be positive");
}

double GridSpec::lat_edge(std::size_t row) const {
  return bounds.min_lat +
         static_cast<double>(row) * (bounds.max_lat - bounds.min_lat) / static_cast<double>(height);
}

double GridSpec::lon_edge(std::size_t col) const {
  return bounds.min_lon +
         static_cast<double>(col) * (bounds.max_lon - bounds.min_lon) / static_cast<double>(width);
}

std::optional<RegionIndex> GridSpec::locate(double lat, double lon) const {
  const long r = cell_index(lat, bounds.min_lat, bounds.max_lat, height);
  const long c = cell_index(lon, bounds.min_lon, bounds.max_lon, width);
  if (r < 0 || c < 0) return std::nullopt;
  return RegionIndex{static_cast<std::size_t>(r), static_cast<std::size_t>(c)};
}

std::size_t GridSpec::steps_per_day() const {
  const double steps = 24.0 * 60.0 / interval_minutes;
  const auto rounded = static_cast<std::size_t>(std::llround(steps));
  if (rounded == 0 || std::abs(steps - static_cast<double>(rounded)) > 1e-9) {
    throw ConfigError("interval of " + std::to_string(interval_minutes) +
                      " minutes does not divide a day");
  }
  return rounded;
}

void FlowSeries::validate() const {
  grid.validate();
  const Shape expected{2, grid.height, grid.width};
  for (std::size_t k = 0; k < snapshots.size(); ++k) {
    const auto& s = snapshots[k];
    if (s.flow.shape() != expected) {
      throw DataError("snapshot " + std::to_string(k) + " has shape " +
                      shape_string(s.flow.shape()) + ", expected " + shape_string(expected));
    }
    if (k > 0 && s.t != snapshots[k - 1].t + 1) {
      throw DataError("snapshot intervals are not consecutive at position " + std::to_string(k));
    }
    for (double v : s.flow.data()) {
      if (!(v >= 0.0)) throw DataError("negative or non-finite flow at t=" + std::to_string(s.t));
    }
  }
}

FlowSeries FlowSeries::prefix(std::size_t count) const {
  FlowSeries out{grid, {}};
  count = std::min(count, snapshots.size());
  out.snapshots.assign(snapshots.begin(), snapshots.begin() + static_cast<long>(count));
  return out;
}

void NormStats::validate() const {
  for (int c = 0; c < 2; ++c) {
    if (!(max[c] > min[c])) {
      throw DataError("degenerate scale on channel " + std::to_string(c) +
                      ": max equals min (" + std::to_string(min[c]) + ")");
    }
  }
  if (!(high > low)) throw ConfigError("normalization target range must satisfy low < high");
}

FlowSnapshot compute_inflow_outflow(std::span<const Trajectory> trajectories, const GridSpec& grid,
                                    long t) {
  grid.validate();
  if (t < 0) throw ConfigError("interval index must be non-negative, got " + std::to_string(t));
  FlowSnapshot snap{Tensor(Shape{2, grid.height, grid.width}), t};
  for (const auto& tr : trajectories) {
    for (const auto& p : tr.points) check_coordinate(tr, p);
    for (std::size_t k = 0; k + 1 < tr.points.size(); ++k) {
      const auto& from = tr.points[k];
      if (from.t != t) continue;
      const auto a = grid.locate(from.lat, from.lon);
      const auto b = grid.locate(tr.points[k + 1].lat, tr.points[k + 1].lon);
      if (a == b) continue;
      if (a) snap.flow.at({1, a->row, a->col}) += 1.0;
      if (b) snap.flow.at({0, b->row, b->col}) += 1.0;
    }
  }
  return snap;
}

std::vector<Trajectory> read_trajectory_csv(std::istream& in) {
  std::vector<Trajectory> out;
  std::unordered_map<std::string, std::size_t> by_id;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(trim(f));
    if (fields.size() != 4) {
      throw DataError("trajectory csv line " + std::to_string(line_no) + ": expected 4 fields");
    }
    if (line_no == 1 && fields[0] == "traj_id") continue;
    TrajectoryPoint p;
    try {
      std::size_t used = 0;
      p.t = std::stol(fields[1], &used);
      if (used != fields[1].size()) throw std::invalid_argument("t");
      p.lat = std::stod(fields[2], &used);
      if (used != fields[2].size()) throw std::invalid_argument("lat");
      p.lon = std::stod(fields[3], &used);
      if (used != fields[3].size()) throw std::invalid_argument("lon");
    } catch (const std::exception&) {
      throw DataError("trajectory '" + fields[0] + "' has malformed record on line " +
                      std::to_string(line_no));
    }
    auto [it, inserted] = by_id.try_emplace(fields[0], out.size());
    if (inserted) out.push_back(Trajectory{fields[0], {}});
    auto& tr = out[it->second];
    check_coordinate(tr, p);
    tr.points.push_back(p);
  }
  return out;
}

NormStats minmax_fit(const FlowSeries& series, NormRange range) {
  if (series.snapshots.empty()) throw DataError("cannot fit normalization on an empty series");
  NormStats stats;
  stats.min = {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
  stats.max = {-std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  for (const auto& s : series.snapshots) {
    const std::size_t plane = s.flow.size() / 2;
    for (std::size_t c = 0; c < 2; ++c) {
      for (std::size_t p = 0; p < plane; ++p) {
        const double v = s.flow[c * plane + p];
        stats.min[c] = std::min(stats.min[c], v);
        stats.max[c] = std::max(stats.max[c], v);
      }
    }
  }
  if (range == NormRange::unit) {
    stats.low = 0.0;
    stats.high = 1.0;
  }
  stats.validate();
  return stats;
}

namespace {

template <typename F>
Tensor map_channels(const Tensor& x, F f) {
  const auto r = x.rank();
  if (r < 3 || x.dim(r - 3) != 2) {
    throw std::invalid_argument("expected a [..., 2, h, w] flow tensor, got " +
                                shape_string(x.shape()));
  }
  const std::size_t plane = x.dim(r - 2) * x.dim(r - 1);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i], (i / plane) % 2);
  return out;
}

}  // namespace

Tensor minmax_apply(const Tensor& x, const NormStats& stats) {
  return map_channels(x, [&](double v, std::size_t c) {
    return stats.low + (v - stats.min[c]) / (stats.max[c] - stats.min[c]) * (stats.high - stats.low);
  });
}

Tensor minmax_invert(const Tensor& y, const NormStats& stats) {
  return map_channels(y, [&](double v, std::size_t c) {
    return stats.min[c] + (v - stats.low) / (stats.high - stats.low) * (stats.max[c] - stats.min[c]);
  });
}

std::size_t ExternalSchema::width() const {
  std::size_t n = 0;
  for (const auto& f : fields) n += f.width();
  return n;
}

void ExternalSchema::validate() const {
  for (const auto& f : fields) {
    if (f.name.empty()) throw ConfigError("external field without a name");
    if (f.kind == FieldKind::categorical && f.categories.empty()) {
      throw ConfigError("categorical field '" + f.name + "' has no categories");
    }
    if (f.kind == FieldKind::continuous && !(f.max > f.min)) {
      throw ConfigError("continuous field '" + f.name + "' has an empty range");
    }
  }
}

ExternalVector encode_external(const ExternalRecord& record, const ExternalSchema& schema) {
  schema.validate();
  ExternalVector out;
  out.values.reserve(schema.width());
  for (const auto& field : schema.fields) {
    const auto it = record.find(field.name);
    if (it == record.end()) throw DataError("external record is missing field '" + field.name + "'");
    if (field.kind == FieldKind::categorical) {
      const auto* value = std::get_if<std::string>(&it->second);
      if (!value) throw DataError("field '" + field.name + "' expects a category label");
      const auto pos = std::find(field.categories.begin(), field.categories.end(), *value);
      if (pos == field.categories.end()) {
        std::string allowed;
        for (const auto& c : field.categories) allowed += (allowed.empty() ? "" : ", ") + c;
        throw DataError("unknown category '" + *value + "' for field '" + field.name +
                        "'; allowed: " + allowed);
      }
      const auto hot = static_cast<std::size_t>(pos - field.categories.begin());
      for (std::size_t k = 0; k < field.categories.size(); ++k) {
        out.values.push_back(k == hot ? 1.0 : 0.0);
      }
    } else {
      const auto* value = std::get_if<double>(&it->second);
      if (!value || !std::isfinite(*value)) {
        throw DataError("field '" + field.name + "' expects a finite number");
      }
      double scaled = (*value - field.min) / (field.max - field.min);
      if (scaled < 0.0 || scaled > 1.0) {
        log_warning("field '" + field.name + "' value " + std::to_string(*value) +
                    " outside [" + std::to_string(field.min) + ", " + std::to_string(field.max) +
                    "], clamped");
        scaled = std::clamp(scaled, 0.0, 1.0);
      }
      out.values.push_back(scaled);
    }
  }
  return out;
}

}  // namespace stmoe::flow
