#pragma once

// City grid geometry, trajectory-to-flow aggregation, min-max scaling and
// external-factor encoding.
//
// Regions are half-open cells: row i covers latitudes [edge_i, edge_{i+1}),
// column j covers longitudes [edge_j, edge_{j+1}). A point exactly on an
// interior boundary therefore belongs to the cell with the larger index, and
// points on the maximum latitude/longitude edge lie outside the grid.

#include <array>
#include <cstddef>
#include <istream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "stmoe/tensor.hpp"

namespace stmoe::flow {

struct GeoBounds {
  double min_lat = 0.0;
  double max_lat = 1.0;
  double min_lon = 0.0;
  double max_lon = 1.0;
};

struct RegionIndex {
  std::size_t row = 0;
  std::size_t col = 0;
  friend bool operator==(const RegionIndex&, const RegionIndex&) = default;
};

struct GridSpec {
  std::size_t height = 1;
  std::size_t width = 1;
  GeoBounds bounds;
  double interval_minutes = 30.0;

  /// Throws ConfigError on an empty grid or degenerate bounds.
  void validate() const;
  bool contains(std::size_t row, std::size_t col) const { return row < height && col < width; }
  std::size_t cells() const { return height * width; }
  double lat_edge(std::size_t row) const;
  double lon_edge(std::size_t col) const;
  /// Region of a coordinate, or nullopt outside the half-open bounds.
  std::optional<RegionIndex> locate(double lat, double lon) const;
  std::size_t steps_per_day() const;
};

/// Inflow and outflow for one interval, stored as a [2, h, w] tensor
/// (channel 0 inflow, channel 1 outflow).
struct FlowSnapshot {
  Tensor flow;
  long t = 0;

  double inflow(std::size_t i, std::size_t j) const { return flow.at({0, i, j}); }
  double outflow(std::size_t i, std::size_t j) const { return flow.at({1, i, j}); }
};

struct FlowSeries {
  GridSpec grid;
  std::vector<FlowSnapshot> snapshots;

  std::size_t size() const { return snapshots.size(); }
  /// Consecutive t, matching shapes, non-negative entries.
  void validate() const;
  /// Snapshots [0, count).
  FlowSeries prefix(std::size_t count) const;
};

enum class NormRange { symmetric, unit };

struct NormStats {
  std::array<double, 2> min{0.0, 0.0};
  std::array<double, 2> max{1.0, 1.0};
  double low = -1.0;
  double high = 1.0;

  void validate() const;
};

struct TrajectoryPoint {
  double lat = 0.0;
  double lon = 0.0;
  long t = 0;
};

struct Trajectory {
  std::string id;
  std::vector<TrajectoryPoint> points;
};

/// Counts region boundary crossings of the transitions whose earlier point is
/// tagged with interval `t`. The last point of a trajectory has no successor
/// and never contributes outflow.
FlowSnapshot compute_inflow_outflow(std::span<const Trajectory> trajectories, const GridSpec& grid,
                                    long t);

/// Parses `traj_id, t, lat, lon` records (optional header line). Points are
/// grouped by id in file order.
std::vector<Trajectory> read_trajectory_csv(std::istream& in);

/// Per-channel extremes of every snapshot in `series`. Pass only the
/// training prefix to avoid leakage.
NormStats minmax_fit(const FlowSeries& series, NormRange range = NormRange::symmetric);

/// x has shape [..., 2, h, w]. Values outside [min, max] extrapolate linearly.
Tensor minmax_apply(const Tensor& x, const NormStats& stats);
Tensor minmax_invert(const Tensor& y, const NormStats& stats);

enum class FieldKind { categorical, continuous };

struct ExternalField {
  std::string name;
  FieldKind kind = FieldKind::categorical;
  std::vector<std::string> categories;  // categorical only
  double min = 0.0;                     // continuous only
  double max = 1.0;

  std::size_t width() const { return kind == FieldKind::categorical ? categories.size() : 1; }
};

struct ExternalSchema {
  std::vector<ExternalField> fields;

  std::size_t width() const;
  void validate() const;
};

using ExternalValue = std::variant<std::string, double>;
using ExternalRecord = std::map<std::string, ExternalValue>;

struct ExternalVector {
  std::vector<double> values;
};

/// One-hot categoricals and min-max scaled continuous fields in schema order.
/// Out-of-range continuous values are clamped to [0, 1] with a warning.
ExternalVector encode_external(const ExternalRecord& record, const ExternalSchema& schema);

}  // namespace stmoe::flow
