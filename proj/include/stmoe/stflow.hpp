#pragma once

// The "stflow" dataset directory:
//   manifest.json   grid, interval, start timestamp, channels, external schema, array shapes
//   flow.bin        T x 2 x h x w, f32le, C-order
//   external.bin    T x n_ext,     f32le
//   truth_masks.bin M x h x w,     f32le (synthetic datasets only)
//   patterns.json   pattern descriptions (synthetic datasets only)

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "stmoe/flow_core.hpp"

namespace stmoe::flow {

struct StFlowData {
  FlowSeries series;
  std::string start_timestamp = "1970-01-01T00:00:00";
  std::vector<std::string> channel_names{"inflow", "outflow"};
  ExternalSchema schema;
  std::vector<ExternalVector> externals;  // one per snapshot
  std::optional<Tensor> truth_masks;      // [M, h, w]
};

void write_stflow(const std::filesystem::path& dir, const StFlowData& data);
StFlowData read_stflow(const std::filesystem::path& dir);

/// git-style content hash of manifest.json.
std::string manifest_hash(const std::filesystem::path& dir);

}  // namespace stmoe::flow
