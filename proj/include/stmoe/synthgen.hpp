#pragma once

// Synthetic city flows: additive mixtures of planted spatial patterns, each
// with its own weekly inflow/outflow profile, sampled as Poisson counts.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stmoe/flow_core.hpp"
#include "stmoe/stflow.hpp"
#include "stmoe/tensor.hpp"

namespace stmoe::synth {

struct PatternSpec {
  std::string name;
  Tensor spatial_mask;    // [h, w], values in [0, 1]
  Tensor weekly_profile;  // [2, 7 * steps_per_day], Monday 00:00 first
  double noise_scale = 1.0;  // multiplies the pattern's intensity
};

struct SynthConfig {
  flow::GridSpec grid;
  std::vector<PatternSpec> patterns;
  std::size_t weeks = 4;
  std::uint64_t seed = 0;
  /// Off: Saturday and Sunday reuse the mean weekday profile.
  bool weekend_shift = true;
  /// Expected intensities instead of Poisson draws.
  bool deterministic = false;
  std::string start_timestamp = "2026-01-05T00:00:00";  // a Monday

  void validate() const;
  std::size_t steps_per_week() const { return 7 * grid.steps_per_day(); }
};

/// Weekly profile actually used for a pattern under `cfg`.
Tensor effective_profile(const SynthConfig& cfg, const PatternSpec& p);

/// Expected flow [2, h, w] at step t.
Tensor intensity_at(const SynthConfig& cfg, long t);

/// Series, DayOfWeek/Weekend externals and truth masks [M, h, w].
flow::StFlowData generate(const SynthConfig& cfg);

/// DayOfWeek (Mon..Sun one-hot) and Weekend (false/true).
flow::ExternalSchema calendar_schema();
flow::ExternalRecord calendar_record(long t, std::size_t steps_per_day);

std::vector<std::string> preset_names();
/// tiny8: 8x8 grid, 3 patterns; ring16: 16x16 grid, 4 patterns including a
/// ring road. Both use 30-minute intervals and 4 weeks.
SynthConfig builtin_city(const std::string& preset);

std::string patterns_json(const SynthConfig& cfg);

/// stflow container plus patterns.json.
void write_synthetic(const std::filesystem::path& dir, const SynthConfig& cfg,
                     const flow::StFlowData& data);

}  // namespace stmoe::synth
