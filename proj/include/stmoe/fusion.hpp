#pragma once

// Closeness / period / trend sample assembly and chronological splitting.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "stmoe/flow_core.hpp"
#include "stmoe/tensor.hpp"

namespace stmoe::fusion {

struct FusionConfig {
  std::size_t closeness = 3;  // steps t-k, k = 0..closeness-1
  std::size_t period = 1;     // daily lags t-k*day_offset, k = 1..period
  std::size_t trend = 1;      // weekly lags t-k*week_offset, k = 1..trend
  std::size_t day_offset = 48;
  std::size_t week_offset = 336;

  void validate() const;
  /// Also checks the offsets against the grid's interval.
  void validate(const flow::GridSpec& grid) const;
  std::size_t snapshots_per_sample() const { return closeness + period + trend; }
  std::size_t flow_channels() const { return 2 * snapshots_per_sample(); }
  /// Smallest position t that has all lags available.
  std::size_t required_history() const;
  /// Lags (t - offset) in channel order: trend, period, closeness, each oldest first.
  std::vector<std::size_t> lags() const;
};

/// Flow history channels of X_t plus the next-step target. The external
/// embedding channels are produced by the model from `external` and placed
/// in front of `x`, so the model input has `channel_count(n_w)` channels.
struct InputSample {
  Tensor x;  // [flow_channels, h, w]
  Tensor y;  // [2, h, w]
  long t = 0;
  flow::ExternalVector external;  // for t + 1

  std::size_t channel_count(std::size_t n_w) const { return n_w + x.dim(0); }
};

struct BuildOutcome {
  std::optional<InputSample> sample;
  std::string skip_reason;
};

/// Raw (unnormalized) sample anchored at interval t.
BuildOutcome build_sample(const flow::FlowSeries& series,
                          const std::vector<flow::ExternalVector>& externals, long t,
                          const FusionConfig& cfg);

struct SplitConfig {
  double test_fraction = 0.2;
  double val_fraction = 0.2;  // of the non-test part
};

struct SplitSizes {
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;
};

/// Floor-then-remainder, at least one sample in each part. Needs n >= 3.
SplitSizes split_sizes(std::size_t n, const SplitConfig& split);

struct Dataset {
  flow::GridSpec grid;
  FusionConfig fusion;
  flow::NormStats stats;
  std::size_t external_width = 0;
  std::vector<InputSample> train;
  std::vector<InputSample> val;
  std::vector<InputSample> test;
};

/// Builds every usable sample in time order, splits contiguously
/// (train < val < test), fits min-max statistics on the snapshots the
/// training samples touch, and normalizes x and y of all parts.
Dataset make_dataset(const flow::FlowSeries& series,
                     const std::vector<flow::ExternalVector>& externals, const FusionConfig& cfg,
                     const SplitConfig& split = {},
                     flow::NormRange range = flow::NormRange::symmetric);

}  // namespace stmoe::fusion
