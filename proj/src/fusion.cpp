#include "stmoe/fusion.hpp"

#include <algorithm>
#include <cmath>

#include "stmoe/errors.hpp"

namespace stmoe::fusion {

void FusionConfig::validate() const {
  if (snapshots_per_sample() == 0) {
    throw ConfigError("closeness, period and trend lengths are all zero");
  }
  if (day_offset == 0 || week_offset == 0) throw ConfigError("day/week offsets must be >= 1");
}

void FusionConfig::validate(const flow::GridSpec& grid) const {
  validate();
  const std::size_t per_day = grid.steps_per_day();
  if (day_offset != per_day || week_offset != 7 * per_day) {
    throw ConfigError("day_offset/week_offset (" + std::to_string(day_offset) + "/" +
                      std::to_string(week_offset) + ") inconsistent with a " +
                      std::to_string(grid.interval_minutes) + "-minute interval (expected " +
                      std::to_string(per_day) + "/" + std::to_string(7 * per_day) + ")");
  }
}

std::size_t FusionConfig::required_history() const {
  std::size_t h = closeness > 0 ? closeness - 1 : 0;
  h = std::max(h, period * day_offset);
  h = std::max(h, trend * week_offset);
  return h;
}

std::vector<std::size_t> FusionConfig::lags() const {
  std::vector<std::size_t> out;
  for (std::size_t k = trend; k >= 1; --k) out.push_back(k * week_offset);
  for (std::size_t k = period; k >= 1; --k) out.push_back(k * day_offset);
  for (std::size_t k = closeness; k >= 1; --k) out.push_back(k - 1);
  return out;
}

BuildOutcome build_sample(const flow::FlowSeries& series,
                          const std::vector<flow::ExternalVector>& externals, long t,
                          const FusionConfig& cfg) {
  cfg.validate();
  if (series.snapshots.empty()) return {std::nullopt, "empty series"};
  if (externals.size() != series.size()) {
    throw DataError("external series length " + std::to_string(externals.size()) +
                    " does not match flow series length " + std::to_string(series.size()));
  }
  const long start = series.snapshots.front().t;
  const long pos = t - start;
  if (pos < static_cast<long>(cfg.required_history())) {
    return {std::nullopt, "insufficient history at t=" + std::to_string(t) + " (needs " +
                              std::to_string(cfg.required_history()) + " prior steps)"};
  }
  if (pos + 1 >= static_cast<long>(series.size())) {
    return {std::nullopt, "no target interval after t=" + std::to_string(t)};
  }
  const auto& grid = series.grid;
  const std::size_t plane = grid.cells();
  const auto lags = cfg.lags();
  InputSample s;
  s.t = t;
  s.x = Tensor(Shape{2 * lags.size(), grid.height, grid.width});
  for (std::size_t k = 0; k < lags.size(); ++k) {
    const auto& src = series.snapshots[static_cast<std::size_t>(pos) - lags[k]].flow;
    std::copy(src.data().begin(), src.data().end(), s.x.data().begin() + static_cast<long>(2 * k * plane));
  }
  s.y = series.snapshots[static_cast<std::size_t>(pos + 1)].flow;
  s.external = externals[static_cast<std::size_t>(pos + 1)];
  return {std::move(s), {}};
}

SplitSizes split_sizes(std::size_t n, const SplitConfig& split) {
  if (n < 3) {
    throw DataError("need at least 3 usable samples to split, got " + std::to_string(n));
  }
  if (!(split.test_fraction > 0.0 && split.test_fraction < 1.0) ||
      !(split.val_fraction > 0.0 && split.val_fraction < 1.0)) {
    throw ConfigError("split fractions must lie in (0, 1)");
  }
  SplitSizes s;
  s.test = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::floor(split.test_fraction * static_cast<double>(n))));
  const std::size_t rest = n - s.test;
  s.val = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::floor(split.val_fraction * static_cast<double>(rest))));
  if (s.val >= rest) s.val = rest - 1;
  s.train = rest - s.val;
  return s;
}

Dataset make_dataset(const flow::FlowSeries& series,
                     const std::vector<flow::ExternalVector>& externals, const FusionConfig& cfg,
                     const SplitConfig& split, flow::NormRange range) {
  series.validate();
  cfg.validate();
  std::vector<InputSample> all;
  for (const auto& snap : series.snapshots) {
    auto outcome = build_sample(series, externals, snap.t, cfg);
    if (outcome.sample) all.push_back(std::move(*outcome.sample));
  }
  const auto sizes = split_sizes(all.size(), split);

  Dataset ds;
  ds.grid = series.grid;
  ds.fusion = cfg;
  ds.external_width = externals.empty() ? 0 : externals.front().values.size();

  // Training samples read snapshots up to their last target.
  const long last_train_t = all[sizes.train - 1].t;
  const auto fit_count =
      static_cast<std::size_t>(last_train_t - series.snapshots.front().t + 2);
  ds.stats = flow::minmax_fit(series.prefix(fit_count), range);

  for (auto& s : all) {
    s.x = flow::minmax_apply(s.x.reshaped({s.x.dim(0) / 2, 2, ds.grid.height, ds.grid.width}),
                             ds.stats)
              .reshaped(s.x.shape());
    s.y = flow::minmax_apply(s.y, ds.stats);
  }
  auto it = std::make_move_iterator(all.begin());
  ds.train.assign(it, it + static_cast<long>(sizes.train));
  ds.val.assign(it + static_cast<long>(sizes.train), it + static_cast<long>(sizes.train + sizes.val));
  ds.test.assign(it + static_cast<long>(sizes.train + sizes.val), std::make_move_iterator(all.end()));
  return ds;
}

}  // namespace stmoe::fusion
