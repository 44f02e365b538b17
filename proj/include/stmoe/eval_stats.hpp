#pragma once

// Error metrics, pairwise Quade tests between experts and expert-to-pattern
// matching.

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "stmoe/flow_core.hpp"
#include "stmoe/fusion.hpp"
#include "stmoe/moe_model.hpp"
#include "stmoe/tensor.hpp"

namespace stmoe::eval {

enum class MapeDenominator { prediction, truth };

struct MetricOptions {
  double mape_floor = 1.0;  // entries whose denominator is below this are skipped
  MapeDenominator mape_denominator = MapeDenominator::prediction;
};

struct MetricReport {
  double mse = 0.0;
  double rmse = 0.0;
  double mae = 0.0;
  std::optional<double> mape;  // percent; empty when no entry clears the floor
  std::size_t n = 0;           // samples
  std::size_t mape_entries = 0;
};

/// Metrics on already denormalized values of any equal shape; n = dim 0.
MetricReport metrics_raw(const Tensor& pred, const Tensor& truth, const MetricOptions& opt = {});
/// Denormalizes both [N, 2, h, w] tensors with `stats` first.
MetricReport metrics(const Tensor& pred, const Tensor& truth, const flow::NormStats& stats,
                     const MetricOptions& opt = {});

/// Quade test for two treatments over N blocks; F(1, N-1) reference.
double quade_pvalue(std::span<const double> y1, std::span<const double> y2);

/// K x K symmetric matrix of p-values, unit diagonal.
struct QuadeMatrix {
  std::size_t k = 0;
  std::vector<double> p;
  double at(std::size_t i, std::size_t j) const { return p[i * k + j]; }
  double max_off_diagonal() const;
  double median_off_diagonal() const;
};

/// expert_outputs [K, N, ...]: per pair, mean over trailing positions of the
/// Quade p-value of the two N-length series.
QuadeMatrix pairwise_expert_quade(const Tensor& expert_outputs);

/// gated [N_total, K, ...]: pairwise_expert_quade over consecutive full
/// batches of `batch` samples, averaged entrywise. A shorter remainder is
/// dropped unless it is the only batch.
QuadeMatrix batched_expert_quade(const Tensor& gated, std::size_t batch);

double pearson(std::span<const double> x, std::span<const double> y);

/// Maximum-weight assignment of rows to columns of a rows x cols matrix;
/// result[r] = column or -1 when rows > cols.
std::vector<int> hungarian_max(const std::vector<std::vector<double>>& weight);

struct MatchReport {
  std::vector<std::vector<double>> correlation;  // K x M
  std::vector<int> assignment;                   // expert -> pattern or -1
  double mean_matched_correlation = 0.0;
};

/// mean_attention [K, h, w], truth_masks [M, h, w].
MatchReport match_experts_to_patterns(const Tensor& mean_attention, const Tensor& truth_masks);

/// Inflow attention averaged over the samples' forward traces, [K, h, w].
Tensor mean_inflow_attention(const model::StExpertNet& net,
                             const std::vector<fusion::InputSample>& samples, model::Variant variant,
                             std::size_t batch_size = 64);

/// Gated expert outputs e_i for every sample, [N, K, 2, h, w].
Tensor gated_outputs(const model::StExpertNet& net, const std::vector<fusion::InputSample>& samples,
                     model::Variant variant, std::size_t batch_size = 64);

}  // namespace stmoe::eval
