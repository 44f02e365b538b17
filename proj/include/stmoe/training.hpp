#pragma once

// Mini-batch Adam training with early stopping on denormalized validation
// MSE, resumable state, hyperparameter search and a finite-difference checker.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "stmoe/fusion.hpp"
#include "stmoe/losses.hpp"
#include "stmoe/moe_model.hpp"

namespace stmoe::train {

struct TrainConfig {
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  std::size_t max_epochs = 100;
  std::size_t patience = 10;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 5.0;  // global gradient norm; 0 disables
  loss::LossConfig loss;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  loss::LossComponents train;  // means over the epoch's batches
  double val_mse = 0.0;        // denormalized
  double best_val_mse = 0.0;
};

struct StepRecord {
  std::size_t step = 0;
  loss::LossComponents loss;
};

/// Everything needed to continue a run exactly where it stopped.
struct TrainState {
  model::StExpertNet net;
  model::StExpertNet best;
  std::vector<Tensor> adam_m;
  std::vector<Tensor> adam_v;
  std::size_t step = 0;
  std::size_t epoch = 0;  // completed epochs
  std::size_t best_epoch = 0;
  double best_val_mse = 0.0;
  std::size_t since_best = 0;
  std::vector<EpochRecord> history;
};

struct TrainResult {
  model::StExpertNet best;
  std::vector<EpochRecord> history;
  std::vector<StepRecord> steps;
  std::size_t best_epoch = 0;
  double best_val_mse = 0.0;
  bool stopped_early = false;
  bool diverged = false;
  std::string divergence;  // message when diverged
};

struct TrainHooks {
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const TrainState&)> on_epoch;
};

TrainState initial_state(const model::StExpertNet& init);

TrainResult train(const fusion::Dataset& ds, const model::StExpertNet& init, const TrainConfig& cfg,
                  const TrainHooks& hooks = {});
/// Continues from `state` until early stopping or max_epochs.
TrainResult train(const fusion::Dataset& ds, TrainState state, const TrainConfig& cfg,
                  const TrainHooks& hooks = {});

/// MSE of denormalized predictions against denormalized targets.
double denormalized_mse(const model::StExpertNet& net, const std::vector<fusion::InputSample>& samples,
                        const flow::NormStats& stats, model::Variant variant);

void write_history_csv(std::ostream& out, const std::vector<EpochRecord>& history);
void write_steps_csv(std::ostream& out, const std::vector<StepRecord>& steps);

void save_state(const std::filesystem::path& path, const TrainState& state);
TrainState load_state(const std::filesystem::path& path);

/// Total loss and its gradient for one batch, flattened over trainable
/// parameters in ParamSet order.
struct LossAndGrad {
  loss::LossComponents loss;
  std::vector<double> grad;
};
LossAndGrad loss_and_grad(const model::StExpertNet& net, const model::Batch& batch,
                          const loss::LossConfig& cfg, model::Mode mode = model::Mode::eval);

std::vector<double> flatten_trainable(const model::ParamSet& params);
void assign_trainable(model::ParamSet& params, const std::vector<double>& flat);

struct FiniteDiffResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t worst_index = 0;
};

/// Central differences of f at theta against `grad`, over coordinates with
/// |grad| > 1e-8.
FiniteDiffResult finite_diff_check(const std::function<double(const std::vector<double>&)>& f,
                                   const std::vector<double>& theta, const std::vector<double>& grad,
                                   double eps);

struct SearchSpec {
  std::vector<std::size_t> experts{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  std::vector<double> lambdas{1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0};
  std::vector<std::size_t> closeness;  // empty = keep the dataset's
  std::size_t repeats = 3;
};

struct SearchRow {
  std::string phase;  // experts | lambdas | closeness
  std::size_t experts = 0;
  double lambda_er = 0.0;
  double lambda_eid = 0.0;
  std::size_t closeness = 0;
  std::uint64_t seed = 0;
  double val_mse = 0.0;
  double test_mse = 0.0;
};

struct SearchCell {
  std::string phase;
  std::size_t experts = 0;
  double lambda_er = 0.0;
  double lambda_eid = 0.0;
  std::size_t closeness = 0;
  double mean_val_mse = 0.0;
  double var_val_mse = 0.0;
  double mean_test_mse = 0.0;
  double var_test_mse = 0.0;
};

struct SearchReport {
  std::vector<SearchRow> rows;
  std::vector<SearchCell> cells;
  std::vector<std::string> skipped;  // combinations with lambda_er + lambda_eid >= 1
  model::ModelConfig best_model;
  TrainConfig best_train;
  fusion::FusionConfig best_fusion;
};

using DatasetFactory = std::function<fusion::Dataset(const fusion::FusionConfig&)>;

/// Searches K with the base lambdas, then (lambda_er, lambda_eid) at the best K,
/// then closeness length at the best of both; selection by mean validation MSE.
SearchReport grid_search(const DatasetFactory& make, const fusion::FusionConfig& fusion,
                         const model::ModelConfig& model, const TrainConfig& train,
                         const SearchSpec& spec);

void write_search_csv(std::ostream& out, const SearchReport& report);

}  // namespace stmoe::train
