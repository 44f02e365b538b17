#pragma once

// Reconstruction, expert-responsibility and inter-discrepancy losses.
//
// All reductions average over samples, channels and cells; sums over experts
// stay sums. Traces carry a leading batch axis N.

#include <Eigen/Dense>

#include <cstddef>
#include <string>
#include <vector>

#include "stmoe/autograd.hpp"
#include "stmoe/moe_model.hpp"
#include "stmoe/tensor.hpp"

namespace stmoe::loss {

enum class ErVariant { general, log_mixture };
/// Residual reduction inside the log-mixture: per cell, or one squared norm
/// per sample mixed with the mean attentions.
enum class ResidualDomain { per_cell, global };

std::string to_string(ErVariant v);
ErVariant er_variant_from_string(const std::string& s);  // general | logmix | log_mixture

struct LossConfig {
  double lambda_er = 1e-2;
  double lambda_eid = 0.1;
  std::size_t n_top = 0;  // 0 = all experts
  ErVariant er_variant = ErVariant::log_mixture;
  ResidualDomain residual = ResidualDomain::per_cell;

  void validate() const;
  void validate(std::size_t experts) const;
  std::size_t top(std::size_t experts) const { return n_top == 0 ? experts : n_top; }
};

double mse(const Tensor& pred, const Tensor& y);

/// sum_i mean[a_i (y - H_i)^2]
double responsibility_loss_general(const model::ForwardTrace& trace, const Tensor& y);
/// mean[-log sum_i a_i exp(-(y - H_i)^2 / 2)]
double responsibility_loss(const model::ForwardTrace& trace, const Tensor& y,
                           ResidualDomain domain = ResidualDomain::per_cell);

/// dL/dE_i with the attention held fixed, [N, K, 2, h, w]. Per-cell residuals.
Tensor responsibility_grad_reference(const model::ForwardTrace& trace, const Tensor& y,
                                     ErVariant variant);

struct VMatrix {
  Eigen::MatrixXd v;                 // rows = 2*h*w, cols = n_top
  std::vector<std::size_t> experts;  // expert index of each column, by rank
  std::vector<double> gbar;          // mean attention of each column's expert
  std::vector<bool> zero_column;     // e_i was identically zero
};

/// V for sample `n` of the trace.
VMatrix build_V(const model::ForwardTrace& trace, std::size_t n_top, std::size_t n = 0);

struct GramDeterminant {
  double value = 0.0;    // det(V^T V)
  double log_abs = 0.0;  // log|det|, -inf when singular
  int sign = 0;
};

/// det(V^T V) from a partially pivoted LU; the value is rebuilt from its log
/// magnitude when there are more than six columns.
GramDeterminant gram_determinant(const Eigen::MatrixXd& v);

/// -det(V^T V)
double inter_discrepancy_loss(const Eigen::MatrixXd& v);
/// d(-det(V^T V))/dV = -2 V adj(V^T V)
Eigen::MatrixXd inter_discrepancy_grad(const Eigen::MatrixXd& v);

/// Mean over samples of -det(V^T V).
double inter_discrepancy_loss(const model::ForwardTrace& trace, std::size_t n_top);

struct LossComponents {
  double mse = 0.0;
  double l_er = 0.0;
  double l_eid = 0.0;
  double total = 0.0;
};

LossComponents total_loss(const model::ForwardTrace& trace, const Tensor& y, const LossConfig& cfg);

// Differentiable counterparts.

ag::Var mse_graph(const ag::Var& pred, const ag::Var& y);
/// attention, log_attention and h are [N, K, 2, h, w]; y is [N, 2, h, w].
ag::Var responsibility_graph(const ag::Var& attention, const ag::Var& log_attention,
                             const ag::Var& h, const ag::Var& y, ErVariant variant,
                             ResidualDomain domain = ResidualDomain::per_cell);
/// Mean over samples of -det(V^T V) with V built from attention and gated
/// outputs; the expert ranking is treated as constant.
ag::Var inter_discrepancy_graph(const ag::Var& attention, const ag::Var& gated, std::size_t n_top);

struct GraphLoss {
  ag::Var total;
  LossComponents components;
};

GraphLoss total_loss_graph(const model::GraphTrace& g, const Tensor& y, const LossConfig& cfg);

}  // namespace stmoe::loss
