#include "stmoe/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "stmoe/errors.hpp"

namespace stmoe::loss {

using ag::Var;

std::string to_string(ErVariant v) { return v == ErVariant::general ? "general" : "logmix"; }

ErVariant er_variant_from_string(const std::string& s) {
  if (s == "general") return ErVariant::general;
  if (s == "logmix" || s == "log_mixture") return ErVariant::log_mixture;
  throw ConfigError("unknown responsibility variant '" + s + "' (expected general or logmix)");
}

void LossConfig::validate() const {
  if (!(lambda_er >= 0.0 && lambda_er < 1.0)) throw ConfigError("lambda_er must lie in [0, 1)");
  if (!(lambda_eid >= 0.0 && lambda_eid < 1.0)) throw ConfigError("lambda_eid must lie in [0, 1)");
  if (!(lambda_er + lambda_eid < 1.0)) {
    throw ConfigError("lambda_er + lambda_eid must be < 1 (got " +
                      std::to_string(lambda_er + lambda_eid) + ")");
  }
}

void LossConfig::validate(std::size_t experts) const {
  validate();
  if (n_top > experts) {
    throw ConfigError("n_top = " + std::to_string(n_top) + " exceeds expert count " +
                      std::to_string(experts));
  }
}

namespace {

void require_same(const Shape& a, const Shape& b, const char* what) {
  if (a != b) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_string(a) +
                                " vs " + shape_string(b));
  }
}

struct Layout {
  std::size_t n, k, cells;  // cells = 2*h*w
};

Layout check_trace(const model::ForwardTrace& t, const Tensor& y) {
  if (t.per_expert_h.rank() != 5) throw std::invalid_argument("trace must be batched [N,K,2,h,w]");
  const std::size_t n = t.per_expert_h.dim(0), k = t.per_expert_h.dim(1);
  Shape ys(t.per_expert_h.shape());
  ys.erase(ys.begin() + 1);
  require_same(y.shape(), ys, "target");
  require_same(t.attention.shape(), t.per_expert_h.shape(), "attention");
  return {n, k, y.size() / n};
}

}  // namespace

double mse(const Tensor& pred, const Tensor& y) {
  require_same(pred.shape(), y.shape(), "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += (pred[i] - y[i]) * (pred[i] - y[i]);
  return s / static_cast<double>(y.size());
}

double responsibility_loss_general(const model::ForwardTrace& trace, const Tensor& y) {
  const auto L = check_trace(trace, y);
  double s = 0.0;
  for (std::size_t b = 0; b < L.n; ++b) {
    for (std::size_t i = 0; i < L.k; ++i) {
      for (std::size_t c = 0; c < L.cells; ++c) {
        const std::size_t e = (b * L.k + i) * L.cells + c;
        const double r = y[b * L.cells + c] - trace.per_expert_h[e];
        s += trace.attention[e] * r * r;
      }
    }
  }
  return s / static_cast<double>(L.n * L.cells);
}

double responsibility_loss(const model::ForwardTrace& trace, const Tensor& y, ResidualDomain domain) {
  const auto L = check_trace(trace, y);
  std::vector<double> expo(L.k);
  double total = 0.0;
  for (std::size_t b = 0; b < L.n; ++b) {
    if (domain == ResidualDomain::per_cell) {
      for (std::size_t c = 0; c < L.cells; ++c) {
        for (std::size_t i = 0; i < L.k; ++i) {
          const std::size_t e = (b * L.k + i) * L.cells + c;
          const double r = y[b * L.cells + c] - trace.per_expert_h[e];
          if (!std::isfinite(r)) throw NumericalError("non-finite residual for expert " + std::to_string(i));
          expo[i] = std::log(trace.attention[e]) - 0.5 * r * r;
        }
        const double m = *std::max_element(expo.begin(), expo.end());
        double acc = 0.0;
        for (double v : expo) acc += std::exp(v - m);
        total += -(m + std::log(acc));
      }
    } else {
      for (std::size_t i = 0; i < L.k; ++i) {
        double sq = 0.0, g = 0.0;
        for (std::size_t c = 0; c < L.cells; ++c) {
          const std::size_t e = (b * L.k + i) * L.cells + c;
          const double r = y[b * L.cells + c] - trace.per_expert_h[e];
          sq += r * r;
          g += trace.attention[e];
        }
        if (!std::isfinite(sq)) throw NumericalError("non-finite residual for expert " + std::to_string(i));
        expo[i] = std::log(g / static_cast<double>(L.cells)) - 0.5 * sq;
      }
      const double m = *std::max_element(expo.begin(), expo.end());
      double acc = 0.0;
      for (double v : expo) acc += std::exp(v - m);
      total += -(m + std::log(acc)) * static_cast<double>(L.cells);
    }
  }
  return total / static_cast<double>(L.n * L.cells);
}

Tensor responsibility_grad_reference(const model::ForwardTrace& trace, const Tensor& y,
                                     ErVariant variant) {
  const auto L = check_trace(trace, y);
  require_same(trace.expert_raw.shape(), trace.per_expert_h.shape(), "expert_raw");
  Tensor grad(trace.per_expert_h.shape());
  const double scale = 1.0 / static_cast<double>(L.n * L.cells);
  std::vector<double> w(L.k);
  for (std::size_t b = 0; b < L.n; ++b) {
    for (std::size_t c = 0; c < L.cells; ++c) {
      const double yv = y[b * L.cells + c];
      const double gate = trace.temporal_gate[b * L.cells + c];
      if (variant == ErVariant::log_mixture) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < L.k; ++i) {
          const std::size_t e = (b * L.k + i) * L.cells + c;
          const double r = yv - trace.per_expert_h[e];
          w[i] = std::log(trace.attention[e]) - 0.5 * r * r;
          m = std::max(m, w[i]);
        }
        double z = 0.0;
        for (auto& v : w) z += (v = std::exp(v - m));
        for (auto& v : w) v /= z;  // posterior responsibility of each expert
      }
      for (std::size_t i = 0; i < L.k; ++i) {
        const std::size_t e = (b * L.k + i) * L.cells + c;
        const double th = std::tanh(trace.expert_raw[e]);
        const double h_prime = gate * (1.0 - th * th);
        const double r = yv - trace.per_expert_h[e];
        grad[e] = variant == ErVariant::general ? -2.0 * trace.attention[e] * h_prime * r * scale
                                                : -w[i] * r * h_prime * scale;
      }
    }
  }
  return grad;
}

VMatrix build_V(const model::ForwardTrace& trace, std::size_t n_top, std::size_t n) {
  const Tensor& a = trace.attention;
  const Tensor& e = trace.gated;
  if (a.rank() != 5) throw std::invalid_argument("trace must be batched [N,K,2,h,w]");
  require_same(a.shape(), e.shape(), "gated");
  const std::size_t k = a.dim(1);
  if (n_top < 1 || n_top > k) {
    throw ConfigError("n_top must lie in [1, " + std::to_string(k) + "], got " + std::to_string(n_top));
  }
  if (n >= a.dim(0)) throw std::out_of_range("sample index out of range");
  const std::size_t cells = a.size() / (a.dim(0) * k);
  std::vector<double> gbar(k, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t off = (n * k + i) * cells;
    for (std::size_t c = 0; c < cells; ++c) gbar[i] += a[off + c];
    gbar[i] /= static_cast<double>(cells);
  }
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return gbar[x] > gbar[y]; });
  VMatrix out;
  out.v = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(cells), static_cast<Eigen::Index>(n_top));
  for (std::size_t col = 0; col < n_top; ++col) {
    const std::size_t i = order[col];
    const std::size_t off = (n * k + i) * cells;
    double norm = 0.0;
    for (std::size_t c = 0; c < cells; ++c) norm += e[off + c] * e[off + c];
    norm = std::sqrt(norm);
    out.experts.push_back(i);
    out.gbar.push_back(gbar[i]);
    out.zero_column.push_back(norm == 0.0);
    if (norm == 0.0) continue;
    for (std::size_t c = 0; c < cells; ++c) {
      out.v(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(col)) = gbar[i] * e[off + c] / norm;
    }
  }
  return out;
}

GramDeterminant gram_determinant(const Eigen::MatrixXd& v) {
  if (!v.allFinite()) throw NumericalError("V has non-finite entries");
  const Eigen::MatrixXd g = v.transpose() * v;
  GramDeterminant d;
  if (g.rows() == 0) {
    d.value = 1.0;
    d.sign = 1;
    return d;
  }
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(g);
  const Eigen::MatrixXd& m = lu.matrixLU();
  int sign = static_cast<int>(lu.permutationP().determinant());
  double log_abs = 0.0;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double u = m(i, i);
    if (u == 0.0) {
      d.log_abs = -std::numeric_limits<double>::infinity();
      return d;
    }
    if (u < 0) sign = -sign;
    log_abs += std::log(std::abs(u));
  }
  d.sign = sign;
  d.log_abs = log_abs;
  d.value = g.rows() > 6 ? sign * std::exp(log_abs) : lu.determinant();
  return d;
}

double inter_discrepancy_loss(const Eigen::MatrixXd& v) { return -gram_determinant(v).value; }

Eigen::MatrixXd inter_discrepancy_grad(const Eigen::MatrixXd& v) {
  const Eigen::MatrixXd g = v.transpose() * v;
  const Eigen::Index n = g.rows();
  Eigen::MatrixXd adj(n, n);
  if (n == 1) {
    adj(0, 0) = 1.0;
  } else {
    Eigen::MatrixXd minor(n - 1, n - 1);
    for (Eigen::Index r = 0; r < n; ++r) {
      for (Eigen::Index c = 0; c < n; ++c) {
        for (Eigen::Index i = 0, mi = 0; i < n; ++i) {
          if (i == r) continue;
          for (Eigen::Index j = 0, mj = 0; j < n; ++j) {
            if (j == c) continue;
            minor(mi, mj++) = g(i, j);
          }
          ++mi;
        }
        adj(c, r) = ((r + c) % 2 == 0 ? 1.0 : -1.0) * minor.determinant();
      }
    }
  }
  return -2.0 * v * adj;
}

double inter_discrepancy_loss(const model::ForwardTrace& trace, std::size_t n_top) {
  const std::size_t n = trace.attention.dim(0);
  double s = 0.0;
  for (std::size_t b = 0; b < n; ++b) s += inter_discrepancy_loss(build_V(trace, n_top, b).v);
  return s / static_cast<double>(n);
}

LossComponents total_loss(const model::ForwardTrace& trace, const Tensor& y, const LossConfig& cfg) {
  const std::size_t k = trace.attention.dim(1);
  cfg.validate(k);
  LossComponents c;
  c.mse = mse(trace.prediction, y);
  c.l_er = cfg.er_variant == ErVariant::general ? responsibility_loss_general(trace, y)
                                                : responsibility_loss(trace, y, cfg.residual);
  c.l_eid = inter_discrepancy_loss(trace, cfg.top(k));
  c.total = (1.0 - cfg.lambda_er - cfg.lambda_eid) * c.mse + cfg.lambda_er * c.l_er +
            cfg.lambda_eid * c.l_eid;
  return c;
}

Var mse_graph(const Var& pred, const Var& y) { return ag::mean_all(ag::square(ag::sub(pred, y))); }

Var responsibility_graph(const Var& attention, const Var& log_attention, const Var& h, const Var& y,
                         ErVariant variant, ResidualDomain domain) {
  const std::size_t k = h.shape()[1];
  Var sq = ag::square(ag::sub(ag::broadcast_axis1(y, k), h));
  if (variant == ErVariant::general) {
    // Sum over experts, mean over the rest: K * mean over all entries.
    return ag::scale(ag::mean_all(ag::mul(attention, sq)), static_cast<double>(k));
  }
  if (domain == ResidualDomain::per_cell) {
    return ag::scale(ag::mean_all(ag::logsumexp_axis1(ag::sub(log_attention, ag::scale(sq, 0.5)))), -1.0);
  }
  Var log_g = ag::log(ag::mean_rest(attention));
  Var lse = ag::logsumexp_axis1(ag::sub(log_g, ag::scale(ag::sum_rest(sq), 0.5)));
  return ag::scale(ag::mean_all(lse), -1.0);
}

Var inter_discrepancy_graph(const Var& attention, const Var& gated, std::size_t n_top) {
  model::ForwardTrace t;
  t.attention = attention.value();
  t.gated = gated.value();
  const std::size_t n = t.attention.dim(0), k = t.attention.dim(1);
  const std::size_t cells = t.attention.size() / (n * k);
  std::vector<VMatrix> vs;
  double loss = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    vs.push_back(build_V(t, n_top, b));
    loss += inter_discrepancy_loss(vs.back().v);
  }
  loss /= static_cast<double>(n);
  Tensor value(Shape{}, std::vector<double>{loss});
  return ag::make_op(
      std::move(value), {attention, gated},
      [vs = std::move(vs), t = std::move(t), n, k, cells](const Tensor& gout, std::vector<Tensor*>& pg) {
        const double up = gout[0] / static_cast<double>(n);
        for (std::size_t b = 0; b < n; ++b) {
          const VMatrix& vm = vs[b];
          const Eigen::MatrixXd dv = inter_discrepancy_grad(vm.v) * up;
          for (std::size_t col = 0; col < vm.experts.size(); ++col) {
            if (vm.zero_column[col]) continue;
            const std::size_t i = vm.experts[col];
            const std::size_t off = (b * k + i) * cells;
            const auto ci = static_cast<Eigen::Index>(col);
            // column = gbar * u, u = e / |e|
            const double g = vm.gbar[col];
            const Eigen::VectorXd u = vm.v.col(ci) / g;
            const Eigen::VectorXd d = dv.col(ci);
            const double du = d.dot(u);
            if (pg[0]) {
              const double dg = du / static_cast<double>(cells);
              for (std::size_t c = 0; c < cells; ++c) (*pg[0])[off + c] += dg;
            }
            if (pg[1]) {
              double norm = 0.0;
              for (std::size_t c = 0; c < cells; ++c) norm += t.gated[off + c] * t.gated[off + c];
              norm = std::sqrt(norm);
              for (std::size_t c = 0; c < cells; ++c) {
                const auto ce = static_cast<Eigen::Index>(c);
                (*pg[1])[off + c] += g * (d(ce) - du * u(ce)) / norm;
              }
            }
          }
        }
      });
}

GraphLoss total_loss_graph(const model::GraphTrace& g, const Tensor& y, const LossConfig& cfg) {
  const std::size_t k = g.attention.shape()[1];
  cfg.validate(k);
  Var yv = ag::constant(y);
  GraphLoss out;
  Var m = mse_graph(g.prediction, yv);
  std::vector<Var> terms{m};
  std::vector<double> weights{1.0 - cfg.lambda_er - cfg.lambda_eid};
  out.components.mse = m.item();
  if (cfg.lambda_er > 0.0) {
    Var er = responsibility_graph(g.attention, g.log_attention, g.per_expert_h, yv, cfg.er_variant,
                                  cfg.residual);
    out.components.l_er = er.item();
    terms.push_back(er);
    weights.push_back(cfg.lambda_er);
  } else {
    out.components.l_er = ag::detach(responsibility_graph(
        g.attention, g.log_attention, g.per_expert_h, yv, cfg.er_variant, cfg.residual)).item();
  }
  if (cfg.lambda_eid > 0.0) {
    Var eid = inter_discrepancy_graph(g.attention, g.gated, cfg.top(k));
    out.components.l_eid = eid.item();
    terms.push_back(eid);
    weights.push_back(cfg.lambda_eid);
  } else {
    out.components.l_eid = inter_discrepancy_graph(ag::detach(g.attention), ag::detach(g.gated),
                                                   cfg.top(k)).item();
  }
  out.total = ag::weighted_sum(terms, weights);
  out.components.total = out.total.item();
  return out;
}

}  // namespace stmoe::loss
