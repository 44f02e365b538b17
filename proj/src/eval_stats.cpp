#include "stmoe/eval_stats.hpp"

#include <boost/math/distributions/fisher_f.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "stmoe/errors.hpp"

namespace stmoe::eval {

MetricReport metrics_raw(const Tensor& pred, const Tensor& truth, const MetricOptions& opt) {
  if (pred.shape() != truth.shape()) {
    throw DataError("prediction shape " + shape_string(pred.shape()) + " does not match truth " +
                    shape_string(truth.shape()));
  }
  if (pred.empty()) throw DataError("no entries to score");
  MetricReport r;
  r.n = pred.dim(0);
  double se = 0.0, ae = 0.0, pe = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - truth[i];
    se += d * d;
    ae += std::abs(d);
    const double denom = opt.mape_denominator == MapeDenominator::prediction ? pred[i] : truth[i];
    if (std::abs(denom) >= opt.mape_floor) {
      pe += std::abs(d / denom);
      ++r.mape_entries;
    }
  }
  const double n = static_cast<double>(pred.size());
  r.mse = se / n;
  r.rmse = std::sqrt(r.mse);
  r.mae = ae / n;
  if (r.mape_entries > 0) r.mape = 100.0 * pe / static_cast<double>(r.mape_entries);
  return r;
}

MetricReport metrics(const Tensor& pred, const Tensor& truth, const flow::NormStats& stats,
                     const MetricOptions& opt) {
  if (pred.shape() != truth.shape()) {
    throw DataError("prediction shape " + shape_string(pred.shape()) + " does not match truth " +
                    shape_string(truth.shape()));
  }
  return metrics_raw(flow::minmax_invert(pred, stats), flow::minmax_invert(truth, stats), opt);
}

namespace {

// Average ranks (1-based) with ties sharing the mean rank.
std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) r[idx[t]] = rank;
    i = j + 1;
  }
  return r;
}

}  // namespace

double quade_pvalue(std::span<const double> y1, std::span<const double> y2) {
  if (y1.size() != y2.size()) throw std::invalid_argument("quade: series lengths differ");
  const std::size_t n = y1.size();
  if (n < 3) throw ConfigError("Quade test needs at least 3 blocks, got " + std::to_string(n));
  std::vector<double> range(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(y1[i]) || !std::isfinite(y2[i])) throw NumericalError("quade: non-finite value");
    range[i] = std::abs(y1[i] - y2[i]);
  }
  const auto q = average_ranks(range);
  double a = 0.0, s1 = 0.0, s2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double r1 = 1.5, r2 = 1.5;
    if (y1[i] < y2[i]) {
      r1 = 1.0;
      r2 = 2.0;
    } else if (y1[i] > y2[i]) {
      r1 = 2.0;
      r2 = 1.0;
    }
    const double t1 = q[i] * (r1 - 1.5), t2 = q[i] * (r2 - 1.5);
    a += t1 * t1 + t2 * t2;
    s1 += t1;
    s2 += t2;
  }
  if (a == 0.0) return 1.0;
  const double b = (s1 * s1 + s2 * s2) / static_cast<double>(n);
  const double nm1 = static_cast<double>(n - 1);
  if (a - b <= a * 1e-14) return std::pow(0.5, nm1);
  const double f = nm1 * b / (a - b);
  const boost::math::fisher_f dist(1.0, nm1);
  return std::clamp(boost::math::cdf(boost::math::complement(dist, f)), 0.0, 1.0);
}

double QuadeMatrix::max_off_diagonal() const {
  double m = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      if (i != j) m = std::max(m, at(i, j));
    }
  }
  return m;
}

double QuadeMatrix::median_off_diagonal() const {
  std::vector<double> v;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = i + 1; j < k; ++j) v.push_back(at(i, j));
  }
  if (v.empty()) return 1.0;
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

QuadeMatrix pairwise_expert_quade(const Tensor& expert_outputs) {
  if (expert_outputs.rank() < 2) throw std::invalid_argument("expert outputs must be [K, N, ...]");
  const std::size_t k = expert_outputs.dim(0), n = expert_outputs.dim(1);
  if (k < 2) throw ConfigError("pairwise Quade needs K >= 2");
  const std::size_t pos = expert_outputs.size() / (k * n);
  QuadeMatrix m{k, std::vector<double>(k * k, 1.0)};
  std::vector<double> a(n), b(n);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = i + 1; j < k; ++j) {
      double sum = 0.0;
      for (std::size_t c = 0; c < pos; ++c) {
        for (std::size_t t = 0; t < n; ++t) {
          a[t] = expert_outputs[(i * n + t) * pos + c];
          b[t] = expert_outputs[(j * n + t) * pos + c];
        }
        sum += quade_pvalue(a, b);
      }
      m.p[i * k + j] = m.p[j * k + i] = sum / static_cast<double>(pos);
    }
  }
  return m;
}

QuadeMatrix batched_expert_quade(const Tensor& gated, std::size_t batch) {
  if (gated.rank() < 2) throw std::invalid_argument("gated outputs must be [N, K, ...]");
  const std::size_t total = gated.dim(0), k = gated.dim(1);
  const std::size_t per = gated.size() / (total * k);
  if (batch < 3) throw ConfigError("Quade batch size must be >= 3");
  std::size_t batches = total / batch;
  std::size_t size = batch;
  if (batches == 0) {
    batches = 1;
    size = total;
  }
  QuadeMatrix acc{k, std::vector<double>(k * k, 0.0)};
  for (std::size_t bi = 0; bi < batches; ++bi) {
    Tensor t(Shape{k, size, per});
    for (std::size_t s = 0; s < size; ++s) {
      for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t c = 0; c < per; ++c) {
          t[(i * size + s) * per + c] = gated[((bi * size + s) * k + i) * per + c];
        }
      }
    }
    const auto m = pairwise_expert_quade(t);
    for (std::size_t x = 0; x < acc.p.size(); ++x) acc.p[x] += m.p[x];
  }
  for (auto& v : acc.p) v /= static_cast<double>(batches);
  return acc;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.empty()) throw std::invalid_argument("pearson: length mismatch");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return 0.0;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::vector<int> hungarian_max(const std::vector<std::vector<double>>& weight) {
  const std::size_t rows = weight.size();
  if (rows == 0) return {};
  const std::size_t cols = weight.front().size();
  if (cols == 0) return std::vector<int>(rows, -1);
  const std::size_t n = std::max(rows, cols);
  double wmax = 0.0;
  for (const auto& r : weight) {
    if (r.size() != cols) throw std::invalid_argument("hungarian: ragged matrix");
    for (double v : r) wmax = std::max(wmax, v);
  }
  // Square cost matrix (1-based, potentials method); padding costs wmax.
  std::vector<std::vector<double>> cost(n + 1, std::vector<double>(n + 1, 0.0));
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= n; ++j) {
      cost[i][j] = i <= rows && j <= cols ? wmax - weight[i - 1][j - 1] : wmax;
    }
  }
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0][j] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> out(rows, -1);
  for (std::size_t j = 1; j <= n; ++j) {
    if (p[j] >= 1 && p[j] <= rows && j <= cols) out[p[j] - 1] = static_cast<int>(j - 1);
  }
  return out;
}

MatchReport match_experts_to_patterns(const Tensor& mean_attention, const Tensor& truth_masks) {
  if (mean_attention.rank() != 3 || truth_masks.rank() != 3 ||
      mean_attention.dim(1) != truth_masks.dim(1) || mean_attention.dim(2) != truth_masks.dim(2)) {
    throw DataError("attention maps " + shape_string(mean_attention.shape()) +
                    " and truth masks " + shape_string(truth_masks.shape()) + " are incompatible");
  }
  const std::size_t k = mean_attention.dim(0), m = truth_masks.dim(0);
  if (k < 1 || m < 1) throw DataError("need at least one expert and one pattern");
  const std::size_t cells = mean_attention.dim(1) * mean_attention.dim(2);
  MatchReport r;
  r.correlation.assign(k, std::vector<double>(m, 0.0));
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      r.correlation[i][j] = pearson(mean_attention.data().subspan(i * cells, cells),
                                    truth_masks.data().subspan(j * cells, cells));
    }
  }
  r.assignment = hungarian_max(r.correlation);
  double s = 0.0;
  std::size_t cnt = 0;
  for (std::size_t i = 0; i < k; ++i) {
    if (r.assignment[i] >= 0) {
      s += r.correlation[i][static_cast<std::size_t>(r.assignment[i])];
      ++cnt;
    }
  }
  r.mean_matched_correlation = cnt ? s / static_cast<double>(cnt) : 0.0;
  return r;
}

namespace {

template <typename Fn>
void for_each_trace(const model::StExpertNet& net, const std::vector<fusion::InputSample>& samples,
                    model::Variant variant, std::size_t batch_size, Fn&& fn) {
  if (samples.empty()) throw DataError("no samples to evaluate");
  const std::span<const fusion::InputSample> all(samples);
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const std::size_t count = std::min(batch_size, samples.size() - start);
    fn(start, model::forward_batch(net, all.subspan(start, count), variant));
  }
}

}  // namespace

Tensor mean_inflow_attention(const model::StExpertNet& net,
                             const std::vector<fusion::InputSample>& samples, model::Variant variant,
                             std::size_t batch_size) {
  const auto& cfg = net.config;
  const std::size_t k = cfg.experts, plane = cfg.height * cfg.width;
  Tensor out(Shape{k, cfg.height, cfg.width});
  for_each_trace(net, samples, variant, batch_size, [&](std::size_t, const model::ForwardTrace& t) {
    const std::size_t n = t.attention.dim(0);
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t i = 0; i < k; ++i) {
        const std::size_t off = (b * k + i) * 2 * plane;
        for (std::size_t c = 0; c < plane; ++c) out[i * plane + c] += t.attention[off + c];
      }
    }
  });
  for (auto& v : out.data()) v /= static_cast<double>(samples.size());
  return out;
}

Tensor gated_outputs(const model::StExpertNet& net, const std::vector<fusion::InputSample>& samples,
                     model::Variant variant, std::size_t batch_size) {
  const auto& cfg = net.config;
  const std::size_t per = cfg.experts * 2 * cfg.height * cfg.width;
  Tensor out(Shape{samples.size(), cfg.experts, 2, cfg.height, cfg.width});
  for_each_trace(net, samples, variant, batch_size, [&](std::size_t start, const model::ForwardTrace& t) {
    std::copy(t.gated.data().begin(), t.gated.data().end(),
              out.data().begin() + static_cast<long>(start * per));
  });
  return out;
}

}  // namespace stmoe::eval
