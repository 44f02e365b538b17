#include <doctest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "helpers.hpp"
#include "stmoe/errors.hpp"
#include "stmoe/losses.hpp"

using namespace stmoe;
using namespace stmoe::loss;
using model::ForwardTrace;

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Trace assembled from raw expert outputs, attention and temporal-gate logits.
ForwardTrace make_trace(const Tensor& raw, const Tensor& attention, const Tensor& gate_logits) {
  ForwardTrace t;
  const std::size_t n = raw.dim(0), k = raw.dim(1), cells = raw.size() / (n * k);
  t.expert_raw = raw;
  t.attention = attention;
  t.gated = Tensor(raw.shape());
  t.per_expert_h = Tensor(raw.shape());
  t.temporal_gate = Tensor(gate_logits.shape());
  for (std::size_t i = 0; i < gate_logits.size(); ++i) t.temporal_gate[i] = sigmoid(gate_logits[i]);
  t.prediction = Tensor(gate_logits.shape());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t c = 0; c < cells; ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < k; ++i) {
        const std::size_t e = (b * k + i) * cells + c;
        t.gated[e] = attention[e] * raw[e];
        t.per_expert_h[e] = t.temporal_gate[b * cells + c] * std::tanh(raw[e]);
        s += t.gated[e];
      }
      t.prediction[b * cells + c] = std::tanh(s) * t.temporal_gate[b * cells + c];
    }
  }
  return t;
}

Tensor random_attention(Shape shape, Rng& rng) {
  Tensor a = testutil::random_tensor(shape, rng, 0.1, 1.0);
  const std::size_t n = shape[0], k = shape[1], cells = a.size() / (n * k);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t c = 0; c < cells; ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < k; ++i) s += a[(b * k + i) * cells + c];
      for (std::size_t i = 0; i < k; ++i) a[(b * k + i) * cells + c] /= s;
    }
  }
  return a;
}

// Single-sample, single-cell-per-channel trace with H given directly.
ForwardTrace scalar_trace(const std::vector<double>& a, const std::vector<double>& h) {
  ForwardTrace t;
  const std::size_t k = a.size();
  t.attention = Tensor(Shape{1, k, 1, 1, 1}, a);
  t.per_expert_h = Tensor(Shape{1, k, 1, 1, 1}, h);
  t.expert_raw = Tensor(Shape{1, k, 1, 1, 1});
  t.gated = Tensor(Shape{1, k, 1, 1, 1});
  t.temporal_gate = Tensor(Shape{1, 1, 1, 1}, 1.0);
  t.prediction = Tensor(Shape{1, 1, 1, 1});
  return t;
}

Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = uniform(rng, -1.0, 1.0);
  return m;
}

}  // namespace

TEST_CASE("responsibility loss examples") {
  CHECK(responsibility_loss_general(scalar_trace({1.0}, {0.1}), Tensor(Shape{1, 1, 1, 1}, 0.5)) ==
        doctest::Approx(0.16).epsilon(1e-12));
  const double y = 0.3;
  const auto t = scalar_trace({0.5, 0.5}, {y, y - std::sqrt(2.0)});
  CHECK(responsibility_loss(t, Tensor(Shape{1, 1, 1, 1}, y)) ==
        doctest::Approx(-std::log(0.5 + 0.5 * std::exp(-1.0))).epsilon(1e-12));
  CHECK(responsibility_loss(t, Tensor(Shape{1, 1, 1, 1}, y)) == doctest::Approx(0.37989).epsilon(1e-5));

  // Full attention on an exact expert.
  CHECK(responsibility_loss(scalar_trace({1.0, 0.0}, {y, 7.0}), Tensor(Shape{1, 1, 1, 1}, y)) == 0.0);
  CHECK(responsibility_loss_general(scalar_trace({0.2, 0.8}, {y, y}), Tensor(Shape{1, 1, 1, 1}, y)) == 0.0);
}

TEST_CASE("uniform attention and equal residuals give r^2/2") {
  Rng rng(1);
  const Tensor y = testutil::random_tensor({2, 2, 3, 3}, rng);
  const double r = 0.7;
  Tensor a(Shape{2, 4, 2, 3, 3}, 0.25), h(Shape{2, 4, 2, 3, 3});
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t c = 0; c < 18; ++c) h[(b * 4 + i) * 18 + c] = y[b * 18 + c] - (c % 2 ? r : -r);
  ForwardTrace t;
  t.attention = a;
  t.per_expert_h = h;
  t.expert_raw = t.gated = Tensor(a.shape());
  t.temporal_gate = t.prediction = Tensor(y.shape());
  CHECK(responsibility_loss(t, y) == doctest::Approx(r * r / 2).epsilon(1e-12));
}

TEST_CASE("general responsibility loss is homogeneous of degree two in the residuals") {
  Rng rng(2);
  const Tensor y = testutil::random_tensor({1, 2, 2, 2}, rng);
  const Tensor a = random_attention({1, 3, 2, 2, 2}, rng);
  const Tensor r = testutil::random_tensor({1, 3, 2, 2, 2}, rng);
  auto with_scale = [&](double c) {
    ForwardTrace t;
    t.attention = a;
    t.per_expert_h = Tensor(a.shape());
    for (std::size_t e = 0; e < a.size(); ++e) t.per_expert_h[e] = y[e % 8] - c * r[e];
    t.expert_raw = t.gated = Tensor(a.shape());
    t.temporal_gate = t.prediction = Tensor(y.shape());
    return responsibility_loss_general(t, y);
  };
  CHECK(with_scale(3.0) == doctest::Approx(9.0 * with_scale(1.0)).epsilon(1e-12));
}

TEST_CASE("global residual domain mixes per-sample squared norms") {
  Rng rng(3);
  const Tensor raw = testutil::random_tensor({2, 2, 2, 1, 2}, rng);
  const Tensor a = random_attention(raw.shape(), rng);
  const Tensor gl = testutil::random_tensor({2, 2, 1, 2}, rng);
  const Tensor y = testutil::random_tensor({2, 2, 1, 2}, rng, -0.3, 0.3);
  const auto t = make_trace(raw, a, gl);
  double expected = 0.0;
  for (std::size_t b = 0; b < 2; ++b) {
    double mix = 0.0;
    for (std::size_t i = 0; i < 2; ++i) {
      double sq = 0.0, g = 0.0;
      for (std::size_t c = 0; c < 4; ++c) {
        const double r = y[b * 4 + c] - t.per_expert_h[(b * 2 + i) * 4 + c];
        sq += r * r;
        g += a[(b * 2 + i) * 4 + c] / 4.0;
      }
      mix += g * std::exp(-sq / 2.0);
    }
    expected += -std::log(mix) / 2.0;
  }
  CHECK(responsibility_loss(t, y, ResidualDomain::global) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("responsibility gradients: autograd, reference and finite differences agree") {
  Rng rng(4);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t k = 1 + rep % 3, h = 1 + rep % 3, w = 1 + (rep / 3) % 3;
    const std::size_t n = 1 + rep % 2;
    const Tensor raw = testutil::random_tensor({n, k, 2, h, w}, rng, -1.5, 1.5);
    const Tensor a = random_attention(raw.shape(), rng);
    const Tensor gl = testutil::random_tensor({n, 2, h, w}, rng, -2.0, 2.0);
    const Tensor y = testutil::random_tensor({n, 2, h, w}, rng);
    const auto trace = make_trace(raw, a, gl);
    for (auto variant : {ErVariant::general, ErVariant::log_mixture}) {
      INFO("rep " << rep << " variant " << to_string(variant));
      const Tensor ref = responsibility_grad_reference(trace, y, variant);

      ag::Var e = ag::leaf(raw);
      ag::Var gate = ag::constant(trace.temporal_gate);
      ag::Var hv = ag::mul(ag::broadcast_axis1(gate, k), ag::tanh(e));
      Tensor log_a(a.shape());
      for (std::size_t i = 0; i < a.size(); ++i) log_a[i] = std::log(a[i]);
      ag::Var l = responsibility_graph(ag::constant(a), ag::constant(log_a), hv, ag::constant(y), variant);
      ag::backward(l);
      CHECK(testutil::max_rel_diff(e.grad(), ref) < 1e-4);

      auto value = [&](const Tensor& r) {
        const auto t = make_trace(r, a, gl);
        return variant == ErVariant::general ? responsibility_loss_general(t, y) : responsibility_loss(t, y);
      };
      CHECK(l.value()[0] == doctest::Approx(value(raw)).epsilon(1e-12));
      Tensor fd(raw.shape());
      const double eps = 1e-4;
      for (std::size_t i = 0; i < raw.size(); ++i) {
        Tensor p = raw, m = raw;
        p[i] += eps;
        m[i] -= eps;
        fd[i] = (value(p) - value(m)) / (2 * eps);
      }
      CHECK(testutil::max_rel_diff(ref, fd) < 1e-4);
    }
  }
}

TEST_CASE("reference gradient vanishes for exact or saturated experts") {
  Rng rng(5);
  Tensor raw = testutil::random_tensor({1, 2, 2, 2, 2}, rng);
  const Tensor a = random_attention(raw.shape(), rng);
  const Tensor gl = testutil::random_tensor({1, 2, 2, 2}, rng);
  auto t = make_trace(raw, a, gl);
  Tensor y(Shape{1, 2, 2, 2});
  for (std::size_t c = 0; c < 8; ++c) y[c] = t.per_expert_h[c];
  const Tensor g = responsibility_grad_reference(t, y, ErVariant::general);
  for (std::size_t c = 0; c < 8; ++c) CHECK(g[c] == 0.0);
  bool other_nonzero = false;
  for (std::size_t c = 8; c < 16; ++c) other_nonzero = other_nonzero || g[c] != 0.0;
  CHECK(other_nonzero);

  for (std::size_t c = 0; c < 8; ++c) raw[c] = c % 2 ? 40.0 : -40.0;
  t = make_trace(raw, a, gl);
  for (auto v : {ErVariant::general, ErVariant::log_mixture}) {
    const Tensor gs = responsibility_grad_reference(t, Tensor(Shape{1, 2, 2, 2}), v);
    for (std::size_t c = 0; c < 8; ++c) CHECK(std::abs(gs[c]) < 1e-30);
  }
}

TEST_CASE("build_V ranks experts by mean attention and normalizes columns") {
  Rng rng(6);
  const Tensor raw = testutil::random_tensor({1, 3, 2, 2, 2}, rng);
  Tensor a = random_attention(raw.shape(), rng);
  const auto t = make_trace(raw, a, Tensor(Shape{1, 2, 2, 2}));
  const auto V = build_V(t, 3);
  std::vector<double> gbar(3, 0.0);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 8; ++c) gbar[i] += a[i * 8 + c] / 8.0;
  std::vector<std::size_t> order{0, 1, 2};
  std::sort(order.begin(), order.end(), [&](auto x, auto y) { return gbar[x] > gbar[y]; });
  CHECK(V.experts == order);
  REQUIRE(V.v.rows() == 8);
  for (std::size_t p = 0; p < 3; ++p) {
    for (std::size_t q = 0; q < 3; ++q) {
      const std::size_t i = order[p], j = order[q];
      double dot = 0.0, ni = 0.0, nj = 0.0;
      for (std::size_t c = 0; c < 8; ++c) {
        dot += t.gated[i * 8 + c] * t.gated[j * 8 + c];
        ni += t.gated[i * 8 + c] * t.gated[i * 8 + c];
        nj += t.gated[j * 8 + c] * t.gated[j * 8 + c];
      }
      const double expected = gbar[i] * gbar[j] * dot / std::sqrt(ni * nj);
      CHECK((V.v.transpose() * V.v)(Eigen::Index(p), Eigen::Index(q)) == doctest::Approx(expected).epsilon(1e-12));
    }
  }
  const auto top1 = build_V(t, 1);
  CHECK(top1.v.cols() == 1);
  CHECK(top1.experts[0] == order[0]);
  CHECK_THROWS(build_V(t, 4));
}

TEST_CASE("build_V special cases") {
  Rng rng(7);
  const Tensor raw1 = testutil::random_tensor({1, 1, 2, 2, 2}, rng);
  const auto single = build_V(make_trace(raw1, Tensor(raw1.shape(), 1.0), Tensor(Shape{1, 2, 2, 2})), 1);
  CHECK(single.v.col(0).norm() == doctest::Approx(1.0).epsilon(1e-12));

  Tensor raw2(Shape{1, 2, 2, 2, 2});
  for (std::size_t c = 0; c < 8; ++c) raw2[c] = raw2[8 + c] = uniform(rng, -1, 1);
  const auto dup = build_V(make_trace(raw2, Tensor(raw2.shape(), 0.5), Tensor(Shape{1, 2, 2, 2})), 2);
  CHECK((dup.v.col(0) - dup.v.col(1)).norm() < 1e-15);
  CHECK(inter_discrepancy_loss(dup.v) == doctest::Approx(0.0));

  for (std::size_t c = 0; c < 8; ++c) raw2[8 + c] = 0.0;
  const auto zero = build_V(make_trace(raw2, Tensor(raw2.shape(), 0.5), Tensor(Shape{1, 2, 2, 2})), 2);
  CHECK(zero.zero_column == std::vector<bool>{false, true});
  CHECK(zero.v.col(1).norm() == 0.0);
}

TEST_CASE("Gram determinant identities") {
  Eigen::MatrixXd q = Eigen::MatrixXd::Identity(5, 3);
  CHECK(inter_discrepancy_loss(q) == doctest::Approx(-1.0).epsilon(1e-14));

  Eigen::MatrixXd same(4, 2);
  same.col(0) << 0.3, -0.2, 0.5, 0.1;
  same.col(1) = same.col(0);
  CHECK(std::abs(inter_discrepancy_loss(same)) < 1e-15);

  for (double theta : {0.3, 1.0, 2.2}) {
    const double g1 = 0.4, g2 = 0.7;
    Eigen::MatrixXd v(3, 2);
    v.col(0) << g1, 0, 0;
    v.col(1) << g2 * std::cos(theta), g2 * std::sin(theta), 0;
    const double expected = -std::pow(g1 * g2 * std::sin(theta), 2);
    CHECK(inter_discrepancy_loss(v) == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("Gram determinant properties on random matrices") {
  Rng rng(8);
  for (int rep = 0; rep < 50; ++rep) {
    const Eigen::Index cols = 1 + rep % 5;
    const Eigen::MatrixXd v = random_matrix(8, cols, rng);
    const double d = gram_determinant(v).value;
    CHECK(d == doctest::Approx((v.transpose() * v).determinant()).epsilon(1e-10));
    CHECK(d >= 0.0);

    Eigen::MatrixXd perm = v;
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(cols));
    std::iota(idx.begin(), idx.end(), 0);
    std::reverse(idx.begin(), idx.end());
    for (Eigen::Index j = 0; j < cols; ++j) perm.col(j) = v.col(idx[static_cast<std::size_t>(j)]);
    CHECK(gram_determinant(perm).value == doctest::Approx(d).epsilon(1e-10));

    Eigen::MatrixXd scaled = v;
    scaled.col(0) *= 2.5;
    CHECK(gram_determinant(scaled).value == doctest::Approx(6.25 * d).epsilon(1e-10));

    if (cols >= 2) {
      Eigen::MatrixXd dep = v;
      dep.col(cols - 1) = 0.4 * v.col(0);
      if (cols > 2) dep.col(cols - 1) -= 1.3 * v.col(1);
      CHECK(std::abs(inter_discrepancy_loss(dep)) < 1e-12 * std::max(1.0, d));
    }
    CHECK(inter_discrepancy_loss(v) < 0.0);
  }
}

TEST_CASE("many columns use the log-magnitude path without underflow") {
  Eigen::MatrixXd v = Eigen::MatrixXd::Zero(12, 9);
  double log_expected = 0.0;
  for (Eigen::Index j = 0; j < 9; ++j) {
    v(j, j) = 1e-20 * static_cast<double>(j + 1);
    log_expected += 2.0 * std::log(v(j, j));
  }
  const auto g = gram_determinant(v);
  CHECK(g.sign == 1);
  CHECK(g.log_abs == doctest::Approx(log_expected).epsilon(1e-12));

  Rng rng(9);
  const Eigen::MatrixXd r = random_matrix(20, 8, rng);
  CHECK(gram_determinant(r).value == doctest::Approx((r.transpose() * r).determinant()).epsilon(1e-9));
}

TEST_CASE("inter-discrepancy gradient matches finite differences") {
  Rng rng(10);
  for (Eigen::Index cols : {1, 2, 3, 4}) {
    const Eigen::MatrixXd v = random_matrix(6, cols, rng);
    const Eigen::MatrixXd g = inter_discrepancy_grad(v);
    const double eps = 1e-6;
    double worst = 0.0, scale = 0.0;
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
      for (Eigen::Index j = 0; j < cols; ++j) {
        Eigen::MatrixXd p = v, m = v;
        p(i, j) += eps;
        m(i, j) -= eps;
        const double fd = (inter_discrepancy_loss(p) - inter_discrepancy_loss(m)) / (2 * eps);
        worst = std::max(worst, std::abs(fd - g(i, j)));
        scale = std::max(scale, std::abs(fd));
      }
    }
    CHECK(worst / scale < 1e-6);
  }
}

TEST_CASE("inter-discrepancy graph gradient matches finite differences") {
  Rng rng(11);
  const Tensor raw = testutil::random_tensor({2, 3, 2, 2, 2}, rng);
  const Tensor a = random_attention(raw.shape(), rng);
  Tensor gated(raw.shape());
  for (std::size_t i = 0; i < raw.size(); ++i) gated[i] = a[i] * raw[i];
  for (std::size_t n_top : {2u, 3u}) {
    ag::Var av = ag::leaf(a), gv = ag::leaf(gated);
    ag::Var l = inter_discrepancy_graph(av, gv, n_top);
    ag::backward(l);
    auto value = [&](const Tensor& aa, const Tensor& gg) {
      return inter_discrepancy_graph(ag::constant(aa), ag::constant(gg), n_top).value()[0];
    };
    ForwardTrace t;
    t.attention = a;
    t.gated = gated;
    CHECK(l.value()[0] == doctest::Approx(inter_discrepancy_loss(t, n_top)).epsilon(1e-12));
    const double eps = 1e-6;
    Tensor fa(a.shape()), fg(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) {
      Tensor p = a, m = a;
      p[i] += eps;
      m[i] -= eps;
      fa[i] = (value(p, gated) - value(m, gated)) / (2 * eps);
      p = gated;
      m = gated;
      p[i] += eps;
      m[i] -= eps;
      fg[i] = (value(a, p) - value(a, m)) / (2 * eps);
    }
    CHECK(testutil::max_rel_diff(av.grad(), fa) < 1e-5);
    CHECK(testutil::max_rel_diff(gv.grad(), fg) < 1e-5);
  }
}

TEST_CASE("total loss composition and configuration checks") {
  Rng rng(12);
  const Tensor raw = testutil::random_tensor({1, 2, 2, 2, 2}, rng);
  const Tensor a = random_attention(raw.shape(), rng);
  const auto t = make_trace(raw, a, Tensor(Shape{1, 2, 2, 2}));
  const Tensor y = testutil::random_tensor({1, 2, 2, 2}, rng);

  LossConfig none;
  none.lambda_er = none.lambda_eid = 0.0;
  const auto c0 = total_loss(t, y, none);
  CHECK(c0.total == doctest::Approx(mse(t.prediction, y)).epsilon(1e-14));

  LossConfig cfg;
  cfg.lambda_er = 0.2;
  cfg.lambda_eid = 0.3;
  const auto c = total_loss(t, y, cfg);
  CHECK(c.total == doctest::Approx(0.5 * c.mse + 0.2 * c.l_er + 0.3 * c.l_eid).epsilon(1e-14));
  CHECK(c.l_er == doctest::Approx(responsibility_loss(t, y)).epsilon(1e-14));
  CHECK(c.l_eid == doctest::Approx(inter_discrepancy_loss(t, 2)).epsilon(1e-14));

  // Perfect prediction, orthogonal experts with full attention.
  ForwardTrace p;
  p.attention = Tensor(Shape{1, 2, 2, 1, 1}, 1.0);
  p.gated = Tensor(Shape{1, 2, 2, 1, 1}, std::vector<double>{1.0, 0.0, 0.0, 2.0});
  p.expert_raw = p.gated;
  p.per_expert_h = Tensor(p.gated.shape());
  p.temporal_gate = Tensor(Shape{1, 2, 1, 1}, 1.0);
  p.prediction = Tensor(Shape{1, 2, 1, 1}, std::vector<double>{0.2, -0.1});
  LossConfig eid_only;
  eid_only.lambda_er = 0.0;
  eid_only.lambda_eid = 0.3;
  CHECK(total_loss(p, p.prediction, eid_only).total == doctest::Approx(-0.3).epsilon(1e-14));

  LossConfig bad;
  bad.lambda_er = 0.4;
  bad.lambda_eid = 0.6;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad.lambda_er = -0.1;
  bad.lambda_eid = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  LossConfig top;
  top.n_top = 4;
  CHECK_THROWS_AS(top.validate(3), ConfigError);
  CHECK(er_variant_from_string("logmix") == ErVariant::log_mixture);
  CHECK(er_variant_from_string("general") == ErVariant::general);
  CHECK_THROWS_AS(er_variant_from_string("other"), ConfigError);
}
