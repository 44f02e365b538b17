#include "stmoe/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_set>

namespace stmoe::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                                " vs " + shape_string(b.shape()));
  }
}

// Splits shape [N, K, rest...] into (N, K, R).
struct Axis1View {
  std::size_t n;
  std::size_t k;
  std::size_t r;
};

Axis1View axis1_view(const Shape& s, const char* op) {
  if (s.size() < 2) throw std::invalid_argument(std::string(op) + ": need rank >= 2");
  std::size_t r = 1;
  for (std::size_t i = 2; i < s.size(); ++i) r *= s[i];
  return {s[0], s[1], r};
}

template <typename Fwd, typename Deriv>
Var unary(const Var& a, Fwd fwd, Deriv deriv) {
  Tensor out(a.shape());
  const auto& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
  auto out_copy = std::make_shared<Tensor>(out);
  return make_op(std::move(out), {a},
                 [a, out_copy, deriv](const Tensor& g, std::vector<Tensor*>& pg) {
                   if (!pg[0]) return;
                   const auto& x = a.value();
                   for (std::size_t i = 0; i < g.size(); ++i) {
                     (*pg[0])[i] += g[i] * deriv(x[i], (*out_copy)[i]);
                   }
                 });
}

}  // namespace

double Var::item() const {
  if (value().size() != 1) {
    throw std::logic_error("item() on tensor of shape " + shape_string(shape()));
  }
  return value()[0];
}

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var leaf(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

Var make_op(Tensor value, std::vector<Var> parents, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  for (const auto& p : parents) {
    if (p.requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(fn);
  }
  return Var(std::move(node));
}

Var detach(const Var& v) { return constant(v.value()); }

void backward(const Var& root) {
  if (root.value().size() != 1) {
    throw std::logic_error("backward needs a single-element root, got " +
                           shape_string(root.shape()));
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) n->grad = Tensor(n->value.shape(), 0.0);
  root.node()->grad.fill(1.0);

  std::vector<Tensor*> pg;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->backward) continue;
    pg.assign(n->parents.size(), nullptr);
    for (std::size_t i = 0; i < n->parents.size(); ++i) {
      if (n->parents[i]->requires_grad) pg[i] = &n->parents[i]->grad;
    }
    n->backward(n->grad, pg);
  }
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_op(std::move(out), {a, b}, [](const Tensor& g, std::vector<Tensor*>& pg) {
    for (auto* p : pg) {
      if (!p) continue;
      for (std::size_t i = 0; i < g.size(); ++i) (*p)[i] += g[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_op(std::move(out), {a, b}, [](const Tensor& g, std::vector<Tensor*>& pg) {
    if (pg[0]) {
      for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
    }
    if (pg[1]) {
      for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] -= g[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_op(std::move(out), {a, b}, [a, b](const Tensor& g, std::vector<Tensor*>& pg) {
    if (pg[0]) {
      for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * b.value()[i];
    }
    if (pg[1]) {
      for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] += g[i] * a.value()[i];
    }
  });
}

Var scale(const Var& a, double c) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a.value()[i];
  return make_op(std::move(out), {a}, [c](const Tensor& g, std::vector<Tensor*>& pg) {
    if (!pg[0]) return;
    for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += c * g[i];
  });
}

Var add_scalar(const Var& a, double c) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + c;
  return make_op(std::move(out), {a}, [](const Tensor& g, std::vector<Tensor*>& pg) {
    if (!pg[0]) return;
    for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
  });
}

Var relu(const Var& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var tanh(const Var& a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(const Var& a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var exp(const Var& a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
  return unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var square(const Var& a) {
  return unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var sum_all(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return make_op(Tensor(Shape{}, s), {a}, [](const Tensor& g, std::vector<Tensor*>& pg) {
    if (!pg[0]) return;
    for (auto& v : pg[0]->data()) v += g[0];
  });
}

Var mean_all(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw std::invalid_argument("mean_all of empty tensor");
  return scale(sum_all(a), 1.0 / n);
}

Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights) {
  if (terms.size() != weights.size()) throw std::invalid_argument("weighted_sum: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) s += weights[i] * terms[i].item();
  return make_op(Tensor(Shape{}, s), terms,
                 [weights](const Tensor& g, std::vector<Tensor*>& pg) {
                   for (std::size_t i = 0; i < pg.size(); ++i) {
                     if (pg[i]) (*pg[i])[0] += weights[i] * g[0];
                   }
                 });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_op(std::move(out), {a}, [](const Tensor& g, std::vector<Tensor*>& pg) {
    if (!pg[0]) return;
    for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
  });
}

Var concat_axis1(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_axis1: no inputs");
  const auto v0 = axis1_view(parts[0].shape(), "concat_axis1");
  std::size_t total_k = 0;
  for (const auto& p : parts) {
    const auto v = axis1_view(p.shape(), "concat_axis1");
    if (v.n != v0.n || v.r != v0.r || p.shape().size() != parts[0].shape().size()) {
      throw std::invalid_argument("concat_axis1: incompatible shapes " +
                                  shape_string(parts[0].shape()) + " and " +
                                  shape_string(p.shape()));
    }
    total_k += v.k;
  }
  Shape shape = parts[0].shape();
  shape[1] = total_k;
  Tensor out(shape);
  std::vector<std::size_t> offsets;
  std::size_t koff = 0;
  for (const auto& p : parts) {
    offsets.push_back(koff);
    const std::size_t k = p.shape()[1];
    for (std::size_t n = 0; n < v0.n; ++n) {
      const double* src = p.value().data().data() + n * k * v0.r;
      double* dst = out.data().data() + (n * total_k + koff) * v0.r;
      std::copy(src, src + k * v0.r, dst);
    }
    koff += k;
  }
  std::vector<std::size_t> ks;
  for (const auto& p : parts) ks.push_back(p.shape()[1]);
  return make_op(std::move(out), parts,
                 [offsets, ks, total_k, v0](const Tensor& g, std::vector<Tensor*>& pg) {
                   for (std::size_t i = 0; i < pg.size(); ++i) {
                     if (!pg[i]) continue;
                     for (std::size_t n = 0; n < v0.n; ++n) {
                       const double* src = g.data().data() + (n * total_k + offsets[i]) * v0.r;
                       double* dst = pg[i]->data().data() + n * ks[i] * v0.r;
                       for (std::size_t j = 0; j < ks[i] * v0.r; ++j) dst[j] += src[j];
                     }
                   }
                 });
}

Var slice_axis1(const Var& a, std::size_t begin, std::size_t count) {
  const auto v = axis1_view(a.shape(), "slice_axis1");
  if (begin + count > v.k) throw std::out_of_range("slice_axis1: range exceeds axis");
  Shape shape = a.shape();
  shape[1] = count;
  Tensor out(shape);
  for (std::size_t n = 0; n < v.n; ++n) {
    const double* src = a.value().data().data() + (n * v.k + begin) * v.r;
    std::copy(src, src + count * v.r, out.data().data() + n * count * v.r);
  }
  return make_op(std::move(out), {a}, [v, begin, count](const Tensor& g, std::vector<Tensor*>& pg) {
    if (!pg[0]) return;
    for (std::size_t n = 0; n < v.n; ++n) {
      double* dst = pg[0]->data().data() + (n * v.k + begin) * v.r;
      const double* src = g.data().data() + n * count * v.r;
      for (std::size_t j = 0; j < count * v.r; ++j) dst[j] += src[j];
    }
  });
}

Var broadcast_axis1(const Var& a, std::size_t k) {
  const auto& s = a.shape();
  if (s.empty()) throw std::invalid_argument("broadcast_axis1: need rank >= 1");
  const std::size_t n = s[0];
  const std::size_t r = a.value().size() / std::max<std::size_t>(n, 1);
  Shape shape{n, k};
  shape.insert(shape.end(), s.begin() + 1, s.end());
  Tensor out(shape);
  for (std::size_t b = 0; b < n; ++b) {
    const double* src = a.value().data().data() + b * r;
    for (std::size_t j = 0; j < k; ++j) {
      std::copy(src, src + r, out.data().data() + (b * k + j) * r);
    }
  }
  return make_op(std::move(out), {a}, [n, k, r](const Tensor& g, std::vector<Tensor*>& pg) {
    if (!pg[0]) return;
    for (std::size_t b = 0; b < n; ++b) {
      double* dst = pg[0]->data().data() + b * r;
      for (std::size_t j = 0; j < k; ++j) {
        const double* src = g.data().data() + (b * k + j) * r;
        for (std::size_t i = 0; i < r; ++i) dst[i] += src[i];
      }
    }
  });
}

Var sum_axis1(const Var& a) {
  const auto v = axis1_view(a.shape(), "sum_axis1");
  Shape shape = a.shape();
  shape.erase(shape.begin() + 1);
  Tensor out(shape);
  for (std::size_t n = 0; n < v.n; ++n) {
    for (std::size_t j = 0; j < v.k; ++j) {
      const double* src = a.value().data().data() + (n * v.k + j) * v.r;
      double* dst = out.data().data() + n * v.r;
      for (std::size_t i = 0; i < v.r; ++i) dst[i] += src[i];
    }
  }
  return make_op(std::move(out), {a}, [v](const Tensor& g, std::vector<Tensor*>& pg) {
    if (!pg[0]) return;
    for (std::size_t n = 0; n < v.n; ++n) {
      for (std::size_t j = 0; j < v.k; ++j) {
        double* dst = pg[0]->data().data() + (n * v.k + j) * v.r;
        const double* src = g.data().data() + n * v.r;
        for (std::size_t i = 0; i < v.r; ++i) dst[i] += src[i];
      }
    }
  });
}

namespace {

// Softmax over axis 1 of a [N, K, R] buffer, max-shifted.
Tensor softmax_values(const Tensor& x, const Axis1View& v) {
  Tensor out(x.shape());
  const double* in = x.data().data();
  double* o = out.data().data();
  for (std::size_t n = 0; n < v.n; ++n) {
    for (std::size_t i = 0; i < v.r; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < v.k; ++j) m = std::max(m, in[(n * v.k + j) * v.r + i]);
      double s = 0.0;
      for (std::size_t j = 0; j < v.k; ++j) {
        const double e = std::exp(in[(n * v.k + j) * v.r + i] - m);
        o[(n * v.k + j) * v.r + i] = e;
        s += e;
      }
      for (std::size_t j = 0; j < v.k; ++j) o[(n * v.k + j) * v.r + i] /= s;
    }
  }
  return out;
}

}  // namespace

Var softmax_axis1(const Var& a) {
  const auto v = axis1_view(a.shape(), "softmax_axis1");
  auto probs = std::make_shared<Tensor>(softmax_values(a.value(), v));
  Tensor out = *probs;
  return make_op(std::move(out), {a}, [v, probs](const Tensor& g, std::vector<Tensor*>& pg) {
    if (!pg[0]) return;
    const double* p = probs->data().data();
    for (std::size_t n = 0; n < v.n; ++n) {
      for (std::size_t i = 0; i < v.r; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < v.k; ++j) {
          const std::size_t idx = (n * v.k + j) * v.r + i;
          dot += p[idx] * g[idx];
        }
        for (std::size_t j = 0; j < v.k; ++j) {
          const std::size_t idx = (n * v.k + j) * v.r + i;
          (*pg[0])[idx] += p[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

Var log_softmax_axis1(const Var& a) {
  const auto v = axis1_view(a.shape(), "log_softmax_axis1");
  auto probs = std::make_shared<Tensor>(softmax_values(a.value(), v));
  Tensor out(a.shape());
  const double* in = a.value().data().data();
  for (std::size_t n = 0; n < v.n; ++n) {
    for (std::size_t i = 0; i < v.r; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < v.k; ++j) m = std::max(m, in[(n * v.k + j) * v.r + i]);
      double s = 0.0;
      for (std::size_t j = 0; j < v.k; ++j) s += std::exp(in[(n * v.k + j) * v.r + i] - m);
      const double lse = m + std::log(s);
      for (std::size_t j = 0; j < v.k; ++j) {
        out[(n * v.k + j) * v.r + i] = in[(n * v.k + j) * v.r + i] - lse;
      }
    }
  }
  return make_op(std::move(out), {a}, [v, probs](const Tensor& g, std::vector<Tensor*>& pg) {
    if (!pg[0]) return;
    const double* p = probs->data().data();
    for (std::size_t n = 0; n < v.n; ++n) {
      for (std::size_t i = 0; i < v.r; ++i) {
        double gs = 0.0;
        for (std::size_t j = 0; j < v.k; ++j) gs += g[(n * v.k + j) * v.r + i];
        for (std::size_t j = 0; j < v.k; ++j) {
          const std::size_t idx = (n * v.k + j) * v.r + i;
          (*pg[0])[idx] += g[idx] - p[idx] * gs;
        }
      }
    }
  });
}

Var logsumexp_axis1(const Var& a) {
  const auto v = axis1_view(a.shape(), "logsumexp_axis1");
  auto probs = std::make_shared<Tensor>(softmax_values(a.value(), v));
  Shape shape = a.shape();
  shape.erase(shape.begin() + 1);
  Tensor out(shape);
  const double* in = a.value().data().data();
  for (std::size_t n = 0; n < v.n; ++n) {
    for (std::size_t i = 0; i < v.r; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < v.k; ++j) m = std::max(m, in[(n * v.k + j) * v.r + i]);
      double s = 0.0;
      for (std::size_t j = 0; j < v.k; ++j) s += std::exp(in[(n * v.k + j) * v.r + i] - m);
      out[n * v.r + i] = m + std::log(s);
    }
  }
  return make_op(std::move(out), {a}, [v, probs](const Tensor& g, std::vector<Tensor*>& pg) {
    if (!pg[0]) return;
    const double* p = probs->data().data();
    for (std::size_t n = 0; n < v.n; ++n) {
      for (std::size_t j = 0; j < v.k; ++j) {
        for (std::size_t i = 0; i < v.r; ++i) {
          const std::size_t idx = (n * v.k + j) * v.r + i;
          (*pg[0])[idx] += p[idx] * g[n * v.r + i];
        }
      }
    }
  });
}

Var sum_rest(const Var& a) {
  const auto v = axis1_view(a.shape(), "sum_rest");
  Tensor out(Shape{v.n, v.k});
  for (std::size_t nk = 0; nk < v.n * v.k; ++nk) {
    double s = 0.0;
    for (std::size_t i = 0; i < v.r; ++i) s += a.value()[nk * v.r + i];
    out[nk] = s;
  }
  return make_op(std::move(out), {a}, [v](const Tensor& g, std::vector<Tensor*>& pg) {
    if (!pg[0]) return;
    for (std::size_t nk = 0; nk < v.n * v.k; ++nk) {
      for (std::size_t i = 0; i < v.r; ++i) (*pg[0])[nk * v.r + i] += g[nk];
    }
  });
}

Var mean_rest(const Var& a) {
  const auto v = axis1_view(a.shape(), "mean_rest");
  return scale(sum_rest(a), 1.0 / static_cast<double>(v.r));
}

Var conv2d_same(const Var& x, const Var& w, const Var& b) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || ws[2] % 2 == 0 ||
      b.shape() != Shape{ws[0]}) {
    throw std::invalid_argument("conv2d_same: incompatible shapes x" + shape_string(xs) + " w" +
                                shape_string(ws) + " b" + shape_string(b.shape()));
  }
  const std::size_t n = xs[0], cin = xs[1], h = xs[2], wd = xs[3];
  const std::size_t cout = ws[0], k = ws[2];
  const long pad = static_cast<long>(k / 2);
  const std::size_t plane = h * wd;
  const std::size_t rows = cin * k * k;
  const std::size_t cols_n = n * plane;

  auto cols = std::make_shared<RowMat>(RowMat::Zero(static_cast<Eigen::Index>(rows),
                                                    static_cast<Eigen::Index>(cols_n)));
  const double* xin = x.value().data().data();
  for (std::size_t ci = 0; ci < cin; ++ci) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = cols->data() + ((ci * k + ky) * k + kx) * cols_n;
        const long dy = static_cast<long>(ky) - pad;
        const long dx = static_cast<long>(kx) - pad;
        for (std::size_t b0 = 0; b0 < n; ++b0) {
          const double* src = xin + (b0 * cin + ci) * plane;
          double* dst = row + b0 * plane;
          for (std::size_t y = 0; y < h; ++y) {
            const long iy = static_cast<long>(y) + dy;
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (std::size_t xx = 0; xx < wd; ++xx) {
              const long ix = static_cast<long>(xx) + dx;
              if (ix < 0 || ix >= static_cast<long>(wd)) continue;
              dst[y * wd + xx] = src[static_cast<std::size_t>(iy) * wd + static_cast<std::size_t>(ix)];
            }
          }
        }
      }
    }
  }

  ConstMapMat wm(w.value().data().data(), static_cast<Eigen::Index>(cout),
                 static_cast<Eigen::Index>(rows));
  RowMat prod = wm * (*cols);

  Tensor out(Shape{n, cout, h, wd});
  for (std::size_t b0 = 0; b0 < n; ++b0) {
    for (std::size_t co = 0; co < cout; ++co) {
      const double* src = prod.data() + co * cols_n + b0 * plane;
      double* dst = out.data().data() + (b0 * cout + co) * plane;
      const double bias = b.value()[co];
      for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + bias;
    }
  }

  return make_op(std::move(out), {x, w, b},
                 [=](const Tensor& g, std::vector<Tensor*>& pg) {
                   RowMat gm(static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(cols_n));
                   for (std::size_t b0 = 0; b0 < n; ++b0) {
                     for (std::size_t co = 0; co < cout; ++co) {
                       const double* src = g.data().data() + (b0 * cout + co) * plane;
                       std::copy(src, src + plane, gm.data() + co * cols_n + b0 * plane);
                     }
                   }
                   if (pg[1]) {
                     MapMat dw(pg[1]->data().data(), static_cast<Eigen::Index>(cout),
                               static_cast<Eigen::Index>(rows));
                     dw.noalias() += gm * cols->transpose();
                   }
                   if (pg[2]) {
                     for (std::size_t co = 0; co < cout; ++co) {
                       (*pg[2])[co] += gm.row(static_cast<Eigen::Index>(co)).sum();
                     }
                   }
                   if (pg[0]) {
                     ConstMapMat wm2(w.value().data().data(), static_cast<Eigen::Index>(cout),
                                     static_cast<Eigen::Index>(rows));
                     RowMat dcols = wm2.transpose() * gm;
                     double* dx = pg[0]->data().data();
                     for (std::size_t ci = 0; ci < cin; ++ci) {
                       for (std::size_t ky = 0; ky < k; ++ky) {
                         for (std::size_t kx = 0; kx < k; ++kx) {
                           const double* row = dcols.data() + ((ci * k + ky) * k + kx) * cols_n;
                           const long dy = static_cast<long>(ky) - pad;
                           const long dxo = static_cast<long>(kx) - pad;
                           for (std::size_t b0 = 0; b0 < n; ++b0) {
                             double* dst = dx + (b0 * cin + ci) * plane;
                             const double* src = row + b0 * plane;
                             for (std::size_t y = 0; y < h; ++y) {
                               const long iy = static_cast<long>(y) + dy;
                               if (iy < 0 || iy >= static_cast<long>(h)) continue;
                               for (std::size_t xx = 0; xx < wd; ++xx) {
                                 const long ix = static_cast<long>(xx) + dxo;
                                 if (ix < 0 || ix >= static_cast<long>(wd)) continue;
                                 dst[static_cast<std::size_t>(iy) * wd + static_cast<std::size_t>(ix)] +=
                                     src[y * wd + xx];
                               }
                             }
                           }
                         }
                       }
                     }
                   }
                 });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 2 || ws.size() != 2 || ws[1] != xs[1] || b.shape() != Shape{ws[0]}) {
    throw std::invalid_argument("linear: incompatible shapes x" + shape_string(xs) + " w" +
                                shape_string(ws) + " b" + shape_string(b.shape()));
  }
  const auto n = static_cast<Eigen::Index>(xs[0]);
  const auto in = static_cast<Eigen::Index>(xs[1]);
  const auto outd = static_cast<Eigen::Index>(ws[0]);
  Tensor out(Shape{xs[0], ws[0]});
  {
    ConstMapMat xm(x.value().data().data(), n, in);
    ConstMapMat wm(w.value().data().data(), outd, in);
    MapMat om(out.data().data(), n, outd);
    om.noalias() = xm * wm.transpose();
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < outd; ++j) om(i, j) += b.value()[static_cast<std::size_t>(j)];
    }
  }
  return make_op(std::move(out), {x, w, b}, [=](const Tensor& g, std::vector<Tensor*>& pg) {
    ConstMapMat gm(g.data().data(), n, outd);
    if (pg[0]) {
      ConstMapMat wm(w.value().data().data(), outd, in);
      MapMat dx(pg[0]->data().data(), n, in);
      dx.noalias() += gm * wm;
    }
    if (pg[1]) {
      ConstMapMat xm(x.value().data().data(), n, in);
      MapMat dw(pg[1]->data().data(), outd, in);
      dw.noalias() += gm.transpose() * xm;
    }
    if (pg[2]) {
      for (Eigen::Index j = 0; j < outd; ++j) (*pg[2])[static_cast<std::size_t>(j)] += gm.col(j).sum();
    }
  });
}

Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta, const BatchNormState& state) {
  const auto& xs = x.shape();
  if (xs.size() != 4 || gamma.shape() != Shape{xs[1]} || beta.shape() != Shape{xs[1]}) {
    throw std::invalid_argument("batch_norm2d: incompatible shapes x" + shape_string(xs));
  }
  const std::size_t n = xs[0], c = xs[1], plane = xs[2] * xs[3];
  const double m = static_cast<double>(n * plane);
  std::vector<double> mean(c), invstd(c);
  if (state.training) {
    if (state.updated_mean && state.updated_mean->shape() != Shape{c}) *state.updated_mean = Tensor(Shape{c});
    if (state.updated_var && state.updated_var->shape() != Shape{c}) *state.updated_var = Tensor(Shape{c});
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t b0 = 0; b0 < n; ++b0) {
        const double* src = x.value().data().data() + (b0 * c + ch) * plane;
        for (std::size_t p = 0; p < plane; ++p) s += src[p];
      }
      mean[ch] = s / m;
      double ss = 0.0;
      for (std::size_t b0 = 0; b0 < n; ++b0) {
        const double* src = x.value().data().data() + (b0 * c + ch) * plane;
        for (std::size_t p = 0; p < plane; ++p) ss += (src[p] - mean[ch]) * (src[p] - mean[ch]);
      }
      const double var = ss / m;
      invstd[ch] = 1.0 / std::sqrt(var + state.eps);
      if (state.updated_mean && state.updated_var && state.running_mean && state.running_var) {
        const double unbiased = m > 1.0 ? ss / (m - 1.0) : var;
        (*state.updated_mean)[ch] =
            (1.0 - state.momentum) * (*state.running_mean)[ch] + state.momentum * mean[ch];
        (*state.updated_var)[ch] =
            (1.0 - state.momentum) * (*state.running_var)[ch] + state.momentum * unbiased;
      }
    }
  } else {
    if (!state.running_mean || !state.running_var) {
      throw std::invalid_argument("batch_norm2d: eval mode needs running statistics");
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = (*state.running_mean)[ch];
      invstd[ch] = 1.0 / std::sqrt((*state.running_var)[ch] + state.eps);
    }
  }

  auto xhat = std::make_shared<Tensor>(x.shape());
  Tensor out(x.shape());
  for (std::size_t b0 = 0; b0 < n; ++b0) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b0 * c + ch) * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        const double xh = (x.value()[base + p] - mean[ch]) * invstd[ch];
        (*xhat)[base + p] = xh;
        out[base + p] = gamma.value()[ch] * xh + beta.value()[ch];
      }
    }
  }

  const bool training = state.training;
  return make_op(std::move(out), {x, gamma, beta},
                 [=](const Tensor& g, std::vector<Tensor*>& pg) {
                   for (std::size_t ch = 0; ch < c; ++ch) {
                     double sum_g = 0.0, sum_gx = 0.0;
                     for (std::size_t b0 = 0; b0 < n; ++b0) {
                       const std::size_t base = (b0 * c + ch) * plane;
                       for (std::size_t p = 0; p < plane; ++p) {
                         sum_g += g[base + p];
                         sum_gx += g[base + p] * (*xhat)[base + p];
                       }
                     }
                     if (pg[1]) (*pg[1])[ch] += sum_gx;
                     if (pg[2]) (*pg[2])[ch] += sum_g;
                     if (!pg[0]) continue;
                     const double gm = gamma.value()[ch];
                     for (std::size_t b0 = 0; b0 < n; ++b0) {
                       const std::size_t base = (b0 * c + ch) * plane;
                       for (std::size_t p = 0; p < plane; ++p) {
                         double d;
                         if (training) {
                           d = gm * invstd[ch] / m *
                               (m * g[base + p] - sum_g - (*xhat)[base + p] * sum_gx);
                         } else {
                           d = gm * invstd[ch] * g[base + p];
                         }
                         (*pg[0])[base + p] += d;
                       }
                     }
                   }
                 });
}

}  // namespace stmoe::ag
