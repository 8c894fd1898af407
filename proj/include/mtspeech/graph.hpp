#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "mtspeech/error.hpp"
#include "mtspeech/gemm.hpp"
#include "mtspeech/tensor.hpp"

namespace mtspeech {

// Handle to a node on a Graph tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape over dense tensors.
//
// Nodes are appended in evaluation order, so the tape order is already
// topological; backward() sweeps it once in reverse. A tape is single-use:
// after backward() it refuses further recording and a second backward().
// Gradients of nodes that never feed the loss stay exactly zero.
template <typename Real>
class Graph {
 public:
  struct Node {
    Tensor<Real> value;
    Tensor<Real> grad;  // allocated on first accumulation
    bool has_grad = false;
    bool requires_grad = false;
    const char* op = "input";
    std::function<void(Graph&)> backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // When set, every forward value is scanned for NaN/Inf and faults are
  // reported with the offending primitive's name.
  bool check_finite = true;

  int num_nodes() const { return static_cast<int>(nodes_.size()); }

  Var input(Tensor<Real> value, bool requires_grad = false) {
    Node n;
    n.value = std::move(value);
    n.value.requires_grad = requires_grad;
    n.requires_grad = requires_grad;
    return push(std::move(n), "input");
  }

  Var param(Tensor<Real> value) { return input(std::move(value), true); }

  Var constant(Tensor<Real> value) { return input(std::move(value), false); }

  const Tensor<Real>& value(Var v) const { return node(v).value; }

  // Gradient after backward(); all-zeros for tensors off the loss path.
  Tensor<Real> grad(Var v) const {
    const Node& n = node(v);
    if (n.has_grad) return n.grad;
    return Tensor<Real>::zeros(n.value.shape());
  }

  bool needs_grad(Var v) const { return node(v).requires_grad; }

  // Accumulation buffer for backward closures.
  Tensor<Real>& grad_acc(Var v) {
    Node& n = node(v);
    if (!n.has_grad) {
      n.grad = Tensor<Real>::zeros(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  // Extension point: record a custom primitive with a precomputed forward
  // value; attach its backward afterwards with set_backward_fn (so the
  // closure can capture the returned handle).
  Var custom(const char* op, const std::vector<Var>& inputs, Tensor<Real> value) {
    return make(std::move(value), inputs, op);
  }

  // No-op when the node does not require gradients.
  void set_backward_fn(Var v, std::function<void(Graph&)> fn) {
    set_backward(v, std::move(fn));
  }

  // ---- elementwise ----

  Var add(Var a, Var b) {
    const auto& ta = value(a);
    const auto& tb = value(b);
    require_same(ta, tb, "add");
    Tensor<Real> out = ta;
    for (int64_t i = 0; i < out.size(); ++i) out[i] += tb[i];
    Var o = make(out, {a, b}, "add");
    set_backward(o, [o, a, b](Graph& g) {
      const auto& go = g.node(o).grad;
      if (g.needs_grad(a)) {
        auto& ga = g.grad_acc(a);
        for (int64_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (g.needs_grad(b)) {
        auto& gb = g.grad_acc(b);
        for (int64_t i = 0; i < go.size(); ++i) gb[i] += go[i];
      }
    });
    return o;
  }

  // Sum of n same-shaped tensors.
  Var add_n(const std::vector<Var>& xs) {
    if (xs.empty()) throw ShapeError("add_n: empty input list");
    Tensor<Real> out = value(xs[0]);
    for (size_t i = 1; i < xs.size(); ++i) {
      const auto& t = value(xs[i]);
      require_same(out, t, "add_n");
      for (int64_t j = 0; j < out.size(); ++j) out[j] += t[j];
    }
    std::vector<Var> ins = xs;
    Var o = make(out, ins, "add_n");
    set_backward(o, [o, ins](Graph& g) {
      const auto& go = g.node(o).grad;
      for (Var x : ins) {
        if (!g.needs_grad(x)) continue;
        auto& gx = g.grad_acc(x);
        for (int64_t i = 0; i < go.size(); ++i) gx[i] += go[i];
      }
    });
    return o;
  }

  // m [N,D] + v [D] broadcast over rows.
  Var add_rowvec(Var m, Var v) {
    const auto& tm = value(m);
    const auto& tv = value(v);
    if (tm.ndim() != 2 || tv.ndim() != 1 || tm.cols() != tv.dim(0)) {
      throw ShapeError("add_rowvec: " + tm.shape_str() + " vs " + tv.shape_str());
    }
    Tensor<Real> out = tm;
    const int64_t N = tm.rows(), D = tm.cols();
    for (int64_t r = 0; r < N; ++r)
      for (int64_t c = 0; c < D; ++c) out.at(r, c) += tv[c];
    Var o = make(out, {m, v}, "add_rowvec");
    set_backward(o, [o, m, v, N, D](Graph& g) {
      const auto& go = g.node(o).grad;
      if (g.needs_grad(m)) {
        auto& gm = g.grad_acc(m);
        for (int64_t i = 0; i < go.size(); ++i) gm[i] += go[i];
      }
      if (g.needs_grad(v)) {
        auto& gv = g.grad_acc(v);
        for (int64_t r = 0; r < N; ++r)
          for (int64_t c = 0; c < D; ++c) gv[c] += go[r * D + c];
      }
    });
    return o;
  }

  Var mul(Var a, Var b) {
    const auto& ta = value(a);
    const auto& tb = value(b);
    require_same(ta, tb, "mul");
    Tensor<Real> out = ta;
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= tb[i];
    Var o = make(out, {a, b}, "mul");
    set_backward(o, [o, a, b](Graph& g) {
      const auto& go = g.node(o).grad;
      const auto& ta = g.value(a);
      const auto& tb = g.value(b);
      if (g.needs_grad(a)) {
        auto& ga = g.grad_acc(a);
        for (int64_t i = 0; i < go.size(); ++i) ga[i] += go[i] * tb[i];
      }
      if (g.needs_grad(b)) {
        auto& gb = g.grad_acc(b);
        for (int64_t i = 0; i < go.size(); ++i) gb[i] += go[i] * ta[i];
      }
    });
    return o;
  }

  Var scale(Var a, Real s) {
    Tensor<Real> out = value(a);
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= s;
    Var o = make(out, {a}, "scale");
    set_backward(o, [o, a, s](Graph& g) {
      const auto& go = g.node(o).grad;
      if (g.needs_grad(a)) {
        auto& ga = g.grad_acc(a);
        for (int64_t i = 0; i < go.size(); ++i) ga[i] += go[i] * s;
      }
    });
    return o;
  }

  // ---- linear algebra ----

  Var matmul(Var a, Var b) { return matmul_impl(a, b, false, "matmul"); }

  // a [M,K] x b [N,K]^T
  Var matmul_nt(Var a, Var b) { return matmul_impl(a, b, true, "matmul_nt"); }

  // ---- activations / normalization ----

  Var gelu(Var x) {
    const auto& tx = value(x);
    Tensor<Real> out = tx;
    for (int64_t i = 0; i < out.size(); ++i) {
      const double v = static_cast<double>(tx[i]);
      out[i] = static_cast<Real>(0.5 * v * (1.0 + std::erf(v * M_SQRT1_2)));
    }
    Var o = make(out, {x}, "gelu");
    set_backward(o, [o, x](Graph& g) {
      if (!g.needs_grad(x)) return;
      const auto& go = g.node(o).grad;
      const auto& tx = g.value(x);
      auto& gx = g.grad_acc(x);
      constexpr double inv_sqrt2pi = 0.3989422804014327;
      for (int64_t i = 0; i < go.size(); ++i) {
        const double v = static_cast<double>(tx[i]);
        const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
        gx[i] += go[i] * static_cast<Real>(cdf + v * pdf);
      }
    });
    return o;
  }

  // Row-wise layer normalization with affine parameters.
  Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
    const auto& tx = value(x);
    const auto& tg = value(gamma);
    const auto& tb = value(beta);
    if (tx.ndim() != 2 || tg.ndim() != 1 || tb.ndim() != 1 || tg.dim(0) != tx.cols() ||
        tb.dim(0) != tx.cols()) {
      throw ShapeError("layer_norm: " + tx.shape_str() + ", gamma " + tg.shape_str() +
                       ", beta " + tb.shape_str());
    }
    const int64_t N = tx.rows(), D = tx.cols();
    Tensor<Real> out({N, D});
    auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(N * D));
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(N));
    for (int64_t r = 0; r < N; ++r) {
      double mean = 0.0, var = 0.0;
      for (int64_t c = 0; c < D; ++c) mean += static_cast<double>(tx.at(r, c));
      mean /= static_cast<double>(D);
      for (int64_t c = 0; c < D; ++c) {
        const double d = static_cast<double>(tx.at(r, c)) - mean;
        var += d * d;
      }
      var /= static_cast<double>(D);
      const double istd = 1.0 / std::sqrt(var + eps);
      (*inv_std)[static_cast<size_t>(r)] = istd;
      for (int64_t c = 0; c < D; ++c) {
        const double xh = (static_cast<double>(tx.at(r, c)) - mean) * istd;
        (*xhat)[static_cast<size_t>(r * D + c)] = xh;
        out.at(r, c) = static_cast<Real>(xh * static_cast<double>(tg[c]) + static_cast<double>(tb[c]));
      }
    }
    Var o = make(out, {x, gamma, beta}, "layer_norm");
    set_backward(o, [o, x, gamma, beta, N, D, xhat, inv_std](Graph& g) {
      const auto& go = g.node(o).grad;
      const auto& tg = g.value(gamma);
      if (g.needs_grad(gamma)) {
        auto& gg = g.grad_acc(gamma);
        for (int64_t r = 0; r < N; ++r)
          for (int64_t c = 0; c < D; ++c)
            gg[c] += go[r * D + c] * static_cast<Real>((*xhat)[static_cast<size_t>(r * D + c)]);
      }
      if (g.needs_grad(beta)) {
        auto& gb = g.grad_acc(beta);
        for (int64_t r = 0; r < N; ++r)
          for (int64_t c = 0; c < D; ++c) gb[c] += go[r * D + c];
      }
      if (g.needs_grad(x)) {
        auto& gx = g.grad_acc(x);
        for (int64_t r = 0; r < N; ++r) {
          double sum_gy = 0.0, sum_gy_xh = 0.0;
          for (int64_t c = 0; c < D; ++c) {
            const double gy = static_cast<double>(go[r * D + c]) * static_cast<double>(tg[c]);
            sum_gy += gy;
            sum_gy_xh += gy * (*xhat)[static_cast<size_t>(r * D + c)];
          }
          const double inv_d = 1.0 / static_cast<double>(D);
          const double istd = (*inv_std)[static_cast<size_t>(r)];
          for (int64_t c = 0; c < D; ++c) {
            const double gy = static_cast<double>(go[r * D + c]) * static_cast<double>(tg[c]);
            const double xh = (*xhat)[static_cast<size_t>(r * D + c)];
            gx[r * D + c] +=
                static_cast<Real>((gy - inv_d * sum_gy - xh * inv_d * sum_gy_xh) * istd);
          }
        }
      }
    });
    return o;
  }

  Var softmax(Var x) { return softmax_impl(x, false); }
  Var log_softmax(Var x) { return softmax_impl(x, true); }

  // x * log(x) elementwise with 0 log 0 := 0.
  Var xlogx(Var x) {
    const auto& tx = value(x);
    Tensor<Real> out = tx;
    for (int64_t i = 0; i < out.size(); ++i) {
      const double v = static_cast<double>(tx[i]);
      out[i] = v > 0.0 ? static_cast<Real>(v * std::log(v)) : Real(0);
    }
    Var o = make(out, {x}, "xlogx");
    set_backward(o, [o, x](Graph& g) {
      if (!g.needs_grad(x)) return;
      const auto& go = g.node(o).grad;
      const auto& tx = g.value(x);
      auto& gx = g.grad_acc(x);
      for (int64_t i = 0; i < go.size(); ++i) {
        const double v = static_cast<double>(tx[i]);
        if (v > 0.0) gx[i] += go[i] * static_cast<Real>(std::log(v) + 1.0);
      }
    });
    return o;
  }

  // ---- reductions ----

  Var sum(Var x) { return reduce_impl(x, false); }
  Var mean(Var x) { return reduce_impl(x, true); }

  // Mean over axis 0 of a [N,D] tensor.
  Var mean_rows(Var x) {
    const auto& tx = value(x);
    if (tx.ndim() != 2) throw ShapeError("mean_rows: want 2-D, got " + tx.shape_str());
    const int64_t N = tx.rows(), D = tx.cols();
    Tensor<Real> out({D});
    for (int64_t c = 0; c < D; ++c) {
      double acc = 0.0;
      for (int64_t r = 0; r < N; ++r) acc += static_cast<double>(tx.at(r, c));
      out[c] = static_cast<Real>(acc / static_cast<double>(N));
    }
    Var o = make(out, {x}, "mean_rows");
    set_backward(o, [o, x, N, D](Graph& g) {
      if (!g.needs_grad(x)) return;
      const auto& go = g.node(o).grad;
      auto& gx = g.grad_acc(x);
      const Real inv_n = Real(1) / static_cast<Real>(N);
      for (int64_t r = 0; r < N; ++r)
        for (int64_t c = 0; c < D; ++c) gx[r * D + c] += go[c] * inv_n;
    });
    return o;
  }

  // ---- similarity ----

  // Row-wise cosine similarity of two [N,D] tensors -> [N].
  Var cosine_rows(Var a, Var b) {
    const auto& ta = value(a);
    const auto& tb = value(b);
    if (ta.ndim() != 2 || !ta.same_shape(tb)) {
      throw ShapeError("cosine_rows: " + ta.shape_str() + " vs " + tb.shape_str());
    }
    const int64_t N = ta.rows(), D = ta.cols();
    Tensor<Real> out({N});
    for (int64_t r = 0; r < N; ++r) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (int64_t c = 0; c < D; ++c) {
        const double x = static_cast<double>(ta.at(r, c));
        const double y = static_cast<double>(tb.at(r, c));
        dot += x * y;
        na += x * x;
        nb += y * y;
      }
      const double denom = std::sqrt(na) * std::sqrt(nb);
      out[r] = static_cast<Real>(denom > 0.0 ? dot / denom : 0.0);
    }
    Var o = make(out, {a, b}, "cosine_rows");
    set_backward(o, [o, a, b, N, D](Graph& g) {
      const auto& go = g.node(o).grad;
      const auto& ta = g.value(a);
      const auto& tb = g.value(b);
      const bool na_ = g.needs_grad(a), nb_ = g.needs_grad(b);
      if (!na_ && !nb_) return;
      for (int64_t r = 0; r < N; ++r) {
        double dot = 0.0, qa = 0.0, qb = 0.0;
        for (int64_t c = 0; c < D; ++c) {
          const double x = static_cast<double>(ta.at(r, c));
          const double y = static_cast<double>(tb.at(r, c));
          dot += x * y;
          qa += x * x;
          qb += y * y;
        }
        const double norm_a = std::sqrt(qa), norm_b = std::sqrt(qb);
        if (norm_a == 0.0 || norm_b == 0.0) continue;
        const double inv = 1.0 / (norm_a * norm_b);
        const double cosv = dot * inv;
        const double gr = static_cast<double>(go[r]);
        for (int64_t c = 0; c < D; ++c) {
          const double x = static_cast<double>(ta.at(r, c));
          const double y = static_cast<double>(tb.at(r, c));
          if (na_) g.grad_acc(a)[r * D + c] += static_cast<Real>(gr * (y * inv - cosv * x / qa));
          if (nb_) g.grad_acc(b)[r * D + c] += static_cast<Real>(gr * (x * inv - cosv * y / qb));
        }
      }
    });
    return o;
  }

  // ---- selection / layout ----

  // Gather rows (with repetition) from a [N,D] tensor.
  Var gather_rows(Var x, std::vector<int64_t> rows) {
    const auto& tx = value(x);
    if (tx.ndim() != 2) throw ShapeError("gather_rows: want 2-D, got " + tx.shape_str());
    const int64_t N = tx.rows(), D = tx.cols();
    for (int64_t r : rows) {
      if (r < 0 || r >= N) throw ShapeError("gather_rows: index " + std::to_string(r) +
                                            " out of range for " + tx.shape_str());
    }
    const int64_t n = static_cast<int64_t>(rows.size());
    Tensor<Real> out({n, D});
    for (int64_t i = 0; i < n; ++i)
      for (int64_t c = 0; c < D; ++c) out.at(i, c) = tx.at(rows[static_cast<size_t>(i)], c);
    auto idx = std::make_shared<std::vector<int64_t>>(std::move(rows));
    Var o = make(out, {x}, "gather_rows");
    set_backward(o, [o, x, idx, D](Graph& g) {
      if (!g.needs_grad(x)) return;
      const auto& go = g.node(o).grad;
      auto& gx = g.grad_acc(x);
      for (size_t i = 0; i < idx->size(); ++i)
        for (int64_t c = 0; c < D; ++c)
          gx[(*idx)[i] * D + c] += go[static_cast<int64_t>(i) * D + c];
    });
    return o;
  }

  // Single element by flat index -> scalar.
  Var pick(Var x, int64_t index) {
    const auto& tx = value(x);
    if (index < 0 || index >= tx.size()) {
      throw ShapeError("pick: index " + std::to_string(index) + " out of range for " +
                       tx.shape_str());
    }
    Var o = make(Tensor<Real>::scalar(tx[index]), {x}, "pick");
    set_backward(o, [o, x, index](Graph& g) {
      if (!g.needs_grad(x)) return;
      g.grad_acc(x)[index] += g.node(o).grad[0];
    });
    return o;
  }

  Var slice_cols(Var x, int64_t begin, int64_t len) {
    const auto& tx = value(x);
    if (tx.ndim() != 2 || begin < 0 || len <= 0 || begin + len > tx.cols()) {
      throw ShapeError("slice_cols: [" + std::to_string(begin) + "," +
                       std::to_string(begin + len) + ") of " + tx.shape_str());
    }
    const int64_t N = tx.rows(), D = tx.cols();
    Tensor<Real> out({N, len});
    for (int64_t r = 0; r < N; ++r)
      for (int64_t c = 0; c < len; ++c) out.at(r, c) = tx.at(r, begin + c);
    Var o = make(out, {x}, "slice_cols");
    set_backward(o, [o, x, begin, len, D](Graph& g) {
      if (!g.needs_grad(x)) return;
      const auto& go = g.node(o).grad;
      auto& gx = g.grad_acc(x);
      const int64_t N = go.rows();
      for (int64_t r = 0; r < N; ++r)
        for (int64_t c = 0; c < len; ++c) gx[r * D + begin + c] += go[r * len + c];
    });
    return o;
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty input list");
    const int64_t N = value(parts[0]).rows();
    int64_t D = 0;
    for (Var p : parts) {
      const auto& t = value(p);
      if (t.ndim() != 2 || t.rows() != N)
        throw ShapeError("concat_cols: row mismatch at " + t.shape_str());
      D += t.cols();
    }
    Tensor<Real> out({N, D});
    int64_t off = 0;
    for (Var p : parts) {
      const auto& t = value(p);
      for (int64_t r = 0; r < N; ++r)
        for (int64_t c = 0; c < t.cols(); ++c) out.at(r, off + c) = t.at(r, c);
      off += t.cols();
    }
    std::vector<Var> ins = parts;
    Var o = make(out, ins, "concat_cols");
    set_backward(o, [o, ins, N, D](Graph& g) {
      const auto& go = g.node(o).grad;
      int64_t off = 0;
      for (Var p : ins) {
        const int64_t pc = g.value(p).cols();
        if (g.needs_grad(p)) {
          auto& gp = g.grad_acc(p);
          for (int64_t r = 0; r < N; ++r)
            for (int64_t c = 0; c < pc; ++c) gp[r * pc + c] += go[r * D + off + c];
        }
        off += pc;
      }
    });
    return o;
  }

  // Forward takes the given hard value; backward routes the gradient to the
  // soft input unchanged. This is the straight-through surrogate: the
  // backward deviates from the true (zero a.e.) Jacobian by construction.
  Var straight_through(Var soft, Tensor<Real> hard) {
    const auto& ts = value(soft);
    if (!ts.same_shape(hard)) {
      throw ShapeError("straight_through: soft " + ts.shape_str() + " vs hard " +
                       hard.shape_str());
    }
    Var o = make(std::move(hard), {soft}, "straight_through");
    set_backward(o, [o, soft](Graph& g) {
      if (!g.needs_grad(soft)) return;
      const auto& go = g.node(o).grad;
      auto& gs = g.grad_acc(soft);
      for (int64_t i = 0; i < go.size(); ++i) gs[i] += go[i];
    });
    return o;
  }

  // Per-row selection between two [N,D] tensors: row t of the output is
  // bitwise row t of b where take_b[t], else row t of a.
  Var select_rows(Var a, Var b, std::vector<uint8_t> take_b) {
    const auto& ta = value(a);
    const auto& tb = value(b);
    if (ta.ndim() != 2 || !ta.same_shape(tb) ||
        static_cast<int64_t>(take_b.size()) != ta.rows()) {
      throw ShapeError("select_rows: " + ta.shape_str() + " vs " + tb.shape_str() +
                       ", flags " + std::to_string(take_b.size()));
    }
    const int64_t N = ta.rows(), D = ta.cols();
    Tensor<Real> out({N, D});
    for (int64_t r = 0; r < N; ++r) {
      const auto& src = take_b[static_cast<size_t>(r)] ? tb : ta;
      for (int64_t c = 0; c < D; ++c) out.at(r, c) = src.at(r, c);
    }
    auto flags = std::make_shared<std::vector<uint8_t>>(std::move(take_b));
    Var o = make(out, {a, b}, "select_rows");
    set_backward(o, [o, a, b, flags, D](Graph& g) {
      const auto& go = g.node(o).grad;
      const int64_t N = go.rows();
      for (int64_t r = 0; r < N; ++r) {
        const Var dst = (*flags)[static_cast<size_t>(r)] ? b : a;
        if (!g.needs_grad(dst)) continue;
        auto& gd = g.grad_acc(dst);
        for (int64_t c = 0; c < D; ++c) gd[r * D + c] += go[r * D + c];
      }
    });
    return o;
  }

  // 1-D convolution over a time-major [L, C_in] input with weight
  // [C_out, (C_in/groups)*kernel] and bias [C_out]; zero padding, "valid"
  // output length floor((L + pad_l + pad_r - kernel)/stride) + 1.
  Var conv1d(Var x, Var w, Var b, int kernel, int stride, int groups = 1, int pad_l = 0,
             int pad_r = 0) {
    const auto& tx = value(x);
    const auto& tw = value(w);
    const auto& tb = value(b);
    if (tx.ndim() != 2 || tw.ndim() != 2 || tb.ndim() != 1) {
      throw ShapeError("conv1d: x " + tx.shape_str() + ", w " + tw.shape_str() + ", b " +
                       tb.shape_str());
    }
    const int64_t L = tx.rows(), Cin = tx.cols(), Cout = tw.rows();
    if (groups <= 0 || Cin % groups != 0 || Cout % groups != 0)
      throw ShapeError("conv1d: channels " + std::to_string(Cin) + "->" +
                       std::to_string(Cout) + " not divisible by groups " +
                       std::to_string(groups));
    const int64_t cin_g = Cin / groups, cout_g = Cout / groups;
    if (tw.cols() != cin_g * kernel || tb.dim(0) != Cout)
      throw ShapeError("conv1d: weight " + tw.shape_str() + " wants (" +
                       std::to_string(Cout) + "x" + std::to_string(cin_g * kernel) + ")");
    const int64_t Lp = L + pad_l + pad_r;
    if (Lp < kernel)
      throw ShapeError("conv1d: input length " + std::to_string(L) + " shorter than kernel " +
                       std::to_string(kernel));
    const int64_t Lout = (Lp - kernel) / stride + 1;

    // im2col per group, cached for the backward pass.
    auto patches = std::make_shared<std::vector<Tensor<Real>>>();
    patches->reserve(static_cast<size_t>(groups));
    Tensor<Real> out({Lout, Cout});
    std::vector<Real> outg(static_cast<size_t>(Lout * cout_g));
    for (int g = 0; g < groups; ++g) {
      Tensor<Real> patch({Lout, cin_g * static_cast<int64_t>(kernel)});
      for (int64_t t = 0; t < Lout; ++t) {
        const int64_t start = t * stride - pad_l;
        for (int64_t ci = 0; ci < cin_g; ++ci) {
          for (int64_t j = 0; j < kernel; ++j) {
            const int64_t src = start + j;
            patch.at(t, ci * kernel + j) =
                (src >= 0 && src < L) ? tx.at(src, g * cin_g + ci) : Real(0);
          }
        }
      }
      gemm<Real>(false, true, Lout, cout_g, cin_g * kernel, Real(1), patch.data(),
                 tw.data() + g * cout_g * cin_g * kernel, Real(0), outg.data());
      for (int64_t t = 0; t < Lout; ++t)
        for (int64_t co = 0; co < cout_g; ++co)
          out.at(t, g * cout_g + co) = outg[static_cast<size_t>(t * cout_g + co)] +
                                       tb[g * cout_g + co];
      patches->push_back(std::move(patch));
    }
    Var o = make(out, {x, w, b}, "conv1d");
    set_backward(o, [o, x, w, b, kernel, stride, groups, pad_l, L, Cin, Cout, cin_g, cout_g,
                     Lout, patches](Graph& g) {
      const auto& go = g.node(o).grad;
      std::vector<Real> gslice(static_cast<size_t>(Lout * cout_g));
      std::vector<Real> gpatch(static_cast<size_t>(Lout * cin_g * kernel));
      for (int gr = 0; gr < groups; ++gr) {
        for (int64_t t = 0; t < Lout; ++t)
          for (int64_t co = 0; co < cout_g; ++co)
            gslice[static_cast<size_t>(t * cout_g + co)] = go[t * Cout + gr * cout_g + co];
        if (g.needs_grad(b)) {
          auto& gb = g.grad_acc(b);
          for (int64_t t = 0; t < Lout; ++t)
            for (int64_t co = 0; co < cout_g; ++co)
              gb[gr * cout_g + co] += gslice[static_cast<size_t>(t * cout_g + co)];
        }
        if (g.needs_grad(w)) {
          auto& gw = g.grad_acc(w);
          gemm<Real>(true, false, cout_g, cin_g * kernel, Lout, Real(1), gslice.data(),
                     (*patches)[static_cast<size_t>(gr)].data(), Real(1),
                     gw.data() + gr * cout_g * cin_g * kernel);
        }
        if (g.needs_grad(x)) {
          const auto& tw = g.value(w);
          gemm<Real>(false, false, Lout, cin_g * kernel, cout_g, Real(1), gslice.data(),
                     tw.data() + gr * cout_g * cin_g * kernel, Real(0), gpatch.data());
          auto& gx = g.grad_acc(x);
          for (int64_t t = 0; t < Lout; ++t) {
            const int64_t start = t * stride - pad_l;
            for (int64_t ci = 0; ci < cin_g; ++ci)
              for (int64_t j = 0; j < kernel; ++j) {
                const int64_t src = start + j;
                if (src >= 0 && src < L)
                  gx[src * Cin + gr * cin_g + ci] +=
                      gpatch[static_cast<size_t>((t * cin_g + ci) * kernel + j)];
              }
          }
        }
      }
    });
    return o;
  }

  // ---- backward ----

  void backward(Var loss) {
    if (consumed_) throw Error("backward: tape already consumed (single-use per step)");
    const Node& ln = node(loss);
    if (ln.value.size() != 1) {
      throw ShapeError("backward: loss must be scalar, got " + ln.value.shape_str());
    }
    if (check_finite && !ln.value.all_finite())
      throw NumericError("backward: loss is not finite");
    consumed_ = true;
    grad_acc(loss)[0] = Real(1);
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (!n.requires_grad || !n.has_grad || !n.backward) continue;
      if (check_finite && !n.grad.all_finite()) {
        throw NumericError(std::string("backward: non-finite gradient at node ") + n.op +
                           "#" + std::to_string(id));
      }
      n.backward(*this);
    }
  }

  bool consumed() const { return consumed_; }

  Node& node(Var v) { return nodes_.at(static_cast<size_t>(v.id)); }
  const Node& node(Var v) const { return nodes_.at(static_cast<size_t>(v.id)); }

 private:
  Var push(Node n, const char* op) {
    if (consumed_) throw Error("record: tape already consumed (single-use per step)");
    n.op = op;
    if (check_finite && !n.value.all_finite()) {
      throw NumericError(std::string("forward: non-finite value from primitive ") + op +
                         "#" + std::to_string(nodes_.size()));
    }
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var make(Tensor<Real> value, const std::vector<Var>& inputs, const char* op) {
    Node n;
    n.value = std::move(value);
    for (Var in : inputs) n.requires_grad = n.requires_grad || node(in).requires_grad;
    return push(std::move(n), op);
  }

  void set_backward(Var v, std::function<void(Graph&)> fn) {
    Node& n = node(v);
    if (n.requires_grad) n.backward = std::move(fn);
  }

  void require_same(const Tensor<Real>& a, const Tensor<Real>& b, const char* op) {
    if (!a.same_shape(b)) {
      throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                       b.shape_str());
    }
  }

  Var matmul_impl(Var a, Var b, bool nt, const char* op) {
    const auto& ta = value(a);
    const auto& tb = value(b);
    if (ta.ndim() != 2 || tb.ndim() != 2)
      throw ShapeError(std::string(op) + ": want 2-D, got " + ta.shape_str() + " and " +
                       tb.shape_str());
    const int64_t M = ta.rows(), K = ta.cols();
    const int64_t N = nt ? tb.rows() : tb.cols();
    const int64_t Kb = nt ? tb.cols() : tb.rows();
    if (K != Kb)
      throw ShapeError(std::string(op) + ": inner dims " + ta.shape_str() + " vs " +
                       tb.shape_str());
    Tensor<Real> out({M, N});
    gemm<Real>(false, nt, M, N, K, Real(1), ta.data(), tb.data(), Real(0), out.data());
    Var o = make(out, {a, b}, op);
    set_backward(o, [o, a, b, nt, M, N, K](Graph& g) {
      const auto& go = g.node(o).grad;
      const auto& ta = g.value(a);
      const auto& tb = g.value(b);
      if (g.needs_grad(a)) {
        // dA = G * B^T (plain) or G * B (nt)
        gemm<Real>(false, !nt, M, K, N, Real(1), go.data(), tb.data(), Real(1),
                   g.grad_acc(a).data());
      }
      if (g.needs_grad(b)) {
        if (nt) {
          // dB = G^T * A
          gemm<Real>(true, false, N, K, M, Real(1), go.data(), ta.data(), Real(1),
                     g.grad_acc(b).data());
        } else {
          // dB = A^T * G
          gemm<Real>(true, false, K, N, M, Real(1), ta.data(), go.data(), Real(1),
                     g.grad_acc(b).data());
        }
      }
    });
    return o;
  }

  Var softmax_impl(Var x, bool log_form) {
    const auto& tx = value(x);
    if (tx.ndim() < 1) throw ShapeError("softmax: scalar input");
    const int64_t D = tx.dim(tx.ndim() - 1);
    const int64_t N = tx.size() / D;
    Tensor<Real> out(tx.shape());
    for (int64_t r = 0; r < N; ++r) {
      const Real* row = tx.data() + r * D;
      Real* orow = out.data() + r * D;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t c = 0; c < D; ++c) mx = std::max(mx, static_cast<double>(row[c]));
      double denom = 0.0;
      for (int64_t c = 0; c < D; ++c) denom += std::exp(static_cast<double>(row[c]) - mx);
      const double lse = mx + std::log(denom);
      for (int64_t c = 0; c < D; ++c) {
        const double z = static_cast<double>(row[c]) - lse;
        orow[c] = static_cast<Real>(log_form ? z : std::exp(z));
      }
    }
    Var o = make(out, {x}, log_form ? "log_softmax" : "softmax");
    set_backward(o, [o, x, N, D, log_form](Graph& g) {
      if (!g.needs_grad(x)) return;
      const auto& go = g.node(o).grad;
      const auto& to = g.value(o);
      auto& gx = g.grad_acc(x);
      for (int64_t r = 0; r < N; ++r) {
        double dot = 0.0;
        for (int64_t c = 0; c < D; ++c) dot += static_cast<double>(go[r * D + c]) *
            (log_form ? 1.0 : static_cast<double>(to[r * D + c]));
        for (int64_t c = 0; c < D; ++c) {
          const double y = static_cast<double>(to[r * D + c]);
          const double gi = static_cast<double>(go[r * D + c]);
          gx[r * D + c] += static_cast<Real>(log_form ? gi - std::exp(y) * dot
                                                      : y * (gi - dot));
        }
      }
    });
    return o;
  }

  Var reduce_impl(Var x, bool take_mean) {
    const auto& tx = value(x);
    double acc = 0.0;
    for (int64_t i = 0; i < tx.size(); ++i) acc += static_cast<double>(tx[i]);
    const double denom = take_mean ? static_cast<double>(tx.size()) : 1.0;
    Var o = make(Tensor<Real>::scalar(static_cast<Real>(acc / denom)), {x},
                 take_mean ? "mean" : "sum");
    set_backward(o, [o, x, denom](Graph& g) {
      if (!g.needs_grad(x)) return;
      const Real go = g.node(o).grad[0];
      auto& gx = g.grad_acc(x);
      const Real s = go / static_cast<Real>(denom);
      for (int64_t i = 0; i < gx.size(); ++i) gx[i] += s;
    });
    return o;
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

}  // namespace mtspeech
