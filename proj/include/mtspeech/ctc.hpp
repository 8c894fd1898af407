#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "mtspeech/error.hpp"
#include "mtspeech/graph.hpp"
#include "mtspeech/tensor.hpp"

namespace mtspeech {

constexpr int kBlankId = 0;

inline double neg_inf() { return -std::numeric_limits<double>::infinity(); }

inline double log_add(double a, double b) {
  if (a == neg_inf()) return b;
  if (b == neg_inf()) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::fabs(a - b)));
}

// Shortest emission sequence that can produce the target: every label plus a
// mandatory blank between adjacent repeats.
inline int64_t ctc_min_frames(const std::vector<int>& target) {
  int64_t need = static_cast<int64_t>(target.size());
  for (size_t i = 1; i < target.size(); ++i)
    if (target[i] == target[i - 1]) ++need;
  return need;
}

inline void ctc_validate(int64_t frames, int64_t num_labels, const std::vector<int>& target,
                         bool allow_empty) {
  if (target.empty() && !allow_empty)
    throw InfeasibleError("ctc: empty target sequence rejected");
  for (int tok : target) {
    if (tok == kBlankId)
      throw InfeasibleError("ctc: blank id in target sequence");
    if (tok < 0 || tok >= num_labels)
      throw InfeasibleError("ctc: label " + std::to_string(tok) + " outside vocabulary of " +
                            std::to_string(num_labels));
  }
  const int64_t need = ctc_min_frames(target);
  if (frames < need) {
    throw InfeasibleError("ctc: target needs at least " + std::to_string(need) +
                          " frames, got " + std::to_string(frames));
  }
}

// Forward/backward alignment tables over the blank-interleaved lattice of
// 2|y|+1 states. Both tables include the emission term at their own time
// step, so the terminal cells of either direction give the total
// log-likelihood independently.
template <typename Real>
struct CtcLattice {
  std::vector<int> expanded;       // blank, y0, blank, y1, ..., blank
  std::vector<double> log_alpha;   // T x S
  std::vector<double> log_beta;    // T x S
  int64_t T = 0;
  int64_t S = 0;

  double alpha_total() const {
    double t = log_alpha[(T - 1) * S + (S - 1)];
    if (S >= 2) t = log_add(t, log_alpha[(T - 1) * S + (S - 2)]);
    return t;
  }

  double beta_total() const {
    double t = log_beta[0 * S + 0];
    if (S >= 2) t = log_add(t, log_beta[0 * S + 1]);
    return t;
  }
};

template <typename Real>
CtcLattice<Real> ctc_lattice(const Tensor<Real>& log_probs, const std::vector<int>& target) {
  const int64_t T = log_probs.rows();
  const int64_t U = static_cast<int64_t>(target.size());
  CtcLattice<Real> lat;
  lat.T = T;
  lat.S = 2 * U + 1;
  lat.expanded.resize(static_cast<size_t>(lat.S));
  for (int64_t s = 0; s < lat.S; ++s)
    lat.expanded[static_cast<size_t>(s)] =
        (s % 2 == 1) ? target[static_cast<size_t>((s - 1) / 2)] : kBlankId;
  const int64_t S = lat.S;
  lat.log_alpha.assign(static_cast<size_t>(T * S), neg_inf());
  lat.log_beta.assign(static_cast<size_t>(T * S), neg_inf());
  auto lp = [&](int64_t t, int64_t s) {
    return static_cast<double>(log_probs.at(t, lat.expanded[static_cast<size_t>(s)]));
  };
  auto skip_ok = [&](int64_t s) {
    // From s-2 to s: only onto a label that differs from the previous label.
    return s >= 2 && lat.expanded[static_cast<size_t>(s)] != kBlankId &&
           lat.expanded[static_cast<size_t>(s)] != lat.expanded[static_cast<size_t>(s - 2)];
  };

  lat.log_alpha[0] = lp(0, 0);
  if (S > 1) lat.log_alpha[1] = lp(0, 1);
  for (int64_t t = 1; t < T; ++t) {
    for (int64_t s = 0; s < S; ++s) {
      double acc = lat.log_alpha[(t - 1) * S + s];
      if (s >= 1) acc = log_add(acc, lat.log_alpha[(t - 1) * S + s - 1]);
      if (skip_ok(s)) acc = log_add(acc, lat.log_alpha[(t - 1) * S + s - 2]);
      if (acc != neg_inf()) lat.log_alpha[t * S + s] = acc + lp(t, s);
    }
  }

  lat.log_beta[(T - 1) * S + (S - 1)] = lp(T - 1, S - 1);
  if (S > 1) lat.log_beta[(T - 1) * S + (S - 2)] = lp(T - 1, S - 2);
  for (int64_t t = T - 2; t >= 0; --t) {
    for (int64_t s = 0; s < S; ++s) {
      double acc = lat.log_beta[(t + 1) * S + s];
      if (s + 1 < S) acc = log_add(acc, lat.log_beta[(t + 1) * S + s + 1]);
      if (s + 2 < S && skip_ok(s + 2)) acc = log_add(acc, lat.log_beta[(t + 1) * S + s + 2]);
      if (acc != neg_inf()) lat.log_beta[t * S + s] = acc + lp(t, s);
    }
  }
  return lat;
}

// Negative log-likelihood of the target under per-frame log-distributions,
// marginalized over every blank/repeat alignment. Raw forward value plus
// the gradient with respect to log_probs (for the primitive's backward).
template <typename Real>
double ctc_forward(const Tensor<Real>& log_probs, const std::vector<int>& target,
                   Tensor<Real>* grad_out, bool allow_empty = false) {
  if (log_probs.ndim() != 2)
    throw ShapeError("ctc: log_probs must be [T, labels], got " + log_probs.shape_str());
  ctc_validate(log_probs.rows(), log_probs.cols(), target, allow_empty);
  const int64_t T = log_probs.rows();
  CtcLattice<Real> lat = ctc_lattice(log_probs, target);
  const double total = lat.alpha_total();
  if (!std::isfinite(total))
    throw NumericError("ctc: non-finite path total (all alignments have zero mass)");
  if (grad_out) {
    *grad_out = Tensor<Real>::zeros(log_probs.shape());
    const int64_t S = lat.S;
    for (int64_t t = 0; t < T; ++t) {
      for (int64_t s = 0; s < S; ++s) {
        const double a = lat.log_alpha[t * S + s];
        const double b = lat.log_beta[t * S + s];
        if (a == neg_inf() || b == neg_inf()) continue;
        // alpha and beta both carry the emission at t; divide one out.
        const double lp = static_cast<double>(
            log_probs.at(t, lat.expanded[static_cast<size_t>(s)]));
        const double occ = std::exp(a + b - lp - total);
        grad_out->at(t, lat.expanded[static_cast<size_t>(s)]) -= static_cast<Real>(occ);
      }
    }
  }
  return -total;
}

// Graph primitive: scalar CTC loss differentiable w.r.t. the frame
// log-probabilities.
template <typename Real>
Var ctc_loss(Graph<Real>& g, Var log_probs, const std::vector<int>& target,
             bool allow_empty = false) {
  Tensor<Real> grad;
  const double loss = ctc_forward(g.value(log_probs), target, &grad, allow_empty);
  auto saved = std::make_shared<Tensor<Real>>(std::move(grad));
  Var out;
  out = g.custom("ctc", {log_probs}, Tensor<Real>::scalar(static_cast<Real>(loss)),
                 [log_probs, saved, &out](Graph<Real>&) {});
  // custom() needs the out id inside the closure; rebuild with it known.
  Graph<Real>& gref = g;
  auto backward = [out, log_probs, saved](Graph<Real>& gg) {
    if (!gg.needs_grad(log_probs)) return;
    const Real go = gg.node(out).grad[0];
    auto& gx = gg.grad_acc(log_probs);
    for (int64_t i = 0; i < gx.size(); ++i) gx[i] += go * (*saved)[i];
  };
  gref.node(out).backward = gref.needs_grad(log_probs) ? backward
                                                       : std::function<void(Graph<Real>&)>();
  return out;
}

// Exhaustive-enumeration oracle for the CTC objective: walk every labeling
// path, collapse repeats then strip blanks, and accumulate the probability
// of paths matching the target. Guarded to tiny instances.
template <typename Real>
double ctc_brute_force(const Tensor<Real>& log_probs, const std::vector<int>& target,
                       bool allow_empty = false) {
  if (log_probs.ndim() != 2)
    throw ShapeError("ctc_brute_force: log_probs must be [T, labels]");
  const int64_t T = log_probs.rows();
  const int64_t C = log_probs.cols();
  if (T > 8 || C > 5)
    throw ConfigError("ctc_brute_force: instance above enumeration guard (T <= 8, labels <= 5)");
  ctc_validate(T, C, target, allow_empty);
  std::vector<int> path(static_cast<size_t>(T), 0);
  double total = neg_inf();
  while (true) {
    // collapse: merge adjacent repeats, then drop blanks
    std::vector<int> collapsed;
    int prev = -1;
    for (int64_t t = 0; t < T; ++t) {
      const int c = path[static_cast<size_t>(t)];
      if (c != prev && c != kBlankId) collapsed.push_back(c);
      prev = c;
    }
    if (collapsed == target) {
      double score = 0.0;
      for (int64_t t = 0; t < T; ++t)
        score += static_cast<double>(log_probs.at(t, path[static_cast<size_t>(t)]));
      total = log_add(total, score);
    }
    // next path in odometer order
    int64_t pos = T - 1;
    while (pos >= 0) {
      if (++path[static_cast<size_t>(pos)] < C) break;
      path[static_cast<size_t>(pos)] = 0;
      --pos;
    }
    if (pos < 0) break;
  }
  if (total == neg_inf())
    throw NumericError("ctc_brute_force: no path matches target");
  return -total;
}

}  // namespace mtspeech
