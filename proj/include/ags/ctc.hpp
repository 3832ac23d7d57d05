#pragma once

// Connectionist temporal classification over per-frame log-probabilities.
//
// Symbol 0 is the blank; labels use ids 1..V. The lattice runs over the
// blank-interleaved sequence [0, l1, 0, l2, ..., lN, 0] of length 2N+1.
// Both alpha and beta include the emission of their own frame, so
//   alpha(t, s) + beta(t, s) - logp(t, aug[s])
// is the log mass of all paths through state s at frame t.

#include "ags/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ags {

using LabelSeq = std::vector<int>;

constexpr int kBlank = 0;

class InfeasibleAlignment : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// log(0). Every lattice routine treats it as an absorbing zero, never as a
/// number to subtract from.
template <typename Scalar>
constexpr Scalar log_zero() {
  return -std::numeric_limits<Scalar>::infinity();
}

template <typename Scalar>
Scalar log_add(Scalar a, Scalar b) {
  if (a == log_zero<Scalar>()) return b;
  if (b == log_zero<Scalar>()) return a;
  if (a < b) std::swap(a, b);
  return a + std::log1p(std::exp(b - a));
}

/// Fewest frames any alignment of `labels` needs: one per label plus a
/// separating blank between each pair of equal neighbours.
inline Index ctc_min_frames(std::span<const int> labels) {
  Index need = static_cast<Index>(labels.size());
  for (std::size_t i = 1; i < labels.size(); ++i)
    if (labels[i] == labels[i - 1]) ++need;
  return need;
}

/// Merge adjacent duplicates, then drop blanks.
inline LabelSeq collapse(std::span<const int> path) {
  LabelSeq out;
  int last = -1;
  for (int id : path) {
    if (id != last && id != kBlank) out.push_back(id);
    last = id;
  }
  return out;
}

template <typename Scalar>
struct CtcLattice {
  std::vector<int> augmented;
  Matrix<Scalar> log_alpha;  // T x (2N+1)
  Matrix<Scalar> log_beta;   // T x (2N+1)
  Scalar log_likelihood = log_zero<Scalar>();
};

namespace detail {

template <typename Scalar>
void check_ctc_inputs(const Matrix<Scalar>& logprobs, std::span<const int> labels) {
  if (logprobs.rows() < 1) throw DimensionError("ctc: need at least one frame");
  if (logprobs.cols() < 2) throw DimensionError("ctc: need a blank plus at least one symbol");
  const int vocab = static_cast<int>(logprobs.cols()) - 1;
  for (int id : labels)
    if (id < 1 || id > vocab)
      throw std::invalid_argument("ctc: label id " + std::to_string(id) + " outside 1.." + std::to_string(vocab));
  const Index need = ctc_min_frames(labels);
  if (need > logprobs.rows())
    throw InfeasibleAlignment("ctc: " + std::to_string(labels.size()) + " labels need at least " +
                              std::to_string(need) + " frames, got " + std::to_string(logprobs.rows()));
}

}  // namespace detail

template <typename Scalar>
CtcLattice<Scalar> ctc_lattice(const Matrix<Scalar>& logprobs, std::span<const int> labels) {
  detail::check_ctc_inputs(logprobs, labels);
  CtcLattice<Scalar> lat;
  lat.augmented.assign(2 * labels.size() + 1, kBlank);
  for (std::size_t i = 0; i < labels.size(); ++i) lat.augmented[2 * i + 1] = labels[i];
  const auto& aug = lat.augmented;
  const Index frames = logprobs.rows();
  const Index states = static_cast<Index>(aug.size());
  const Scalar zero = log_zero<Scalar>();

  // A label state may be entered from two states back when it differs from
  // the label there (skipping the blank between them).
  auto can_skip = [&](Index s) { return s >= 2 && aug[s] != kBlank && aug[s] != aug[s - 2]; };

  lat.log_alpha = Matrix<Scalar>::Constant(frames, states, zero);
  lat.log_alpha(0, 0) = logprobs(0, aug[0]);
  if (states > 1) lat.log_alpha(0, 1) = logprobs(0, aug[1]);
  for (Index t = 1; t < frames; ++t)
    for (Index s = 0; s < states; ++s) {
      Scalar acc = lat.log_alpha(t - 1, s);
      if (s >= 1) acc = log_add(acc, lat.log_alpha(t - 1, s - 1));
      if (can_skip(s)) acc = log_add(acc, lat.log_alpha(t - 1, s - 2));
      lat.log_alpha(t, s) = acc == zero ? zero : acc + logprobs(t, aug[s]);
    }

  // Mirror image: a state may exit two states forward when that label
  // differs from its own.
  auto can_skip_forward = [&](Index s) { return s + 2 < states && aug[s] != kBlank && aug[s] != aug[s + 2]; };
  lat.log_beta = Matrix<Scalar>::Constant(frames, states, zero);
  lat.log_beta(frames - 1, states - 1) = logprobs(frames - 1, aug[states - 1]);
  if (states > 1) lat.log_beta(frames - 1, states - 2) = logprobs(frames - 1, aug[states - 2]);
  for (Index t = frames - 2; t >= 0; --t)
    for (Index s = 0; s < states; ++s) {
      Scalar acc = lat.log_beta(t + 1, s);
      if (s + 1 < states) acc = log_add(acc, lat.log_beta(t + 1, s + 1));
      if (can_skip_forward(s)) acc = log_add(acc, lat.log_beta(t + 1, s + 2));
      lat.log_beta(t, s) = acc == zero ? zero : acc + logprobs(t, aug[s]);
    }

  Scalar total = lat.log_alpha(frames - 1, states - 1);
  if (states > 1) total = log_add(total, lat.log_alpha(frames - 1, states - 2));
  if (total == zero) throw InfeasibleAlignment("ctc: no alignment has nonzero probability");
  lat.log_likelihood = total;
  return lat;
}

/// -log p(labels | frames), summed over every path that collapses to `labels`.
template <typename Scalar>
Scalar ctc_loss(const Matrix<Scalar>& logprobs, std::span<const int> labels) {
  return -ctc_lattice(logprobs, labels).log_likelihood;
}

/// Gradient of ctc_loss with respect to the pre-softmax logits that produced
/// `logprobs`: softmax output minus the lattice posterior of each symbol.
template <typename Scalar>
Matrix<Scalar> ctc_grad(const Matrix<Scalar>& logprobs, std::span<const int> labels) {
  const auto lat = ctc_lattice(logprobs, labels);
  const Index frames = logprobs.rows();
  Matrix<Scalar> occupancy = Matrix<Scalar>::Zero(frames, logprobs.cols());
  for (Index t = 0; t < frames; ++t)
    for (Index s = 0; s < static_cast<Index>(lat.augmented.size()); ++s) {
      const Scalar a = lat.log_alpha(t, s), b = lat.log_beta(t, s);
      if (a == log_zero<Scalar>() || b == log_zero<Scalar>()) continue;
      const int k = lat.augmented[s];
      occupancy(t, k) += std::exp(a + b - logprobs(t, k) - lat.log_likelihood);
    }
  return logprobs.array().exp().matrix() - occupancy;
}

/// Exhaustive reference: sums the probability of every one of the (V+1)^T
/// paths that collapses to `labels`. Refuses more than 10^6 paths.
template <typename Scalar>
Scalar ctc_oracle(const Matrix<Scalar>& logprobs, std::span<const int> labels) {
  const Index frames = logprobs.rows(), symbols = logprobs.cols();
  double paths = 1.0;
  for (Index t = 0; t < frames; ++t) paths *= double(symbols);
  if (paths > 1e6) throw std::invalid_argument("ctc_oracle: (V+1)^T = " + std::to_string(paths) + " exceeds 10^6");

  std::vector<int> path(static_cast<std::size_t>(frames), 0);
  long double mass = 0.0L;
  const LabelSeq target(labels.begin(), labels.end());
  while (true) {
    if (collapse(path) == target) {
      long double logp = 0.0L;
      for (Index t = 0; t < frames; ++t) logp += logprobs(t, path[static_cast<std::size_t>(t)]);
      mass += std::exp(logp);
    }
    Index t = 0;
    while (t < frames && ++path[static_cast<std::size_t>(t)] == symbols) path[static_cast<std::size_t>(t++)] = 0;
    if (t == frames) break;
  }
  if (mass <= 0.0L) throw InfeasibleAlignment("ctc_oracle: no path collapses to the labels");
  return static_cast<Scalar>(-std::log(mass));
}

/// Best path: per-frame argmax (lowest id wins ties), then collapse.
template <typename Scalar>
LabelSeq greedy_decode(const Matrix<Scalar>& logprobs) {
  std::vector<int> path(static_cast<std::size_t>(logprobs.rows()));
  for (Index t = 0; t < logprobs.rows(); ++t) {
    Index best = 0;
    for (Index k = 1; k < logprobs.cols(); ++k)
      if (logprobs(t, k) > logprobs(t, best)) best = k;
    path[static_cast<std::size_t>(t)] = static_cast<int>(best);
  }
  return collapse(path);
}

/// CTC loss of `logits` (T x (V+1), pre-softmax) as a graph node.
template <typename Scalar>
Var<Scalar> ctc_loss(const Var<Scalar>& logits, std::span<const int> labels) {
  if (!logits.value().allFinite()) throw NumericError("ctc_loss: non-finite logits");
  const Matrix<Scalar> shifted = logits.value().colwise() - logits.value().rowwise().maxCoeff();
  const Matrix<Scalar> logprobs = shifted.colwise() - shifted.array().exp().rowwise().sum().log().matrix();
  Matrix<Scalar> out(1, 1);
  out(0, 0) = ctc_loss(logprobs, labels);
  auto px = logits.node();
  if (!px->requires_grad) return make_node<Scalar>("ctc_loss", std::move(out), {1, 1}, {px}, nullptr);
  Matrix<Scalar> grad = ctc_grad(logprobs, labels);
  return make_node<Scalar>("ctc_loss", std::move(out), {1, 1}, {px}, [px, grad = std::move(grad)](detail::Node<Scalar>& self) {
    px->grad_buffer() += grad * self.grad(0, 0);
  });
}

}  // namespace ags
