#pragma once

// Utterance-level adapters that rescale or shift the main network.
//
// AGS: self-attention over a whole utterance produces a T x d_h gate in
// (0, 2) that multiplies a hidden layer's output elementwise, so the scale
// varies per frame and per unit. LHUC: one learned (0, 2) scale per unit,
// constant over time. SSNN: a per-frame MLP averaged over the utterance and
// added back onto every input frame.
//
// Frames are rows throughout: K = f Wk^T, alpha = softmax_rows(Q K^T / sqrt(d)),
// C = alpha V, S = 2 sigmoid(C Wc^T + bc).

#include "ags/layers.hpp"
#include "ags/tensor.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace ags {

template <typename Scalar>
struct AgsLayer {
  Var<Scalar> w_k;  // d_a x d_f
  Var<Scalar> w_q;  // d_a x d_f
  Var<Scalar> w_v;  // d_a x d_f
  DenseLayer<Scalar> gate;  // d_h x d_a, bias 1 x d_h; the sigmoid is applied separately
  Index heads = 1;

  Index attention_dim() const { return w_k.rows(); }
  Index feature_dim() const { return w_k.cols(); }
  Index gate_width() const { return gate.out_features(); }

  /// Random projections and a zero gate projection, so a fresh layer emits
  /// an all-ones gate.
  static AgsLayer init(Index feature_dim, Index attention_dim, Index gate_width, Index heads, Rng& rng) {
    if (heads < 1 || attention_dim % heads != 0)
      throw DimensionError("AgsLayer: " + std::to_string(heads) + " heads do not divide d_a=" +
                           std::to_string(attention_dim));
    const Scalar bound = Scalar(1) / std::sqrt(Scalar(feature_dim));
    AgsLayer layer;
    layer.w_k = Var<Scalar>::param(uniform_matrix<Scalar>(attention_dim, feature_dim, bound, rng));
    layer.w_q = Var<Scalar>::param(uniform_matrix<Scalar>(attention_dim, feature_dim, bound, rng));
    layer.w_v = Var<Scalar>::param(uniform_matrix<Scalar>(attention_dim, feature_dim, bound, rng));
    layer.gate = DenseLayer<Scalar>::zeros(attention_dim, gate_width, Activation::linear);
    layer.heads = heads;
    return layer;
  }

  Index parameter_count() const { return 3 * w_k.size() + gate.weight.size() + gate.bias.size(); }
};

template <typename Scalar>
struct Projections {
  Var<Scalar> keys, queries, values;  // each T x d_a
};

template <typename Scalar>
Projections<Scalar> ags_projections(const AgsLayer<Scalar>& layer, const Var<Scalar>& f) {
  if (f.cols() != layer.feature_dim())
    throw DimensionError("ags_projections: features " + shape_string(f.shape()) + " but d_f=" +
                         std::to_string(layer.feature_dim()));
  return {matmul_nt(f, layer.w_k), matmul_nt(f, layer.w_q), matmul_nt(f, layer.w_v)};
}

/// alpha = softmax_rows(Q K^T / sqrt(d_a)); row t weighs every frame for
/// query frame t.
template <typename Scalar>
Var<Scalar> attention_weights(const Var<Scalar>& keys, const Var<Scalar>& queries, Index attention_dim) {
  if (keys.rows() != queries.rows() || keys.cols() != queries.cols())
    throw DimensionError("attention_weights: keys " + shape_string(keys.shape()) + " vs queries " +
                         shape_string(queries.shape()));
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(Scalar(attention_dim));
  return softmax_rows(scale(matmul_nt(queries, keys), inv_sqrt));
}

/// C = alpha V.
template <typename Scalar>
Var<Scalar> ags_context(const Var<Scalar>& alpha, const Var<Scalar>& values) {
  if (alpha.rows() != alpha.cols() || alpha.cols() != values.rows())
    throw DimensionError("ags_context: weights " + shape_string(alpha.shape()) + " vs values " +
                         shape_string(values.shape()));
  return matmul(alpha, values);
}

template <typename Scalar>
struct GateMatrix {
  Var<Scalar> values;  // T x d_h, entries in (0, 2)
};

/// S = 2 sigmoid(C Wc^T + bc).
template <typename Scalar>
GateMatrix<Scalar> ags_gate(const AgsLayer<Scalar>& layer, const Var<Scalar>& context) {
  if (context.cols() != layer.attention_dim())
    throw DimensionError("ags_gate: context " + shape_string(context.shape()) + " but d_a=" +
                         std::to_string(layer.attention_dim()));
  return {scaled_sigmoid2(dense_forward(layer.gate, context))};
}

/// h = S (.) D(h_prev).
template <typename Scalar>
Var<Scalar> apply_gate(const GateMatrix<Scalar>& gate, const Var<Scalar>& hidden) {
  return hadamard(gate.values, hidden);
}

/// Attention with `heads` independent heads over column blocks of width
/// d_a / heads, each scaled by 1/sqrt(d_a / heads). Head contexts are
/// concatenated back to width d_a. With one head the result equals
/// ags_context(attention_weights(K, Q, d_a), V) bit for bit.
template <typename Scalar>
Var<Scalar> multi_head_context(const Projections<Scalar>& proj, Index heads) {
  const Index attention_dim = proj.keys.cols();
  if (heads < 1 || attention_dim % heads != 0)
    throw DimensionError("multi_head_context: " + std::to_string(heads) + " heads do not divide d_a=" +
                         std::to_string(attention_dim));
  const Index width = attention_dim / heads;
  std::vector<Var<Scalar>> contexts;
  for (Index h = 0; h < heads; ++h) {
    auto k = slice_cols(proj.keys, h * width, width);
    auto q = slice_cols(proj.queries, h * width, width);
    auto v = slice_cols(proj.values, h * width, width);
    contexts.push_back(ags_context(attention_weights(k, q, width), v));
  }
  return concat_cols(contexts);
}

/// Full AGS path from features to gate, with dropout on the context.
template <typename Scalar>
GateMatrix<Scalar> multi_head_gate(const AgsLayer<Scalar>& layer, const Var<Scalar>& features, double dropout_rate,
                                   Mode mode, Rng& rng) {
  auto context = multi_head_context(ags_projections(layer, features), layer.heads);
  return ags_gate(layer, dropout(context, dropout_rate, mode, rng));
}

template <typename Scalar>
GateMatrix<Scalar> multi_head_gate(const AgsLayer<Scalar>& layer, const Var<Scalar>& features) {
  Rng unused;
  return multi_head_gate(layer, features, 0.0, Mode::eval, unused);
}

// ---------------------------------------------------------------------------
// LHUC

template <typename Scalar>
struct LhucParams {
  Var<Scalar> r;  // 1 x d_h; applied scale is 2 sigmoid(r)

  static LhucParams init(Index width) { return {Var<Scalar>::param(Matrix<Scalar>::Zero(1, width))}; }
};

/// Scales unit j of every frame by 2 sigmoid(r_j). In train mode dropout acts on
/// r, so a dropped unit falls back to scale 1 for the whole utterance.
template <typename Scalar>
Var<Scalar> lhuc_apply(const LhucParams<Scalar>& params, const Var<Scalar>& hidden, double dropout_rate, Mode mode,
                       Rng& rng) {
  if (params.r.cols() != hidden.cols())
    throw DimensionError("lhuc_apply: " + std::to_string(params.r.cols()) + " scales for " + shape_string(hidden.shape()));
  return mul_row(hidden, scaled_sigmoid2(dropout(params.r, dropout_rate, mode, rng)));
}

template <typename Scalar>
Var<Scalar> lhuc_apply(const LhucParams<Scalar>& params, const Var<Scalar>& hidden) {
  Rng unused;
  return lhuc_apply(params, hidden, 0.0, Mode::eval, unused);
}

// ---------------------------------------------------------------------------
// SSNN

template <typename Scalar>
struct SsnnNetwork {
  DenseLayer<Scalar> first;   // tanh
  DenseLayer<Scalar> second;  // tanh
  DenseLayer<Scalar> output;  // linear, width d_f

  /// The output layer starts at zero so the shift starts at zero.
  static SsnnNetwork init(Index feature_dim, Index hidden, Rng& rng) {
    auto a = DenseLayer<Scalar>::init(feature_dim, hidden, Activation::tanh, rng);
    auto b = DenseLayer<Scalar>::init(hidden, hidden, Activation::tanh, rng);
    return {std::move(a), std::move(b), DenseLayer<Scalar>::zeros(hidden, feature_dim, Activation::linear)};
  }

  Index parameter_count() const {
    Index n = 0;
    for (const auto* l : {&first, &second, &output}) n += l->weight.size() + l->bias.size();
    return n;
  }
};

/// f_t + mean_t'(MLP(f_t')) for every frame t.
template <typename Scalar>
Var<Scalar> ssnn_shift(const SsnnNetwork<Scalar>& net, const Var<Scalar>& features, double dropout_rate, Mode mode,
                       Rng& rng) {
  if (features.cols() != net.first.in_features() || net.output.out_features() != features.cols())
    throw DimensionError("ssnn_shift: features " + shape_string(features.shape()) + " do not match the network width " +
                         std::to_string(net.first.in_features()));
  auto h = dropout(dense_forward(net.first, features), dropout_rate, mode, rng);
  h = dropout(dense_forward(net.second, h), dropout_rate, mode, rng);
  auto summary = mean_rows(dense_forward(net.output, h));
  return add(features, repeat_rows(summary, features.rows()));
}

template <typename Scalar>
Var<Scalar> ssnn_shift(const SsnnNetwork<Scalar>& net, const Var<Scalar>& features) {
  Rng unused;
  return ssnn_shift(net, features, 0.0, Mode::eval, unused);
}

}  // namespace ags
