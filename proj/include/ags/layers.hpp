#pragma once

// Main-network building blocks: dense, 2-D convolution, time-axis max
// pooling, (bi)directional LSTM and inverted dropout.

#include "ags/tensor.hpp"

#include <cmath>
#include <random>
#include <string>
#include <vector>

namespace ags {

using Rng = std::mt19937_64;

enum class Mode { train, eval };

template <typename Scalar>
Matrix<Scalar> uniform_matrix(Index rows, Index cols, Scalar bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-double(bound), double(bound));
  Matrix<Scalar> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = Scalar(dist(rng));
  return m;
}

// ---------------------------------------------------------------------------
// Dense

enum class Activation { linear, tanh, sigmoid, relu };

template <typename Scalar>
struct DenseLayer {
  Var<Scalar> weight;  // out x in
  Var<Scalar> bias;    // 1 x out
  Activation activation = Activation::linear;

  Index in_features() const { return weight.cols(); }
  Index out_features() const { return weight.rows(); }

  static DenseLayer init(Index in, Index out, Activation act, Rng& rng) {
    const Scalar bound = Scalar(1) / std::sqrt(Scalar(in));
    return {Var<Scalar>::param(uniform_matrix<Scalar>(out, in, bound, rng)),
            Var<Scalar>::param(Matrix<Scalar>::Zero(1, out)), act};
  }
  static DenseLayer zeros(Index in, Index out, Activation act) {
    return {Var<Scalar>::param(Matrix<Scalar>::Zero(out, in)), Var<Scalar>::param(Matrix<Scalar>::Zero(1, out)), act};
  }
};

template <typename Scalar>
Var<Scalar> activate(const Var<Scalar>& x, Activation act) {
  switch (act) {
    case Activation::tanh: return tanh(x);
    case Activation::sigmoid: return sigmoid(x);
    case Activation::relu: return relu(x);
    case Activation::linear: break;
  }
  return x;
}

/// x W^T + b per row, then the layer's activation.
template <typename Scalar>
Var<Scalar> dense_forward(const DenseLayer<Scalar>& layer, const Var<Scalar>& x) {
  if (x.cols() != layer.in_features())
    throw DimensionError("dense_forward: input " + shape_string(x.shape()) + " but layer expects width " +
                         std::to_string(layer.in_features()));
  return activate(add_row(matmul_nt(x, layer.weight), layer.bias), layer.activation);
}

// ---------------------------------------------------------------------------
// Convolution over a C x T x F volume

template <typename Scalar>
struct Conv2dLayer {
  Var<Scalar> kernel;  // shape {out, in, kh, kw}, stored out x (in*kh*kw)
  Var<Scalar> bias;    // 1 x out
  Index stride_t = 1, stride_f = 1;
  Index pad_t = 1, pad_f = 1;

  Index out_channels() const { return kernel.shape()[0]; }
  Index in_channels() const { return kernel.shape()[1]; }
  Index kernel_t() const { return kernel.shape()[2]; }
  Index kernel_f() const { return kernel.shape()[3]; }

  static Conv2dLayer init(Index in, Index out, Index kh, Index kw, Rng& rng, Index stride = 1, Index pad = 1) {
    if (in <= 0 || out <= 0 || kh <= 0 || kw <= 0) throw DimensionError("Conv2dLayer: kernel dims must be positive");
    const Scalar bound = Scalar(1) / std::sqrt(Scalar(in * kh * kw));
    return {Var<Scalar>::param(uniform_matrix<Scalar>(out, in * kh * kw, bound, rng), {out, in, kh, kw}),
            Var<Scalar>::param(Matrix<Scalar>::Zero(1, out)), stride, stride, pad, pad};
  }
};

/// floor((n + 2 pad - k) / stride) + 1
inline Index conv_output_size(Index n, Index k, Index stride, Index pad) {
  const Index span = n + 2 * pad - k;
  if (span < 0) return 0;
  return span / stride + 1;
}

/// Cross-correlation of x (shape {C, T, F}) with the layer kernel.
/// Output has shape {outCh, T', F'}.
template <typename Scalar>
Var<Scalar> conv2d_forward(const Conv2dLayer<Scalar>& layer, const Var<Scalar>& x) {
  if (x.shape().size() != 3) throw DimensionError("conv2d_forward: expected C x T x F input, got " + shape_string(x.shape()));
  const Index in_ch = x.shape()[0], frames = x.shape()[1], bins = x.shape()[2];
  if (in_ch != layer.in_channels())
    throw DimensionError("conv2d_forward: input has " + std::to_string(in_ch) + " channels, kernel expects " +
                         std::to_string(layer.in_channels()));
  const Index kh = layer.kernel_t(), kw = layer.kernel_f();
  if (frames + 2 * layer.pad_t < kh || bins + 2 * layer.pad_f < kw)
    throw DimensionError("conv2d_forward: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                         " larger than padded input " + shape_string(x.shape()));
  const Index out_t = conv_output_size(frames, kh, layer.stride_t, layer.pad_t);
  const Index out_f = conv_output_size(bins, kw, layer.stride_f, layer.pad_f);
  const Index patch = in_ch * kh * kw;
  const Index st = layer.stride_t, sf = layer.stride_f, pt = layer.pad_t, pf = layer.pad_f;

  // im2col: one row per output position, one column per (channel, dt, df).
  Matrix<Scalar> cols = Matrix<Scalar>::Zero(out_t * out_f, patch);
  const auto& in = x.value();
  for (Index ot = 0; ot < out_t; ++ot)
    for (Index of = 0; of < out_f; ++of) {
      Scalar* row = cols.row(ot * out_f + of).data();
      for (Index c = 0; c < in_ch; ++c)
        for (Index dt = 0; dt < kh; ++dt) {
          const Index t = ot * st + dt - pt;
          if (t < 0 || t >= frames) continue;
          for (Index df = 0; df < kw; ++df) {
            const Index f = of * sf + df - pf;
            if (f < 0 || f >= bins) continue;
            row[(c * kh + dt) * kw + df] = in(c * frames + t, f);
          }
        }
    }

  const Index out_ch = layer.out_channels();
  // (out x patch) * (patch x positions) is already the row-major {out, T', F'} layout.
  Matrix<Scalar> flat = layer.kernel.value() * cols.transpose();
  flat.colwise() += layer.bias.value().row(0).transpose();
  Matrix<Scalar> out = Eigen::Map<const Matrix<Scalar>>(flat.data(), out_ch * out_t, out_f);

  auto px = x.node(), pk = layer.kernel.node(), pb = layer.bias.node();
  auto backward = [px, pk, pb, cols = std::move(cols), out_ch, out_t, out_f, in_ch, frames, bins, kh, kw, st, sf, pt,
                   pf](detail::Node<Scalar>& self) {
    const Eigen::Map<const Matrix<Scalar>> dflat(self.grad.data(), out_ch, out_t * out_f);
    if (pk->requires_grad) pk->grad_buffer().noalias() += dflat * cols;
    if (pb->requires_grad) pb->grad_buffer() += dflat.rowwise().sum().transpose();
    if (!px->requires_grad) return;
    const Matrix<Scalar> dcols = dflat.transpose() * pk->value;
    auto& gx = px->grad_buffer();
    for (Index ot = 0; ot < out_t; ++ot)
      for (Index of = 0; of < out_f; ++of) {
        const Scalar* row = dcols.row(ot * out_f + of).data();
        for (Index c = 0; c < in_ch; ++c)
          for (Index dt = 0; dt < kh; ++dt) {
            const Index t = ot * st + dt - pt;
            if (t < 0 || t >= frames) continue;
            for (Index df = 0; df < kw; ++df) {
              const Index f = of * sf + df - pf;
              if (f < 0 || f >= bins) continue;
              gx(c * frames + t, f) += row[(c * kh + dt) * kw + df];
            }
          }
      }
  };
  return make_node<Scalar>("conv2d", std::move(out), {out_ch, out_t, out_f}, {px, pk, pb}, std::move(backward));
}

// ---------------------------------------------------------------------------
// Pooling

inline Index pooled_length(Index frames, Index stride = 2) { return (frames + stride - 1) / stride; }

/// Max over windows of `stride` frames along the time axis of a C x T x F
/// volume. A short final window is kept, so T -> ceil(T / stride).
/// Ties pick the earliest frame.
template <typename Scalar>
Var<Scalar> maxpool_time(const Var<Scalar>& x, Index stride = 2) {
  if (x.shape().size() != 3) throw DimensionError("maxpool_time: expected C x T x F input, got " + shape_string(x.shape()));
  if (stride < 1) throw DimensionError("maxpool_time: stride must be positive");
  const Index channels = x.shape()[0], frames = x.shape()[1], bins = x.shape()[2];
  if (frames < 1) throw DimensionError("maxpool_time: empty time axis");
  const Index out_t = pooled_length(frames, stride);
  Matrix<Scalar> out(channels * out_t, bins);
  std::vector<Index> source(static_cast<std::size_t>(out.size()));
  const auto& in = x.value();
  for (Index c = 0; c < channels; ++c)
    for (Index ot = 0; ot < out_t; ++ot)
      for (Index f = 0; f < bins; ++f) {
        Index best = c * frames + ot * stride;
        for (Index k = 1; k < stride && ot * stride + k < frames; ++k) {
          const Index r = c * frames + ot * stride + k;
          if (in(r, f) > in(best, f)) best = r;
        }
        out(c * out_t + ot, f) = in(best, f);
        source[static_cast<std::size_t>((c * out_t + ot) * bins + f)] = best;
      }
  auto px = x.node();
  return make_node<Scalar>("maxpool_time", std::move(out), {channels, out_t, bins}, {px},
                           [px, source = std::move(source), bins](detail::Node<Scalar>& self) {
                             auto& gx = px->grad_buffer();
                             for (Index i = 0; i < self.grad.size(); ++i)
                               gx(source[static_cast<std::size_t>(i)], i % bins) += self.grad.data()[i];
                           });
}

/// C x T x F -> T x (C*F), frames as rows.
template <typename Scalar>
Var<Scalar> frames_from_channels(const Var<Scalar>& x) {
  if (x.shape().size() != 3) throw DimensionError("frames_from_channels: expected C x T x F, got " + shape_string(x.shape()));
  const Index channels = x.shape()[0], frames = x.shape()[1], bins = x.shape()[2];
  Matrix<Scalar> out(frames, channels * bins);
  for (Index c = 0; c < channels; ++c) out.middleCols(c * bins, bins) = x.value().middleRows(c * frames, frames);
  auto px = x.node();
  return make_node<Scalar>("frames_from_channels", std::move(out), {}, {px},
                           [px, channels, frames, bins](detail::Node<Scalar>& self) {
                             for (Index c = 0; c < channels; ++c)
                               px->grad_buffer().middleRows(c * frames, frames) += self.grad.middleCols(c * bins, bins);
                           });
}

// ---------------------------------------------------------------------------
// LSTM

enum class Direction { forward, backward };

/// Standard LSTM without peepholes. Gate blocks are stacked in the order
/// input, forget, cell candidate, output.
template <typename Scalar>
struct LstmLayer {
  Var<Scalar> w_ih;  // 4h x in
  Var<Scalar> w_hh;  // 4h x h
  Var<Scalar> bias;  // 1 x 4h

  Index hidden() const { return w_hh.cols(); }
  Index in_features() const { return w_ih.cols(); }

  /// Uniform in +-1/sqrt(h), forget-gate bias 1.
  static LstmLayer init(Index in, Index hidden, Rng& rng) {
    const Scalar bound = Scalar(1) / std::sqrt(Scalar(hidden));
    Matrix<Scalar> b = uniform_matrix<Scalar>(1, 4 * hidden, bound, rng);
    b.middleCols(hidden, hidden).setConstant(Scalar(1));
    return {Var<Scalar>::param(uniform_matrix<Scalar>(4 * hidden, in, bound, rng)),
            Var<Scalar>::param(uniform_matrix<Scalar>(4 * hidden, hidden, bound, rng)), Var<Scalar>::param(std::move(b))};
  }
};

/// The recurrence over precomputed input projections `z` (T x 4h). Output
/// row t is the hidden state at frame t; the backward direction consumes
/// frames from T-1 down to 0. Initial states are zero.
template <typename Scalar>
Var<Scalar> lstm_recurrence(const Var<Scalar>& z, const Var<Scalar>& w_hh, Direction direction) {
  const Index h = w_hh.cols(), frames = z.rows();
  if (w_hh.rows() != 4 * h || z.cols() != 4 * h)
    throw DimensionError("lstm_recurrence: projections " + shape_string(z.shape()) + " vs recurrent weights " +
                         shape_string(w_hh.shape()));
  // Activated gates per frame, in the same layout as z.
  Matrix<Scalar> gates(frames, 4 * h);
  Matrix<Scalar> cells(frames, h), tanh_cells(frames, h), out(frames, h);
  const bool reverse = direction == Direction::backward;
  RowVector<Scalar> h_prev = RowVector<Scalar>::Zero(h), c_prev = RowVector<Scalar>::Zero(h);
  const auto& W = w_hh.value();
  for (Index step = 0; step < frames; ++step) {
    const Index t = reverse ? frames - 1 - step : step;
    RowVector<Scalar> pre = z.value().row(t);
    pre.noalias() += h_prev * W.transpose();
    auto g = gates.row(t);
    for (Index j = 0; j < h; ++j) {
      g(j) = detail::stable_sigmoid(pre(j));
      g(h + j) = detail::stable_sigmoid(pre(h + j));
      g(2 * h + j) = std::tanh(pre(2 * h + j));
      g(3 * h + j) = detail::stable_sigmoid(pre(3 * h + j));
      cells(t, j) = g(h + j) * c_prev(j) + g(j) * g(2 * h + j);
      tanh_cells(t, j) = std::tanh(cells(t, j));
      out(t, j) = g(3 * h + j) * tanh_cells(t, j);
    }
    h_prev = out.row(t);
    c_prev = cells.row(t);
  }

  auto pz = z.node(), pw = w_hh.node();
  auto backward = [pz, pw, gates = std::move(gates), cells = std::move(cells), tanh_cells = std::move(tanh_cells), h,
                   frames, reverse](detail::Node<Scalar>& self) {
    const auto& W = pw->value;
    const auto& hs = self.value;
    Matrix<Scalar> dpre(frames, 4 * h);
    Matrix<Scalar> h_before = Matrix<Scalar>::Zero(frames, h);
    RowVector<Scalar> dh_next = RowVector<Scalar>::Zero(h), dc_next = RowVector<Scalar>::Zero(h);
    for (Index step = frames - 1; step >= 0; --step) {
      const Index t = reverse ? frames - 1 - step : step;
      const Index prev = reverse ? t + 1 : t - 1;
      const bool has_prev = step > 0;
      auto g = gates.row(t);
      auto d = dpre.row(t);
      for (Index j = 0; j < h; ++j) {
        const Scalar i_g = g(j), f_g = g(h + j), c_g = g(2 * h + j), o_g = g(3 * h + j);
        const Scalar dh = self.grad(t, j) + dh_next(j);
        const Scalar tc = tanh_cells(t, j);
        const Scalar dc = dh * o_g * (Scalar(1) - tc * tc) + dc_next(j);
        const Scalar c_before = has_prev ? cells(prev, j) : Scalar(0);
        d(j) = dc * c_g * i_g * (Scalar(1) - i_g);
        d(h + j) = dc * c_before * f_g * (Scalar(1) - f_g);
        d(2 * h + j) = dc * i_g * (Scalar(1) - c_g * c_g);
        d(3 * h + j) = dh * tc * o_g * (Scalar(1) - o_g);
        dc_next(j) = dc * f_g;
      }
      dh_next.noalias() = d * W;
      if (has_prev) h_before.row(t) = hs.row(prev);
    }
    if (pz->requires_grad) pz->grad_buffer() += dpre;
    if (pw->requires_grad) pw->grad_buffer().noalias() += dpre.transpose() * h_before;
  };
  return make_node<Scalar>("lstm", std::move(out), {}, {pz, pw}, std::move(backward));
}

template <typename Scalar>
Var<Scalar> lstm_forward(const LstmLayer<Scalar>& layer, const Var<Scalar>& x, Direction direction) {
  if (x.cols() != layer.in_features())
    throw DimensionError("lstm_forward: input " + shape_string(x.shape()) + " but layer expects width " +
                         std::to_string(layer.in_features()));
  return lstm_recurrence(add_row(matmul_nt(x, layer.w_ih), layer.bias), layer.w_hh, direction);
}

template <typename Scalar>
struct BiLstmLayer {
  LstmLayer<Scalar> fwd;
  LstmLayer<Scalar> bwd;

  Index output_width() const { return fwd.hidden() + bwd.hidden(); }

  static BiLstmLayer init(Index in, Index hidden, Rng& rng) {
    auto f = LstmLayer<Scalar>::init(in, hidden, rng);
    auto b = LstmLayer<Scalar>::init(in, hidden, rng);
    return {std::move(f), std::move(b)};
  }
};

/// [forward outputs | backward outputs], T x 2h.
template <typename Scalar>
Var<Scalar> bilstm_forward(const BiLstmLayer<Scalar>& layer, const Var<Scalar>& x) {
  auto f = lstm_forward(layer.fwd, x, Direction::forward);
  auto b = lstm_forward(layer.bwd, x, Direction::backward);
  if (f.rows() != b.rows()) throw std::logic_error("bilstm_forward: direction outputs differ in length");
  return concat_cols<Scalar>({f, b});
}

// ---------------------------------------------------------------------------
// Dropout

/// Inverted dropout: in train mode each element is zeroed with probability
/// `rate` and survivors are scaled by 1/(1-rate). Eval mode is the identity.
template <typename Scalar>
Var<Scalar> dropout(const Var<Scalar>& x, double rate, Mode mode, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  if (mode == Mode::eval || rate == 0.0) return x;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const Scalar keep_scale = Scalar(1.0 / (1.0 - rate));
  Matrix<Scalar> mask(x.rows(), x.cols());
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = unit(rng) < rate ? Scalar(0) : keep_scale;
  Matrix<Scalar> out = x.value().cwiseProduct(mask);
  auto px = x.node();
  return make_node<Scalar>("dropout", std::move(out), x.shape(), {px}, [px, mask = std::move(mask)](detail::Node<Scalar>& self) {
    px->grad_buffer() += self.grad.cwiseProduct(mask);
  });
}

}  // namespace ags
