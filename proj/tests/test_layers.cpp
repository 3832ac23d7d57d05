#include "ags/gradcheck.hpp"
#include "ags/layers.hpp"

#include <doctest.h>

#include <cmath>

using namespace ags;
using M = Matrix<double>;
using V = Var<double>;

namespace {

M random(Index rows, Index cols, std::uint64_t seed, double bound = 1.0) {
  Rng rng(seed);
  return uniform_matrix<double>(rows, cols, bound, rng);
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Direct nested-loop cross-correlation with zero padding.
M conv_oracle(const M& x, Index in_ch, Index frames, Index bins, const M& kernel, const M& bias, Index kh, Index kw,
              Index pad) {
  const Index out_ch = kernel.rows();
  const Index out_t = frames + 2 * pad - kh + 1, out_f = bins + 2 * pad - kw + 1;
  M out = M::Zero(out_ch * out_t, out_f);
  for (Index o = 0; o < out_ch; ++o)
    for (Index t = 0; t < out_t; ++t)
      for (Index f = 0; f < out_f; ++f) {
        double acc = bias(0, o);
        for (Index c = 0; c < in_ch; ++c)
          for (Index i = 0; i < kh; ++i)
            for (Index j = 0; j < kw; ++j) {
              const Index tt = t + i - pad, ff = f + j - pad;
              if (tt < 0 || tt >= frames || ff < 0 || ff >= bins) continue;
              acc += kernel(o, (c * kh + i) * kw + j) * x(c * frames + tt, ff);
            }
        out(o * out_t + t, f) = acc;
      }
  return out;
}

// Scalar-loop LSTM, gate order i, f, g, o.
M lstm_oracle(const M& x, const M& w_ih, const M& w_hh, const M& b, bool reverse) {
  const Index frames = x.rows(), h = w_hh.cols();
  M out(frames, h);
  std::vector<double> hp(h, 0.0), cp(h, 0.0);
  for (Index s = 0; s < frames; ++s) {
    const Index t = reverse ? frames - 1 - s : s;
    std::vector<double> pre(4 * h);
    for (Index r = 0; r < 4 * h; ++r) {
      double acc = b(0, r);
      for (Index k = 0; k < x.cols(); ++k) acc += w_ih(r, k) * x(t, k);
      for (Index k = 0; k < h; ++k) acc += w_hh(r, k) * hp[k];
      pre[r] = acc;
    }
    for (Index j = 0; j < h; ++j) {
      const double i = sig(pre[j]), f = sig(pre[h + j]), g = std::tanh(pre[2 * h + j]), o = sig(pre[3 * h + j]);
      cp[j] = f * cp[j] + i * g;
      hp[j] = o * std::tanh(cp[j]);
      out(t, j) = hp[j];
    }
  }
  return out;
}

M reverse_rows(const M& m) { return m.colwise().reverse(); }

}  // namespace

TEST_CASE("dense layer computes act(x W^T + b)") {
  Rng rng(1);
  auto layer = DenseLayer<double>::init(3, 2, Activation::tanh, rng);
  layer.bias.mutable_value() << 0.1, -0.2;
  const M x = random(4, 3, 2);
  const M expected = ((x * layer.weight.value().transpose()).rowwise() + layer.bias.value().row(0)).array().tanh();
  CHECK((dense_forward(layer, V::leaf(x)).value() - expected).cwiseAbs().maxCoeff() < 1e-15);
  CHECK_THROWS_AS(dense_forward(layer, V::leaf(M::Ones(4, 2))), DimensionError);
}

TEST_CASE("conv_output_size") {
  CHECK(conv_output_size(10, 3, 1, 1) == 10);
  CHECK(conv_output_size(10, 3, 1, 0) == 8);
  CHECK(conv_output_size(10, 3, 2, 1) == 5);
  CHECK(conv_output_size(2, 5, 1, 0) == 0);
}

TEST_CASE("conv2d matches a loop oracle") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    const Index in_ch = 2, frames = 5 + Index(seed), bins = 4;
    for (Index pad : {0, 1}) {
      auto layer = Conv2dLayer<double>::init(in_ch, 3, 3, 3, rng, 1, pad);
      layer.bias.mutable_value() = random(1, 3, seed + 10);
      const M x = random(in_ch * frames, bins, seed + 20);
      V y = conv2d_forward(layer, V::leaf(x, false, {in_ch, frames, bins}));
      const M expected = conv_oracle(x, in_ch, frames, bins, layer.kernel.value(), layer.bias.value(), 3, 3, pad);
      CHECK(y.shape() == Shape{3, frames + 2 * pad - 2, bins + 2 * pad - 2});
      CHECK((y.value() - expected).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("conv2d rejects mismatched inputs") {
  Rng rng(1);
  auto layer = Conv2dLayer<double>::init(2, 3, 3, 3, rng, 1, 0);
  CHECK_THROWS_AS(conv2d_forward(layer, V::leaf(M::Ones(4, 4), false, {1, 4, 4})), DimensionError);
  CHECK_THROWS_AS(conv2d_forward(layer, V::leaf(M::Ones(4, 4))), DimensionError);
  CHECK_THROWS_AS(conv2d_forward(layer, V::leaf(M::Ones(4, 2), false, {2, 2, 2})), DimensionError);
}

TEST_CASE("maxpool keeps the short final window and breaks ties toward the earliest frame") {
  // One channel, five frames, two bins.
  M x(5, 2);
  x << 1, 4,   //
      3, 4,    //
      2, 0,    //
      2, -1,   //
      7, 9;
  V in = V::param(x, {1, 5, 2});
  V y = maxpool_time(in);
  CHECK(y.shape() == Shape{1, 3, 2});
  M expected(3, 2);
  expected << 3, 4, 2, 0, 7, 9;
  CHECK(y.value() == expected);
  backward(sum(y));
  M grad = M::Zero(5, 2);
  grad << 0, 1, 1, 0, 1, 1, 0, 0, 1, 1;
  CHECK(in.grad() == grad);
}

TEST_CASE("two stride-2 pools give ceil(ceil(T/2)/2) frames") {
  for (Index t = 1; t <= 64; ++t) {
    V x = V::leaf(M::Ones(t, 1), false, {1, t, 1});
    const Index out = maxpool_time(maxpool_time(x)).shape()[1];
    CHECK(out == ((t + 1) / 2 + 1) / 2);
    if (t % 4 == 0) CHECK(out == t / 4);
  }
}

TEST_CASE("frames_from_channels lays channels side by side") {
  M x(4, 2);  // 2 channels x 2 frames x 2 bins
  x << 1, 2, 3, 4, 5, 6, 7, 8;
  M expected(2, 4);
  expected << 1, 2, 5, 6, 3, 4, 7, 8;
  CHECK(frames_from_channels(V::leaf(x, false, {2, 2, 2})).value() == expected);
}

TEST_CASE("LSTM matches a scalar loop oracle in both directions") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    auto layer = LstmLayer<double>::init(3, 4, rng);
    const M x = random(6, 3, seed + 50);
    for (auto dir : {Direction::forward, Direction::backward}) {
      const M got = lstm_forward(layer, V::leaf(x), dir).value();
      const M want = lstm_oracle(x, layer.w_ih.value(), layer.w_hh.value(), layer.bias.value(), dir == Direction::backward);
      CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("LSTM init puts the forget bias at one") {
  Rng rng(3);
  auto layer = LstmLayer<double>::init(2, 5, rng);
  CHECK(layer.bias.value().middleCols(5, 5).isOnes());
  CHECK(layer.w_ih.value().cwiseAbs().maxCoeff() <= 1.0 / std::sqrt(5.0));
}

TEST_CASE("the backward direction is the forward direction on reversed time") {
  Rng rng(4);
  auto layer = LstmLayer<double>::init(3, 4, rng);
  const M x = random(7, 3, 9);
  const M back = lstm_forward(layer, V::leaf(x), Direction::backward).value();
  const M fwd_rev = lstm_forward(layer, V::leaf(reverse_rows(x)), Direction::forward).value();
  CHECK((back - reverse_rows(fwd_rev)).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("BiLSTM concatenates both directions") {
  Rng rng(5);
  auto layer = BiLstmLayer<double>::init(3, 2, rng);
  const M x = random(4, 3, 6);
  const M y = bilstm_forward(layer, V::leaf(x)).value();
  CHECK(y.cols() == 4);
  CHECK(y.leftCols(2) == lstm_forward(layer.fwd, V::leaf(x), Direction::forward).value());
  CHECK(y.rightCols(2) == lstm_forward(layer.bwd, V::leaf(x), Direction::backward).value());
}

TEST_CASE("layer gradients agree with finite differences") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    auto conv = Conv2dLayer<double>::init(1, 2, 3, 3, rng);
    auto lstm = BiLstmLayer<double>::init(2 * 3, 3, rng);
    V x = V::param(random(5, 3, seed + 7), {1, 5, 3});
    V w = V::leaf(random(3, 6, seed + 8));
    auto f = [&] {
      V h = frames_from_channels(maxpool_time(tanh(conv2d_forward(conv, x))));
      return sum(hadamard(bilstm_forward(lstm, h), w));
    };
    const auto r = finite_diff_check(f, {conv.kernel, conv.bias, lstm.fwd.w_ih, lstm.fwd.w_hh, lstm.bwd.bias, x});
    CHECK(r.max_relative_error < 1e-4);
  }
}

TEST_CASE("dropout") {
  Rng rng(1);
  V x = V::leaf(M::Ones(200, 50));
  CHECK(dropout(x, 0.5, Mode::eval, rng).value() == x.value());
  const M y = dropout(x, 0.3, Mode::train, rng).value();
  const double kept = double((y.array() != 0).count()) / double(y.size());
  CHECK(kept == doctest::Approx(0.7).epsilon(0.03));
  CHECK(((y.array() == 0) || (y.array() - 1.0 / 0.7).abs() < 1e-12).all());
  CHECK_THROWS_AS(dropout(x, 1.0, Mode::train, rng), std::invalid_argument);
  CHECK_THROWS_AS(dropout(x, -0.1, Mode::train, rng), std::invalid_argument);
}
