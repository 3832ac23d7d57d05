#include "ags/checks.hpp"

#include "ags/adapt.hpp"
#include "ags/ctc.hpp"
#include "ags/layers.hpp"

#include <algorithm>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace ags {

namespace {

using M = Matrix<double>;
using V = Var<double>;

constexpr double kGradStep = 1e-5;
constexpr double kGradTolerance = 1e-4;
constexpr double kCtcTolerance = 1e-9;
constexpr double kRowSumTolerance = 1e-6;

M gaussian(Index rows, Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  M m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

void randomize(V& p, double stddev, Rng& rng) { p.mutable_value() = gaussian(p.rows(), p.cols(), stddev, rng); }

GradCheckResult run(const std::function<V(V)>& head, const std::function<V()>& body, std::vector<V> params, Rng& rng,
                    double bias) {
  // A fixed random weighting gives every output element a distinct upstream
  // gradient. It is drawn once so every evaluation sees the same objective.
  V reference = body();
  V weights = V::leaf(gaussian(reference.rows(), reference.cols(), 1.0, rng));
  auto f = [&] { return head ? head(body()) : sum(hadamard(body(), weights)); };
  return finite_diff_check(f, std::move(params), kGradStep, bias);
}

GradCheckResult check_layer(const std::function<V()>& body, std::vector<V> params, Rng& rng, double bias) {
  return run(nullptr, body, std::move(params), rng, bias);
}

}  // namespace

std::vector<GradCase> all_grad_cases() {
  return {GradCase::matmul, GradCase::hadamard,  GradCase::softmax, GradCase::scaled_sigmoid2, GradCase::dense,
          GradCase::conv2d, GradCase::maxpool,   GradCase::lstm,    GradCase::bilstm,          GradCase::ags_chain,
          GradCase::multi_head, GradCase::lhuc, GradCase::ssnn,    GradCase::ctc};
}

std::string to_string(GradCase which) {
  switch (which) {
    case GradCase::matmul: return "matmul";
    case GradCase::hadamard: return "hadamard";
    case GradCase::softmax: return "softmax";
    case GradCase::scaled_sigmoid2: return "scaled_sigmoid2";
    case GradCase::dense: return "dense";
    case GradCase::conv2d: return "conv2d";
    case GradCase::maxpool: return "maxpool";
    case GradCase::lstm: return "lstm";
    case GradCase::bilstm: return "bilstm";
    case GradCase::ags_chain: return "ags_chain";
    case GradCase::multi_head: return "ags_multi_head";
    case GradCase::lhuc: return "lhuc";
    case GradCase::ssnn: return "ssnn";
    case GradCase::ctc: return "ctc";
  }
  throw std::logic_error("unknown GradCase");
}

GradCheckResult grad_case(GradCase which, std::uint64_t seed, double bias) {
  Rng rng(seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(which));
  std::uniform_int_distribution<Index> len(3, 6);
  const Index frames = len(rng);

  switch (which) {
    case GradCase::matmul: {
      V a = V::param(gaussian(frames, 4, 1.0, rng)), b = V::param(gaussian(4, 3, 1.0, rng));
      V c = V::param(gaussian(5, 4, 1.0, rng));
      return check_layer([&] { return concat_cols<double>({matmul(a, b), matmul_nt(a, c)}); }, {a, b, c}, rng, bias);
    }
    case GradCase::hadamard: {
      V a = V::param(gaussian(frames, 4, 1.0, rng)), b = V::param(gaussian(frames, 4, 1.0, rng));
      V row = V::param(gaussian(1, 4, 1.0, rng));
      return check_layer([&] { return mul_row(hadamard(a, b), row); }, {a, b, row}, rng, bias);
    }
    case GradCase::softmax: {
      V x = V::param(gaussian(frames, 5, 2.0, rng));
      return check_layer([&] { return concat_cols<double>({softmax_rows(x), log_softmax_rows(x)}); }, {x}, rng, bias);
    }
    case GradCase::scaled_sigmoid2: {
      V x = V::param(gaussian(frames, 4, 2.0, rng));
      return check_layer([&] { return scaled_sigmoid2(x); }, {x}, rng, bias);
    }
    case GradCase::dense: {
      auto layer = DenseLayer<double>::init(5, 4, Activation::tanh, rng);
      randomize(layer.bias, 0.5, rng);
      V x = V::param(gaussian(frames, 5, 1.0, rng));
      return check_layer([&] { return dense_forward(layer, x); }, {layer.weight, layer.bias, x}, rng, bias);
    }
    case GradCase::conv2d: {
      auto layer = Conv2dLayer<double>::init(2, 3, 3, 3, rng);
      randomize(layer.bias, 0.5, rng);
      V x = V::param(gaussian(2 * frames, 5, 1.0, rng), {2, frames, 5});
      return check_layer([&] { return conv2d_forward(layer, x); }, {layer.kernel, layer.bias, x}, rng, bias);
    }
    case GradCase::maxpool: {
      // Values are a shuffled ladder with spacing far above the probe step,
      // so no maximum is tied and none changes under perturbation.
      const Index channels = 2, bins = 3, n = channels * frames * bins;
      std::vector<double> ladder(static_cast<std::size_t>(n));
      std::iota(ladder.begin(), ladder.end(), 0.0);
      std::shuffle(ladder.begin(), ladder.end(), rng);
      M values(channels * frames, bins);
      for (Index i = 0; i < n; ++i) values.data()[i] = 0.1 * ladder[static_cast<std::size_t>(i)];
      V x = V::param(values, {channels, frames, bins});
      return check_layer([&] { return maxpool_time(x); }, {x}, rng, bias);
    }
    case GradCase::lstm: {
      auto layer = LstmLayer<double>::init(3, 4, rng);
      V x = V::param(gaussian(frames, 3, 1.0, rng));
      const Direction dir = seed % 2 == 0 ? Direction::forward : Direction::backward;
      return check_layer([&] { return lstm_forward(layer, x, dir); }, {layer.w_ih, layer.w_hh, layer.bias, x}, rng,
                         bias);
    }
    case GradCase::bilstm: {
      auto layer = BiLstmLayer<double>::init(3, 3, rng);
      V x = V::param(gaussian(frames, 3, 1.0, rng));
      return check_layer([&] { return bilstm_forward(layer, x); },
                         {layer.fwd.w_ih, layer.fwd.w_hh, layer.fwd.bias, layer.bwd.w_ih, layer.bwd.w_hh,
                          layer.bwd.bias, x},
                         rng, bias);
    }
    case GradCase::ags_chain:
    case GradCase::multi_head: {
      const Index heads = which == GradCase::multi_head ? 2 : 1;
      auto layer = AgsLayer<double>::init(5, 4, 6, heads, rng);
      // A zero gate projection would block every gradient upstream of it.
      randomize(layer.gate.weight, 0.5, rng);
      randomize(layer.gate.bias, 0.5, rng);
      V f = V::param(gaussian(frames, 5, 1.0, rng));
      V h = V::param(gaussian(frames, 6, 1.0, rng));
      return check_layer([&] { return apply_gate(multi_head_gate(layer, f), h); },
                         {layer.w_k, layer.w_q, layer.w_v, layer.gate.weight, layer.gate.bias, f, h}, rng, bias);
    }
    case GradCase::lhuc: {
      auto params = LhucParams<double>::init(5);
      randomize(params.r, 1.0, rng);
      V h = V::param(gaussian(frames, 5, 1.0, rng));
      return check_layer([&] { return lhuc_apply(params, h); }, {params.r, h}, rng, bias);
    }
    case GradCase::ssnn: {
      auto net = SsnnNetwork<double>::init(4, 5, rng);
      randomize(net.output.weight, 0.5, rng);
      randomize(net.first.bias, 0.5, rng);
      V f = V::param(gaussian(frames, 4, 1.0, rng));
      return check_layer([&] { return ssnn_shift(net, f); },
                         {net.first.weight, net.first.bias, net.second.weight, net.second.bias, net.output.weight,
                          net.output.bias, f},
                         rng, bias);
    }
    case GradCase::ctc: {
      std::uniform_int_distribution<int> symbol(1, 3), count(1, 3);
      LabelSeq labels(static_cast<std::size_t>(count(rng)));
      for (auto& l : labels) l = symbol(rng);
      const Index t = std::max<Index>(frames, ctc_min_frames(labels));
      V logits = V::param(gaussian(t, 4, 1.0, rng));
      return run([&](V x) { return ctc_loss(x, labels); }, [&] { return logits; }, {logits}, rng, bias);
    }
  }
  throw std::logic_error("unknown GradCase");
}

bool CheckReport::passed() const {
  return std::all_of(lines.begin(), lines.end(), [](const CheckLine& l) { return l.passed; });
}

void CheckReport::add(std::string name, double observed, double tolerance) {
  lines.push_back({std::move(name), observed, tolerance, observed <= tolerance});
}

void CheckReport::add_flag(std::string name, bool ok) { lines.push_back({std::move(name), ok ? 0.0 : 1.0, 0.0, ok}); }

CheckReport check_gradients(int seeds, double analytic_bias) {
  CheckReport report;
  for (GradCase which : all_grad_cases()) {
    double worst = 0.0;
    for (int s = 0; s < seeds; ++s)
      worst = std::max(worst, grad_case(which, static_cast<std::uint64_t>(s + 1), analytic_bias).max_relative_error);
    report.add("grad." + to_string(which), worst, kGradTolerance);
  }
  return report;
}

CheckReport check_ctc(int instances, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<int> vocab_dist(1, 3), frames_dist(1, 6), length_dist(0, 3);
  double worst = 0.0;
  int checked = 0;
  while (checked < instances) {
    const int vocab = vocab_dist(rng);
    const Index frames = frames_dist(rng);
    LabelSeq labels(static_cast<std::size_t>(length_dist(rng)));
    std::uniform_int_distribution<int> symbol(1, vocab);
    for (auto& l : labels) l = symbol(rng);
    if (ctc_min_frames(labels) > frames) continue;
    const M logits = gaussian(frames, vocab + 1, 2.0, rng);
    const M shifted = logits.colwise() - logits.rowwise().maxCoeff();
    const M logprobs = shifted.colwise() - shifted.array().exp().rowwise().sum().log().matrix();
    worst = std::max(worst, std::abs(ctc_loss(logprobs, labels) - ctc_oracle(logprobs, labels)));
    ++checked;
  }
  CheckReport report;
  report.add("ctc.max_abs_loss_minus_oracle", worst, kCtcTolerance);
  return report;
}

CheckReport check_attention(int evaluations, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<Index> frames_dist(1, 12), feat_dist(1, 8), head_dist(1, 3), width_dist(1, 8);
  // Weight and feature scales span the range training visits. Far larger
  // pre-activations round 2 sigmoid(x) to exactly 0 or 2 in double.
  std::uniform_real_distribution<double> spread(0.1, 1.5);
  double worst_row = 0.0, worst_gate_margin = 2.0;
  bool gate_open = true, single_head_identical = true;

  for (int e = 0; e < evaluations; ++e) {
    const Index frames = frames_dist(rng), d_f = feat_dist(rng), heads = head_dist(rng);
    const Index d_a = heads * width_dist(rng), d_h = width_dist(rng);
    auto layer = AgsLayer<double>::init(d_f, d_a, d_h, heads, rng);
    randomize(layer.gate.weight, spread(rng), rng);
    randomize(layer.gate.bias, spread(rng), rng);
    V f = V::leaf(gaussian(frames, d_f, spread(rng), rng));

    const auto proj = ags_projections(layer, f);
    const Index width = d_a / heads;
    for (Index h = 0; h < heads; ++h) {
      auto alpha = attention_weights(slice_cols(proj.keys, h * width, width),
                                     slice_cols(proj.queries, h * width, width), width);
      const M sums = alpha.value().rowwise().sum();
      worst_row = std::max(worst_row, (sums.array() - 1.0).abs().maxCoeff());
    }

    const M gate = multi_head_gate(layer, f).values.value();
    const double lo = gate.minCoeff(), hi = gate.maxCoeff();
    gate_open = gate_open && lo > 0.0 && hi < 2.0;
    worst_gate_margin = std::min({worst_gate_margin, lo, 2.0 - hi});

    const M direct = ags_context(attention_weights(proj.keys, proj.queries, d_a), proj.values).value();
    const M one_head = multi_head_context(proj, 1).value();
    single_head_identical = single_head_identical && direct.cwiseEqual(one_head).all();
  }

  CheckReport report;
  report.add("attention.max_row_sum_error", worst_row, kRowSumTolerance);
  std::ostringstream gate_name;
  gate_name << "attention.gate_in_open_0_2 (min margin " << std::scientific << std::setprecision(3) << worst_gate_margin
            << ")";
  report.add_flag(gate_name.str(), gate_open);
  report.add_flag("attention.single_head_bit_identical", single_head_identical);
  return report;
}

CheckReport run_selfcheck(const std::string& suite, bool inject_fault) {
  const bool all = suite == "all";
  if (!all && suite != "grad" && suite != "ctc" && suite != "attention")
    throw std::invalid_argument("unknown selfcheck suite '" + suite + "' (expected grad, ctc, attention or all)");
  CheckReport report;
  auto append = [&](const CheckReport& part) { report.lines.insert(report.lines.end(), part.lines.begin(), part.lines.end()); };
  // The injected fault scales every analytic gradient by 1.01.
  if (all || suite == "grad") append(check_gradients(20, inject_fault ? 1.01 : 1.0));
  if (all || suite == "ctc") append(check_ctc(200));
  if (all || suite == "attention") append(check_attention(1000));
  return report;
}

}  // namespace ags
