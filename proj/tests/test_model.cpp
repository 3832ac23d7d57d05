#include "ags/ctc.hpp"
#include "ags/gradcheck.hpp"
#include "ags/model.hpp"

#include <doctest.h>

#include <algorithm>
#include <span>

using namespace ags;
using M = Matrix<double>;

namespace {

NetworkConfig small_net() {
  NetworkConfig net;
  net.input_dim = 6;
  net.conv_channels = {2, 3};
  net.lstm_layers = 3;
  net.hidden = 4;
  net.output_size = 5;
  return net;
}

AdaptConfig adapt(AdaptMethod method, std::vector<Index> layers = {1, 2, 3}) {
  AdaptConfig a;
  a.method = method;
  a.layers = std::move(layers);
  a.attention_dim = 4;
  a.ssnn_hidden = 5;
  return a;
}

M random(Index rows, Index cols, std::uint64_t seed) {
  Rng rng(seed);
  return uniform_matrix<double>(rows, cols, 1.0, rng);
}

}  // namespace

TEST_CASE("front end quarters the frame count") {
  const auto net = small_net();
  auto model = build_adapted_network<double>(net, adapt(AdaptMethod::none), 1);
  for (Index t : {1, 4, 7, 16, 33}) {
    const M logits = model.logits_eval(random(t, 6, Index(t)));
    CHECK(logits.rows() == ((t + 1) / 2 + 1) / 2);
    CHECK(logits.rows() == net.frames_after_frontend(t));
    CHECK(logits.cols() == 5);
  }
  CHECK_THROWS_AS(model.logits_eval(random(8, 5, 1)), DimensionError);
}

TEST_CASE("method none has exactly the baseline parameters") {
  auto a = build_adapted_network<double>(small_net(), adapt(AdaptMethod::none), 1);
  auto b = build_adapted_network<double>(small_net(), adapt(AdaptMethod::none, {2}), 2);
  CHECK(a.parameter_count() == b.parameter_count());
  CHECK(a.parameters().size() == b.parameters().size());
}

TEST_CASE("AGS adds the closed-form parameter count") {
  const auto net = small_net();
  auto base = build_adapted_network<double>(net, adapt(AdaptMethod::none), 1);
  for (auto layers : {std::vector<Index>{1}, {2, 3}, {1, 2, 3}}) {
    for (auto input : {AgsInput::transformed, AgsInput::features}) {
      auto cfg = adapt(AdaptMethod::ags, layers);
      cfg.ags_input = input;
      auto model = build_adapted_network<double>(net, cfg, 1);
      const Index d_f = input == AgsInput::transformed ? net.frontend_width() : net.input_dim;
      const Index d_h = 2 * net.hidden, d_a = cfg.attention_dim;
      const Index extra = Index(layers.size()) * (3 * d_a * d_f + d_h * d_a + d_h);
      CHECK(model.parameter_count() - base.parameter_count() == extra);
      CHECK(ags_extra_parameters(net, cfg) == extra);
    }
  }
}

TEST_CASE("fresh adapters leave the baseline function unchanged bit for bit") {
  const auto net = small_net();
  auto base = build_adapted_network<double>(net, adapt(AdaptMethod::none), 3);
  for (auto method : {AdaptMethod::ags, AdaptMethod::lhuc, AdaptMethod::ssnn}) {
    auto model = build_adapted_network<double>(net, adapt(method), 3);
    for (std::uint64_t u = 0; u < 5; ++u) {
      const M f = random(9 + Index(u), 6, 40 + u);
      CHECK(model.logits_eval(f) == base.logits_eval(f));
    }
  }
  // Same with float weights and a main network copied in afterwards.
  auto base_f = build_adapted_network<float>(net, adapt(AdaptMethod::none), 7);
  auto ags_f = build_adapted_network<float>(net, adapt(AdaptMethod::ags), 8);
  copy_main_network(base_f, ags_f);
  const Matrix<float> f = random(12, 6, 5).cast<float>();
  CHECK(ags_f.logits_eval(f) == base_f.logits_eval(f));
}

TEST_CASE("models that differ only in adaptation share their main network") {
  auto a = build_adapted_network<double>(small_net(), adapt(AdaptMethod::none), 11);
  auto b = build_adapted_network<double>(small_net(), adapt(AdaptMethod::ags, {2}), 11);
  const auto pa = a.parameters();
  const auto pb = b.parameters();
  for (const auto& p : pa) {
    auto it = std::find_if(pb.begin(), pb.end(), [&](const auto& q) { return q.name == p.name; });
    REQUIRE(it != pb.end());
    CHECK(it->var.value() == p.var.value());
  }
}

TEST_CASE("trace reports one gate per adapted layer") {
  auto model = build_adapted_network<double>(small_net(), adapt(AdaptMethod::ags, {1, 3}), 1);
  Rng rng(1);
  const auto tr = model.trace(Var<double>::leaf(random(10, 6, 1)), Mode::eval, rng);
  CHECK(tr.gates.size() == 2);
  CHECK(tr.gates[0].shape() == Shape{3, 8});
  CHECK(tr.ags_source.cols() == small_net().frontend_width());

  auto raw = adapt(AdaptMethod::ags, {2});
  raw.ags_input = AgsInput::features;
  auto model2 = build_adapted_network<double>(small_net(), raw, 1);
  const auto tr2 = model2.trace(Var<double>::leaf(random(10, 6, 1)), Mode::eval, rng);
  CHECK(tr2.ags_source.shape() == Shape{3, 6});
}

TEST_CASE("invalid adaptation configs are rejected") {
  CHECK_THROWS_AS(build_adapted_network<double>(small_net(), adapt(AdaptMethod::ags, {0}), 1), std::invalid_argument);
  CHECK_THROWS_AS(build_adapted_network<double>(small_net(), adapt(AdaptMethod::lhuc, {4}), 1), std::invalid_argument);
  CHECK_THROWS_AS(build_adapted_network<double>(small_net(), adapt(AdaptMethod::lhuc, {}), 1), std::invalid_argument);
  auto bad_heads = adapt(AdaptMethod::ags);
  bad_heads.heads = 3;
  CHECK_THROWS_AS(build_adapted_network<double>(small_net(), bad_heads, 1), std::invalid_argument);
  auto net = small_net();
  net.output_size = 1;
  CHECK_THROWS_AS(build_adapted_network<double>(net, adapt(AdaptMethod::none), 1), std::invalid_argument);
}

TEST_CASE("parameter names are stable") {
  auto model = build_adapted_network<double>(small_net(), adapt(AdaptMethod::ags, {2}), 1);
  std::vector<std::string> names;
  for (const auto& p : model.parameters()) names.push_back(p.name);
  CHECK(names.front() == "conv1.kernel");
  CHECK(std::find(names.begin(), names.end(), "lstm3.bwd.w_hh") != names.end());
  CHECK(std::find(names.begin(), names.end(), "ags2.gate.weight") != names.end());
  CHECK(std::find(names.begin(), names.end(), "ags1.w_k") == names.end());
}

TEST_CASE("architecture digest tracks the layout") {
  const auto net = small_net();
  const auto d0 = architecture_digest(net, adapt(AdaptMethod::none));
  CHECK(d0 == architecture_digest(net, adapt(AdaptMethod::none, {1})));
  CHECK(d0 != architecture_digest(net, adapt(AdaptMethod::ags)));
  CHECK(architecture_digest(net, adapt(AdaptMethod::ags, {1})) != architecture_digest(net, adapt(AdaptMethod::ags, {2})));
  auto wider = net;
  wider.hidden = 5;
  CHECK(d0 != architecture_digest(wider, adapt(AdaptMethod::none)));
}

TEST_CASE("end-to-end gradients of a small adapted model") {
  auto net = small_net();
  net.lstm_dropout = 0.0;
  auto cfg = adapt(AdaptMethod::ags, {1, 3});
  auto model = build_adapted_network<double>(net, cfg, 5);
  for (auto& layer : model.ags)
    if (layer) layer->gate.weight.mutable_value() = random(8, 4, 9) * 0.5;
  const M f = random(8, 6, 6);
  const LabelSeq labels{1, 2};
  std::vector<Var<double>> params;
  for (const auto& p : model.parameters())
    if (p.name.rfind("lstm2", 0) == 0 || p.name.rfind("ags", 0) == 0)
      params.push_back(p.var);
  Rng rng(1);
  auto loss = [&] { return ctc_loss(model.forward(Var<double>::leaf(f), Mode::eval, rng), std::span<const int>(labels)); };
  // Some entries are close to zero, so the absolute error is the meaningful bound here.
  CHECK(finite_diff_check(loss, params).max_absolute_error < 1e-8);
}
