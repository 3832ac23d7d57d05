#include "ags/ctc.hpp"
#include "ags/gradcheck.hpp"
#include "ags/layers.hpp"

#include <doctest.h>

#include <cmath>

using namespace ags;
using M = Matrix<double>;
using V = Var<double>;

namespace {

M log_probs(const M& probs) { return probs.array().log(); }

M random_logprobs(Index frames, Index symbols, Rng& rng) {
  const M logits = uniform_matrix<double>(frames, symbols, 3.0, rng);
  const M shifted = logits.colwise() - logits.rowwise().maxCoeff();
  return shifted.colwise() - shifted.array().exp().rowwise().sum().log().matrix();
}

double loss(const M& lp, const LabelSeq& labels) { return ctc_loss(lp, std::span<const int>(labels)); }

}  // namespace

TEST_CASE("collapse merges repeats before dropping blanks") {
  CHECK(collapse(LabelSeq{1, 1, 0, 1, 2, 2, 0}) == LabelSeq{1, 1, 2});
  CHECK(collapse(LabelSeq{0, 0, 0}).empty());
  CHECK(collapse(LabelSeq{}).empty());
}

TEST_CASE("minimum frames count the blanks between repeats") {
  CHECK(ctc_min_frames(LabelSeq{}) == 0);
  CHECK(ctc_min_frames(LabelSeq{1, 2, 3}) == 3);
  CHECK(ctc_min_frames(LabelSeq{1, 1, 2, 2}) == 6);
}

TEST_CASE("single frame, single label") {
  M p(1, 2);
  p << 0.3, 0.7;
  CHECK(loss(log_probs(p), {1}) == doctest::Approx(-std::log(0.7)).epsilon(1e-14));
}

TEST_CASE("two frames, one label: three paths") {
  M p(2, 2);
  p << 0.2, 0.8,  //
      0.6, 0.4;
  // Paths 11, 10, 01.
  const double mass = 0.8 * 0.4 + 0.8 * 0.6 + 0.2 * 0.4;
  CHECK(loss(log_probs(p), {1}) == doctest::Approx(-std::log(mass)).epsilon(1e-14));
}

TEST_CASE("repeated label needs the separating blank") {
  M p(3, 2);
  p << 0.1, 0.9,  //
      0.5, 0.5,   //
      0.3, 0.7;
  // Only 1 0 1 collapses to [1, 1].
  CHECK(loss(log_probs(p), {1, 1}) == doctest::Approx(-std::log(0.9 * 0.5 * 0.7)).epsilon(1e-14));
  CHECK_THROWS_AS(loss(log_probs(p.topRows(2)), {1, 1}), InfeasibleAlignment);
}

TEST_CASE("uniform distribution counts paths") {
  // Over {0,1,2} with T=3, six paths collapse to [1].
  const M lp = M::Constant(3, 3, -std::log(3.0));
  CHECK(loss(lp, {1}) == doctest::Approx(-std::log(6.0 / 27.0)).epsilon(1e-14));
  // Empty target: only the all-blank path.
  CHECK(loss(lp, {}) == doctest::Approx(3.0 * std::log(3.0)).epsilon(1e-14));
}

TEST_CASE("bad inputs") {
  const M lp = M::Constant(3, 3, -std::log(3.0));
  CHECK_THROWS_AS(loss(lp, {3}), std::invalid_argument);
  CHECK_THROWS_AS(loss(lp, {0}), std::invalid_argument);
  CHECK_THROWS_AS(loss(M::Zero(0, 3), {}), DimensionError);
  CHECK_THROWS_AS(loss(lp, {1, 2, 1, 2}), InfeasibleAlignment);
}

TEST_CASE("forward-backward matches exhaustive enumeration") {
  Rng rng(17);
  std::uniform_int_distribution<int> vocab_dist(1, 3), frames_dist(1, 6), len_dist(0, 3);
  int checked = 0;
  while (checked < 300) {
    const int vocab = vocab_dist(rng);
    const Index frames = frames_dist(rng);
    LabelSeq labels(static_cast<std::size_t>(len_dist(rng)));
    std::uniform_int_distribution<int> sym(1, vocab);
    for (auto& l : labels) l = sym(rng);
    if (ctc_min_frames(labels) > frames) {
      CHECK_THROWS_AS(loss(random_logprobs(frames, vocab + 1, rng), labels), InfeasibleAlignment);
      continue;
    }
    const M lp = random_logprobs(frames, vocab + 1, rng);
    CHECK(std::abs(loss(lp, labels) - ctc_oracle(lp, std::span<const int>(labels))) <= 1e-9);
    ++checked;
  }
}

TEST_CASE("alpha and beta agree on the total at every frame") {
  Rng rng(3);
  const M lp = random_logprobs(8, 4, rng);
  const LabelSeq labels{1, 3, 3};
  const auto lat = ctc_lattice(lp, std::span<const int>(labels));
  for (Index t = 0; t < lp.rows(); ++t) {
    double total = log_zero<double>();
    for (Index s = 0; s < static_cast<Index>(lat.augmented.size()); ++s) {
      const double a = lat.log_alpha(t, s), b = lat.log_beta(t, s);
      if (a == log_zero<double>() || b == log_zero<double>()) continue;
      total = log_add(total, a + b - lp(t, lat.augmented[s]));
    }
    CHECK(total == doctest::Approx(lat.log_likelihood).epsilon(1e-12));
  }
}

TEST_CASE("gradient rows sum to zero and match finite differences") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    V logits = V::param(uniform_matrix<double>(6, 4, 2.0, rng));
    const LabelSeq labels{1, 2, 2};
    auto f = [&] { return ctc_loss(logits, std::span<const int>(labels)); };
    CHECK(finite_diff_check(f, {logits}).max_relative_error < 1e-4);
    CHECK(logits.grad().rowwise().sum().cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("log_add") {
  CHECK(log_add(log_zero<double>(), 1.5) == 1.5);
  CHECK(log_add(std::log(2.0), std::log(3.0)) == doctest::Approx(std::log(5.0)).epsilon(1e-15));
  CHECK(log_add(-1000.0, -1000.0) == doctest::Approx(-1000.0 + std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("greedy decode") {
  M lp(6, 3);
  lp << 0, -1, -2,   //
      -2, 0, -1,     //
      -2, 0, -1,     //
      0, -1, -1,     //
      -1, -1, -2,    // tie between blank and 1: blank wins
      -1, -2, 0;
  CHECK(greedy_decode(lp) == LabelSeq{1, 2});
  M all_blank = M::Zero(4, 3);
  all_blank.col(1).setConstant(-1);
  all_blank.col(2).setConstant(-1);
  CHECK(greedy_decode(all_blank).empty());
}

TEST_CASE("oracle refuses huge enumerations") {
  const M lp = M::Constant(11, 4, -std::log(4.0));
  CHECK_THROWS_AS(ctc_oracle(lp, std::span<const int>(LabelSeq{1})), std::invalid_argument);
}
