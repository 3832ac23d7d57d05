#include "ags/train.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

using namespace ags;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("ags_train_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << bytes;
}

// Textbook Levenshtein table.
std::size_t dp_oracle(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<std::vector<std::size_t>> d(a.size() + 1, std::vector<std::size_t>(b.size() + 1));
  for (std::size_t i = 0; i <= a.size(); ++i) d[i][0] = i;
  for (std::size_t j = 0; j <= b.size(); ++j) d[0][j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i)
    for (std::size_t j = 1; j <= b.size(); ++j)
      d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] != b[j - 1])});
  return d[a.size()][b.size()];
}

std::vector<int> chars(const std::string& s) { return {s.begin(), s.end()}; }

std::size_t ed(const std::vector<int>& a, const std::vector<int>& b) { return edit_distance(a, b); }

NetworkConfig tiny_net() {
  NetworkConfig net;
  net.input_dim = 6;
  net.conv_channels = {2, 2};
  net.lstm_layers = 2;
  net.hidden = 5;
  net.output_size = 4;
  return net;
}

AdaptConfig ags_adapt() {
  AdaptConfig a;
  a.method = AdaptMethod::ags;
  a.layers = {2};
  a.attention_dim = 4;
  return a;
}

struct TinyData {
  std::vector<Utterance<float>> train, dev;
};

TinyData tiny_data() {
  SynthConfig cfg;
  cfg.vocab = 3;
  cfg.train_speakers = 2;
  cfg.dev_speakers = 1;
  cfg.test_speakers = 1;
  cfg.utts_per_speaker = 4;
  cfg.base_dim = 2;
  cfg.max_label_len = 4;
  const auto dir = scratch("data");
  synth_generate(cfg, dir);
  return {load_split<float>(dir, "train"), load_split<float>(dir, "dev")};
}

TrainConfig quick_train(int epochs) {
  TrainConfig cfg;
  cfg.learning_rate = 0.01;
  cfg.batch_size = 3;
  cfg.max_epochs = epochs;
  cfg.stop_threshold = 1e-12;
  cfg.halve_threshold = 2e-12;
  cfg.seed = 4;
  return cfg;
}

}  // namespace

TEST_CASE("schedule: first metric is the reference, then keep, halve, stop") {
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  auto s = make_schedule(cfg);
  std::vector<ScheduleAction> trace;
  for (double m : {10.0, 9.0, 8.99, 8.9899}) trace.push_back(lr_schedule_update(s, m, cfg));
  CHECK(trace == std::vector{ScheduleAction::keep, ScheduleAction::keep, ScheduleAction::halve, ScheduleAction::stop});
  CHECK(s.lr == 0.05);
}

TEST_CASE("schedule: sticky halving keeps halving after a good epoch") {
  TrainConfig cfg;
  cfg.learning_rate = 1.0;
  auto s = make_schedule(cfg, 10.0);
  CHECK(lr_schedule_update(s, 9.99, cfg) == ScheduleAction::halve);  // 0.001
  CHECK(lr_schedule_update(s, 5.0, cfg) == ScheduleAction::halve);   // large gain, still halving
  CHECK(s.lr == 0.25);
  cfg.sticky_halving = false;
  auto t = make_schedule(cfg, 10.0);
  CHECK(lr_schedule_update(t, 9.99, cfg) == ScheduleAction::halve);
  CHECK(lr_schedule_update(t, 5.0, cfg) == ScheduleAction::keep);
  CHECK(t.lr == 0.5);
}

TEST_CASE("schedule: a worse dev metric stops, thresholds are strict") {
  TrainConfig cfg;
  auto s = make_schedule(cfg, 1.0);
  CHECK(lr_schedule_update(s, 1.1, cfg) == ScheduleAction::stop);
  auto exact = make_schedule(cfg, 1.0);
  CHECK(lr_schedule_update(exact, 1.0 - 0.004, cfg) == ScheduleAction::keep);
  CHECK_THROWS_AS(lr_schedule_update(exact, 0.0, cfg), std::invalid_argument);
  CHECK_THROWS_AS(lr_schedule_update(exact, std::nan(""), cfg), std::invalid_argument);
}

TEST_CASE("schedule: the learning rate never increases") {
  TrainConfig cfg;
  cfg.learning_rate = 1.0;
  Rng rng(3);
  std::uniform_real_distribution<double> step(0.9, 1.0);
  auto s = make_schedule(cfg, 100.0);
  double metric = 100.0, lr = s.lr;
  int halves = 0;
  for (int i = 0; i < 50; ++i) {
    metric *= step(rng);
    const auto action = lr_schedule_update(s, metric, cfg);
    CHECK(s.lr <= lr);
    if (action == ScheduleAction::halve) {
      CHECK(s.lr == lr * 0.5);
      ++halves;
    }
    lr = s.lr;
    if (action == ScheduleAction::stop) break;
  }
  CHECK(s.lr == std::ldexp(1.0, -halves));
}

TEST_CASE("Adam matches a hand-computed three-step trace") {
  TrainConfig cfg;
  Var<double> p = Var<double>::param(Matrix<double>::Constant(1, 1, 1.0));
  AdamState<double> state;
  std::vector<Var<double>> params{p};
  const double lr = 0.1;
  double x = 1.0, m = 0, v = 0;
  for (int step = 1; step <= 3; ++step) {
    const double g = 2 * x;  // d/dx x^2
    std::vector<Matrix<double>> grads{Matrix<double>::Constant(1, 1, g)};
    adam_step<double>(params, grads, state, lr, cfg);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, step)), vh = v / (1 - std::pow(0.999, step));
    x -= lr * mh / (std::sqrt(vh) + 1e-8);
    CHECK(p.value()(0, 0) == doctest::Approx(x).epsilon(1e-14));
  }
  CHECK(state.step == 3);
  std::vector<Matrix<double>> wrong{Matrix<double>::Zero(2, 1)};
  CHECK_THROWS_AS(adam_step<double>(params, wrong, state, lr, cfg), DimensionError);
}

TEST_CASE("global norm clipping") {
  std::vector<Matrix<double>> g{Matrix<double>::Constant(1, 1, 3.0), Matrix<double>::Constant(1, 1, 4.0)};
  CHECK(clip_global_norm(g, 10.0) == 5.0);
  CHECK(g[0](0, 0) == 3.0);
  CHECK(clip_global_norm(g, 1.0) == 5.0);
  CHECK(g[0](0, 0) == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(g[1](0, 0) == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(clip_global_norm(g, 0.0) == doctest::Approx(1.0));
}

TEST_CASE("edit distance fixed cases match the DP oracle") {
  const std::vector<std::pair<std::string, std::string>> cases{
      {"kitten", "sitting"}, {"flaw", "lawn"}, {"", "abc"}, {"abc", ""}, {"", ""}, {"abc", "abc"}, {"intention", "execution"}};
  const std::vector<std::size_t> known{3, 2, 3, 3, 0, 0, 5};
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto a = chars(cases[i].first), b = chars(cases[i].second);
    CHECK(ed(a, b) == dp_oracle(a, b));
    CHECK(ed(a, b) == known[i]);
  }
}

TEST_CASE("edit distance is a metric on random sequences") {
  Rng rng(9);
  std::uniform_int_distribution<int> len(0, 10), sym(1, 4);
  auto draw = [&] {
    std::vector<int> s(static_cast<std::size_t>(len(rng)));
    for (auto& x : s) x = sym(rng);
    return s;
  };
  for (int i = 0; i < 1000; ++i) {
    const auto a = draw(), b = draw(), c = draw();
    CHECK(ed(a, a) == 0);
    CHECK(ed(a, b) == ed(b, a));
    CHECK(ed(a, c) <= ed(a, b) + ed(b, c));
    CHECK(ed(a, b) == dp_oracle(a, b));
    if (a != b) CHECK(ed(a, b) > 0);
  }
}

TEST_CASE("relative improvement matches the eight reference values") {
  const std::vector<std::array<double, 3>> rows{{8.46, 7.00, 17.26}, {9.96, 7.94, 20.28}, {8.46, 7.67, 9.34},
                                                {9.96, 8.78, 11.85}, {8.46, 7.82, 7.57},  {9.96, 8.92, 10.44},
                                                {8.46, 8.30, 1.89},  {9.96, 9.71, 2.51}};
  for (const auto& r : rows) CHECK(std::abs(relative_improvement(r[0], r[1]) - r[2]) <= 0.005);
  CHECK(relative_improvement(10.0, 12.0) == doctest::Approx(-20.0));
  CHECK_THROWS_AS(relative_improvement(0.0, 1.0), std::invalid_argument);
}

TEST_CASE("CER is total edits over total reference length") {
  EvalReport r;
  r.utterances = {{"a", {1, 2, 3}, {1, 3}, 1}, {"b", {1}, {2, 2}, 2}};
  finalize_report(r);
  CHECK(r.total_distance == 3);
  CHECK(r.total_reference == 4);
  CHECK(r.cer == 0.75);
  CHECK(r.to_tsv().find("a\t1 2 3\t1 3\t1\t3\n") != std::string::npos);
}

TEST_CASE("evaluate_cer for an all-blank model is exactly one") {
  auto model = build_adapted_network<double>(tiny_net(), AdaptConfig{}, 1);
  model.output.weight.mutable_value().setZero();
  model.output.bias.mutable_value() << 5.0, 0.0, 0.0, 0.0;
  std::vector<Utterance<double>> split{{"u", "s", Matrix<double>::Ones(8, 6), {1, 2}},
                                       {"v", "s", Matrix<double>::Ones(12, 6), {3}}};
  const auto report = evaluate_cer(model, split);
  CHECK(report.cer == 1.0);
  CHECK(report.system == "none");
  // A model that always emits symbol 1 then decodes one label per utterance.
  model.output.bias.mutable_value() << 0.0, 5.0, 0.0, 0.0;
  const auto ones = evaluate_cer(model, split);
  CHECK(ones.utterances[0].hypothesis == LabelSeq{1});
  CHECK(ones.cer == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("median") {
  CHECK(median({3.0, 1.0, 2.0}) == 2.0);
  CHECK(median({4.0, 1.0, 2.0, 3.0}) == 2.5);
  CHECK_THROWS(median({}));
}

TEST_CASE("same seed, same epoch log; training lowers the dev loss") {
  const auto data = tiny_data();
  std::vector<std::string> logs[2];
  for (auto& log : logs) {
    auto model = build_adapted_network<float>(tiny_net(), ags_adapt(), 3);
    TrainingState<float> state;
    const auto result = train_model(model, data.train, data.dev, quick_train(3), state);
    for (const auto& e : result.log) log.push_back(e.to_line());
    CHECK(result.best_dev_loss < result.initial_dev_loss);
  }
  CHECK(logs[0] == logs[1]);
  CHECK(logs[0].size() == 3);
}

TEST_CASE("checkpoints round-trip bit for bit and resume the same trajectory") {
  const auto data = tiny_data();
  const auto dir = scratch("ckpt");
  auto cfg = quick_train(4);

  auto straight = build_adapted_network<float>(tiny_net(), ags_adapt(), 5);
  TrainingState<float> s0;
  const auto full = train_model(straight, data.train, data.dev, cfg, s0);

  auto first = build_adapted_network<float>(tiny_net(), ags_adapt(), 5);
  TrainingState<float> s1;
  auto half = cfg;
  half.max_epochs = 2;
  train_model(first, data.train, data.dev, half, s1);
  save_checkpoint(dir / "a.ckpt", first, s1);

  auto second = build_adapted_network<float>(tiny_net(), ags_adapt(), 99);
  auto s2 = load_checkpoint(dir / "a.ckpt", second);
  CHECK(s2.epoch == 2);
  CHECK(s2.adam.step == s1.adam.step);
  CHECK(s2.schedule.lr == s1.schedule.lr);
  CHECK(s2.schedule.previous_metric == s1.schedule.previous_metric);
  const auto pa = first.parameters(), pb = second.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].var.value() == pb[i].var.value());
  save_checkpoint(dir / "b.ckpt", second, s2);
  CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));

  const auto rest = train_model(second, data.train, data.dev, cfg, s2);
  REQUIRE(rest.log.size() == 2);
  CHECK(rest.log[0].to_line() == full.log[2].to_line());
  CHECK(rest.log[1].to_line() == full.log[3].to_line());
}

TEST_CASE("checkpoint errors are typed") {
  const auto dir = scratch("ckpt_err");
  auto model = build_adapted_network<float>(tiny_net(), ags_adapt(), 1);
  save_checkpoint(dir / "m.ckpt", model, TrainingState<float>{});
  const std::string good = slurp(dir / "m.ckpt");

  auto other = build_adapted_network<float>(tiny_net(), AdaptConfig{}, 1);
  CHECK_THROWS_AS(load_checkpoint(dir / "m.ckpt", other), ConfigDriftError);
  CHECK(checkpoint_digest(dir / "m.ckpt") == architecture_digest(tiny_net(), ags_adapt()));

  std::string versioned = good;
  versioned[4] = 9;
  spit(dir / "v.ckpt", versioned);
  CHECK_THROWS_AS(load_checkpoint(dir / "v.ckpt", model), VersionError);

  spit(dir / "t.ckpt", good.substr(0, good.size() / 2));
  try {
    load_checkpoint(dir / "t.ckpt", model);
    FAIL("expected truncation");
  } catch (const TruncationError& e) {
    CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
  }
  spit(dir / "x.ckpt", good + "!");
  CHECK_THROWS_AS(load_checkpoint(dir / "x.ckpt", model), HeaderMismatchError);
  spit(dir / "bad.ckpt", "JUNKJUNK");
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.ckpt", model), FormatError);
  CHECK_THROWS_AS(load_checkpoint(dir / "none.ckpt", model), IoError);
}

TEST_CASE("ablation table arithmetic and layout") {
  AblationTable t;
  t.seeds = {1, 2};
  AdaptConfig ags = ags_adapt();
  ags.layers = {1, 2};
  t.rows.push_back({{"baseline", AdaptConfig{}}, {0.1, 0.2}, {0.2, 0.3}, 0.15, 0.25, std::nullopt, std::nullopt});
  t.rows.push_back({{"ags12", ags}, {0.1, 0.1}, {0.2, 0.2}, 0.1, 0.2, relative_improvement(0.15, 0.1),
                    relative_improvement(0.25, 0.2)});
  const auto tsv = t.to_tsv();
  CHECK(tsv.find("system\tadapted_layers\tdev_cer_seed1\tdev_cer_seed2\ttest_cer_seed1") == 0);
  CHECK(tsv.find("baseline\t-\t10.00\t20.00\t20.00\t30.00\t15.00\t25.00\t\t\n") != std::string::npos);
  CHECK(tsv.find("ags12\t1,2\t10.00\t10.00\t20.00\t20.00\t10.00\t20.00\t33.33\t20.00\n") != std::string::npos);
  CHECK(t.find("ags12") == &t.rows[1]);
  CHECK(t.find("nope") == nullptr);
}
