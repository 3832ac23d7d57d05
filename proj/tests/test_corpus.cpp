#include "ags/corpus.hpp"
#include "ags/layers.hpp"

#include <doctest.h>

#include <cstring>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

using namespace ags;
namespace fs = std::filesystem;
using M = Matrix<double>;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("ags_corpus_test_" + name);
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

SynthConfig tiny() {
  SynthConfig cfg;
  cfg.train_speakers = 3;
  cfg.dev_speakers = 2;
  cfg.test_speakers = 2;
  cfg.utts_per_speaker = 3;
  cfg.base_dim = 5;
  return cfg;
}

M random(Index rows, Index cols, std::uint64_t seed) {
  Rng rng(seed);
  return uniform_matrix<double>(rows, cols, 2.0, rng);
}

}  // namespace

TEST_CASE("generation is a pure function of the config") {
  const auto a = scratch("det_a"), b = scratch("det_b");
  synth_generate(tiny(), a);
  synth_generate(tiny(), b);
  std::size_t files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), a);
    CHECK(slurp(entry.path()) == slurp(b / rel));
    ++files;
  }
  CHECK(files == 3 + 7 * 3);

  auto other = tiny();
  other.seed = 2;
  const auto c = scratch("det_c");
  synth_generate(other, c);
  CHECK(slurp(a / "train.tsv") != slurp(c / "train.tsv"));
}

TEST_CASE("splits use disjoint speakers and respect label lengths") {
  auto cfg = tiny();
  cfg.min_label_len = 3;
  cfg.max_label_len = 5;
  const auto corpus = synth_generate(cfg, scratch("splits"));
  std::set<std::string> seen[3];
  const CorpusManifest* ms[3] = {&corpus.train, &corpus.dev, &corpus.test};
  for (int i = 0; i < 3; ++i)
    for (const auto& e : ms[i]->entries) {
      seen[i].insert(e.speaker_id);
      CHECK(e.labels.size() >= 3);
      CHECK(e.labels.size() <= 5);
      for (int l : e.labels) CHECK((l >= 1 && l <= cfg.vocab));
    }
  CHECK(seen[0].size() == 3);
  CHECK(seen[1].size() == 2);
  CHECK(seen[2].size() == 2);
  for (int i = 0; i < 3; ++i)
    for (int j = i + 1; j < 3; ++j)
      for (const auto& s : seen[i]) CHECK(seen[j].count(s) == 0);
  CHECK(corpus.speakers.size() == 7);
}

TEST_CASE("generated utterances have feasible alignments after four-fold pooling") {
  auto cfg = tiny();
  cfg.max_label_len = 8;
  const auto dir = scratch("feasible");
  synth_generate(cfg, dir);
  for (const auto& u : load_split<float>(dir, "train")) {
    CHECK(u.features.cols() == cfg.feature_dim());
    const Index pooled = ((u.features.rows() + 1) / 2 + 1) / 2;
    CHECK(pooled >= ctc_min_frames(u.labels));
  }
}

TEST_CASE("deltas of a constant vanish and of a ramp are one then zero") {
  const M constant = M::Constant(7, 2, 3.0);
  const M d = compute_deltas(constant);
  CHECK(d.cols() == 6);
  CHECK(d.leftCols(2) == constant);
  CHECK(d.rightCols(4).isZero(0.0));

  M ramp(9, 1);
  for (Index t = 0; t < 9; ++t) ramp(t, 0) = double(t);
  const M r = compute_deltas(ramp);
  // Away from the replicated edges the slope is exact.
  for (Index t = 2; t < 7; ++t) CHECK(r(t, 1) == doctest::Approx(1.0).epsilon(1e-12));
  for (Index t = 4; t < 5; ++t) CHECK(std::abs(r(t, 2)) < 1e-12);
  CHECK(compute_deltas(M(M::Zero(4, 36))).cols() == 108);
}

TEST_CASE("reversing time negates the first delta") {
  const M x = random(8, 3, 1);
  const M fwd = compute_deltas(x);
  const M rev = compute_deltas(M(x.colwise().reverse()));
  CHECK((M(fwd.middleCols(3, 3).colwise().reverse()) + rev.middleCols(3, 3)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((M(fwd.rightCols(3).colwise().reverse()) - rev.rightCols(3)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("CMVN normalizes, tolerates constant columns and removes affine maps") {
  M x = random(20, 4, 2);
  x.col(3).setConstant(5.0);
  const M y = cmvn(x);
  CHECK(y.colwise().mean().cwiseAbs().maxCoeff() < 1e-12);
  for (Index d = 0; d < 3; ++d) CHECK((y.col(d).array().square().mean()) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(y.col(3).isZero(0.0));

  RowVector<double> scale(4), shift(4);
  scale << 2.0, 0.5, 3.0, 1.0;
  shift << -1.0, 4.0, 0.2, 7.0;
  const M affine = (x.array().rowwise() * scale.array()).rowwise() + shift.array();
  CHECK((cmvn(M(affine)).leftCols(3) - y.leftCols(3)).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((cmvn(y) - y).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("global CMVN leaves training features at zero mean and unit variance") {
  auto cfg = tiny();
  cfg.cmvn = CmvnMode::global;
  const auto dir = scratch("global");
  synth_generate(cfg, dir);
  const auto train = load_split<double>(dir, "train");
  const Index dims = cfg.feature_dim();
  RowVector<double> sum = RowVector<double>::Zero(dims), sq = RowVector<double>::Zero(dims);
  double frames = 0;
  for (const auto& u : train) {
    sum += u.features.colwise().sum();
    sq += u.features.array().square().matrix().colwise().sum();
    frames += double(u.features.rows());
  }
  CHECK((sum / frames).cwiseAbs().maxCoeff() < 1e-4);
  CHECK(((sq / frames).array() - 1.0).abs().maxCoeff() < 1e-4);
}

TEST_CASE("feature files round-trip bit for bit") {
  const auto dir = scratch("roundtrip");
  FeatureSequence seq{"utt", "spk", random(6, 4, 3).cast<float>()};
  seq.features(0, 0) = -0.0f;
  seq.features(1, 1) = std::numeric_limits<float>::denorm_min();
  write_features(dir / "utt.ftr", seq);
  const auto back = read_features(dir / "utt.ftr");
  CHECK(back.utt_id == "utt");
  REQUIRE(back.features.rows() == 6);
  REQUIRE(back.features.cols() == 4);
  CHECK(std::memcmp(back.features.data(), seq.features.data(), sizeof(float) * 24) == 0);
  CHECK(slurp(dir / "utt.ftr").size() == 12 + 4 * 24);
}

TEST_CASE("corrupt feature files raise typed errors naming the path") {
  const auto dir = scratch("corrupt");
  write_features(dir / "a.ftr", {"a", "s", random(3, 2, 4).cast<float>()});
  const std::string good = slurp(dir / "a.ftr");

  spit(dir / "magic.ftr", "XTR1" + good.substr(4));
  CHECK_THROWS_AS(read_features(dir / "magic.ftr"), FormatError);

  spit(dir / "short.ftr", good.substr(0, good.size() - 3));
  try {
    read_features(dir / "short.ftr");
    FAIL("expected truncation");
  } catch (const TruncationError& e) {
    CHECK(std::string(e.what()).find("short.ftr") != std::string::npos);
    CHECK(std::string(e.what()).find(std::to_string(good.size() - 3)) != std::string::npos);
  }

  spit(dir / "long.ftr", good + "xy");
  CHECK_THROWS_AS(read_features(dir / "long.ftr"), HeaderMismatchError);
  spit(dir / "tiny.ftr", "FTR1\x01");
  CHECK_THROWS_AS(read_features(dir / "tiny.ftr"), TruncationError);
  CHECK_THROWS_AS(read_features(dir / "missing.ftr"), IoError);
}

TEST_CASE("manifests round-trip") {
  const auto dir = scratch("manifest");
  CorpusManifest m;
  m.split = "dev";
  m.entries = {{"u1", "s1", "feats/u1.ftr", {1, 2, 3}}, {"u2", "s2", "feats/u2.ftr", {}}};
  write_manifest(dir / "dev.tsv", m);
  const auto back = read_manifest(dir / "dev.tsv", "dev");
  REQUIRE(back.entries.size() == 2);
  CHECK(back.entries[0].labels == LabelSeq{1, 2, 3});
  CHECK(back.entries[1].labels.empty());
  CHECK(back.entries[1].path == "feats/u2.ftr");
  CHECK_THROWS_AS(read_manifest(dir / "nope.tsv", "x"), IoError);
  spit(dir / "bad.tsv", "u1\ts1\n");
  CHECK_THROWS_AS(read_manifest(dir / "bad.tsv", "bad"), FormatError);
}

TEST_CASE("invalid corpus configs are rejected") {
  auto cfg = tiny();
  cfg.train_speakers = 0;
  CHECK_THROWS(cfg.validate());
  cfg = tiny();
  cfg.scale_min = 2.0;
  CHECK_THROWS(cfg.validate());
  CHECK_THROWS_AS(parse_cmvn_mode("weird"), std::invalid_argument);
}
