#pragma once

// Synthetic speaker-mismatch corpus, feature post-processing and the
// on-disk feature / manifest formats.
//
// Feature file (little-endian):
//   "FTR1" | u32 frames | u32 dims | frames*dims float32, frames outer.
// Manifest line (UTF-8):
//   <utt_id> TAB <speaker_id> TAB <relative feature path> TAB <label ids, space separated>

#include "ags/ctc.hpp"
#include "ags/io_errors.hpp"
#include "ags/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace ags {

struct FeatureSequence {
  std::string utt_id;
  std::string speaker_id;
  Matrix<float> features;  // T x d
};

struct SpeakerProfile {
  std::string id;
  RowVector<double> scale;   // per base dimension, in [scale_min, scale_max]
  RowVector<double> offset;  // per base dimension
  double noise = 0.0;
};

struct ManifestEntry {
  std::string utt_id;
  std::string speaker_id;
  std::string path;  // relative to the corpus root
  LabelSeq labels;
};

struct CorpusManifest {
  std::string split;
  std::vector<ManifestEntry> entries;
};

enum class CmvnMode { utterance, global, none };

std::string to_string(CmvnMode mode);
CmvnMode parse_cmvn_mode(const std::string& text);

struct SynthConfig {
  int vocab = 10;  // symbols, blank excluded
  int train_speakers = 8;
  int dev_speakers = 4;
  int test_speakers = 4;
  int utts_per_speaker = 20;
  int min_label_len = 2;
  int max_label_len = 8;
  int min_segment = 8;   // frames per symbol occurrence
  int max_segment = 12;
  int base_dim = 12;
  bool deltas = true;
  CmvnMode cmvn = CmvnMode::utterance;
  double prototype_scale = 1.0;
  double noise = 0.3;
  double speaker_noise_jitter = 0.5;  // per-speaker noise is noise * U[1 - j, 1 + j]
  double scale_min = 0.5;
  double scale_max = 1.5;
  double offset_std = 1.0;
  std::uint64_t seed = 1;

  void validate() const;
  int feature_dim() const { return deltas ? 3 * base_dim : base_dim; }
};

struct Corpus {
  CorpusManifest train, dev, test;
  std::vector<SpeakerProfile> speakers;
};

/// Writes <out>/{train,dev,test}.tsv and <out>/feats/<utt>.ftr. A pure
/// function of `cfg`: the same config yields byte-identical files.
Corpus synth_generate(const SynthConfig& cfg, const std::filesystem::path& out_dir);

/// Regression deltas over +-window frames with edge replication, applied
/// twice; output is [x, delta, delta-delta].
template <typename Scalar>
Matrix<Scalar> compute_deltas(const Matrix<Scalar>& x, Index window = 2) {
  const Index frames = x.rows(), dims = x.cols();
  auto delta = [&](const Matrix<Scalar>& in) {
    Scalar norm = 0;
    for (Index n = 1; n <= window; ++n) norm += Scalar(n * n);
    norm *= Scalar(2);
    Matrix<Scalar> out = Matrix<Scalar>::Zero(frames, dims);
    for (Index t = 0; t < frames; ++t)
      for (Index n = 1; n <= window; ++n) {
        const Index ahead = std::min(t + n, frames - 1), behind = std::max(t - n, Index{0});
        out.row(t) += Scalar(n) * (in.row(ahead) - in.row(behind));
      }
    return Matrix<Scalar>(out / norm);
  };
  Matrix<Scalar> d1 = delta(x);
  Matrix<Scalar> d2 = delta(d1);
  Matrix<Scalar> out(frames, 3 * dims);
  out << x, d1, d2;
  return out;
}

/// Per-dimension zero mean, unit variance over the frames of one utterance.
/// Standard deviations below 1e-8 are floored.
template <typename Scalar>
Matrix<Scalar> cmvn(const Matrix<Scalar>& x) {
  const RowVector<Scalar> mean = x.colwise().mean();
  Matrix<Scalar> centered = x.rowwise() - mean;
  RowVector<Scalar> std_dev = (centered.array().square().colwise().sum() / Scalar(x.rows())).sqrt().matrix();
  std_dev = std_dev.cwiseMax(Scalar(1e-8));
  return centered.array().rowwise() / std_dev.array();
}

void write_features(const std::filesystem::path& path, const FeatureSequence& seq);
/// Throws FormatError (bad magic), TruncationError (short payload) or
/// HeaderMismatchError (trailing bytes); messages name the path.
FeatureSequence read_features(const std::filesystem::path& path);

void write_manifest(const std::filesystem::path& path, const CorpusManifest& manifest);
CorpusManifest read_manifest(const std::filesystem::path& path, const std::string& split);

/// Loaded utterance ready for the model.
template <typename Scalar>
struct Utterance {
  std::string utt_id;
  std::string speaker_id;
  Matrix<Scalar> features;
  LabelSeq labels;
};

template <typename Scalar>
std::vector<Utterance<Scalar>> load_split(const std::filesystem::path& corpus_dir, const std::string& split) {
  const auto manifest = read_manifest(corpus_dir / (split + ".tsv"), split);
  std::vector<Utterance<Scalar>> out;
  out.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) {
    auto seq = read_features(corpus_dir / e.path);
    out.push_back({e.utt_id, e.speaker_id, seq.features.template cast<Scalar>(), e.labels});
  }
  return out;
}

}  // namespace ags
