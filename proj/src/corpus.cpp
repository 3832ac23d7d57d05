#include "ags/corpus.hpp"

#include "ags/layers.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

namespace ags {

namespace fs = std::filesystem;

std::string to_string(CmvnMode mode) {
  switch (mode) {
    case CmvnMode::utterance: return "utterance";
    case CmvnMode::global: return "global";
    case CmvnMode::none: return "none";
  }
  return "?";
}

CmvnMode parse_cmvn_mode(const std::string& text) {
  if (text == "utterance") return CmvnMode::utterance;
  if (text == "global") return CmvnMode::global;
  if (text == "none") return CmvnMode::none;
  throw std::invalid_argument("unknown cmvn mode '" + text + "'");
}

void SynthConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("corpus: ") + what);
  };
  require(vocab >= 2, "vocab must be at least 2");
  require(train_speakers >= 1 && dev_speakers >= 1 && test_speakers >= 1, "every split needs a speaker");
  require(utts_per_speaker >= 1, "utts_per_speaker must be positive");
  require(min_label_len >= 1 && min_label_len <= max_label_len, "label length range must be nonempty");
  require(min_segment >= 1 && min_segment <= max_segment, "segment length range must be nonempty");
  require(base_dim >= 1, "base_dim must be positive");
  require(scale_min > 0 && scale_min <= scale_max, "scale range must be nonempty and positive");
  require(noise >= 0 && offset_std >= 0 && prototype_scale > 0, "noise and offset levels must be nonnegative");
  require(speaker_noise_jitter >= 0 && speaker_noise_jitter < 1, "speaker_noise_jitter must lie in [0, 1)");
}

namespace {

struct Draft {
  ManifestEntry entry;
  Matrix<double> features;
};

std::vector<Draft> synth_split(const SynthConfig& cfg, const std::string& split, int speaker_count,
                               const std::vector<std::pair<RowVector<double>, RowVector<double>>>& prototypes,
                               std::vector<SpeakerProfile>& speakers, Rng& rng) {
  std::uniform_real_distribution<double> scale_dist(cfg.scale_min, cfg.scale_max);
  std::normal_distribution<double> offset_dist(0.0, 1.0);
  std::uniform_real_distribution<double> jitter(1.0 - cfg.speaker_noise_jitter, 1.0 + cfg.speaker_noise_jitter);
  std::uniform_int_distribution<int> len_dist(cfg.min_label_len, cfg.max_label_len);
  std::uniform_int_distribution<int> seg_dist(cfg.min_segment, cfg.max_segment);
  std::uniform_int_distribution<int> sym_dist(1, cfg.vocab);
  std::normal_distribution<double> unit(0.0, 1.0);

  std::vector<Draft> drafts;
  for (int s = 0; s < speaker_count; ++s) {
    std::ostringstream sid;
    sid << split << "_spk" << std::setw(3) << std::setfill('0') << s;
    SpeakerProfile spk{sid.str(), RowVector<double>(cfg.base_dim), RowVector<double>(cfg.base_dim), 0.0};
    for (int d = 0; d < cfg.base_dim; ++d) spk.scale(d) = scale_dist(rng);
    for (int d = 0; d < cfg.base_dim; ++d) spk.offset(d) = cfg.offset_std * offset_dist(rng);
    spk.noise = cfg.noise * jitter(rng);

    for (int u = 0; u < cfg.utts_per_speaker; ++u) {
      std::ostringstream uid;
      uid << spk.id << "_u" << std::setw(3) << std::setfill('0') << u;
      Draft draft;
      draft.entry.utt_id = uid.str();
      draft.entry.speaker_id = spk.id;
      draft.entry.path = "feats/" + draft.entry.utt_id + ".ftr";
      const int n_labels = len_dist(rng);
      std::vector<int> seg_lens;
      for (int i = 0; i < n_labels; ++i) {
        draft.entry.labels.push_back(sym_dist(rng));
        seg_lens.push_back(seg_dist(rng));
      }
      Index frames = 0;
      for (int n : seg_lens) frames += n;
      Matrix<double> clean(frames, cfg.base_dim);
      Index at = 0;
      for (int i = 0; i < n_labels; ++i) {
        const auto& [start, end] = prototypes[static_cast<std::size_t>(draft.entry.labels[i] - 1)];
        const int n = seg_lens[static_cast<std::size_t>(i)];
        for (int k = 0; k < n; ++k) {
          const double w = n == 1 ? 0.0 : double(k) / double(n - 1);
          clean.row(at++) = (1.0 - w) * start + w * end;
        }
      }
      for (Index i = 0; i < clean.size(); ++i) clean.data()[i] += spk.noise * unit(rng);
      Matrix<double> shifted = (clean.array().rowwise() * spk.scale.array()).rowwise() + spk.offset.array();
      draft.features = cfg.deltas ? compute_deltas(shifted) : shifted;
      if (cfg.cmvn == CmvnMode::utterance) draft.features = cmvn(draft.features);
      drafts.push_back(std::move(draft));
    }
    speakers.push_back(std::move(spk));
  }
  return drafts;
}

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}

std::string read_all(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

Corpus synth_generate(const SynthConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  Rng rng(cfg.seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<std::pair<RowVector<double>, RowVector<double>>> prototypes;
  for (int v = 0; v < cfg.vocab; ++v) {
    RowVector<double> start(cfg.base_dim), end(cfg.base_dim);
    for (int d = 0; d < cfg.base_dim; ++d) start(d) = cfg.prototype_scale * unit(rng);
    for (int d = 0; d < cfg.base_dim; ++d) end(d) = cfg.prototype_scale * unit(rng);
    prototypes.emplace_back(std::move(start), std::move(end));
  }

  Corpus corpus;
  std::array<std::vector<Draft>, 3> splits{
      synth_split(cfg, "train", cfg.train_speakers, prototypes, corpus.speakers, rng),
      synth_split(cfg, "dev", cfg.dev_speakers, prototypes, corpus.speakers, rng),
      synth_split(cfg, "test", cfg.test_speakers, prototypes, corpus.speakers, rng)};

  if (cfg.cmvn == CmvnMode::global) {
    // Statistics from the training split only, applied everywhere.
    const Index dims = splits[0].front().features.cols();
    RowVector<double> sum = RowVector<double>::Zero(dims), sq = RowVector<double>::Zero(dims);
    double frames = 0;
    for (const auto& d : splits[0]) {
      sum += d.features.colwise().sum();
      sq += d.features.array().square().matrix().colwise().sum();
      frames += double(d.features.rows());
    }
    const RowVector<double> mean = sum / frames;
    RowVector<double> sd = (sq / frames - mean.cwiseProduct(mean)).cwiseMax(0.0).cwiseSqrt();
    sd = sd.cwiseMax(1e-8);
    for (auto& split : splits)
      for (auto& d : split) d.features = (d.features.rowwise() - mean).array().rowwise() / sd.array();
  }

  std::error_code ec;
  fs::create_directories(out_dir / "feats", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "feats").string() + ": " + ec.message());

  const std::array<const char*, 3> names{"train", "dev", "test"};
  std::array<CorpusManifest*, 3> manifests{&corpus.train, &corpus.dev, &corpus.test};
  for (std::size_t i = 0; i < 3; ++i) {
    manifests[i]->split = names[i];
    for (auto& d : splits[i]) {
      write_features(out_dir / d.entry.path, {d.entry.utt_id, d.entry.speaker_id, d.features.cast<float>()});
      manifests[i]->entries.push_back(std::move(d.entry));
    }
    write_manifest(out_dir / (std::string(names[i]) + ".tsv"), *manifests[i]);
  }
  return corpus;
}

void write_features(const fs::path& path, const FeatureSequence& seq) {
  const auto& m = seq.features;
  std::string buf = "FTR1";
  buf.reserve(12 + 4 * static_cast<std::size_t>(m.size()));
  put_u32(buf, static_cast<std::uint32_t>(m.rows()));
  put_u32(buf, static_cast<std::uint32_t>(m.cols()));
  for (Index i = 0; i < m.size(); ++i) put_u32(buf, std::bit_cast<std::uint32_t>(m.data()[i]));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

FeatureSequence read_features(const fs::path& path) {
  const std::string buf = read_all(path);
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
  if (buf.size() < 4 || std::memcmp(p, "FTR1", 4) != 0) throw FormatError(path.string() + ": not a feature file (bad magic)");
  if (buf.size() < 12) throw TruncationError(path.string() + ": truncated header at byte " + std::to_string(buf.size()));
  const std::uint32_t frames = get_u32(p + 4), dims = get_u32(p + 8);
  const std::uint64_t payload = 4ULL * frames * dims;
  const std::uint64_t have = buf.size() - 12;
  if (have < payload)
    throw TruncationError(path.string() + ": header declares " + std::to_string(frames) + "x" + std::to_string(dims) +
                          " floats but payload ends at byte " + std::to_string(buf.size()));
  if (have > payload)
    throw HeaderMismatchError(path.string() + ": " + std::to_string(have - payload) + " bytes beyond the declared " +
                              std::to_string(frames) + "x" + std::to_string(dims) + " payload");
  FeatureSequence seq;
  seq.utt_id = path.stem().string();
  seq.features.resize(frames, dims);
  for (Index i = 0; i < seq.features.size(); ++i)
    seq.features.data()[i] = std::bit_cast<float>(get_u32(p + 12 + 4 * i));
  return seq;
}

void write_manifest(const fs::path& path, const CorpusManifest& manifest) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& e : manifest.entries) {
    out << e.utt_id << '\t' << e.speaker_id << '\t' << e.path << '\t';
    for (std::size_t i = 0; i < e.labels.size(); ++i) out << (i ? " " : "") << e.labels[i];
    out << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

CorpusManifest read_manifest(const fs::path& path, const std::string& split) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  CorpusManifest manifest;
  manifest.split = split;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t tab; (tab = line.find('\t', start)) != std::string::npos; start = tab + 1)
      fields.push_back(line.substr(start, tab - start));
    fields.push_back(line.substr(start));
    if (fields.size() != 4)
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected 4 tab-separated fields");
    ManifestEntry e{fields[0], fields[1], fields[2], {}};
    std::istringstream ids(fields[3]);
    for (std::string tok; ids >> tok;) {
      try {
        e.labels.push_back(std::stoi(tok));
      } catch (const std::exception&) {
        throw FormatError(path.string() + ":" + std::to_string(line_no) + ": bad label id '" + tok + "'");
      }
    }
    manifest.entries.push_back(std::move(e));
  }
  return manifest;
}

}  // namespace ags
