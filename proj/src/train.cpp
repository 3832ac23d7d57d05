#include "ags/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

namespace ags {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("train: ") + what);
  };
  require(learning_rate > 0, "learning rate must be positive");
  require(stop_threshold > 0 && stop_threshold < halve_threshold, "need 0 < stop_threshold < halve_threshold");
  require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "Adam betas must lie in [0, 1)");
  require(epsilon > 0, "Adam epsilon must be positive");
  require(batch_size >= 1, "batch_size must be positive");
  require(max_epochs >= 1, "max_epochs must be positive");
}

// ---------------------------------------------------------------------------
// Schedule

std::string to_string(ScheduleAction action) {
  switch (action) {
    case ScheduleAction::keep: return "keep";
    case ScheduleAction::halve: return "halve";
    case ScheduleAction::stop: return "stop";
  }
  return "?";
}

LrScheduleState make_schedule(const TrainConfig& cfg, std::optional<double> initial_metric) {
  LrScheduleState s;
  s.lr = cfg.learning_rate;
  if (initial_metric) {
    if (!(*initial_metric > 0)) throw std::invalid_argument("schedule: dev metric must be positive");
    s.previous_metric = initial_metric;
  }
  return s;
}

ScheduleAction lr_schedule_update(LrScheduleState& state, double metric, const TrainConfig& cfg) {
  if (!(metric > 0) || !std::isfinite(metric))
    throw std::invalid_argument("schedule: dev metric must be positive and finite, got " + std::to_string(metric));
  if (!state.previous_metric) {
    state.previous_metric = metric;
    return ScheduleAction::keep;
  }
  const double prev = *state.previous_metric;
  const double improvement = (prev - metric) / prev;
  state.previous_metric = metric;
  if (improvement < cfg.stop_threshold) return ScheduleAction::stop;
  if (improvement < cfg.halve_threshold || (cfg.sticky_halving && state.halving)) {
    state.halving = true;
    state.lr *= 0.5;
    return ScheduleAction::halve;
  }
  return ScheduleAction::keep;
}

// ---------------------------------------------------------------------------
// Adam

template <typename Scalar>
void adam_step(std::span<Var<Scalar>> params, std::span<const Matrix<Scalar>> grads, AdamState<Scalar>& state, double lr,
               const TrainConfig& cfg) {
  if (params.size() != grads.size())
    throw DimensionError("adam_step: " + std::to_string(params.size()) + " parameters but " +
                         std::to_string(grads.size()) + " gradients");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].rows() != grads[i].rows() || params[i].cols() != grads[i].cols())
      throw DimensionError("adam_step: gradient " + std::to_string(i) + " has the wrong shape for " +
                           shape_string(params[i].shape()));
    if (!grads[i].allFinite()) throw NumericError("adam_step: non-finite gradient for parameter " + std::to_string(i));
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(Matrix<Scalar>::Zero(p.rows(), p.cols()));
      state.v.push_back(Matrix<Scalar>::Zero(p.rows(), p.cols()));
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("adam_step: optimizer state was built for another model");

  ++state.step;
  const double correction1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  const double correction2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  const auto b1 = Scalar(cfg.beta1), b2 = Scalar(cfg.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.m[i];
    auto& v = state.v[i];
    m = b1 * m + (Scalar(1) - b1) * grads[i];
    v = b2 * v + (Scalar(1) - b2) * grads[i].cwiseProduct(grads[i]);
    const auto m_hat = m.array() / Scalar(correction1);
    const auto v_hat = v.array() / Scalar(correction2);
    params[i].mutable_value().array() -= Scalar(lr) * m_hat / (v_hat.sqrt() + Scalar(cfg.epsilon));
  }
}

template <typename Scalar>
double clip_global_norm(std::vector<Matrix<Scalar>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) sq += double(g.squaredNorm());
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const auto factor = Scalar(max_norm / norm);
    for (auto& g : grads) g *= factor;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Metrics

std::size_t edit_distance(std::span<const int> ref, std::span<const int> hyp) {
  std::vector<std::size_t> row(hyp.size() + 1);
  std::iota(row.begin(), row.end(), std::size_t{0});
  for (std::size_t i = 1; i <= ref.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= hyp.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (ref[i - 1] == hyp[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row.back();
}

double relative_improvement(double baseline_cer, double system_cer) {
  if (!(baseline_cer > 0)) throw std::invalid_argument("relative_improvement: baseline CER must be positive");
  return 100.0 * (baseline_cer - system_cer) / baseline_cer;
}

namespace {

std::string join_ids(const std::vector<int>& ids) {
  std::ostringstream os;
  for (std::size_t i = 0; i < ids.size(); ++i) os << (i ? " " : "") << ids[i];
  return os.str();
}

std::string join_layers(const std::vector<Index>& layers) {
  std::ostringstream os;
  for (std::size_t i = 0; i < layers.size(); ++i) os << (i ? "," : "") << layers[i];
  return os.str();
}

template <typename Scalar>
Matrix<Scalar> log_softmax(const Matrix<Scalar>& logits) {
  const Matrix<Scalar> shifted = logits.colwise() - logits.rowwise().maxCoeff();
  return shifted.colwise() - shifted.array().exp().rowwise().sum().log().matrix();
}

template <typename Scalar>
bool feasible(const AcousticModel<Scalar>& model, const Utterance<Scalar>& utt) {
  return ctc_min_frames(utt.labels) <= model.network_config().frames_after_frontend(utt.features.rows());
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  // splitmix64 finalizer
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

void finalize_report(EvalReport& report) {
  report.total_distance = 0;
  report.total_reference = 0;
  for (const auto& u : report.utterances) {
    report.total_distance += u.distance;
    report.total_reference += u.reference.size();
  }
  report.cer = report.total_reference ? double(report.total_distance) / double(report.total_reference) : 0.0;
}

std::string EvalReport::to_tsv() const {
  std::ostringstream os;
  os << "utt_id\treference\thypothesis\tdistance\treference_length\n";
  for (const auto& u : utterances)
    os << u.utt_id << '\t' << join_ids(u.reference) << '\t' << join_ids(u.hypothesis) << '\t' << u.distance << '\t'
       << u.reference.size() << '\n';
  return os.str();
}

template <typename Scalar>
EvalReport evaluate_cer(const AcousticModel<Scalar>& model, const std::vector<Utterance<Scalar>>& split) {
  if (split.empty()) throw std::invalid_argument("evaluate_cer: empty split");
  EvalReport report;
  report.system = to_string(model.adapt_config().method);
  if (model.adapt_config().method == AdaptMethod::ags || model.adapt_config().method == AdaptMethod::lhuc)
    report.adapted_layers = model.adapt_config().layers;
  for (const auto& utt : split) {
    const auto hyp = greedy_decode(log_softmax(model.logits_eval(utt.features)));
    report.utterances.push_back({utt.utt_id, utt.labels, hyp, edit_distance(utt.labels, hyp)});
  }
  finalize_report(report);
  return report;
}

// ---------------------------------------------------------------------------
// Training

std::string EpochSummary::to_line() const {
  std::ostringstream os;
  os << std::setprecision(9) << "epoch=" << epoch << " train_loss=" << train_loss << " dev_loss=" << dev_loss
     << " lr=" << lr << " action=" << to_string(action) << " trained=" << trained << " skipped=" << skipped;
  return os.str();
}

template <typename Scalar>
double mean_loss(const AcousticModel<Scalar>& model, const std::vector<Utterance<Scalar>>& split) {
  double total = 0.0;
  std::size_t counted = 0;
  for (const auto& utt : split) {
    if (!feasible(model, utt)) continue;
    const Matrix<Scalar> logprobs = log_softmax(model.logits_eval(utt.features));
    total += double(ctc_loss(logprobs, std::span<const int>(utt.labels)));
    ++counted;
  }
  if (counted == 0) throw std::invalid_argument("mean_loss: no utterance has a feasible alignment");
  return total / double(counted);
}

template <typename Scalar>
EpochSummary train_epoch(AcousticModel<Scalar>& model, const std::vector<Utterance<Scalar>>& split,
                         const TrainConfig& cfg, TrainingState<Scalar>& state) {
  if (split.empty()) throw std::invalid_argument("train_epoch: empty split");
  const int epoch = state.epoch + 1;
  Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
  std::vector<std::size_t> order(split.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);

  auto named = model.parameters();
  std::vector<Var<Scalar>> params;
  for (auto& p : named) params.push_back(p.var);

  EpochSummary summary;
  summary.epoch = epoch;
  summary.lr = state.schedule.lr;
  double loss_sum = 0.0;
  const std::size_t batch = static_cast<std::size_t>(cfg.batch_size);
  for (std::size_t start = 0, b = 0; start < order.size(); start += batch, ++b) {
    for (auto& p : params) p.zero_grad();
    std::size_t in_batch = 0;
    for (std::size_t i = start; i < std::min(start + batch, order.size()); ++i) {
      const auto& utt = split[order[i]];
      if (!feasible(model, utt)) {
        ++summary.skipped;
        continue;
      }
      try {
        auto logits = model.forward(Var<Scalar>::leaf(utt.features), Mode::train, rng);
        auto loss = ctc_loss(logits, std::span<const int>(utt.labels));
        backward(loss);
        loss_sum += double(loss.item());
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + " batch " + std::to_string(b) + " utterance " +
                           utt.utt_id + ": " + e.what());
      }
      ++summary.trained;
      ++in_batch;
    }
    if (in_batch == 0) continue;
    std::vector<Matrix<Scalar>> grads;
    for (auto& p : params) grads.push_back(p.grad());
    clip_global_norm(grads, cfg.clip_norm);
    try {
      adam_step<Scalar>(params, grads, state.adam, state.schedule.lr, cfg);
    } catch (const NumericError& e) {
      throw NumericError("epoch " + std::to_string(epoch) + " batch " + std::to_string(b) + ": " + e.what());
    }
  }
  summary.train_loss = summary.trained ? loss_sum / double(summary.trained) : 0.0;
  state.epoch = epoch;
  return summary;
}

template <typename Scalar>
std::vector<Matrix<Scalar>> snapshot_parameters(const AcousticModel<Scalar>& model) {
  std::vector<Matrix<Scalar>> out;
  for (const auto& p : model.parameters()) out.push_back(p.var.value());
  return out;
}

template <typename Scalar>
void restore_parameters(AcousticModel<Scalar>& model, const std::vector<Matrix<Scalar>>& values) {
  auto named = model.parameters();
  if (named.size() != values.size()) throw DimensionError("restore_parameters: parameter count mismatch");
  for (std::size_t i = 0; i < named.size(); ++i) named[i].var.mutable_value() = values[i];
}

template <typename Scalar>
TrainResult<Scalar> train_model(AcousticModel<Scalar>& model, const std::vector<Utterance<Scalar>>& train,
                                const std::vector<Utterance<Scalar>>& dev, const TrainConfig& cfg,
                                TrainingState<Scalar>& state, const std::function<void(const EpochSummary&)>& on_epoch) {
  cfg.validate();
  TrainResult<Scalar> result;
  result.initial_dev_loss = mean_loss(model, dev);
  if (state.epoch == 0) state.schedule = make_schedule(cfg, result.initial_dev_loss);
  result.best_dev_loss = result.initial_dev_loss;
  result.best_epoch = state.epoch;
  result.best_parameters = snapshot_parameters(model);

  while (state.epoch < cfg.max_epochs) {
    EpochSummary summary = train_epoch(model, train, cfg, state);
    summary.dev_loss = mean_loss(model, dev);
    summary.action = lr_schedule_update(state.schedule, summary.dev_loss, cfg);
    if (summary.dev_loss < result.best_dev_loss) {
      result.best_dev_loss = summary.dev_loss;
      result.best_epoch = summary.epoch;
      result.best_parameters = snapshot_parameters(model);
    }
    result.log.push_back(summary);
    if (on_epoch) on_epoch(summary);
    if (summary.action == ScheduleAction::stop) break;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCheckpointMagic[4] = {'C', 'K', 'P', 'T'};

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }

  template <typename Scalar>
  void entry(const std::string& name, const Shape& shape, const Matrix<Scalar>& values) {
    if (name.size() > 0xffff) throw std::invalid_argument("checkpoint: parameter name too long");
    buf_.reserve(buf_.size() + 2 + name.size() + 1 + 4 * shape.size() + 4 * static_cast<std::size_t>(values.size()));
    u16(static_cast<std::uint16_t>(name.size()));
    bytes(name.data(), name.size());
    u8(static_cast<std::uint8_t>(shape.size()));
    for (Index d : shape) u32(static_cast<std::uint32_t>(d));
    for (Index i = 0; i < values.size(); ++i) f32(static_cast<float>(values.data()[i]));
  }

  void meta(const std::string& name, std::uint64_t value) {
    Matrix<float> chunks(1, 4);
    for (int i = 0; i < 4; ++i) chunks(0, i) = float((value >> (16 * i)) & 0xffffu);
    entry(name, {4}, chunks);
  }

  const std::string& data() const { return buf_; }

 private:
  std::string buf_;
};

struct Entry {
  Shape shape;
  std::vector<float> values;
};

class Reader {
 public:
  Reader(std::string buf, fs::path path) : buf_(std::move(buf)), path_(std::move(path)) {}

  const unsigned char* take(std::size_t n) {
    if (pos_ + n > buf_.size())
      throw TruncationError(path_.string() + ": truncated at byte offset " + std::to_string(buf_.size()) +
                            " (needed " + std::to_string(n) + " bytes at offset " + std::to_string(pos_) + ")");
    const auto* p = reinterpret_cast<const unsigned char*>(buf_.data()) + pos_;
    pos_ += n;
    return p;
  }
  std::uint8_t u8() { return *take(1); }
  std::uint16_t u16() {
    const auto* p = take(2);
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
  }
  std::uint32_t u32() {
    const auto* p = take(4);
    return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
  }
  float f32() { return std::bit_cast<float>(u32()); }

  std::pair<std::string, Entry> entry() {
    const std::uint16_t len = u16();
    const auto* name = take(len);
    std::pair<std::string, Entry> out{std::string(reinterpret_cast<const char*>(name), len), {}};
    const std::uint8_t rank = u8();
    std::uint64_t count = 1;
    for (std::uint8_t r = 0; r < rank; ++r) {
      out.second.shape.push_back(static_cast<Index>(u32()));
      count *= static_cast<std::uint64_t>(out.second.shape.back());
    }
    if (count * 4 > buf_.size() - pos_) take(static_cast<std::size_t>(count * 4));
    out.second.values.resize(static_cast<std::size_t>(count));
    for (auto& v : out.second.values) v = f32();
    return out;
  }

  std::map<std::string, Entry> section() {
    std::map<std::string, Entry> out;
    const std::uint32_t n = u32();
    for (std::uint32_t i = 0; i < n; ++i) out.insert(entry());
    return out;
  }

  bool at_end() const { return pos_ == buf_.size(); }
  std::size_t position() const { return pos_; }
  const fs::path& path() const { return path_; }

 private:
  std::string buf_;
  fs::path path_;
  std::size_t pos_ = 0;
};

std::uint64_t meta_value(const std::map<std::string, Entry>& meta, const std::string& name, const fs::path& path) {
  auto it = meta.find(name);
  if (it == meta.end() || it->second.values.size() != 4)
    throw FormatError(path.string() + ": checkpoint metadata lacks " + name);
  std::uint64_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint64_t(it->second.values[static_cast<std::size_t>(i)]) << (16 * i);
  return v;
}

struct ParsedCheckpoint {
  std::map<std::string, Entry> params, optimizer, meta;
  std::vector<std::string> param_order;
};

ParsedCheckpoint parse_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  Reader r(ss.str(), path);
  const auto* magic = r.take(4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw FormatError(path.string() + ": not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw VersionError(path.string() + ": checkpoint version " + std::to_string(version) + ", expected " +
                       std::to_string(kCheckpointVersion));
  ParsedCheckpoint out;
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    auto e = r.entry();
    out.param_order.push_back(e.first);
    out.params.insert(std::move(e));
  }
  out.optimizer = r.section();
  out.meta = r.section();
  if (!r.at_end())
    throw HeaderMismatchError(path.string() + ": unexpected bytes after offset " + std::to_string(r.position()));
  return out;
}

template <typename Scalar>
void assign(Matrix<Scalar>& dst, const Entry& e, const std::string& name, const Shape& expected, const fs::path& path) {
  if (e.shape != expected)
    throw FormatError(path.string() + ": " + name + " has shape " + shape_string(e.shape) + ", model expects " +
                      shape_string(expected));
  for (Index i = 0; i < dst.size(); ++i) dst.data()[i] = static_cast<Scalar>(e.values[static_cast<std::size_t>(i)]);
}

}  // namespace

template <typename Scalar>
void save_checkpoint(const fs::path& path, const AcousticModel<Scalar>& model, const TrainingState<Scalar>& state) {
  const auto named = model.parameters();
  Writer w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(named.size()));
  for (const auto& p : named) w.entry(p.name, p.var.shape(), p.var.value());

  const bool has_moments = state.adam.m.size() == named.size();
  w.u32(has_moments ? static_cast<std::uint32_t>(2 * named.size()) : 0u);
  if (has_moments) {
    for (std::size_t i = 0; i < named.size(); ++i) w.entry("adam.m." + named[i].name, named[i].var.shape(), state.adam.m[i]);
    for (std::size_t i = 0; i < named.size(); ++i) w.entry("adam.v." + named[i].name, named[i].var.shape(), state.adam.v[i]);
  }

  w.u32(7);
  w.meta("meta.digest", architecture_digest(model.network_config(), model.adapt_config()));
  w.meta("meta.adam_step", static_cast<std::uint64_t>(state.adam.step));
  w.meta("meta.epoch", static_cast<std::uint64_t>(state.epoch));
  w.meta("meta.lr", std::bit_cast<std::uint64_t>(state.schedule.lr));
  w.meta("meta.has_previous", state.schedule.previous_metric ? 1u : 0u);
  w.meta("meta.previous_metric", std::bit_cast<std::uint64_t>(state.schedule.previous_metric.value_or(0.0)));
  w.meta("meta.halving", state.schedule.halving ? 1u : 0u);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
  if (!out) throw IoError("write failed for " + path.string());
}

std::uint64_t checkpoint_digest(const fs::path& path) {
  const auto parsed = parse_checkpoint(path);
  return meta_value(parsed.meta, "meta.digest", path);
}

template <typename Scalar>
TrainingState<Scalar> load_checkpoint(const fs::path& path, AcousticModel<Scalar>& model) {
  const auto parsed = parse_checkpoint(path);
  const std::uint64_t stored = meta_value(parsed.meta, "meta.digest", path);
  const std::uint64_t expected = architecture_digest(model.network_config(), model.adapt_config());
  if (stored != expected) {
    std::ostringstream os;
    os << path.string() << ": checkpoint was written for a different architecture (digest " << std::hex << stored
       << ", model " << expected << "; model is " << architecture_text(model.network_config(), model.adapt_config())
       << ")";
    throw ConfigDriftError(os.str());
  }

  auto named = model.parameters();
  if (parsed.param_order.size() != named.size())
    throw FormatError(path.string() + ": checkpoint holds " + std::to_string(parsed.param_order.size()) +
                      " parameters, model has " + std::to_string(named.size()));
  for (auto& p : named) {
    auto it = parsed.params.find(p.name);
    if (it == parsed.params.end()) throw FormatError(path.string() + ": missing parameter " + p.name);
    assign(p.var.mutable_value(), it->second, p.name, p.var.shape(), path);
  }

  TrainingState<Scalar> state;
  if (!parsed.optimizer.empty()) {
    for (auto& p : named) {
      auto m = parsed.optimizer.find("adam.m." + p.name), v = parsed.optimizer.find("adam.v." + p.name);
      if (m == parsed.optimizer.end() || v == parsed.optimizer.end())
        throw FormatError(path.string() + ": optimizer state lacks moments for " + p.name);
      state.adam.m.emplace_back(p.var.rows(), p.var.cols());
      state.adam.v.emplace_back(p.var.rows(), p.var.cols());
      assign(state.adam.m.back(), m->second, "adam.m." + p.name, p.var.shape(), path);
      assign(state.adam.v.back(), v->second, "adam.v." + p.name, p.var.shape(), path);
    }
  }
  state.adam.step = static_cast<std::int64_t>(meta_value(parsed.meta, "meta.adam_step", path));
  state.epoch = static_cast<int>(meta_value(parsed.meta, "meta.epoch", path));
  state.schedule.lr = std::bit_cast<double>(meta_value(parsed.meta, "meta.lr", path));
  if (meta_value(parsed.meta, "meta.has_previous", path))
    state.schedule.previous_metric = std::bit_cast<double>(meta_value(parsed.meta, "meta.previous_metric", path));
  state.schedule.halving = meta_value(parsed.meta, "meta.halving", path) != 0;
  return state;
}

// ---------------------------------------------------------------------------
// Ablation

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median of nothing");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

const SystemResult* AblationTable::find(const std::string& name) const {
  for (const auto& r : rows)
    if (r.system.name == name) return &r;
  return nullptr;
}

std::string AblationTable::to_tsv() const {
  auto pct = [](double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << v;
    return os.str();
  };
  std::ostringstream os;
  os << "system\tadapted_layers";
  for (auto s : seeds) os << "\tdev_cer_seed" << s;
  for (auto s : seeds) os << "\ttest_cer_seed" << s;
  os << "\tdev_cer\ttest_cer\tdev_rel_impr\ttest_rel_impr\n";
  for (const auto& r : rows) {
    const auto& a = r.system.adapt;
    std::string layers = "-";
    if (a.method == AdaptMethod::ags || a.method == AdaptMethod::lhuc) layers = join_layers(a.layers);
    if (a.method == AdaptMethod::ssnn) layers = "input";
    os << r.system.name << '\t' << layers;
    for (double v : r.dev_cer) os << '\t' << pct(100.0 * v);
    for (double v : r.test_cer) os << '\t' << pct(100.0 * v);
    os << '\t' << pct(100.0 * r.dev_median) << '\t' << pct(100.0 * r.test_median);
    os << '\t' << (r.dev_relative ? pct(*r.dev_relative) : "") << '\t' << (r.test_relative ? pct(*r.test_relative) : "");
    os << '\n';
  }
  return os.str();
}

AblationTable run_ablation(const StudySpec& study, const Splits& data,
                           const std::function<void(const std::string&)>& progress) {
  if (study.systems.empty()) throw std::invalid_argument("run_ablation: no systems");
  if (study.seeds.empty()) throw std::invalid_argument("run_ablation: no seeds");
  AblationTable table;
  table.seeds = study.seeds;
  for (const auto& sys : study.systems) {
    SystemResult row{sys, {}, {}, 0.0, 0.0, std::nullopt, std::nullopt};
    for (auto seed : study.seeds) {
      TrainConfig cfg = study.train;
      cfg.seed = seed;
      auto model = build_adapted_network<float>(study.network, sys.adapt, seed);
      TrainingState<float> state;
      auto result = train_model(model, data.train, data.dev, cfg, state);
      restore_parameters(model, result.best_parameters);
      row.dev_cer.push_back(evaluate_cer(model, data.dev).cer);
      row.test_cer.push_back(evaluate_cer(model, data.test).cer);
      if (progress) {
        std::ostringstream os;
        os << sys.name << " seed=" << seed << " epochs=" << result.log.size() << " best_epoch=" << result.best_epoch
           << " dev_cer=" << row.dev_cer.back() << " test_cer=" << row.test_cer.back();
        progress(os.str());
      }
    }
    row.dev_median = median(row.dev_cer);
    row.test_median = median(row.test_cer);
    table.rows.push_back(std::move(row));
  }
  const SystemResult* baseline = nullptr;
  for (const auto& r : table.rows)
    if (r.system.adapt.method == AdaptMethod::none) {
      baseline = &r;
      break;
    }
  if (baseline) {
    const double dev_base = baseline->dev_median, test_base = baseline->test_median;
    for (auto& r : table.rows) {
      if (&r == baseline) continue;
      if (dev_base > 0) r.dev_relative = relative_improvement(dev_base, r.dev_median);
      if (test_base > 0) r.test_relative = relative_improvement(test_base, r.test_median);
    }
  }
  return table;
}

// ---------------------------------------------------------------------------
// Instantiations

#define AGS_INSTANTIATE(S)                                                                                     \
  template void adam_step<S>(std::span<Var<S>>, std::span<const Matrix<S>>, AdamState<S>&, double,            \
                             const TrainConfig&);                                                             \
  template double clip_global_norm<S>(std::vector<Matrix<S>>&, double);                                       \
  template EvalReport evaluate_cer<S>(const AcousticModel<S>&, const std::vector<Utterance<S>>&);             \
  template double mean_loss<S>(const AcousticModel<S>&, const std::vector<Utterance<S>>&);                    \
  template EpochSummary train_epoch<S>(AcousticModel<S>&, const std::vector<Utterance<S>>&, const TrainConfig&, \
                                       TrainingState<S>&);                                                    \
  template TrainResult<S> train_model<S>(AcousticModel<S>&, const std::vector<Utterance<S>>&,                 \
                                         const std::vector<Utterance<S>>&, const TrainConfig&, TrainingState<S>&, \
                                         const std::function<void(const EpochSummary&)>&);                    \
  template std::vector<Matrix<S>> snapshot_parameters<S>(const AcousticModel<S>&);                            \
  template void restore_parameters<S>(AcousticModel<S>&, const std::vector<Matrix<S>>&);                      \
  template void save_checkpoint<S>(const fs::path&, const AcousticModel<S>&, const TrainingState<S>&);        \
  template TrainingState<S> load_checkpoint<S>(const fs::path&, AcousticModel<S>&);

AGS_INSTANTIATE(float)
AGS_INSTANTIATE(double)

#undef AGS_INSTANTIATE

}  // namespace ags
