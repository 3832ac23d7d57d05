#pragma once

// Training protocol, evaluation and checkpoints.
//
// Adam with a dev-loss driven schedule: the learning rate is halved once the
// relative dev improvement drops below `halve_threshold` (and, when sticky,
// every epoch after that), and training stops when it drops below
// `stop_threshold`.

#include "ags/corpus.hpp"
#include "ags/ctc.hpp"
#include "ags/model.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ags {

struct TrainConfig {
  double learning_rate = 1e-4;
  double halve_threshold = 0.004;
  double stop_threshold = 0.0005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int batch_size = 8;
  int max_epochs = 30;
  double clip_norm = 5.0;  // global gradient norm; <= 0 disables
  bool sticky_halving = true;
  std::uint64_t seed = 1;

  void validate() const;
};

// ---------------------------------------------------------------------------
// Learning-rate schedule

enum class ScheduleAction { keep, halve, stop };
std::string to_string(ScheduleAction action);

struct LrScheduleState {
  double lr = 0.0;
  std::optional<double> previous_metric;
  bool halving = false;
};

LrScheduleState make_schedule(const TrainConfig& cfg, std::optional<double> initial_metric = std::nullopt);

/// Feeds one dev measurement. Relative improvement is (prev - new) / prev;
/// the first measurement only sets the reference and returns keep.
ScheduleAction lr_schedule_update(LrScheduleState& state, double metric, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Adam

template <typename Scalar>
struct AdamState {
  std::int64_t step = 0;
  std::vector<Matrix<Scalar>> m;
  std::vector<Matrix<Scalar>> v;
};

/// One bias-corrected Adam update of `params` from `grads`.
template <typename Scalar>
void adam_step(std::span<Var<Scalar>> params, std::span<const Matrix<Scalar>> grads, AdamState<Scalar>& state, double lr,
               const TrainConfig& cfg);

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename Scalar>
double clip_global_norm(std::vector<Matrix<Scalar>>& grads, double max_norm);

// ---------------------------------------------------------------------------
// Metrics

/// Levenshtein distance with unit insert / delete / substitute costs.
std::size_t edit_distance(std::span<const int> ref, std::span<const int> hyp);

/// 100 (baseline - system) / baseline.
double relative_improvement(double baseline_cer, double system_cer);

struct UtteranceResult {
  std::string utt_id;
  LabelSeq reference;
  LabelSeq hypothesis;
  std::size_t distance = 0;
};

struct EvalReport {
  std::string system;
  std::vector<Index> adapted_layers;
  std::vector<UtteranceResult> utterances;
  std::size_t total_distance = 0;
  std::size_t total_reference = 0;
  double cer = 0.0;  // total_distance / total_reference

  std::string to_tsv() const;
};

/// Recomputes the aggregate fields from the per-utterance entries.
void finalize_report(EvalReport& report);

template <typename Scalar>
EvalReport evaluate_cer(const AcousticModel<Scalar>& model, const std::vector<Utterance<Scalar>>& split);

// ---------------------------------------------------------------------------
// Training

template <typename Scalar>
struct TrainingState {
  AdamState<Scalar> adam;
  LrScheduleState schedule;
  int epoch = 0;  // completed epochs
};

struct EpochSummary {
  int epoch = 0;
  double train_loss = 0.0;  // mean per trained utterance
  std::size_t trained = 0;
  std::size_t skipped = 0;  // infeasible alignments
  double dev_loss = 0.0;
  double lr = 0.0;  // rate used during this epoch
  ScheduleAction action = ScheduleAction::keep;

  std::string to_line() const;
};

/// Mean eval-mode CTC loss over utterances with a feasible alignment.
template <typename Scalar>
double mean_loss(const AcousticModel<Scalar>& model, const std::vector<Utterance<Scalar>>& split);

/// One pass over `split` in a seeded shuffled order, one Adam step per
/// batch. Fills train-side fields of the summary only.
template <typename Scalar>
EpochSummary train_epoch(AcousticModel<Scalar>& model, const std::vector<Utterance<Scalar>>& split,
                         const TrainConfig& cfg, TrainingState<Scalar>& state);

template <typename Scalar>
struct TrainResult {
  double initial_dev_loss = 0.0;
  std::vector<EpochSummary> log;
  double best_dev_loss = 0.0;
  int best_epoch = 0;
  std::vector<Matrix<Scalar>> best_parameters;
};

/// Runs epochs until the schedule says stop or max_epochs is reached.
/// Continues from `state` when state.epoch > 0.
template <typename Scalar>
TrainResult<Scalar> train_model(AcousticModel<Scalar>& model, const std::vector<Utterance<Scalar>>& train,
                                const std::vector<Utterance<Scalar>>& dev, const TrainConfig& cfg,
                                TrainingState<Scalar>& state,
                                const std::function<void(const EpochSummary&)>& on_epoch = {});

template <typename Scalar>
std::vector<Matrix<Scalar>> snapshot_parameters(const AcousticModel<Scalar>& model);
template <typename Scalar>
void restore_parameters(AcousticModel<Scalar>& model, const std::vector<Matrix<Scalar>>& values);

// ---------------------------------------------------------------------------
// Checkpoints
//
// "CKPT" | u32 version | u32 n | n entries | u32 n_opt | n_opt entries | u32 n_meta | n_meta entries
// entry: u16 name length | name | u8 rank | rank x u32 dims | float32 payload
// All integers little-endian. Optimizer moments are named adam.m.<param> and
// adam.v.<param>; integers and doubles in the metadata section are split
// into four 16-bit chunks, each stored exactly as a float.

constexpr std::uint32_t kCheckpointVersion = 1;

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const AcousticModel<Scalar>& model,
                     const TrainingState<Scalar>& state);

/// Throws VersionError, ConfigDriftError or TruncationError (with the byte
/// offset) as appropriate.
template <typename Scalar>
TrainingState<Scalar> load_checkpoint(const std::filesystem::path& path, AcousticModel<Scalar>& model);

/// Reads only the architecture digest stored in a checkpoint.
std::uint64_t checkpoint_digest(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Ablation studies

struct SystemSpec {
  std::string name;
  AdaptConfig adapt;
};

struct StudySpec {
  std::vector<SystemSpec> systems;
  std::vector<std::uint64_t> seeds;
  NetworkConfig network;
  TrainConfig train;
};

struct SystemResult {
  SystemSpec system;
  std::vector<double> dev_cer;   // per seed, fraction
  std::vector<double> test_cer;  // per seed, fraction
  double dev_median = 0.0;
  double test_median = 0.0;
  std::optional<double> dev_relative;   // percent, vs the baseline row
  std::optional<double> test_relative;
};

struct AblationTable {
  std::vector<std::uint64_t> seeds;
  std::vector<SystemResult> rows;

  const SystemResult* find(const std::string& name) const;
  std::string to_tsv() const;
};

double median(std::vector<double> values);

struct Splits {
  std::vector<Utterance<float>> train, dev, test;
};

AblationTable run_ablation(const StudySpec& study, const Splits& data,
                           const std::function<void(const std::string&)>& progress = {});

extern template EvalReport evaluate_cer(const AcousticModel<float>&, const std::vector<Utterance<float>>&);
extern template EvalReport evaluate_cer(const AcousticModel<double>&, const std::vector<Utterance<double>>&);

}  // namespace ags
