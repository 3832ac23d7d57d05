// agsctc: corpus generation, training, evaluation, ablation studies and
// self-verification.
//
// Exit codes:
//   0  success
//   1  a selfcheck suite failed
//   2  command-line usage error
//   3  invalid configuration
//   4  I/O or file-format error
//   5  checkpoint, config and corpus disagree
//   6  numeric abort (non-finite values during training)
//   70 internal error

#include "ags/checks.hpp"
#include "ags/config.hpp"
#include "ags/corpus.hpp"
#include "ags/io_errors.hpp"
#include "ags/model.hpp"
#include "ags/train.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>

namespace fs = std::filesystem;
using namespace ags;

namespace {

enum Exit : int {
  kOk = 0,
  kCheckFailed = 1,
  kUsage = 2,
  kBadConfig = 3,
  kIo = 4,
  kMismatch = 5,
  kNumeric = 6,
  kInternal = 70,
};

class MismatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

RunConfig config_or_default(const std::string& path) { return path.empty() ? RunConfig{} : load_run_config(path); }

/// A checkpoint's config sidecar, written next to it by `train`.
fs::path sidecar(const fs::path& checkpoint) { return fs::path(checkpoint.string() + ".conf"); }

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

void check_corpus_matches(const RunConfig& cfg, const std::vector<Utterance<float>>& split, const std::string& name) {
  if (split.empty()) throw MismatchError("split '" + name + "' is empty");
  for (const auto& u : split) {
    if (u.features.cols() != cfg.network.input_dim)
      throw MismatchError(u.utt_id + " has " + std::to_string(u.features.cols()) + "-dim features but network.input_dim is " +
                          std::to_string(cfg.network.input_dim));
    for (int l : u.labels)
      if (l <= 0 || l >= cfg.network.output_size)
        throw MismatchError(u.utt_id + " has label " + std::to_string(l) + " outside 1.." +
                            std::to_string(cfg.network.output_size - 1));
  }
}

std::vector<Utterance<float>> load_checked(const RunConfig& cfg, const fs::path& corpus, const std::string& split) {
  const fs::path manifest = corpus / (split + ".tsv");
  if (!fs::exists(manifest)) throw IoError("split '" + split + "' not found: " + manifest.string() + " does not exist");
  auto data = load_split<float>(corpus, split);
  check_corpus_matches(cfg, data, split);
  return data;
}

// ---------------------------------------------------------------------------

int cmd_gen_corpus(const std::string& config, const std::string& out_dir, std::optional<std::uint64_t> seed) {
  RunConfig cfg = config_or_default(config);
  if (seed) cfg.corpus.seed = *seed;
  const fs::path out = out_dir.empty() ? fs::path(cfg.paths.corpus) : fs::path(out_dir);
  const Corpus corpus = synth_generate(cfg.corpus, out);
  std::cout << "split\tutterances\tspeakers\n";
  for (const auto* m : {&corpus.train, &corpus.dev, &corpus.test}) {
    std::set<std::string> speakers;
    for (const auto& e : m->entries) speakers.insert(e.speaker_id);
    std::cout << m->split << '\t' << m->entries.size() << '\t' << speakers.size() << '\n';
  }
  return kOk;
}

int cmd_train(const std::string& config, const std::string& corpus_dir, const std::string& out_path,
              const std::string& resume) {
  const RunConfig cfg = config_or_default(config);
  const fs::path corpus = corpus_dir.empty() ? fs::path(cfg.paths.corpus) : fs::path(corpus_dir);
  const fs::path out = out_path.empty() ? fs::path(cfg.paths.checkpoint) : fs::path(out_path);
  const auto train = load_checked(cfg, corpus, "train");
  const auto dev = load_checked(cfg, corpus, "dev");

  auto model = build_adapted_network<float>(cfg.network, cfg.adapt, cfg.train.seed);
  TrainingState<float> state;
  if (!resume.empty()) {
    try {
      state = load_checkpoint(resume, model);
    } catch (const ConfigDriftError& e) {
      throw MismatchError(e.what());
    }
  }

  std::cout << "# architecture " << architecture_text(cfg.network, cfg.adapt) << '\n'
            << "# parameters " << model.parameter_count() << '\n'
            << "# halting metric: mean eval-mode CTC loss on dev\n"
            << "# train=" << train.size() << " dev=" << dev.size() << " resume_epoch=" << state.epoch << '\n'
            << std::flush;

  const fs::path best = out.parent_path() / (out.stem().string() + ".best" + out.extension().string());
  const std::string rendered = render_run_config(cfg);
  auto result = train_model(model, train, dev, cfg.train, state, [&](const EpochSummary& e) {
    std::cout << e.to_line() << '\n' << std::flush;
    // Kept current after every epoch so an interrupted run can resume.
    save_checkpoint(out, model, state);
  });
  std::cout << std::setprecision(9) << "# initial_dev_loss=" << result.initial_dev_loss
            << " best_epoch=" << result.best_epoch << " best_dev_loss=" << result.best_dev_loss << '\n';

  save_checkpoint(out, model, state);
  write_text(sidecar(out), rendered);
  if (!result.best_parameters.empty()) restore_parameters(model, result.best_parameters);
  save_checkpoint(best, model, state);
  write_text(sidecar(best), rendered);
  std::cout << "# wrote " << out.string() << " and " << best.string() << '\n';
  return kOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& config, const std::string& corpus_dir,
             const std::string& split, const std::string& out_tsv) {
  const fs::path ckpt(checkpoint);
  std::string config_path = config;
  if (config_path.empty()) {
    if (!fs::exists(sidecar(ckpt)))
      throw IoError("no --config given and " + sidecar(ckpt).string() + " does not exist");
    config_path = sidecar(ckpt).string();
  }
  const RunConfig cfg = load_run_config(config_path);
  const fs::path corpus = corpus_dir.empty() ? fs::path(cfg.paths.corpus) : fs::path(corpus_dir);

  auto model = build_adapted_network<float>(cfg.network, cfg.adapt, cfg.train.seed);
  try {
    load_checkpoint(ckpt, model);
  } catch (const ConfigDriftError& e) {
    throw MismatchError(e.what());
  }
  const auto data = load_checked(cfg, corpus, split);
  const EvalReport report = evaluate_cer(model, data);

  const fs::path tsv = out_tsv.empty() ? fs::path(checkpoint + "." + split + ".tsv") : fs::path(out_tsv);
  write_text(tsv, report.to_tsv());
  std::cout << "split\tutterances\terrors\treference_length\tcer\n"
            << split << '\t' << report.utterances.size() << '\t' << report.total_distance << '\t'
            << report.total_reference << '\t' << std::fixed << std::setprecision(6) << report.cer << '\n';
  std::cerr << "per-utterance results written to " << tsv.string() << '\n';
  return kOk;
}

int cmd_selfcheck(const std::string& suite, bool inject_fault) {
  const CheckReport report = run_selfcheck(suite, inject_fault);
  std::cout << "check\tobserved\ttolerance\tresult\n";
  for (const auto& l : report.lines)
    std::cout << l.name << '\t' << std::scientific << std::setprecision(3) << l.observed << '\t' << l.tolerance << '\t'
              << (l.passed ? "PASS" : "FAIL") << '\n';
  if (!report.passed()) {
    std::cerr << "selfcheck: at least one check failed\n";
    return kCheckFailed;
  }
  return kOk;
}

int cmd_ablation(const std::string& study_config, const std::string& corpus_dir, const std::string& out_tsv) {
  const RunConfig cfg = load_run_config(study_config);
  const fs::path corpus = corpus_dir.empty() ? fs::path(cfg.paths.corpus) : fs::path(corpus_dir);
  Splits data{load_checked(cfg, corpus, "train"), load_checked(cfg, corpus, "dev"), load_checked(cfg, corpus, "test")};
  const AblationTable table =
      run_ablation(cfg.study(), data, [](const std::string& line) { std::cerr << line << '\n' << std::flush; });
  const std::string tsv = table.to_tsv();
  const fs::path out = out_tsv.empty() ? fs::path(cfg.paths.results) / "ablation.tsv" : fs::path(out_tsv);
  write_text(out, tsv);
  std::cout << tsv;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention-gated speaker adaptation for CTC acoustic models"};
  app.require_subcommand(1);

  std::string config, out_dir, corpus, out, resume, checkpoint, split = "test", suite = "all", study, tsv;
  std::optional<std::uint64_t> seed;
  bool inject_fault = false;

  auto* gen = app.add_subcommand("gen-corpus", "Generate the synthetic speaker-mismatch corpus");
  gen->add_option("--config", config, "Run config file")->check(CLI::ExistingFile);
  gen->add_option("--out-dir", out_dir, "Output directory (default: paths.corpus)");
  gen->add_option("--seed", seed, "Overrides corpus.seed");

  auto* tr = app.add_subcommand("train", "Train a model");
  tr->add_option("--config", config, "Run config file")->check(CLI::ExistingFile);
  tr->add_option("--corpus", corpus, "Corpus directory (default: paths.corpus)");
  tr->add_option("--out", out, "Checkpoint to write (default: paths.checkpoint)");
  tr->add_option("--resume", resume, "Continue from this checkpoint")->check(CLI::ExistingFile);

  auto* ev = app.add_subcommand("eval", "Decode a split and report CER");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate")->required()->check(CLI::ExistingFile);
  ev->add_option("--config", config, "Run config (default: <checkpoint>.conf)")->check(CLI::ExistingFile);
  ev->add_option("--corpus", corpus, "Corpus directory (default: paths.corpus)");
  ev->add_option("--split", split, "train, dev or test")->capture_default_str();
  ev->add_option("--out", tsv, "Per-utterance TSV (default: <checkpoint>.<split>.tsv)");

  auto* sc = app.add_subcommand("selfcheck", "Run the gradient, CTC and attention verification suites");
  sc->add_option("--suite", suite, "grad, ctc, attention or all")
      ->check(CLI::IsMember({"grad", "ctc", "attention", "all"}))
      ->capture_default_str();
  // Negative control for the test suite: corrupts every analytic gradient.
  sc->add_flag("--inject-fault", inject_fault)->group("");

  auto* ab = app.add_subcommand("ablation", "Train and score every system of a study over all seeds");
  ab->add_option("--study-config", study, "Study config file")->required()->check(CLI::ExistingFile);
  ab->add_option("--corpus", corpus, "Corpus directory (default: paths.corpus)");
  ab->add_option("--out", tsv, "Results TSV (default: <paths.results>/ablation.tsv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_corpus(config, out_dir, seed);
    if (tr->parsed()) return cmd_train(config, corpus, out, resume);
    if (ev->parsed()) return cmd_eval(checkpoint, config, corpus, split, tsv);
    if (sc->parsed()) return cmd_selfcheck(suite, inject_fault);
    if (ab->parsed()) return cmd_ablation(study, corpus, tsv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kBadConfig;
  } catch (const MismatchError& e) {
    std::cerr << "mismatch: " << e.what() << '\n';
    return kMismatch;
  } catch (const NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << '\n';
    return kNumeric;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kIo;
  } catch (const TruncationError& e) {
    std::cerr << "truncated file: " << e.what() << '\n';
    return kIo;
  } catch (const HeaderMismatchError& e) {
    std::cerr << "header mismatch: " << e.what() << '\n';
    return kIo;
  } catch (const VersionError& e) {
    std::cerr << "unsupported version: " << e.what() << '\n';
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kInternal;
  }
  return kUsage;
}
