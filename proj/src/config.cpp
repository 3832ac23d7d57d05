#include "ags/config.hpp"

#include "ags/io_errors.hpp"

#include <fstream>
#include <functional>
#include <iomanip>
#include <set>
#include <sstream>

namespace ags {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

long long to_int(const std::string& v) {
  std::size_t used = 0;
  const long long out = std::stoll(v, &used);
  if (used != v.size()) throw std::invalid_argument("not an integer");
  return out;
}

double to_double(const std::string& v) {
  std::size_t used = 0;
  const double out = std::stod(v, &used);
  if (used != v.size()) throw std::invalid_argument("not a number");
  return out;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "yes" || v == "1") return true;
  if (v == "false" || v == "no" || v == "0") return false;
  throw std::invalid_argument("not a boolean");
}

template <typename T>
std::vector<T> to_int_list(const std::string& v) {
  std::vector<T> out;
  for (const auto& item : split_list(v)) out.push_back(static_cast<T>(to_int(item)));
  return out;
}

template <typename T>
std::string list_text(const std::vector<T>& items) {
  std::ostringstream os;
  for (std::size_t i = 0; i < items.size(); ++i) os << (i ? "," : "") << items[i];
  return os.str();
}

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

struct Field {
  const char* section;
  const char* key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define AGS_INT(sec, name, member)                                                             \
  Field {                                                                                      \
    sec, name, [](RunConfig& c, const std::string& v) { c.member = static_cast<decltype(c.member)>(to_int(v)); }, \
        [](const RunConfig& c) { return std::to_string(c.member); }                            \
  }
#define AGS_REAL(sec, name, member)                                                               \
  Field {                                                                                         \
    sec, name, [](RunConfig& c, const std::string& v) { c.member = to_double(v); },               \
        [](const RunConfig& c) { return num(c.member); }                                          \
  }
#define AGS_BOOL(sec, name, member)                                                               \
  Field {                                                                                         \
    sec, name, [](RunConfig& c, const std::string& v) { c.member = to_bool(v); },                 \
        [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); }               \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      AGS_INT("network", "input_dim", network.input_dim),
      Field{"network", "conv_channels",
            [](RunConfig& c, const std::string& v) { c.network.conv_channels = to_int_list<Index>(v); },
            [](const RunConfig& c) { return list_text(c.network.conv_channels); }},
      AGS_INT("network", "kernel", network.kernel),
      AGS_INT("network", "pool_stride", network.pool_stride),
      AGS_INT("network", "lstm_layers", network.lstm_layers),
      AGS_INT("network", "hidden", network.hidden),
      AGS_INT("network", "output_size", network.output_size),
      AGS_REAL("network", "lstm_dropout", network.lstm_dropout),

      Field{"adapt", "method", [](RunConfig& c, const std::string& v) { c.adapt.method = parse_adapt_method(v); },
            [](const RunConfig& c) { return to_string(c.adapt.method); }},
      Field{"adapt", "layers", [](RunConfig& c, const std::string& v) { c.adapt.layers = to_int_list<Index>(v); },
            [](const RunConfig& c) { return list_text(c.adapt.layers); }},
      AGS_INT("adapt", "d_a", adapt.attention_dim),
      AGS_INT("adapt", "heads", adapt.heads),
      Field{"adapt", "ags_input", [](RunConfig& c, const std::string& v) { c.adapt.ags_input = parse_ags_input(v); },
            [](const RunConfig& c) { return to_string(c.adapt.ags_input); }},
      AGS_REAL("adapt", "ags_dropout", adapt.ags_dropout),
      AGS_REAL("adapt", "lhuc_dropout", adapt.lhuc_dropout),
      AGS_REAL("adapt", "ssnn_dropout", adapt.ssnn_dropout),
      AGS_INT("adapt", "ssnn_hidden", adapt.ssnn_hidden),

      AGS_REAL("train", "lr", train.learning_rate),
      AGS_REAL("train", "halve_threshold", train.halve_threshold),
      AGS_REAL("train", "stop_threshold", train.stop_threshold),
      AGS_REAL("train", "beta1", train.beta1),
      AGS_REAL("train", "beta2", train.beta2),
      AGS_REAL("train", "epsilon", train.epsilon),
      AGS_INT("train", "batch_size", train.batch_size),
      AGS_INT("train", "max_epochs", train.max_epochs),
      AGS_REAL("train", "clip_norm", train.clip_norm),
      AGS_BOOL("train", "sticky_halving", train.sticky_halving),
      AGS_INT("train", "seed", train.seed),

      AGS_INT("corpus", "vocab", corpus.vocab),
      AGS_INT("corpus", "train_speakers", corpus.train_speakers),
      AGS_INT("corpus", "dev_speakers", corpus.dev_speakers),
      AGS_INT("corpus", "test_speakers", corpus.test_speakers),
      AGS_INT("corpus", "utts_per_speaker", corpus.utts_per_speaker),
      AGS_INT("corpus", "min_label_len", corpus.min_label_len),
      AGS_INT("corpus", "max_label_len", corpus.max_label_len),
      AGS_INT("corpus", "min_segment", corpus.min_segment),
      AGS_INT("corpus", "max_segment", corpus.max_segment),
      AGS_INT("corpus", "base_dim", corpus.base_dim),
      AGS_BOOL("corpus", "deltas", corpus.deltas),
      Field{"corpus", "cmvn", [](RunConfig& c, const std::string& v) { c.corpus.cmvn = parse_cmvn_mode(v); },
            [](const RunConfig& c) { return to_string(c.corpus.cmvn); }},
      AGS_REAL("corpus", "prototype_scale", corpus.prototype_scale),
      AGS_REAL("corpus", "noise", corpus.noise),
      AGS_REAL("corpus", "speaker_noise_jitter", corpus.speaker_noise_jitter),
      AGS_REAL("corpus", "scale_min", corpus.scale_min),
      AGS_REAL("corpus", "scale_max", corpus.scale_max),
      AGS_REAL("corpus", "offset_std", corpus.offset_std),
      AGS_INT("corpus", "seed", corpus.seed),

      Field{"paths", "corpus", [](RunConfig& c, const std::string& v) { c.paths.corpus = v; },
            [](const RunConfig& c) { return c.paths.corpus; }},
      Field{"paths", "checkpoint", [](RunConfig& c, const std::string& v) { c.paths.checkpoint = v; },
            [](const RunConfig& c) { return c.paths.checkpoint; }},
      Field{"paths", "results", [](RunConfig& c, const std::string& v) { c.paths.results = v; },
            [](const RunConfig& c) { return c.paths.results; }},

      Field{"study", "seeds", [](RunConfig& c, const std::string& v) { c.seeds = to_int_list<std::uint64_t>(v); },
            [](const RunConfig& c) { return list_text(c.seeds); }},
  };
  return table;
}

#undef AGS_INT
#undef AGS_REAL
#undef AGS_BOOL

/// "<name> <method> [layers]" with layers comma separated.
SystemSpec parse_system(const std::string& value, const AdaptConfig& base) {
  std::istringstream in(value);
  std::string name, method, layers, extra;
  in >> name >> method >> layers >> extra;
  if (name.empty() || method.empty() || !extra.empty())
    throw std::invalid_argument("expected '<name> <method> [layers]'");
  SystemSpec spec{name, base};
  spec.adapt.method = parse_adapt_method(method);
  if (!layers.empty()) spec.adapt.layers = to_int_list<Index>(layers);
  return spec;
}

}  // namespace

StudySpec RunConfig::study() const {
  StudySpec s;
  s.network = network;
  s.train = train;
  s.seeds = seeds;
  s.systems = systems;
  if (s.systems.empty()) s.systems.push_back({to_string(adapt.method), adapt});
  return s;
}

RunConfig parse_run_config(std::string_view text, const std::string& source) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::vector<std::pair<std::string, std::size_t>> system_lines;
  std::string section;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& msg) {
    throw ConfigError(source + ":" + std::to_string(line_no) + ": " + msg);
  };
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail("malformed section header '" + line + "'");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      static const std::set<std::string> known{"network", "adapt", "train", "corpus", "paths", "study"};
      if (!known.count(section)) fail("unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected 'key = value', got '" + line + "'");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    if (section.empty()) fail("key '" + key + "' appears before any section");
    if (section == "study" && key == "system") {
      system_lines.emplace_back(value, line_no);
      continue;
    }
    const Field* field = nullptr;
    for (const auto& f : fields())
      if (section == f.section && key == f.key) field = &f;
    if (!field) fail("unknown key '" + key + "' in [" + section + "]");
    const std::string full = section + "." + key;
    if (!seen.insert(full).second) fail("duplicate key '" + full + "'");
    try {
      field->set(cfg, value);
    } catch (const std::exception& e) {
      fail("bad value '" + value + "' for " + full + " (" + e.what() + ")");
    }
  }

  // The network's input and output widths follow the corpus unless pinned.
  if (!seen.count("network.input_dim")) cfg.network.input_dim = cfg.corpus.feature_dim();
  if (!seen.count("network.output_size")) cfg.network.output_size = cfg.corpus.vocab + 1;

  for (const auto& [value, where] : system_lines) {
    line_no = where;
    try {
      cfg.systems.push_back(parse_system(value, cfg.adapt));
    } catch (const std::exception& e) {
      fail("bad system '" + value + "' (" + e.what() + ")");
    }
  }

  line_no = 0;
  try {
    cfg.network.validate();
    cfg.adapt.validate(cfg.network);
    cfg.train.validate();
    cfg.corpus.validate();
    for (const auto& s : cfg.systems) s.adapt.validate(cfg.network);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(source + ": " + e.what());
  }
  if (cfg.seeds.empty()) throw ConfigError(source + ": [study] seeds must not be empty");
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path.string());
}

std::string render_run_config(const RunConfig& cfg) {
  std::ostringstream os;
  std::string section;
  for (const auto& f : fields()) {
    if (section != f.section) {
      section = f.section;
      os << (os.tellp() > 0 ? "\n" : "") << '[' << section << "]\n";
    }
    os << f.key << " = " << f.get(cfg) << '\n';
  }
  for (const auto& s : cfg.systems) {
    os << "system = " << s.name << ' ' << to_string(s.adapt.method);
    if (s.adapt.method == AdaptMethod::ags || s.adapt.method == AdaptMethod::lhuc) os << ' ' << list_text(s.adapt.layers);
    os << '\n';
  }
  return os.str();
}

}  // namespace ags
