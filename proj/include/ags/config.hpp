#pragma once

// Run configuration files: `key = value` lines grouped under [network],
// [adapt], [train], [corpus], [paths] and [study]. '#' starts a comment.
// Unknown sections or keys are errors. See configs/example.conf for every
// key with its default.

#include "ags/corpus.hpp"
#include "ags/model.hpp"
#include "ags/train.hpp"

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace ags {

struct PathsConfig {
  std::string corpus = "corpus";
  std::string checkpoint = "model.ckpt";
  std::string results = "results";
};

struct RunConfig {
  NetworkConfig network;
  AdaptConfig adapt;
  TrainConfig train;
  SynthConfig corpus;
  PathsConfig paths;
  std::vector<std::uint64_t> seeds{1};
  std::vector<SystemSpec> systems;  // [study] system = <name> <method> [layers]

  /// Study description built from this config. With no `system` lines the
  /// study has the single system described by [adapt].
  StudySpec study() const;
};

/// Parses config text. `source` names the origin in error messages.
RunConfig parse_run_config(std::string_view text, const std::string& source = "<config>");
RunConfig load_run_config(const std::filesystem::path& path);

/// Canonical `key = value` rendering that parses back to the same config.
std::string render_run_config(const RunConfig& cfg);

}  // namespace ags
