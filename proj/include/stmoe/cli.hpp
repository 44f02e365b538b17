#pragma once

// Command-line front end: generate, train, evaluate, ablate, search and
// export-attention. Exit codes: 0 success, 2 configuration error, 3 data
// error, 4 numerical failure.

#include <filesystem>
#include <iosfwd>
#include <string>

#include "stmoe/fusion.hpp"
#include "stmoe/losses.hpp"
#include "stmoe/moe_model.hpp"
#include "stmoe/stflow.hpp"
#include "stmoe/training.hpp"

namespace stmoe::cli {

enum ExitCode { ok = 0, failure = 1, config_error = 2, data_error = 3, numerical_error = 4 };

/// Versioned JSON run description; unknown keys are rejected.
struct RunConfig {
  std::filesystem::path data;
  std::filesystem::path out;
  std::uint64_t seed = 0;
  fusion::FusionConfig fusion;  // offsets are derived from the dataset interval
  fusion::SplitConfig split;
  flow::NormRange norm_range = flow::NormRange::symmetric;
  model::ModelConfig model;
  train::TrainConfig train;

  void validate() const;
};

inline constexpr int run_config_version = 1;

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);
std::string run_config_json(const RunConfig& cfg);

/// Dataset split and normalized per the run configuration.
fusion::Dataset load_dataset(const flow::StFlowData& data, const RunConfig& cfg);

/// Parses argv and runs one command; never throws.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace stmoe::cli
