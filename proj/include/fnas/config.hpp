#pragma once

// Flat `key = value` run configuration shared by every subcommand.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fnas/datasets.hpp"
#include "fnas/evaluator.hpp"
#include "fnas/search_space.hpp"
#include "fnas/supernet.hpp"
#include "fnas/trilevel_search.hpp"

namespace fnas {

inline constexpr int kConfigSchemaVersion = 1;

enum class DataSource { synthetic, idx, cifar };

struct DataConfig {
  DataSource source = DataSource::synthetic;
  std::string path;       // idx: images file; cifar: batch file or directory
  std::string test_path;  // optional held-out set; otherwise test_fraction is split off
  double test_fraction = 0.2;
  SynthSpec synth;        // synthetic source only
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir;  // empty: --out, then the environment default
  DataConfig data;
  SupernetConfig supernet;  // space, width and depth of the search network
  SearchConfig search;
  std::string frozen_beta_path;  // search checkpoint whose β seeds frozen-beta mode
  bool resume = false;           // continue from an existing search checkpoint
  TrainConfig train;
  std::optional<ActivationKind> retrain_activation;  // rewrite every activation before retraining
  std::string genotype_path;
  std::string checkpoint_path;
  std::string model_path;

  /// Copies the run seed into the search and training configurations.
  void propagate_seed();
};

/// Parses the text form. Throws ParseError (with line) on malformed lines,
/// unknown or repeated keys, bad values, or a missing/unsupported schema_version.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

/// Every key with its resolved value; parse_run_config inverts it.
std::string serialize_run_config(const RunConfig& cfg);

/// All recognised keys in serialization order.
std::vector<std::string> config_keys();

/// Loads the configured dataset and returns standardized (train, test) sets;
/// statistics come from the training part only.
std::pair<Dataset, Dataset> load_run_data(const DataConfig& cfg, std::uint64_t split_seed);

}  // namespace fnas
