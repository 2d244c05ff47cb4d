#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "cvm/anchors.hpp"
#include "cvm/metrics.hpp"
#include "cvm/stream.hpp"
#include "cvm/trainer.hpp"

namespace cvm {

inline constexpr int kConfigSchemaVersion = 1;

// Environment variable that roots relative output directories.
inline constexpr const char* kOutputRootEnv = "CVM_OUTPUT_ROOT";

struct DatasetConfig {
  std::string kind = "synthetic";  // synthetic | idx
  // synthetic
  std::size_t classes = 10;
  std::size_t dim = 32;
  std::size_t samples_per_class = 200;
  double alignment = 1.0;
  double noise = 0.3;
  double radius = 1.0;
  double train_fraction = 0.8;
  std::uint64_t seed = 11;
  // idx; test files are optional (otherwise the train files are split)
  std::string train_images;
  std::string train_labels;
  std::string test_images;
  std::string test_labels;
  std::vector<std::string> class_names;  // label of class i; defaults to "i"
  // domain-il
  std::vector<std::string> transforms;
  std::string test_mode = "per-task";  // per-task | fixed
};

struct AnchorConfig {
  std::string source = "synthetic";  // synthetic | file
  std::string path;
  std::size_t dim = 16;
  std::vector<std::vector<ClassId>> groups;
  double s_in = 0.7;
  double s_out = 0.1;
  std::uint64_t seed = 7;
};

struct NetworkConfig {
  std::vector<std::size_t> hidden = {64};
  std::string activation = "relu";
  bool l2norm_head = true;
};

struct HyperConfig {
  double lr = 0.1;
  std::size_t batch_size = 32;
  std::size_t epochs = 20;
  std::size_t memory_size = 500;
  double replay_fraction = 1.0;
  std::string replay_policy = "class-balanced";
  std::string buffer_update = "during";
  double alpha = 0.2;
  double beta = 1.0;
  std::string negative_mining = "hardest";
  std::string retention_metric = "squared";
};

struct ProbeConfig {
  std::size_t epochs = 100;
  double lr = 0.05;
  std::size_t batch_size = 32;
};

struct SweepConfig {
  std::vector<std::size_t> memory = {500, 1000, 2000, 3000, 5000};
  std::vector<double> beta = {0.0, 0.01, 0.1, 1.0, 10.0};
};

struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;
  std::string name = "experiment";
  std::string scenario = "class-il";
  std::size_t tasks = 5;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  DatasetConfig dataset;
  AnchorConfig anchors;
  NetworkConfig network;
  std::vector<std::string> strategies = {"cvm"};
  HyperConfig hyper;
  ProbeConfig probe;
  SweepConfig sweep;
  std::string output_dir = "runs/experiment";
  // Directory that relative input paths are resolved against; not serialized.
  std::string base_dir = ".";
};

// Strict parse: unknown keys, wrong types and precondition violations throw
// ConfigError naming the offending field (e.g. "hyper.beta").
ExperimentConfig parse_config(const std::string& json_text, const std::string& base_dir = ".");
ExperimentConfig load_config(const std::string& path);
void validate_config(const ExperimentConfig& cfg);

// Canonical JSON with every field spelled out; identical configs give
// identical text.
std::string to_json_text(const ExperimentConfig& cfg);

// git blob hash: hex SHA-1 of "blob <len>\0" + content.
std::string git_blob_hash(std::string_view content);
std::string config_hash(const ExperimentConfig& cfg);

struct ExperimentInputs {
  AnchorSetPtr anchors;
  Dataset dataset;
  std::string input_hash;  // config plus every input file read
};

ExperimentInputs prepare_inputs(const ExperimentConfig& cfg);
TaskStream build_stream(const ExperimentConfig& cfg, const Dataset& dataset, std::uint64_t seed);
Strategy make_strategy(const ExperimentConfig& cfg, const std::string& kind);
NetConfig make_net_config(const ExperimentConfig& cfg);
TrainHyper make_train_hyper(const ExperimentConfig& cfg);
ProbeHyper make_probe_hyper(const ExperimentConfig& cfg, std::uint64_t seed);

std::string resolve_output_dir(const ExperimentConfig& cfg);

struct SeedSummary {
  std::string strategy;
  std::uint64_t seed = 0;
  AccuracyMatrix accuracy;
  double avg_accuracy = 0.0;
  double forgetting = 0.0;  // NaN when undefined
  double last_task_accuracy = 0.0;
};

// Trains every strategy on every seed, writing checkpoints and metric files
// into `out_dir`. Returns the per-(strategy, seed) summaries.
std::vector<SeedSummary> run_experiment(const ExperimentConfig& cfg, const std::string& out_dir,
                                        std::ostream& log);

struct ProbeRow {
  std::string strategy;
  std::uint64_t seed = 0;
  std::vector<double> probe_accuracy;                    // tasks 1..T-1
  std::vector<std::optional<double>> zero_shot_accuracy;  // nullopt: inapplicable
  std::vector<double> zero_shot_chance;
  double fw_score = 0.0;
};

// Linear probe and zero-shot evaluation over the post-task checkpoints of a
// finished run directory.
std::vector<ProbeRow> probe_run_dir(const std::string& run_dir, std::ostream& log);

// Command entry points. They print diagnostics to `err` and return the
// process exit code: 0 success, 2 invalid configuration, 3 missing or
// inconsistent state, 1 anything else.
int cmd_run(const std::string& config_path, std::optional<std::uint64_t> seed, std::ostream& out,
            std::ostream& err);
int cmd_sweep(const std::string& config_path, const std::string& axis, std::ostream& out,
              std::ostream& err);
int cmd_probe(const std::string& run_dir, std::ostream& out, std::ostream& err);

}  // namespace cvm
