#pragma once

// Experiment orchestration: configuration, runs, grid search, multi-seed
// summaries and result files.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "dercl/data.hpp"
#include "dercl/methods.hpp"
#include "dercl/metrics.hpp"

namespace dercl {

using Json = nlohmann::ordered_json;

enum class Setting { seq_mnist_class, seq_mnist_task, perm_mnist, rot_mnist, mnist360 };

std::string_view to_string(Setting s);
Setting parse_setting(std::string_view name);
bool is_sequential(Setting s);
Index num_classes(Setting s);

struct ExperimentConfig {
  Setting setting = Setting::seq_mnist_class;
  MethodConfig method;
  std::uint64_t seed = 0;
  int epochs_per_task = 1;
  int num_tasks = 20;  // Permuted / Rotated MNIST only
  std::filesystem::path data_dir;

  Index buffer_size() const { return method.buffer_capacity; }
  /// Throws ConfigError on an invalid combination.
  void validate() const;
};

/// Hyperparameters selected for a (setting, method, buffer) triple.
/// `buffer` is ignored for methods without memory.
MethodConfig default_hyperparameters(Setting s, MethodKind m, Index buffer);

/// The search space explored for a (setting, method) pair.
std::vector<MethodConfig> default_grid(Setting s, MethodKind m, Index buffer);

/// JSON schema:
///   { "setting": "seq_mnist_class", "method": "derpp", "buffer_size": 200,
///     "seed": 0, "lr": 0.03, "alpha": 0.02, "beta": 1.0, "batch_size": 10,
///     "replay_batch_size": 10, "epochs_per_task": 1, "num_tasks": 20,
///     "data_dir": "/path/to/mnist" }
/// Only "setting" and "method" are required; hyperparameters that are left
/// out come from default_hyperparameters().
ExperimentConfig config_from_json(const Json& j);
Json to_json(const ExperimentConfig& c);
ExperimentConfig load_config(const std::filesystem::path& path);

struct ResultsRecord {
  ExperimentConfig config;
  std::string version;
  std::string eval_split = "test";
  Eigen::MatrixXd accuracy_matrix;  // primary protocol
  std::optional<Eigen::MatrixXd> task_il_matrix;
  std::vector<double> random_baseline;
  std::vector<double> task_il_random_baseline;
  double final_avg_accuracy = 0.0;
  std::optional<double> final_avg_class_il_accuracy;  // sequential settings
  std::optional<double> final_avg_task_il_accuracy;
  std::optional<double> bwt;
  std::optional<double> fwt;
  std::optional<double> forgetting;
  std::string trace_digest;
  std::optional<std::string> checkpoint;
  double wall_time = 0.0;
};

Json to_json(const ResultsRecord& r);
ResultsRecord record_from_json(const Json& j);
ResultsRecord load_record(const std::filesystem::path& path);
void save_record(const std::filesystem::path& path, const ResultsRecord& r);
/// Serialised record without wall_time, for comparing reruns.
std::string deterministic_dump(const ResultsRecord& r);

/// results/<setting>/<method>/<buffer>/<seed>.json
std::filesystem::path results_path(const std::filesystem::path& root, const ExperimentConfig& c);

std::string artifact_version();

struct RunHooks {
  /// Called after every task of a bounded setting, once at the end of MNIST-360.
  std::function<void(const Learner&, int task)> on_task_end;
  /// Where to write the final learner checkpoint, if anywhere.
  std::optional<std::filesystem::path> checkpoint;
};

/// Trains on `train` and evaluates on `eval`.
ResultsRecord run(const ExperimentConfig& c, const Dataset& train, const Dataset& eval, const RunHooks& hooks = {});
ResultsRecord run(const ExperimentConfig& c, const MnistData& data, const RunHooks& hooks = {});

/// Validation score a grid search maximises.
double selection_score(const ResultsRecord& r);

struct GridCandidate {
  MethodConfig method;
  double score = 0.0;
};

struct GridResult {
  MethodConfig best;
  std::vector<GridCandidate> candidates;
};

/// Evaluates every grid point on a 10% stratified validation split of
/// `train`. Ties go to the lower lr, then alpha, then beta.
GridResult grid_search(const ExperimentConfig& base, std::span<const MethodConfig> grid, const Dataset& train,
                       int threads = 0);

struct Summary {
  std::vector<double> values;
  double mean = 0.0;
  std::optional<double> stddev;  // sample standard deviation, absent for n = 1
};

Summary summarize(std::span<const double> values);

struct MultiSeedResult {
  std::vector<ResultsRecord> records;
  Summary accuracy;
};

/// Seeds base, base+1, ..., base+n-1 with `threads` workers (0 = one per core).
MultiSeedResult multi_seed(const ExperimentConfig& c, const MnistData& data, int n, int threads = 0,
                           const RunHooks& hooks = {});

/// Runs fn(0..n-1) over a pool of workers.
void parallel_for(int n, int threads, const std::function<void(int)>& fn);

/// Record files matching `pattern`; a directory is searched recursively.
std::vector<std::filesystem::path> find_records(const std::string& pattern);

/// One row per (setting, method, buffer, seed, metric).
std::string report_csv(std::span<const ResultsRecord> records);
/// Mean and standard deviation per (setting, method, buffer).
std::string report_markdown(std::span<const ResultsRecord> records);

/// Training data of every task of a setting, in stream order, for the
/// Fisher and flatness probes.
std::vector<ExampleSet> training_sets(const ExperimentConfig& c, const Dataset& train);
/// Evaluation set of every task (one set for MNIST-360).
std::vector<ExampleSet> evaluation_sets(const ExperimentConfig& c, const Dataset& eval);

}  // namespace dercl
