#pragma once

// Task streams: Sequential MNIST, Permuted/Rotated MNIST and the
// boundary-free MNIST-360 stream.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "dercl/data.hpp"
#include "dercl/rng.hpp"

namespace dercl {

/// The part of a batch a learner is allowed to see. Task identity is not
/// part of it, so boundary-free methods cannot read it.
struct LabeledBatch {
  const Matrix<double>& inputs;
  std::span<const int> labels;
};

struct StreamBatch {
  Matrix<double> inputs;      // transformed, as fed to the network
  Matrix<double> raw_inputs;  // before the task transform
  std::vector<int> labels;
  std::vector<int> example_ids;  // rows of the source dataset
  std::vector<double> angles;    // rotation applied to each row, 0 if none
  std::optional<int> task_hint;  // absent on MNIST-360
  int batch_id = 0;

  Index size() const { return inputs.rows(); }
  LabeledBatch view() const { return {inputs, labels}; }
};

struct TaskSpec {
  int id = 0;
  std::vector<int> classes;
  Transform transform;
  int epochs = 1;
  std::vector<int> train_indices;  // rows of the training dataset
  std::vector<int> eval_indices;   // rows of the evaluation dataset
};

struct TaskStream {
  std::vector<TaskSpec> tasks;
  int batch_size = 0;
  bool boundary_visible = true;
  int num_classes = 10;
};

/// Rows `indices` of `ds` with `t` applied.
Matrix<double> gather(const Dataset& ds, std::span<const int> indices, const Transform& t = Transform::identity());

/// Five two-digit tasks (0,1), (2,3), ..., (8,9) in that fixed order.
TaskStream sequential_stream(const Dataset& train, const Dataset& eval, int batch_size = 10, int epochs = 1);

enum class DomainKind { permuted, rotated };

/// `num_tasks` tasks over all ten digits; each task draws a fresh pixel
/// permutation or a rotation angle in [0, pi) from `seed`.
TaskStream domain_stream(const Dataset& train, const Dataset& eval, DomainKind kind, int num_tasks, std::uint64_t seed,
                         int batch_size = 128, int epochs = 1);

/// Shuffled mini-batches of one task, reshuffled every epoch.
class TaskBatcher {
 public:
  TaskBatcher(const Dataset& ds, const TaskSpec& task, int batch_size, Rng rng, bool expose_task_id = true);
  std::optional<StreamBatch> next();

 private:
  void reshuffle();

  const Dataset& ds_;
  const TaskSpec& task_;
  int batch_size_;
  Rng rng_;
  bool expose_task_id_;
  std::vector<int> order_;
  std::size_t cursor_ = 0;
  int epoch_ = 0;
  int batch_id_ = 0;
};

// ---------------------------------------------------------------------------
// MNIST-360

struct Mnist360Options {
  int rounds = 3;
  int batch_size = 16;
};

inline constexpr int kMnist360Digits = 9;  // 0..8; nines are excluded

/// One emitted example of a stream, enough to replay or audit it.
struct ManifestEntry {
  std::int32_t example = 0;  // row in the source dataset
  double angle = 0.0;
  std::int32_t batch = 0;
  std::int32_t pseudo_task = 0;
  std::int32_t digit = 0;
  std::int32_t counter = 0;  // value of the digit's global counter before emission
};

/// Angular offset of digit d: (d - 1) * pi / (2R).
double mnist360_offset(int digit, int rounds);

/// Number of d1 and d2 examples in the next batch given the remaining counts.
/// N1 = min(round_half_up(rem1 / (rem1 + rem2) * B), rem1), N2 = min(B - N1, rem2).
std::pair<int, int> mnist360_batch_split(int rem1, int rem2, int batch_size);

/// The 2R groups of every digit, an even random split of its examples.
std::vector<std::vector<std::vector<int>>> mnist360_groups(const Dataset& train, int rounds, std::uint64_t seed);

/// Complete training schedule. Pseudo-task k of round r pairs (p, p+1 mod 9);
/// each digit consumes its groups in order of appearance.
std::vector<ManifestEntry> mnist360_train_plan(const Dataset& train, const Mnist360Options& opts, std::uint64_t seed);

/// Test schedule: one digit per step, rotated by 2 pi C_d / |d| with no offset.
std::vector<ManifestEntry> mnist360_test_plan(const Dataset& test);

/// Rows of `ds` named by `entries`, each rotated by its angle.
Matrix<double> gather_rotated(const Dataset& ds, std::span<const ManifestEntry> entries);

/// Replays a plan batch by batch. Batches carry no task hint.
class PlanStream {
 public:
  PlanStream(const Dataset& ds, std::vector<ManifestEntry> plan);
  std::optional<StreamBatch> next();
  const std::vector<ManifestEntry>& plan() const { return plan_; }

 private:
  const Dataset& ds_;
  std::vector<ManifestEntry> plan_;
  std::size_t cursor_ = 0;
};

/// Binary manifest: "DERMANI1", u64 count, then per entry
/// i32 example, f64 angle, i32 batch (little-endian).
void write_manifest(const std::filesystem::path& path, std::span<const ManifestEntry> entries);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

}  // namespace dercl
