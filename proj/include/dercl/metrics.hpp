#pragma once

// Accuracy matrices, transfer metrics and the post-training probes.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "dercl/buffer.hpp"
#include "dercl/data.hpp"
#include "dercl/nn.hpp"
#include "dercl/streams.hpp"

namespace dercl {

/// A read-only evaluation set whose inputs are produced on demand, so large
/// transformed sets never have to be held in memory at once.
class ExampleSet {
 public:
  /// Rows `indices` of `ds`, all under the same transform.
  static ExampleSet task(const Dataset& ds, std::vector<int> indices, Transform t = Transform::identity());
  /// Every row of `ds` named by a plan, each rotated by its own angle.
  static ExampleSet plan(const Dataset& ds, std::vector<ManifestEntry> entries);
  /// Inputs already materialised.
  static ExampleSet dense(Matrix<double> inputs, std::vector<int> labels);

  Index size() const { return static_cast<Index>(labels_.size()); }
  const std::vector<int>& labels() const { return labels_; }
  /// Inputs of rows [begin, end).
  Matrix<double> inputs(Index begin, Index end) const;
  Matrix<double> inputs() const { return inputs(0, size()); }
  ExampleSet subset(std::span<const int> rows) const;

 private:
  enum class Kind { task, plan, dense };
  Kind kind_ = Kind::dense;
  const Dataset* ds_ = nullptr;
  std::vector<int> indices_;
  Transform transform_;
  std::vector<ManifestEntry> entries_;
  Matrix<double> dense_;
  std::vector<int> labels_;
};

/// Concatenation of several sets, materialised.
ExampleSet concat_dense(std::span<const ExampleSet> sets);

/// Up to `n` rows drawn without replacement, kept in their original order.
ExampleSet random_subset(const ExampleSet& set, Index n, Rng& rng);

inline constexpr Index kEvalChunk = 2000;

struct TaskAccuracy {
  double class_il = 0.0;  // argmax over every logit
  double task_il = 0.0;   // argmax over the task's classes
};

/// Exact ratio of correct predictions. With `mask`, predictions are
/// restricted to those classes.
double accuracy(const Mlp& model, const ExampleSet& set, std::span<const int> mask = {});

/// Both protocols from one pass.
TaskAccuracy task_accuracy(const Mlp& model, const ExampleSet& set, std::span<const int> classes);

/// Mean cross-entropy of `model` over `set`, or over the union of `sets`.
double mean_loss(const Mlp& model, const ExampleSet& set);
double mean_loss(const Mlp& model, std::span<const ExampleSet> sets);

// ---------------------------------------------------------------------------
// Transfer metrics over A[t][i], the accuracy on task i after training on t.

struct AccuracyMatrix {
  Eigen::MatrixXd a;                    // T x T
  std::vector<double> random_baseline;  // b_i

  Index tasks() const { return a.rows(); }
  /// Mean of the last row.
  double final_average() const;
};

double backward_transfer(const Eigen::MatrixXd& a);
double forgetting(const Eigen::MatrixXd& a);
double forward_transfer(const Eigen::MatrixXd& a, std::span<const double> random_baseline);

// ---------------------------------------------------------------------------
// Calibration

struct CalibrationBin {
  double lower = 0.0;
  double upper = 0.0;
  double mean_confidence = 0.0;
  double accuracy = 0.0;
  Index count = 0;
};

struct CalibrationReport {
  std::vector<CalibrationBin> bins;
  double ece = 0.0;
};

/// Equal-width bins over max-softmax confidence; bin b holds
/// confidences in [b/n, (b+1)/n), the last bin also holds 1.
CalibrationReport calibration(std::span<const double> confidence, std::span<const char> correct, int n_bins = 10);
CalibrationReport ece(const Mlp& model, const ExampleSet& set, int n_bins = 10);
CalibrationReport ece(const Mlp& model, std::span<const ExampleSet> sets, int n_bins = 10);

// ---------------------------------------------------------------------------
// Curvature and flatness

/// Compensated running sum.
class KahanSum {
 public:
  void add(double x) {
    const double y = x - c_;
    const double t = s_ + y;
    c_ = (t - s_) - y;
    s_ = t;
  }
  double value() const { return s_; }

 private:
  double s_ = 0.0;
  double c_ = 0.0;
};

/// Trace of the empirical Fisher, (1/N) sum_n ||grad CE(y_n, f(x_n))||^2.
double fisher_trace(const Mlp& model, const ExampleSet& set);
double fisher_trace(const Mlp& model, std::span<const ExampleSet> sets);

struct FlatnessCurve {
  std::vector<double> sigmas;
  std::vector<double> mean_loss;
};

inline const std::vector<double> kDefaultSigmas{0.0, 0.01, 0.02, 0.05, 0.1, 0.2};

/// Training loss under N(0, sigma^2) parameter noise, averaged over
/// `n_draws` perturbations per sigma. sigma = 0 is the unperturbed loss.
FlatnessCurve flatness_probe(const Mlp& model, std::span<const ExampleSet> train, std::span<const double> sigmas,
                             int n_draws, std::uint64_t seed);
FlatnessCurve flatness_probe(const Mlp& model, const ExampleSet& train, std::span<const double> sigmas, int n_draws,
                             std::uint64_t seed);

// ---------------------------------------------------------------------------
// Buffer probes

struct TrainOptions {
  int epochs = 1;
  int batch_size = 10;
  double lr = 0.1;
  std::uint64_t seed = 0;
};

/// Plain cross-entropy SGD on `set`, reshuffled every epoch.
void train_plain(Mlp& model, const ExampleSet& set, const TrainOptions& opts);

/// Fresh model trained only on the buffer; mean accuracy over `tests`.
double buffer_retrain_probe(const MemoryBuffer& buffer, std::span<const ExampleSet> tests, Index num_classes,
                            const TrainOptions& opts);

struct FinetuneResult {
  double before = 0.0;
  double after = 0.0;
  Index train_size = 0;
  Index heldout_size = 0;
};

/// Fine-tunes a copy of `model` on k examples per class drawn from `task_test`
/// and scores it on the remaining examples of that set.
FinetuneResult buffer_finetune_probe(const Mlp& model, const ExampleSet& task_test, int k, const TrainOptions& opts);

// ---------------------------------------------------------------------------
// Plot files

void write_flatness_curve(const std::filesystem::path& path, const FlatnessCurve& curve);
void write_reliability(const std::filesystem::path& path, const CalibrationReport& report);

}  // namespace dercl
