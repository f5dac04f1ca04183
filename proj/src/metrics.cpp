#include "dercl/metrics.hpp"

#include <fstream>
#include <map>
#include <numeric>

namespace dercl {

ExampleSet ExampleSet::task(const Dataset& ds, std::vector<int> indices, Transform t) {
  ExampleSet s;
  s.kind_ = Kind::task;
  s.ds_ = &ds;
  s.labels_.reserve(indices.size());
  for (int i : indices) s.labels_.push_back(ds.labels[i]);
  s.indices_ = std::move(indices);
  s.transform_ = std::move(t);
  return s;
}

ExampleSet ExampleSet::plan(const Dataset& ds, std::vector<ManifestEntry> entries) {
  ExampleSet s;
  s.kind_ = Kind::plan;
  s.ds_ = &ds;
  for (const auto& e : entries) s.labels_.push_back(ds.labels[e.example]);
  s.entries_ = std::move(entries);
  return s;
}

ExampleSet ExampleSet::dense(Matrix<double> inputs, std::vector<int> labels) {
  if (inputs.rows() != static_cast<Index>(labels.size())) throw ShapeError("ExampleSet: label count != rows");
  ExampleSet s;
  s.kind_ = Kind::dense;
  s.dense_ = std::move(inputs);
  s.labels_ = std::move(labels);
  return s;
}

Matrix<double> ExampleSet::inputs(Index begin, Index end) const {
  if (begin < 0 || end > size() || begin > end) throw ContractError("ExampleSet: row range out of bounds");
  switch (kind_) {
    case Kind::task:
      return gather(*ds_, std::span<const int>(indices_).subspan(begin, end - begin), transform_);
    case Kind::plan:
      return gather_rotated(*ds_, std::span<const ManifestEntry>(entries_).subspan(begin, end - begin));
    case Kind::dense:
      break;
  }
  return dense_.middleRows(begin, end - begin);
}

ExampleSet ExampleSet::subset(std::span<const int> rows) const {
  ExampleSet s;
  s.kind_ = kind_;
  s.ds_ = ds_;
  s.transform_ = transform_;
  for (int r : rows) {
    if (r < 0 || r >= size()) throw ContractError("ExampleSet::subset: row out of range");
    s.labels_.push_back(labels_[r]);
    if (kind_ == Kind::task) s.indices_.push_back(indices_[r]);
    if (kind_ == Kind::plan) s.entries_.push_back(entries_[r]);
  }
  if (kind_ == Kind::dense) {
    s.dense_.resize(static_cast<Index>(rows.size()), dense_.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) s.dense_.row(static_cast<Index>(i)) = dense_.row(rows[i]);
  }
  return s;
}

ExampleSet random_subset(const ExampleSet& set, Index n, Rng& rng) {
  std::vector<int> rows(static_cast<std::size_t>(set.size()));
  std::iota(rows.begin(), rows.end(), 0);
  if (n >= set.size()) return set.subset(rows);
  rng.shuffle(rows.begin(), rows.end());
  rows.resize(static_cast<std::size_t>(std::max<Index>(n, 0)));
  std::sort(rows.begin(), rows.end());
  return set.subset(rows);
}

ExampleSet concat_dense(std::span<const ExampleSet> sets) {
  Index n = 0;
  for (const auto& s : sets) n += s.size();
  Matrix<double> inputs(n, kMnistInputDim);
  std::vector<int> labels;
  labels.reserve(n);
  Index o = 0;
  for (const auto& s : sets) {
    inputs.middleRows(o, s.size()) = s.inputs();
    labels.insert(labels.end(), s.labels().begin(), s.labels().end());
    o += s.size();
  }
  return ExampleSet::dense(std::move(inputs), std::move(labels));
}

namespace {

template <typename F>
void for_each_chunk(const ExampleSet& set, F&& f) {
  for (Index b = 0; b < set.size(); b += kEvalChunk) {
    const Index e = std::min(set.size(), b + kEvalChunk);
    f(b, e, set.inputs(b, e));
  }
}

}  // namespace

double accuracy(const Mlp& model, const ExampleSet& set, std::span<const int> mask) {
  if (set.size() == 0) throw ContractError("accuracy: empty evaluation set");
  Index correct = 0;
  for_each_chunk(set, [&](Index b, Index, const Matrix<double>& x) {
    const Matrix<double> z = forward(model, x);
    for (Index i = 0; i < z.rows(); ++i) {
      const Index pred = mask.empty() ? argmax(z.row(i)) : masked_argmax(z.row(i), mask);
      if (pred == set.labels()[b + i]) ++correct;
    }
  });
  return static_cast<double>(correct) / static_cast<double>(set.size());
}

TaskAccuracy task_accuracy(const Mlp& model, const ExampleSet& set, std::span<const int> classes) {
  if (set.size() == 0) throw ContractError("task_accuracy: empty evaluation set");
  Index class_ok = 0, task_ok = 0;
  for_each_chunk(set, [&](Index b, Index, const Matrix<double>& x) {
    const Matrix<double> z = forward(model, x);
    for (Index i = 0; i < z.rows(); ++i) {
      const int y = set.labels()[b + i];
      if (argmax(z.row(i)) == y) ++class_ok;
      if (masked_argmax(z.row(i), classes) == y) ++task_ok;
    }
  });
  const auto n = static_cast<double>(set.size());
  return {class_ok / n, task_ok / n};
}

double mean_loss(const Mlp& model, std::span<const ExampleSet> sets) {
  KahanSum total;
  Index n = 0;
  for (const auto& set : sets) {
    for_each_chunk(set, [&](Index b, Index e, const Matrix<double>& x) {
      const Matrix<double> z = forward(model, x);
      const std::span<const int> y(set.labels().data() + b, static_cast<std::size_t>(e - b));
      total.add(cross_entropy<double>(z, y).value * static_cast<double>(e - b));
    });
    n += set.size();
  }
  if (n == 0) throw ContractError("mean_loss: empty set");
  return total.value() / static_cast<double>(n);
}

double mean_loss(const Mlp& model, const ExampleSet& set) { return mean_loss(model, std::span(&set, 1)); }

double AccuracyMatrix::final_average() const {
  if (a.rows() == 0) throw ContractError("empty accuracy matrix");
  return a.row(a.rows() - 1).mean();
}

namespace {

void require_square(const Eigen::MatrixXd& a) {
  if (a.rows() != a.cols()) throw ShapeError("accuracy matrix must be square");
  if (a.rows() < 2) throw ContractError("transfer metrics need at least two tasks");
}

}  // namespace

double backward_transfer(const Eigen::MatrixXd& a) {
  require_square(a);
  const Index t = a.rows();
  double s = 0.0;
  for (Index i = 0; i + 1 < t; ++i) s += a(t - 1, i) - a(i, i);
  return s / static_cast<double>(t - 1);
}

double forgetting(const Eigen::MatrixXd& a) {
  require_square(a);
  const Index t = a.rows();
  double s = 0.0;
  for (Index i = 0; i + 1 < t; ++i) s += a.col(i).segment(i, t - i).maxCoeff() - a(t - 1, i);
  return s / static_cast<double>(t - 1);
}

double forward_transfer(const Eigen::MatrixXd& a, std::span<const double> b) {
  require_square(a);
  const Index t = a.rows();
  if (static_cast<Index>(b.size()) != t) throw ShapeError("forward_transfer: one baseline per task");
  double s = 0.0;
  for (Index i = 1; i < t; ++i) s += a(i - 1, i) - b[i];
  return s / static_cast<double>(t - 1);
}

CalibrationReport calibration(std::span<const double> confidence, std::span<const char> correct, int n_bins) {
  if (n_bins <= 0) throw ContractError("calibration: need at least one bin");
  if (confidence.size() != correct.size()) throw ShapeError("calibration: confidence and correctness differ in length");
  if (confidence.empty()) throw ContractError("calibration: empty evaluation set");
  CalibrationReport r;
  r.bins.resize(n_bins);
  std::vector<KahanSum> conf_sum(n_bins);
  std::vector<Index> hits(n_bins, 0);
  for (std::size_t i = 0; i < confidence.size(); ++i) {
    const int b = std::min(n_bins - 1, static_cast<int>(confidence[i] * n_bins));
    conf_sum[b].add(confidence[i]);
    hits[b] += correct[i] ? 1 : 0;
    ++r.bins[b].count;
  }
  const auto n = static_cast<double>(confidence.size());
  for (int b = 0; b < n_bins; ++b) {
    auto& bin = r.bins[b];
    bin.lower = static_cast<double>(b) / n_bins;
    bin.upper = static_cast<double>(b + 1) / n_bins;
    if (bin.count == 0) continue;
    bin.mean_confidence = conf_sum[b].value() / static_cast<double>(bin.count);
    bin.accuracy = static_cast<double>(hits[b]) / static_cast<double>(bin.count);
    r.ece += static_cast<double>(bin.count) / n * std::abs(bin.accuracy - bin.mean_confidence);
  }
  return r;
}

CalibrationReport ece(const Mlp& model, std::span<const ExampleSet> sets, int n_bins) {
  std::vector<double> conf;
  std::vector<char> ok;
  for (const auto& set : sets) {
    for_each_chunk(set, [&](Index b, Index, const Matrix<double>& x) {
      const Matrix<double> z = forward(model, x);
      for (Index i = 0; i < z.rows(); ++i) {
        const RowVector<double> p = softmax(z.row(i));
        const Index pred = argmax(p);
        conf.push_back(p(pred));
        ok.push_back(pred == set.labels()[b + i]);
      }
    });
  }
  return calibration(conf, ok, n_bins);
}

CalibrationReport ece(const Mlp& model, const ExampleSet& set, int n_bins) { return ece(model, std::span(&set, 1), n_bins); }

double fisher_trace(const Mlp& model, std::span<const ExampleSet> sets) {
  KahanSum total;
  Index n = 0;
  for (const auto& set : sets) {
    for_each_chunk(set, [&](Index b, Index e, const Matrix<double>& x) {
      const std::span<const int> y(set.labels().data() + b, static_cast<std::size_t>(e - b));
      const Vector<double> sq = per_example_grad_sqnorms(model, x, y);
      for (Index i = 0; i < sq.size(); ++i) total.add(sq(i));
    });
    n += set.size();
  }
  if (n == 0) throw ContractError("fisher_trace: empty set");
  return total.value() / static_cast<double>(n);
}

double fisher_trace(const Mlp& model, const ExampleSet& set) { return fisher_trace(model, std::span(&set, 1)); }

FlatnessCurve flatness_probe(const Mlp& model, const ExampleSet& train, std::span<const double> sigmas, int n_draws,
                             std::uint64_t seed) {
  return flatness_probe(model, std::span(&train, 1), sigmas, n_draws, seed);
}

FlatnessCurve flatness_probe(const Mlp& model, std::span<const ExampleSet> train, std::span<const double> sigmas,
                             int n_draws, std::uint64_t seed) {
  if (n_draws <= 0) throw ContractError("flatness_probe: n_draws must be positive");
  FlatnessCurve c;
  const Rng root = Rng(seed).split("flatness");
  for (std::size_t k = 0; k < sigmas.size(); ++k) {
    const double sigma = sigmas[k];
    if (sigma < 0) throw ContractError("flatness_probe: sigma must be non-negative");
    c.sigmas.push_back(sigma);
    if (sigma == 0) {
      c.mean_loss.push_back(mean_loss(model, train));
      continue;
    }
    KahanSum s;
    for (int d = 0; d < n_draws; ++d) {
      Rng rng = root.split(static_cast<std::uint64_t>(k * n_draws + d));
      s.add(mean_loss(perturb(model, sigma, rng), train));
    }
    c.mean_loss.push_back(s.value() / n_draws);
  }
  return c;
}

void train_plain(Mlp& model, const ExampleSet& set, const TrainOptions& opts) {
  if (opts.batch_size <= 0 || !(opts.lr > 0)) throw ContractError("train_plain: bad batch size or learning rate");
  if (set.size() == 0 || opts.epochs <= 0) return;
  Rng rng = Rng(opts.seed).split("probe-train");
  const Matrix<double> x = set.inputs();
  std::vector<int> order(static_cast<std::size_t>(set.size()));
  std::iota(order.begin(), order.end(), 0);
  for (int ep = 0; ep < opts.epochs; ++ep) {
    rng.shuffle(order.begin(), order.end());
    for (std::size_t b = 0; b < order.size(); b += opts.batch_size) {
      const std::size_t e = std::min(order.size(), b + static_cast<std::size_t>(opts.batch_size));
      Matrix<double> xb(static_cast<Index>(e - b), x.cols());
      std::vector<int> yb;
      for (std::size_t i = b; i < e; ++i) {
        xb.row(static_cast<Index>(i - b)) = x.row(order[i]);
        yb.push_back(set.labels()[order[i]]);
      }
      const auto r = backward(model, xb, LossSpec::cross_entropy(std::move(yb)));
      sgd_step(model, r.grads, opts.lr);
    }
  }
}

double buffer_retrain_probe(const MemoryBuffer& buffer, std::span<const ExampleSet> tests, Index num_classes,
                            const TrainOptions& opts) {
  if (!buffer.payload().labels) throw ContractError("buffer_retrain_probe: buffer holds no labels");
  if (tests.empty()) throw ContractError("buffer_retrain_probe: no test sets");
  Rng init = Rng(opts.seed).split("init");
  Mlp model = make_mnist_classifier(num_classes, init);
  if (!buffer.empty()) {
    ReplayBatch all = buffer.all();
    train_plain(model, ExampleSet::dense(std::move(all.inputs), std::move(all.labels)), opts);
  }
  double s = 0.0;
  for (const auto& t : tests) s += accuracy(model, t);
  return s / static_cast<double>(tests.size());
}

FinetuneResult buffer_finetune_probe(const Mlp& model, const ExampleSet& task_test, int k, const TrainOptions& opts) {
  if (k <= 0) throw ContractError("buffer_finetune_probe: k must be positive");
  std::map<int, std::vector<int>> by_class;
  for (Index i = 0; i < task_test.size(); ++i) by_class[task_test.labels()[i]].push_back(static_cast<int>(i));
  Rng rng = Rng(opts.seed).split("finetune-pick");
  std::vector<int> train_rows, held_rows;
  for (auto& [label, rows] : by_class) {
    if (static_cast<int>(rows.size()) < k) {
      throw ContractError("buffer_finetune_probe: class " + std::to_string(label) + " has fewer than k test examples");
    }
    rng.shuffle(rows.begin(), rows.end());
    train_rows.insert(train_rows.end(), rows.begin(), rows.begin() + k);
    held_rows.insert(held_rows.end(), rows.begin() + k, rows.end());
  }
  std::sort(train_rows.begin(), train_rows.end());
  std::sort(held_rows.begin(), held_rows.end());
  // With k covering the whole set there is nothing held out; score on the
  // fine-tuning examples themselves.
  const ExampleSet held = task_test.subset(held_rows.empty() ? train_rows : held_rows);

  FinetuneResult r;
  r.train_size = static_cast<Index>(train_rows.size());
  r.heldout_size = static_cast<Index>(held_rows.size());
  r.before = accuracy(model, held);
  Mlp tuned = model;
  train_plain(tuned, task_test.subset(train_rows), opts);
  r.after = accuracy(tuned, held);
  return r;
}

void write_flatness_curve(const std::filesystem::path& path, const FlatnessCurve& curve) {
  std::ofstream os(path);
  if (!os) throw IngestionError(path.string(), "cannot open for writing");
  os << "# sigma mean_loss\n";
  os.precision(17);
  for (std::size_t i = 0; i < curve.sigmas.size(); ++i) os << curve.sigmas[i] << ' ' << curve.mean_loss[i] << '\n';
}

void write_reliability(const std::filesystem::path& path, const CalibrationReport& report) {
  std::ofstream os(path);
  if (!os) throw IngestionError(path.string(), "cannot open for writing");
  os << "# ece " << report.ece << "\n# lower upper mean_confidence accuracy count\n";
  os.precision(17);
  for (const auto& b : report.bins) {
    os << b.lower << ' ' << b.upper << ' ' << b.mean_confidence << ' ' << b.accuracy << ' ' << b.count << '\n';
  }
}

}  // namespace dercl
