#include "dercl/streams.hpp"

#include <fstream>
#include <numbers>
#include <numeric>

#include "dercl/binary_io.hpp"

namespace dercl {

Matrix<double> gather(const Dataset& ds, std::span<const int> indices, const Transform& t) {
  Matrix<double> out(static_cast<Index>(indices.size()), ds.images.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const double* src = ds.images.row(indices[i]).data();
    double* dst = out.row(static_cast<Index>(i)).data();
    t.apply({src, static_cast<std::size_t>(ds.images.cols())}, {dst, static_cast<std::size_t>(out.cols())});
  }
  return out;
}

TaskStream sequential_stream(const Dataset& train, const Dataset& eval, int batch_size, int epochs) {
  TaskStream s;
  s.batch_size = batch_size;
  s.boundary_visible = true;
  s.num_classes = 10;
  for (int t = 0; t < 5; ++t) {
    TaskSpec task;
    task.id = t;
    task.classes = {2 * t, 2 * t + 1};
    task.epochs = epochs;
    task.train_indices = train.indices_of(task.classes);
    task.eval_indices = eval.indices_of(task.classes);
    s.tasks.push_back(std::move(task));
  }
  return s;
}

TaskStream domain_stream(const Dataset& train, const Dataset& eval, DomainKind kind, int num_tasks, std::uint64_t seed,
                         int batch_size, int epochs) {
  TaskStream s;
  s.batch_size = batch_size;
  s.boundary_visible = true;
  s.num_classes = 10;
  Rng rng = Rng(seed).split("transforms");
  std::vector<int> all_train(static_cast<std::size_t>(train.size()));
  std::iota(all_train.begin(), all_train.end(), 0);
  std::vector<int> all_eval(static_cast<std::size_t>(eval.size()));
  std::iota(all_eval.begin(), all_eval.end(), 0);
  for (int t = 0; t < num_tasks; ++t) {
    TaskSpec task;
    task.id = t;
    task.classes = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    task.epochs = epochs;
    task.transform = kind == DomainKind::permuted ? Transform::permutation(random_permutation(rng))
                                                  : Transform::rotation(rng.uniform(0.0, std::numbers::pi));
    task.train_indices = all_train;
    task.eval_indices = all_eval;
    s.tasks.push_back(std::move(task));
  }
  return s;
}

TaskBatcher::TaskBatcher(const Dataset& ds, const TaskSpec& task, int batch_size, Rng rng, bool expose_task_id)
    : ds_(ds), task_(task), batch_size_(batch_size), rng_(std::move(rng)), expose_task_id_(expose_task_id) {
  if (batch_size <= 0) throw ContractError("batch size must be positive");
  order_ = task_.train_indices;
  reshuffle();
}

void TaskBatcher::reshuffle() {
  rng_.shuffle(order_.begin(), order_.end());
  cursor_ = 0;
}

std::optional<StreamBatch> TaskBatcher::next() {
  if (cursor_ >= order_.size()) {
    if (++epoch_ >= task_.epochs || order_.empty()) return std::nullopt;
    reshuffle();
  }
  const std::size_t n = std::min<std::size_t>(batch_size_, order_.size() - cursor_);
  std::span<const int> idx(order_.data() + cursor_, n);
  cursor_ += n;

  StreamBatch b;
  b.raw_inputs = gather(ds_, idx);
  if (task_.transform.kind() == Transform::Kind::identity) {
    b.inputs = b.raw_inputs;
  } else {
    b.inputs = gather(ds_, idx, task_.transform);
  }
  b.example_ids.assign(idx.begin(), idx.end());
  b.labels.reserve(n);
  for (int i : idx) b.labels.push_back(ds_.labels[i]);
  b.angles.assign(n, task_.transform.kind() == Transform::Kind::rotation ? task_.transform.angle() : 0.0);
  if (expose_task_id_) b.task_hint = task_.id;
  b.batch_id = batch_id_++;
  return b;
}

// ---------------------------------------------------------------------------
// MNIST-360

double mnist360_offset(int digit, int rounds) {
  return (digit - 1) * std::numbers::pi / (2.0 * rounds);
}

std::pair<int, int> mnist360_batch_split(int rem1, int rem2, int batch_size) {
  const long total = static_cast<long>(rem1) + rem2;
  if (total == 0) return {0, 0};
  // round-half-up of rem1 * B / total in exact integer arithmetic
  const long n1_real2 = 2L * rem1 * batch_size + total;
  int n1 = static_cast<int>(n1_real2 / (2L * total));
  n1 = std::min(n1, rem1);
  const int n2 = std::min(batch_size - n1, rem2);
  return {n1, n2};
}

std::vector<std::vector<std::vector<int>>> mnist360_groups(const Dataset& train, int rounds, std::uint64_t seed) {
  Rng rng = Rng(seed).split("mnist360-groups");
  const int n_groups = 2 * rounds;
  std::vector<std::vector<std::vector<int>>> groups(kMnist360Digits);
  for (int d = 0; d < kMnist360Digits; ++d) {
    auto idx = train.indices_of(d);
    rng.shuffle(idx.begin(), idx.end());
    const std::size_t base = idx.size() / n_groups;
    const std::size_t extra = idx.size() % n_groups;
    std::size_t pos = 0;
    for (int g = 0; g < n_groups; ++g) {
      const std::size_t len = base + (static_cast<std::size_t>(g) < extra ? 1 : 0);
      groups[d].emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(pos),
                             idx.begin() + static_cast<std::ptrdiff_t>(pos + len));
      pos += len;
    }
  }
  return groups;
}

std::vector<ManifestEntry> mnist360_train_plan(const Dataset& train, const Mnist360Options& opts, std::uint64_t seed) {
  if (opts.rounds <= 0 || opts.batch_size <= 0) throw ContractError("mnist360: rounds and batch size must be positive");
  const auto groups = mnist360_groups(train, opts.rounds, seed);

  std::vector<int> digit_total(kMnist360Digits, 0);
  for (int d = 0; d < kMnist360Digits; ++d)
    for (const auto& g : groups[d]) digit_total[d] += static_cast<int>(g.size());

  std::vector<int> appearances(kMnist360Digits, 0);
  std::vector<int> counter(kMnist360Digits, 0);  // never reset
  std::vector<ManifestEntry> plan;
  int batch = 0;
  int pseudo_task = 0;

  auto emit = [&](int digit, int example) {
    ManifestEntry e;
    e.example = example;
    e.digit = digit;
    e.counter = counter[digit];
    e.angle = 2.0 * std::numbers::pi / digit_total[digit] * counter[digit] + mnist360_offset(digit, opts.rounds);
    e.batch = batch;
    e.pseudo_task = pseudo_task;
    plan.push_back(e);
    ++counter[digit];
  };

  for (int r = 0; r < opts.rounds; ++r) {
    for (int p = 0; p < kMnist360Digits; ++p, ++pseudo_task) {
      const int d1 = p;
      const int d2 = (p + 1) % kMnist360Digits;
      const auto& g1 = groups[d1][appearances[d1]++];
      const auto& g2 = groups[d2][appearances[d2]++];
      int c1 = 0, c2 = 0;
      const int n1_total = static_cast<int>(g1.size());
      const int n2_total = static_cast<int>(g2.size());
      while (c1 < n1_total || c2 < n2_total) {
        const auto [n1, n2] = mnist360_batch_split(n1_total - c1, n2_total - c2, opts.batch_size);
        for (int i = 0; i < n1; ++i) emit(d1, g1[c1++]);
        for (int i = 0; i < n2; ++i) emit(d2, g2[c2++]);
        ++batch;
      }
    }
  }
  return plan;
}

std::vector<ManifestEntry> mnist360_test_plan(const Dataset& test) {
  std::vector<int> digit_total(kMnist360Digits, 0);
  for (int y : test.labels)
    if (y < kMnist360Digits) ++digit_total[y];
  std::vector<int> counter(kMnist360Digits, 0);
  std::vector<ManifestEntry> plan;
  int step = 0;
  for (std::size_t i = 0; i < test.labels.size(); ++i) {
    const int d = test.labels[i];
    if (d >= kMnist360Digits) continue;
    ManifestEntry e;
    e.example = static_cast<int>(i);
    e.digit = d;
    e.counter = counter[d];
    e.angle = 2.0 * std::numbers::pi / digit_total[d] * counter[d];
    e.batch = step++;
    plan.push_back(e);
    ++counter[d];
  }
  return plan;
}

Matrix<double> gather_rotated(const Dataset& ds, std::span<const ManifestEntry> entries) {
  Matrix<double> out(static_cast<Index>(entries.size()), ds.images.cols());
  const auto cols = static_cast<std::size_t>(ds.images.cols());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const Transform t = Transform::rotation(entries[i].angle);
    t.apply({ds.images.row(entries[i].example).data(), cols}, {out.row(static_cast<Index>(i)).data(), cols});
  }
  return out;
}

PlanStream::PlanStream(const Dataset& ds, std::vector<ManifestEntry> plan) : ds_(ds), plan_(std::move(plan)) {}

std::optional<StreamBatch> PlanStream::next() {
  if (cursor_ >= plan_.size()) return std::nullopt;
  std::size_t end = cursor_;
  while (end < plan_.size() && plan_[end].batch == plan_[cursor_].batch) ++end;
  std::span<const ManifestEntry> entries(plan_.data() + cursor_, end - cursor_);

  StreamBatch b;
  b.batch_id = entries.front().batch;
  b.inputs = gather_rotated(ds_, entries);
  std::vector<int> ids;
  for (const auto& e : entries) {
    ids.push_back(e.example);
    b.labels.push_back(ds_.labels[e.example]);
    b.angles.push_back(e.angle);
  }
  b.raw_inputs = gather(ds_, ids);
  b.example_ids = std::move(ids);
  cursor_ = end;
  return b;
}

void write_manifest(const std::filesystem::path& path, std::span<const ManifestEntry> entries) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IngestionError(path.string(), "cannot open for writing");
  io::put_magic(os, "DERMANI1");
  io::put_u64(os, entries.size());
  for (const auto& e : entries) {
    io::put_i32(os, e.example);
    io::put_f64(os, e.angle);
    io::put_i32(os, e.batch);
  }
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IngestionError(path.string(), "cannot open file");
  io::Reader r(is, path.string());
  r.expect_magic("DERMANI1");
  const auto n = r.u64();
  std::vector<ManifestEntry> out;
  out.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    ManifestEntry e;
    e.example = r.i32();
    e.angle = r.f64();
    e.batch = r.i32();
    out.push_back(e);
  }
  return out;
}

}  // namespace dercl
