#include "dercl/harness.hpp"

#include <glob.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#ifndef DERCL_VERSION
#define DERCL_VERSION "0.0.0-unknown"
#endif

namespace dercl {

namespace {

constexpr std::array<std::pair<Setting, std::string_view>, 5> kSettingNames{{
    {Setting::seq_mnist_class, "seq_mnist_class"},
    {Setting::seq_mnist_task, "seq_mnist_task"},
    {Setting::perm_mnist, "perm_mnist"},
    {Setting::rot_mnist, "rot_mnist"},
    {Setting::mnist360, "mnist360"},
}};

}  // namespace

std::string_view to_string(Setting s) {
  for (const auto& [k, n] : kSettingNames)
    if (k == s) return n;
  return "unknown";
}

Setting parse_setting(std::string_view name) {
  for (const auto& [k, n] : kSettingNames)
    if (n == name) return k;
  throw ConfigError("unknown setting '" + std::string(name) + "'");
}

bool is_sequential(Setting s) { return s == Setting::seq_mnist_class || s == Setting::seq_mnist_task; }

Index num_classes(Setting s) { return s == Setting::mnist360 ? kMnist360Digits : 10; }

void ExperimentConfig::validate() const {
  method.validate();
  if (epochs_per_task <= 0) throw ConfigError("epochs_per_task must be positive");
  if (num_tasks < 2) throw ConfigError("num_tasks must be at least 2");
  if (setting == Setting::mnist360) {
    if (method.kind == MethodKind::fdr) throw ConfigError("fdr needs task boundaries, which mnist360 does not provide");
  }
  if (uses_buffer(method.kind)) {
    const Index b = method.buffer_capacity;
    const bool ok = setting == Setting::mnist360 ? (b == 200 || b == 500 || b == 1000)
                                                 : (b == 200 || b == 500 || b == 1000 || b == 5120);
    if (!ok) {
      throw ConfigError("buffer size " + std::to_string(b) + " is not available for " + std::string(to_string(setting)));
    }
  }
}

// ---------------------------------------------------------------------------
// Hyperparameter tables

namespace {

struct Hp {
  double lr;
  double alpha = 0.0;
  double beta = 0.0;
  int bs = 0;
  int mbs = 0;
};

// Buffer 1000 has no entry outside MNIST-360; it borrows the 500 column.
Hp pick(Index buffer, Hp b200, Hp b500, Hp b5120) {
  if (buffer <= 200) return b200;
  if (buffer <= 1000) return b500;
  return b5120;
}

Hp pick360(Index buffer, Hp b200, Hp b500, Hp b1000) {
  if (buffer <= 200) return b200;
  if (buffer <= 500) return b500;
  return b1000;
}

Hp lookup(Setting s, MethodKind m, Index buf) {
  using K = MethodKind;
  switch (s) {
    case Setting::seq_mnist_class:
    case Setting::seq_mnist_task:
      switch (m) {
        case K::sgd:
        case K::joint: return {0.03};
        case K::er: return pick(buf, {0.01}, {0.1}, {0.1});
        case K::der: return pick(buf, {0.03, 0.2}, {0.03, 1.0}, {0.1, 0.5});
        case K::derpp: return pick(buf, {0.03, 0.2, 1.0}, {0.03, 1.0, 0.5}, {0.1, 0.2, 0.5});
        case K::fdr: return pick(buf, {0.03, 0.5}, {0.1, 0.2}, {0.1, 0.2});
        case K::agem_r: return {0.1};
      }
      break;
    case Setting::perm_mnist:
      switch (m) {
        case K::sgd:
        case K::joint:
        case K::er: return {0.2};
        case K::der: return pick(buf, {0.2, 1.0}, {0.2, 1.0}, {0.2, 0.5});
        case K::derpp: return pick(buf, {0.1, 1.0, 1.0}, {0.2, 1.0, 0.5}, {0.2, 0.5, 1.0});
        case K::fdr: return pick(buf, {0.1, 1.0}, {0.1, 0.3}, {0.1, 1.0});
        case K::agem_r: return {0.1};
      }
      break;
    case Setting::rot_mnist:
      switch (m) {
        case K::sgd:
        case K::joint:
        case K::er: return {0.2};
        case K::der: return pick(buf, {0.2, 1.0}, {0.2, 0.5}, {0.2, 0.5});
        case K::derpp: return pick(buf, {0.1, 1.0, 0.5}, {0.2, 0.5, 1.0}, {0.2, 0.5, 0.5});
        case K::fdr: return pick(buf, {0.1, 1.0}, {0.2, 0.3}, {0.2, 1.0});
        case K::agem_r: return pick(buf, {0.1}, {0.3}, {0.3});
      }
      break;
    case Setting::mnist360:
      switch (m) {
        case K::sgd:
        case K::joint: return {0.1, 0, 0, 4, 4};
        case K::er: return pick360(buf, {0.2, 0, 0, 1, 16}, {0.2, 0, 0, 1, 16}, {0.2, 0, 0, 4, 16});
        case K::agem_r: return pick360(buf, {0.1, 0, 0, 16, 128}, {0.1, 0, 0, 16, 128}, {0.1, 0, 0, 4, 128});
        case K::der: return pick360(buf, {0.1, 0.5, 0, 16, 64}, {0.2, 0.5, 0, 16, 16}, {0.1, 0.5, 0, 8, 16});
        case K::derpp:
          return pick360(buf, {0.2, 0.5, 1.0, 16, 16}, {0.2, 0.5, 1.0, 16, 16}, {0.2, 0.2, 1.0, 16, 128});
        case K::fdr: break;
      }
      break;
  }
  throw ConfigError(std::string(to_string(m)) + " has no hyperparameters for " + std::string(to_string(s)));
}

int default_batch(Setting s) {
  switch (s) {
    case Setting::perm_mnist:
    case Setting::rot_mnist: return 128;
    case Setting::mnist360: return 16;
    default: return 10;
  }
}

MethodConfig from_hp(MethodKind m, Index buffer, const Hp& hp, Setting s) {
  MethodConfig c;
  c.kind = m;
  c.lr = hp.lr;
  // Tabulated alphas weight a squared error averaged over classes; our
  // logit-MSE sums over them.
  c.alpha = hp.alpha / static_cast<double>(num_classes(s));
  c.beta = hp.beta;
  c.buffer_capacity = uses_buffer(m) ? buffer : 0;
  c.batch_size = hp.bs > 0 ? hp.bs : default_batch(s);
  c.replay_batch_size = hp.mbs > 0 ? hp.mbs : c.batch_size;
  return c;
}

}  // namespace

MethodConfig default_hyperparameters(Setting s, MethodKind m, Index buffer) {
  return from_hp(m, buffer, lookup(s, m, buffer), s);
}

std::vector<MethodConfig> default_grid(Setting s, MethodKind m, Index buffer) {
  using K = MethodKind;
  std::vector<double> lrs, alphas{0.0}, betas{0.0};
  std::vector<int> bss{0}, mbss{0};
  const bool seq = is_sequential(s);
  switch (s) {
    case Setting::seq_mnist_class:
    case Setting::seq_mnist_task:
    case Setting::perm_mnist:
    case Setting::rot_mnist:
      switch (m) {
        case K::sgd:
        case K::joint: lrs = seq ? std::vector{0.01, 0.03, 0.1} : std::vector{0.03, 0.1, 0.2}; break;
        case K::er:
          lrs = seq ? std::vector{0.01, 0.03, 0.1}
                    : (s == Setting::perm_mnist ? std::vector{0.03, 0.1, 0.2} : std::vector{0.1, 0.2});
          break;
        case K::agem_r: lrs = seq ? std::vector{0.03, 0.1} : std::vector{0.01, 0.1, 0.3}; break;
        case K::der:
          lrs = seq ? std::vector{0.03, 0.1} : std::vector{0.1, 0.2};
          alphas = seq ? std::vector{0.2, 0.5, 1.0} : std::vector{0.5, 1.0};
          break;
        case K::derpp:
          lrs = seq ? std::vector{0.03, 0.1} : std::vector{0.1, 0.2};
          alphas = seq ? std::vector{0.2, 0.5, 1.0} : std::vector{0.5, 1.0};
          betas = seq ? std::vector{0.2, 0.5, 1.0} : std::vector{0.5, 1.0};
          break;
        case K::fdr:
          lrs = seq ? std::vector{0.03, 0.1} : std::vector{0.03, 0.1, 0.2};
          alphas = seq ? std::vector{0.2, 0.5, 1.0} : std::vector{0.3, 1.0};
          break;
      }
      break;
    case Setting::mnist360:
      lrs = {0.1, 0.2};
      switch (m) {
        case K::sgd:
        case K::joint: bss = {1, 4, 8, 16}; break;
        case K::er: bss = {1, 4, 8, 16}, mbss = {16, 64, 128}; break;
        case K::agem_r: bss = {1, 4, 16}, mbss = {16, 64, 128}; break;
        case K::der: bss = {1, 4, 8, 16}, mbss = {16, 64, 128}, alphas = {0.5, 1.0}; break;
        case K::derpp: bss = {1, 4, 8, 16}, mbss = {16, 64, 128}, alphas = {0.2, 0.5}, betas = {0.5, 1.0}; break;
        case K::fdr: throw ConfigError("fdr is not available on mnist360");
      }
      break;
  }
  std::vector<MethodConfig> grid;
  for (double lr : lrs)
    for (double a : alphas)
      for (double b : betas)
        for (int bs : bss)
          for (int mbs : mbss) grid.push_back(from_hp(m, buffer, Hp{lr, a, b, bs, mbs}, s));
  return grid;
}

// ---------------------------------------------------------------------------
// Configuration files

ExperimentConfig config_from_json(const Json& j) {
  try {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    static const std::vector<std::string> known{"setting", "method", "buffer_size", "seed", "lr", "alpha", "beta",
                                                "batch_size", "replay_batch_size", "epochs_per_task", "num_tasks",
                                                "data_dir"};
    for (const auto& [k, v] : j.items()) {
      if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("unknown config field '" + k + "'");
    }
    if (!j.contains("setting") || !j.contains("method")) throw ConfigError("config needs 'setting' and 'method'");
    ExperimentConfig c;
    c.setting = parse_setting(j.at("setting").get<std::string>());
    const MethodKind kind = parse_method(j.at("method").get<std::string>());
    const Index buffer = j.value("buffer_size", Index{0});
    if (uses_buffer(kind) && !j.contains("buffer_size")) throw ConfigError("method needs a buffer_size");
    if (!uses_buffer(kind) && buffer != 0) throw ConfigError(std::string(to_string(kind)) + " keeps no buffer");
    c.method = default_hyperparameters(c.setting, kind, buffer);
    c.method.lr = j.value("lr", c.method.lr);
    c.method.alpha = j.value("alpha", c.method.alpha);
    c.method.beta = j.value("beta", c.method.beta);
    c.method.batch_size = j.value("batch_size", c.method.batch_size);
    c.method.replay_batch_size = j.value("replay_batch_size", c.method.replay_batch_size);
    c.seed = j.value("seed", std::uint64_t{0});
    c.epochs_per_task = j.value("epochs_per_task", 1);
    c.num_tasks = j.value("num_tasks", 20);
    if (j.contains("data_dir")) c.data_dir = j.at("data_dir").get<std::string>();
    c.validate();
    return c;
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
}

Json to_json(const ExperimentConfig& c) {
  Json j;
  j["setting"] = to_string(c.setting);
  j["method"] = to_string(c.method.kind);
  j["buffer_size"] = c.method.buffer_capacity;
  j["seed"] = c.seed;
  j["lr"] = c.method.lr;
  j["alpha"] = c.method.alpha;
  j["beta"] = c.method.beta;
  j["batch_size"] = c.method.batch_size;
  j["replay_batch_size"] = c.method.replay_batch_size;
  j["epochs_per_task"] = c.epochs_per_task;
  j["num_tasks"] = c.num_tasks;
  if (!c.data_dir.empty()) j["data_dir"] = c.data_dir.string();
  return j;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError(path.string(), "cannot open config");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw IngestionError(path.string(), std::string("invalid JSON: ") + e.what());
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Records

namespace {

Json matrix_json(const Eigen::MatrixXd& m) {
  Json rows = Json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    Json row = Json::array();
    for (Index k = 0; k < m.cols(); ++k) row.push_back(m(i, k));
    rows.push_back(row);
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const Json& j) {
  const auto rows = static_cast<Index>(j.size());
  const auto cols = rows == 0 ? Index{0} : static_cast<Index>(j.at(0).size());
  Eigen::MatrixXd m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    if (static_cast<Index>(j.at(i).size()) != cols) throw ShapeError("ragged accuracy matrix");
    for (Index k = 0; k < cols; ++k) m(i, k) = j.at(i).at(k).get<double>();
  }
  return m;
}

template <typename T>
Json optional_json(const std::optional<T>& v) {
  return v ? Json(*v) : Json(nullptr);
}

template <typename T>
std::optional<T> optional_from(const Json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<T>();
}

std::string digest(const Mlp& model) {
  const Vector<double> theta = flatten(model);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (Index i = 0; i < theta.size(); ++i) {
    const auto bits = std::bit_cast<std::uint64_t>(theta(i));
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  }
  std::ostringstream os;
  os << "fnv1a64:" << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

}  // namespace

Json to_json(const ResultsRecord& r) {
  Json j;
  j["version"] = r.version;
  j["config"] = to_json(r.config);
  j["eval_split"] = r.eval_split;
  j["accuracy_matrix"] = matrix_json(r.accuracy_matrix);
  j["task_il_matrix"] = r.task_il_matrix ? matrix_json(*r.task_il_matrix) : Json(nullptr);
  j["random_baseline"] = r.random_baseline;
  j["task_il_random_baseline"] = r.task_il_random_baseline;
  j["final_avg_accuracy"] = r.final_avg_accuracy;
  j["final_avg_class_il_accuracy"] = optional_json(r.final_avg_class_il_accuracy);
  j["final_avg_task_il_accuracy"] = optional_json(r.final_avg_task_il_accuracy);
  j["bwt"] = optional_json(r.bwt);
  j["fwt"] = optional_json(r.fwt);
  j["forgetting"] = optional_json(r.forgetting);
  j["trace_digest"] = r.trace_digest;
  j["checkpoint"] = optional_json(r.checkpoint);
  j["wall_time"] = r.wall_time;
  return j;
}

ResultsRecord record_from_json(const Json& j) {
  try {
    ResultsRecord r;
    r.version = j.at("version").get<std::string>();
    r.config = config_from_json(j.at("config"));
    r.eval_split = j.at("eval_split").get<std::string>();
    r.accuracy_matrix = matrix_from_json(j.at("accuracy_matrix"));
    if (!j.at("task_il_matrix").is_null()) r.task_il_matrix = matrix_from_json(j.at("task_il_matrix"));
    r.random_baseline = j.at("random_baseline").get<std::vector<double>>();
    r.task_il_random_baseline = j.at("task_il_random_baseline").get<std::vector<double>>();
    r.final_avg_accuracy = j.at("final_avg_accuracy").get<double>();
    r.final_avg_class_il_accuracy = optional_from<double>(j, "final_avg_class_il_accuracy");
    r.final_avg_task_il_accuracy = optional_from<double>(j, "final_avg_task_il_accuracy");
    r.bwt = optional_from<double>(j, "bwt");
    r.fwt = optional_from<double>(j, "fwt");
    r.forgetting = optional_from<double>(j, "forgetting");
    r.trace_digest = j.at("trace_digest").get<std::string>();
    r.checkpoint = optional_from<std::string>(j, "checkpoint");
    r.wall_time = j.at("wall_time").get<double>();
    return r;
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("malformed results record: ") + e.what());
  }
}

ResultsRecord load_record(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError(path.string(), "cannot open record");
  try {
    return record_from_json(Json::parse(in));
  } catch (const Json::parse_error& e) {
    throw IngestionError(path.string(), std::string("invalid JSON: ") + e.what());
  }
}

void save_record(const std::filesystem::path& path, const ResultsRecord& r) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IngestionError(path.string(), "cannot open for writing");
  out << to_json(r).dump(2) << '\n';
}

std::string deterministic_dump(const ResultsRecord& r) {
  Json j = to_json(r);
  j.erase("wall_time");
  return j.dump();
}

std::filesystem::path results_path(const std::filesystem::path& root, const ExperimentConfig& c) {
  const std::string buffer = uses_buffer(c.method.kind) ? std::to_string(c.method.buffer_capacity) : "none";
  return root / std::string(to_string(c.setting)) / std::string(to_string(c.method.kind)) / buffer /
         (std::to_string(c.seed) + ".json");
}

std::string artifact_version() { return DERCL_VERSION; }

// ---------------------------------------------------------------------------
// Runs

namespace {

TaskStream make_stream(const ExperimentConfig& c, const Dataset& train, const Dataset& eval) {
  switch (c.setting) {
    case Setting::seq_mnist_class:
    case Setting::seq_mnist_task:
      return sequential_stream(train, eval, c.method.batch_size, c.epochs_per_task);
    case Setting::perm_mnist:
      return domain_stream(train, eval, DomainKind::permuted, c.num_tasks, c.seed, c.method.batch_size,
                           c.epochs_per_task);
    case Setting::rot_mnist:
      return domain_stream(train, eval, DomainKind::rotated, c.num_tasks, c.seed, c.method.batch_size,
                           c.epochs_per_task);
    case Setting::mnist360:
      break;
  }
  throw ContractError("mnist360 has no task stream");
}

std::vector<ManifestEntry> train_plan(const ExperimentConfig& c, const Dataset& train) {
  return mnist360_train_plan(train, Mnist360Options{3, c.method.batch_size}, c.seed);
}

/// One shuffled pass over every (task, example) pair, repeated per epoch.
void train_joint_tasks(Learner& learner, const TaskStream& stream, const Dataset& train, const ExperimentConfig& c) {
  std::vector<std::pair<int, int>> pairs;
  for (const auto& t : stream.tasks)
    for (int i : t.train_indices) pairs.emplace_back(t.id, i);
  Rng rng = Rng(c.seed).split("stream").split("joint");
  const auto bs = static_cast<std::size_t>(c.method.batch_size);
  for (int ep = 0; ep < c.epochs_per_task; ++ep) {
    rng.shuffle(pairs.begin(), pairs.end());
    for (std::size_t b = 0; b < pairs.size(); b += bs) {
      const std::size_t e = std::min(pairs.size(), b + bs);
      Matrix<double> x(static_cast<Index>(e - b), kMnistInputDim);
      std::vector<int> y;
      for (std::size_t i = b; i < e; ++i) {
        const auto [task, idx] = pairs[i];
        stream.tasks[task].transform.apply(
            {train.images.row(idx).data(), static_cast<std::size_t>(kMnistInputDim)},
            {x.row(static_cast<Index>(i - b)).data(), static_cast<std::size_t>(kMnistInputDim)});
        y.push_back(train.labels[idx]);
      }
      learner.observe({x, y});
    }
  }
}

void train_joint_plan(Learner& learner, std::vector<ManifestEntry> plan, const Dataset& train,
                      const ExperimentConfig& c) {
  Rng rng = Rng(c.seed).split("stream").split("joint");
  const auto bs = static_cast<std::size_t>(c.method.batch_size);
  for (int ep = 0; ep < c.epochs_per_task; ++ep) {
    rng.shuffle(plan.begin(), plan.end());
    for (std::size_t b = 0; b < plan.size(); b += bs) {
      const std::size_t e = std::min(plan.size(), b + bs);
      std::span<const ManifestEntry> entries(plan.data() + b, e - b);
      const Matrix<double> x = gather_rotated(train, entries);
      std::vector<int> y;
      for (const auto& en : entries) y.push_back(train.labels[en.example]);
      learner.observe({x, y});
    }
  }
}

constexpr int kBaselineInits = 10;

}  // namespace

std::vector<ExampleSet> training_sets(const ExperimentConfig& c, const Dataset& train) {
  if (c.setting == Setting::mnist360) return {ExampleSet::plan(train, train_plan(c, train))};
  const TaskStream s = make_stream(c, train, train);
  std::vector<ExampleSet> out;
  for (const auto& t : s.tasks) out.push_back(ExampleSet::task(train, t.train_indices, t.transform));
  return out;
}

std::vector<ExampleSet> evaluation_sets(const ExperimentConfig& c, const Dataset& eval) {
  if (c.setting == Setting::mnist360) return {ExampleSet::plan(eval, mnist360_test_plan(eval))};
  const TaskStream s = make_stream(c, eval, eval);
  std::vector<ExampleSet> out;
  for (const auto& t : s.tasks) out.push_back(ExampleSet::task(eval, t.eval_indices, t.transform));
  return out;
}

ResultsRecord run(const ExperimentConfig& c, const Dataset& train, const Dataset& eval, const RunHooks& hooks) {
  c.validate();
  const auto start = std::chrono::steady_clock::now();
  const Index classes = num_classes(c.setting);
  auto learner = make_learner(c.method, classes, c.seed);

  ResultsRecord r;
  r.config = c;
  r.version = artifact_version();
  r.eval_split = eval.split == Split::test ? "test" : eval.split == Split::validation ? "validation" : "train";
  const bool joint = c.method.kind == MethodKind::joint;

  if (c.setting == Setting::mnist360) {
    auto plan = train_plan(c, train);
    if (joint) {
      train_joint_plan(*learner, std::move(plan), train, c);
    } else {
      PlanStream stream(train, std::move(plan));
      while (auto b = stream.next()) learner->observe(b->view());
    }
    if (hooks.on_task_end) hooks.on_task_end(*learner, 0);
    const ExampleSet test = ExampleSet::plan(eval, mnist360_test_plan(eval));
    r.accuracy_matrix = Eigen::MatrixXd::Constant(1, 1, accuracy(learner->model(), test));
    r.final_avg_accuracy = r.accuracy_matrix(0, 0);
  } else {
    const TaskStream stream = make_stream(c, train, eval);
    const auto t_count = static_cast<Index>(stream.tasks.size());
    std::vector<ExampleSet> tests;
    for (const auto& t : stream.tasks) tests.push_back(ExampleSet::task(eval, t.eval_indices, t.transform));

    auto eval_row = [&](const Mlp& model, Eigen::MatrixXd& cls, Eigen::MatrixXd& tsk, Index row) {
      for (Index i = 0; i < t_count; ++i) {
        const TaskAccuracy a = task_accuracy(model, tests[i], stream.tasks[i].classes);
        cls(row, i) = a.class_il;
        tsk(row, i) = a.task_il;
      }
    };

    const Index rows = joint ? 1 : t_count;
    Eigen::MatrixXd cls(rows, t_count), tsk(rows, t_count);
    if (joint) {
      train_joint_tasks(*learner, stream, train, c);
      if (hooks.on_task_end) hooks.on_task_end(*learner, static_cast<int>(t_count - 1));
      eval_row(learner->model(), cls, tsk, 0);
    } else {
      for (Index t = 0; t < t_count; ++t) {
        TaskBatcher batcher(train, stream.tasks[t], c.method.batch_size,
                            Rng(c.seed).split("stream").split(static_cast<std::uint64_t>(t)));
        while (auto b = batcher.next()) learner->observe(b->view());
        if (learner->needs_boundaries()) learner->on_task_boundary();
        if (hooks.on_task_end) hooks.on_task_end(*learner, static_cast<int>(t));
        eval_row(learner->model(), cls, tsk, t);
      }
    }

    // accuracy of untrained networks, the reference point of forward transfer
    Eigen::MatrixXd base_cls = Eigen::MatrixXd::Zero(kBaselineInits, t_count), base_tsk = base_cls;
    const Rng base_root = Rng(c.seed).split("baseline");
    for (int k = 0; k < kBaselineInits; ++k) {
      Rng rng = base_root.split(static_cast<std::uint64_t>(k));
      const Mlp m = make_mnist_classifier(classes, rng);
      eval_row(m, base_cls, base_tsk, k);
    }
    const bool task_primary = c.setting == Setting::seq_mnist_task;
    const Eigen::VectorXd b_cls = base_cls.colwise().mean().transpose();
    const Eigen::VectorXd b_tsk = base_tsk.colwise().mean().transpose();
    r.accuracy_matrix = task_primary ? tsk : cls;
    const Eigen::VectorXd& b_primary = task_primary ? b_tsk : b_cls;
    r.random_baseline.assign(b_primary.data(), b_primary.data() + b_primary.size());
    r.final_avg_accuracy = r.accuracy_matrix.row(rows - 1).mean();
    if (is_sequential(c.setting)) {
      r.task_il_matrix = tsk;
      r.task_il_random_baseline.assign(b_tsk.data(), b_tsk.data() + b_tsk.size());
      r.final_avg_task_il_accuracy = tsk.row(rows - 1).mean();
      r.final_avg_class_il_accuracy = cls.row(rows - 1).mean();
    }
    if (!joint) {
      r.bwt = backward_transfer(r.accuracy_matrix);
      r.fwt = forward_transfer(r.accuracy_matrix, r.random_baseline);
      r.forgetting = forgetting(r.accuracy_matrix);
    }
  }

  r.trace_digest = digest(learner->model());
  if (hooks.checkpoint) {
    if (hooks.checkpoint->has_parent_path()) std::filesystem::create_directories(hooks.checkpoint->parent_path());
    learner->save_checkpoint(*hooks.checkpoint);
    r.checkpoint = hooks.checkpoint->string();
  }
  r.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

ResultsRecord run(const ExperimentConfig& c, const MnistData& data, const RunHooks& hooks) {
  return run(c, data.train, data.test, hooks);
}

// ---------------------------------------------------------------------------
// Grid search and seeds

double selection_score(const ResultsRecord& r) {
  if (r.final_avg_class_il_accuracy && r.final_avg_task_il_accuracy) {
    return 0.5 * (*r.final_avg_class_il_accuracy + *r.final_avg_task_il_accuracy);
  }
  return r.final_avg_accuracy;
}

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  if (threads <= 0) threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex m;
  std::vector<std::thread> pool;
  for (int w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(m);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

GridResult grid_search(const ExperimentConfig& base, std::span<const MethodConfig> grid, const Dataset& train,
                       int threads) {
  if (grid.empty()) throw ConfigError("grid_search: empty grid");
  const auto [fit, val] = split_validation(train, 0.10, base.seed);
  GridResult out;
  out.candidates.resize(grid.size());
  parallel_for(static_cast<int>(grid.size()), threads, [&](int i) {
    ExperimentConfig c = base;
    c.method = grid[i];
    out.candidates[i] = {grid[i], selection_score(run(c, fit, val))};
  });
  const auto better = [](const GridCandidate& a, const GridCandidate& b) {
    if (a.score != b.score) return a.score > b.score;
    const auto& x = a.method;
    const auto& y = b.method;
    return std::tie(x.lr, x.alpha, x.beta, x.batch_size, x.replay_batch_size) <
           std::tie(y.lr, y.alpha, y.beta, y.batch_size, y.replay_batch_size);
  };
  out.best = std::min_element(out.candidates.begin(), out.candidates.end(), better)->method;
  return out;
}

Summary summarize(std::span<const double> values) {
  if (values.empty()) throw ContractError("summarize: no values");
  Summary s;
  s.values.assign(values.begin(), values.end());
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

MultiSeedResult multi_seed(const ExperimentConfig& c, const MnistData& data, int n, int threads,
                           const RunHooks& hooks) {
  if (n < 1) throw ContractError("multi_seed: n must be at least 1");
  MultiSeedResult out;
  out.records.resize(n);
  parallel_for(n, threads, [&](int i) {
    ExperimentConfig ci = c;
    ci.seed = c.seed + static_cast<std::uint64_t>(i);
    out.records[i] = run(ci, data, hooks);
  });
  std::vector<double> acc;
  for (const auto& r : out.records) acc.push_back(r.final_avg_accuracy);
  out.accuracy = summarize(acc);
  return out;
}

// ---------------------------------------------------------------------------
// Reports

std::vector<std::filesystem::path> find_records(const std::string& pattern) {
  std::vector<std::filesystem::path> out;
  if (std::filesystem::is_directory(pattern)) {
    for (const auto& e : std::filesystem::recursive_directory_iterator(pattern))
      if (e.is_regular_file() && e.path().extension() == ".json") out.push_back(e.path());
  } else {
    glob_t g{};
    if (::glob(pattern.c_str(), 0, nullptr, &g) == 0) {
      for (std::size_t i = 0; i < g.gl_pathc; ++i) out.emplace_back(g.gl_pathv[i]);
    }
    globfree(&g);
  }
  std::sort(out.begin(), out.end());
  return out;
}

namespace {

std::string buffer_label(const ExperimentConfig& c) {
  return uses_buffer(c.method.kind) ? std::to_string(c.method.buffer_capacity) : "-";
}

std::vector<std::pair<std::string, std::optional<double>>> metrics_of(const ResultsRecord& r) {
  return {{"final_avg_accuracy", r.final_avg_accuracy},
          {"final_avg_class_il_accuracy", r.final_avg_class_il_accuracy},
          {"final_avg_task_il_accuracy", r.final_avg_task_il_accuracy},
          {"bwt", r.bwt},
          {"fwt", r.fwt},
          {"forgetting", r.forgetting}};
}

std::string fmt(double v, int prec = 2) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(prec);
  os << v;
  return os.str();
}

}  // namespace

std::string report_csv(std::span<const ResultsRecord> records) {
  std::ostringstream os;
  os << "setting,method,buffer,seed,metric,value\n";
  os.precision(17);
  for (const auto& r : records) {
    for (const auto& [name, v] : metrics_of(r)) {
      if (!v) continue;
      os << to_string(r.config.setting) << ',' << to_string(r.config.method.kind) << ',' << buffer_label(r.config) << ','
         << r.config.seed << ',' << name << ',' << *v << '\n';
    }
  }
  return os.str();
}

std::string report_markdown(std::span<const ResultsRecord> records) {
  using Key = std::tuple<std::string, std::string, Index>;
  std::map<Key, std::vector<const ResultsRecord*>> groups;
  for (const auto& r : records) {
    groups[{std::string(to_string(r.config.setting)), std::string(to_string(r.config.method.kind)),
            uses_buffer(r.config.method.kind) ? r.config.method.buffer_capacity : 0}]
        .push_back(&r);
  }
  std::ostringstream os;
  os << "| setting | method | buffer | runs | accuracy (%) | task-il (%) | bwt | fwt | forgetting |\n";
  os << "|---|---|---|---|---|---|---|---|---|\n";
  auto cell = [](const std::vector<double>& v, double scale) -> std::string {
    if (v.empty()) return "-";
    const Summary s = summarize(v);
    std::string out = fmt(scale * s.mean);
    if (s.stddev) out += " ± " + fmt(scale * *s.stddev);
    return out;
  };
  for (const auto& [key, rs] : groups) {
    std::vector<double> acc, tsk, bwt, fwt, frg;
    for (const auto* r : rs) {
      acc.push_back(r->final_avg_accuracy);
      if (r->final_avg_task_il_accuracy) tsk.push_back(*r->final_avg_task_il_accuracy);
      if (r->bwt) bwt.push_back(*r->bwt);
      if (r->fwt) fwt.push_back(*r->fwt);
      if (r->forgetting) frg.push_back(*r->forgetting);
    }
    const auto& [setting, method, buffer] = key;
    os << "| " << setting << " | " << method << " | " << (buffer ? std::to_string(buffer) : "-") << " | " << rs.size()
       << " | " << cell(acc, 100) << " | " << cell(tsk, 100) << " | " << cell(bwt, 100) << " | " << cell(fwt, 100)
       << " | " << cell(frg, 100) << " |\n";
  }
  return os.str();
}

}  // namespace dercl
