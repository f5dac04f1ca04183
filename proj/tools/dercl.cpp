#include <cstdlib>
#include <fstream>
#include <iostream>
#include <mutex>

#include "CLI11.hpp"
#include "json.hpp"

#include "dercl/harness.hpp"

using namespace dercl;
namespace fs = std::filesystem;

namespace {

struct CliError {
  std::string kind;
  std::string message;
  std::string path;
};

[[noreturn]] void fail(const std::string& kind, const std::string& message, const std::string& path = "") {
  throw CliError{kind, message, path};
}

int report_error(const CliError& e) {
  Json j;
  j["error"]["kind"] = e.kind;
  j["error"]["message"] = e.message;
  if (!e.path.empty()) j["error"]["path"] = e.path;
  std::cerr << j.dump() << '\n';
  return e.kind == "usage" ? 2 : 1;
}

fs::path resolve_data_dir(const std::string& flag, const fs::path& from_config) {
  if (!flag.empty()) return flag;
  if (!from_config.empty()) return from_config;
  if (const char* env = std::getenv("DERCL_DATA_DIR"); env && *env) return env;
  return DERCL_DEFAULT_DATA_DIR;
}

Json summary_json(const Summary& s) {
  Json j;
  j["n"] = s.values.size();
  j["mean"] = s.mean;
  j["stddev"] = s.stddev ? Json(*s.stddev) : Json(nullptr);
  return j;
}

// ---------------------------------------------------------------------------

struct RunArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string data_dir;
  std::string out = "results";
  int seeds = 1;
  int threads = 0;
  std::optional<int> epochs;
  bool no_checkpoint = false;
};

int cmd_run(const RunArgs& a) {
  ExperimentConfig c = load_config(a.config);
  if (a.seed) c.seed = *a.seed;
  if (a.epochs) c.epochs_per_task = *a.epochs;
  c.data_dir = resolve_data_dir(a.data_dir, c.data_dir);
  c.validate();
  const MnistData data = load_mnist(c.data_dir);

  std::vector<ResultsRecord> records(static_cast<std::size_t>(a.seeds));
  std::mutex io;
  parallel_for(a.seeds, a.threads, [&](int i) {
    ExperimentConfig ci = c;
    ci.seed = c.seed + static_cast<std::uint64_t>(i);
    const fs::path path = results_path(a.out, ci);
    RunHooks hooks;
    if (!a.no_checkpoint) hooks.checkpoint = fs::path(path).replace_extension(".ckpt");
    records[i] = run(ci, data, hooks);
    save_record(path, records[i]);
    std::lock_guard lock(io);
    std::cerr << to_string(ci.setting) << ' ' << to_string(ci.method.kind) << " seed " << ci.seed << ": "
              << 100.0 * records[i].final_avg_accuracy << "% in " << records[i].wall_time << "s -> " << path.string()
              << '\n';
  });

  std::vector<double> acc;
  Json out;
  out["records"] = Json::array();
  for (std::size_t i = 0; i < records.size(); ++i) {
    acc.push_back(records[i].final_avg_accuracy);
    ExperimentConfig ci = c;
    ci.seed = c.seed + i;
    out["records"].push_back(results_path(a.out, ci).string());
  }
  out["final_avg_accuracy"] = summary_json(summarize(acc));
  std::cout << out.dump(2) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct GridArgs {
  std::string setting;
  std::string method;
  int buffer = 0;
  std::uint64_t seed = 0;
  std::string data_dir;
  int threads = 0;
  std::optional<int> epochs;
};

Json method_json(const MethodConfig& m) {
  Json j;
  j["lr"] = m.lr;
  j["alpha"] = m.alpha;
  j["beta"] = m.beta;
  j["batch_size"] = m.batch_size;
  j["replay_batch_size"] = m.replay_batch_size;
  return j;
}

int cmd_grid(const GridArgs& a) {
  ExperimentConfig c;
  c.setting = parse_setting(a.setting);
  const MethodKind kind = parse_method(a.method);
  c.method = default_hyperparameters(c.setting, kind, a.buffer);
  c.seed = a.seed;
  if (a.epochs) c.epochs_per_task = *a.epochs;
  c.data_dir = resolve_data_dir(a.data_dir, {});
  c.validate();
  const auto grid = default_grid(c.setting, kind, a.buffer);
  const MnistData data = load_mnist(c.data_dir);
  const GridResult g = grid_search(c, grid, data.train, a.threads);

  Json out;
  out["setting"] = to_string(c.setting);
  out["method"] = to_string(kind);
  out["buffer_size"] = uses_buffer(kind) ? Json(a.buffer) : Json(nullptr);
  out["best"] = method_json(g.best);
  out["candidates"] = Json::array();
  for (const auto& cand : g.candidates) {
    Json j = method_json(cand.method);
    j["score"] = cand.score;
    out["candidates"].push_back(std::move(j));
  }
  std::cout << out.dump(2) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct ProbeArgs {
  std::string record;
  std::string probe;
  std::string data_dir;
  std::string out;
  std::string checkpoint;
  int draws = 10;
  int bins = 10;
  std::optional<int> task;
  int k = 10;
  std::optional<int> epochs;
  std::optional<double> lr;
  Index subsample = 0;
  std::uint64_t seed = 0;
};

std::vector<ExampleSet> subsample_sets(std::vector<ExampleSet> sets, Index total, std::uint64_t seed) {
  if (total <= 0) return sets;
  Index n = 0;
  for (const auto& s : sets) n += s.size();
  if (n <= total) return sets;
  Rng root = Rng(seed).split("subsample");
  std::vector<ExampleSet> out;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    Rng rng = root.split(i);
    const Index want = (sets[i].size() * total + n / 2) / n;
    out.push_back(random_subset(sets[i], std::max<Index>(want, 1), rng));
  }
  return out;
}

int cmd_probe(const ProbeArgs& a) {
  const ResultsRecord rec = load_record(a.record);
  ExperimentConfig c = rec.config;
  c.data_dir = resolve_data_dir(a.data_dir, c.data_dir);

  fs::path ckpt = a.checkpoint;
  if (ckpt.empty()) {
    if (!rec.checkpoint) fail("contract", "record has no checkpoint; pass --checkpoint", a.record);
    ckpt = *rec.checkpoint;
    if (ckpt.is_relative() && !fs::exists(ckpt)) ckpt = fs::path(a.record).parent_path() / ckpt.filename();
  }
  const Index classes = num_classes(c.setting);
  auto learner = make_learner(c.method, classes, c.seed);
  learner->load_checkpoint(ckpt);
  const Mlp& model = learner->model();

  const MnistData data = load_mnist(c.data_dir);
  Json out;
  out["record"] = a.record;
  out["probe"] = a.probe;

  if (a.probe == "ece") {
    const auto sets = evaluation_sets(c, data.test);
    const CalibrationReport r = ece(model, sets, a.bins);
    out["ece"] = r.ece;
    out["bins"] = Json::array();
    for (const auto& b : r.bins) {
      out["bins"].push_back({{"lower", b.lower},
                             {"upper", b.upper},
                             {"mean_confidence", b.mean_confidence},
                             {"accuracy", b.accuracy},
                             {"count", b.count}});
    }
    if (!a.out.empty()) write_reliability(a.out, r);
  } else if (a.probe == "fisher") {
    const auto sets = subsample_sets(training_sets(c, data.train), a.subsample, a.seed);
    out["fisher_trace"] = fisher_trace(model, sets);
  } else if (a.probe == "flatness") {
    const auto sets = subsample_sets(training_sets(c, data.train), a.subsample, a.seed);
    const FlatnessCurve curve = flatness_probe(model, sets, kDefaultSigmas, a.draws, a.seed);
    out["sigmas"] = curve.sigmas;
    out["mean_loss"] = curve.mean_loss;
    if (!a.out.empty()) write_flatness_curve(a.out, curve);
  } else if (a.probe == "buffer-retrain" || a.probe == "buffer-finetune") {
    const MemoryBuffer* buffer = learner->buffer();
    if (!buffer) fail("contract", std::string(to_string(c.method.kind)) + " keeps no replay buffer", a.record);
    const auto tests = evaluation_sets(c, data.test);
    TrainOptions opts;
    opts.batch_size = c.method.batch_size;
    opts.lr = a.lr.value_or(c.method.lr);
    opts.seed = c.seed;
    const int tasks = static_cast<int>(tests.size());
    opts.epochs = a.epochs.value_or(c.epochs_per_task * tasks);
    out["buffer_size"] = buffer->size();
    out["epochs"] = opts.epochs;
    out["retrain_accuracy"] = buffer_retrain_probe(*buffer, tests, classes, opts);

    if (a.probe == "buffer-finetune") {
      // same initialisation and training as the retrain probe
      Rng init = Rng(opts.seed).split("init");
      Mlp base = make_mnist_classifier(classes, init);
      if (!buffer->empty()) {
        ReplayBatch all = buffer->all();
        train_plain(base, ExampleSet::dense(std::move(all.inputs), std::move(all.labels)), opts);
      }
      TrainOptions ft = opts;
      ft.epochs = a.epochs.value_or(10);
      std::vector<int> which;
      if (a.task) {
        if (*a.task < 0 || *a.task >= tasks) fail("usage", "--task out of range");
        which.push_back(*a.task);
      } else {
        for (int t = 0; t < tasks; ++t) which.push_back(t);
      }
      double before = 0, after = 0;
      Json per_task = Json::array();
      for (int t : which) {
        ft.seed = c.seed + static_cast<std::uint64_t>(t);
        const FinetuneResult r = buffer_finetune_probe(base, tests[t], a.k, ft);
        before += r.before;
        after += r.after;
        per_task.push_back({{"task", t}, {"before", r.before}, {"after", r.after}, {"heldout", r.heldout_size}});
      }
      out["finetune_epochs"] = ft.epochs;
      out["k"] = a.k;
      out["before"] = before / static_cast<double>(which.size());
      out["after"] = after / static_cast<double>(which.size());
      out["tasks"] = std::move(per_task);
    }
  } else {
    fail("usage", "unknown probe " + a.probe);
  }
  std::cout << out.dump(2) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_report(const std::string& pattern, const std::string& format) {
  std::vector<ResultsRecord> records;
  for (const auto& p : find_records(pattern)) records.push_back(load_record(p));
  if (records.empty()) fail("ingestion", "no records match", pattern);
  std::cout << (format == "csv" ? report_csv(records) : report_markdown(records));
  return 0;
}

int cmd_manifest(const std::string& data_dir, std::uint64_t seed, int batch, const std::string& out, bool test) {
  const MnistData data = load_mnist(resolve_data_dir(data_dir, {}));
  Mnist360Options opts;
  opts.batch_size = batch;
  const auto plan = test ? mnist360_test_plan(data.test) : mnist360_train_plan(data.train, opts, seed);
  write_manifest(out, plan);
  std::cout << Json{{"entries", plan.size()}, {"path", out}}.dump() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Replay-based continual learning on MNIST"};
  app.set_version_flag("--version", artifact_version());
  app.require_subcommand(1);

  RunArgs run_args;
  auto* run_cmd = app.add_subcommand("run", "Train and evaluate one configuration");
  run_cmd->add_option("--config", run_args.config, "JSON config file")->required();
  run_cmd->add_option("--seed", run_args.seed, "Override the config seed");
  run_cmd->add_option("--data-dir", run_args.data_dir, "Directory with the MNIST IDX files");
  run_cmd->add_option("--out", run_args.out, "Results root")->capture_default_str();
  run_cmd->add_option("--seeds", run_args.seeds, "Number of consecutive seeds")->check(CLI::PositiveNumber);
  run_cmd->add_option("--threads", run_args.threads, "Worker threads, 0 = one per core");
  run_cmd->add_option("--epochs", run_args.epochs, "Override epochs per task")->check(CLI::PositiveNumber);
  run_cmd->add_flag("--no-checkpoint", run_args.no_checkpoint, "Skip writing the learner checkpoint");

  GridArgs grid_args;
  auto* grid_cmd = app.add_subcommand("grid", "Grid search on a validation split");
  grid_cmd->add_option("--setting", grid_args.setting)->required();
  grid_cmd->add_option("--method", grid_args.method)->required();
  grid_cmd->add_option("--buffer", grid_args.buffer);
  grid_cmd->add_option("--seed", grid_args.seed);
  grid_cmd->add_option("--data-dir", grid_args.data_dir);
  grid_cmd->add_option("--threads", grid_args.threads);
  grid_cmd->add_option("--epochs", grid_args.epochs)->check(CLI::PositiveNumber);

  ProbeArgs probe_args;
  auto* probe_cmd = app.add_subcommand("probe", "Post-training analysis of a finished run");
  probe_cmd->add_option("--record", probe_args.record, "Results record")->required();
  probe_cmd->add_option("--probe", probe_args.probe)
      ->required()
      ->check(CLI::IsMember({"ece", "fisher", "flatness", "buffer-retrain", "buffer-finetune"}));
  probe_cmd->add_option("--checkpoint", probe_args.checkpoint, "Checkpoint, if not the one in the record");
  probe_cmd->add_option("--data-dir", probe_args.data_dir);
  probe_cmd->add_option("--out", probe_args.out, "Curve file for ece and flatness");
  probe_cmd->add_option("--draws", probe_args.draws)->check(CLI::PositiveNumber);
  probe_cmd->add_option("--bins", probe_args.bins)->check(CLI::PositiveNumber);
  probe_cmd->add_option("--subsample", probe_args.subsample, "Use this many training examples, 0 = all");
  probe_cmd->add_option("--seed", probe_args.seed, "Seed for perturbations and subsampling");
  probe_cmd->add_option("--task", probe_args.task, "Fine-tune on this task only");
  probe_cmd->add_option("--k", probe_args.k, "Fine-tuning examples per class")->check(CLI::PositiveNumber);
  probe_cmd->add_option("--epochs", probe_args.epochs, "Training epochs of the probe")->check(CLI::PositiveNumber);
  probe_cmd->add_option("--lr", probe_args.lr, "Probe learning rate, default the run's");

  std::string glob, format = "md";
  auto* report_cmd = app.add_subcommand("report", "Tabulate results records");
  report_cmd->add_option("--glob", glob, "Glob or directory of records")->required();
  report_cmd->add_option("--format", format)->check(CLI::IsMember({"csv", "md"}))->capture_default_str();

  std::string m_dir, m_out;
  std::uint64_t m_seed = 0;
  int m_batch = 16;
  bool m_test = false;
  auto* manifest_cmd = app.add_subcommand("manifest", "Write the MNIST-360 stream schedule");
  manifest_cmd->add_option("--out", m_out)->required();
  manifest_cmd->add_option("--seed", m_seed);
  manifest_cmd->add_option("--batch", m_batch)->check(CLI::PositiveNumber);
  manifest_cmd->add_option("--data-dir", m_dir);
  manifest_cmd->add_flag("--test", m_test, "Test stream instead of training stream");

  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
      return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
      return app.exit(e);
    } catch (const CLI::ParseError& e) {
      fail("usage", e.what());
    }
    if (*run_cmd) return cmd_run(run_args);
    if (*grid_cmd) return cmd_grid(grid_args);
    if (*probe_cmd) return cmd_probe(probe_args);
    if (*report_cmd) return cmd_report(glob, format);
    if (*manifest_cmd) return cmd_manifest(m_dir, m_seed, m_batch, m_out, m_test);
  } catch (const CliError& e) {
    return report_error(e);
  } catch (const IngestionError& e) {
    return report_error({e.kind(), e.what(), e.path()});
  } catch (const Error& e) {
    return report_error({e.kind(), e.what(), ""});
  } catch (const nlohmann::json::exception& e) {
    return report_error({"ingestion", e.what(), ""});
  } catch (const std::exception& e) {
    return report_error({"internal", e.what(), ""});
  }
  return 0;
}
