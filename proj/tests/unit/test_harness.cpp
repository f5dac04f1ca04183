#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "oracles.hpp"

#include "dercl/harness.hpp"

using namespace dercl;
namespace fs = std::filesystem;

namespace {

const MnistData& data() {
  static const MnistData d{oracle::synthetic_dataset(40, 10, 1),
                           oracle::synthetic_dataset(10, 10, 2, kMnistInputDim, Split::test)};
  return d;
}

ExperimentConfig config(Setting s, MethodKind m, Index buffer = 0) {
  ExperimentConfig c;
  c.setting = s;
  c.method = default_hyperparameters(s, m, buffer);
  c.num_tasks = 3;
  return c;
}

}  // namespace

TEST_CASE("config parsing fills defaults and validates") {
  const auto c = config_from_json(Json::parse(R"({"setting":"seq_mnist_class","method":"derpp","buffer_size":200})"));
  CHECK(c.method.kind == MethodKind::derpp);
  CHECK(c.method.lr == 0.03);
  CHECK(c.method.alpha == doctest::Approx(0.02));
  CHECK(c.method.beta == 1.0);
  CHECK(c.method.batch_size == 10);
  CHECK(c.epochs_per_task == 1);

  const auto o = config_from_json(Json::parse(R"({"setting":"perm_mnist","method":"der","buffer_size":500,"lr":0.5,"seed":3})"));
  CHECK(o.method.lr == 0.5);
  CHECK(o.seed == 3);
  CHECK(o.method.batch_size == 128);
  CHECK(config_from_json(to_json(o)).method.lr == 0.5);
}

TEST_CASE("invalid configurations are rejected") {
  const auto bad = [](const char* s) { return config_from_json(Json::parse(s)); };
  CHECK_THROWS_AS(bad(R"({"setting":"mnist360","method":"fdr","buffer_size":200})"), ConfigError);
  CHECK_THROWS_AS(bad(R"({"setting":"mnist360","method":"der","buffer_size":5120})"), ConfigError);
  CHECK_THROWS_AS(bad(R"({"setting":"seq_mnist_class","method":"der","buffer_size":300})"), ConfigError);
  CHECK_THROWS_AS(bad(R"({"setting":"seq_mnist_class","method":"der"})"), ConfigError);
  CHECK_THROWS_AS(bad(R"({"setting":"seq_mnist_class","method":"sgd","buffer_size":200})"), ConfigError);
  CHECK_THROWS_AS(bad(R"({"setting":"seq_mnist_class","method":"sgd","lr":"fast"})"), ConfigError);
  CHECK_THROWS_AS(bad(R"({"setting":"seq_mnist_class","method":"sgd","learning_rate":0.1})"), ConfigError);
  CHECK_THROWS_AS(bad(R"({"setting":"cifar10","method":"sgd"})"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/config.json"), IngestionError);
}

TEST_CASE("every tabulated hyperparameter set is valid") {
  for (Setting s : {Setting::seq_mnist_class, Setting::seq_mnist_task, Setting::perm_mnist, Setting::rot_mnist,
                    Setting::mnist360}) {
    for (MethodKind m : {MethodKind::sgd, MethodKind::joint, MethodKind::er, MethodKind::der, MethodKind::derpp,
                         MethodKind::fdr, MethodKind::agem_r}) {
      if (s == Setting::mnist360 && m == MethodKind::fdr) continue;
      for (Index b : {200, 500, 1000}) {
        CAPTURE(to_string(s));
        CAPTURE(to_string(m));
        CHECK_NOTHROW(default_hyperparameters(s, m, b).validate());
        CHECK_FALSE(default_grid(s, m, b).empty());
      }
    }
  }
}

TEST_CASE("the same config and seed give byte-identical records") {
  auto c = config(Setting::seq_mnist_class, MethodKind::derpp, 200);
  c.seed = 5;
  const auto a = run(c, data());
  const auto b = run(c, data());
  CHECK(deterministic_dump(a) == deterministic_dump(b));
  c.seed = 6;
  CHECK(deterministic_dump(run(c, data())) != deterministic_dump(a));
}

TEST_CASE("sequential runs record both protocols and transfer metrics") {
  const auto r = run(config(Setting::seq_mnist_class, MethodKind::er, 200), data());
  CHECK(r.accuracy_matrix.rows() == 5);
  CHECK(r.accuracy_matrix.cols() == 5);
  REQUIRE(r.task_il_matrix);
  CHECK(((r.task_il_matrix->array() - r.accuracy_matrix.array()) >= 0).all());
  CHECK(r.final_avg_accuracy == doctest::Approx(r.accuracy_matrix.row(4).mean()));
  CHECK(r.bwt);
  CHECK(r.fwt);
  CHECK(r.forgetting);
  CHECK(*r.forgetting >= 0);
  CHECK(r.random_baseline.size() == 5);
  CHECK(r.version == artifact_version());

  const auto t = run(config(Setting::seq_mnist_task, MethodKind::er, 200), data());
  CHECK(t.accuracy_matrix == *t.task_il_matrix);
}

TEST_CASE("domain, joint and mnist360 runs have the documented shapes") {
  const auto p = run(config(Setting::perm_mnist, MethodKind::der, 200), data());
  CHECK(p.accuracy_matrix.rows() == 3);
  CHECK_FALSE(p.task_il_matrix);

  const auto j = run(config(Setting::rot_mnist, MethodKind::joint), data());
  CHECK(j.accuracy_matrix.rows() == 1);
  CHECK(j.accuracy_matrix.cols() == 3);
  CHECK_FALSE(j.bwt);

  const auto m = run(config(Setting::mnist360, MethodKind::derpp, 200), data());
  CHECK(m.accuracy_matrix.rows() == 1);
  CHECK(m.accuracy_matrix.cols() == 1);
  CHECK_FALSE(m.fwt);
}

TEST_CASE("records round-trip byte for byte") {
  auto c = config(Setting::seq_mnist_class, MethodKind::der, 200);
  const auto dir = fs::temp_directory_path() / "dercl-records";
  fs::remove_all(dir);
  RunHooks hooks;
  hooks.checkpoint = dir / "ckpt.bin";
  const auto r = run(c, data(), hooks);
  const auto path = results_path(dir, c);
  CHECK(path == dir / "seq_mnist_class" / "der" / "200" / "0.json");
  save_record(path, r);
  const auto back = load_record(path);
  CHECK(to_json(back).dump(2) == to_json(r).dump(2));
  CHECK(back.checkpoint == hooks.checkpoint->string());
  CHECK(find_records(dir.string()).size() == 1);
  CHECK(find_records((dir / "*" / "*" / "*" / "*.json").string()).size() == 1);
}

TEST_CASE("malformed records are reported") {
  const auto path = fs::temp_directory_path() / "dercl-bad-record.json";
  std::ofstream(path) << "{\"config\": 1}";
  CHECK_THROWS_AS(load_record(path), Error);
}

TEST_CASE("checkpoint hook writes a loadable learner") {
  auto c = config(Setting::seq_mnist_class, MethodKind::derpp, 200);
  RunHooks hooks;
  hooks.checkpoint = fs::temp_directory_path() / "dercl-hook.ckpt";
  const auto r = run(c, data(), hooks);
  auto l = make_learner(c.method, 10, c.seed);
  l->load_checkpoint(*hooks.checkpoint);
  REQUIRE(l->buffer());
  CHECK(l->buffer()->size() == 200);
}

TEST_CASE("grid search") {
  auto base = config(Setting::seq_mnist_class, MethodKind::der, 200);

  SUBCASE("a singleton grid returns its only point") {
    const std::vector<MethodConfig> g{base.method};
    CHECK(grid_search(base, g, data().train).best.lr == base.method.lr);
  }
  SUBCASE("diverging learning rates lose to the tabulated point") {
    std::vector<MethodConfig> g;
    MethodConfig bad = base.method;
    bad.lr = 10.0;
    g.push_back(bad);
    g.push_back(base.method);
    bad.alpha = 1.0;
    g.push_back(bad);
    const auto r = grid_search(base, g, data().train, 1);
    CHECK(r.best.lr == base.method.lr);
    CHECK(r.best.alpha == base.method.alpha);
    CHECK(r.candidates.size() == 3);
  }
  SUBCASE("ties go to the lower learning rate") {
    MethodConfig a = base.method, b = base.method;
    a.lr = 0.05;
    b.lr = 0.05;
    b.alpha = base.method.alpha * 2;
    a.alpha = base.method.alpha;
    // identical points tie exactly
    const std::vector<MethodConfig> g{b, a, a};
    const auto r = grid_search(base, g, data().train, 1);
    CHECK(r.best.lr == 0.05);
  }
  SUBCASE("selection is reproducible") {
    const auto g = default_grid(base.setting, MethodKind::der, 200);
    CHECK(g.size() == 6);
    const auto r1 = grid_search(base, g, data().train);
    const auto r2 = grid_search(base, g, data().train);
    CHECK(r1.best.lr == r2.best.lr);
    CHECK(r1.best.alpha == r2.best.alpha);
  }
  SUBCASE("an empty grid is an error") { CHECK_THROWS_AS(grid_search(base, {}, data().train), ConfigError); }
}

TEST_CASE("summaries") {
  const std::vector<double> one{0.5};
  CHECK_FALSE(summarize(one).stddev);
  const std::vector<double> v{1.0, 2.0, 3.0};
  const auto s = summarize(v);
  CHECK(s.mean == 2.0);
  CHECK(*s.stddev == doctest::Approx(1.0));
}

TEST_CASE("multi-seed runs use consecutive seeds") {
  auto c = config(Setting::seq_mnist_class, MethodKind::sgd);
  c.seed = 10;
  const auto r = multi_seed(c, data(), 3, 2);
  REQUIRE(r.records.size() == 3);
  for (int i = 0; i < 3; ++i) CHECK(r.records[i].config.seed == 10u + i);
  CHECK(deterministic_dump(r.records[1]) == deterministic_dump(run([&] {
          auto x = c;
          x.seed = 11;
          return x;
        }(), data())));
}

TEST_CASE("reports") {
  auto c = config(Setting::seq_mnist_class, MethodKind::er, 200);
  std::vector<ResultsRecord> rs{run(c, data())};
  c.seed = 1;
  rs.push_back(run(c, data()));
  const auto csv = report_csv(rs);
  CHECK(csv.rfind("setting,method,buffer,seed,metric,value\n", 0) == 0);
  CHECK(csv.find("seq_mnist_class,er,200,1,final_avg_accuracy,") != std::string::npos);
  const auto md = report_markdown(rs);
  CHECK(md.find("| seq_mnist_class | er | 200 |") != std::string::npos);
  CHECK(md.find("±") != std::string::npos);
}

TEST_CASE("probe sets cover each task's data") {
  const auto c = config(Setting::perm_mnist, MethodKind::der, 200);
  const auto train = training_sets(c, data().train);
  const auto eval = evaluation_sets(c, data().test);
  CHECK(train.size() == 3);
  CHECK(eval.size() == 3);
  CHECK(train[0].size() == data().train.size());
  const auto m = evaluation_sets(config(Setting::mnist360, MethodKind::der, 200), data().test);
  CHECK(m.size() == 1);
  CHECK(m[0].size() == 90);
}
