#include <filesystem>
#include <set>

#include "doctest.h"
#include "oracles.hpp"

using namespace dercl;

TEST_CASE("sequential stream pairs consecutive digits into five tasks") {
  const auto ds = oracle::synthetic_dataset(5, 10, 1);
  const TaskStream s = sequential_stream(ds, ds);
  REQUIRE(s.tasks.size() == 5);
  for (int t = 0; t < 5; ++t) {
    CHECK(s.tasks[t].classes == std::vector<int>{2 * t, 2 * t + 1});
    CHECK(s.tasks[t].train_indices.size() == 10);
    for (int i : s.tasks[t].train_indices) CHECK((ds.labels[i] == 2 * t || ds.labels[i] == 2 * t + 1));
  }
}

TEST_CASE("domain streams draw per-task transforms from the seed") {
  const auto ds = oracle::synthetic_dataset(2, 10, 1);
  const TaskStream a = domain_stream(ds, ds, DomainKind::rotated, 4, 7);
  const TaskStream b = domain_stream(ds, ds, DomainKind::rotated, 4, 7);
  REQUIRE(a.tasks.size() == 4);
  for (int t = 0; t < 4; ++t) {
    CHECK(a.tasks[t].transform.angle() == b.tasks[t].transform.angle());
    CHECK(a.tasks[t].transform.angle() >= 0.0);
    CHECK(a.tasks[t].transform.angle() < M_PI);
    CHECK(a.tasks[t].classes.size() == 10);
  }
  const TaskStream p = domain_stream(ds, ds, DomainKind::permuted, 3, 7);
  CHECK(p.tasks[0].transform.perm() != p.tasks[1].transform.perm());
}

TEST_CASE("task batcher visits every example once per epoch") {
  const auto ds = oracle::synthetic_dataset(7, 10, 1);
  TaskSpec task;
  task.classes = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  for (int i = 0; i < ds.size(); ++i) task.train_indices.push_back(i);
  task.epochs = 2;
  TaskBatcher batcher(ds, task, 8, Rng(3));
  std::map<int, int> seen;
  int batches = 0;
  while (auto b = batcher.next()) {
    ++batches;
    CHECK(b->size() <= 8);
    for (int id : b->example_ids) ++seen[id];
    CHECK(b->task_hint.has_value());
  }
  CHECK(batches == 2 * 9);
  CHECK(seen.size() == 70);
  for (auto [id, n] : seen) CHECK(n == 2);
}

TEST_CASE("mnist360 batch split rounds the proportional share half up") {
  CHECK(mnist360_batch_split(5, 5, 16) == std::pair{5, 5});
  CHECK(mnist360_batch_split(100, 100, 16) == std::pair{8, 8});
  CHECK(mnist360_batch_split(1, 3, 2) == std::pair{1, 1});  // 0.5 rounds up
  CHECK(mnist360_batch_split(30, 10, 16) == std::pair{12, 4});
  CHECK(mnist360_batch_split(0, 10, 4) == std::pair{0, 4});
}

TEST_CASE("mnist360 offsets follow (d - 1) pi / (2R)") {
  CHECK(mnist360_offset(1, 3) == 0.0);
  CHECK(mnist360_offset(0, 3) == doctest::Approx(-M_PI / 6));
  CHECK(mnist360_offset(4, 3) == doctest::Approx(M_PI / 2));
}

TEST_CASE("mnist360 groups split each digit into 2R near-equal parts") {
  const auto ds = oracle::synthetic_dataset(23, 10, 2);
  const auto groups = mnist360_groups(ds, 3, 0);
  REQUIRE(groups.size() == 9);
  for (const auto& g : groups) {
    REQUIRE(g.size() == 6);
    std::set<int> all;
    for (const auto& part : g) {
      CHECK((part.size() == 3 || part.size() == 4));
      all.insert(part.begin(), part.end());
    }
    CHECK(all.size() == 23);
  }
}

TEST_CASE("mnist360 training plan emits every example once with fresh rotations") {
  const auto ds = oracle::synthetic_dataset(41, 10, 3);
  Mnist360Options opts;
  const auto plan = mnist360_train_plan(ds, opts, 5);
  const auto audit = oracle::audit_mnist360(ds, plan, opts.rounds);
  INFO(audit.detail);
  CHECK(audit.each_example_once);
  CHECK(audit.unique_rotations);
  CHECK(audit.no_nines);
  CHECK(audit.angles_match);

  // every batch holds at most two digits and at most B examples
  std::map<int, std::set<int>> digits;
  std::map<int, int> sizes;
  for (const auto& e : plan) {
    digits[e.batch].insert(e.digit);
    ++sizes[e.batch];
  }
  for (auto& [b, d] : digits) CHECK(d.size() <= 2);
  for (auto& [b, n] : sizes) CHECK(n <= opts.batch_size);
  CHECK(mnist360_train_plan(ds, opts, 5).size() == plan.size());
}

TEST_CASE("mnist360 test plan has no offset and keeps dataset order") {
  const auto ds = oracle::synthetic_dataset(4, 10, 3, kMnistInputDim, Split::test);
  const auto plan = mnist360_test_plan(ds);
  CHECK(plan.size() == 36);
  for (std::size_t i = 1; i < plan.size(); ++i) CHECK(plan[i - 1].example < plan[i].example);
  for (const auto& e : plan) CHECK(e.angle == doctest::Approx(2 * M_PI * e.counter / 4.0));
}

TEST_CASE("plan stream reproduces the plan batch by batch") {
  const auto ds = oracle::synthetic_dataset(11, 10, 3);
  const auto plan = mnist360_train_plan(ds, {}, 1);
  PlanStream s(ds, plan);
  std::size_t n = 0;
  while (auto b = s.next()) {
    CHECK_FALSE(b->task_hint.has_value());
    for (Index i = 0; i < b->size(); ++i, ++n) {
      CHECK(b->example_ids[i] == plan[n].example);
      CHECK(b->angles[i] == plan[n].angle);
    }
  }
  CHECK(n == plan.size());
}

TEST_CASE("manifest round-trips") {
  const auto ds = oracle::synthetic_dataset(6, 10, 3);
  const auto plan = mnist360_train_plan(ds, {}, 2);
  const auto path = std::filesystem::temp_directory_path() / "dercl-test-manifest.bin";
  write_manifest(path, plan);
  const auto back = read_manifest(path);
  REQUIRE(back.size() == plan.size());
  for (std::size_t i = 0; i < plan.size(); ++i) {
    CHECK(back[i].example == plan[i].example);
    CHECK(back[i].angle == plan[i].angle);
    CHECK(back[i].batch == plan[i].batch);
  }
}
