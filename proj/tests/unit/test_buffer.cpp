#include <set>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"

using namespace dercl;

namespace {

BufferEntry entry(int i, Index dim = 3, bool logits = false) {
  BufferEntry e;
  e.input = RowVector<double>::Constant(dim, static_cast<double>(i));
  if (logits) e.logits = RowVector<double>::Constant(2, -static_cast<double>(i));
  e.label = i % 10;
  return e;
}

}  // namespace

TEST_CASE("reservoir appends until full, then keeps N growing") {
  MemoryBuffer buf(4, 3, 0, {});
  Rng rng(1);
  for (int i = 0; i < 4; ++i) CHECK(buf.reservoir_insert(entry(i), rng) == i);
  CHECK(buf.size() == 4);
  for (int i = 4; i < 50; ++i) {
    const auto slot = buf.reservoir_insert(entry(i), rng);
    if (slot) CHECK(buf.entry(*slot) == entry(i));
  }
  CHECK(buf.size() == 4);
  CHECK(buf.seen_count() == 50);
}

TEST_CASE("reservoir inclusion is uniform over the stream") {
  CHECK(oracle::reservoir_chi2_p(20000, 50, 10, 3) > 0.001);
}

TEST_CASE("sampling is without replacement up to the buffer size") {
  MemoryBuffer buf(20, 3, 0, {});
  Rng rng(2);
  for (int i = 0; i < 20; ++i) buf.reservoir_insert(entry(i), rng);
  const ReplayBatch r = buf.sample(20, rng);
  CHECK(std::set<Index>(r.slots.begin(), r.slots.end()).size() == 20);
  const ReplayBatch big = buf.sample(50, rng);
  CHECK(big.size() == 50);
  for (Index i = 0; i < big.size(); ++i) CHECK(big.entry(i) == buf.entry(big.slots[i]));
}

TEST_CASE("sampling an empty buffer raises") {
  MemoryBuffer buf(5, 3, 0, {});
  Rng rng(0);
  CHECK_THROWS_AS(buf.sample(1, rng), EmptyBufferError);
}

TEST_CASE("logits can be overwritten in place") {
  MemoryBuffer buf(3, 3, 2, Payload{true, true});
  Rng rng(0);
  buf.reservoir_insert(entry(1, 3, true), rng);
  RowVector<double> z(2);
  z << 7, 8;
  buf.update_logits(0, z);
  CHECK(*buf.entry(0).logits == z);
  CHECK_THROWS_AS(buf.update_logits(1, z), ContractError);
}

TEST_CASE("buffer serialisation round-trips") {
  MemoryBuffer buf(6, 3, 2, Payload{true, true});
  Rng rng(4);
  for (int i = 0; i < 13; ++i) buf.reservoir_insert(entry(i, 3, true), rng);
  std::stringstream ss;
  buf.save(ss);
  const MemoryBuffer back = MemoryBuffer::load(ss, "memory");
  CHECK(back == buf);
  CHECK(back.seen_count() == 13);
  std::stringstream bad("NOTABUFF");
  CHECK_THROWS_AS(MemoryBuffer::load(bad, "memory"), IngestionError);
}
