#include "dercl/buffer.hpp"

#include <fstream>
#include <numeric>

#include "dercl/binary_io.hpp"

namespace dercl {

BufferEntry ReplayBatch::entry(Index i) const {
  BufferEntry e;
  e.input = inputs.row(i);
  if (logits.rows() > 0) e.logits = logits.row(i);
  if (!labels.empty()) e.label = labels[i];
  return e;
}

MemoryBuffer::MemoryBuffer(Index capacity, Index input_dim, Index logit_dim, Payload payload)
    : capacity_(capacity), payload_(payload) {
  if (capacity < 0) throw ContractError("buffer capacity must be non-negative");
  if (payload.logits && logit_dim <= 0) throw ContractError("a logit payload needs a positive logit width");
  inputs_.resize(capacity, input_dim);
  logits_.resize(payload.logits ? capacity : 0, payload.logits ? logit_dim : 0);
  if (payload.labels) labels_.resize(capacity, -1);
}

void MemoryBuffer::write(Index slot, const BufferEntry& e) {
  if (e.input.size() != inputs_.cols()) throw ShapeError("buffer entry input has the wrong width");
  inputs_.row(slot) = e.input;
  if (payload_.logits) {
    if (!e.logits) throw ContractError("buffer stores logits but the entry has none");
    if (e.logits->size() != logits_.cols()) throw ShapeError("buffer entry logits have the wrong width");
    logits_.row(slot) = *e.logits;
  }
  if (payload_.labels) {
    if (!e.label) throw ContractError("buffer stores labels but the entry has none");
    labels_[slot] = *e.label;
  }
}

std::optional<Index> MemoryBuffer::reservoir_insert(const BufferEntry& entry, Rng& rng) {
  std::optional<Index> slot;
  if (seen_ < static_cast<std::uint64_t>(capacity_)) {
    slot = static_cast<Index>(seen_);
    ++size_;
  } else {
    const auto j = rng.uniform_index(seen_ + 1);
    if (j < static_cast<std::uint64_t>(capacity_)) slot = static_cast<Index>(j);
  }
  if (slot) write(*slot, entry);
  ++seen_;
  return slot;
}

ReplayBatch MemoryBuffer::gather(std::vector<Index> slots) const {
  ReplayBatch r;
  const auto k = static_cast<Index>(slots.size());
  r.inputs.resize(k, inputs_.cols());
  if (payload_.logits) r.logits.resize(k, logits_.cols());
  if (payload_.labels) r.labels.resize(k);
  for (Index i = 0; i < k; ++i) {
    r.inputs.row(i) = inputs_.row(slots[i]);
    if (payload_.logits) r.logits.row(i) = logits_.row(slots[i]);
    if (payload_.labels) r.labels[i] = labels_[slots[i]];
  }
  r.slots = std::move(slots);
  return r;
}

ReplayBatch MemoryBuffer::sample(Index k, Rng& rng) const {
  if (size_ == 0) throw EmptyBufferError();
  if (k < 0) throw ContractError("sample size must be non-negative");
  std::vector<Index> slots(k);
  if (k <= size_) {
    // partial Fisher-Yates over the occupied slots
    std::vector<Index> pool(size_);
    std::iota(pool.begin(), pool.end(), Index{0});
    for (Index i = 0; i < k; ++i) {
      const auto j = i + static_cast<Index>(rng.uniform_index(static_cast<std::uint64_t>(size_ - i)));
      std::swap(pool[i], pool[j]);
      slots[i] = pool[i];
    }
  } else {
    for (auto& s : slots) s = static_cast<Index>(rng.uniform_index(static_cast<std::uint64_t>(size_)));
  }
  return gather(std::move(slots));
}

void MemoryBuffer::update_logits(Index slot, const RowVector<double>& logits) {
  if (slot < 0 || slot >= size_) throw ContractError("update_logits: slot " + std::to_string(slot) + " out of range");
  if (!payload_.logits) throw ContractError("update_logits: buffer stores no logits");
  if (logits.size() != logits_.cols()) throw ShapeError("update_logits: wrong logit width");
  logits_.row(slot) = logits;
}

BufferEntry MemoryBuffer::entry(Index slot) const {
  if (slot < 0 || slot >= size_) throw ContractError("entry: slot " + std::to_string(slot) + " out of range");
  BufferEntry e;
  e.input = inputs_.row(slot);
  if (payload_.logits) e.logits = logits_.row(slot);
  if (payload_.labels) e.label = labels_[slot];
  return e;
}

ReplayBatch MemoryBuffer::all() const {
  std::vector<Index> slots(size_);
  std::iota(slots.begin(), slots.end(), Index{0});
  return gather(std::move(slots));
}

bool operator==(const MemoryBuffer& a, const MemoryBuffer& b) {
  if (a.capacity_ != b.capacity_ || a.size_ != b.size_ || a.seen_ != b.seen_) return false;
  if (a.payload_.logits != b.payload_.logits || a.payload_.labels != b.payload_.labels) return false;
  if (a.inputs_.cols() != b.inputs_.cols() || a.logits_.cols() != b.logits_.cols()) return false;
  for (Index i = 0; i < a.size_; ++i) {
    if (a.entry(i) != b.entry(i)) return false;
  }
  return true;
}

// Layout: "DERBUF01", capacity, seen, size, input width, logit width (0 when
// absent), label flag, then per entry the input, the logits, the label.
void MemoryBuffer::save(std::ostream& os) const {
  io::put_magic(os, "DERBUF01");
  io::put_u64(os, static_cast<std::uint64_t>(capacity_));
  io::put_u64(os, seen_);
  io::put_u64(os, static_cast<std::uint64_t>(size_));
  io::put_u64(os, static_cast<std::uint64_t>(inputs_.cols()));
  io::put_u64(os, static_cast<std::uint64_t>(logits_.cols()));
  io::put_u32(os, payload_.labels ? 1 : 0);
  for (Index i = 0; i < size_; ++i) {
    for (Index j = 0; j < inputs_.cols(); ++j) io::put_f64(os, inputs_(i, j));
    for (Index j = 0; j < logits_.cols(); ++j) io::put_f64(os, logits_(i, j));
    if (payload_.labels) io::put_i32(os, labels_[i]);
  }
}

MemoryBuffer MemoryBuffer::load(std::istream& is, const std::string& source) {
  io::Reader r(is, source);
  r.expect_magic("DERBUF01");
  const auto capacity = static_cast<Index>(r.u64());
  const auto seen = r.u64();
  const auto size = static_cast<Index>(r.u64());
  const auto input_dim = static_cast<Index>(r.u64());
  const auto logit_dim = static_cast<Index>(r.u64());
  Payload p;
  p.logits = logit_dim > 0;
  p.labels = r.u32() != 0;
  if (size > capacity || static_cast<std::uint64_t>(size) > seen) throw IngestionError(source, "inconsistent buffer header");
  MemoryBuffer buf(capacity, input_dim, logit_dim, p);
  for (Index i = 0; i < size; ++i) {
    for (Index j = 0; j < input_dim; ++j) buf.inputs_(i, j) = r.f64();
    for (Index j = 0; j < logit_dim; ++j) buf.logits_(i, j) = r.f64();
    if (p.labels) buf.labels_[i] = r.i32();
  }
  buf.size_ = size;
  buf.seen_ = seen;
  return buf;
}

void MemoryBuffer::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IngestionError(path.string(), "cannot open for writing");
  save(os);
}

MemoryBuffer MemoryBuffer::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IngestionError(path.string(), "cannot open file");
  return load(is, path.string());
}

}  // namespace dercl
