#pragma once

// Fixed-capacity replay memory filled by reservoir sampling.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <vector>

#include "dercl/nn.hpp"
#include "dercl/rng.hpp"

namespace dercl {

struct BufferEntry {
  RowVector<double> input;
  std::optional<RowVector<double>> logits;
  std::optional<int> label;

  friend bool operator==(const BufferEntry& a, const BufferEntry& b) {
    auto same = [](const RowVector<double>& x, const RowVector<double>& y) { return x.size() == y.size() && x == y; };
    if (!same(a.input, b.input) || a.label != b.label || a.logits.has_value() != b.logits.has_value()) return false;
    return !a.logits || same(*a.logits, *b.logits);
  }
};

/// A replay draw laid out as matrices, ready to be stacked under a batch.
struct ReplayBatch {
  Matrix<double> inputs;
  Matrix<double> logits;    // empty when the buffer stores no logits
  std::vector<int> labels;  // empty when the buffer stores no labels
  std::vector<Index> slots;

  Index size() const { return inputs.rows(); }
  BufferEntry entry(Index i) const;
};

/// Which parts of an entry a buffer keeps. Every entry of a buffer has the
/// same layout.
struct Payload {
  bool logits = false;
  bool labels = true;
};

class MemoryBuffer {
 public:
  MemoryBuffer(Index capacity, Index input_dim, Index logit_dim, Payload payload);

  Index capacity() const { return capacity_; }
  Index size() const { return size_; }
  bool empty() const { return size_ == 0; }
  std::uint64_t seen_count() const { return seen_; }
  Payload payload() const { return payload_; }
  Index input_dim() const { return inputs_.cols(); }
  Index logit_dim() const { return logits_.cols(); }

  /// Reservoir step: append while N < capacity, otherwise draw j ~ U{0..N}
  /// and overwrite slot j if j < capacity. N grows either way.
  /// Returns the slot written, or nothing if the example was dropped.
  std::optional<Index> reservoir_insert(const BufferEntry& entry, Rng& rng);

  /// k entries, without replacement when k <= size(), with replacement
  /// otherwise. Throws EmptyBufferError on an empty buffer.
  ReplayBatch sample(Index k, Rng& rng) const;

  void update_logits(Index slot, const RowVector<double>& logits);

  BufferEntry entry(Index slot) const;
  /// Every stored entry as one batch, in slot order.
  ReplayBatch all() const;

  void save(std::ostream& os) const;
  static MemoryBuffer load(std::istream& is, const std::string& source);
  void save(const std::filesystem::path& path) const;
  static MemoryBuffer load(const std::filesystem::path& path);

  friend bool operator==(const MemoryBuffer& a, const MemoryBuffer& b);

 private:
  void write(Index slot, const BufferEntry& entry);
  ReplayBatch gather(std::vector<Index> slots) const;

  Index capacity_;
  Index size_ = 0;
  std::uint64_t seen_ = 0;
  Payload payload_;
  Matrix<double> inputs_;
  Matrix<double> logits_;
  std::vector<int> labels_;
};

}  // namespace dercl
