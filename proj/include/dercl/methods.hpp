#pragma once

// Continual learners behind one interface. observe() takes a LabeledBatch,
// which carries no task identity; only FDR is told about task boundaries,
// and only through on_task_boundary().

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>

#include "dercl/buffer.hpp"
#include "dercl/nn.hpp"
#include "dercl/rng.hpp"
#include "dercl/streams.hpp"

namespace dercl {

enum class MethodKind { sgd, joint, er, der, derpp, fdr, agem_r };

std::string_view to_string(MethodKind k);
MethodKind parse_method(std::string_view name);

/// True for every method that keeps a replay memory.
bool uses_buffer(MethodKind k);

struct MethodConfig {
  MethodKind kind = MethodKind::sgd;
  double lr = 0.1;
  double alpha = 0.0;
  double beta = 0.0;
  Index buffer_capacity = 0;
  int batch_size = 10;
  int replay_batch_size = 10;  // mbs

  /// Throws ConfigError on an invalid combination.
  void validate() const;
};

/// g - (g.ref / ref.ref) ref when g.ref < 0, otherwise g. A zero reference
/// leaves g untouched.
Gradients agem_project(const Gradients& g, const Gradients& ref);
Vector<double> agem_project(const Vector<double>& g, const Vector<double>& ref);

class Learner {
 public:
  Learner(MethodConfig cfg, Mlp model, std::uint64_t seed);
  virtual ~Learner() = default;

  /// One training step on `batch`; returns the loss that was minimised.
  virtual double observe(const LabeledBatch& batch) = 0;

  virtual bool needs_boundaries() const { return false; }
  virtual void on_task_boundary() {}

  const MethodConfig& config() const { return cfg_; }
  const Mlp& model() const { return model_; }
  Mlp& model() { return model_; }
  std::uint64_t observed_count() const { return observed_; }

  /// Replay memory, or null for methods without one.
  virtual const MemoryBuffer* buffer() const { return nullptr; }

  /// Model, memory and random state.
  void save_checkpoint(const std::filesystem::path& path) const;
  void load_checkpoint(const std::filesystem::path& path);

 protected:
  double sgd_update(const Matrix<double>& inputs, const LossSpec& spec, Matrix<double>* logits = nullptr);
  virtual void save_extra(std::ostream&) const {}
  virtual void load_extra(std::istream&, const std::string&) {}

  MethodConfig cfg_;
  Mlp model_;
  Rng replay_rng_;
  Rng reservoir_rng_;
  std::uint64_t observed_ = 0;
};

std::unique_ptr<Learner> make_learner(const MethodConfig& cfg, Index num_classes, std::uint64_t seed);

/// Initial weights of every learner built from `seed`.
Mlp initial_model(Index num_classes, std::uint64_t seed);

}  // namespace dercl
