#include "dercl/methods.hpp"

#include <array>
#include <fstream>
#include <sstream>

#include "dercl/binary_io.hpp"

namespace dercl {

namespace {

constexpr std::array<std::pair<MethodKind, std::string_view>, 7> kMethodNames{{
    {MethodKind::sgd, "sgd"},
    {MethodKind::joint, "joint"},
    {MethodKind::er, "er"},
    {MethodKind::der, "der"},
    {MethodKind::derpp, "derpp"},
    {MethodKind::fdr, "fdr"},
    {MethodKind::agem_r, "agem_r"},
}};

Matrix<double> stack(const Matrix<double>& top, const Matrix<double>& bottom) {
  Matrix<double> out(top.rows() + bottom.rows(), top.cols());
  out.topRows(top.rows()) = top;
  out.bottomRows(bottom.rows()) = bottom;
  return out;
}

std::vector<int> to_vector(std::span<const int> s) { return {s.begin(), s.end()}; }

BufferEntry make_entry(const LabeledBatch& b, Index i, const Matrix<double>* logits) {
  BufferEntry e;
  e.input = b.inputs.row(i);
  if (logits) e.logits = logits->row(i);
  e.label = b.labels[i];
  return e;
}

class SgdLearner final : public Learner {
 public:
  using Learner::Learner;

  double observe(const LabeledBatch& b) override {
    return sgd_update(b.inputs, LossSpec::cross_entropy(to_vector(b.labels)));
  }
};

/// Shared by every method that owns a reservoir buffer.
class BufferedLearner : public Learner {
 public:
  BufferedLearner(MethodConfig cfg, Mlp model, std::uint64_t seed, Payload payload)
      : Learner(cfg, std::move(model), seed),
        buffer_(cfg.buffer_capacity, model_.input_dim(), model_.output_dim(), payload) {}

  const MemoryBuffer* buffer() const override { return &buffer_; }

 protected:
  void insert_all(const LabeledBatch& b, const Matrix<double>* logits, MemoryBuffer& into) {
    for (Index i = 0; i < b.inputs.rows(); ++i) into.reservoir_insert(make_entry(b, i, logits), reservoir_rng_);
  }

  void save_extra(std::ostream& os) const override { buffer_.save(os); }
  void load_extra(std::istream& is, const std::string& source) override { buffer_ = MemoryBuffer::load(is, source); }

  MemoryBuffer buffer_;
};

class ErLearner final : public BufferedLearner {
 public:
  ErLearner(MethodConfig cfg, Mlp model, std::uint64_t seed)
      : BufferedLearner(cfg, std::move(model), seed, Payload{false, true}) {}

  double observe(const LabeledBatch& b) override {
    double loss;
    if (buffer_.empty()) {
      loss = sgd_update(b.inputs, LossSpec::cross_entropy(to_vector(b.labels)));
    } else {
      // one cross-entropy over the union of the batch and the replay draw
      const ReplayBatch r = buffer_.sample(cfg_.replay_batch_size, replay_rng_);
      std::vector<int> labels = to_vector(b.labels);
      labels.insert(labels.end(), r.labels.begin(), r.labels.end());
      loss = sgd_update(stack(b.inputs, r.inputs), LossSpec::cross_entropy(std::move(labels)));
    }
    insert_all(b, nullptr, buffer_);
    return loss;
  }
};

/// DER and DER++. A term whose coefficient is zero is dropped together with
/// its buffer draw, so DER++ with beta = 0 replays DER exactly.
class DarkLearner final : public BufferedLearner {
 public:
  DarkLearner(MethodConfig cfg, Mlp model, std::uint64_t seed)
      : BufferedLearner(cfg, std::move(model), seed, Payload{true, true}) {}

  double observe(const LabeledBatch& b) override {
    LossSpec spec = LossSpec::cross_entropy(to_vector(b.labels));
    Matrix<double> inputs = b.inputs;
    if (!buffer_.empty()) {
      if (cfg_.alpha > 0) {
        ReplayBatch r = buffer_.sample(cfg_.replay_batch_size, replay_rng_);
        spec.add_logit_mse(inputs.rows(), cfg_.alpha, std::move(r.logits));
        inputs = stack(inputs, r.inputs);
      }
      if (cfg_.beta > 0) {
        ReplayBatch r = buffer_.sample(cfg_.replay_batch_size, replay_rng_);
        spec.add_cross_entropy(inputs.rows(), cfg_.beta, std::move(r.labels));
        inputs = stack(inputs, r.inputs);
      }
    }
    Matrix<double> logits;
    const double loss = sgd_update(inputs, spec, &logits);
    // z is taken from the forward pass of this step, before the update
    const Matrix<double> z = logits.topRows(b.inputs.rows());
    insert_all(b, &z, buffer_);
    return loss;
  }
};

/// Logit replay where the targets are refreshed only at task boundaries.
/// Sampling reads `buffer_`, which is frozen during a task; new examples go
/// into `pending_` and replace it when the task ends.
class FdrLearner final : public BufferedLearner {
 public:
  FdrLearner(MethodConfig cfg, Mlp model, std::uint64_t seed)
      : BufferedLearner(cfg, std::move(model), seed, Payload{true, true}), pending_(buffer_) {}

  bool needs_boundaries() const override { return true; }

  double observe(const LabeledBatch& b) override {
    LossSpec spec = LossSpec::cross_entropy(to_vector(b.labels));
    Matrix<double> inputs = b.inputs;
    if (!buffer_.empty() && cfg_.alpha > 0) {
      ReplayBatch r = buffer_.sample(cfg_.replay_batch_size, replay_rng_);
      spec.add_logit_mse(inputs.rows(), cfg_.alpha, std::move(r.logits));
      inputs = stack(inputs, r.inputs);
    }
    Matrix<double> logits;
    const double loss = sgd_update(inputs, spec, &logits);
    const Matrix<double> z = logits.topRows(b.inputs.rows());
    insert_all(b, &z, pending_);
    return loss;
  }

  void on_task_boundary() override {
    buffer_ = pending_;
    if (buffer_.empty()) return;
    const Matrix<double> z = forward(model_, buffer_.all().inputs);
    for (Index i = 0; i < buffer_.size(); ++i) buffer_.update_logits(i, z.row(i));
    pending_ = buffer_;
  }

  const MemoryBuffer& pending() const { return pending_; }

 protected:
  void save_extra(std::ostream& os) const override {
    buffer_.save(os);
    pending_.save(os);
  }
  void load_extra(std::istream& is, const std::string& source) override {
    buffer_ = MemoryBuffer::load(is, source);
    pending_ = MemoryBuffer::load(is, source);
  }

 private:
  MemoryBuffer pending_;
};

class AgemLearner final : public BufferedLearner {
 public:
  AgemLearner(MethodConfig cfg, Mlp model, std::uint64_t seed)
      : BufferedLearner(cfg, std::move(model), seed, Payload{false, true}) {}

  double observe(const LabeledBatch& b) override {
    double loss;
    if (buffer_.empty()) {
      loss = sgd_update(b.inputs, LossSpec::cross_entropy(to_vector(b.labels)));
    } else {
      auto cur = backward(model_, b.inputs, LossSpec::cross_entropy(to_vector(b.labels)));
      const ReplayBatch r = buffer_.sample(cfg_.replay_batch_size, replay_rng_);
      const auto ref = backward(model_, r.inputs, LossSpec::cross_entropy(r.labels));
      sgd_step(model_, agem_project(cur.grads, ref.grads), cfg_.lr);
      loss = cur.loss;
      ++observed_;
    }
    insert_all(b, nullptr, buffer_);
    return loss;
  }
};

}  // namespace

std::string_view to_string(MethodKind k) {
  for (const auto& [kind, name] : kMethodNames)
    if (kind == k) return name;
  return "unknown";
}

MethodKind parse_method(std::string_view name) {
  for (const auto& [kind, n] : kMethodNames)
    if (n == name) return kind;
  if (name == "der++") return MethodKind::derpp;
  if (name == "agem-r" || name == "agem") return MethodKind::agem_r;
  throw ConfigError("unknown method '" + std::string(name) + "'");
}

bool uses_buffer(MethodKind k) { return k != MethodKind::sgd && k != MethodKind::joint; }

void MethodConfig::validate() const {
  const std::string m(to_string(kind));
  if (!(lr > 0)) throw ConfigError(m + ": learning rate must be positive");
  if (alpha < 0 || beta < 0) throw ConfigError(m + ": alpha and beta must be non-negative");
  if (batch_size <= 0) throw ConfigError(m + ": batch size must be positive");
  if (uses_buffer(kind)) {
    if (buffer_capacity <= 0) throw ConfigError(m + ": buffer capacity must be positive");
    if (replay_batch_size <= 0) throw ConfigError(m + ": replay batch size must be positive");
  }
  if (kind == MethodKind::der && beta != 0) throw ConfigError("der: beta is a DER++ coefficient, use derpp");
  if ((kind == MethodKind::er || kind == MethodKind::agem_r || kind == MethodKind::fdr) && beta != 0) {
    throw ConfigError(m + ": beta is not used by this method");
  }
}

Gradients agem_project(const Gradients& g, const Gradients& ref) {
  const double d = dot(g, ref);
  const double rr = dot(ref, ref);
  Gradients out = g;
  if (d < 0 && rr > 0) axpy(out, -d / rr, ref);
  return out;
}

Vector<double> agem_project(const Vector<double>& g, const Vector<double>& ref) {
  const double d = g.dot(ref);
  const double rr = ref.squaredNorm();
  if (d < 0 && rr > 0) return g - (d / rr) * ref;
  return g;
}

Learner::Learner(MethodConfig cfg, Mlp model, std::uint64_t seed)
    : cfg_(cfg), model_(std::move(model)), replay_rng_(Rng(seed).split("replay")),
      reservoir_rng_(Rng(seed).split("reservoir")) {
  cfg_.validate();
}

double Learner::sgd_update(const Matrix<double>& inputs, const LossSpec& spec, Matrix<double>* logits) {
  auto r = backward(model_, inputs, spec);
  sgd_step(model_, r.grads, cfg_.lr);
  if (logits) *logits = std::move(r.logits);
  ++observed_;
  return r.loss;
}

// "DERCKPT1", method name, layer widths, parameters, observed count, the two
// RNG states, then the method's memory if it has one.
void Learner::save_checkpoint(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IngestionError(path.string(), "cannot open for writing");
  io::put_magic(os, "DERCKPT1");
  io::put_string(os, std::string(to_string(cfg_.kind)));
  const auto widths = model_.widths();
  io::put_u64(os, widths.size());
  for (Index w : widths) io::put_u64(os, static_cast<std::uint64_t>(w));
  const Vector<double> theta = flatten(model_);
  for (Index i = 0; i < theta.size(); ++i) io::put_f64(os, theta(i));
  io::put_u64(os, observed_);
  io::put_string(os, replay_rng_.state());
  io::put_string(os, reservoir_rng_.state());
  save_extra(os);
}

void Learner::load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IngestionError(path.string(), "cannot open file");
  io::Reader r(is, path.string());
  r.expect_magic("DERCKPT1");
  const std::string method = r.string();
  if (method != to_string(cfg_.kind)) {
    throw IngestionError(path.string(), "checkpoint is for method " + method + ", not " + std::string(to_string(cfg_.kind)));
  }
  const auto depth = r.u64();
  if (depth > 64) throw IngestionError(path.string(), "implausible layer count");
  std::vector<Index> widths(depth);
  for (auto& w : widths) w = static_cast<Index>(r.u64());
  if (widths != model_.widths()) throw IngestionError(path.string(), "checkpoint architecture differs from the learner");
  Vector<double> theta(model_.num_parameters());
  for (Index i = 0; i < theta.size(); ++i) theta(i) = r.f64();
  unflatten(model_, theta);
  observed_ = r.u64();
  replay_rng_.restore(r.string());
  reservoir_rng_.restore(r.string());
  load_extra(is, path.string());
}

Mlp initial_model(Index num_classes, std::uint64_t seed) {
  Rng rng = Rng(seed).split("init");
  return make_mnist_classifier(num_classes, rng);
}

std::unique_ptr<Learner> make_learner(const MethodConfig& cfg, Index num_classes, std::uint64_t seed) {
  Mlp model = initial_model(num_classes, seed);
  switch (cfg.kind) {
    case MethodKind::sgd:
    case MethodKind::joint:
      return std::make_unique<SgdLearner>(cfg, std::move(model), seed);
    case MethodKind::er:
      return std::make_unique<ErLearner>(cfg, std::move(model), seed);
    case MethodKind::der:
    case MethodKind::derpp:
      return std::make_unique<DarkLearner>(cfg, std::move(model), seed);
    case MethodKind::fdr:
      return std::make_unique<FdrLearner>(cfg, std::move(model), seed);
    case MethodKind::agem_r:
      return std::make_unique<AgemLearner>(cfg, std::move(model), seed);
  }
  throw ConfigError("unknown method");
}

}  // namespace dercl
