#pragma once

// Dense ReLU classifier with exact backpropagation.
//
// Everything here is templated on the scalar type and header-only; the rest
// of the library instantiates it with double. Inputs are batches stored one
// example per row.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dercl/errors.hpp"
#include "dercl/rng.hpp"

namespace dercl {

using Index = Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

inline constexpr Index kMnistInputDim = 784;
inline constexpr Index kHiddenWidth = 100;

template <typename Scalar>
struct DenseLayer {
  Matrix<Scalar> weight;  // in x out
  RowVector<Scalar> bias;  // out

  Index size() const { return weight.size() + bias.size(); }
};

/// Fully connected network: ReLU on every layer but the last, identity on the
/// output, which yields the pre-softmax logits.
template <typename Scalar>
class BasicMlp {
 public:
  using scalar_type = Scalar;

  BasicMlp() = default;

  /// Zero-initialised network with the given layer widths (input first).
  explicit BasicMlp(std::span<const Index> widths) {
    if (widths.size() < 2) throw ShapeError("mlp needs at least an input and an output width");
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      DenseLayer<Scalar> layer;
      layer.weight = Matrix<Scalar>::Zero(widths[i], widths[i + 1]);
      layer.bias = RowVector<Scalar>::Zero(widths[i + 1]);
      layers_.push_back(std::move(layer));
    }
  }
  BasicMlp(std::initializer_list<Index> widths)
      : BasicMlp(std::span<const Index>(widths.begin(), widths.size())) {}

  /// He-uniform weights U(-sqrt(6/fan_in), +sqrt(6/fan_in)), zero biases.
  static BasicMlp he_uniform(std::span<const Index> widths, Rng& rng) {
    BasicMlp m(widths);
    for (auto& layer : m.layers_) {
      const double bound = std::sqrt(6.0 / static_cast<double>(layer.weight.rows()));
      for (Index i = 0; i < layer.weight.size(); ++i) {
        layer.weight.data()[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
      }
    }
    return m;
  }

  Index input_dim() const { return layers_.front().weight.rows(); }
  Index output_dim() const { return layers_.back().weight.cols(); }
  std::size_t depth() const { return layers_.size(); }

  Index num_parameters() const {
    Index n = 0;
    for (const auto& l : layers_) n += l.size();
    return n;
  }

  std::vector<Index> widths() const {
    std::vector<Index> w{input_dim()};
    for (const auto& l : layers_) w.push_back(l.weight.cols());
    return w;
  }

  std::vector<DenseLayer<Scalar>>& layers() { return layers_; }
  const std::vector<DenseLayer<Scalar>>& layers() const { return layers_; }

  friend bool operator==(const BasicMlp& a, const BasicMlp& b) {
    if (a.layers_.size() != b.layers_.size()) return false;
    for (std::size_t i = 0; i < a.layers_.size(); ++i) {
      const auto& x = a.layers_[i];
      const auto& y = b.layers_[i];
      if (x.weight.rows() != y.weight.rows() || x.weight.cols() != y.weight.cols()) return false;
      if (x.weight != y.weight || x.bias != y.bias) return false;
    }
    return true;
  }

 private:
  std::vector<DenseLayer<Scalar>> layers_;
};

using Mlp = BasicMlp<double>;

/// The 784-100-100-C classifier used for every MNIST setting.
inline Mlp make_mnist_classifier(Index num_classes, Rng& rng) {
  const Index widths[] = {kMnistInputDim, kHiddenWidth, kHiddenWidth, num_classes};
  return Mlp::he_uniform(widths, rng);
}

/// Gradient of a scalar loss w.r.t. every parameter, shaped like the model.
template <typename Scalar>
struct BasicGradients {
  std::vector<DenseLayer<Scalar>> layers;

  static BasicGradients zeros_like(const BasicMlp<Scalar>& model) {
    BasicGradients g;
    for (const auto& l : model.layers()) {
      g.layers.push_back({Matrix<Scalar>::Zero(l.weight.rows(), l.weight.cols()),
                          RowVector<Scalar>::Zero(l.bias.size())});
    }
    return g;
  }

  Index size() const {
    Index n = 0;
    for (const auto& l : layers) n += l.size();
    return n;
  }

  /// Flat view: per layer, weights row-major then biases.
  Vector<Scalar> flat() const {
    Vector<Scalar> v(size());
    Index o = 0;
    for (const auto& l : layers) {
      v.segment(o, l.weight.size()) = Eigen::Map<const Vector<Scalar>>(l.weight.data(), l.weight.size());
      o += l.weight.size();
      v.segment(o, l.bias.size()) = l.bias.transpose();
      o += l.bias.size();
    }
    return v;
  }

  BasicGradients& operator+=(const BasicGradients& o) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      layers[i].weight += o.layers[i].weight;
      layers[i].bias += o.layers[i].bias;
    }
    return *this;
  }
  BasicGradients& operator*=(Scalar s) {
    for (auto& l : layers) {
      l.weight *= s;
      l.bias *= s;
    }
    return *this;
  }
};

using Gradients = BasicGradients<double>;

template <typename Scalar>
Scalar dot(const BasicGradients<Scalar>& a, const BasicGradients<Scalar>& b) {
  Scalar s = 0;
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    s += a.layers[i].weight.cwiseProduct(b.layers[i].weight).sum();
    s += a.layers[i].bias.dot(b.layers[i].bias);
  }
  return s;
}

/// a <- a + s * b
template <typename Scalar>
void axpy(BasicGradients<Scalar>& a, Scalar s, const BasicGradients<Scalar>& b) {
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    a.layers[i].weight += s * b.layers[i].weight;
    a.layers[i].bias += s * b.layers[i].bias;
  }
}

/// Flat parameter vector in the same layout as BasicGradients::flat().
template <typename Scalar>
Vector<Scalar> flatten(const BasicMlp<Scalar>& model) {
  Vector<Scalar> v(model.num_parameters());
  Index o = 0;
  for (const auto& l : model.layers()) {
    v.segment(o, l.weight.size()) = Eigen::Map<const Vector<Scalar>>(l.weight.data(), l.weight.size());
    o += l.weight.size();
    v.segment(o, l.bias.size()) = l.bias.transpose();
    o += l.bias.size();
  }
  return v;
}

template <typename Scalar>
void unflatten(BasicMlp<Scalar>& model, const Vector<Scalar>& v) {
  if (v.size() != model.num_parameters()) throw ShapeError("flat parameter vector has wrong length");
  Index o = 0;
  for (auto& l : model.layers()) {
    Eigen::Map<Vector<Scalar>>(l.weight.data(), l.weight.size()) = v.segment(o, l.weight.size());
    o += l.weight.size();
    l.bias = v.segment(o, l.bias.size()).transpose();
    o += l.bias.size();
  }
}

// ---------------------------------------------------------------------------
// Forward

template <typename Scalar>
struct ForwardCache {
  /// Post-ReLU activations of every hidden layer.
  std::vector<Matrix<Scalar>> hidden;
  Matrix<Scalar> logits;
};

template <typename Scalar, typename Derived>
void forward_cached(const BasicMlp<Scalar>& model, const Eigen::MatrixBase<Derived>& inputs,
                    ForwardCache<Scalar>& cache) {
  if (inputs.cols() != model.input_dim()) {
    throw ShapeError("forward: input has " + std::to_string(inputs.cols()) + " columns, model expects " +
                     std::to_string(model.input_dim()));
  }
  const auto& layers = model.layers();
  cache.hidden.resize(layers.size() - 1);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Matrix<Scalar>& out = (l + 1 == layers.size()) ? cache.logits : cache.hidden[l];
    if (l == 0) {
      out.noalias() = inputs * layers[l].weight;
    } else {
      out.noalias() = cache.hidden[l - 1] * layers[l].weight;
    }
    out.rowwise() += layers[l].bias;
    if (l + 1 < layers.size()) out = out.cwiseMax(Scalar(0));
  }
}

/// Pre-softmax logits h(x) for every row of `inputs`.
template <typename Scalar, typename Derived>
Matrix<Scalar> forward(const BasicMlp<Scalar>& model, const Eigen::MatrixBase<Derived>& inputs) {
  ForwardCache<Scalar> cache;
  forward_cached(model, inputs, cache);
  return std::move(cache.logits);
}

// ---------------------------------------------------------------------------
// Softmax and losses

/// Max-subtracted softmax of one logit vector.
template <typename Derived>
RowVector<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& logits) {
  using S = typename Derived::Scalar;
  RowVector<S> p = logits.reshaped().transpose();
  const S m = p.maxCoeff();
  p = (p.array() - m).exp();
  p /= p.sum();
  return p;
}

template <typename Scalar>
Matrix<Scalar> softmax_rows(const Matrix<Scalar>& logits) {
  Matrix<Scalar> p(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) p.row(i) = softmax(logits.row(i));
  return p;
}

/// Index of the largest entry; the lowest index wins ties.
template <typename Derived>
Index argmax(const Eigen::MatrixBase<Derived>& v) {
  Index best = 0;
  for (Index i = 1; i < v.size(); ++i) {
    if (v(i) > v(best)) best = i;
  }
  return best;
}

/// argmax restricted to `classes`; ties resolve to the lowest class index.
template <typename Derived>
Index masked_argmax(const Eigen::MatrixBase<Derived>& v, std::span<const int> classes) {
  Index best = -1;
  for (int c : classes) {
    if (best < 0 || v(c) > v(best) || (v(c) == v(best) && c < best)) best = c;
  }
  return best;
}

template <typename Scalar>
struct LossValue {
  Scalar value = 0;
  Matrix<Scalar> grad;  // d value / d logits
};

/// Mean cross-entropy of softmax(logits) against integer labels. With a
/// non-empty `mask`, the softmax is restricted to the listed classes and the
/// remaining logits receive zero gradient.
template <typename Scalar>
LossValue<Scalar> cross_entropy(const Matrix<Scalar>& logits, std::span<const int> labels,
                                std::span<const int> mask = {}) {
  const Index n = logits.rows();
  const Index c = logits.cols();
  if (static_cast<Index>(labels.size()) != n) throw ShapeError("cross_entropy: label count != rows");
  std::vector<char> allowed(c, mask.empty() ? 1 : 0);
  for (int k : mask) {
    if (k < 0 || k >= c) throw ContractError("cross_entropy: mask class out of range");
    allowed[k] = 1;
  }
  LossValue<Scalar> out;
  out.grad = Matrix<Scalar>::Zero(n, c);
  if (n == 0) return out;
  Scalar total = 0;
  for (Index i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || y >= c) throw ContractError("cross_entropy: label " + std::to_string(y) + " out of range");
    if (!allowed[y]) throw ContractError("cross_entropy: label " + std::to_string(y) + " outside mask");
    Scalar m = -std::numeric_limits<Scalar>::infinity();
    for (Index k = 0; k < c; ++k)
      if (allowed[k]) m = std::max(m, logits(i, k));
    Scalar z = 0;
    for (Index k = 0; k < c; ++k)
      if (allowed[k]) {
        const Scalar e = std::exp(logits(i, k) - m);
        out.grad(i, k) = e;
        z += e;
      }
    total += std::log(z) + m - logits(i, y);
    out.grad.row(i) /= z;
    out.grad(i, y) -= Scalar(1);
  }
  out.value = total / static_cast<Scalar>(n);
  out.grad /= static_cast<Scalar>(n);
  return out;
}

/// Mean over rows of the squared Euclidean distance ||stored - current||^2.
template <typename Scalar>
LossValue<Scalar> logit_mse(const Matrix<Scalar>& stored, const Matrix<Scalar>& current) {
  if (stored.rows() != current.rows() || stored.cols() != current.cols()) {
    throw ShapeError("logit_mse: stored and current logits differ in shape");
  }
  LossValue<Scalar> out;
  const Index n = current.rows();
  if (n == 0) {
    out.grad = Matrix<Scalar>::Zero(0, current.cols());
    return out;
  }
  const Matrix<Scalar> diff = current - stored;
  out.value = diff.squaredNorm() / static_cast<Scalar>(n);
  out.grad = (Scalar(2) / static_cast<Scalar>(n)) * diff;
  return out;
}

enum class LossKind { cross_entropy, logit_mse };

/// One weighted loss acting on a contiguous block of rows of a stacked batch.
template <typename Scalar>
struct LossTerm {
  LossKind kind = LossKind::cross_entropy;
  Scalar weight = 1;
  Index first_row = 0;
  Index rows = 0;
  std::vector<int> labels;   // cross_entropy
  std::vector<int> mask;     // cross_entropy, optional
  Matrix<Scalar> targets;    // logit_mse: stored logits
};

/// A single loss or a weighted sum of losses over blocks of one batch.
template <typename Scalar>
struct BasicLossSpec {
  std::vector<LossTerm<Scalar>> terms;

  static BasicLossSpec cross_entropy(std::vector<int> labels, std::vector<int> mask = {}) {
    BasicLossSpec s;
    s.add_cross_entropy(0, Scalar(1), std::move(labels), std::move(mask));
    return s;
  }
  static BasicLossSpec logit_mse(Matrix<Scalar> stored) {
    BasicLossSpec s;
    s.add_logit_mse(0, Scalar(1), std::move(stored));
    return s;
  }

  BasicLossSpec& add_cross_entropy(Index first_row, Scalar weight, std::vector<int> labels,
                                   std::vector<int> mask = {}) {
    LossTerm<Scalar> t;
    t.kind = LossKind::cross_entropy;
    t.weight = weight;
    t.first_row = first_row;
    t.rows = static_cast<Index>(labels.size());
    t.labels = std::move(labels);
    t.mask = std::move(mask);
    terms.push_back(std::move(t));
    return *this;
  }
  BasicLossSpec& add_logit_mse(Index first_row, Scalar weight, Matrix<Scalar> stored) {
    LossTerm<Scalar> t;
    t.kind = LossKind::logit_mse;
    t.weight = weight;
    t.first_row = first_row;
    t.rows = stored.rows();
    t.targets = std::move(stored);
    terms.push_back(std::move(t));
    return *this;
  }
};

using LossSpec = BasicLossSpec<double>;

/// Value and logit-gradient of a composite loss.
template <typename Scalar>
LossValue<Scalar> evaluate_loss(const BasicLossSpec<Scalar>& spec, const Matrix<Scalar>& logits) {
  LossValue<Scalar> out;
  out.grad = Matrix<Scalar>::Zero(logits.rows(), logits.cols());
  for (const auto& t : spec.terms) {
    if (t.weight < 0) throw ContractError("loss weights must be non-negative");
    if (t.first_row < 0 || t.first_row + t.rows > logits.rows()) throw ShapeError("loss term rows outside batch");
    const Matrix<Scalar> block = logits.middleRows(t.first_row, t.rows);
    const LossValue<Scalar> part = t.kind == LossKind::cross_entropy
                                       ? cross_entropy<Scalar>(block, t.labels, t.mask)
                                       : logit_mse<Scalar>(t.targets, block);
    out.value += t.weight * part.value;
    out.grad.middleRows(t.first_row, t.rows) += t.weight * part.grad;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Backward

/// Backpropagate per-row logit gradients through a cached forward pass.
template <typename Scalar, typename Derived>
BasicGradients<Scalar> backprop(const BasicMlp<Scalar>& model, const Eigen::MatrixBase<Derived>& inputs,
                                const ForwardCache<Scalar>& cache, Matrix<Scalar> delta) {
  const auto& layers = model.layers();
  BasicGradients<Scalar> g;
  g.layers.resize(layers.size());
  for (std::size_t l = layers.size(); l-- > 0;) {
    if (l == 0) {
      g.layers[l].weight.noalias() = inputs.transpose() * delta;
    } else {
      g.layers[l].weight.noalias() = cache.hidden[l - 1].transpose() * delta;
    }
    g.layers[l].bias = delta.colwise().sum();
    if (l > 0) {
      Matrix<Scalar> prev;
      prev.noalias() = delta * layers[l].weight.transpose();
      delta = prev.cwiseProduct((cache.hidden[l - 1].array() > Scalar(0)).matrix().template cast<Scalar>());
    }
  }
  return g;
}

template <typename Scalar>
struct BackwardResult {
  Scalar loss = 0;
  BasicGradients<Scalar> grads;
  Matrix<Scalar> logits;
};

/// Exact gradient of `spec` w.r.t. every parameter for one stacked batch.
template <typename Scalar, typename Derived>
BackwardResult<Scalar> backward(const BasicMlp<Scalar>& model, const Eigen::MatrixBase<Derived>& inputs,
                                const BasicLossSpec<Scalar>& spec) {
  ForwardCache<Scalar> cache;
  forward_cached(model, inputs, cache);
  LossValue<Scalar> lv = evaluate_loss(spec, cache.logits);
  BackwardResult<Scalar> r;
  r.loss = lv.value;
  r.grads = backprop(model, inputs, cache, std::move(lv.grad));
  r.logits = std::move(cache.logits);
  return r;
}

/// theta <- theta - lr * grad
template <typename Scalar>
void sgd_step(BasicMlp<Scalar>& model, const BasicGradients<Scalar>& grads, Scalar lr) {
  if (!(lr > 0)) throw ContractError("sgd_step: learning rate must be positive");
  if (grads.layers.size() != model.depth()) throw ShapeError("sgd_step: gradient depth mismatch");
  for (std::size_t i = 0; i < grads.layers.size(); ++i) {
    model.layers()[i].weight.noalias() -= lr * grads.layers[i].weight;
    model.layers()[i].bias.noalias() -= lr * grads.layers[i].bias;
  }
}

/// Copy of `model` with N(0, sigma^2) noise added to every parameter.
template <typename Scalar>
BasicMlp<Scalar> perturb(const BasicMlp<Scalar>& model, double sigma, Rng& rng) {
  if (sigma < 0) throw ContractError("perturb: sigma must be non-negative");
  BasicMlp<Scalar> out = model;
  if (sigma == 0) return out;
  for (auto& l : out.layers()) {
    for (Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] += static_cast<Scalar>(sigma * rng.normal());
    for (Index i = 0; i < l.bias.size(); ++i) l.bias(i) += static_cast<Scalar>(sigma * rng.normal());
  }
  return out;
}

/// ||grad_theta CE(y_n, f(x_n))||^2 for every example n, from one batched pass.
/// Per layer the per-example weight gradient is the outer product a_n delta_n^T,
/// whose squared Frobenius norm is ||a_n||^2 ||delta_n||^2.
template <typename Scalar, typename Derived>
Vector<Scalar> per_example_grad_sqnorms(const BasicMlp<Scalar>& model, const Eigen::MatrixBase<Derived>& inputs,
                                        std::span<const int> labels) {
  ForwardCache<Scalar> cache;
  forward_cached(model, inputs, cache);
  const Index n = inputs.rows();
  // cross_entropy averages over rows; undo that to get per-example gradients.
  Matrix<Scalar> delta = cross_entropy<Scalar>(cache.logits, labels).grad * static_cast<Scalar>(n);
  Vector<Scalar> out = Vector<Scalar>::Zero(n);
  const auto& layers = model.layers();
  for (std::size_t l = layers.size(); l-- > 0;) {
    const Vector<Scalar> delta_sq = delta.rowwise().squaredNorm();
    const Vector<Scalar> act_sq = l == 0 ? Vector<Scalar>(inputs.rowwise().squaredNorm())
                                         : Vector<Scalar>(cache.hidden[l - 1].rowwise().squaredNorm());
    out.array() += (act_sq.array() + Scalar(1)) * delta_sq.array();
    if (l > 0) {
      Matrix<Scalar> prev;
      prev.noalias() = delta * layers[l].weight.transpose();
      delta = prev.cwiseProduct((cache.hidden[l - 1].array() > Scalar(0)).matrix().template cast<Scalar>());
    }
  }
  return out;
}

}  // namespace dercl
