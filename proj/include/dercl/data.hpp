#pragma once

// MNIST ingestion and per-task input transforms.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dercl/nn.hpp"
#include "dercl/rng.hpp"

namespace dercl {

inline constexpr int kImageSide = 28;

enum class Split { train, validation, test };

struct Dataset {
  Matrix<double> images;  // N x 784, values in [0, 1]
  std::vector<int> labels;
  Split split = Split::train;

  Index size() const { return images.rows(); }
  Dataset subset(std::span<const int> indices) const;
  /// Indices of every example whose label is `digit`.
  std::vector<int> indices_of(int digit) const;
  std::vector<int> indices_of(std::span<const int> digits) const;
};

/// Reads an IDX3 image file and its IDX1 label file. Pixels are scaled by
/// 1/255. Throws IngestionError naming the offending file.
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 Split split = Split::train);

struct MnistData {
  Dataset train;
  Dataset test;
};

/// Loads the four standard files (train-images-idx3-ubyte, ...) from `dir`.
MnistData load_mnist(const std::filesystem::path& dir);

/// Stratified split: each class contributes its proportional share to the
/// validation set (largest-remainder rounding, so the total is exact).
/// Both halves keep the original relative order.
std::pair<Dataset, Dataset> split_validation(const Dataset& ds, double fraction, std::uint64_t seed);

/// Bilinear resampling taps for one rotation of the 28x28 grid.
struct RotationKernel {
  std::vector<std::array<int, 4>> source;      // -1 marks an out-of-image tap
  std::vector<std::array<double, 4>> weight;
};

RotationKernel make_rotation_kernel(double angle);

class Transform {
 public:
  enum class Kind { identity, permutation, rotation };

  Transform() = default;
  static Transform identity() { return {}; }
  /// output[i] = input[perm[i]]; `perm` must be a bijection on 0..783.
  static Transform permutation(std::vector<int> perm);
  /// Counter-clockwise rotation about the grid centre (13.5, 13.5).
  static Transform rotation(double angle);

  Kind kind() const { return kind_; }
  double angle() const { return angle_; }
  const std::vector<int>& perm() const { return perm_; }

  /// Writes the transformed `in` into `out` (both length 784).
  void apply(std::span<const double> in, std::span<double> out) const;

  Transform inverse() const;

 private:
  Kind kind_ = Kind::identity;
  std::vector<int> perm_;
  double angle_ = 0.0;
  RotationKernel kernel_;
};

std::vector<double> apply_transform(std::span<const double> image, const Transform& t);

/// Uniformly random pixel permutation.
std::vector<int> random_permutation(Rng& rng, int n = kImageSide * kImageSide);

}  // namespace dercl
