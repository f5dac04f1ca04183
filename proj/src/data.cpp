#include "dercl/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace dercl {

namespace {

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError(path.string(), "cannot open file");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) | (std::uint32_t(b[off + 2]) << 8) |
         std::uint32_t(b[off + 3]);
}

}  // namespace

Dataset Dataset::subset(std::span<const int> indices) const {
  Dataset out;
  out.split = split;
  out.images.resize(static_cast<Index>(indices.size()), images.cols());
  out.labels.resize(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    out.images.row(static_cast<Index>(i)) = images.row(indices[i]);
    out.labels[i] = labels[indices[i]];
  }
  return out;
}

std::vector<int> Dataset::indices_of(int digit) const {
  std::vector<int> idx;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == digit) idx.push_back(static_cast<int>(i));
  return idx;
}

std::vector<int> Dataset::indices_of(std::span<const int> digits) const {
  std::vector<int> idx;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (std::find(digits.begin(), digits.end(), labels[i]) != digits.end()) idx.push_back(static_cast<int>(i));
  return idx;
}

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path, Split split) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  if (img.size() < 16) throw IngestionError(images_path.string(), "truncated file (no IDX3 header)");
  if (lab.size() < 8) throw IngestionError(labels_path.string(), "truncated file (no IDX1 header)");
  if (be32(img, 0) != kImagesMagic) throw IngestionError(images_path.string(), "bad magic, expected 0x00000803");
  if (be32(lab, 0) != kLabelsMagic) throw IngestionError(labels_path.string(), "bad magic, expected 0x00000801");

  const std::size_t n = be32(img, 4);
  const std::size_t rows = be32(img, 8);
  const std::size_t cols = be32(img, 12);
  const std::size_t n_labels = be32(lab, 4);
  if (n != n_labels) {
    throw IngestionError(labels_path.string(), "count mismatch: " + std::to_string(n) + " images vs " +
                                                   std::to_string(n_labels) + " labels");
  }
  if (rows * cols != static_cast<std::size_t>(kMnistInputDim)) {
    throw IngestionError(images_path.string(), "unexpected image size " + std::to_string(rows) + "x" + std::to_string(cols));
  }
  if (img.size() < 16 + n * rows * cols) throw IngestionError(images_path.string(), "truncated file");
  if (lab.size() < 8 + n) throw IngestionError(labels_path.string(), "truncated file");

  Dataset ds;
  ds.split = split;
  ds.images.resize(static_cast<Index>(n), kMnistInputDim);
  ds.labels.resize(n);
  const unsigned char* px = img.data() + 16;
  for (std::size_t i = 0; i < n * rows * cols; ++i) ds.images.data()[i] = px[i] / 255.0;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = lab[8 + i];
    if (ds.labels[i] > 9) throw IngestionError(labels_path.string(), "label out of range at " + std::to_string(i));
  }
  return ds;
}

MnistData load_mnist(const std::filesystem::path& dir) {
  MnistData d;
  d.train = load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte", Split::train);
  d.test = load_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte", Split::test);
  return d;
}

std::pair<Dataset, Dataset> split_validation(const Dataset& ds, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ContractError("split_validation: fraction must be in (0, 1)");
  Rng rng = Rng(seed).split("validation");

  int max_label = 0;
  for (int y : ds.labels) max_label = std::max(max_label, y);
  std::vector<std::vector<int>> by_class(max_label + 1);
  for (std::size_t i = 0; i < ds.labels.size(); ++i) by_class[ds.labels[i]].push_back(static_cast<int>(i));

  // Largest-remainder apportionment of round(fraction * N) validation slots.
  const auto total = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(ds.size())));
  std::vector<std::size_t> take(by_class.size());
  std::vector<std::pair<double, int>> remainders;
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    const double exact = fraction * static_cast<double>(by_class[c].size());
    take[c] = static_cast<std::size_t>(std::floor(exact));
    assigned += take[c];
    remainders.emplace_back(exact - std::floor(exact), static_cast<int>(c));
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < total && k < remainders.size(); ++k, ++assigned) take[remainders[k].second]++;

  std::vector<int> train_idx, val_idx;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto idx = by_class[c];
    rng.shuffle(idx.begin(), idx.end());
    val_idx.insert(val_idx.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take[c]));
    train_idx.insert(train_idx.end(), idx.begin() + static_cast<std::ptrdiff_t>(take[c]), idx.end());
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(val_idx.begin(), val_idx.end());
  auto train = ds.subset(train_idx);
  auto val = ds.subset(val_idx);
  train.split = Split::train;
  val.split = Split::validation;
  return {std::move(train), std::move(val)};
}

RotationKernel make_rotation_kernel(double angle) {
  constexpr double centre = (kImageSide - 1) / 2.0;
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  RotationKernel k;
  k.source.resize(kImageSide * kImageSide);
  k.weight.resize(kImageSide * kImageSide);
  for (int r = 0; r < kImageSide; ++r) {
    for (int col = 0; col < kImageSide; ++col) {
      // Inverse map: the output pixel samples the source rotated by -angle.
      const double x = col - centre;
      const double y = centre - r;
      const double xs = c * x + s * y;
      const double ys = -s * x + c * y;
      const double src_r = centre - ys;
      const double src_c = xs + centre;
      const double r0 = std::floor(src_r);
      const double c0 = std::floor(src_c);
      const double fr = src_r - r0;
      const double fc = src_c - c0;
      const int out = r * kImageSide + col;
      const int rr[4] = {int(r0), int(r0), int(r0) + 1, int(r0) + 1};
      const int cc[4] = {int(c0), int(c0) + 1, int(c0), int(c0) + 1};
      const double ww[4] = {(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc};
      for (int t = 0; t < 4; ++t) {
        const bool inside = rr[t] >= 0 && rr[t] < kImageSide && cc[t] >= 0 && cc[t] < kImageSide;
        k.source[out][t] = inside ? rr[t] * kImageSide + cc[t] : -1;
        k.weight[out][t] = inside ? ww[t] : 0.0;
      }
    }
  }
  return k;
}

Transform Transform::permutation(std::vector<int> perm) {
  std::vector<char> seen(perm.size(), 0);
  for (int p : perm) {
    if (p < 0 || p >= static_cast<int>(perm.size()) || seen[p]) throw ContractError("permutation is not a bijection");
    seen[p] = 1;
  }
  if (perm.size() != static_cast<std::size_t>(kMnistInputDim)) throw ShapeError("permutation must cover 784 pixels");
  Transform t;
  t.kind_ = Kind::permutation;
  t.perm_ = std::move(perm);
  return t;
}

Transform Transform::rotation(double angle) {
  if (!std::isfinite(angle)) throw ContractError("rotation angle must be finite");
  Transform t;
  t.kind_ = Kind::rotation;
  t.angle_ = angle;
  t.kernel_ = make_rotation_kernel(angle);
  return t;
}

void Transform::apply(std::span<const double> in, std::span<double> out) const {
  switch (kind_) {
    case Kind::identity:
      std::copy(in.begin(), in.end(), out.begin());
      return;
    case Kind::permutation:
      for (std::size_t i = 0; i < perm_.size(); ++i) out[i] = in[perm_[i]];
      return;
    case Kind::rotation:
      for (std::size_t i = 0; i < kernel_.source.size(); ++i) {
        double v = 0.0;
        for (int t = 0; t < 4; ++t) {
          const int src = kernel_.source[i][t];
          if (src >= 0) v += kernel_.weight[i][t] * in[src];
        }
        out[i] = std::clamp(v, 0.0, 1.0);
      }
      return;
  }
}

Transform Transform::inverse() const {
  switch (kind_) {
    case Kind::identity:
      return identity();
    case Kind::permutation: {
      std::vector<int> inv(perm_.size());
      for (std::size_t i = 0; i < perm_.size(); ++i) inv[perm_[i]] = static_cast<int>(i);
      return permutation(std::move(inv));
    }
    case Kind::rotation:
      return rotation(-angle_);
  }
  return identity();
}

std::vector<double> apply_transform(std::span<const double> image, const Transform& t) {
  if (image.size() != static_cast<std::size_t>(kMnistInputDim)) throw ShapeError("apply_transform: image must have 784 pixels");
  std::vector<double> out(image.size());
  t.apply(image, out);
  return out;
}

std::vector<int> random_permutation(Rng& rng, int n) {
  std::vector<int> p(n);
  std::iota(p.begin(), p.end(), 0);
  rng.shuffle(p.begin(), p.end());
  return p;
}

}  // namespace dercl
