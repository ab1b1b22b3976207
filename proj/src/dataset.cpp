#include "gradshield/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <sstream>

#include "gradshield/rng.hpp"

namespace gradshield {

std::string to_string(Split split) { return split == Split::Train ? "train" : "test"; }

Shape Dataset::input_shape() const { return Shape(inputs.shape().begin() + 1, inputs.shape().end()); }

std::size_t Dataset::input_size() const { return shape_size(input_shape()); }

std::size_t Dataset::classes() const {
  int top = 0;
  for (int l : labels) top = std::max(top, l);
  return static_cast<std::size_t>(top) + 1;
}

Tensor Dataset::example(std::size_t i) const {
  const std::size_t n = input_size();
  if (i >= size()) throw std::out_of_range("example index out of range");
  auto first = inputs.data().begin() + static_cast<std::ptrdiff_t>(i * n);
  return Tensor(input_shape(), std::vector<double>(first, first + static_cast<std::ptrdiff_t>(n)));
}

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  const std::size_t n = input_size();
  Shape shape = input_shape();
  shape.insert(shape.begin(), indices.size());
  std::vector<double> data;
  data.reserve(indices.size() * n);
  for (auto i : indices) {
    if (i >= size()) throw std::out_of_range("example index out of range");
    auto first = inputs.data().begin() + static_cast<std::ptrdiff_t>(i * n);
    data.insert(data.end(), first, first + static_cast<std::ptrdiff_t>(n));
  }
  return Tensor(std::move(shape), std::move(data));
}

std::vector<int> Dataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  return Dataset{batch(indices), batch_labels(indices), split, provenance};
}

void Dataset::validate() const {
  if (inputs.rank() < 2 || inputs.shape()[0] != labels.size())
    throw ShapeError("dataset has " + std::to_string(labels.size()) + " labels for inputs of shape " +
                     shape_string(inputs.shape()));
  for (double v : inputs.data())
    if (!(v >= 0.0 && v <= 1.0)) throw std::domain_error("dataset input outside [0,1]");
  for (int l : labels)
    if (l < 0) throw std::domain_error("negative label");
}

std::pair<double, double> moons_to_unit(double x, double y) {
  // Canonical extent is x in [-1, 2], y in [-0.5, 1]; one scale keeps
  // distances isotropic.
  constexpr double scale = 1.0 / 3.2;
  return {(x - 0.5) * scale + 0.5, (y - 0.25) * scale + 0.5};
}

Dataset gen_two_moons(std::size_t n, double noise, std::uint64_t seed, Split split) {
  if (n < 2) throw std::invalid_argument("gen_two_moons: n must be at least 2");
  if (noise < 0) throw std::invalid_argument("gen_two_moons: noise must be non-negative");
  Rng rng(derive_seed(seed, "two_moons"));
  const std::size_t n_outer = n / 2;
  const std::size_t n_inner = n - n_outer;
  std::vector<std::pair<std::array<double, 2>, int>> points;
  points.reserve(n);
  auto arc_t = [](std::size_t i, std::size_t count) {
    return count == 1 ? 0.0 : std::numbers::pi * static_cast<double>(i) / static_cast<double>(count - 1);
  };
  for (std::size_t i = 0; i < n_outer; ++i) {
    const double t = arc_t(i, n_outer);
    points.push_back({{std::cos(t), std::sin(t)}, 0});
  }
  for (std::size_t i = 0; i < n_inner; ++i) {
    const double t = arc_t(i, n_inner);
    points.push_back({{1.0 - std::cos(t), 0.5 - std::sin(t)}, 1});
  }
  for (auto& [p, label] : points) {
    if (noise > 0) {
      p[0] += noise * rng.normal();
      p[1] += noise * rng.normal();
    }
    auto [u, v] = moons_to_unit(p[0], p[1]);
    p = {std::clamp(u, 0.0, 1.0), std::clamp(v, 0.0, 1.0)};
  }
  for (std::size_t i = n; i > 1; --i) std::swap(points[i - 1], points[rng.below(i)]);

  std::vector<double> data;
  std::vector<int> labels;
  for (const auto& [p, label] : points) {
    data.push_back(p[0]);
    data.push_back(p[1]);
    labels.push_back(label);
  }
  std::ostringstream prov;
  prov << "two_moons(n=" << n << ",noise=" << noise << ",seed=" << seed << ")";
  Dataset d{Tensor({n, 2}, std::move(data)), std::move(labels), split, prov.str()};
  d.validate();
  return d;
}

// ---------------------------------------------------------------------------
// IDX

std::string to_string(IdxErrorKind kind) {
  switch (kind) {
    case IdxErrorKind::BadMagic: return "bad_magic";
    case IdxErrorKind::Truncated: return "truncated";
    case IdxErrorKind::DimensionOverflow: return "dimension_overflow";
    case IdxErrorKind::TrailingBytes: return "trailing_bytes";
  }
  return "?";
}

IdxError::IdxError(IdxErrorKind kind, std::size_t offset, const std::string& what)
    : std::runtime_error("idx " + to_string(kind) + " at byte " + std::to_string(offset) + ": " + what),
      kind_(kind),
      offset_(offset) {}

namespace {

std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  if (bytes.size() < offset + 4)
    throw IdxError(IdxErrorKind::Truncated, bytes.size(), "header ends inside a 32-bit field");
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

}  // namespace

IdxContent parse_idx(std::span<const std::uint8_t> bytes) {
  const std::uint32_t magic = read_be32(bytes, 0);
  std::size_t rank;
  if (magic == 0x00000803u)
    rank = 3;
  else if (magic == 0x00000801u)
    rank = 1;
  else
    throw IdxError(IdxErrorKind::BadMagic, 0, "unsupported magic number");

  std::vector<std::size_t> dims;
  std::uint64_t total = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t at = 4 + 4 * i;
    const std::uint32_t d = read_be32(bytes, at);
    std::uint64_t next;
    if (__builtin_mul_overflow(total, std::uint64_t{d}, &next) || next > (std::uint64_t{1} << 40))
      throw IdxError(IdxErrorKind::DimensionOverflow, at, "payload size overflows");
    total = next;
    dims.push_back(d);
  }
  const std::size_t header = 4 + 4 * rank;
  const std::size_t end = header + static_cast<std::size_t>(total);
  if (bytes.size() < end)
    throw IdxError(IdxErrorKind::Truncated, bytes.size(),
                   "expected " + std::to_string(end) + " bytes, got " + std::to_string(bytes.size()));
  if (bytes.size() > end)
    throw IdxError(IdxErrorKind::TrailingBytes, end,
                   std::to_string(bytes.size() - end) + " bytes after the payload");
  const auto payload = bytes.subspan(header, static_cast<std::size_t>(total));
  if (rank == 1) {
    IdxLabels out;
    out.labels.assign(payload.begin(), payload.end());
    return out;
  }
  IdxImages out;
  out.count = dims[0];
  out.rows = dims[1];
  out.cols = dims[2];
  out.pixels.reserve(payload.size());
  for (auto b : payload) out.pixels.push_back(static_cast<double>(b) / 255.0);
  return out;
}

std::vector<std::uint8_t> encode_idx_images(std::uint32_t count, std::uint32_t rows, std::uint32_t cols,
                                            std::span<const std::uint8_t> pixels) {
  if (pixels.size() != std::size_t{count} * rows * cols)
    throw std::invalid_argument("encode_idx_images: pixel count does not match dimensions");
  std::vector<std::uint8_t> out;
  write_be32(out, 0x00000803u);
  write_be32(out, count);
  write_be32(out, rows);
  write_be32(out, cols);
  out.insert(out.end(), pixels.begin(), pixels.end());
  return out;
}

std::vector<std::uint8_t> encode_idx_labels(std::span<const std::uint8_t> labels) {
  std::vector<std::uint8_t> out;
  write_be32(out, 0x00000801u);
  write_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.insert(out.end(), labels.begin(), labels.end());
  return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

Dataset load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels, Split split,
                         std::size_t limit) {
  const auto image_bytes = read_file(images);
  const auto label_bytes = read_file(labels);
  auto image_content = parse_idx(image_bytes);
  auto label_content = parse_idx(label_bytes);
  auto* img = std::get_if<IdxImages>(&image_content);
  auto* lab = std::get_if<IdxLabels>(&label_content);
  if (!img) throw std::runtime_error(images.string() + " is not an IDX image file");
  if (!lab) throw std::runtime_error(labels.string() + " is not an IDX label file");
  if (img->count != lab->labels.size()) throw std::runtime_error("IDX image and label counts differ");
  std::size_t n = img->count;
  if (limit > 0) n = std::min(n, limit);
  if (n == 0 || img->rows == 0 || img->cols == 0) throw std::runtime_error("IDX dataset is empty");
  const std::size_t per = img->rows * img->cols;
  std::vector<double> data(img->pixels.begin(), img->pixels.begin() + static_cast<std::ptrdiff_t>(n * per));
  std::vector<int> ls(lab->labels.begin(), lab->labels.begin() + static_cast<std::ptrdiff_t>(n));
  const std::uint64_t digest = fnv1a64(image_bytes.data(), image_bytes.size(),
                                       fnv1a64(label_bytes.data(), label_bytes.size()));
  std::ostringstream prov;
  prov << "idx(" << images.filename().string() << "," << labels.filename().string() << ",fnv1a64=" << std::hex
       << digest << ")";
  Dataset d{Tensor({n, 1, img->rows, img->cols}, std::move(data)), std::move(ls), split, prov.str()};
  d.validate();
  return d;
}

}  // namespace gradshield
