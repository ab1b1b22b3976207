#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "gradshield/tensor.hpp"

namespace gradshield {

enum class Split { Train, Test };
std::string to_string(Split split);

// Labeled inputs scaled to [0,1]. `inputs` is [n, input...].
struct Dataset {
  Tensor inputs;
  std::vector<int> labels;
  Split split = Split::Train;
  std::string provenance;

  [[nodiscard]] std::size_t size() const { return labels.size(); }
  [[nodiscard]] Shape input_shape() const;
  [[nodiscard]] std::size_t input_size() const;
  [[nodiscard]] std::size_t classes() const;
  [[nodiscard]] Tensor example(std::size_t i) const;
  [[nodiscard]] Tensor batch(std::span<const std::size_t> indices) const;
  [[nodiscard]] std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
  [[nodiscard]] Dataset subset(std::span<const std::size_t> indices) const;

  // Throws if lengths disagree or any input leaves [0,1].
  void validate() const;
};

// Two interleaved half circles (label 0 outer arc, label 1 inner arc) with
// Gaussian noise, mapped isotropically into the unit square and clamped.
Dataset gen_two_moons(std::size_t n, double noise, std::uint64_t seed, Split split = Split::Train);

// The affine map from canonical moon coordinates into [0,1]^2.
std::pair<double, double> moons_to_unit(double x, double y);

enum class IdxErrorKind { BadMagic, Truncated, DimensionOverflow, TrailingBytes };
std::string to_string(IdxErrorKind kind);

class IdxError : public std::runtime_error {
 public:
  IdxError(IdxErrorKind kind, std::size_t offset, const std::string& what);
  [[nodiscard]] IdxErrorKind kind() const { return kind_; }
  [[nodiscard]] std::size_t offset() const { return offset_; }

 private:
  IdxErrorKind kind_;
  std::size_t offset_;
};

// Unsigned-byte rank-3 image stack (magic 0x00000803), pixels scaled by 1/255.
struct IdxImages {
  std::size_t count = 0, rows = 0, cols = 0;
  std::vector<double> pixels;
};

// Unsigned-byte rank-1 label vector (magic 0x00000801).
struct IdxLabels {
  std::vector<int> labels;
};

using IdxContent = std::variant<IdxImages, IdxLabels>;

IdxContent parse_idx(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> encode_idx_images(std::uint32_t count, std::uint32_t rows, std::uint32_t cols,
                                            std::span<const std::uint8_t> pixels);
std::vector<std::uint8_t> encode_idx_labels(std::span<const std::uint8_t> labels);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

// Images become [n, 1, rows, cols]. `limit` > 0 keeps only the first examples.
Dataset load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels, Split split,
                         std::size_t limit = 0);

}  // namespace gradshield
