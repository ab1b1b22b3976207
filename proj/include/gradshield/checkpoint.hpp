#pragma once

// Checkpoint file layout, all integers little-endian:
//
//   "GSHCKPT1"            8-byte magic
//   u64 header length     followed by that many bytes of JSON
//                         {format_version, spec, config, parameter_count}
//   f32 x parameter_count parameter payload
//   u64 checksum          FNV-1a 64 over every preceding byte

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gradshield/model.hpp"

namespace gradshield {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointErrorKind { Io, Format, Checksum, Version };
std::string to_string(CheckpointErrorKind kind);

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& what);
  [[nodiscard]] CheckpointErrorKind kind() const { return kind_; }

 private:
  CheckpointErrorKind kind_;
};

struct Checkpoint {
  ModelSpec spec;
  Parameters parameters;  // values exactly representable as f32
  std::string config;     // opaque config echo
  std::uint32_t version = kCheckpointVersion;
};

std::string hex64(std::uint64_t value);

std::string spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const std::string& json);

std::vector<std::uint8_t> encode_checkpoint(const ModelSpec& spec, const Parameters& params,
                                            const std::string& config);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

// Writes through a temporary file in the same directory, then renames.
void save_checkpoint(const ModelSpec& spec, const Parameters& params, const std::string& config,
                     const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Hex FNV-1a 64 of the file bytes.
std::string checkpoint_digest(const std::filesystem::path& path);

// Parameters rounded to the nearest f32, as a save/load round trip would.
Parameters round_to_f32(const ModelSpec& spec, const Parameters& params);

}  // namespace gradshield
