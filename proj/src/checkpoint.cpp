#include "gradshield/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "gradshield/dataset.hpp"
#include "gradshield/rng.hpp"
#include "json.hpp"

namespace gradshield {

namespace {

constexpr char kMagic[8] = {'G', 'S', 'H', 'C', 'K', 'P', 'T', '1'};

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(std::span<const std::uint8_t> b, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[at + i]) << (8 * i);
  return v;
}

CheckpointError format_error(const std::string& what) {
  return CheckpointError(CheckpointErrorKind::Format, "checkpoint: " + what);
}

}  // namespace

std::string to_string(CheckpointErrorKind kind) {
  switch (kind) {
    case CheckpointErrorKind::Io: return "io";
    case CheckpointErrorKind::Format: return "format";
    case CheckpointErrorKind::Checksum: return "checksum";
    case CheckpointErrorKind::Version: return "version";
  }
  return "unknown";
}

CheckpointError::CheckpointError(CheckpointErrorKind kind, const std::string& what)
    : std::runtime_error(what), kind_(kind) {}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

std::string spec_to_json(const ModelSpec& spec) {
  nlohmann::json layers = nlohmann::json::array();
  for (const Layer& l : spec.layers())
    layers.push_back({{"kind", to_string(l.kind)}, {"units", l.units}, {"kernel", l.kernel}, {"padding", l.padding}});
  const nlohmann::json j = {
      {"name", spec.name()}, {"input_shape", spec.input_shape()}, {"classes", spec.classes()}, {"layers", layers}};
  return j.dump();
}

namespace {

ModelSpec spec_from(const nlohmann::json& j) {
  std::vector<Layer> layers;
  for (const auto& l : j.at("layers"))
    layers.push_back({parse_layer_kind(l.at("kind").get<std::string>()), l.at("units").get<std::size_t>(),
                      l.at("kernel").get<std::size_t>(), l.at("padding").get<std::size_t>()});
  return ModelSpec(j.at("input_shape").get<Shape>(), j.at("classes").get<std::size_t>(), std::move(layers),
                   j.at("name").get<std::string>());
}

}  // namespace

ModelSpec spec_from_json(const std::string& json) {
  try {
    return spec_from(nlohmann::json::parse(json));
  } catch (const nlohmann::json::exception& e) {
    throw format_error(std::string("bad model spec: ") + e.what());
  }
}

std::vector<std::uint8_t> encode_checkpoint(const ModelSpec& spec, const Parameters& params,
                                            const std::string& config) {
  if (params.size() != spec.parameter_count())
    throw format_error("parameter count " + std::to_string(params.size()) + " does not match spec (" +
                       std::to_string(spec.parameter_count()) + ")");
  const nlohmann::json header = {{"format_version", kCheckpointVersion},
                                 {"spec", nlohmann::json::parse(spec_to_json(spec))},
                                 {"config", config},
                                 {"parameter_count", params.size()}};
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (double v : params.values()) {
    const float f = static_cast<float>(v);
    if (!std::isfinite(f)) throw format_error("parameter not representable as a finite f32");
    const auto bits = std::bit_cast<std::uint32_t>(f);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
  put_u64(out, fnv1a64(out.data(), out.size()));
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 24) throw format_error("file too short");
  if (!std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin())) throw format_error("bad magic");
  const std::size_t body = bytes.size() - 8;
  if (fnv1a64(bytes.data(), body) != get_u64(bytes, body))
    throw CheckpointError(CheckpointErrorKind::Checksum, "checkpoint: checksum mismatch");

  const std::uint64_t header_len = get_u64(bytes, 8);
  if (header_len > body - 16) throw format_error("header length exceeds file");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw format_error(std::string("bad header: ") + e.what());
  }
  if (!header.contains("format_version") || !header["format_version"].is_number_unsigned())
    throw format_error("missing format_version");
  const auto version = header["format_version"].get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw CheckpointError(CheckpointErrorKind::Version,
                          "checkpoint: unsupported format version " + std::to_string(version));

  ModelSpec spec = [&] {
    try {
      return spec_from(header.at("spec"));
    } catch (const nlohmann::json::exception& e) {
      throw format_error(std::string("bad model spec: ") + e.what());
    }
  }();
  std::string config;
  std::size_t count = 0;
  try {
    config = header.at("config").get<std::string>();
    count = header.at("parameter_count").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw format_error(std::string("bad header: ") + e.what());
  }
  if (count != spec.parameter_count()) throw format_error("parameter count does not match spec");
  const std::size_t payload = body - 16 - header_len;
  if (payload != 4 * count) throw format_error("payload size does not match parameter count");

  std::vector<double> values(count);
  const std::size_t start = 16 + header_len;
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits = 0;
    for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(bytes[start + 4 * i + k]) << (8 * k);
    values[i] = std::bit_cast<float>(bits);
  }
  Parameters params(spec, std::move(values));
  return Checkpoint{std::move(spec), std::move(params), std::move(config), version};
}

void save_checkpoint(const ModelSpec& spec, const Parameters& params, const std::string& config,
                     const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(spec, params, config);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointErrorKind::Io, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw CheckpointError(CheckpointErrorKind::Io, "write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError(CheckpointErrorKind::Io, "cannot rename to " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file(path);
  } catch (const std::runtime_error& e) {
    throw CheckpointError(CheckpointErrorKind::Io, e.what());
  }
  return decode_checkpoint(bytes);
}

std::string checkpoint_digest(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return hex64(fnv1a64(bytes.data(), bytes.size()));
}

Parameters round_to_f32(const ModelSpec& spec, const Parameters& params) {
  std::vector<double> values(params.values().begin(), params.values().end());
  for (auto& v : values) v = static_cast<float>(v);
  return Parameters(spec, std::move(values));
}

}  // namespace gradshield
