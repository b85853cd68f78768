#pragma once

// File formats: Middlebury .flo, 8-bit PNG, flow colorwheel images and
// binary field checkpoints.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gflow/dynamics.hpp"
#include "gflow/flow.hpp"
#include "gflow/image.hpp"

namespace gflow {

using Bytes = std::vector<std::uint8_t>;

/// The float 202021.25, bytes "PIEH" in little-endian order.
inline constexpr float kFloMagic = 202021.25f;
/// Stored for invalid pixels; any |u| or |v| >= this reads back as invalid.
inline constexpr float kFloUnknown = 1e9f;

Bytes encode_flo(const FlowField& field);
FlowField decode_flo(std::span<const std::uint8_t> bytes);
void write_flo(const FlowField& field, const std::filesystem::path& path);
FlowField read_flo(const std::filesystem::path& path);

/// round(v * 255) with halves rounded up. Values must lie in [0, 1].
std::uint8_t quantize_channel(double v);

Bytes encode_png(const Image& image);
Image decode_png(std::span<const std::uint8_t> bytes);
void write_png(const Image& image, const std::filesystem::path& path);
Image read_png(const std::filesystem::path& path);

/// Copy with every channel clamped to [0, 1].
Image clamp01(Image image);

/// Floor of the automatic colorwheel scale (pixels), so round-off flow stays white.
inline constexpr double kMinColorScale = 1e-6;

/// Middlebury colorwheel rendering. Magnitudes are divided by
/// `max_magnitude` (default: 99th percentile of valid magnitudes, at least
/// kMinColorScale); invalid pixels are white.
Image flow_to_color(const FlowField& field, std::optional<double> max_magnitude = std::nullopt);

/// The 55 colorwheel entries in [0, 1], starting at red.
const std::vector<Vec3>& colorwheel();

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  DynamicField field;
  /// Echo of the configuration that produced the field.
  std::string config;
  std::uint64_t seed = 0;
};

Bytes encode_checkpoint(const Checkpoint& ckpt);
/// Throws FormatError on bad magic, unknown version, truncation or checksum mismatch.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Bytes read_file(const std::filesystem::path& path);
/// Writes to a sibling temp file then renames into place.
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace gflow
