#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace sfe::io {

using Bytes = std::vector<std::uint8_t>;

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;
};

/// One byte per pixel.
struct LabelImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> labels;
};

/// Quantizes [0, 1] values (H*W*3) to 8 bits with rounding; values are clamped.
RgbImage to_rgb8(std::span<const double> rgb, int width, int height);
std::vector<double> to_unit(const RgbImage& image);

Bytes encode_png(const RgbImage& image);
/// Paletted PNG whose pixel indices are the labels.
Bytes encode_label_png(const LabelImage& image);
/// Any 8/16-bit PNG, converted to RGB.
RgbImage decode_png(std::span<const std::uint8_t> data);
/// Paletted or 8-bit grayscale PNG; pixel indices are returned unchanged.
LabelImage decode_label_png(std::span<const std::uint8_t> data);

/// Fixed 256-entry palette used for label images.
const std::vector<std::uint8_t>& label_palette();

Bytes read_file(const std::filesystem::path& path);
/// Writes through a temporary file and renames it into place.
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace sfe::io
