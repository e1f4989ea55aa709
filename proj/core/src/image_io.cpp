#include "sfe/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstring>
#include <fstream>
#include <iterator>

#include "sfe/errors.hpp"

namespace sfe::io {

namespace {

void append_bytes(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<Bytes*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + length);
}

void flush_nothing(png_structp) {}

struct ReadCursor {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t pos;
};

void read_bytes(png_structp png, png_bytep out, png_size_t length) {
  auto* cur = static_cast<ReadCursor*>(png_get_io_ptr(png));
  if (cur->pos + length > cur->size) png_error(png, "truncated PNG data");
  std::memcpy(out, cur->data + cur->pos, length);
  cur->pos += length;
}

void warn_silently(png_structp, png_const_charp) {}

// Writes an 8-bit image. Rows must stay alive for the call.
bool write_png(Bytes& out, int width, int height, int color_type, const std::vector<png_bytep>& rows,
               const std::vector<png_color>* palette) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, warn_silently);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    return false;
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_set_write_fn(png, &out, append_bytes, flush_nothing);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  if (palette) png_set_PLTE(png, info, palette->data(), static_cast<int>(palette->size()));
  png_write_info(png, info);
  png_write_image(png, const_cast<png_bytepp>(rows.data()));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

enum class ReadMode { kRgb, kIndex };

struct ReadResult {
  bool ok = false;
  bool bad_format = false;
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;
};

// Two passes: the header first (to size the buffer outside the setjmp scope),
// then the pixel rows.
bool read_png(std::span<const std::uint8_t> data, ReadMode mode, ReadResult& result) {
  if (data.size() < 8 || png_sig_cmp(data.data(), 0, 8) != 0) return false;
  ReadCursor cursor{data.data(), data.size(), 0};
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, warn_silently);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    return false;
  }
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    return false;
  }
  png_set_read_fn(png, &cursor, read_bytes);
  png_read_info(png, info);
  const png_uint_32 width = png_get_image_width(png, info);
  const png_uint_32 height = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (mode == ReadMode::kIndex) {
    if ((color != PNG_COLOR_TYPE_PALETTE && color != PNG_COLOR_TYPE_GRAY) || depth > 8) {
      result.bad_format = true;
      png_destroy_read_struct(&png, &info, nullptr);
      return false;
    }
    if (depth < 8) png_set_packing(png);
  } else {
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  }
  png_read_update_info(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  const std::size_t channels = mode == ReadMode::kIndex ? 1 : 3;
  if (rowbytes != width * channels) {
    result.bad_format = true;
    png_destroy_read_struct(&png, &info, nullptr);
    return false;
  }
  result.pixels.resize(rowbytes * height);
  rows.resize(height);
  for (png_uint_32 y = 0; y < height; ++y) rows[y] = result.pixels.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  result.width = static_cast<int>(width);
  result.height = static_cast<int>(height);
  result.ok = true;
  return true;
}

}  // namespace

RgbImage to_rgb8(std::span<const double> rgb, int width, int height) {
  if (width < 0 || height < 0 || rgb.size() != static_cast<std::size_t>(width) * height * 3) {
    throw ShapeError("rgb buffer does not match the image size");
  }
  RgbImage img{width, height, std::vector<std::uint8_t>(rgb.size())};
  for (std::size_t i = 0; i < rgb.size(); ++i) {
    const double v = std::isfinite(rgb[i]) ? std::clamp(rgb[i], 0.0, 1.0) : 0.0;
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return img;
}

std::vector<double> to_unit(const RgbImage& image) {
  std::vector<double> out(image.pixels.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = image.pixels[i] / 255.0;
  return out;
}

const std::vector<std::uint8_t>& label_palette() {
  static const std::vector<std::uint8_t> palette = [] {
    // First entries are distinct, readable colors; the rest are a hash ramp.
    const std::uint8_t base[][3] = {{0, 0, 0},       {230, 180, 150}, {90, 50, 20},   {40, 90, 200},
                                    {200, 40, 40},   {40, 160, 60},   {240, 220, 60}, {150, 60, 200},
                                    {60, 200, 200},  {250, 130, 30},  {120, 120, 120}, {255, 255, 255},
                                    {180, 100, 140}, {100, 140, 60},  {30, 60, 100},  {200, 200, 140},
                                    {140, 80, 40},   {80, 40, 100},   {20, 120, 120}};
    std::vector<std::uint8_t> p(256 * 3);
    for (int i = 0; i < 256; ++i) {
      for (int c = 0; c < 3; ++c) {
        p[static_cast<std::size_t>(i * 3 + c)] =
            i < 19 ? base[i][c] : static_cast<std::uint8_t>((i * (37 + 58 * c)) % 256);
      }
    }
    return p;
  }();
  return palette;
}

Bytes encode_png(const RgbImage& image) {
  if (image.width < 1 || image.height < 1) throw ShapeError("cannot encode an empty image");
  if (image.pixels.size() != static_cast<std::size_t>(image.width) * image.height * 3) {
    throw ShapeError("pixel buffer does not match the image size");
  }
  std::vector<png_bytep> rows(static_cast<std::size_t>(image.height));
  for (int y = 0; y < image.height; ++y) {
    rows[static_cast<std::size_t>(y)] = const_cast<png_bytep>(image.pixels.data()) + static_cast<std::size_t>(y) * image.width * 3;
  }
  Bytes out;
  if (!write_png(out, image.width, image.height, PNG_COLOR_TYPE_RGB, rows, nullptr)) {
    throw IoError("PNG encoding failed");
  }
  return out;
}

Bytes encode_label_png(const LabelImage& image) {
  if (image.width < 1 || image.height < 1) throw ShapeError("cannot encode an empty image");
  if (image.labels.size() != static_cast<std::size_t>(image.width) * image.height) {
    throw ShapeError("label buffer does not match the image size");
  }
  const int max_label = *std::max_element(image.labels.begin(), image.labels.end());
  std::vector<png_color> palette(static_cast<std::size_t>(max_label) + 1);
  const auto& p = label_palette();
  for (std::size_t i = 0; i < palette.size(); ++i) palette[i] = {p[i * 3], p[i * 3 + 1], p[i * 3 + 2]};
  std::vector<png_bytep> rows(static_cast<std::size_t>(image.height));
  for (int y = 0; y < image.height; ++y) {
    rows[static_cast<std::size_t>(y)] = const_cast<png_bytep>(image.labels.data()) + static_cast<std::size_t>(y) * image.width;
  }
  Bytes out;
  if (!write_png(out, image.width, image.height, PNG_COLOR_TYPE_PALETTE, rows, &palette)) {
    throw IoError("PNG encoding failed");
  }
  return out;
}

RgbImage decode_png(std::span<const std::uint8_t> data) {
  ReadResult r;
  if (!read_png(data, ReadMode::kRgb, r)) throw IoError(r.bad_format ? "unsupported PNG format" : "invalid PNG data");
  return {r.width, r.height, std::move(r.pixels)};
}

LabelImage decode_label_png(std::span<const std::uint8_t> data) {
  ReadResult r;
  if (!read_png(data, ReadMode::kIndex, r)) {
    throw IoError(r.bad_format ? "label PNG must be paletted or 8-bit grayscale" : "invalid PNG data");
  }
  return {r.width, r.height, std::move(r.pixels)};
}

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  Bytes data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("cannot read " + path.string());
  return data;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (!out) throw IoError("cannot write " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace sfe::io
