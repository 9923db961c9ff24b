#pragma once

#include <png.h>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "vila/error.hpp"
#include "vila/io.hpp"

namespace vila {

/// 8-bit interleaved raster, rows top to bottom, pixels left to right.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(w * h * c, fill) {}

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }
  bool operator==(const Image&) const = default;
};

/// Binary PGM (1 channel) or PPM (3 channels).
inline std::string encode_pnm(const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw InvalidArgument("pnm: only 1 or 3 channels supported");
  std::string out = (img.channels == 1 ? "P5\n" : "P6\n") + std::to_string(img.width) + " " +
                    std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  return out;
}

inline Image decode_pnm(const std::string& bytes, const std::string& origin) {
  std::istringstream in(bytes);
  std::string magic;
  in >> magic;
  if (magic != "P5" && magic != "P6") throw FormatError(origin + ": not a binary PGM/PPM file");
  auto next_int = [&]() {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string comment;
      std::getline(in, comment);
      in >> std::ws;
    }
    long v = -1;
    in >> v;
    if (!in || v <= 0) throw FormatError(origin + ": malformed header");
    return static_cast<std::size_t>(v);
  };
  const std::size_t w = next_int(), h = next_int(), maxval = next_int();
  if (maxval != 255) throw FormatError(origin + ": only 8-bit rasters are supported");
  in.get();  // single whitespace before the raster
  Image img(w, h, magic == "P5" ? 1 : 3);
  const auto offset = static_cast<std::size_t>(in.tellg());
  if (bytes.size() - offset < img.pixels.size()) throw FormatError(origin + ": truncated raster");
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(offset), img.pixels.size(), img.pixels.begin());
  return img;
}

inline Image read_png(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.string().c_str())) {
    throw FormatError(path.string() + ": " + png.message);
  }
  const bool gray = (png.format & PNG_FORMAT_FLAG_COLOR) == 0;
  png.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Image img(png.width, png.height, gray ? 1 : 3);
  if (!png_image_finish_read(&png, nullptr, img.pixels.data(), 0, nullptr)) {
    png_image_free(&png);
    throw FormatError(path.string() + ": " + png.message);
  }
  return img;
}

/// Loads .ppm/.pgm/.pnm rasters or PNG (detected by signature).
inline Image read_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error("image file not found: " + path.string());
  const std::string bytes = io::read_file(path);
  if (bytes.size() >= 8 && bytes.compare(0, 4, "\x89PNG") == 0) return read_png(path);
  return decode_pnm(bytes, path.string());
}

inline void write_image(const Image& img, const std::filesystem::path& path) {
  io::atomic_write(path, encode_pnm(img));
}

/// Splits an H×W×C raster into non-overlapping patches, row-major patch order.
/// Each output row is one patch flattened as (row, column, channel).
template <typename T>
std::vector<T> patchify(std::span<const T> pixels, std::size_t height, std::size_t width, std::size_t channels,
                        std::size_t patch) {
  if (patch == 0 || height % patch != 0 || width % patch != 0) {
    throw ShapeError("patchify: " + std::to_string(height) + "x" + std::to_string(width) +
                     " image not divisible into " + std::to_string(patch) + "-pixel patches");
  }
  if (pixels.size() != height * width * channels) throw ShapeError("patchify: pixel buffer size mismatch");
  const std::size_t per_row = width / patch, per_col = height / patch;
  const std::size_t patch_len = patch * patch * channels;
  std::vector<T> out(per_row * per_col * patch_len);
  for (std::size_t py = 0; py < per_col; ++py)
    for (std::size_t px = 0; px < per_row; ++px) {
      T* dst = out.data() + (py * per_row + px) * patch_len;
      for (std::size_t y = 0; y < patch; ++y)
        for (std::size_t x = 0; x < patch; ++x)
          for (std::size_t c = 0; c < channels; ++c)
            *dst++ = pixels[((py * patch + y) * width + (px * patch + x)) * channels + c];
    }
  return out;
}

/// Pixel values scaled to [-1, 1] and patchified.
template <typename T>
std::vector<T> image_patches(const Image& img, std::size_t patch) {
  std::vector<T> px(img.pixels.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<T>(img.pixels[i]) / T(127.5) - T(1);
  return patchify<T>(px, img.height, img.width, img.channels, patch);
}

inline Image crop(const Image& img, std::size_t x0, std::size_t y0, std::size_t size) {
  if (x0 + size > img.width || y0 + size > img.height) throw ShapeError("crop: window outside image");
  Image out(size, size, img.channels);
  for (std::size_t y = 0; y < size; ++y)
    std::copy_n(img.pixels.begin() + static_cast<std::ptrdiff_t>(((y0 + y) * img.width + x0) * img.channels),
                size * img.channels, out.pixels.begin() + static_cast<std::ptrdiff_t>(y * size * img.channels));
  return out;
}

inline Image flip_horizontal(const Image& img) {
  Image out(img.width, img.height, img.channels);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) out.at(img.width - 1 - x, y, c) = img.at(x, y, c);
  return out;
}

}  // namespace vila
