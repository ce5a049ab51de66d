// SPDX-License-Identifier: Apache-2.0
#ifndef FOPA_IMAGE_HPP
#define FOPA_IMAGE_HPP

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace fopa {

/// 8-bit interleaved image with 1 (gray) or 3 (RGB) channels.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 3;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int w, int h, int c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c),
        pixels(static_cast<std::size_t>(w) * h * c, fill) {}

  std::uint8_t &at(int x, int y, int c = 0) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t at(int x, int y, int c = 0) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  bool operator==(const Image &) const = default;
};

// Binary netpbm only: P6 for RGB, P5 for gray, maxval 255.
std::vector<std::uint8_t> encode_pnm(const Image &image);
Image decode_pnm(std::span<const std::uint8_t> bytes);

Image read_pnm(const std::filesystem::path &path);
void write_pnm(const std::filesystem::path &path, const Image &image);

/// Nearest-neighbour resize; identity when the size already matches.
Image resize_nearest(const Image &image, int width, int height);

/// Gray image with pixel = round-half-up(255 * score), scores row-major.
Image heatmap_image(std::span<const double> scores, int width, int height);
std::uint8_t heat_value(double score);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path &path);
void write_file_bytes(const std::filesystem::path &path,
                      std::span<const std::uint8_t> bytes);

}  // namespace fopa

#endif  // FOPA_IMAGE_HPP
