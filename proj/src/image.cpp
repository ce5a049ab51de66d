// SPDX-License-Identifier: Apache-2.0
#include "fopa/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <string>

#include "fopa/error.hpp"

namespace fopa {

namespace {

class HeaderReader {
 public:
  HeaderReader(std::span<const std::uint8_t> bytes, std::size_t start)
      : bytes_(bytes), pos_(start) {}

  std::size_t offset() const { return pos_; }

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const auto c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(c)) {
        ++pos_;
      } else {
        return;
      }
    }
  }

  int read_uint(const char *field) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    long value = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      value = value * 10 + (bytes_[pos_] - '0');
      if (value > 1 << 20) throw ParseError(std::string(field) + " too large", start);
      ++pos_;
    }
    if (pos_ == start) {
      throw ParseError(std::string("expected ") + field, start);
    }
    return static_cast<int>(value);
  }

  // Exactly one whitespace byte separates the header from the raster.
  void expect_single_space() {
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) {
      throw ParseError("expected whitespace before raster data", pos_);
    }
    ++pos_;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_pnm(const Image &image) {
  if (image.channels != 1 && image.channels != 3) {
    throw InputError("netpbm supports 1 or 3 channels, got " +
                     std::to_string(image.channels));
  }
  const std::string header = std::string(image.channels == 3 ? "P6" : "P5") +
                             "\n" + std::to_string(image.width) + " " +
                             std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), image.pixels.begin(), image.pixels.end());
  return out;
}

Image decode_pnm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw ParseError("bad magic, expected P5 or P6", 0);
  }
  const int channels = bytes[1] == '6' ? 3 : 1;
  HeaderReader reader(bytes, 2);
  const int width = reader.read_uint("width");
  const int height = reader.read_uint("height");
  reader.skip_space_and_comments();
  const std::size_t maxval_at = reader.offset();
  const int maxval = reader.read_uint("maxval");
  if (maxval != 255) {
    throw ParseError("unsupported maxval " + std::to_string(maxval), maxval_at);
  }
  reader.expect_single_space();
  const std::size_t raster = reader.offset();
  const std::size_t expected = static_cast<std::size_t>(width) * height * channels;
  if (width <= 0 || height <= 0) {
    throw ParseError("empty image dimensions", raster);
  }
  if (bytes.size() - raster < expected) {
    throw ParseError("truncated raster: need " + std::to_string(expected) +
                         " bytes, have " + std::to_string(bytes.size() - raster),
                     bytes.size());
  }
  if (bytes.size() - raster > expected) {
    throw ParseError("trailing bytes after raster", raster + expected);
  }
  Image img(width, height, channels);
  std::copy(bytes.begin() + raster, bytes.end(), img.pixels.begin());
  return img;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_bytes(const std::filesystem::path &path,
                      std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char *>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

Image read_pnm(const std::filesystem::path &path) {
  return decode_pnm(read_file_bytes(path));
}

void write_pnm(const std::filesystem::path &path, const Image &image) {
  write_file_bytes(path, encode_pnm(image));
}

Image resize_nearest(const Image &image, int width, int height) {
  if (image.width == width && image.height == height) return image;
  if (width <= 0 || height <= 0) throw InputError("resize to an empty image");
  Image out(width, height, image.channels);
  for (int y = 0; y < height; ++y) {
    const int sy = std::min(image.height - 1, (2 * y + 1) * image.height / (2 * height));
    for (int x = 0; x < width; ++x) {
      const int sx = std::min(image.width - 1, (2 * x + 1) * image.width / (2 * width));
      for (int c = 0; c < image.channels; ++c) out.at(x, y, c) = image.at(sx, sy, c);
    }
  }
  return out;
}

std::uint8_t heat_value(double score) {
  const double clamped = std::clamp(score, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::floor(255.0 * clamped + 0.5));
}

Image heatmap_image(std::span<const double> scores, int width, int height) {
  if (scores.size() != static_cast<std::size_t>(width) * height) {
    throw DimensionError("heatmap needs " + std::to_string(width * height) +
                         " scores, got " + std::to_string(scores.size()));
  }
  Image out(width, height, 1);
  for (std::size_t i = 0; i < scores.size(); ++i) out.pixels[i] = heat_value(scores[i]);
  return out;
}

}  // namespace fopa
