#include "advobj/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <vector>

#include <png.h>

namespace advobj {

namespace {

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

void write_png(const Tensor& image, const std::filesystem::path& path) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError("write_png: expected [3,H,W], got " + shape_str(image.shape()));
  }
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::vector<std::uint8_t> pixels(h * w * 3);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t c = 0; c < 3; ++c) pixels[(i * w + j) * 3 + c] = to_byte(image.at(c, i, j));

  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(w);
  png.height = static_cast<png_uint_32>(h);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.string().c_str(), 0, pixels.data(), 0, nullptr)) {
    throw std::runtime_error("write_png: " + path.string() + ": " + png.message);
  }
}

Tensor read_png(const std::filesystem::path& path) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.string().c_str())) {
    throw std::runtime_error("read_png: " + path.string() + ": " + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, pixels.data(), 0, nullptr)) {
    throw std::runtime_error("read_png: " + path.string() + ": " + png.message);
  }
  const std::size_t h = png.height, w = png.width;
  Tensor image({3, h, w});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t c = 0; c < 3; ++c)
        image.at(c, i, j) = pixels[(i * w + j) * 3 + c] / 255.0;
  return image;
}

Tensor quantize_8bit(const Tensor& image) {
  Tensor out = image;
  for (double& v : out.data()) v = to_byte(v) / 255.0;
  return out;
}

}  // namespace advobj
