#pragma once

// 8-bit PNG read/write through libpng's simplified API, plus conversions to
// and from [0, 1] float tensors.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vitmix/errors.hpp"
#include "vitmix/segmentation.hpp"
#include "vitmix/tensor.hpp"

namespace vitmix {

struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;  // 1 (gray) or 3 (RGB)
  std::vector<std::uint8_t> pixels;
};

inline Image8 read_png(const std::filesystem::path& path, std::size_t channels) {
  if (channels != 1 && channels != 3) throw ArgumentError("read_png: channels must be 1 or 3");
  if (!std::filesystem::exists(path)) throw IngestionError("missing file '" + path.string() + "'");
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str()))
    throw FormatError("cannot decode PNG '" + path.string() + "': " + img.message);
  img.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Image8 out;
  out.width = img.width;
  out.height = img.height;
  out.channels = channels;
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw FormatError("cannot decode PNG '" + path.string() + "': " + msg);
  }
  return out;
}

inline void write_png(const std::filesystem::path& path, const Image8& image) {
  if (image.channels != 1 && image.channels != 3) throw ArgumentError("write_png: channels must be 1 or 3");
  if (image.pixels.size() != image.width * image.height * image.channels)
    throw DimensionError("write_png: pixel buffer does not match image size");
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, image.pixels.data(), 0, nullptr))
    throw IoError("cannot write PNG '" + path.string() + "': " + img.message);
}

// [H x W x 3] tensor with values in [0, 1].
inline Tensor image_to_tensor(const Image8& image) {
  if (image.channels != 3) throw ArgumentError("image_to_tensor expects an RGB image");
  Tensor t({image.height, image.width, 3});
  for (std::size_t i = 0; i < image.pixels.size(); ++i) t[i] = image.pixels[i] / 255.0;
  return t;
}

inline Image8 tensor_to_image(const Tensor& t) {
  if (t.rank() != 3 || t.dim(2) != 3) throw DimensionError("tensor_to_image expects [H x W x 3]");
  Image8 img{t.dim(1), t.dim(0), 3, std::vector<std::uint8_t>(t.size())};
  for (std::size_t i = 0; i < t.size(); ++i)
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(t[i], 0.0, 1.0) * 255.0));
  return img;
}

// Nonzero gray = foreground.
inline BinaryMask image_to_mask(const Image8& image) {
  if (image.channels != 1) throw ArgumentError("image_to_mask expects a grayscale image");
  BinaryMask m(image.height, image.width);
  for (std::size_t i = 0; i < image.pixels.size(); ++i) m.set(i, image.pixels[i] != 0);
  return m;
}

inline Image8 mask_to_image(const BinaryMask& m) {
  Image8 img{m.width(), m.height(), 1, std::vector<std::uint8_t>(m.size())};
  for (std::size_t i = 0; i < m.size(); ++i) img.pixels[i] = m[i] ? 255 : 0;
  return img;
}

// Bilinear per-channel resize of an [H x W x C] tensor.
inline Tensor resize_image(const Tensor& image, std::size_t out_h, std::size_t out_w) {
  require_rank(image, 3, "resize_image");
  if (image.dim(0) == out_h && image.dim(1) == out_w) return image;
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  Tensor out({out_h, out_w, c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    Tensor plane({h, w});
    for (std::size_t i = 0; i < h * w; ++i) plane[i] = image[i * c + ch];
    const Tensor resized = bilinear_upsample(plane, out_h, out_w);
    for (std::size_t i = 0; i < out_h * out_w; ++i) out[i * c + ch] = resized[i];
  }
  return out;
}

// Nearest-neighbour resize (pixel centres) of a mask.
inline BinaryMask resize_mask(const BinaryMask& m, std::size_t out_h, std::size_t out_w) {
  if (m.height() == out_h && m.width() == out_w) return m;
  BinaryMask out(out_h, out_w);
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t x = 0; x < out_w; ++x) {
      const std::size_t sy = std::min(m.height() - 1, (2 * y + 1) * m.height() / (2 * out_h));
      const std::size_t sx = std::min(m.width() - 1, (2 * x + 1) * m.width() / (2 * out_w));
      out.set(y, x, m.at(sy, sx));
    }
  return out;
}

}  // namespace vitmix
