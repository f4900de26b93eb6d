#pragma once

#include <png.h>

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "gseg/error.hpp"

namespace gseg {

/// Interleaved 8-bit raster (1 = gray, 3 = RGB), row-major.
struct ImageU8 {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

/// Float raster in [0,1], interleaved like ImageU8.
struct ImageF {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> pixels;

  float& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  float at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

/// 2-D grid of class indices: 0 background, 1 gland, 2 border (optional).
struct LabelMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> labels;

  std::uint8_t& at(int y, int x) {
    return labels[static_cast<std::size_t>(y) * width + x];
  }
  std::uint8_t at(int y, int x) const {
    return labels[static_cast<std::size_t>(y) * width + x];
  }
};

inline LabelMask make_mask(int width, int height, std::uint8_t fill = 0) {
  return LabelMask{width, height,
                   std::vector<std::uint8_t>(
                       static_cast<std::size_t>(width) * height, fill)};
}

/// Intensity normalization to [0,1] by the max representable value.
inline ImageF to_float(const ImageU8& im) {
  ImageF out{im.width, im.height, im.channels, {}};
  out.pixels.resize(im.pixels.size());
  for (std::size_t i = 0; i < im.pixels.size(); ++i)
    out.pixels[i] = static_cast<float>(im.pixels[i]) / 255.0f;
  return out;
}

inline ImageU8 to_u8(const ImageF& im) {
  ImageU8 out{im.width, im.height, im.channels, {}};
  out.pixels.resize(im.pixels.size());
  for (std::size_t i = 0; i < im.pixels.size(); ++i) {
    float v = im.pixels[i] * 255.0f + 0.5f;
    out.pixels[i] = static_cast<std::uint8_t>(v < 0 ? 0 : (v > 255 ? 255 : v));
  }
  return out;
}

// --- PNG I/O (libpng simplified API) ---------------------------------------

inline ImageU8 read_png(const std::string& path, int want_channels) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw IoError("cannot read PNG '" + path + "': " + image.message);
  }
  image.format = want_channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  ImageU8 out;
  out.width = static_cast<int>(image.width);
  out.height = static_cast<int>(image.height);
  out.channels = want_channels;
  out.pixels.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError("failed decoding PNG '" + path + "': " + image.message);
  }
  return out;
}

inline void write_png(const std::string& path, const ImageU8& im) {
  if (im.channels != 1 && im.channels != 3) {
    throw ValueError("write_png: only 1- or 3-channel images supported");
  }
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(im.width);
  image.height = static_cast<png_uint_32>(im.height);
  image.format = im.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, im.pixels.data(), 0,
                               nullptr)) {
    throw IoError("cannot write PNG '" + path + "': " + image.message);
  }
}

/// Masks are single-channel rasters whose pixel values ARE class indices.
inline LabelMask read_mask_png(const std::string& path) {
  ImageU8 im = read_png(path, 1);
  return LabelMask{im.width, im.height, std::move(im.pixels)};
}

inline void write_mask_png(const std::string& path, const LabelMask& mask) {
  ImageU8 im{mask.width, mask.height, 1, mask.labels};
  write_png(path, im);
}

}  // namespace gseg
