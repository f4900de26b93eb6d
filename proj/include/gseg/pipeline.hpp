#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gseg/image.hpp"
#include "gseg/random.hpp"
#include "gseg/tensor.hpp"

namespace gseg {

// ---------------------------------------------------------------------------
// resizing
// ---------------------------------------------------------------------------

namespace detail {

inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n;
  int m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - 1 - m;
}

}  // namespace detail

/// Bilinear resize of a square image to side x side (pixel-center mapping,
/// clamped border sampling).
inline ImageF resize_image_bilinear(const ImageF& im, int side) {
  if (im.width != im.height) {
    throw ValueError("resize_image_bilinear: input must be square, got " +
                     std::to_string(im.width) + "x" +
                     std::to_string(im.height));
  }
  if (im.width == side) return im;
  ImageF out{side, side, im.channels, {}};
  out.pixels.resize(static_cast<std::size_t>(side) * side * im.channels);
  const double scale = static_cast<double>(im.width) / side;
  for (int y = 0; y < side; ++y) {
    const double sy = (y + 0.5) * scale - 0.5;
    const int y0 = static_cast<int>(std::floor(sy));
    const double fy = sy - y0;
    const int ya = std::clamp(y0, 0, im.height - 1);
    const int yb = std::clamp(y0 + 1, 0, im.height - 1);
    for (int x = 0; x < side; ++x) {
      const double sx = (x + 0.5) * scale - 0.5;
      const int x0 = static_cast<int>(std::floor(sx));
      const double fx = sx - x0;
      const int xa = std::clamp(x0, 0, im.width - 1);
      const int xb = std::clamp(x0 + 1, 0, im.width - 1);
      for (int c = 0; c < im.channels; ++c) {
        const double v =
            (1 - fy) * ((1 - fx) * im.at(ya, xa, c) + fx * im.at(ya, xb, c)) +
            fy * ((1 - fx) * im.at(yb, xa, c) + fx * im.at(yb, xb, c));
        out.at(y, x, c) = static_cast<float>(v);
      }
    }
  }
  return out;
}

/// Nearest-neighbor resize of a square label mask; labels stay in the input
/// label set and equal-size resizing is the identity.
inline LabelMask resize_mask_nearest(const LabelMask& mask, int side) {
  if (mask.width != mask.height) {
    throw ValueError("resize_mask_nearest: input must be square, got " +
                     std::to_string(mask.width) + "x" +
                     std::to_string(mask.height));
  }
  LabelMask out = make_mask(side, side);
  const double scale = static_cast<double>(mask.width) / side;
  for (int y = 0; y < side; ++y) {
    const int sy = std::min(mask.height - 1,
                            static_cast<int>(std::floor((y + 0.5) * scale)));
    for (int x = 0; x < side; ++x) {
      const int sx = std::min(mask.width - 1,
                              static_cast<int>(std::floor((x + 0.5) * scale)));
      out.at(y, x) = mask.at(sy, sx);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// border class
// ---------------------------------------------------------------------------

/// Relabels the morphological gradient band (dilation minus erosion of the
/// gland set, square structuring element of the given radius) as class 2.
/// Out-of-bounds counts as background for both operations.
inline LabelMask add_border_class(const LabelMask& mask, int width_px = 1) {
  if (width_px < 1) throw ValueError("add_border_class: width must be >= 1");
  for (std::uint8_t v : mask.labels) {
    if (v > 1) {
      throw ValueError(
          "add_border_class: input mask must be binary (labels {0,1})");
    }
  }
  const int w = mask.width, h = mask.height;
  LabelMask out = mask;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      bool any = false, all = true;
      for (int dy = -width_px; dy <= width_px; ++dy) {
        for (int dx = -width_px; dx <= width_px; ++dx) {
          const int yy = y + dy, xx = x + dx;
          const bool gland = yy >= 0 && yy < h && xx >= 0 && xx < w &&
                             mask.at(yy, xx) == 1;
          any |= gland;
          all &= gland;
        }
      }
      if (any && !all) out.at(y, x) = 2;  // dilation \ erosion
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// one-hot encoding
// ---------------------------------------------------------------------------

/// Pixel-level one-hot encoding into a [1,C,H,W] tensor.
template <typename T = float>
Tensor<T> onehot_encode(const LabelMask& mask, int num_classes) {
  const std::size_t hw =
      static_cast<std::size_t>(mask.width) * mask.height;
  Tensor<T> out = zeros<T>({1, num_classes, mask.height, mask.width});
  for (std::size_t i = 0; i < hw; ++i) {
    const int label = mask.labels[i];
    if (label >= num_classes) {
      throw ValueError("onehot_encode: label " + std::to_string(label) +
                       " out of range for " + std::to_string(num_classes) +
                       " classes");
    }
    (*out.data)[static_cast<std::size_t>(label) * hw + i] = T(1);
  }
  return out;
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

struct AugmentParams {
  double max_translate = 0.125;      // fraction of the side, per axis
  double rotation_range_deg = 360;   // uniform in [0, range)
  double mirror_prob = 0.5;          // per axis
  std::uint64_t seed = 0;            // base seed; draws derive per item

  void validate() const {
    if (max_translate < 0 || max_translate > 1) {
      throw ConfigError("augment: max_translate must be in [0,1]");
    }
    if (mirror_prob < 0 || mirror_prob > 1) {
      throw ConfigError("augment: mirror_prob must be in [0,1]");
    }
    if (rotation_range_deg < 0) {
      throw ConfigError("augment: rotation range must be >= 0");
    }
  }
};

/// One rigid transform: translation by (tx, ty) pixels, rotation by theta
/// radians about the image center, then per-axis mirroring — applied
/// identically to image and mask. The image samples bilinearly, the mask
/// nearest-neighbor; both use reflection padding. The identity transform
/// reproduces the input bit-exactly.
inline std::pair<ImageF, LabelMask> apply_rigid_transform(
    const ImageF& image, const LabelMask& mask, double tx, double ty,
    double theta, bool mirror_x, bool mirror_y) {
  if (image.width != mask.width || image.height != mask.height) {
    throw ShapeError("augment: image " + std::to_string(image.width) + "x" +
                     std::to_string(image.height) + " vs mask " +
                     std::to_string(mask.width) + "x" +
                     std::to_string(mask.height));
  }
  const int w = image.width, h = image.height;
  const double c = std::cos(theta), s = std::sin(theta);
  const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;

  ImageF out_img{w, h, image.channels, {}};
  out_img.pixels.resize(image.pixels.size());
  LabelMask out_mask = make_mask(w, h);

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      // inverse map: untranslate, unrotate, unmirror
      const double px = (x - cx) - tx;
      const double py = (y - cy) - ty;
      double rx = c * px + s * py;
      double ry = -s * px + c * py;
      if (mirror_x) rx = -rx;
      if (mirror_y) ry = -ry;
      const double sx = rx + cx;
      const double sy = ry + cy;

      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      const double fx = sx - x0;
      const double fy = sy - y0;
      const int xa = detail::reflect_index(x0, w);
      const int xb = detail::reflect_index(x0 + 1, w);
      const int ya = detail::reflect_index(y0, h);
      const int yb = detail::reflect_index(y0 + 1, h);
      for (int ch = 0; ch < image.channels; ++ch) {
        const double v = (1 - fy) * ((1 - fx) * image.at(ya, xa, ch) +
                                     fx * image.at(ya, xb, ch)) +
                         fy * ((1 - fx) * image.at(yb, xa, ch) +
                               fx * image.at(yb, xb, ch));
        out_img.at(y, x, ch) = static_cast<float>(v);
      }
      const int nx = detail::reflect_index(
          static_cast<int>(std::floor(sx + 0.5)), w);
      const int ny = detail::reflect_index(
          static_cast<int>(std::floor(sy + 0.5)), h);
      out_mask.at(y, x) = mask.at(ny, nx);
    }
  }
  return {std::move(out_img), std::move(out_mask)};
}

/// Samples one transform from the params (draw order: tx, ty, angle,
/// mirror x, mirror y) and applies it to both inputs.
inline std::pair<ImageF, LabelMask> augment(const ImageF& image,
                                            const LabelMask& mask,
                                            const AugmentParams& params,
                                            Rng& draw) {
  params.validate();
  const double tx =
      params.max_translate == 0
          ? 0.0
          : draw.uniform(-params.max_translate, params.max_translate) *
                image.width;
  const double ty =
      params.max_translate == 0
          ? 0.0
          : draw.uniform(-params.max_translate, params.max_translate) *
                image.height;
  const double theta =
      params.rotation_range_deg == 0
          ? 0.0
          : draw.uniform(0.0, params.rotation_range_deg) * M_PI / 180.0;
  const bool mirror_x =
      params.mirror_prob > 0 && draw.bernoulli(params.mirror_prob);
  const bool mirror_y =
      params.mirror_prob > 0 && draw.bernoulli(params.mirror_prob);
  return apply_rigid_transform(image, mask, tx, ty, theta, mirror_x, mirror_y);
}

// ---------------------------------------------------------------------------
// patch extraction and manifests
// ---------------------------------------------------------------------------

/// Provenance of one training example.
struct PatchRecord {
  std::string patient_id;
  std::string slide_id;
  int x = 0;
  int y = 0;
  std::string image_path;  // relative to the dataset root
  std::string mask_path;
};

/// Grid origins for size x size patches with the given per-axis overlap:
/// stride = size*(1-overlap), count per axis floor((dim-size)/stride)+1.
inline std::vector<std::pair<int, int>> patch_grid(int width, int height,
                                                   int size, double overlap) {
  if (overlap < 0 || overlap >= 1) {
    throw ValueError("patch_grid: overlap must be in [0,1)");
  }
  if (width < size || height < size) {
    throw DataError("patch_grid: source " + std::to_string(width) + "x" +
                    std::to_string(height) + " smaller than patch size " +
                    std::to_string(size));
  }
  const int stride = static_cast<int>(std::llround(size * (1.0 - overlap)));
  if (stride < 1) throw ValueError("patch_grid: stride underflows to 0");
  std::vector<std::pair<int, int>> origins;
  const int nx = (width - size) / stride + 1;
  const int ny = (height - size) / stride + 1;
  for (int gy = 0; gy < ny; ++gy)
    for (int gx = 0; gx < nx; ++gx)
      origins.emplace_back(gx * stride, gy * stride);
  return origins;
}

inline ImageU8 crop_image(const ImageU8& im, int x, int y, int size) {
  ImageU8 out{size, size, im.channels, {}};
  out.pixels.resize(static_cast<std::size_t>(size) * size * im.channels);
  for (int yy = 0; yy < size; ++yy) {
    const auto* src =
        im.pixels.data() +
        (static_cast<std::size_t>(y + yy) * im.width + x) * im.channels;
    std::copy_n(src, static_cast<std::size_t>(size) * im.channels,
                out.pixels.data() +
                    static_cast<std::size_t>(yy) * size * im.channels);
  }
  return out;
}

inline LabelMask crop_mask(const LabelMask& m, int x, int y, int size) {
  LabelMask out = make_mask(size, size);
  for (int yy = 0; yy < size; ++yy) {
    std::copy_n(m.labels.data() + static_cast<std::size_t>(y + yy) * m.width +
                    x,
                size, out.labels.data() + static_cast<std::size_t>(yy) * size);
  }
  return out;
}

namespace detail {

inline void check_id(const std::string& id, const char* what) {
  if (id.empty() || id.find("__") != std::string::npos ||
      id.find(',') != std::string::npos || id.find('/') != std::string::npos) {
    throw DataError(std::string(what) + " '" + id +
                    "' must be non-empty and free of '__', ',' and '/'");
  }
}

}  // namespace detail

/// Splits one source image + mask into overlapping patches, writes the
/// patch files under root/images and root/masks, and returns their records.
inline std::vector<PatchRecord> extract_patches(
    const ImageU8& image, const LabelMask& mask, int size, double overlap,
    const std::string& patient_id, const std::string& slide_id,
    const std::string& root) {
  if (image.width != mask.width || image.height != mask.height) {
    throw DataError("extract_patches: image " + std::to_string(image.width) +
                    "x" + std::to_string(image.height) + " vs mask " +
                    std::to_string(mask.width) + "x" +
                    std::to_string(mask.height));
  }
  detail::check_id(patient_id, "patient id");
  detail::check_id(slide_id, "slide id");
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(root) / "images");
  fs::create_directories(fs::path(root) / "masks");
  std::vector<PatchRecord> records;
  for (auto [x, y] : patch_grid(image.width, image.height, size, overlap)) {
    const std::string stem = patient_id + "__" + slide_id + "__" +
                             std::to_string(x) + "_" + std::to_string(y) +
                             ".png";
    PatchRecord rec;
    rec.patient_id = patient_id;
    rec.slide_id = slide_id;
    rec.x = x;
    rec.y = y;
    rec.image_path = "images/" + stem;
    rec.mask_path = "masks/" + stem;
    write_png((fs::path(root) / rec.image_path).string(),
              crop_image(image, x, y, size));
    write_mask_png((fs::path(root) / rec.mask_path).string(),
                   crop_mask(mask, x, y, size));
    records.push_back(std::move(rec));
  }
  return records;
}

inline void write_manifest(const std::string& path,
                           const std::vector<PatchRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest '" + path + "'");
  out << "patient_id,slide_id,x,y,image,mask\n";
  for (const auto& r : records) {
    out << r.patient_id << ',' << r.slide_id << ',' << r.x << ',' << r.y
        << ',' << r.image_path << ',' << r.mask_path << '\n';
  }
  if (!out) throw IoError("short write to manifest '" + path + "'");
}

inline std::vector<PatchRecord> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read manifest '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != "patient_id,slide_id,x,y,image,mask") {
    throw DataError("manifest '" + path + "': bad or missing header");
  }
  std::vector<PatchRecord> records;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, ',')) cols.push_back(col);
    if (cols.size() != 6) {
      throw DataError("manifest '" + path + "' line " +
                      std::to_string(lineno) + ": expected 6 columns");
    }
    PatchRecord r;
    r.patient_id = cols[0];
    r.slide_id = cols[1];
    try {
      r.x = std::stoi(cols[2]);
      r.y = std::stoi(cols[3]);
    } catch (const std::exception&) {
      throw DataError("manifest '" + path + "' line " +
                      std::to_string(lineno) + ": bad grid coordinates");
    }
    r.image_path = cols[4];
    r.mask_path = cols[5];
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace gseg
