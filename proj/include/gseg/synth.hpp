#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "gseg/pipeline.hpp"

namespace gseg {

/// Axis-rotated ellipse in pixel coordinates.
struct Ellipse {
  double cx = 0, cy = 0;  // center
  double a = 0, b = 0;    // semi-axes
  double phi = 0;         // rotation

  /// Normalized squared radius: <= 1 means inside.
  double r2(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double u = (dx * std::cos(phi) + dy * std::sin(phi)) / a;
    const double v = (-dx * std::sin(phi) + dy * std::cos(phi)) / b;
    return u * u + v * v;
  }
};

struct SynthItem {
  PatchRecord record;
  ImageU8 image;
  LabelMask mask;
  std::vector<Ellipse> ellipses;
};

/// Desk-scale synthetic gland images: 1-5 random ellipses (bright interior,
/// dark ring) on a textured pink-ish background, with exact analytic masks.
/// Deterministic per seed; patient ids are assigned round-robin.
inline std::vector<SynthItem> synth_dataset(int n_images, int side,
                                            std::uint64_t seed,
                                            int n_patients = 4) {
  if (side < 32) throw ConfigError("synth_dataset: side must be >= 32");
  if (n_images < 1 || n_patients < 1) {
    throw ConfigError("synth_dataset: counts must be positive");
  }
  std::vector<SynthItem> items;
  items.reserve(static_cast<std::size_t>(n_images));
  for (int i = 0; i < n_images; ++i) {
    Rng rng(derive_seed(seed, 0x73796e, static_cast<std::uint64_t>(i)));
    SynthItem item;
    const int count = 1 + static_cast<int>(rng.uniform_index(5));
    for (int e = 0; e < count; ++e) {
      Ellipse el;
      el.cx = rng.uniform(0.2, 0.8) * side;
      el.cy = rng.uniform(0.2, 0.8) * side;
      el.a = rng.uniform(0.10, 0.24) * side;
      el.b = rng.uniform(0.10, 0.24) * side;
      el.phi = rng.uniform(0.0, M_PI);
      item.ellipses.push_back(el);
    }
    item.image = ImageU8{side, side, 3, {}};
    item.image.pixels.resize(static_cast<std::size_t>(side) * side * 3);
    item.mask = make_mask(side, side);
    for (int y = 0; y < side; ++y) {
      for (int x = 0; x < side; ++x) {
        double rmin = 1e30;
        for (const auto& el : item.ellipses)
          rmin = std::min(rmin, el.r2(x, y));
        double r, g, b;
        if (rmin <= 1.0) {
          item.mask.at(y, x) = 1;
          if (rmin >= 0.55) {
            r = 0.42; g = 0.24; b = 0.47;  // dark nuclei-like ring
          } else {
            r = 0.97; g = 0.95; b = 0.97;  // pale lumen-like interior
          }
        } else {
          r = 0.91; g = 0.72; b = 0.80;  // pink-ish stroma
        }
        const double noise = 0.04;
        r += rng.uniform(-noise, noise);
        g += rng.uniform(-noise, noise);
        b += rng.uniform(-noise, noise);
        auto q = [](double v) {
          v = v < 0 ? 0 : (v > 1 ? 1 : v);
          return static_cast<std::uint8_t>(v * 255.0 + 0.5);
        };
        item.image.at(y, x, 0) = q(r);
        item.image.at(y, x, 1) = q(g);
        item.image.at(y, x, 2) = q(b);
      }
    }
    const std::string stem = "p" + std::to_string(i % n_patients) + "__s" +
                             std::to_string(i) + "__0_0.png";
    item.record.patient_id = "p" + std::to_string(i % n_patients);
    item.record.slide_id = "s" + std::to_string(i);
    item.record.x = 0;
    item.record.y = 0;
    item.record.image_path = "images/" + stem;
    item.record.mask_path = "masks/" + stem;
    items.push_back(std::move(item));
  }
  return items;
}

/// Writes a synthetic dataset in the standard layout: images/, masks/ and
/// manifest.csv under the given root.
inline std::vector<PatchRecord> write_synth_dataset(
    const std::string& root, const std::vector<SynthItem>& items) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(root) / "images");
  fs::create_directories(fs::path(root) / "masks");
  std::vector<PatchRecord> records;
  for (const auto& item : items) {
    write_png((fs::path(root) / item.record.image_path).string(), item.image);
    write_mask_png((fs::path(root) / item.record.mask_path).string(),
                   item.mask);
    records.push_back(item.record);
  }
  write_manifest((fs::path(root) / "manifest.csv").string(), records);
  return records;
}

}  // namespace gseg
