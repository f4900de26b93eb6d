#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "gseg/image.hpp"
#include "gseg/pipeline.hpp"
#include "gseg/tensor.hpp"

namespace gseg {

/// One loaded training example, already resized to the model input side and
/// intensity-normalized. Masks on disk are binary; the border class is
/// derived at batch-assembly time.
struct DatasetItem {
  PatchRecord record;
  ImageF image;    // input_side x input_side x 3, values in [0,1]
  LabelMask mask;  // input_side x input_side, labels {0,1}
};

inline std::string item_id(const DatasetItem& item) {
  return item.record.patient_id + "__" + item.record.slide_id + "__" +
         std::to_string(item.record.x) + "_" + std::to_string(item.record.y);
}

/// Loads root/manifest.csv and every referenced image/mask pair, validating
/// the pairing before anything else runs.
inline std::vector<DatasetItem> load_dataset(const std::string& root,
                                             int input_side) {
  namespace fs = std::filesystem;
  const std::string manifest = (fs::path(root) / "manifest.csv").string();
  auto records = read_manifest(manifest);
  if (records.empty()) {
    throw DataError("dataset '" + root + "': manifest lists no patches");
  }
  std::vector<DatasetItem> items;
  items.reserve(records.size());
  for (auto& rec : records) {
    const std::string ipath = (fs::path(root) / rec.image_path).string();
    const std::string mpath = (fs::path(root) / rec.mask_path).string();
    ImageU8 image = read_png(ipath, 3);
    LabelMask mask = read_mask_png(mpath);
    if (image.width != mask.width || image.height != mask.height) {
      throw DataError("dataset item '" + rec.image_path + "': image " +
                      std::to_string(image.width) + "x" +
                      std::to_string(image.height) + " but mask " +
                      std::to_string(mask.width) + "x" +
                      std::to_string(mask.height));
    }
    if (image.width != image.height) {
      throw DataError("dataset item '" + rec.image_path +
                      "': patches must be square");
    }
    for (std::uint8_t v : mask.labels) {
      if (v > 1) {
        throw DataError("dataset mask '" + rec.mask_path +
                        "': labels must be binary {0,1} on disk");
      }
    }
    DatasetItem item;
    item.record = std::move(rec);
    item.image = resize_image_bilinear(to_float(image), input_side);
    item.mask = resize_mask_nearest(mask, input_side);
    items.push_back(std::move(item));
  }
  return items;
}

struct Batch {
  Tensor<float> x;  // [N,3,S,S]
  Tensor<float> y;  // [N,C,S,S] one-hot
};

namespace detail {

inline void copy_chw(const ImageF& img, float* dst) {
  const std::size_t hw = static_cast<std::size_t>(img.width) * img.height;
  for (int c = 0; c < img.channels; ++c)
    for (std::size_t p = 0; p < hw; ++p)
      dst[c * hw + p] = img.pixels[p * img.channels + c];
}

}  // namespace detail

/// Assembles one NCHW batch. When augmentation is enabled each item draws
/// its own transform from (aug.seed, epoch, item index), so assembly order
/// never changes the result.
inline Batch make_training_batch(const std::vector<DatasetItem>& items,
                                 const std::vector<std::size_t>& indices,
                                 int num_classes, bool use_augmentation,
                                 const AugmentParams& aug,
                                 bool use_border_class, int border_width,
                                 int epoch) {
  const int n = static_cast<int>(indices.size());
  const int side = items.at(indices.at(0)).image.width;
  Batch b;
  b.x = zeros<float>({n, 3, side, side});
  b.y = zeros<float>({n, num_classes, side, side});
  const std::size_t chw = static_cast<std::size_t>(3) * side * side;
  const std::size_t khw =
      static_cast<std::size_t>(num_classes) * side * side;
  for (int i = 0; i < n; ++i) {
    const DatasetItem& item = items[indices[static_cast<std::size_t>(i)]];
    ImageF img = item.image;
    LabelMask mask = item.mask;
    if (use_augmentation) {
      Rng draw(derive_seed(aug.seed, static_cast<std::uint64_t>(epoch),
                           indices[static_cast<std::size_t>(i)]));
      auto [ai, am] = augment(img, mask, aug, draw);
      img = std::move(ai);
      mask = std::move(am);
    }
    if (use_border_class) mask = add_border_class(mask, border_width);
    detail::copy_chw(img, b.x.ptr() + static_cast<std::size_t>(i) * chw);
    auto onehot = onehot_encode<float>(mask, num_classes);
    std::copy_n(onehot.ptr(), khw,
                b.y.ptr() + static_cast<std::size_t>(i) * khw);
  }
  return b;
}

inline Tensor<float> eval_input(const DatasetItem& item) {
  Tensor<float> x = zeros<float>({1, 3, item.image.height, item.image.width});
  detail::copy_chw(item.image, x.ptr());
  return x;
}

}  // namespace gseg
