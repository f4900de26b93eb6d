#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "gseg/image.hpp"
#include "gseg/tensor.hpp"

namespace gseg {

inline constexpr double kDiceSmooth = 1e-7;

inline std::vector<std::string> class_names(int num_classes) {
  std::vector<std::string> names{"background", "gland"};
  if (num_classes == 3) names.push_back("border");
  return names;
}

/// Soft per-class Dice similarity over the whole batch:
///   (2*sum(yhat_c * y_c) + smooth) / (sum(yhat_c^2) + sum(y_c^2) + smooth)
/// Reductions run in double regardless of the tensor dtype.
template <typename T>
std::vector<double> dice_similarity(const Tensor<T>& yhat, const Tensor<T>& y,
                                    double smooth = kDiceSmooth) {
  if (yhat.shape != y.shape || yhat.rank() != 4) {
    throw ShapeError("dice_similarity: prediction " + shape_str(yhat.shape) +
                     " vs reference " + shape_str(y.shape));
  }
  // zero smoothing is allowed here for exact-agreement checks; dice_loss
  // requires a strictly positive value to keep gradients finite
  if (smooth < 0) throw ValueError("dice_similarity: smooth must be >= 0");
  const int N = yhat.dim(0), C = yhat.dim(1);
  const std::size_t hw = static_cast<std::size_t>(yhat.dim(2)) * yhat.dim(3);
  std::vector<double> sim(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) {
    double inter = 0, psum = 0, rsum = 0;
    for (int n = 0; n < N; ++n) {
      const std::size_t base = (static_cast<std::size_t>(n) * C + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const double p = static_cast<double>(yhat[base + i]);
        const double r = static_cast<double>(y[base + i]);
        inter += p * r;
        psum += p * p;
        rsum += r * r;
      }
    }
    sim[static_cast<std::size_t>(c)] =
        (2.0 * inter + smooth) / (psum + rsum + smooth);
  }
  return sim;
}

/// Argmax over channels for one batch item; ties take the lowest class index.
template <typename T>
LabelMask argmax_mask(const Tensor<T>& probs, int n = 0) {
  const int C = probs.dim(1), H = probs.dim(2), W = probs.dim(3);
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  LabelMask mask = make_mask(W, H);
  for (std::size_t p = 0; p < hw; ++p) {
    int best = 0;
    T bv = probs[(static_cast<std::size_t>(n) * C) * hw + p];
    for (int c = 1; c < C; ++c) {
      const T v = probs[(static_cast<std::size_t>(n) * C + c) * hw + p];
      if (v > bv) {  // strict: ties keep the lowest index
        bv = v;
        best = c;
      }
    }
    mask.labels[p] = static_cast<std::uint8_t>(best);
  }
  return mask;
}

/// Per-class Dice Index of two hard masks: one-hot encodes both and applies
/// the soft similarity. 1 = identical pixel sets; both-empty classes score 1
/// through the smoothing term.
inline std::vector<double> dice_index(const LabelMask& pred,
                                      const LabelMask& ref, int num_classes,
                                      double smooth = kDiceSmooth) {
  if (pred.width != ref.width || pred.height != ref.height) {
    throw ShapeError("dice_index: mask dims " + std::to_string(pred.width) +
                     "x" + std::to_string(pred.height) + " vs " +
                     std::to_string(ref.width) + "x" +
                     std::to_string(ref.height));
  }
  const std::size_t px = pred.labels.size();
  for (std::size_t i = 0; i < px; ++i) {
    if (pred.labels[i] >= num_classes || ref.labels[i] >= num_classes) {
      throw ValueError("dice_index: label out of range for " +
                       std::to_string(num_classes) + " classes");
    }
  }
  Tensor<double> ph = zeros<double>({1, num_classes, pred.height, pred.width});
  Tensor<double> rh = zeros<double>({1, num_classes, pred.height, pred.width});
  for (std::size_t i = 0; i < px; ++i) {
    ph[static_cast<std::size_t>(pred.labels[i]) * px + i] = 1.0;
    rh[static_cast<std::size_t>(ref.labels[i]) * px + i] = 1.0;
  }
  return dice_similarity(ph, rh, smooth);
}

/// Relabels the border class as gland (evaluation merge rule).
inline LabelMask merge_border_into_gland(const LabelMask& m) {
  LabelMask out = m;
  for (auto& v : out.labels)
    if (v == 2) v = 1;
  return out;
}

/// Per-image per-class Dice Index values with mean and population standard
/// deviation aggregates.
struct MetricReport {
  std::vector<std::string> image_ids;
  std::vector<std::string> classes;
  std::vector<std::vector<double>> di;  // [image][class]
  std::vector<double> mean;             // per class
  std::vector<double> stddev;           // per class, population

  std::size_t images() const { return image_ids.size(); }
};

inline void finalize_report(MetricReport& r) {
  const std::size_t C = r.classes.size();
  r.mean.assign(C, 0.0);
  r.stddev.assign(C, 0.0);
  const double n = static_cast<double>(r.di.size());
  for (const auto& row : r.di)
    for (std::size_t c = 0; c < C; ++c) r.mean[c] += row[c];
  for (std::size_t c = 0; c < C; ++c) r.mean[c] /= n;
  for (const auto& row : r.di)
    for (std::size_t c = 0; c < C; ++c) {
      const double d = row[c] - r.mean[c];
      r.stddev[c] += d * d;
    }
  for (std::size_t c = 0; c < C; ++c) r.stddev[c] = std::sqrt(r.stddev[c] / n);
}

/// Image-level aggregation over (pred, ref) mask pairs.
inline MetricReport image_level_report(
    const std::vector<std::pair<LabelMask, LabelMask>>& pairs, int num_classes,
    const std::vector<std::string>& ids = {}) {
  if (pairs.empty()) {
    throw ValueError("image_level_report: empty pair list");
  }
  MetricReport r;
  r.classes = class_names(num_classes);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    r.image_ids.push_back(i < ids.size() ? ids[i]
                                         : "image" + std::to_string(i));
    r.di.push_back(dice_index(pairs[i].first, pairs[i].second, num_classes));
  }
  finalize_report(r);
  return r;
}

/// Table-style presentation: mean(std) with four decimals, e.g.
/// "0.7500(0.2500)".
inline std::string format_mean_std(double mean, double stddev) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f(%.4f)", mean, stddev);
  return buf;
}

/// CSV layout: per-image rows `image_id,class,di`, then a summary section
/// `class,mean,std` with one row per class.
inline void write_report_csv(const MetricReport& r, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write report '" + path + "'");
  out << "image_id,class,di\n";
  char buf[64];
  for (std::size_t i = 0; i < r.di.size(); ++i) {
    for (std::size_t c = 0; c < r.classes.size(); ++c) {
      std::snprintf(buf, sizeof(buf), "%.10g", r.di[i][c]);
      out << r.image_ids[i] << ',' << r.classes[c] << ',' << buf << '\n';
    }
  }
  out << "class,mean,std\n";
  for (std::size_t c = 0; c < r.classes.size(); ++c) {
    char mb[64], sb[64];
    std::snprintf(mb, sizeof(mb), "%.10g", r.mean[c]);
    std::snprintf(sb, sizeof(sb), "%.10g", r.stddev[c]);
    out << r.classes[c] << ',' << mb << ',' << sb << '\n';
  }
  if (!out) throw IoError("short write to report '" + path + "'");
}

}  // namespace gseg
