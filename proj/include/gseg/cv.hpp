#pragma once

#include <algorithm>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "gseg/checkpoint.hpp"
#include "gseg/config.hpp"
#include "gseg/optim.hpp"
#include "gseg/parallel.hpp"
#include "gseg/synth.hpp"

namespace gseg {

/// Patient-disjoint fold assignment: every patch of one patient lands in
/// exactly one fold and fold patient counts differ by at most one.
struct FoldSplit {
  int k = 0;
  std::map<std::string, int> patient_fold;
  std::vector<std::vector<std::size_t>> fold_items;  // record indices
};

template <typename RecordLike>
FoldSplit split_folds(const std::vector<RecordLike>& records, int k,
                      std::uint64_t seed) {
  if (k < 1) throw ConfigError("split_folds: k must be >= 1");
  std::set<std::string> unique;
  for (const auto& r : records) unique.insert(r.patient_id);
  if (static_cast<int>(unique.size()) < k) {
    throw DataError("split_folds: " + std::to_string(unique.size()) +
                    " distinct patients < " + std::to_string(k) + " folds");
  }
  // canonical patient order, then a seeded shuffle: the map depends only on
  // the patient set and the seed, not on record order
  std::vector<std::string> patients(unique.begin(), unique.end());
  Rng rng(derive_seed(seed, 0x666f6c64));
  rng.shuffle(patients.begin(), patients.end());
  FoldSplit split;
  split.k = k;
  split.fold_items.resize(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < patients.size(); ++i) {
    split.patient_fold[patients[i]] = static_cast<int>(i % k);
  }
  for (std::size_t i = 0; i < records.size(); ++i) {
    split.fold_items[static_cast<std::size_t>(
                         split.patient_fold.at(records[i].patient_id))]
        .push_back(i);
  }
  return split;
}

struct FoldResult {
  int fold = 0;
  History history;
  MetricReport report;  // gland/background, border merged into gland
  std::string checkpoint_path;
  std::string history_path;
  std::string report_path;
};

struct ExperimentResult {
  std::vector<FoldResult> folds;
  MetricReport aggregate;
  std::string aggregate_path;
};

namespace detail {

/// Predict + score one item set; predictions are argmaxed and, for 3-class
/// models, border-merged before scoring against the original binary masks.
inline MetricReport score_items(UNetModel<float>& model,
                                const std::vector<DatasetItem>& items,
                                const std::vector<std::size_t>& indices,
                                const std::string& prediction_dir) {
  namespace fs = std::filesystem;
  if (!prediction_dir.empty()) fs::create_directories(prediction_dir);
  std::vector<std::pair<LabelMask, LabelMask>> pairs;
  std::vector<std::string> ids;
  for (std::size_t idx : indices) {
    const DatasetItem& item = items[idx];
    auto probs = forward(model, eval_input(item));
    LabelMask pred = argmax_mask(probs, 0);
    if (!prediction_dir.empty()) {
      write_mask_png(
          (fs::path(prediction_dir) / (item_id(item) + ".png")).string(),
          pred);
    }
    if (model.config.num_classes == 3) pred = merge_border_into_gland(pred);
    pairs.emplace_back(std::move(pred), item.mask);
    ids.push_back(item_id(item));
  }
  return image_level_report(pairs, 2, ids);
}

}  // namespace detail

/// Full patient-grouped cross-validation run: trains one model per fold on
/// the other folds, scores the held-out fold image-wise, and writes
/// checkpoints, history and report CSVs under the output directory.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  cfg.validate();
  set_num_threads(cfg.threads);
  auto items = load_dataset(cfg.data_root, cfg.input_side);
  std::vector<PatchRecord> records;
  for (const auto& it : items) records.push_back(it.record);
  FoldSplit split = split_folds(records, cfg.folds, cfg.seed);
  fs::create_directories(cfg.output_dir);

  ExperimentResult result;
  std::vector<std::string> all_ids;
  for (int fold = 0; fold < cfg.folds; ++fold) {
    std::vector<std::size_t> val_idx =
        split.fold_items[static_cast<std::size_t>(fold)];
    std::vector<DatasetItem> train_items, val_items;
    for (int other = 0; other < cfg.folds; ++other) {
      if (other == fold) continue;
      for (std::size_t i : split.fold_items[static_cast<std::size_t>(other)])
        train_items.push_back(items[i]);
    }
    for (std::size_t i : val_idx) val_items.push_back(items[i]);
    if (train_items.empty() || val_items.empty()) {
      throw DataError("run_experiment: fold " + std::to_string(fold) +
                      " has an empty train or validation side");
    }

    const std::string fold_dir =
        (fs::path(cfg.output_dir) / ("fold" + std::to_string(fold))).string();
    fs::create_directories(fold_dir);

    auto model = build_unet<float>(
        cfg.unet(), derive_seed(cfg.seed, 0x6d6f64, fold));
    TrainConfig tc = cfg.train();
    History history = training_loop(model, train_items, val_items, tc);

    FoldResult fr;
    fr.fold = fold;
    fr.history = std::move(history);
    fr.checkpoint_path = fold_dir + "/checkpoint.gseg";
    fr.history_path = fold_dir + "/history.csv";
    fr.report_path = fold_dir + "/report.csv";
    save_checkpoint(model, fr.checkpoint_path);
    write_history_csv(fr.history, cfg.num_classes(), fr.history_path);
    fr.report = detail::score_items(
        model, items, val_idx,
        cfg.save_predictions ? fold_dir + "/predictions" : "");
    write_report_csv(fr.report, fr.report_path);
    for (std::size_t i = 0; i < fr.report.image_ids.size(); ++i) {
      all_ids.push_back("fold" + std::to_string(fold) + "/" +
                        fr.report.image_ids[i]);
    }
    result.folds.push_back(std::move(fr));
  }

  // aggregate across every validation image of every fold
  MetricReport agg;
  agg.classes = class_names(2);
  agg.image_ids = std::move(all_ids);
  for (const auto& fr : result.folds)
    for (const auto& row : fr.report.di) agg.di.push_back(row);
  finalize_report(agg);
  result.aggregate = std::move(agg);
  result.aggregate_path =
      (fs::path(cfg.output_dir) / "aggregate_report.csv").string();
  write_report_csv(result.aggregate, result.aggregate_path);
  return result;
}

/// Trains one model on the entire dataset (the retrain-on-all path used
/// before scoring a held-out test directory).
inline std::string train_on_all(const ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  cfg.validate();
  set_num_threads(cfg.threads);
  auto items = load_dataset(cfg.data_root, cfg.input_side);
  fs::create_directories(cfg.output_dir);
  auto model =
      build_unet<float>(cfg.unet(), derive_seed(cfg.seed, 0x6d6f64, 0));
  TrainConfig tc = cfg.train();
  History history = training_loop(model, items, {}, tc);
  const std::string ckpt =
      (fs::path(cfg.output_dir) / "checkpoint.gseg").string();
  save_checkpoint(model, ckpt);
  write_history_csv(history, cfg.num_classes(),
                    (fs::path(cfg.output_dir) / "history.csv").string());
  return ckpt;
}

/// Scores a checkpoint against a dataset directory (e.g. a held-out test
/// cohort) and optionally writes the report CSV.
inline MetricReport evaluate_checkpoint(const std::string& checkpoint_path,
                                        const std::string& data_root,
                                        const std::string& report_path = "",
                                        const std::string& prediction_dir = "") {
  auto model = load_checkpoint(checkpoint_path);
  auto items = load_dataset(data_root, model.config.input_side);
  std::vector<std::size_t> idx(items.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  MetricReport report = detail::score_items(model, items, idx, prediction_dir);
  if (!report_path.empty()) write_report_csv(report, report_path);
  return report;
}

/// Runs one image through a checkpointed model and writes the argmax mask
/// (class-index pixels). Optionally writes an overlay with the predicted
/// non-background boundary drawn on the resized input.
inline LabelMask predict_file(const std::string& checkpoint_path,
                              const std::string& image_path,
                              const std::string& out_mask_path,
                              const std::string& overlay_path = "") {
  auto model = load_checkpoint(checkpoint_path);
  ImageU8 raw = read_png(image_path, 3);
  if (raw.width != raw.height) {
    throw DataError("predict: input image must be square, got " +
                    std::to_string(raw.width) + "x" +
                    std::to_string(raw.height));
  }
  ImageF resized =
      resize_image_bilinear(to_float(raw), model.config.input_side);
  Tensor<float> x =
      zeros<float>({1, 3, model.config.input_side, model.config.input_side});
  detail::copy_chw(resized, x.ptr());
  auto probs = forward(model, x);
  LabelMask pred = argmax_mask(probs, 0);
  write_mask_png(out_mask_path, pred);
  if (!overlay_path.empty()) {
    ImageU8 overlay = to_u8(resized);
    const int side = pred.width;
    for (int y = 0; y < side; ++y) {
      for (int xx = 0; xx < side; ++xx) {
        const bool fg = pred.at(y, xx) != 0;
        bool boundary = false;
        if (fg) {
          const int ns[4][2] = {{0, 1}, {0, -1}, {1, 0}, {-1, 0}};
          for (auto& n : ns) {
            const int yy = y + n[0], xb = xx + n[1];
            if (yy < 0 || yy >= side || xb < 0 || xb >= side ||
                pred.at(yy, xb) == 0) {
              boundary = true;
              break;
            }
          }
        }
        if (boundary) {
          overlay.at(y, xx, 0) = 0;
          overlay.at(y, xx, 1) = 220;
          overlay.at(y, xx, 2) = 40;
        }
      }
    }
    write_png(overlay_path, overlay);
  }
  return pred;
}

}  // namespace gseg
