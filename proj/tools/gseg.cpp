// gseg - gland segmentation toolkit CLI
//
// Subcommands: synth, patchify, train, evaluate, predict. Train/evaluate
// settings come from defaults, then an optional flat `key = value` config
// file, then explicit command-line flags (highest precedence).

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "gseg/cv.hpp"

namespace fs = std::filesystem;

namespace {

struct TrainCli {
  std::string config_file;
  std::map<std::string, std::string> overrides;  // config key -> value
};

void add_experiment_flags(CLI::App* cmd, TrainCli& cli) {
  cmd->add_option("--config", cli.config_file,
                  "flat key = value config file");
  // every option mirrors an ExperimentConfig field name
  static const std::vector<std::pair<std::string, std::string>> kStringOpts = {
      {"--block", "block"},
      {"--depth", "depth"},
      {"--base-filters", "base_filters"},
      {"--input-side", "input_side"},
      {"--lr", "lr"},
      {"--epochs", "epochs"},
      {"--batch-size", "batch_size"},
      {"--seed", "seed"},
      {"--folds", "folds"},
      {"--aug-max-translate", "aug_max_translate"},
      {"--aug-rotation-degrees", "aug_rotation_degrees"},
      {"--aug-mirror-prob", "aug_mirror_prob"},
      {"--border-width", "border_width"},
      {"--threads", "threads"},
      {"--data", "data_root"},
      {"--out", "output_dir"},
  };
  for (const auto& [flag, key] : kStringOpts) {
    cmd->add_option_function<std::string>(
        flag,
        [&cli, key = key](const std::string& v) { cli.overrides[key] = v; },
        "overrides config key " + key);
  }
  static const std::vector<std::pair<std::string, std::string>> kBoolOpts = {
      {"augment", "use_augmentation"},
      {"border-class", "use_border_class"},
      {"save-predictions", "save_predictions"},
      {"train-all", "train_all"},
  };
  for (const auto& [name, key] : kBoolOpts) {
    cmd->add_flag_callback("--" + name,
                           [&cli, key = key] { cli.overrides[key] = "true"; });
    cmd->add_flag_callback("--no-" + name,
                           [&cli, key = key] { cli.overrides[key] = "false"; });
  }
}

gseg::ExperimentConfig build_config(const TrainCli& cli) {
  gseg::ExperimentConfig cfg;
  if (!cli.config_file.empty()) gseg::load_config_file(cfg, cli.config_file);
  for (const auto& [key, value] : cli.overrides)
    gseg::apply_config_kv(cfg, key, value);
  return cfg;
}

void print_report_line(const std::string& label, const gseg::MetricReport& r) {
  std::cout << label << ":";
  for (std::size_t c = 0; c < r.classes.size(); ++c) {
    std::cout << "  DI_" << r.classes[c] << " "
              << gseg::format_mean_std(r.mean[c], r.stddev[c]);
  }
  std::cout << "  (" << r.images() << " images)\n";
}

int run_synth(const std::string& out, int count, int side, int patients,
              std::uint64_t seed) {
  auto items = gseg::synth_dataset(count, side, seed, patients);
  gseg::write_synth_dataset(out, items);
  std::cout << "wrote " << items.size() << " synthetic patches ("
            << patients << " patients, side " << side << ") to " << out
            << "\n";
  return 0;
}

int run_patchify(const std::string& images_dir, const std::string& masks_dir,
                 const std::string& out, int size, double overlap) {
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(images_dir)) {
    if (entry.path().extension() == ".png")
      names.push_back(entry.path().filename().string());
  }
  std::sort(names.begin(), names.end());
  if (names.empty()) {
    throw gseg::DataError("patchify: no .png images in '" + images_dir + "'");
  }
  std::vector<gseg::PatchRecord> records;
  for (const auto& name : names) {
    const std::string stem = name.substr(0, name.size() - 4);
    const auto sep = stem.find("__");
    if (sep == std::string::npos ||
        stem.find("__", sep + 2) != std::string::npos) {
      throw gseg::DataError("patchify: image name '" + name +
                            "' must look like <patient>__<slide>.png");
    }
    const std::string mask_path = (fs::path(masks_dir) / name).string();
    if (!fs::exists(mask_path)) {
      throw gseg::DataError("patchify: no mask for '" + name + "' in '" +
                            masks_dir + "'");
    }
    auto image = gseg::read_png((fs::path(images_dir) / name).string(), 3);
    auto mask = gseg::read_mask_png(mask_path);
    auto recs = gseg::extract_patches(image, mask, size, overlap,
                                      stem.substr(0, sep), stem.substr(sep + 2),
                                      out);
    records.insert(records.end(), recs.begin(), recs.end());
  }
  gseg::write_manifest((fs::path(out) / "manifest.csv").string(), records);
  std::cout << "wrote " << records.size() << " patches from " << names.size()
            << " slides to " << out << "\n";
  return 0;
}

int run_train(const TrainCli& cli) {
  gseg::ExperimentConfig cfg = build_config(cli);
  if (cfg.train_all) {
    const std::string ckpt = gseg::train_on_all(cfg);
    std::cout << "trained on all data; checkpoint at " << ckpt << "\n";
    return 0;
  }
  auto result = gseg::run_experiment(cfg);
  for (const auto& fr : result.folds)
    print_report_line("fold" + std::to_string(fr.fold), fr.report);
  print_report_line("aggregate", result.aggregate);
  std::cout << "artifacts in " << cfg.output_dir << "\n";
  return 0;
}

int run_evaluate(const std::string& checkpoint, const std::string& data,
                 const std::string& out_report,
                 const std::string& predictions, int threads) {
  gseg::set_num_threads(threads);
  auto report =
      gseg::evaluate_checkpoint(checkpoint, data, out_report, predictions);
  print_report_line("test", report);
  if (!out_report.empty()) std::cout << "report written to " << out_report << "\n";
  return 0;
}

int run_predict(const std::string& checkpoint, const std::string& image,
                const std::string& out, const std::string& overlay) {
  gseg::predict_file(checkpoint, image, out, overlay);
  std::cout << "mask written to " << out << "\n";
  if (!overlay.empty()) std::cout << "overlay written to " << overlay << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gseg - U-Net gland segmentation toolkit"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand(
      "synth", "generate a synthetic gland dataset (images, masks, manifest)");
  std::string synth_out;
  int synth_count = 16, synth_side = 64, synth_patients = 4;
  std::uint64_t synth_seed = 7;
  synth->add_option("--out", synth_out, "output dataset root")->required();
  synth->add_option("--count", synth_count, "number of images");
  synth->add_option("--side", synth_side, "image side length (>= 32)");
  synth->add_option("--patients", synth_patients, "distinct patient ids");
  synth->add_option("--seed", synth_seed, "generator seed");

  // patchify
  auto* patchify = app.add_subcommand(
      "patchify",
      "split <patient>__<slide>.png rasters + masks into overlapping patches");
  std::string pat_images, pat_masks, pat_out;
  int pat_size = 1024;
  double pat_overlap = 0.5;
  patchify->add_option("--images", pat_images, "directory of source images")
      ->required();
  patchify->add_option("--masks", pat_masks, "directory of source masks")
      ->required();
  patchify->add_option("--out", pat_out, "output dataset root")->required();
  patchify->add_option("--size", pat_size, "patch side length");
  patchify->add_option("--overlap", pat_overlap, "per-axis overlap fraction");

  // train
  auto* train = app.add_subcommand(
      "train", "patient-grouped cross-validation training (or --train-all)");
  TrainCli train_cli;
  add_experiment_flags(train, train_cli);

  // evaluate
  auto* evaluate = app.add_subcommand(
      "evaluate", "score a checkpoint against a dataset directory");
  std::string eval_ckpt, eval_data, eval_out, eval_preds;
  int eval_threads = 1;
  evaluate->add_option("--checkpoint", eval_ckpt, "checkpoint file")
      ->required();
  evaluate->add_option("--data", eval_data, "dataset root")->required();
  evaluate->add_option("--out", eval_out, "report CSV path");
  evaluate->add_option("--predictions", eval_preds,
                       "directory for predicted masks");
  evaluate->add_option("--threads", eval_threads, "worker threads");

  // predict
  auto* predict = app.add_subcommand(
      "predict", "segment one image with a checkpointed model");
  std::string pred_ckpt, pred_image, pred_out, pred_overlay;
  predict->add_option("--checkpoint", pred_ckpt, "checkpoint file")
      ->required();
  predict->add_option("--image", pred_image, "input image (square PNG)")
      ->required();
  predict->add_option("--out", pred_out, "output mask PNG (class indices)")
      ->required();
  predict->add_option("--overlay", pred_overlay,
                      "optional boundary overlay PNG");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      return run_synth(synth_out, synth_count, synth_side, synth_patients,
                       synth_seed);
    }
    if (patchify->parsed()) {
      return run_patchify(pat_images, pat_masks, pat_out, pat_size,
                          pat_overlap);
    }
    if (train->parsed()) return run_train(train_cli);
    if (evaluate->parsed()) {
      return run_evaluate(eval_ckpt, eval_data, eval_out, eval_preds,
                          eval_threads);
    }
    if (predict->parsed()) {
      return run_predict(pred_ckpt, pred_image, pred_out, pred_overlay);
    }
  } catch (const gseg::Error& e) {
    std::cerr << "error:" << e.category() << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error:internal: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
