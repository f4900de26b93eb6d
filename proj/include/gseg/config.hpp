#pragma once

#include <fstream>
#include <optional>
#include <string>

#include "gseg/optim.hpp"
#include "gseg/unet.hpp"

namespace gseg {

/// Everything one experiment needs: architecture, training schedule,
/// regularization toggles and I/O locations. The class count is derived
/// from the border-class toggle (3 with, 2 without).
struct ExperimentConfig {
  BlockKind block_kind = BlockKind::Residual;
  int depth = 5;
  int base_filters = 64;
  int input_side = 256;
  int input_channels = 3;

  std::optional<double> lr;  // defaults to the block kind's standard rate
  int epochs = 250;
  int batch_size = 8;
  std::uint64_t seed = 0;
  int folds = 4;

  bool use_augmentation = false;
  bool use_border_class = false;
  double aug_max_translate = 0.125;
  double aug_rotation_degrees = 360;
  double aug_mirror_prob = 0.5;
  int border_width = 1;

  std::string data_root;
  std::string output_dir;
  int threads = 1;
  bool save_predictions = false;
  bool train_all = false;

  int num_classes() const { return use_border_class ? 3 : 2; }

  double effective_lr() const {
    return lr ? *lr : default_learning_rate(block_kind);
  }

  UNetConfig unet() const {
    UNetConfig c;
    c.block_kind = block_kind;
    c.depth = depth;
    c.base_filters = base_filters;
    c.num_classes = num_classes();
    c.input_side = input_side;
    c.input_channels = input_channels;
    return c;
  }

  TrainConfig train() const {
    TrainConfig tc;
    tc.lr = effective_lr();
    tc.epochs = epochs;
    tc.batch_size = batch_size;
    tc.seed = seed;
    tc.use_augmentation = use_augmentation;
    tc.aug.max_translate = aug_max_translate;
    tc.aug.rotation_range_deg = aug_rotation_degrees;
    tc.aug.mirror_prob = aug_mirror_prob;
    tc.aug.seed = seed;
    tc.use_border_class = use_border_class;
    tc.border_width = border_width;
    return tc;
  }

  void validate() const {
    unet().validate();
    if (effective_lr() <= 0) throw ConfigError("experiment: lr must be > 0");
    if (epochs < 1) throw ConfigError("experiment: epochs must be >= 1");
    if (batch_size < 1) {
      throw ConfigError("experiment: batch_size must be >= 1");
    }
    if (!train_all && folds < 2) {
      throw ConfigError("experiment: folds must be >= 2");
    }
    if (data_root.empty()) throw ConfigError("experiment: data_root not set");
    if (output_dir.empty()) {
      throw ConfigError("experiment: output_dir not set");
    }
    if (threads < 1) throw ConfigError("experiment: threads must be >= 1");
    train().validate();
  }
};

/// Applies one `key = value` setting. Shared by the config-file parser and
/// the CLI override path so both spell keys identically.
inline void apply_config_kv(ExperimentConfig& cfg, const std::string& key,
                            const std::string& value) {
  auto as_int = [&](const std::string& v) {
    try {
      return std::stoi(v);
    } catch (const std::exception&) {
      throw ConfigError("config: key '" + key + "': bad integer '" + v + "'");
    }
  };
  auto as_double = [&](const std::string& v) {
    try {
      return std::stod(v);
    } catch (const std::exception&) {
      throw ConfigError("config: key '" + key + "': bad number '" + v + "'");
    }
  };
  auto as_bool = [&](const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config: key '" + key + "': bad boolean '" + v + "'");
  };
  if (key == "block") {
    cfg.block_kind = block_kind_from_name(value);
  } else if (key == "depth") {
    cfg.depth = as_int(value);
  } else if (key == "base_filters") {
    cfg.base_filters = as_int(value);
  } else if (key == "input_side") {
    cfg.input_side = as_int(value);
  } else if (key == "input_channels") {
    cfg.input_channels = as_int(value);
  } else if (key == "lr") {
    cfg.lr = as_double(value);
  } else if (key == "epochs") {
    cfg.epochs = as_int(value);
  } else if (key == "batch_size") {
    cfg.batch_size = as_int(value);
  } else if (key == "seed") {
    cfg.seed = static_cast<std::uint64_t>(std::stoull(value));
  } else if (key == "folds") {
    cfg.folds = as_int(value);
  } else if (key == "use_augmentation") {
    cfg.use_augmentation = as_bool(value);
  } else if (key == "use_border_class") {
    cfg.use_border_class = as_bool(value);
  } else if (key == "aug_max_translate") {
    cfg.aug_max_translate = as_double(value);
  } else if (key == "aug_rotation_degrees") {
    cfg.aug_rotation_degrees = as_double(value);
  } else if (key == "aug_mirror_prob") {
    cfg.aug_mirror_prob = as_double(value);
  } else if (key == "border_width") {
    cfg.border_width = as_int(value);
  } else if (key == "data_root") {
    cfg.data_root = value;
  } else if (key == "output_dir") {
    cfg.output_dir = value;
  } else if (key == "threads") {
    cfg.threads = as_int(value);
  } else if (key == "save_predictions") {
    cfg.save_predictions = as_bool(value);
  } else if (key == "train_all") {
    cfg.train_all = as_bool(value);
  } else {
    throw ConfigError("config: unknown key '" + key + "'");
  }
}

/// Flat UTF-8 `key = value` file, one setting per line, '#' comments.
inline void load_config_file(ExperimentConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config '" + path + "'");
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const char* ws = " \t\r";
    const auto b = s.find_first_not_of(ws);
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(ws);
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config '" + path + "' line " +
                        std::to_string(lineno) + ": expected key = value");
    }
    apply_config_kv(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

}  // namespace gseg
