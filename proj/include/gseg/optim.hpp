#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "gseg/dataset.hpp"
#include "gseg/loss.hpp"
#include "gseg/metrics.hpp"
#include "gseg/unet.hpp"

namespace gseg {

struct NadamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Per-parameter first/second moments plus the shared step counter.
template <typename T>
struct NadamState {
  NadamHyper hyper;
  std::uint64_t t = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;

  void init(const std::vector<Tensor<T>*>& params) {
    m.clear();
    v.clear();
    for (const Tensor<T>* p : params) {
      m.emplace_back(p->numel(), T(0));
      v.emplace_back(p->numel(), T(0));
    }
    t = 0;
  }
};

/// One Nesterov-corrected Adam step over all parameters. Gradients are read
/// from the tensors' grad buffers. A non-finite gradient aborts before any
/// parameter is touched.
template <typename T>
void nadam_step(const std::vector<Tensor<T>*>& params, NadamState<T>& state) {
  if (state.m.size() != params.size()) {
    throw ValueError("nadam_step: state not initialized for these parameters");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!params[k]->has_grad()) {
      throw ValueError("nadam_step: parameter " + std::to_string(k) +
                       " has no gradient");
    }
    for (T g : params[k]->grad_data()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw TrainError("nadam_step: non-finite gradient, step aborted");
      }
    }
  }
  const auto& h = state.hyper;
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const T c1 = static_cast<T>(h.beta1 / (1.0 - std::pow(h.beta1, t + 1.0)));
  const T c2 =
      static_cast<T>((1.0 - h.beta1) / (1.0 - std::pow(h.beta1, t)));
  const T c3 = static_cast<T>(1.0 / (1.0 - std::pow(h.beta2, t)));
  const T b1 = static_cast<T>(h.beta1), b2 = static_cast<T>(h.beta2);
  const T lr = static_cast<T>(h.lr), eps = static_cast<T>(h.eps);
  for (std::size_t k = 0; k < params.size(); ++k) {
    std::vector<T>& theta = *params[k]->data;
    const std::vector<T>& grad = params[k]->grad_data();
    std::vector<T>& m = state.m[k];
    std::vector<T>& v = state.v[k];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const T g = grad[i];
      m[i] = b1 * m[i] + (T(1) - b1) * g;
      v[i] = b2 * v[i] + (T(1) - b2) * g * g;
      const T mhat = c1 * m[i] + c2 * g;
      const T vhat = v[i] * c3;
      theta[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

// --- optimizer state serialization (f32 models) ----------------------------

inline constexpr char kOptStateMagic[4] = {'G', 'O', 'P', 'T'};

inline void save_nadam_state(const NadamState<float>& state,
                             const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write optimizer state '" + path + "'");
  auto put_u64 = [&out](std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(b, 8);
  };
  auto put_u32 = [&out](std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(b, 4);
  };
  auto put_f64 = [&put_u64](double v) {
    put_u64(std::bit_cast<std::uint64_t>(v));
  };
  out.write(kOptStateMagic, 4);
  put_u64(1);  // version
  put_u64(state.t);
  put_f64(state.hyper.lr);
  put_f64(state.hyper.beta1);
  put_f64(state.hyper.beta2);
  put_f64(state.hyper.eps);
  put_u64(state.m.size());
  for (const auto* vecs : {&state.m, &state.v}) {
    for (const auto& vec : *vecs) {
      put_u64(vec.size());
      for (float x : vec) put_u32(std::bit_cast<std::uint32_t>(x));
    }
  }
  if (!out) throw IoError("short write to optimizer state '" + path + "'");
}

inline NadamState<float> load_nadam_state(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read optimizer state '" + path + "'");
  auto get_u64 = [&in, &path]() {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8)) {
      throw CheckpointError(path + ": truncated optimizer state");
    }
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  };
  auto get_u32 = [&in, &path]() {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) {
      throw CheckpointError(path + ": truncated optimizer state");
    }
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  };
  char magic[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != std::string(kOptStateMagic, 4)) {
    throw CheckpointError(path + ": bad optimizer state magic");
  }
  if (get_u64() != 1) {
    throw CheckpointError(path + ": unsupported optimizer state version");
  }
  NadamState<float> state;
  state.t = get_u64();
  state.hyper.lr = std::bit_cast<double>(get_u64());
  state.hyper.beta1 = std::bit_cast<double>(get_u64());
  state.hyper.beta2 = std::bit_cast<double>(get_u64());
  state.hyper.eps = std::bit_cast<double>(get_u64());
  const std::uint64_t count = get_u64();
  state.m.resize(count);
  state.v.resize(count);
  for (auto* vecs : {&state.m, &state.v}) {
    for (std::uint64_t k = 0; k < count; ++k) {
      const std::uint64_t len = get_u64();
      (*vecs)[k].resize(len);
      for (std::uint64_t i = 0; i < len; ++i) {
        (*vecs)[k][i] = std::bit_cast<float>(get_u32());
      }
    }
  }
  return state;
}

// --- training loop ----------------------------------------------------------

struct TrainConfig {
  double lr = 5e-4;  // block-kind default: 5e-4 basic/residual, 1e-4 multires
  int epochs = 250;
  int batch_size = 8;
  std::uint64_t seed = 0;
  bool use_augmentation = false;
  AugmentParams aug;
  bool use_border_class = false;
  int border_width = 1;  // structuring-element radius
  double smooth = kDiceSmooth;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    // lr == 0 is a legal degenerate (identity trajectory); experiment
    // configs additionally require lr > 0
    if (lr < 0) throw ConfigError("train: lr must be >= 0");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch size must be >= 1");
    aug.validate();
  }
};

inline double default_learning_rate(BlockKind kind) {
  return kind == BlockKind::MultiRes ? 1e-4 : 5e-4;
}

struct EpochStats {
  int epoch = 0;
  double train_loss = 0;
  std::vector<double> val_di;  // class order: background, gland[, border]
};

using History = std::vector<EpochStats>;

/// CSV schema: epoch,train_loss,val_di_gland,val_di_background[,val_di_border]
inline void write_history_csv(const History& history, int num_classes,
                              const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write history '" + path + "'");
  out << "epoch,train_loss,val_di_gland,val_di_background";
  if (num_classes == 3) out << ",val_di_border";
  out << '\n';
  char buf[64];
  for (const auto& e : history) {
    std::snprintf(buf, sizeof(buf), "%.10g", e.train_loss);
    out << e.epoch << ',' << buf;
    if (e.val_di.empty()) {
      out << ",,";
      if (num_classes == 3) out << ',';
    } else {
      std::snprintf(buf, sizeof(buf), "%.10g", e.val_di[1]);
      out << ',' << buf;
      std::snprintf(buf, sizeof(buf), "%.10g", e.val_di[0]);
      out << ',' << buf;
      if (num_classes == 3) {
        std::snprintf(buf, sizeof(buf), "%.10g", e.val_di[2]);
        out << ',' << buf;
      }
    }
    out << '\n';
  }
  if (!out) throw IoError("short write to history '" + path + "'");
}

/// Per-class DI of the model over a set of items; references carry the
/// border class when the model was trained with it.
inline std::vector<double> evaluate_di(UNetModel<float>& model,
                                       const std::vector<DatasetItem>& items,
                                       bool use_border_class,
                                       int border_width) {
  const int C = model.config.num_classes;
  std::vector<double> acc(static_cast<std::size_t>(C), 0.0);
  for (const auto& item : items) {
    auto probs = forward(model, eval_input(item));
    LabelMask pred = argmax_mask(probs, 0);
    LabelMask ref = use_border_class
                        ? add_border_class(item.mask, border_width)
                        : item.mask;
    auto di = dice_index(pred, ref, C);
    for (int c = 0; c < C; ++c) acc[static_cast<std::size_t>(c)] += di[c];
  }
  for (auto& a : acc) a /= static_cast<double>(items.size());
  return acc;
}

/// Mini-batch training with the NADAM optimizer and categorical Dice loss.
/// Shuffling, augmentation and initialization are all seed-derived, so a
/// fixed config reproduces the parameter trajectory bit-exactly.
inline History training_loop(UNetModel<float>& model,
                             const std::vector<DatasetItem>& train_items,
                             const std::vector<DatasetItem>& val_items,
                             const TrainConfig& tc) {
  tc.validate();
  if (train_items.empty()) throw DataError("training set is empty");
  const int C = model.config.num_classes;
  if (tc.use_border_class && C != 3) {
    throw ConfigError("train: border class requires a 3-class model");
  }

  model.set_requires_grad(true);
  std::vector<Tensor<float>*> params;
  for (auto& [name, t] : model.named_params()) params.push_back(t);
  NadamState<float> state;
  state.hyper = NadamHyper{tc.lr, tc.beta1, tc.beta2, tc.eps};
  state.init(params);

  History history;
  std::vector<std::size_t> order(train_items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(tc.seed, 0x65706f63,
                                static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order.begin(), order.end());
    double loss_sum = 0;
    std::size_t seen = 0;
    int step = 0;
    for (std::size_t at = 0; at < order.size();
         at += static_cast<std::size_t>(tc.batch_size)) {
      ++step;
      std::vector<std::size_t> idx(
          order.begin() + static_cast<std::ptrdiff_t>(at),
          order.begin() +
              static_cast<std::ptrdiff_t>(std::min(
                  order.size(), at + static_cast<std::size_t>(tc.batch_size))));
      try {
        Batch batch = make_training_batch(train_items, idx, C,
                                          tc.use_augmentation, tc.aug,
                                          tc.use_border_class,
                                          tc.border_width, epoch);
        Tape<float> tape;
        auto probs = forward(model, batch.x, &tape);
        auto loss = dice_loss(probs, batch.y, tc.smooth, &tape);
        const double lv = static_cast<double>(loss.value());
        if (!std::isfinite(lv)) {
          throw TrainError("training diverged: non-finite loss");
        }
        model.zero_grad();
        backward(tape, loss);
        nadam_step(params, state);
        loss_sum += lv * static_cast<double>(idx.size());
        seen += idx.size();
      } catch (const TrainError& e) {
        throw TrainError(std::string(e.what()) + " (epoch " +
                         std::to_string(epoch) + ", step " +
                         std::to_string(step) + ")");
      } catch (const ValueError& e) {
        throw TrainError(std::string("training diverged: ") + e.what() +
                         " (epoch " + std::to_string(epoch) + ", step " +
                         std::to_string(step) + ")");
      }
    }
    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = loss_sum / static_cast<double>(seen);
    if (!val_items.empty()) {
      stats.val_di =
          evaluate_di(model, val_items, tc.use_border_class, tc.border_width);
    }
    history.push_back(std::move(stats));
  }
  return history;
}

}  // namespace gseg
