#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gseg/blocks.hpp"

namespace gseg {

/// Architecture descriptor. depth counts encoder levels including the
/// bottleneck, so channels run base_filters .. base_filters*2^(depth-1).
struct UNetConfig {
  BlockKind block_kind = BlockKind::Basic;
  int depth = 5;
  int base_filters = 64;
  int num_classes = 2;
  int input_side = 256;
  int input_channels = 3;

  int bottleneck_channels() const { return base_filters << (depth - 1); }

  void validate() const {
    if (depth < 2) {
      throw ConfigError("unet: depth must be >= 2, got " +
                        std::to_string(depth));
    }
    if (base_filters < 1) {
      throw ConfigError("unet: base_filters must be >= 1, got " +
                        std::to_string(base_filters));
    }
    if (num_classes != 2 && num_classes != 3) {
      throw ConfigError("unet: num_classes must be 2 or 3, got " +
                        std::to_string(num_classes));
    }
    const int down = 1 << (depth - 1);
    if (input_side < down || input_side % down != 0) {
      throw ConfigError("unet: input_side " + std::to_string(input_side) +
                        " is not divisible by 2^(depth-1) = " +
                        std::to_string(down));
    }
    if (input_channels < 1) {
      throw ConfigError("unet: input_channels must be >= 1");
    }
    if (block_kind == BlockKind::MultiRes) {
      for (int i = 0; i < depth; ++i) {
        const int f = base_filters << i;
        if (f % 4 != 0) {
          throw ConfigError(
              "unet: multires blocks need every level's filter count "
              "divisible by 4; level " +
              std::to_string(i) + " has " + std::to_string(f));
        }
      }
    }
  }
};

/// Encoder blocks, 2x deconvolutions, decoder blocks and 1x1 softmax head
/// per the symmetric encoder-decoder layout.
template <typename T>
struct UNetModel {
  UNetConfig config;
  std::vector<BlockParams<T>> encoder;  // depth entries, last is bottleneck
  std::vector<ConvParams<T>> deconvs;   // depth-1, deepest level first
  std::vector<BlockParams<T>> decoder;  // depth-1, deepest level first
  ConvParams<T> head;                   // 1x1, base_filters -> num_classes

  /// Stable name -> tensor enumeration; defines checkpoint record order.
  std::vector<std::pair<std::string, Tensor<T>*>> named_params() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    auto add_block = [&out](const std::string& prefix, BlockParams<T>& b) {
      const auto names = block_conv_names(b.kind);
      for (std::size_t i = 0; i < b.convs.size(); ++i) {
        out.emplace_back(prefix + "." + names[i] + ".w", &b.convs[i].w);
        out.emplace_back(prefix + "." + names[i] + ".b", &b.convs[i].b);
      }
    };
    for (std::size_t i = 0; i < encoder.size(); ++i)
      add_block("enc" + std::to_string(i), encoder[i]);
    for (std::size_t i = 0; i < deconvs.size(); ++i) {
      const std::string lvl = std::to_string(encoder.size() - 2 - i);
      out.emplace_back("dec" + lvl + ".up.w", &deconvs[i].w);
      out.emplace_back("dec" + lvl + ".up.b", &deconvs[i].b);
    }
    for (std::size_t i = 0; i < decoder.size(); ++i)
      add_block("dec" + std::to_string(encoder.size() - 2 - i), decoder[i]);
    out.emplace_back("head.w", &head.w);
    out.emplace_back("head.b", &head.b);
    return out;
  }

  void set_requires_grad(bool on) {
    for (auto& [name, t] : named_params()) {
      t->requires_grad = on;
      if (on) t->ensure_grad();
    }
  }

  void zero_grad() {
    for (auto& [name, t] : named_params()) t->zero_grad();
  }
};

/// Builds a model with deterministic seed-derived initialization.
template <typename T = float>
UNetModel<T> build_unet(const UNetConfig& config, std::uint64_t seed) {
  config.validate();
  UNetModel<T> m;
  m.config = config;
  Rng rng(derive_seed(seed, 0x756e6574));  // one stream, fixed creation order
  int fin = config.input_channels;
  for (int i = 0; i < config.depth; ++i) {
    const int fout = config.base_filters << i;
    m.encoder.push_back(make_block_params<T>(config.block_kind, fin, fout, rng));
    fin = fout;
  }
  for (int i = config.depth - 2; i >= 0; --i) {
    const int fout = config.base_filters << i;
    m.deconvs.push_back(make_deconv<T>(fout * 2, fout, rng));
    m.decoder.push_back(
        make_block_params<T>(config.block_kind, fout * 2, fout, rng));
  }
  m.head = make_conv<T>(config.num_classes, config.base_filters, 1, rng);
  return m;
}

/// Analytic parameter count (blocks + deconvolutions + head).
inline std::size_t param_count(const UNetConfig& c) {
  std::size_t total = 0;
  std::size_t fin = static_cast<std::size_t>(c.input_channels);
  for (int i = 0; i < c.depth; ++i) {
    const std::size_t fout = static_cast<std::size_t>(c.base_filters) << i;
    total += block_param_count(c.block_kind, fin, fout);
    fin = fout;
  }
  for (int i = c.depth - 2; i >= 0; --i) {
    const std::size_t fout = static_cast<std::size_t>(c.base_filters) << i;
    total += (fout * 2) * fout * 9 + fout;                       // deconv
    total += block_param_count(c.block_kind, fout * 2, fout);    // block
  }
  total += static_cast<std::size_t>(c.base_filters) * c.num_classes +
           c.num_classes;  // 1x1 head
  return total;
}

template <typename T>
std::size_t param_count(UNetModel<T>& m) {
  return param_count(m.config);
}

/// Full forward pass: encoder with max-pool downsampling, decoder with
/// deconv + skip concatenation (decoder path first, encoder skip second),
/// 1x1 head and per-pixel channel softmax.
template <typename T>
Tensor<T> forward(UNetModel<T>& model, const Tensor<T>& batch,
                  Tape<T>* tape = nullptr) {
  const UNetConfig& c = model.config;
  if (batch.rank() != 4 || batch.dim(1) != c.input_channels ||
      batch.dim(2) != c.input_side || batch.dim(3) != c.input_side) {
    throw ShapeError("unet: expected input [N," +
                     std::to_string(c.input_channels) + "," +
                     std::to_string(c.input_side) + "," +
                     std::to_string(c.input_side) + "], got " +
                     shape_str(batch.shape));
  }
  std::vector<Tensor<T>> skips;
  Tensor<T> z = batch;
  for (int i = 0; i < c.depth; ++i) {
    z = block_forward(z, model.encoder[i], tape);
    const int want = c.input_side >> i;
    if (z.dim(2) != want || z.dim(3) != want) {
      throw ShapeError("unet: encoder level " + std::to_string(i) +
                       " produced " + shape_str(z.shape) + ", expected side " +
                       std::to_string(want));
    }
    if (i + 1 < c.depth) {
      skips.push_back(z);
      z = maxpool2d(z, tape);
    }
  }
  for (int d = 0; d < c.depth - 1; ++d) {
    const int level = c.depth - 2 - d;
    z = conv_transpose2d(z, model.deconvs[d].w, model.deconvs[d].b, 2, 1, 1,
                         tape);
    z = concat_channels(z, skips[static_cast<std::size_t>(level)], tape);
    z = block_forward(z, model.decoder[d], tape);
  }
  z = conv2d(z, model.head.w, model.head.b, 1, 0, tape);
  return softmax_channels(z, tape);
}

}  // namespace gseg
