#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "gseg/ops.hpp"

namespace gseg {

/// The three interchangeable convolutional block families. Every kind maps
/// [N,f_in,H,W] -> [N,f_out,H,W] with shape-preserving 3x3 convolutions.
enum class BlockKind : std::uint32_t { Basic = 0, Residual = 1, MultiRes = 2 };

inline const char* block_kind_name(BlockKind k) {
  switch (k) {
    case BlockKind::Basic:
      return "basic";
    case BlockKind::Residual:
      return "residual";
    case BlockKind::MultiRes:
      return "multires";
  }
  return "?";
}

inline BlockKind block_kind_from_name(const std::string& s) {
  if (s == "basic") return BlockKind::Basic;
  if (s == "residual" || s == "rb") return BlockKind::Residual;
  if (s == "multires" || s == "mrb") return BlockKind::MultiRes;
  throw ConfigError("unknown block kind '" + s +
                    "' (expected basic|residual|multires)");
}

template <typename T>
struct ConvParams {
  Tensor<T> w;
  Tensor<T> b;
};

/// Fan-in-scaled uniform init, bound sqrt(6/fan_in); bias zero.
template <typename T>
ConvParams<T> make_conv(int cout, int cin, int k, Rng& rng) {
  const T bound = static_cast<T>(std::sqrt(6.0 / (cin * k * k)));
  ConvParams<T> p;
  p.w = rand_uniform<T>({cout, cin, k, k}, -bound, bound, rng);
  p.b = zeros<T>({cout});
  return p;
}

/// Deconvolution parameters, [Cin,Cout,3,3] layout.
template <typename T>
ConvParams<T> make_deconv(int cin, int cout, Rng& rng) {
  const T bound = static_cast<T>(std::sqrt(6.0 / (cin * 9)));
  ConvParams<T> p;
  p.w = rand_uniform<T>({cin, cout, 3, 3}, -bound, bound, rng);
  p.b = zeros<T>({cout});
  return p;
}

/// One block's weights. The conv list layout depends on the kind:
///   Basic:    [conv1 f_in->f_out, conv2 f_out->f_out]
///   Residual: [norm f_in->f_out, conv1 f_out->f_out, conv2 f_out->f_out]
///   MultiRes: [b1 f_in->f_out/4, b2 ->f_out/4, b3 ->f_out/2,
///              res 1x1 f_in->f_out]
template <typename T>
struct BlockParams {
  BlockKind kind = BlockKind::Basic;
  int f_in = 0;
  int f_out = 0;
  std::vector<ConvParams<T>> convs;
};

template <typename T>
BlockParams<T> make_block_params(BlockKind kind, int f_in, int f_out,
                                 Rng& rng) {
  if (f_in < 1 || f_out < 1) {
    throw ConfigError("block channels must be positive, got f_in=" +
                      std::to_string(f_in) + " f_out=" + std::to_string(f_out));
  }
  BlockParams<T> p;
  p.kind = kind;
  p.f_in = f_in;
  p.f_out = f_out;
  switch (kind) {
    case BlockKind::Basic:
      p.convs.push_back(make_conv<T>(f_out, f_in, 3, rng));
      p.convs.push_back(make_conv<T>(f_out, f_out, 3, rng));
      break;
    case BlockKind::Residual:
      p.convs.push_back(make_conv<T>(f_out, f_in, 3, rng));   // norm
      p.convs.push_back(make_conv<T>(f_out, f_out, 3, rng));  // conv1
      p.convs.push_back(make_conv<T>(f_out, f_out, 3, rng));  // conv2
      break;
    case BlockKind::MultiRes: {
      if (f_out % 4 != 0) {
        throw ConfigError("multires block needs f_out divisible by 4, got " +
                          std::to_string(f_out));
      }
      const int q = f_out / 4;
      p.convs.push_back(make_conv<T>(q, f_in, 3, rng));      // b1
      p.convs.push_back(make_conv<T>(q, q, 3, rng));         // b2
      p.convs.push_back(make_conv<T>(2 * q, q, 3, rng));     // b3
      p.convs.push_back(make_conv<T>(f_out, f_in, 1, rng));  // res 1x1
      break;
    }
  }
  return p;
}

/// Parameter names inside a block, matching the conv list layout.
inline std::vector<std::string> block_conv_names(BlockKind kind) {
  switch (kind) {
    case BlockKind::Basic:
      return {"conv1", "conv2"};
    case BlockKind::Residual:
      return {"norm", "conv1", "conv2"};
    case BlockKind::MultiRes:
      return {"b1", "b2", "b3", "res"};
  }
  return {};
}

/// Closed-form weight+bias count per block kind.
inline std::size_t block_param_count(BlockKind kind, std::size_t f_in,
                                     std::size_t f_out) {
  switch (kind) {
    case BlockKind::Basic:
      return 9 * f_in * f_out + 9 * f_out * f_out + 2 * f_out;
    case BlockKind::Residual:
      return 9 * f_in * f_out + 18 * f_out * f_out + 3 * f_out;
    case BlockKind::MultiRes: {
      const std::size_t q = f_out / 4;
      return 9 * f_in * q + 9 * q * q + 9 * q * (2 * q) + f_in * f_out +
             (q + q + 2 * q + f_out);
    }
  }
  return 0;
}

template <typename T>
Tensor<T> basic_block(const Tensor<T>& x, const BlockParams<T>& p,
                      Tape<T>* tape = nullptr) {
  auto h = relu(conv2d(x, p.convs[0].w, p.convs[0].b, 1, 1, tape), tape);
  return relu(conv2d(h, p.convs[1].w, p.convs[1].b, 1, 1, tape), tape);
}

template <typename T>
Tensor<T> residual_block(const Tensor<T>& x, const BlockParams<T>& p,
                         Tape<T>* tape = nullptr) {
  // channel-normalizing conv, then a two-conv stack joined by the shortcut
  auto a = relu(conv2d(x, p.convs[0].w, p.convs[0].b, 1, 1, tape), tape);
  auto h = relu(conv2d(a, p.convs[1].w, p.convs[1].b, 1, 1, tape), tape);
  h = relu(conv2d(h, p.convs[2].w, p.convs[2].b, 1, 1, tape), tape);
  return add(a, h, tape);
}

template <typename T>
Tensor<T> multires_block(const Tensor<T>& x, const BlockParams<T>& p,
                         Tape<T>* tape = nullptr) {
  auto b1 = relu(conv2d(x, p.convs[0].w, p.convs[0].b, 1, 1, tape), tape);
  auto b2 = relu(conv2d(b1, p.convs[1].w, p.convs[1].b, 1, 1, tape), tape);
  auto b3 = relu(conv2d(b2, p.convs[2].w, p.convs[2].b, 1, 1, tape), tape);
  auto cat = concat_channels(concat_channels(b1, b2, tape), b3, tape);
  // linear 1x1 residual path, no activation after the add
  auto res = conv2d(x, p.convs[3].w, p.convs[3].b, 1, 0, tape);
  return add(cat, res, tape);
}

template <typename T>
Tensor<T> block_forward(const Tensor<T>& x, const BlockParams<T>& p,
                        Tape<T>* tape = nullptr) {
  if (x.rank() != 4 || x.dim(1) != p.f_in) {
    throw ShapeError(std::string("block: input ") + shape_str(x.shape) +
                     " does not provide f_in=" + std::to_string(p.f_in) +
                     " channels");
  }
  switch (p.kind) {
    case BlockKind::Basic:
      return basic_block(x, p, tape);
    case BlockKind::Residual:
      return residual_block(x, p, tape);
    case BlockKind::MultiRes:
      return multires_block(x, p, tape);
  }
  throw ValueError("block: unknown kind");
}

}  // namespace gseg
