#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "gseg/parallel.hpp"
#include "gseg/tape.hpp"
#include "gseg/tensor.hpp"

namespace gseg {

namespace detail {

template <typename T>
using RowMat =
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

inline int conv_out_dim(int in, int k, int stride, int padding) {
  return (in + 2 * padding - k) / stride + 1;
}

/// Unfolds one [C,H,W] image into a [C*kH*kW, OH*OW] column matrix.
template <typename T>
void im2col(const T* img, int C, int H, int W, int k, int stride, int padding,
            T* col) {
  const int OH = conv_out_dim(H, k, stride, padding);
  const int OW = conv_out_dim(W, k, stride, padding);
  const std::size_t ohw = static_cast<std::size_t>(OH) * OW;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = col + (static_cast<std::size_t>(c) * k * k + ky * k + kx) * ohw;
        for (int oy = 0; oy < OH; ++oy) {
          const int iy = oy * stride - padding + ky;
          if (iy < 0 || iy >= H) {
            std::fill(row + static_cast<std::size_t>(oy) * OW,
                      row + static_cast<std::size_t>(oy + 1) * OW, T(0));
            continue;
          }
          const T* src = img + (static_cast<std::size_t>(c) * H + iy) * W;
          for (int ox = 0; ox < OW; ++ox) {
            const int ix = ox * stride - padding + kx;
            row[static_cast<std::size_t>(oy) * OW + ox] =
                (ix < 0 || ix >= W) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatter-adds a column matrix back into [C,H,W].
template <typename T>
void col2im_add(const T* col, int C, int H, int W, int k, int stride,
                int padding, T* img) {
  const int OH = conv_out_dim(H, k, stride, padding);
  const int OW = conv_out_dim(W, k, stride, padding);
  const std::size_t ohw = static_cast<std::size_t>(OH) * OW;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row =
            col + (static_cast<std::size_t>(c) * k * k + ky * k + kx) * ohw;
        for (int oy = 0; oy < OH; ++oy) {
          const int iy = oy * stride - padding + ky;
          if (iy < 0 || iy >= H) continue;
          T* dst = img + (static_cast<std::size_t>(c) * H + iy) * W;
          for (int ox = 0; ox < OW; ++ox) {
            const int ix = ox * stride - padding + kx;
            if (ix >= 0 && ix < W)
              dst[ix] += row[static_cast<std::size_t>(oy) * OW + ox];
          }
        }
      }
    }
  }
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op,
                  const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must be rank " +
                     std::to_string(rank) + ", got " + shape_str(t.shape));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise / reduction ops
// ---------------------------------------------------------------------------

/// Elementwise sum; gradient passes unchanged to both inputs.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  if (!same_shape(a, b)) {
    throw ShapeError("add: shape mismatch " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
  }
  Tensor<T> out = zeros<T>(a.shape);
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  T* po = out.ptr();
  for (std::size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
  check_finite(out, "add");
  if (detail::tracing(tape, {&a, &b})) {
    tape->record("add", {detail::node_of(*tape, a), detail::node_of(*tape, b)},
                 out, [a, b, out]() {
                   const auto& g = out.grad_data();
                   if (a.requires_grad) {
                     auto& ga = a.ensure_grad();
                     for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                   }
                   if (b.requires_grad) {
                     auto& gb = b.ensure_grad();
                     for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                   }
                 });
  }
  return out;
}

/// Hadamard product.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  if (!same_shape(a, b)) {
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
  }
  Tensor<T> out = zeros<T>(a.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) (*out.data)[i] = a[i] * b[i];
  check_finite(out, "mul");
  if (detail::tracing(tape, {&a, &b})) {
    tape->record("mul", {detail::node_of(*tape, a), detail::node_of(*tape, b)},
                 out, [a, b, out]() {
                   const auto& g = out.grad_data();
                   if (a.requires_grad) {
                     auto& ga = a.ensure_grad();
                     for (std::size_t i = 0; i < g.size(); ++i)
                       ga[i] += g[i] * b[i];
                   }
                   if (b.requires_grad) {
                     auto& gb = b.ensure_grad();
                     for (std::size_t i = 0; i < g.size(); ++i)
                       gb[i] += g[i] * a[i];
                   }
                 });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c, Tape<T>* tape = nullptr) {
  Tensor<T> out = zeros<T>(a.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) (*out.data)[i] = a[i] * c;
  check_finite(out, "scale");
  if (detail::tracing(tape, {&a})) {
    tape->record("scale", {detail::node_of(*tape, a)}, out, [a, out, c]() {
      const auto& g = out.grad_data();
      auto& ga = a.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    });
  }
  return out;
}

/// Sum over every element, yielding a scalar tensor of shape [1].
template <typename T>
Tensor<T> sum_all(const Tensor<T>& a, Tape<T>* tape = nullptr) {
  T acc = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) acc += a[i];
  Tensor<T> out = from_vector<T>({1}, {acc});
  check_finite(out, "sum_all");
  if (detail::tracing(tape, {&a})) {
    tape->record("sum_all", {detail::node_of(*tape, a)}, out, [a, out]() {
      const T g = out.grad_data()[0];
      auto& ga = a.ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
  }
  return out;
}

/// Elementwise max(0, x); subgradient at 0 is 0.
template <typename T>
Tensor<T> relu(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  Tensor<T> out = zeros<T>(x.shape);
  for (std::size_t i = 0; i < out.numel(); ++i)
    (*out.data)[i] = x[i] > T(0) ? x[i] : T(0);
  check_finite(out, "relu");
  if (detail::tracing(tape, {&x})) {
    tape->record("relu", {detail::node_of(*tape, x)}, out, [x, out]() {
      const auto& g = out.grad_data();
      auto& gx = x.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x[i] > T(0)) gx[i] += g[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// spatial ops
// ---------------------------------------------------------------------------

/// 2x2 max pooling, stride 2. H and W must be even. Backward routes the
/// gradient to the argmax cell; ties go to the first element in row-major
/// window order.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  detail::require_rank(x, 4, "maxpool2d", "input");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 != 0 || W % 2 != 0) {
    throw ShapeError("maxpool2d: spatial dims must be even, got " +
                     shape_str(x.shape));
  }
  const int OH = H / 2, OW = W / 2;
  Tensor<T> out = zeros<T>({N, C, OH, OW});
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.numel());
  const T* px = x.ptr();
  T* po = out.ptr();
  std::size_t o = 0;
  for (int nc = 0; nc < N * C; ++nc) {
    const T* plane = px + static_cast<std::size_t>(nc) * H * W;
    for (int oy = 0; oy < OH; ++oy) {
      for (int ox = 0; ox < OW; ++ox, ++o) {
        const std::size_t base =
            static_cast<std::size_t>(nc) * H * W + (2 * oy) * W + 2 * ox;
        std::size_t best = base;
        T bv = plane[(2 * oy) * W + 2 * ox];
        const std::size_t cand[3] = {base + 1, base + W, base + W + 1};
        for (std::size_t idx : cand) {
          if (px[idx] > bv) {  // strict: ties keep the earliest cell
            bv = px[idx];
            best = idx;
          }
        }
        po[o] = bv;
        (*argmax)[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  check_finite(out, "maxpool2d");
  if (detail::tracing(tape, {&x})) {
    tape->record("maxpool2d", {detail::node_of(*tape, x)}, out,
                 [x, out, argmax]() {
                   const auto& g = out.grad_data();
                   auto& gx = x.ensure_grad();
                   for (std::size_t i = 0; i < g.size(); ++i)
                     gx[(*argmax)[i]] += g[i];
                 });
  }
  return out;
}

/// Per-pixel softmax over the channel axis of an NCHW tensor, computed with
/// max-subtraction.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x, Tape<T>* tape = nullptr) {
  detail::require_rank(x, 4, "softmax_channels", "input");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (C < 2) {
    throw ShapeError("softmax_channels: need at least 2 channels, got " +
                     shape_str(x.shape));
  }
  Tensor<T> out = zeros<T>(x.shape);
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  const T* px = x.ptr();
  T* po = out.ptr();
  for (int n = 0; n < N; ++n) {
    const std::size_t img = static_cast<std::size_t>(n) * C * hw;
    for (std::size_t p = 0; p < hw; ++p) {
      T m = px[img + p];
      for (int c = 1; c < C; ++c) m = std::max(m, px[img + c * hw + p]);
      T s = 0;
      for (int c = 0; c < C; ++c) {
        T e = std::exp(px[img + c * hw + p] - m);
        po[img + c * hw + p] = e;
        s += e;
      }
      const T inv = T(1) / s;
      for (int c = 0; c < C; ++c) po[img + c * hw + p] *= inv;
    }
  }
  check_finite(out, "softmax_channels");
  if (detail::tracing(tape, {&x})) {
    tape->record(
        "softmax_channels", {detail::node_of(*tape, x)}, out, [x, out]() {
          const int N = x.dim(0), C = x.dim(1);
          const std::size_t hw =
              static_cast<std::size_t>(x.dim(2)) * x.dim(3);
          const auto& g = out.grad_data();
          const T* py = out.ptr();
          auto& gx = x.ensure_grad();
          for (int n = 0; n < N; ++n) {
            const std::size_t img = static_cast<std::size_t>(n) * C * hw;
            for (std::size_t p = 0; p < hw; ++p) {
              T dot = 0;
              for (int c = 0; c < C; ++c)
                dot += g[img + c * hw + p] * py[img + c * hw + p];
              for (int c = 0; c < C; ++c) {
                const std::size_t i = img + c * hw + p;
                gx[i] += py[i] * (g[i] - dot);
              }
            }
          }
        });
  }
  return out;
}

/// Concatenates along the channel axis; a's channels precede b's.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b,
                          Tape<T>* tape = nullptr) {
  detail::require_rank(a, 4, "concat_channels", "first input");
  detail::require_rank(b, 4, "concat_channels", "second input");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_channels: mismatch " + shape_str(a.shape) +
                     " vs " + shape_str(b.shape));
  }
  const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1);
  const std::size_t hw = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
  Tensor<T> out = zeros<T>({N, Ca + Cb, a.dim(2), a.dim(3)});
  for (int n = 0; n < N; ++n) {
    std::copy_n(a.ptr() + static_cast<std::size_t>(n) * Ca * hw, Ca * hw,
                out.ptr() + static_cast<std::size_t>(n) * (Ca + Cb) * hw);
    std::copy_n(b.ptr() + static_cast<std::size_t>(n) * Cb * hw, Cb * hw,
                out.ptr() + static_cast<std::size_t>(n) * (Ca + Cb) * hw +
                    Ca * hw);
  }
  check_finite(out, "concat_channels");
  if (detail::tracing(tape, {&a, &b})) {
    tape->record(
        "concat_channels",
        {detail::node_of(*tape, a), detail::node_of(*tape, b)}, out,
        [a, b, out]() {
          const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1);
          const std::size_t hw =
              static_cast<std::size_t>(a.dim(2)) * a.dim(3);
          const auto& g = out.grad_data();
          for (int n = 0; n < N; ++n) {
            const std::size_t base =
                static_cast<std::size_t>(n) * (Ca + Cb) * hw;
            if (a.requires_grad) {
              auto& ga = a.ensure_grad();
              for (std::size_t i = 0; i < static_cast<std::size_t>(Ca) * hw;
                   ++i)
                ga[static_cast<std::size_t>(n) * Ca * hw + i] += g[base + i];
            }
            if (b.requires_grad) {
              auto& gb = b.ensure_grad();
              for (std::size_t i = 0; i < static_cast<std::size_t>(Cb) * hw;
                   ++i)
                gb[static_cast<std::size_t>(n) * Cb * hw + i] +=
                    g[base + Ca * hw + i];
            }
          }
        });
  }
  return out;
}

/// Slices channels [c0, c1) out of an NCHW tensor (inference-side helper for
/// tests; not differentiable).
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int c0, int c1) {
  detail::require_rank(x, 4, "slice_channels", "input");
  const int N = x.dim(0), C = x.dim(1);
  if (c0 < 0 || c1 > C || c0 >= c1) {
    throw ShapeError("slice_channels: bad range [" + std::to_string(c0) +
                     ", " + std::to_string(c1) + ") for " +
                     shape_str(x.shape));
  }
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor<T> out = zeros<T>({N, c1 - c0, x.dim(2), x.dim(3)});
  for (int n = 0; n < N; ++n) {
    std::copy_n(x.ptr() + (static_cast<std::size_t>(n) * C + c0) * hw,
                static_cast<std::size_t>(c1 - c0) * hw,
                out.ptr() + static_cast<std::size_t>(n) * (c1 - c0) * hw);
  }
  return out;
}

// ---------------------------------------------------------------------------
// convolution ops (im2col + GEMM)
// ---------------------------------------------------------------------------

/// 2-D convolution, NCHW input, [Cout,Cin,kH,kW] weight, per-channel bias.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 int stride, int padding, Tape<T>* tape = nullptr) {
  detail::require_rank(x, 4, "conv2d", "input");
  detail::require_rank(w, 4, "conv2d", "weight");
  detail::require_rank(bias, 1, "conv2d", "bias");
  const int N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Cout = w.dim(0), kH = w.dim(2), kW = w.dim(3);
  if (w.dim(1) != Cin) {
    throw ShapeError("conv2d: weight " + shape_str(w.shape) +
                     " does not match input channels of " +
                     shape_str(x.shape));
  }
  if (bias.dim(0) != Cout) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape) +
                     " does not match weight " + shape_str(w.shape));
  }
  if (stride < 1 || padding < 0) {
    throw ValueError("conv2d: stride must be >= 1 and padding >= 0");
  }
  if (kH > H + 2 * padding || kW > W + 2 * padding) {
    throw ShapeError("conv2d: kernel " + shape_str(w.shape) +
                     " larger than padded input " + shape_str(x.shape));
  }
  const int OH = detail::conv_out_dim(H, kH, stride, padding);
  const int OW = detail::conv_out_dim(W, kW, stride, padding);
  if (OH <= 0 || OW <= 0) {
    throw ShapeError("conv2d: zero-size output for input " +
                     shape_str(x.shape));
  }

  const std::size_t ckk = static_cast<std::size_t>(Cin) * kH * kW;
  const std::size_t ohw = static_cast<std::size_t>(OH) * OW;
  Tensor<T> out = zeros<T>({N, Cout, OH, OW});
  detail::ConstMatMap<T> Wm(w.ptr(), Cout, ckk);

  parallel_for(static_cast<std::size_t>(N), [&](std::size_t n) {
    std::vector<T> col(ckk * ohw);
    detail::im2col(x.ptr() + n * Cin * H * W, Cin, H, W, kH, stride, padding,
                   col.data());
    detail::ConstMatMap<T> Cm(col.data(), ckk, ohw);
    detail::MatMap<T> Ym(out.ptr() + n * Cout * ohw, Cout, ohw);
    Ym.noalias() = Wm * Cm;
    for (int c = 0; c < Cout; ++c) Ym.row(c).array() += bias[c];
  });
  check_finite(out, "conv2d");

  if (detail::tracing(tape, {&x, &w, &bias})) {
    tape->record(
        "conv2d",
        {detail::node_of(*tape, x), detail::node_of(*tape, w),
         detail::node_of(*tape, bias)},
        out, [x, w, bias, out, stride, padding]() {
          const int N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
          const int Cout = w.dim(0), kH = w.dim(2), kW = w.dim(3);
          const int OH = out.dim(2), OW = out.dim(3);
          const std::size_t ckk = static_cast<std::size_t>(Cin) * kH * kW;
          const std::size_t ohw = static_cast<std::size_t>(OH) * OW;
          const auto& g = out.grad_data();
          detail::ConstMatMap<T> Wm(w.ptr(), Cout, ckk);

          // per-image partials for dW/db, reduced below in image order so the
          // result does not depend on the worker count
          const bool want_w = w.requires_grad;
          const bool want_b = bias.requires_grad;
          const bool want_x = x.requires_grad;
          if (want_x) x.ensure_grad();  // allocate before the parallel region
          std::vector<std::vector<T>> wparts, bparts;
          if (want_w) wparts.assign(N, std::vector<T>(w.numel(), T(0)));
          if (want_b) bparts.assign(N, std::vector<T>(Cout, T(0)));

          parallel_for(static_cast<std::size_t>(N), [&](std::size_t n) {
            detail::ConstMatMap<T> Gm(g.data() + n * Cout * ohw, Cout, ohw);
            if (want_w) {
              std::vector<T> col(ckk * ohw);
              detail::im2col(x.ptr() + n * Cin * H * W, Cin, H, W, kH, stride,
                             padding, col.data());
              detail::ConstMatMap<T> Cm(col.data(), ckk, ohw);
              detail::MatMap<T> dWm(wparts[n].data(), Cout, ckk);
              dWm.noalias() = Gm * Cm.transpose();
            }
            if (want_b) {
              for (int c = 0; c < Cout; ++c)
                bparts[n][c] = Gm.row(c).sum();
            }
            if (want_x) {
              std::vector<T> dcol(ckk * ohw);
              detail::MatMap<T> Dm(dcol.data(), ckk, ohw);
              Dm.noalias() = Wm.transpose() * Gm;
              auto& gx = x.grad_data();
              detail::col2im_add(dcol.data(), Cin, H, W, kH, stride, padding,
                                 gx.data() + n * Cin * H * W);
            }
          });
          if (want_w) {
            auto& gw = w.ensure_grad();
            for (int n = 0; n < N; ++n)
              for (std::size_t i = 0; i < gw.size(); ++i)
                gw[i] += wparts[n][i];
          }
          if (want_b) {
            auto& gb = bias.ensure_grad();
            for (int n = 0; n < N; ++n)
              for (int c = 0; c < Cout; ++c) gb[c] += bparts[n][c];
          }
        });
  }
  return out;
}

/// Transposed convolution used by the decoder. Only the exact 2x-doubling
/// geometry is supported: kernel 3x3, stride 2, padding 1, output padding 1.
/// Weight layout is [Cin,Cout,kH,kW], the adjoint of conv2d with the same
/// buffer.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w,
                           const Tensor<T>& bias, int stride = 2,
                           int padding = 1, int output_padding = 1,
                           Tape<T>* tape = nullptr) {
  detail::require_rank(x, 4, "conv_transpose2d", "input");
  detail::require_rank(w, 4, "conv_transpose2d", "weight");
  detail::require_rank(bias, 1, "conv_transpose2d", "bias");
  const int kH = w.dim(2), kW = w.dim(3);
  if (stride != 2 || padding != 1 || output_padding != 1 || kH != 3 ||
      kW != 3) {
    throw ValueError(
        "conv_transpose2d: only the 2x geometry (kernel 3, stride 2, padding "
        "1, output padding 1) is supported");
  }
  const int N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Cout = w.dim(1);
  if (w.dim(0) != Cin) {
    throw ShapeError("conv_transpose2d: weight " + shape_str(w.shape) +
                     " does not match input channels of " +
                     shape_str(x.shape));
  }
  if (bias.dim(0) != Cout) {
    throw ShapeError("conv_transpose2d: bias " + shape_str(bias.shape) +
                     " does not match weight " + shape_str(w.shape));
  }
  const int OH = 2 * H, OW = 2 * W;
  const std::size_t ckk = static_cast<std::size_t>(Cout) * kH * kW;
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  Tensor<T> out = zeros<T>({N, Cout, OH, OW});
  detail::ConstMatMap<T> Wm(w.ptr(), Cin, ckk);

  parallel_for(static_cast<std::size_t>(N), [&](std::size_t n) {
    detail::ConstMatMap<T> Xm(x.ptr() + n * Cin * hw, Cin, hw);
    std::vector<T> col(ckk * hw);
    detail::MatMap<T> Cm(col.data(), ckk, hw);
    Cm.noalias() = Wm.transpose() * Xm;
    T* oimg = out.ptr() + n * Cout * OH * OW;
    detail::col2im_add(col.data(), Cout, OH, OW, kH, stride, padding, oimg);
    for (int c = 0; c < Cout; ++c) {
      T* plane = oimg + static_cast<std::size_t>(c) * OH * OW;
      for (std::size_t i = 0; i < static_cast<std::size_t>(OH) * OW; ++i)
        plane[i] += bias[c];
    }
  });
  check_finite(out, "conv_transpose2d");

  if (detail::tracing(tape, {&x, &w, &bias})) {
    tape->record(
        "conv_transpose2d",
        {detail::node_of(*tape, x), detail::node_of(*tape, w),
         detail::node_of(*tape, bias)},
        out, [x, w, bias, out, stride, padding]() {
          const int N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
          const int Cout = w.dim(1), kH = w.dim(2);
          const int OH = out.dim(2), OW = out.dim(3);
          const std::size_t ckk = static_cast<std::size_t>(Cout) * kH * kH;
          const std::size_t hw = static_cast<std::size_t>(H) * W;
          const auto& g = out.grad_data();
          detail::ConstMatMap<T> Wm(w.ptr(), Cin, ckk);

          const bool want_w = w.requires_grad;
          const bool want_b = bias.requires_grad;
          const bool want_x = x.requires_grad;
          if (want_x) x.ensure_grad();  // allocate before the parallel region
          std::vector<std::vector<T>> wparts, bparts;
          if (want_w) wparts.assign(N, std::vector<T>(w.numel(), T(0)));
          if (want_b) bparts.assign(N, std::vector<T>(Cout, T(0)));

          parallel_for(static_cast<std::size_t>(N), [&](std::size_t n) {
            const T* gimg = g.data() + n * Cout * OH * OW;
            std::vector<T> dcol(ckk * hw);
            detail::im2col(gimg, Cout, OH, OW, kH, stride, padding,
                           dcol.data());
            detail::ConstMatMap<T> Dm(dcol.data(), ckk, hw);
            if (want_x) {
              auto& gx = x.grad_data();
              detail::MatMap<T> Gx(gx.data() + n * Cin * hw, Cin, hw);
              Gx.noalias() += Wm * Dm;
            }
            if (want_w) {
              detail::ConstMatMap<T> Xm(x.ptr() + n * Cin * hw, Cin, hw);
              detail::MatMap<T> dWm(wparts[n].data(), Cin, ckk);
              dWm.noalias() = Xm * Dm.transpose();
            }
            if (want_b) {
              for (int c = 0; c < Cout; ++c) {
                const T* plane = gimg + static_cast<std::size_t>(c) * OH * OW;
                T s = 0;
                for (std::size_t i = 0;
                     i < static_cast<std::size_t>(OH) * OW; ++i)
                  s += plane[i];
                bparts[n][c] = s;
              }
            }
          });
          if (want_w) {
            auto& gw = w.ensure_grad();
            for (int n = 0; n < N; ++n)
              for (std::size_t i = 0; i < gw.size(); ++i)
                gw[i] += wparts[n][i];
          }
          if (want_b) {
            auto& gb = bias.ensure_grad();
            for (int n = 0; n < N; ++n)
              for (int c = 0; c < Cout; ++c) gb[c] += bparts[n][c];
          }
        });
  }
  return out;
}

}  // namespace gseg
