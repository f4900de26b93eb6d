#pragma once

#include <memory>
#include <vector>

#include "gseg/metrics.hpp"
#include "gseg/tape.hpp"

namespace gseg {

/// Categorical Dice loss: 1 - mean over classes of the squared-denominator
/// soft Dice similarity. Differentiable w.r.t. both inputs; reference masks
/// are normally constant one-hot tensors.
///
/// The per-class sums follow the same reduction order as dice_similarity, so
/// loss + mean(similarity) == 1 holds exactly.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& yhat, const Tensor<T>& y,
                    double smooth = kDiceSmooth, Tape<T>* tape = nullptr) {
  if (yhat.shape != y.shape || yhat.rank() != 4) {
    throw ShapeError("dice_loss: prediction " + shape_str(yhat.shape) +
                     " vs reference " + shape_str(y.shape));
  }
  if (smooth <= 0) throw ValueError("dice_loss: smooth must be > 0");
  const int N = yhat.dim(0), C = yhat.dim(1);
  const std::size_t hw = static_cast<std::size_t>(yhat.dim(2)) * yhat.dim(3);

  // numerators S_c = 2*inter + smooth and denominators D_c = P + R + smooth
  auto sums = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(2 * C));
  double mean_sim = 0;
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
    const double S = 2.0 * inter + smooth;
    const double D = psum + rsum + smooth;
    (*sums)[static_cast<std::size_t>(2 * c)] = S;
    (*sums)[static_cast<std::size_t>(2 * c + 1)] = D;
    mean_sim += S / D;
  }
  mean_sim /= static_cast<double>(C);
  Tensor<T> out = from_vector<T>({1}, {static_cast<T>(1.0 - mean_sim)});

  if (detail::tracing(tape, {&yhat, &y})) {
    tape->record(
        "dice_loss",
        {detail::node_of(*tape, yhat), detail::node_of(*tape, y)}, out,
        [yhat, y, out, sums]() {
          const int N = yhat.dim(0), C = yhat.dim(1);
          const std::size_t hw =
              static_cast<std::size_t>(yhat.dim(2)) * yhat.dim(3);
          const double g = static_cast<double>(out.grad_data()[0]);
          const double invC = 1.0 / static_cast<double>(C);
          for (int c = 0; c < C; ++c) {
            const double S = (*sums)[static_cast<std::size_t>(2 * c)];
            const double D = (*sums)[static_cast<std::size_t>(2 * c + 1)];
            const double invD2 = 1.0 / (D * D);
            for (int n = 0; n < N; ++n) {
              const std::size_t base =
                  (static_cast<std::size_t>(n) * C + c) * hw;
              if (yhat.requires_grad) {
                auto& gp = yhat.ensure_grad();
                for (std::size_t i = 0; i < hw; ++i) {
                  const double p = static_cast<double>(yhat[base + i]);
                  const double r = static_cast<double>(y[base + i]);
                  // d(1 - sim_c/C)/dp = -(2r*D - 2p*S) / (C*D^2)
                  gp[base + i] += static_cast<T>(
                      -g * invC * (2.0 * r * D - 2.0 * p * S) * invD2);
                }
              }
              if (y.requires_grad) {
                auto& gr = y.ensure_grad();
                for (std::size_t i = 0; i < hw; ++i) {
                  const double p = static_cast<double>(yhat[base + i]);
                  const double r = static_cast<double>(y[base + i]);
                  gr[base + i] += static_cast<T>(
                      -g * invC * (2.0 * p * D - 2.0 * r * S) * invD2);
                }
              }
            }
          }
        });
  }
  return out;
}

}  // namespace gseg
