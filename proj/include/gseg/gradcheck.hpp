#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "gseg/random.hpp"
#include "gseg/tape.hpp"
#include "gseg/tensor.hpp"

namespace gseg {

struct GradCheckOptions {
  double epsilon = 1e-5;
  std::size_t max_coords_per_input = 64;  // sampled when the input is larger
  std::uint64_t sample_seed = 0x5eed;
  // left/right one-sided slope agreement needed to accept a coordinate; a
  // ReLU/maxpool kink inside [x-eps, x+eps] makes the sides disagree by the
  // subgradient jump and the coordinate is skipped (a central difference
  // has nothing valid to compare against there)
  double smoothness_tol = 1e-3;
};

/// Central finite-difference check of reverse-mode gradients, f64 only.
///
/// `f` maps a tape pointer to a scalar loss tensor; it must read the given
/// inputs (marked requires_grad by this function). Returns the maximum over
/// sampled coordinates of |analytic - numeric| / max(|analytic|, |numeric|,
/// 1e-12). Coordinates whose one-sided slopes disagree (a kink inside the
/// probe interval) are excluded; a wrong backward still surfaces because the
/// sides then agree with each other while disagreeing with the analytic
/// value.
inline double grad_check(
    const std::function<Tensor<double>(Tape<double>*)>& f,
    std::vector<Tensor<double>*> inputs, double epsilon,
    const GradCheckOptions& opts = {}) {
  for (Tensor<double>* in : inputs) {
    in->requires_grad = true;
    in->zero_grad();
  }
  Tape<double> tape;
  Tensor<double> loss = f(&tape);
  backward(tape, loss);
  const double f0 = loss.value();

  Rng rng(opts.sample_seed);
  double worst = 0.0;
  std::size_t kept = 0;
  for (Tensor<double>* in : inputs) {
    const std::vector<double>& analytic = in->grad_data();
    std::vector<std::size_t> coords;
    if (in->numel() <= opts.max_coords_per_input) {
      for (std::size_t i = 0; i < in->numel(); ++i) coords.push_back(i);
    } else {
      for (std::size_t k = 0; k < opts.max_coords_per_input; ++k)
        coords.push_back(rng.uniform_index(in->numel()));
    }
    for (std::size_t i : coords) {
      const double saved = (*in)[i];
      (*in)[i] = saved + epsilon;
      const double fp = f(nullptr).value();
      (*in)[i] = saved - epsilon;
      const double fm = f(nullptr).value();
      (*in)[i] = saved;
      const double right = (fp - f0) / epsilon;
      const double left = (f0 - fm) / epsilon;
      const double sides = std::fabs(right - left) /
                           std::max({std::fabs(right), std::fabs(left),
                                     1e-12});
      if (sides > opts.smoothness_tol) continue;  // kink inside the interval
      ++kept;
      const double numeric = (fp - fm) / (2.0 * epsilon);
      const double denom =
          std::max({std::fabs(analytic[i]), std::fabs(numeric), 1e-12});
      worst = std::max(worst, std::fabs(analytic[i] - numeric) / denom);
    }
  }
  if (kept == 0) {
    throw ValueError("grad_check: every sampled coordinate was non-smooth");
  }
  return worst;
}

inline double grad_check(const std::function<Tensor<double>(Tape<double>*)>& f,
                         std::vector<Tensor<double>*> inputs,
                         const GradCheckOptions& opts = {}) {
  return grad_check(f, std::move(inputs), opts.epsilon, opts);
}

}  // namespace gseg
