#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "kforge/ops.hpp"
#include "kforge/random.hpp"
#include "kforge/tensor.hpp"

namespace kforge::testing {

inline constexpr double kFdStep = 1e-5;
inline constexpr double kFdTolerance = 1e-4;
// Denominator floor for the relative error, so exact zeros compare absolutely.
inline constexpr double kFdFloor = 1e-3;

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool requires_grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

/// Random tensor with every entry at least `gap` away from zero.
inline Tensor random_nonzero(Shape shape, Rng& rng, double gap, bool requires_grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) {
    const double mag = rng.uniform(gap, 1.0);
    x = rng.uniform() < 0.5 ? -mag : mag;
  }
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

/// Scalar loss <out, probe> so every output element carries a distinct cotangent.
inline Tensor project(Tape* tape, const Tensor& out, const Tensor& probe) { return sum(tape, mul(tape, out, probe)); }

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kFdFloor});
}

/*
 * Worst relative error between tape gradients and central differences of
 * `loss` over every element of `params`. `loss` must be a pure function of
 * the parameter values.
 */
inline double max_grad_error(const std::vector<Tensor>& params, const std::function<Tensor(Tape*)>& loss) {
  for (Tensor p : params) p.zero_grad();
  Tape tape;
  tape.backward(loss(&tape));
  double worst = 0.0;
  for (Tensor p : params) {
    std::vector<double> analytic(p.numel(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    auto values = p.data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + kFdStep;
      const double up = loss(nullptr).item();
      values[i] = saved - kFdStep;
      const double down = loss(nullptr).item();
      values[i] = saved;
      worst = std::max(worst, relative_error(analytic[i], (up - down) / (2.0 * kFdStep)));
    }
  }
  return worst;
}

/// Direct nested-loop convolution with zero padding.
inline std::vector<double> conv1d_reference(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
                                            std::size_t dilation, std::size_t padding, std::size_t& t_out) {
  const std::size_t batch = x.dim(0), c_in = x.dim(1), len = x.dim(2);
  const std::size_t c_out = w.dim(0), k = w.dim(2);
  const long span = static_cast<long>(dilation * (k - 1) + 1);
  t_out = static_cast<std::size_t>((static_cast<long>(len + 2 * padding) - span) / static_cast<long>(stride) + 1);
  std::vector<double> y(batch * c_out * t_out);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < c_out; ++o)
      for (std::size_t t = 0; t < t_out; ++t) {
        double acc = bias.at(o);
        for (std::size_t c = 0; c < c_in; ++c)
          for (std::size_t j = 0; j < k; ++j) {
            const long pos = static_cast<long>(t * stride + j * dilation) - static_cast<long>(padding);
            if (pos < 0 || pos >= static_cast<long>(len)) continue;
            acc += x.at((b * c_in + c) * len + static_cast<std::size_t>(pos)) * w.at((o * c_in + c) * k + j);
          }
        y[(b * c_out + o) * t_out + t] = acc;
      }
  return y;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("kforge-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace kforge::testing
