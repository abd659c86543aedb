#include "kforge/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace kforge {
namespace {

bool track(Tape* tape, std::initializer_list<const Tensor*> inputs) {
  if (tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

void expect_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + " must have rank " + std::to_string(rank) + ", got " +
                     shape_to_string(t.shape()));
  }
}

void expect_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
}

}  // namespace

std::size_t conv1d_output_length(std::size_t length, std::size_t kernel, std::size_t stride, std::size_t dilation,
                                 std::size_t padding) {
  if (stride < 1 || dilation < 1 || kernel < 1) throw std::domain_error("conv1d: stride, dilation and kernel must be >= 1");
  const std::size_t span = dilation * (kernel - 1) + 1;
  if (length + 2 * padding < span) {
    throw std::domain_error("conv1d: padded length " + std::to_string(length + 2 * padding) +
                            " shorter than receptive span " + std::to_string(span));
  }
  return (length + 2 * padding - span) / stride + 1;
}

namespace {

constexpr std::size_t kChunk = 16;  // output positions per register tile

std::size_t round_up(std::size_t n, std::size_t m) { return (n + m - 1) / m * m; }

/*
 * Zero-padded input split into stride phases so that every tap reads a
 * contiguous run: phase q, index m holds padded sample m·stride + q.
 */
struct ConvGeometry {
  std::size_t batch, c_in, c_out, length, kernel, stride, dilation, padding, t_out, t_tiles, phase_len;
  std::vector<std::size_t> taps;  // start of tap j within a phase-split row

  std::size_t row(std::size_t b, std::size_t c) const { return (b * c_in + c) * stride * phase_len; }
};

ConvGeometry conv_geometry(std::size_t batch, std::size_t c_in, std::size_t c_out, std::size_t length,
                           std::size_t kernel, std::size_t stride, std::size_t dilation, std::size_t padding,
                           std::size_t t_out) {
  ConvGeometry g{batch, c_in, c_out, length, kernel, stride, dilation, padding, t_out, round_up(t_out, kChunk), 0, {}};
  g.phase_len = g.t_tiles + ((kernel - 1) * dilation) / stride + 1;
  for (std::size_t j = 0; j < kernel; ++j) g.taps.push_back((j * dilation) % stride * g.phase_len + (j * dilation) / stride);
  return g;
}

// Range of phase indices m whose padded sample m·stride + q is a real input sample.
struct PhaseRange {
  std::size_t begin, end;
};

PhaseRange phase_range(const ConvGeometry& g, std::size_t q) {
  // real samples occupy padded positions [padding, padding + length)
  const std::size_t lo = g.padding > q ? (g.padding - q + g.stride - 1) / g.stride : 0;
  const std::size_t last = g.padding + g.length;  // exclusive
  const std::size_t hi = last > q ? std::min(g.phase_len, (last - q + g.stride - 1) / g.stride) : 0;
  return {lo, std::max(lo, hi)};
}

std::vector<double> phase_split(const ConvGeometry& g, const double* x) {
  std::vector<double> out(g.batch * g.c_in * g.stride * g.phase_len, 0.0);
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t c = 0; c < g.c_in; ++c) {
      const double* src = x + (b * g.c_in + c) * g.length;
      for (std::size_t q = 0; q < g.stride; ++q) {
        const PhaseRange r = phase_range(g, q);
        double* dst = out.data() + g.row(b, c) + q * g.phase_len;
        for (std::size_t m = r.begin; m < r.end; ++m) dst[m] = src[m * g.stride + q - g.padding];
      }
    }
  }
  return out;
}

using Vec4 = double __attribute__((vector_size(32)));
using Vec4Unaligned = double __attribute__((vector_size(32), aligned(8), may_alias));

inline Vec4 load4(const double* p) { return *reinterpret_cast<const Vec4Unaligned*>(p); }
inline void store4(double* p, Vec4 v) { *reinterpret_cast<Vec4Unaligned*>(p) = v; }
inline Vec4 splat4(double v) { return Vec4{v, v, v, v}; }
inline double hsum4(Vec4 v) { return (v[0] + v[1]) + (v[2] + v[3]); }

constexpr std::size_t kLanes = kChunk / 4;

template <std::size_t OB>
void conv_forward_tile(const ConvGeometry& g, const double* xp, const double* w, const double* bias, double* y,
                       std::size_t b, std::size_t o0) {
  for (std::size_t t0 = 0; t0 < g.t_tiles; t0 += kChunk) {
    Vec4 acc[OB][kLanes];
    for (std::size_t ob = 0; ob < OB; ++ob)
      for (std::size_t l = 0; l < kLanes; ++l) acc[ob][l] = splat4(bias[o0 + ob]);
    for (std::size_t c = 0; c < g.c_in; ++c) {
      const double* xrow = xp + g.row(b, c);
      const double* wrow = w + (o0 * g.c_in + c) * g.kernel;
      for (std::size_t j = 0; j < g.kernel; ++j) {
        const double* src = xrow + g.taps[j] + t0;
        Vec4 xv[kLanes];
        for (std::size_t l = 0; l < kLanes; ++l) xv[l] = load4(src + 4 * l);
        for (std::size_t ob = 0; ob < OB; ++ob) {
          const Vec4 wv = splat4(wrow[ob * g.c_in * g.kernel + j]);
          for (std::size_t l = 0; l < kLanes; ++l) acc[ob][l] += wv * xv[l];
        }
      }
    }
    const std::size_t n = std::min(kChunk, g.t_out - std::min(t0, g.t_out));
    for (std::size_t ob = 0; ob < OB; ++ob) {
      double* dst = y + (b * g.c_out + o0 + ob) * g.t_out + t0;
      if (n == kChunk) {
        for (std::size_t l = 0; l < kLanes; ++l) store4(dst + 4 * l, acc[ob][l]);
      } else {
        for (std::size_t tt = 0; tt < n; ++tt) dst[tt] = acc[ob][tt / 4][tt % 4];
      }
    }
  }
}

// Output gradient padded with zeros to a whole number of tiles.
std::vector<double> pad_output_grad(const ConvGeometry& g, const double* gy) {
  std::vector<double> out(g.batch * g.c_out * g.t_tiles, 0.0);
  for (std::size_t r = 0; r < g.batch * g.c_out; ++r) {
    std::copy(gy + r * g.t_out, gy + (r + 1) * g.t_out, out.begin() + static_cast<std::ptrdiff_t>(r * g.t_tiles));
  }
  return out;
}

template <std::size_t OB>
void conv_weight_grad_tile(const ConvGeometry& g, const double* xp, const double* gyp, double* gw, std::size_t b,
                           std::size_t o0) {
  const std::size_t n = g.t_tiles;
  const double* gyrow = gyp + (b * g.c_out + o0) * n;
  for (std::size_t c = 0; c < g.c_in; ++c) {
    const double* xrow = xp + g.row(b, c);
    for (std::size_t j = 0; j < g.kernel; ++j) {
      const double* src = xrow + g.taps[j];
      Vec4 acc[OB] = {};
      for (std::size_t t = 0; t < n; t += 4) {
        const Vec4 xv = load4(src + t);
        for (std::size_t ob = 0; ob < OB; ++ob) acc[ob] += load4(gyrow + ob * n + t) * xv;
      }
      for (std::size_t ob = 0; ob < OB; ++ob) gw[((o0 + ob) * g.c_in + c) * g.kernel + j] += hsum4(acc[ob]);
    }
  }
}

constexpr std::size_t kMaxTaps = 4;
constexpr std::size_t kGradChunk = 8;

// Gradient w.r.t. the phase-split padded input for one (batch, channel) row.
void conv_input_grad_row(const ConvGeometry& g, const double* w, const double* gyp, double* gxp, std::size_t b,
                         std::size_t c) {
  constexpr std::size_t lanes = kGradChunk / 4;
  const std::size_t n = g.t_tiles;
  double* row = gxp + g.row(b, c);
  for (std::size_t j0 = 0; j0 < g.kernel; j0 += kMaxTaps) {
    const std::size_t taps = std::min(kMaxTaps, g.kernel - j0);
    for (std::size_t t0 = 0; t0 < n; t0 += kGradChunk) {
      Vec4 acc[kMaxTaps][lanes] = {};
      for (std::size_t o = 0; o < g.c_out; ++o) {
        const double* gyrow = gyp + (b * g.c_out + o) * n + t0;
        const double* wrow = w + (o * g.c_in + c) * g.kernel + j0;
        Vec4 gv[lanes];
        for (std::size_t l = 0; l < lanes; ++l) gv[l] = load4(gyrow + 4 * l);
        for (std::size_t j = 0; j < kMaxTaps; ++j) {
          const Vec4 wv = splat4(j < taps ? wrow[j] : 0.0);
          for (std::size_t l = 0; l < lanes; ++l) acc[j][l] += wv * gv[l];
        }
      }
      for (std::size_t j = 0; j < taps; ++j) {
        double* dst = row + g.taps[j0 + j] + t0;
        for (std::size_t l = 0; l < lanes; ++l) store4(dst + 4 * l, load4(dst + 4 * l) + acc[j][l]);
      }
    }
  }
}

}  // namespace

Tensor conv1d(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
              std::size_t dilation, std::size_t padding) {
  expect_rank(x, 3, "conv1d input");
  expect_rank(w, 3, "conv1d weight");
  expect_rank(bias, 1, "conv1d bias");
  const std::size_t batch = x.dim(0), c_in = x.dim(1), length = x.dim(2);
  const std::size_t c_out = w.dim(0), kernel = w.dim(2);
  if (w.dim(1) != c_in) {
    throw ShapeError("conv1d: weight expects " + std::to_string(w.dim(1)) + " input channels, input has " +
                     std::to_string(c_in));
  }
  if (bias.dim(0) != c_out) throw ShapeError("conv1d: bias length does not match output channels");
  const std::size_t t_out = conv1d_output_length(length, kernel, stride, dilation, padding);
  const ConvGeometry g = conv_geometry(batch, c_in, c_out, length, kernel, stride, dilation, padding, t_out);

  const bool tracked = track(tape, {&x, &w, &bias});
  Tensor y = Tensor::empty({batch, c_out, t_out}, tracked);
  {
    const std::vector<double> xp = phase_split(g, x.data().data());
    const double* wp = w.data().data();
    const double* bp = bias.data().data();
    double* yp = y.data().data();
    for (std::size_t b = 0; b < batch; ++b) {
      std::size_t o = 0;
      for (; o + 4 <= c_out; o += 4) conv_forward_tile<4>(g, xp.data(), wp, bp, yp, b, o);
      for (; o < c_out; ++o) conv_forward_tile<1>(g, xp.data(), wp, bp, yp, b, o);
    }
  }

  if (tracked) {
    tape->record(y, [=, x = Tensor(x), w = Tensor(w), bias = Tensor(bias)]() mutable {
      const std::vector<double> gyp = pad_output_grad(g, y.grad().data());
      if (bias.requires_grad()) {
        double* gb = bias.ensure_grad().data();
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t o = 0; o < c_out; ++o) {
            const double* row = gyp.data() + (b * c_out + o) * g.t_tiles;
            double acc = 0.0;
#pragma omp simd reduction(+ : acc)
            for (std::size_t t = 0; t < g.t_tiles; ++t) acc += row[t];
            gb[o] += acc;
          }
        }
      }
      if (w.requires_grad()) {
        const std::vector<double> xp = phase_split(g, x.data().data());
        double* gw = w.ensure_grad().data();
        for (std::size_t b = 0; b < batch; ++b) {
          std::size_t o = 0;
          for (; o + 4 <= c_out; o += 4) conv_weight_grad_tile<4>(g, xp.data(), gyp.data(), gw, b, o);
          for (; o < c_out; ++o) conv_weight_grad_tile<1>(g, xp.data(), gyp.data(), gw, b, o);
        }
      }
      if (x.requires_grad()) {
        std::vector<double> gxp(batch * c_in * stride * g.phase_len, 0.0);
        const double* wv = w.data().data();
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t c = 0; c < c_in; ++c) conv_input_grad_row(g, wv, gyp.data(), gxp.data(), b, c);
        double* gx = x.ensure_grad().data();
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t c = 0; c < c_in; ++c) {
            const double* src = gxp.data() + g.row(b, c);
            double* dst = gx + (b * c_in + c) * length;
            for (std::size_t q = 0; q < stride; ++q) {
              const PhaseRange r = phase_range(g, q);
              const double* phase = src + q * g.phase_len;
              for (std::size_t m = r.begin; m < r.end; ++m) dst[m * stride + q - padding] += phase[m];
            }
          }
        }
      }
    });
  }
  return y;
}

Tensor linear(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& bias) {
  expect_rank(x, 2, "linear input");
  expect_rank(w, 2, "linear weight");
  expect_rank(bias, 1, "linear bias");
  const std::size_t batch = x.dim(0), f_in = x.dim(1), f_out = w.dim(0);
  if (w.dim(1) != f_in) {
    throw ShapeError("linear: weight " + shape_to_string(w.shape()) + " incompatible with input " +
                     shape_to_string(x.shape()));
  }
  if (bias.dim(0) != f_out) throw ShapeError("linear: bias length does not match output features");

  const bool tracked = track(tape, {&x, &w, &bias});
  Tensor y = Tensor::zeros({batch, f_out}, tracked);
  const double* xp = x.data().data();
  const double* wp = w.data().data();
  const double* bp = bias.data().data();
  double* yp = y.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < f_out; ++o) {
      double acc = 0.0;
      for (std::size_t i = 0; i < f_in; ++i) acc += xp[b * f_in + i] * wp[o * f_in + i];
      yp[b * f_out + o] = acc + bp[o];
    }
  }

  if (tracked) {
    tape->record(y, [=, x = Tensor(x), w = Tensor(w), bias = Tensor(bias)]() mutable {
      const double* gy = y.grad().data();
      const double* xv = x.data().data();
      const double* wv = w.data().data();
      double* gx = x.requires_grad() ? x.ensure_grad().data() : nullptr;
      double* gw = w.requires_grad() ? w.ensure_grad().data() : nullptr;
      double* gb = bias.requires_grad() ? bias.ensure_grad().data() : nullptr;
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t o = 0; o < f_out; ++o) {
          const double g = gy[b * f_out + o];
          if (gb) gb[o] += g;
          for (std::size_t i = 0; i < f_in; ++i) {
            if (gx) gx[b * f_in + i] += g * wv[o * f_in + i];
            if (gw) gw[o * f_in + i] += g * xv[b * f_in + i];
          }
        }
      }
    });
  }
  return y;
}

BatchNormStats BatchNormStats::fresh(std::size_t channels) {
  return {Tensor::zeros({channels}), Tensor::full({channels}, 1.0)};
}

Tensor batchnorm1d(Tape* tape, const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats,
                   NormMode mode) {
  expect_rank(x, 3, "batchnorm1d input");
  const std::size_t batch = x.dim(0), channels = x.dim(1), length = x.dim(2);
  if (gamma.shape() != Shape{channels} || beta.shape() != Shape{channels}) {
    throw ShapeError("batchnorm1d: gamma/beta must have shape [" + std::to_string(channels) + "]");
  }
  if (stats.running_mean.shape() != Shape{channels} || stats.running_var.shape() != Shape{channels}) {
    throw ShapeError("batchnorm1d: running statistics have the wrong channel count");
  }
  const std::size_t count = batch * length;
  const bool batch_stats = mode != NormMode::kEval;
  if (batch_stats && count < 2) {
    throw std::domain_error("batchnorm1d: batch statistics need at least 2 values per channel, got " +
                            std::to_string(count));
  }

  const bool tracked = track(tape, {&x, &gamma, &beta});
  Tensor y = Tensor::empty(x.shape(), tracked);
  // x̂ and 1/σ are kept for the backward pass.
  std::vector<double, UninitAllocator<double>> xhat(tracked ? x.numel() : 0);
  std::vector<double> inv_std(channels);

  const double* xp = x.data().data();
  const double* gp = gamma.data().data();
  const double* bp = beta.data().data();
  double* yp = y.data().data();
  double* rmean = stats.running_mean.data().data();
  double* rvar = stats.running_var.data().data();

  for (std::size_t c = 0; c < channels; ++c) {
    double mean, var;
    if (batch_stats) {
      double acc = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* row = xp + (b * channels + c) * length;
#pragma omp simd reduction(+ : acc)
        for (std::size_t t = 0; t < length; ++t) acc += row[t];
      }
      mean = acc / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* row = xp + (b * channels + c) * length;
#pragma omp simd reduction(+ : sq)
        for (std::size_t t = 0; t < length; ++t) sq += (row[t] - mean) * (row[t] - mean);
      }
      var = sq / static_cast<double>(count);
      if (mode == NormMode::kTrain) {
        const double unbiased = sq / static_cast<double>(count - 1);
        rmean[c] = (1.0 - kBatchNormMomentum) * rmean[c] + kBatchNormMomentum * mean;
        rvar[c] = (1.0 - kBatchNormMomentum) * rvar[c] + kBatchNormMomentum * unbiased;
      }
    } else {
      mean = rmean[c];
      var = rvar[c];
    }
    const double istd = 1.0 / std::sqrt(var + kBatchNormEps);
    inv_std[c] = istd;
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t base = (b * channels + c) * length;
      if (tracked) {
        for (std::size_t t = 0; t < length; ++t) {
          const double xh = (xp[base + t] - mean) * istd;
          xhat[base + t] = xh;
          yp[base + t] = gp[c] * xh + bp[c];
        }
      } else {
        for (std::size_t t = 0; t < length; ++t) yp[base + t] = gp[c] * ((xp[base + t] - mean) * istd) + bp[c];
      }
    }
  }

  if (tracked) {
    tape->record(y, [=, x = Tensor(x), gamma = Tensor(gamma), beta = Tensor(beta), xhat = std::move(xhat),
                    inv_std = std::move(inv_std)]() mutable {
      const double* gy = y.grad().data();
      const double* gam = gamma.data().data();
      double* gx = x.requires_grad() ? x.ensure_grad().data() : nullptr;
      double* gg = gamma.requires_grad() ? gamma.ensure_grad().data() : nullptr;
      double* gbeta = beta.requires_grad() ? beta.ensure_grad().data() : nullptr;
      const double n = static_cast<double>(count);
      for (std::size_t c = 0; c < channels; ++c) {
        double sum_gy = 0.0, sum_gy_xhat = 0.0;
        for (std::size_t b = 0; b < batch; ++b) {
          const std::size_t base = (b * channels + c) * length;
#pragma omp simd reduction(+ : sum_gy, sum_gy_xhat)
          for (std::size_t t = 0; t < length; ++t) {
            sum_gy += gy[base + t];
            sum_gy_xhat += gy[base + t] * xhat[base + t];
          }
        }
        if (gg) gg[c] += sum_gy_xhat;
        if (gbeta) gbeta[c] += sum_gy;
        if (!gx) continue;
        const double k = gam[c] * inv_std[c];
        for (std::size_t b = 0; b < batch; ++b) {
          const std::size_t base = (b * channels + c) * length;
          for (std::size_t t = 0; t < length; ++t) {
            if (batch_stats) {
              gx[base + t] += k * (gy[base + t] - sum_gy / n - xhat[base + t] * sum_gy_xhat / n);
            } else {
              gx[base + t] += k * gy[base + t];
            }
          }
        }
      }
    });
  }
  return y;
}

Tensor relu(Tape* tape, const Tensor& x) {
  const bool tracked = track(tape, {&x});
  Tensor y = Tensor::empty(x.shape(), tracked);
  const auto xs = x.data();
  auto ys = y.data();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = xs[i] > 0.0 ? xs[i] : 0.0;
  if (tracked) {
    tape->record(y, [y, x = Tensor(x)]() mutable {
      const auto gy = y.grad();
      const auto xv = x.data();
      auto gx = x.ensure_grad();
      // Subgradient at exactly zero is 0.
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += xv[i] > 0.0 ? gy[i] : 0.0;
    });
  }
  return y;
}

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
  expect_same_shape(a, b, "add");
  const bool tracked = track(tape, {&a, &b});
  Tensor y = Tensor::empty(a.shape(), tracked);
  const auto as = a.data();
  const auto bs = b.data();
  auto ys = y.data();
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = as[i] + bs[i];
  if (tracked) {
    tape->record(y, [y, a = Tensor(a), b = Tensor(b)]() mutable {
      const auto gy = y.grad();
      for (Tensor* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto g = t->ensure_grad();
        for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
      }
    });
  }
  return y;
}

Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
  expect_same_shape(a, b, "mul");
  const bool tracked = track(tape, {&a, &b});
  Tensor y = Tensor::empty(a.shape(), tracked);
  const auto as = a.data();
  const auto bs = b.data();
  auto ys = y.data();
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = as[i] * bs[i];
  if (tracked) {
    tape->record(y, [y, a = Tensor(a), b = Tensor(b)]() mutable {
      const auto gy = y.grad();
      if (a.requires_grad()) {
        auto g = a.ensure_grad();
        const auto bv = b.data();
        for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * bv[i];
      }
      if (b.requires_grad()) {
        auto g = b.ensure_grad();
        const auto av = a.data();
        for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * av[i];
      }
    });
  }
  return y;
}

Tensor scale(Tape* tape, const Tensor& x, double factor) {
  const bool tracked = track(tape, {&x});
  Tensor y = Tensor::empty(x.shape(), tracked);
  const auto xs = x.data();
  auto ys = y.data();
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = xs[i] * factor;
  if (tracked) {
    tape->record(y, [y, x = Tensor(x), factor]() mutable {
      const auto gy = y.grad();
      auto gx = x.ensure_grad();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * factor;
    });
  }
  return y;
}

Tensor sum(Tape* tape, const Tensor& x) {
  const bool tracked = track(tape, {&x});
  double acc = 0.0;
  const auto xs = x.data();
#pragma omp simd reduction(+ : acc)
  for (std::size_t i = 0; i < xs.size(); ++i) acc += xs[i];
  Tensor y = Tensor::scalar(acc, tracked);
  if (tracked) {
    tape->record(y, [y, x = Tensor(x)]() mutable {
      const double g = y.grad()[0];
      for (double& gx : x.ensure_grad()) gx += g;
    });
  }
  return y;
}

Tensor global_avg_pool(Tape* tape, const Tensor& x) {
  expect_rank(x, 3, "global_avg_pool input");
  const std::size_t batch = x.dim(0), channels = x.dim(1), length = x.dim(2);
  const bool tracked = track(tape, {&x});
  Tensor y = Tensor::zeros({batch, channels}, tracked);
  const double* xp = x.data().data();
  double* yp = y.data().data();
  const double inv = 1.0 / static_cast<double>(length);
  for (std::size_t r = 0; r < batch * channels; ++r) {
    double acc = 0.0;
    for (std::size_t t = 0; t < length; ++t) acc += xp[r * length + t];
    yp[r] = acc * inv;
  }
  if (tracked) {
    tape->record(y, [=, x = Tensor(x)]() mutable {
      const double* gy = y.grad().data();
      double* gx = x.ensure_grad().data();
      for (std::size_t r = 0; r < batch * channels; ++r) {
        const double g = gy[r] * inv;
        for (std::size_t t = 0; t < length; ++t) gx[r * length + t] += g;
      }
    });
  }
  return y;
}

Tensor embedding_lookup(Tape* tape, const Tensor& table, std::span<const std::size_t> indices) {
  expect_rank(table, 2, "embedding table");
  if (indices.empty()) throw ShapeError("embedding_lookup: no indices given");
  const std::size_t rows = table.dim(0), width = table.dim(1);
  for (std::size_t idx : indices) {
    if (idx >= rows) {
      throw std::out_of_range("embedding_lookup: index " + std::to_string(idx) + " outside table of " +
                              std::to_string(rows) + " rows");
    }
  }
  const bool tracked = track(tape, {&table});
  Tensor y = Tensor::zeros({indices.size(), width}, tracked);
  const double* tp = table.data().data();
  double* yp = y.data().data();
  for (std::size_t b = 0; b < indices.size(); ++b) {
    std::copy_n(tp + indices[b] * width, width, yp + b * width);
  }
  if (tracked) {
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    tape->record(y, [=, table = Tensor(table), idx = std::move(idx)]() mutable {
      const double* gy = y.grad().data();
      double* gt = table.ensure_grad().data();
      for (std::size_t b = 0; b < idx.size(); ++b) {
        for (std::size_t k = 0; k < width; ++k) gt[idx[b] * width + k] += gy[b * width + k];
      }
    });
  }
  return y;
}

namespace {
double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }
}  // namespace

LstmState lstm_cell(Tape* tape, const Tensor& x, const LstmState& prev, const LstmWeights& weights) {
  expect_rank(x, 2, "lstm input");
  expect_rank(weights.w_ih, 2, "lstm w_ih");
  expect_rank(weights.w_hh, 2, "lstm w_hh");
  const std::size_t hidden = weights.w_hh.dim(1);
  const std::size_t in = weights.w_ih.dim(1);
  const std::size_t batch = x.dim(0);
  if (weights.w_hh.dim(0) != 4 * hidden || weights.w_ih.dim(0) != 4 * hidden ||
      weights.bias.shape() != Shape{4 * hidden}) {
    throw ShapeError("lstm_cell: weights must be [4H,I], [4H,H], [4H]");
  }
  if (x.dim(1) != in) {
    throw ShapeError("lstm_cell: input width " + std::to_string(x.dim(1)) + " but weights expect " +
                     std::to_string(in));
  }
  if (prev.h.shape() != Shape{batch, hidden} || prev.c.shape() != Shape{batch, hidden}) {
    throw ShapeError("lstm_cell: state must be [" + std::to_string(batch) + "," + std::to_string(hidden) + "]");
  }

  const Tensor& h = prev.h;
  const Tensor& c = prev.c;
  const Tensor& w_ih = weights.w_ih;
  const Tensor& w_hh = weights.w_hh;
  const Tensor& bias = weights.bias;
  const bool tracked = track(tape, {&x, &h, &c, &w_ih, &w_hh, &bias});

  // Post-activation gates [B, 4H] in order i, f, g, o.
  std::vector<double> gates(batch * 4 * hidden);
  const double* xp = x.data().data();
  const double* hp = h.data().data();
  const double* cp = c.data().data();
  const double* wi = w_ih.data().data();
  const double* wh = w_hh.data().data();
  const double* bp = bias.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t r = 0; r < 4 * hidden; ++r) {
      double acc = bp[r];
      for (std::size_t k = 0; k < in; ++k) acc += wi[r * in + k] * xp[b * in + k];
      for (std::size_t k = 0; k < hidden; ++k) acc += wh[r * hidden + k] * hp[b * hidden + k];
      const bool is_candidate = r >= 2 * hidden && r < 3 * hidden;
      gates[b * 4 * hidden + r] = is_candidate ? std::tanh(acc) : sigmoid(acc);
    }
  }

  Tensor h_next = Tensor::zeros({batch, hidden}, tracked);
  Tensor c_next = Tensor::zeros({batch, hidden}, tracked);
  std::vector<double> tanh_c(batch * hidden);
  double* hn = h_next.data().data();
  double* cn = c_next.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const double* g = gates.data() + b * 4 * hidden;
    for (std::size_t k = 0; k < hidden; ++k) {
      const double ig = g[k], fg = g[hidden + k], cg = g[2 * hidden + k], og = g[3 * hidden + k];
      const double cv = fg * cp[b * hidden + k] + ig * cg;
      cn[b * hidden + k] = cv;
      tanh_c[b * hidden + k] = std::tanh(cv);
      hn[b * hidden + k] = og * tanh_c[b * hidden + k];
    }
  }

  if (tracked) {
    tape->record({h_next, c_next}, [=, x = Tensor(x), h = Tensor(h), c = Tensor(c), w_ih = Tensor(w_ih), w_hh = Tensor(w_hh),
                              bias = Tensor(bias), gates = std::move(gates), tanh_c = std::move(tanh_c)]() mutable {
      const double* ghn = h_next.has_grad() ? h_next.grad().data() : nullptr;
      const double* gcn = c_next.has_grad() ? c_next.grad().data() : nullptr;
      const double* xv = x.data().data();
      const double* hv = h.data().data();
      const double* cv = c.data().data();
      const double* wiv = w_ih.data().data();
      const double* whv = w_hh.data().data();
      double* gx = x.requires_grad() ? x.ensure_grad().data() : nullptr;
      double* gh = h.requires_grad() ? h.ensure_grad().data() : nullptr;
      double* gc = c.requires_grad() ? c.ensure_grad().data() : nullptr;
      double* gwi = w_ih.requires_grad() ? w_ih.ensure_grad().data() : nullptr;
      double* gwh = w_hh.requires_grad() ? w_hh.ensure_grad().data() : nullptr;
      double* gb = bias.requires_grad() ? bias.ensure_grad().data() : nullptr;

      // Gradient w.r.t. gate pre-activations.
      std::vector<double> gpre(batch * 4 * hidden);
      for (std::size_t b = 0; b < batch; ++b) {
        const double* g = gates.data() + b * 4 * hidden;
        double* d = gpre.data() + b * 4 * hidden;
        for (std::size_t k = 0; k < hidden; ++k) {
          const std::size_t bk = b * hidden + k;
          const double ig = g[k], fg = g[hidden + k], cg = g[2 * hidden + k], og = g[3 * hidden + k];
          const double dh = ghn ? ghn[bk] : 0.0;
          const double dc = (gcn ? gcn[bk] : 0.0) + dh * og * (1.0 - tanh_c[bk] * tanh_c[bk]);
          if (gc) gc[bk] += dc * fg;
          d[k] = dc * cg * ig * (1.0 - ig);
          d[hidden + k] = dc * cv[bk] * fg * (1.0 - fg);
          d[2 * hidden + k] = dc * ig * (1.0 - cg * cg);
          d[3 * hidden + k] = dh * tanh_c[bk] * og * (1.0 - og);
        }
      }
      for (std::size_t b = 0; b < batch; ++b) {
        const double* d = gpre.data() + b * 4 * hidden;
        for (std::size_t r = 0; r < 4 * hidden; ++r) {
          const double dr = d[r];
          if (dr == 0.0) continue;
          if (gb) gb[r] += dr;
          for (std::size_t k = 0; k < in; ++k) {
            if (gwi) gwi[r * in + k] += dr * xv[b * in + k];
            if (gx) gx[b * in + k] += dr * wiv[r * in + k];
          }
          for (std::size_t k = 0; k < hidden; ++k) {
            if (gwh) gwh[r * hidden + k] += dr * hv[b * hidden + k];
            if (gh) gh[b * hidden + k] += dr * whv[r * hidden + k];
          }
        }
      }
    });
  }
  return {h_next, c_next};
}

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw ShapeError("softmax of an empty row");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    p[k] = std::exp(logits[k] - mx);
    z += p[k];
  }
  for (double& v : p) v /= z;
  return p;
}

CrossEntropyResult softmax_cross_entropy(Tape* tape, const Tensor& logits, std::span<const std::size_t> labels,
                                         std::span<const double> sample_weights) {
  expect_rank(logits, 2, "cross-entropy logits");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch) throw ShapeError("softmax_cross_entropy: one label per row required");
  if (!sample_weights.empty() && sample_weights.size() != batch) {
    throw ShapeError("softmax_cross_entropy: one weight per row required");
  }
  for (std::size_t y : labels) {
    if (y >= classes) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(y) + " outside [0," +
                              std::to_string(classes) + ")");
    }
  }

  Tensor probs = Tensor::zeros({batch, classes});
  const double* lp = logits.data().data();
  double* pp = probs.data().data();
  double loss = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* row = lp + b * classes;
    const double mx = *std::max_element(row, row + classes);
    double z = 0.0;
    for (std::size_t k = 0; k < classes; ++k) z += std::exp(row[k] - mx);
    const double log_z = mx + std::log(z);
    for (std::size_t k = 0; k < classes; ++k) pp[b * classes + k] = std::exp(row[k] - log_z);
    const double weight = sample_weights.empty() ? 1.0 : sample_weights[b];
    loss += weight * (log_z - row[labels[b]]);
  }
  loss /= static_cast<double>(batch);

  const bool tracked = track(tape, {&logits});
  Tensor out = Tensor::scalar(loss, tracked);
  if (tracked) {
    std::vector<std::size_t> lab(labels.begin(), labels.end());
    std::vector<double> weights(sample_weights.begin(), sample_weights.end());
    tape->record(out, [=, logits = Tensor(logits), lab = std::move(lab), weights = std::move(weights)]() mutable {
      const double g = out.grad()[0] / static_cast<double>(batch);
      const double* pv = probs.data().data();
      double* gl = logits.ensure_grad().data();
      for (std::size_t b = 0; b < batch; ++b) {
        const double gw = g * (weights.empty() ? 1.0 : weights[b]);
        for (std::size_t k = 0; k < classes; ++k) {
          gl[b * classes + k] += gw * (pv[b * classes + k] - (k == lab[b] ? 1.0 : 0.0));
        }
      }
    });
  }
  return {out, probs};
}

}  // namespace kforge
