#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "kforge/tensor.hpp"

namespace kforge {

/*
 * Differentiable primitives.
 *
 * Every op takes a Tape* first. With a tape, the op records its backward rule
 * whenever an input requires grad; with nullptr it is a plain forward pass and
 * the result never requires grad.
 */

// Output length of a 1-D convolution.
std::size_t conv1d_output_length(std::size_t length, std::size_t kernel, std::size_t stride,
                                 std::size_t dilation, std::size_t padding);

/// x [B,Cin,T], w [Cout,Cin,k], bias [Cout] -> [B,Cout,Tout], zero padding.
Tensor conv1d(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
              std::size_t dilation, std::size_t padding);

/// x [B,Fin], w [Fout,Fin], bias [Fout] -> x wᵀ + bias.
Tensor linear(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& bias);

enum class NormMode {
  kTrain,       // batch statistics, running statistics updated
  kEval,        // running statistics
  kBatchStats,  // batch statistics, running statistics untouched
};

struct BatchNormStats {
  Tensor running_mean;  // [C]
  Tensor running_var;   // [C]

  static BatchNormStats fresh(std::size_t channels);
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// x [B,C,T]; per-channel normalization followed by gamma·x̂ + beta.
Tensor batchnorm1d(Tape* tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   BatchNormStats& stats, NormMode mode);

Tensor relu(Tape* tape, const Tensor& x);
Tensor add(Tape* tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape* tape, const Tensor& x, double factor);
Tensor sum(Tape* tape, const Tensor& x);

/// [B,C,T] -> [B,C], mean over T.
Tensor global_avg_pool(Tape* tape, const Tensor& x);

/// table [V,D], one row per index -> [indices.size(), D].
Tensor embedding_lookup(Tape* tape, const Tensor& table, std::span<const std::size_t> indices);

struct LstmWeights {
  Tensor w_ih;  // [4H, I], gate rows ordered i, f, g, o
  Tensor w_hh;  // [4H, H]
  Tensor bias;  // [4H]

  std::size_t hidden_size() const { return w_hh.dim(1); }
  std::size_t input_size() const { return w_ih.dim(1); }
};

struct LstmState {
  Tensor h;  // [B, H]
  Tensor c;  // [B, H]
};

LstmState lstm_cell(Tape* tape, const Tensor& x, const LstmState& prev, const LstmWeights& weights);

struct CrossEntropyResult {
  Tensor loss;   // scalar
  Tensor probs;  // [B,K], never requires grad
};

/// Mean over the batch of -log softmax(logits)[label]. With sample_weights,
/// row b contributes weight[b]·(-log p) to the mean instead.
CrossEntropyResult softmax_cross_entropy(Tape* tape, const Tensor& logits, std::span<const std::size_t> labels,
                                         std::span<const double> sample_weights = {});

/// Row-wise softmax with max subtraction; no tape.
std::vector<double> softmax(std::span<const double> logits);

}  // namespace kforge
