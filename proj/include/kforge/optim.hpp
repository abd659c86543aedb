#pragma once

#include <cstdint>
#include <vector>

#include "kforge/tensor.hpp"

namespace kforge {

/// Plain SGD: p ← p − lr·g. Parameters without a gradient are left alone.
class Sgd {
 public:
  Sgd(std::vector<Tensor> params, double lr);

  void step();
  void zero_grad();

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  std::uint64_t steps() const { return steps_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  double lr_;
  std::uint64_t steps_ = 0;
};

struct AdamOptions {
  double lr = 1e-3;
  double weight_decay = 0.0;  // L2 term λ·p added to the gradient
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/*
 * Adam with bias correction and gradient-coupled L2 regularization.
 *
 * Moments and step counts are kept per parameter, and a parameter is only
 * touched when it carries a gradient. With a shared kernel bank most entries
 * are idle on any given step and must stay bit-identical.
 */
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions options = {});

  void step();
  void zero_grad();

  double lr() const { return options_.lr; }
  void set_lr(double lr) { options_.lr = lr; }
  const AdamOptions& options() const { return options_; }
  std::uint64_t steps() const { return steps_; }
  std::uint64_t param_steps(std::size_t index) const { return slots_.at(index).steps; }
  const std::vector<double>& first_moment(std::size_t index) const { return slots_.at(index).m; }
  const std::vector<double>& second_moment(std::size_t index) const { return slots_.at(index).v; }

 private:
  struct Slot {
    Tensor param;
    std::vector<double> m;
    std::vector<double> v;
    std::uint64_t steps = 0;
  };
  std::vector<Slot> slots_;
  AdamOptions options_;
  std::uint64_t steps_ = 0;
};

/// lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total_steps)).
double cosine_annealing_lr(std::int64_t step, std::int64_t total_steps, double lr_max, double lr_min);

/// Rescales all present gradients so their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(std::vector<Tensor>& params, double max_norm);

}  // namespace kforge
