#include "kforge/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace kforge {

Sgd::Sgd(std::vector<Tensor> params, double lr) : params_(std::move(params)), lr_(lr) {}

void Sgd::step() {
  for (Tensor& p : params_) {
    if (!p.has_grad()) continue;
    auto data = p.data();
    const auto grad = p.grad();
    for (std::size_t i = 0; i < data.size(); ++i) data[i] -= lr_ * grad[i];
  }
  ++steps_;
}

void Sgd::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

Adam::Adam(std::vector<Tensor> params, AdamOptions options) : options_(options) {
  slots_.reserve(params.size());
  for (Tensor& p : params) {
    const std::size_t n = p.numel();
    slots_.push_back({p, std::vector<double>(n, 0.0), std::vector<double>(n, 0.0), 0});
  }
}

void Adam::step() {
  const auto& o = options_;
  for (Slot& s : slots_) {
    if (!s.param.has_grad()) continue;
    ++s.steps;
    const double t = static_cast<double>(s.steps);
    const double bc1 = 1.0 - std::pow(o.beta1, t);
    const double bc2 = 1.0 - std::pow(o.beta2, t);
    auto data = s.param.data();
    const auto grad = s.param.grad();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = grad[i] + o.weight_decay * data[i];
      s.m[i] = o.beta1 * s.m[i] + (1.0 - o.beta1) * g;
      s.v[i] = o.beta2 * s.v[i] + (1.0 - o.beta2) * g * g;
      const double m_hat = s.m[i] / bc1;
      const double v_hat = s.v[i] / bc2;
      data[i] -= o.lr * m_hat / (std::sqrt(v_hat) + o.eps);
    }
  }
  ++steps_;
}

void Adam::zero_grad() {
  for (Slot& s : slots_) s.param.zero_grad();
}

double cosine_annealing_lr(std::int64_t step, std::int64_t total_steps, double lr_max, double lr_min) {
  if (total_steps < 1) throw std::domain_error("cosine_annealing_lr: total_steps must be >= 1");
  if (step < 0 || step > total_steps) {
    throw std::domain_error("cosine_annealing_lr: step " + std::to_string(step) + " outside [0, " +
                            std::to_string(total_steps) + "]");
  }
  const double phase = std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(phase));
}

double clip_grad_norm(std::vector<Tensor>& params, double max_norm) {
  double sq = 0.0;
  for (const Tensor& p : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double factor = max_norm / norm;
    for (Tensor& p : params) {
      if (!p.has_grad()) continue;
      for (double& g : p.grad()) g *= factor;
    }
  }
  return norm;
}

}  // namespace kforge
