#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "kforge/checkpoint.hpp"
#include "kforge/ops.hpp"
#include "kforge/optim.hpp"
#include "kforge/random.hpp"
#include "kforge/search_space.hpp"

namespace kforge {

struct ControllerConfig {
  std::size_t num_choices = kNumKernelChoices;
  std::size_t num_positions = 8;
  std::size_t input_size = 64;
  std::size_t hidden_size = 64;
  double lr = 0.01;
  double grad_clip = 5.0;
  double init_range = 0.1;  // parameters start uniform in ±init_range
};

/// Exponential moving average of rewards, subtracted to form advantages.
struct RewardBaseline {
  double value = 0.0;
  double decay = 0.95;
  bool initialized = false;

  /// Reads as 0 until the first update.
  double current() const { return initialized ? value : 0.0; }
  /// First call sets b to the batch mean; later calls b ← β·b + (1−β)·mean.
  void update(std::span<const double> rewards);
};

struct SampleRecord {
  Architecture arch;
  std::vector<double> log_probs;  // log P(a_l | a_<l), one per position
  std::optional<double> reward;

  double total_log_prob() const;
};

/*
 * Single-layer LSTM policy over kernel tokens.
 *
 * Step 1 reads the learned start embedding (row n of the table); step l > 1
 * reads the embedding of the token emitted at step l−1. A shared linear head
 * maps the hidden state to n logits.
 */
class Controller {
 public:
  Controller(ControllerConfig config, Rng& init_rng);

  Controller(const Controller&) = delete;
  Controller& operator=(const Controller&) = delete;
  Controller(Controller&&) = default;
  Controller& operator=(Controller&&) = default;

  SampleRecord sample(Rng& rng) const;
  /// Softmax distribution at every step under teacher forcing of arch.
  std::vector<std::vector<double>> step_distributions(const Architecture& arch) const;
  double log_prob_of(const Architecture& arch) const;

  /// Records the surrogate −(1/m) Σ_k Σ_l log P(a_l^k)·(R_k − b) and leaves its
  /// gradient in the parameters without stepping. Returns the surrogate.
  double reinforce_gradient(std::span<const SampleRecord> records, double baseline);
  /// reinforce_gradient, global-norm clipping, one SGD step, then zero_grad.
  double reinforce_update(std::span<const SampleRecord> records, const RewardBaseline& baseline);

  std::vector<Tensor> parameters() const;
  void zero_grad();
  const ControllerConfig& config() const { return config_; }
  Tensor& embedding() { return embedding_; }
  LstmWeights& lstm() { return lstm_; }
  Tensor& head_weight() { return head_weight_; }
  Tensor& head_bias() { return head_bias_; }
  Sgd& optimizer() { return optimizer_; }

  void save(Checkpoint& ckpt, const RewardBaseline& baseline) const;
  void load(const Checkpoint& ckpt, RewardBaseline& baseline);

 private:
  /// Logits [B, n] for every step of a teacher-forced batch.
  std::vector<Tensor> teacher_forced_logits(Tape* tape, std::span<const Architecture> batch) const;
  LstmState initial_state(std::size_t batch) const;

  ControllerConfig config_;
  Tensor embedding_;  // [n + 1, I]
  LstmWeights lstm_;
  Tensor head_weight_;  // [n, H]
  Tensor head_bias_;    // [n]
  Sgd optimizer_;
};

}  // namespace kforge
