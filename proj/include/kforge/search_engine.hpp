#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kforge/controller.hpp"
#include "kforge/data.hpp"
#include "kforge/optim.hpp"
#include "kforge/search_space.hpp"

namespace kforge {

struct SearchConfig {
  std::size_t epochs = 200;
  std::size_t controller_steps = 5;
  std::size_t archs_per_step = 20;
  std::size_t final_samples = 100;
  std::size_t batch_size = 128;
  double child_lr = 1e-3;
  double child_weight_decay = 1e-4;
  std::size_t reward_batch_size = 128;
  bool reward_full_validation = false;  // score rewards on all of D_val instead of one mini-batch
  std::size_t trend_samples = 50;
  std::size_t scratch_epochs = 50;

  void validate() const;
};

/// Options for training one fixed architecture from fresh parameters.
struct ScratchConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 128;
  double lr = 1e-3;
  double lr_min = 0.0;
  double weight_decay = 1e-4;
  std::size_t eval_batch_size = 256;

  static ScratchConfig from(const SearchConfig& search);
};

struct MetricsRow {
  std::size_t epoch = 0;
  double mean_acc = 0.0;
  double max_acc = 0.0;
  double min_acc = 0.0;
  double baseline = 0.0;
  double ctrl_loss = 0.0;
  double seconds = 0.0;
};

struct MetricsLog {
  static constexpr const char* kHeader = "epoch,mean_acc,max_acc,min_acc,baseline,ctrl_loss,seconds";

  std::vector<MetricsRow> rows;

  std::string to_csv() const;
  void write_csv(const std::filesystem::path& path) const;
};

using ArchSampler = std::function<Architecture(Rng&)>;
using RewardFn = std::function<double(const Architecture&)>;
/// Scores the m architectures of one controller step.
using BatchRewardFn = std::function<std::vector<double>(std::span<const Architecture>)>;

/// Fraction of argmax-correct rows of a logits matrix.
double accuracy_of(const Tensor& logits, std::span<const std::size_t> labels);

/// Accuracy of a network over the given windows, forwarded in chunks of chunk_size.
double evaluate(ChildNetwork& net, const WindowedDataset& data, NormMode mode, std::size_t chunk_size = 256);
double evaluate(ChildNetwork& net, const WindowedDataset& data, std::span<const std::size_t> indices, NormMode mode,
                std::size_t chunk_size = 256);
/// Weight-sharing accuracy of arch, normalized with per-chunk batch statistics.
double evaluate_shared(KernelBank& bank, const Architecture& arch, const WindowedDataset& data,
                       std::size_t chunk_size);
double evaluate_shared(KernelBank& bank, const Architecture& arch, const WindowedDataset& data,
                       std::span<const std::size_t> indices, std::size_t chunk_size);

/// Consecutive mini-batches of a fresh permutation of [0, n); the last one may be short.
std::vector<std::vector<std::size_t>> shuffled_batches(std::size_t n, std::size_t batch_size, Rng& rng);

/// One Adam step of arch on (x, labels) through the bank. Gradients are cleared
/// before the backward pass and left in place afterwards. Returns the loss.
double shared_train_step(KernelBank& bank, Adam& optimizer, const Architecture& arch, const Tensor& x,
                         std::span<const std::size_t> labels);

struct SharedEpochStats {
  std::size_t steps = 0;
  double mean_loss = 0.0;
  std::vector<Architecture> sampled;
};

/// One pass over D_train; every mini-batch trains one freshly sampled architecture.
SharedEpochStats shared_train_epoch(KernelBank& bank, Adam& optimizer, const ArchSampler& sampler,
                                    const WindowedDataset& train, std::size_t batch_size, Rng& sample_rng,
                                    Rng& shuffle_rng);
SharedEpochStats shared_train_epoch(KernelBank& bank, Adam& optimizer, const Controller& controller,
                                    const WindowedDataset& train, std::size_t batch_size, Rng& sample_rng,
                                    Rng& shuffle_rng);

struct ControllerPhaseStats {
  std::vector<double> surrogate_losses;  // one per controller step
  std::vector<double> mean_rewards;
  std::size_t reward_evaluations = 0;
};

/*
 * steps × (sample m architectures, score them, one REINFORCE update against
 * the current baseline, then fold the batch rewards into the baseline).
 */
ControllerPhaseStats controller_train_phase(Controller& controller, RewardBaseline& baseline,
                                            const BatchRewardFn& reward, std::size_t steps, std::size_t m,
                                            Rng& sample_rng);

struct CandidateScore {
  Architecture arch;
  double reward = 0.0;
  std::size_t times_sampled = 0;
};

struct Derivation {
  std::vector<Architecture> samples;   // in draw order, duplicates included
  std::vector<CandidateScore> scored;  // unique architectures in first-draw order
  Architecture best;
  double best_reward = 0.0;
  std::vector<Architecture> tied;  // other architectures that matched best_reward
  std::size_t evaluations = 0;

  /// JSON text: every sample's reward, the winner and tie notes.
  std::string to_report() const;
};

/// Highest reward wins; ties go to the lexicographically smallest token list.
Derivation pick_best(std::vector<Architecture> samples, const RewardFn& reward);

/// Samples M architectures from the controller; each distinct one is scored once.
Derivation derive_best(const Controller& controller, std::size_t samples, const RewardFn& reward, Rng& rng);

/// Uniform sampling with the same budget accounting; enumerates the whole space
/// when the budget covers it.
Derivation random_search_baseline(std::size_t budget, std::size_t num_positions, std::size_t num_choices,
                                  const RewardFn& reward, Rng& rng);

struct ScratchEpoch {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_accuracy = 0.0;
  double lr = 0.0;
};

struct ScratchResult {
  ChildNetwork model;
  double test_accuracy = 0.0;
  double best_val_accuracy = 0.0;
  std::size_t best_epoch = 0;  // 0 means the untrained initialization
  std::vector<ScratchEpoch> curve;
};

/// Fresh initialization, Adam with cosine-annealed lr; keeps the best-validation epoch.
ScratchResult train_from_scratch(const Architecture& arch, const StructureConfig& structure,
                                 const DatasetSplits& data, const ScratchConfig& config, Rng& rng,
                                 std::ostream* progress = nullptr);

/// Everything a search run produces before retraining.
struct SearchOutcome {
  KernelBank bank;
  Controller controller;
  RewardBaseline baseline;
  MetricsLog metrics;
  Derivation derivation;
  std::size_t reward_evaluations = 0;  // controller-phase evaluations
  std::size_t shared_steps = 0;
};

/*
 * The alternating search: per epoch one shared-weight pass over D_train, one
 * controller phase scored on validation mini-batches and a metrics row from
 * trend_samples fresh samples scored on all of D_val. Ends with derive_best
 * over final_samples architectures on the full validation set.
 */
SearchOutcome run_search(const DatasetSplits& data, const SearchConfig& config, const StructureConfig& structure,
                         ControllerConfig controller_config, std::uint64_t seed, std::ostream* progress = nullptr);

/// Random-search comparator over a trained bank, scored like derive_best.
Derivation random_search_on_bank(KernelBank& bank, const DatasetSplits& data, const SearchConfig& config,
                                 std::uint64_t seed);

}  // namespace kforge
