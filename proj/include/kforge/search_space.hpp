#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "kforge/checkpoint.hpp"
#include "kforge/ops.hpp"
#include "kforge/random.hpp"
#include "kforge/tensor.hpp"

namespace kforge {

inline constexpr std::size_t kNumKernelChoices = 6;

/// One candidate convolution: a kernel size and a dilation rate.
struct KernelChoice {
  std::size_t index;
  std::size_t kernel_size;
  std::size_t dilation;

  /// Padding that keeps the temporal length unchanged at stride 1.
  std::size_t same_padding() const { return dilation * (kernel_size - 1) / 2; }
};

// 0→(3,1) 1→(3,2) 2→(3,3) 3→(5,1) 4→(5,2) 5→(5,3)
KernelChoice decode_choice(std::size_t index);
std::size_t encode_choice(std::size_t kernel_size, std::size_t dilation);

/// n^L, throwing std::overflow_error past 64 bits.
std::uint64_t space_size(std::uint64_t num_choices, std::uint64_t num_positions);

struct Architecture {
  std::vector<std::size_t> tokens;

  std::size_t size() const { return tokens.size(); }
  /// "0 3 1 5 2 4 0 1"
  std::string to_string() const;
  /// Whitespace-separated token digits. Range is checked by validate().
  static Architecture parse(std::string_view text);
  static Architecture uniform(std::size_t token, std::size_t length);

  auto operator<=>(const Architecture&) const = default;
};

void validate_architecture(const Architecture& arch, std::size_t num_positions,
                           std::size_t num_choices = kNumKernelChoices);

struct StructureConfig {
  std::size_t num_blocks = 4;
  std::size_t layers_per_block = 2;
  std::size_t in_channels = 1;
  std::size_t stem_kernel = 7;
  std::size_t stem_stride = 2;
  std::size_t base_channels = 8;
  std::size_t downsample_kernel = 3;
  std::size_t downsample_stride = 2;
  std::size_t num_classes = 6;
  std::size_t input_length = 1000;

  std::size_t num_positions() const { return num_blocks * layers_per_block; }
  /// Channels inside block b: base_channels · 2^b.
  std::size_t block_channels(std::size_t block) const { return base_channels << block; }
  std::size_t position_channels(std::size_t position) const {
    return block_channels(position / layers_per_block);
  }
  std::size_t feature_channels() const { return base_channels << num_blocks; }
  /// Temporal length seen by block b, and by the pooling layer for b == num_blocks.
  std::size_t length_at_block(std::size_t block) const;
  void validate() const;
};

/// conv → batch norm. Copies share parameter storage and running statistics.
struct ConvUnit {
  Tensor weight;  // [Cout, Cin, k]
  Tensor bias;    // [Cout]
  Tensor gamma;   // [Cout]
  Tensor beta;    // [Cout]
  BatchNormStats stats;
  std::size_t stride = 1;
  std::size_t dilation = 1;
  std::size_t padding = 0;

  static ConvUnit create(std::size_t c_in, std::size_t c_out, std::size_t kernel, std::size_t stride,
                         std::size_t dilation, std::size_t padding, Rng& rng);
  Tensor forward(Tape* tape, const Tensor& x, NormMode mode);
  std::vector<Tensor> parameters() const { return {weight, bias, gamma, beta}; }
  void save(Checkpoint& ckpt, const std::string& prefix) const;
  void load(const Checkpoint& ckpt, const std::string& prefix);
};

/*
 * The shared parameter store: one ConvUnit per (position, choice), plus the
 * unsearched stem, per-block downsampling layers and classifier.
 */
class KernelBank {
 public:
  static KernelBank init(const StructureConfig& structure, std::size_t num_choices, Rng& rng);

  KernelBank(const KernelBank&) = delete;
  KernelBank& operator=(const KernelBank&) = delete;
  KernelBank(KernelBank&&) = default;
  KernelBank& operator=(KernelBank&&) = default;

  const StructureConfig& structure() const { return structure_; }
  std::size_t num_choices() const { return num_choices_; }
  std::size_t num_searched_sets() const { return searched_.size(); }

  ConvUnit& searched(std::size_t position, std::size_t choice);
  const ConvUnit& searched(std::size_t position, std::size_t choice) const;
  ConvUnit& stem() { return stem_; }
  ConvUnit& downsample(std::size_t block) { return downsample_.at(block); }
  const std::vector<ConvUnit>& downsample_layers() const { return downsample_; }
  const Tensor& head_weight() const { return head_weight_; }
  const Tensor& head_bias() const { return head_bias_; }

  /// Every trainable tensor in a fixed order (stem, positions×choices, downsample, head).
  std::vector<Tensor> parameters() const;
  /// The trainable tensors a given architecture touches.
  std::vector<Tensor> parameters_for(const Architecture& arch) const;

  void save(Checkpoint& ckpt) const;
  void load(const Checkpoint& ckpt);

 private:
  KernelBank() = default;

  StructureConfig structure_;
  std::size_t num_choices_ = 0;
  ConvUnit stem_;
  std::vector<ConvUnit> searched_;  // position-major: [p * num_choices + c]
  std::vector<ConvUnit> downsample_;
  Tensor head_weight_;
  Tensor head_bias_;
};

/*
 * A child ResNet-1D. Layers are handles into the storage they were built
 * from: a child assembled from a bank trains the bank.
 */
class ChildNetwork {
 public:
  ChildNetwork(Architecture arch, StructureConfig structure, ConvUnit stem, std::vector<ConvUnit> layers,
               std::vector<ConvUnit> downsample, Tensor head_weight, Tensor head_bias);

  /// x [B, in_channels, input_length] -> logits [B, num_classes].
  Tensor forward(Tape* tape, const Tensor& x, NormMode mode);
  /// Stem output for x.
  Tensor forward_stem(Tape* tape, const Tensor& x, NormMode mode);
  /// One residual block (without the following downsample layer).
  Tensor forward_block(Tape* tape, std::size_t block, const Tensor& x, NormMode mode);

  std::vector<Tensor> parameters() const;
  const Architecture& architecture() const { return arch_; }
  const StructureConfig& structure() const { return structure_; }
  const ConvUnit& layer(std::size_t position) const { return layers_.at(position); }
  ConvUnit& layer(std::size_t position) { return layers_.at(position); }
  const Tensor& head_weight() const { return head_weight_; }
  const Tensor& head_bias() const { return head_bias_; }

  void save(Checkpoint& ckpt) const;
  /// Rebuilds a standalone network from a checkpoint written by save().
  static ChildNetwork load(const Checkpoint& ckpt);

 private:
  Architecture arch_;
  StructureConfig structure_;
  ConvUnit stem_;
  std::vector<ConvUnit> layers_;
  std::vector<ConvUnit> downsample_;
  Tensor head_weight_;
  Tensor head_bias_;
};

/// Child whose searched layers alias bank entries (position, token).
ChildNetwork build_child(const Architecture& arch, KernelBank& bank);

/// Child with freshly initialized private parameters.
ChildNetwork build_standalone(const Architecture& arch, const StructureConfig& structure, Rng& rng);

}  // namespace kforge
