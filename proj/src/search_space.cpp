#include "kforge/search_space.hpp"

#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace kforge {
namespace {

constexpr KernelChoice kChoices[kNumKernelChoices] = {
    {0, 3, 1}, {1, 3, 2}, {2, 3, 3}, {3, 5, 1}, {4, 5, 2}, {5, 5, 3},
};

Tensor he_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (double& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

std::vector<double> structure_fields(const StructureConfig& s) {
  return {static_cast<double>(s.num_blocks),        static_cast<double>(s.layers_per_block),
          static_cast<double>(s.in_channels),       static_cast<double>(s.stem_kernel),
          static_cast<double>(s.stem_stride),       static_cast<double>(s.base_channels),
          static_cast<double>(s.downsample_kernel), static_cast<double>(s.downsample_stride),
          static_cast<double>(s.num_classes),       static_cast<double>(s.input_length)};
}

StructureConfig structure_from_fields(const std::vector<double>& f) {
  if (f.size() != 10) throw CheckpointError("structure record must hold 10 fields");
  auto at = [&](std::size_t i) { return static_cast<std::size_t>(f[i]); };
  StructureConfig s;
  s.num_blocks = at(0);
  s.layers_per_block = at(1);
  s.in_channels = at(2);
  s.stem_kernel = at(3);
  s.stem_stride = at(4);
  s.base_channels = at(5);
  s.downsample_kernel = at(6);
  s.downsample_stride = at(7);
  s.num_classes = at(8);
  s.input_length = at(9);
  s.validate();
  return s;
}

}  // namespace

KernelChoice decode_choice(std::size_t index) {
  if (index >= kNumKernelChoices) {
    throw std::out_of_range("kernel choice " + std::to_string(index) + " outside [0, 6)");
  }
  return kChoices[index];
}

std::size_t encode_choice(std::size_t kernel_size, std::size_t dilation) {
  for (const KernelChoice& c : kChoices) {
    if (c.kernel_size == kernel_size && c.dilation == dilation) return c.index;
  }
  throw std::out_of_range("no kernel choice with k=" + std::to_string(kernel_size) +
                          ", d=" + std::to_string(dilation));
}

std::uint64_t space_size(std::uint64_t num_choices, std::uint64_t num_positions) {
  if (num_choices < 1 || num_positions < 1) throw std::domain_error("space_size: n and L must be >= 1");
  std::uint64_t total = 1;
  for (std::uint64_t i = 0; i < num_positions; ++i) {
    if (total > std::numeric_limits<std::uint64_t>::max() / num_choices) {
      throw std::overflow_error("space_size: " + std::to_string(num_choices) + "^" + std::to_string(num_positions) +
                                " exceeds 64 bits");
    }
    total *= num_choices;
  }
  return total;
}

std::string Architecture::to_string() const {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(tokens[i]);
  }
  return out;
}

Architecture Architecture::parse(std::string_view text) {
  Architecture arch;
  std::istringstream in{std::string(text)};
  std::string word;
  while (in >> word) {
    std::size_t used = 0;
    unsigned long value = 0;
    try {
      if (word.front() == '-' || word.front() == '+') throw std::invalid_argument("sign");
      value = std::stoul(word, &used);
    } catch (const std::exception&) {
      throw std::invalid_argument("architecture token '" + word + "' is not a non-negative integer");
    }
    if (used != word.size()) throw std::invalid_argument("architecture token '" + word + "' is not an integer");
    arch.tokens.push_back(value);
  }
  if (arch.tokens.empty()) throw std::invalid_argument("architecture string is empty");
  return arch;
}

Architecture Architecture::uniform(std::size_t token, std::size_t length) {
  return Architecture{std::vector<std::size_t>(length, token)};
}

void validate_architecture(const Architecture& arch, std::size_t num_positions, std::size_t num_choices) {
  if (arch.size() != num_positions) {
    throw std::invalid_argument("architecture has " + std::to_string(arch.size()) + " tokens, expected " +
                                std::to_string(num_positions));
  }
  for (std::size_t t : arch.tokens) {
    if (t >= num_choices) {
      throw std::out_of_range("architecture token " + std::to_string(t) + " outside [0, " +
                              std::to_string(num_choices) + ")");
    }
  }
}

std::size_t StructureConfig::length_at_block(std::size_t block) const {
  std::size_t len = conv1d_output_length(input_length, stem_kernel, stem_stride, 1, stem_kernel / 2);
  for (std::size_t b = 0; b < block; ++b) {
    len = conv1d_output_length(len, downsample_kernel, downsample_stride, 1, downsample_kernel / 2);
  }
  return len;
}

void StructureConfig::validate() const {
  if (num_blocks < 1 || layers_per_block < 1) throw std::invalid_argument("structure needs at least one block and layer");
  if (in_channels < 1 || base_channels < 1 || num_classes < 2) {
    throw std::invalid_argument("structure channel/class counts must be positive (classes >= 2)");
  }
  if (stem_kernel % 2 == 0 || downsample_kernel % 2 == 0) {
    throw std::invalid_argument("stem and downsample kernels must be odd");
  }
  if (stem_stride < 1 || downsample_stride < 1) throw std::invalid_argument("strides must be >= 1");
  if (num_blocks > 16) throw std::invalid_argument("too many blocks");
  // Throws if the temporal budget runs out before pooling.
  const std::size_t final_len = length_at_block(num_blocks);
  if (final_len < 1) throw std::invalid_argument("input too short for the structure");
}

ConvUnit ConvUnit::create(std::size_t c_in, std::size_t c_out, std::size_t kernel, std::size_t stride,
                          std::size_t dilation, std::size_t padding, Rng& rng) {
  ConvUnit u;
  u.weight = he_uniform({c_out, c_in, kernel}, c_in * kernel, rng);
  u.bias = Tensor::zeros({c_out}, true);
  u.gamma = Tensor::full({c_out}, 1.0, true);
  u.beta = Tensor::zeros({c_out}, true);
  u.stats = BatchNormStats::fresh(c_out);
  u.stride = stride;
  u.dilation = dilation;
  u.padding = padding;
  return u;
}

Tensor ConvUnit::forward(Tape* tape, const Tensor& x, NormMode mode) {
  Tensor y = conv1d(tape, x, weight, bias, stride, dilation, padding);
  return batchnorm1d(tape, y, gamma, beta, stats, mode);
}

void ConvUnit::save(Checkpoint& ckpt, const std::string& prefix) const {
  ckpt.put(prefix + "conv.w", weight);
  ckpt.put(prefix + "conv.b", bias);
  ckpt.put(prefix + "norm.gamma", gamma);
  ckpt.put(prefix + "norm.beta", beta);
  ckpt.put(prefix + "norm.mean", stats.running_mean);
  ckpt.put(prefix + "norm.var", stats.running_var);
}

void ConvUnit::load(const Checkpoint& ckpt, const std::string& prefix) {
  ckpt.copy_into(prefix + "conv.w", weight);
  ckpt.copy_into(prefix + "conv.b", bias);
  ckpt.copy_into(prefix + "norm.gamma", gamma);
  ckpt.copy_into(prefix + "norm.beta", beta);
  ckpt.copy_into(prefix + "norm.mean", stats.running_mean);
  ckpt.copy_into(prefix + "norm.var", stats.running_var);
}

KernelBank KernelBank::init(const StructureConfig& structure, std::size_t num_choices, Rng& rng) {
  structure.validate();
  if (num_choices < 1 || num_choices > kNumKernelChoices) {
    throw std::invalid_argument("num_choices must lie in [1, 6]");
  }
  KernelBank bank;
  bank.structure_ = structure;
  bank.num_choices_ = num_choices;
  const auto& s = structure;
  bank.stem_ = ConvUnit::create(s.in_channels, s.base_channels, s.stem_kernel, s.stem_stride, 1, s.stem_kernel / 2, rng);
  bank.searched_.reserve(s.num_positions() * num_choices);
  for (std::size_t p = 0; p < s.num_positions(); ++p) {
    const std::size_t ch = s.position_channels(p);
    for (std::size_t c = 0; c < num_choices; ++c) {
      const KernelChoice kc = decode_choice(c);
      bank.searched_.push_back(ConvUnit::create(ch, ch, kc.kernel_size, 1, kc.dilation, kc.same_padding(), rng));
    }
  }
  for (std::size_t b = 0; b < s.num_blocks; ++b) {
    bank.downsample_.push_back(ConvUnit::create(s.block_channels(b), s.block_channels(b + 1), s.downsample_kernel,
                                                s.downsample_stride, 1, s.downsample_kernel / 2, rng));
  }
  const std::size_t features = s.feature_channels();
  bank.head_weight_ = he_uniform({s.num_classes, features}, features, rng);
  bank.head_bias_ = Tensor::zeros({s.num_classes}, true);
  return bank;
}

ConvUnit& KernelBank::searched(std::size_t position, std::size_t choice) {
  if (position >= structure_.num_positions() || choice >= num_choices_) {
    throw std::out_of_range("bank entry (" + std::to_string(position) + ", " + std::to_string(choice) +
                            ") does not exist");
  }
  return searched_[position * num_choices_ + choice];
}

const ConvUnit& KernelBank::searched(std::size_t position, std::size_t choice) const {
  return const_cast<KernelBank*>(this)->searched(position, choice);
}

std::vector<Tensor> KernelBank::parameters() const {
  std::vector<Tensor> out = stem_.parameters();
  for (const ConvUnit& u : searched_) {
    for (const Tensor& t : u.parameters()) out.push_back(t);
  }
  for (const ConvUnit& u : downsample_) {
    for (const Tensor& t : u.parameters()) out.push_back(t);
  }
  out.push_back(head_weight_);
  out.push_back(head_bias_);
  return out;
}

std::vector<Tensor> KernelBank::parameters_for(const Architecture& arch) const {
  validate_architecture(arch, structure_.num_positions(), num_choices_);
  std::vector<Tensor> out = stem_.parameters();
  for (std::size_t p = 0; p < arch.size(); ++p) {
    for (const Tensor& t : searched(p, arch.tokens[p]).parameters()) out.push_back(t);
  }
  for (const ConvUnit& u : downsample_) {
    for (const Tensor& t : u.parameters()) out.push_back(t);
  }
  out.push_back(head_weight_);
  out.push_back(head_bias_);
  return out;
}

void KernelBank::save(Checkpoint& ckpt) const {
  ckpt.put("bank/structure", Shape{10}, structure_fields(structure_));
  ckpt.put_scalar("bank/num_choices", static_cast<double>(num_choices_));
  stem_.save(ckpt, "stem/");
  for (std::size_t p = 0; p < structure_.num_positions(); ++p) {
    for (std::size_t c = 0; c < num_choices_; ++c) {
      searched(p, c).save(ckpt, "pos" + std::to_string(p) + "/choice" + std::to_string(c) + "/");
    }
  }
  for (std::size_t b = 0; b < downsample_.size(); ++b) downsample_[b].save(ckpt, "down" + std::to_string(b) + "/");
  ckpt.put("head/w", head_weight_);
  ckpt.put("head/b", head_bias_);
}

void KernelBank::load(const Checkpoint& ckpt) {
  const StructureConfig stored = structure_from_fields(ckpt.get("bank/structure").values);
  if (structure_fields(stored) != structure_fields(structure_) ||
      static_cast<std::size_t>(ckpt.get_scalar("bank/num_choices")) != num_choices_) {
    throw CheckpointError("bank checkpoint was written for a different structure");
  }
  stem_.load(ckpt, "stem/");
  for (std::size_t p = 0; p < structure_.num_positions(); ++p) {
    for (std::size_t c = 0; c < num_choices_; ++c) {
      searched(p, c).load(ckpt, "pos" + std::to_string(p) + "/choice" + std::to_string(c) + "/");
    }
  }
  for (std::size_t b = 0; b < downsample_.size(); ++b) downsample_[b].load(ckpt, "down" + std::to_string(b) + "/");
  ckpt.copy_into("head/w", head_weight_);
  ckpt.copy_into("head/b", head_bias_);
}

ChildNetwork::ChildNetwork(Architecture arch, StructureConfig structure, ConvUnit stem, std::vector<ConvUnit> layers,
                           std::vector<ConvUnit> downsample, Tensor head_weight, Tensor head_bias)
    : arch_(std::move(arch)),
      structure_(structure),
      stem_(std::move(stem)),
      layers_(std::move(layers)),
      downsample_(std::move(downsample)),
      head_weight_(std::move(head_weight)),
      head_bias_(std::move(head_bias)) {
  if (layers_.size() != structure_.num_positions() || downsample_.size() != structure_.num_blocks) {
    throw std::invalid_argument("child network layer counts do not match its structure");
  }
}

Tensor ChildNetwork::forward_stem(Tape* tape, const Tensor& x, NormMode mode) {
  return relu(tape, stem_.forward(tape, x, mode));
}

Tensor ChildNetwork::forward_block(Tape* tape, std::size_t block, const Tensor& x, NormMode mode) {
  if (block >= structure_.num_blocks) throw std::out_of_range("block index out of range");
  Tensor h = x;
  const std::size_t first = block * structure_.layers_per_block;
  for (std::size_t l = 0; l < structure_.layers_per_block; ++l) {
    h = layers_[first + l].forward(tape, h, mode);
    if (l + 1 < structure_.layers_per_block) h = relu(tape, h);
  }
  return relu(tape, add(tape, h, x));
}

Tensor ChildNetwork::forward(Tape* tape, const Tensor& x, NormMode mode) {
  if (x.rank() != 3 || x.dim(1) != structure_.in_channels || x.dim(2) != structure_.input_length) {
    throw ShapeError("child input must be [B, " + std::to_string(structure_.in_channels) + ", " +
                     std::to_string(structure_.input_length) + "], got " + shape_to_string(x.shape()));
  }
  Tensor h = forward_stem(tape, x, mode);
  for (std::size_t b = 0; b < structure_.num_blocks; ++b) {
    h = forward_block(tape, b, h, mode);
    h = relu(tape, downsample_[b].forward(tape, h, mode));
  }
  return linear(tape, global_avg_pool(tape, h), head_weight_, head_bias_);
}

std::vector<Tensor> ChildNetwork::parameters() const {
  std::vector<Tensor> out = stem_.parameters();
  for (const ConvUnit& u : layers_) {
    for (const Tensor& t : u.parameters()) out.push_back(t);
  }
  for (const ConvUnit& u : downsample_) {
    for (const Tensor& t : u.parameters()) out.push_back(t);
  }
  out.push_back(head_weight_);
  out.push_back(head_bias_);
  return out;
}

void ChildNetwork::save(Checkpoint& ckpt) const {
  ckpt.put("model/structure", Shape{10}, structure_fields(structure_));
  std::vector<double> tokens(arch_.tokens.begin(), arch_.tokens.end());
  ckpt.put("model/arch", Shape{tokens.size()}, tokens);
  stem_.save(ckpt, "model/stem/");
  for (std::size_t p = 0; p < layers_.size(); ++p) layers_[p].save(ckpt, "model/layer" + std::to_string(p) + "/");
  for (std::size_t b = 0; b < downsample_.size(); ++b) downsample_[b].save(ckpt, "model/down" + std::to_string(b) + "/");
  ckpt.put("model/head/w", head_weight_);
  ckpt.put("model/head/b", head_bias_);
}

ChildNetwork ChildNetwork::load(const Checkpoint& ckpt) {
  const StructureConfig structure = structure_from_fields(ckpt.get("model/structure").values);
  Architecture arch;
  for (double v : ckpt.get("model/arch").values) {
    if (v < 0 || v != std::floor(v)) throw CheckpointError("model/arch holds a non-integer token");
    arch.tokens.push_back(static_cast<std::size_t>(v));
  }
  validate_architecture(arch, structure.num_positions());
  Rng scratch(0);
  ChildNetwork net = build_standalone(arch, structure, scratch);
  net.stem_.load(ckpt, "model/stem/");
  for (std::size_t p = 0; p < net.layers_.size(); ++p) net.layers_[p].load(ckpt, "model/layer" + std::to_string(p) + "/");
  for (std::size_t b = 0; b < net.downsample_.size(); ++b) {
    net.downsample_[b].load(ckpt, "model/down" + std::to_string(b) + "/");
  }
  ckpt.copy_into("model/head/w", net.head_weight_);
  ckpt.copy_into("model/head/b", net.head_bias_);
  return net;
}

ChildNetwork build_child(const Architecture& arch, KernelBank& bank) {
  const StructureConfig& s = bank.structure();
  validate_architecture(arch, s.num_positions(), bank.num_choices());
  std::vector<ConvUnit> layers;
  layers.reserve(arch.size());
  for (std::size_t p = 0; p < arch.size(); ++p) layers.push_back(bank.searched(p, arch.tokens[p]));
  return ChildNetwork(arch, s, bank.stem(), std::move(layers), bank.downsample_layers(), bank.head_weight(),
                      bank.head_bias());
}

ChildNetwork build_standalone(const Architecture& arch, const StructureConfig& s, Rng& rng) {
  s.validate();
  validate_architecture(arch, s.num_positions());
  ConvUnit stem = ConvUnit::create(s.in_channels, s.base_channels, s.stem_kernel, s.stem_stride, 1, s.stem_kernel / 2, rng);
  std::vector<ConvUnit> layers;
  for (std::size_t p = 0; p < arch.size(); ++p) {
    const KernelChoice kc = decode_choice(arch.tokens[p]);
    const std::size_t ch = s.position_channels(p);
    layers.push_back(ConvUnit::create(ch, ch, kc.kernel_size, 1, kc.dilation, kc.same_padding(), rng));
  }
  std::vector<ConvUnit> downsample;
  for (std::size_t b = 0; b < s.num_blocks; ++b) {
    downsample.push_back(ConvUnit::create(s.block_channels(b), s.block_channels(b + 1), s.downsample_kernel,
                                          s.downsample_stride, 1, s.downsample_kernel / 2, rng));
  }
  const std::size_t features = s.feature_channels();
  Tensor head_w = he_uniform({s.num_classes, features}, features, rng);
  Tensor head_b = Tensor::zeros({s.num_classes}, true);
  return ChildNetwork(arch, s, std::move(stem), std::move(layers), std::move(downsample), std::move(head_w),
                      std::move(head_b));
}

}  // namespace kforge
