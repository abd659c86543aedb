#include <doctest.h>

#include <cmath>

#include "kforge/optim.hpp"
#include "kforge/search_space.hpp"
#include "support.hpp"

using namespace kforge;
using kforge::testing::random_tensor;

namespace {

StructureConfig small_structure(std::size_t blocks = 1, std::size_t layers = 2) {
  StructureConfig s;
  s.num_blocks = blocks;
  s.layers_per_block = layers;
  s.base_channels = 4;
  s.input_length = 64;
  return s;
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("space size") {
  CHECK(space_size(6, 8) == 1679616);
  CHECK(space_size(1, 5) == 1);
  CHECK(space_size(6, 2) == 36);
  CHECK_THROWS_AS(space_size(6, 40), std::overflow_error);
  CHECK_THROWS_AS(space_size(0, 3), std::domain_error);
}

TEST_CASE("kernel choices") {
  const KernelChoice first = decode_choice(0);
  CHECK(first.kernel_size == 3);
  CHECK(first.dilation == 1);
  CHECK(first.same_padding() == 1);
  const KernelChoice last = decode_choice(5);
  CHECK(last.kernel_size == 5);
  CHECK(last.dilation == 3);
  CHECK(last.same_padding() == 6);
  for (std::size_t i = 0; i < kNumKernelChoices; ++i) {
    const KernelChoice c = decode_choice(i);
    CHECK(encode_choice(c.kernel_size, c.dilation) == i);
    CHECK(conv1d_output_length(1000, c.kernel_size, 1, c.dilation, c.same_padding()) == 1000);
    CHECK(c.dilation * (c.kernel_size - 1) % 2 == 0);
  }
  CHECK_THROWS_AS(decode_choice(6), std::out_of_range);
  CHECK_THROWS_AS(encode_choice(7, 1), std::out_of_range);
}

TEST_CASE("architecture text") {
  const Architecture a = Architecture::parse(" 0 3  1 5 ");
  CHECK(a.tokens == std::vector<std::size_t>{0, 3, 1, 5});
  CHECK(a.to_string() == "0 3 1 5");
  CHECK(Architecture::parse(a.to_string()) == a);
  CHECK(Architecture::uniform(2, 3).to_string() == "2 2 2");
  CHECK_THROWS_AS(Architecture::parse(""), std::invalid_argument);
  CHECK_THROWS_AS(Architecture::parse("1 x"), std::invalid_argument);
  CHECK_THROWS_AS(Architecture::parse("-1 2"), std::invalid_argument);
  CHECK_THROWS_AS(validate_architecture(Architecture::parse("9 0 0 0 0 0 0 0"), 8), std::out_of_range);
  CHECK_THROWS_AS(validate_architecture(Architecture::parse("0 0"), 8), std::invalid_argument);
  CHECK(Architecture::parse("0 1") < Architecture::parse("1 0"));
}

TEST_CASE("default structure lengths") {
  StructureConfig s;
  CHECK(s.length_at_block(0) == 500);
  CHECK(s.length_at_block(1) == 250);
  CHECK(s.length_at_block(2) == 125);
  CHECK(s.length_at_block(3) == 63);
  CHECK(s.length_at_block(4) == 32);
  CHECK(s.feature_channels() == 128);
}

TEST_CASE("bank init") {
  Rng rng(1);
  const KernelBank bank = KernelBank::init(StructureConfig{}, kNumKernelChoices, rng);
  CHECK(bank.num_searched_sets() == 48);

  Rng again(1);
  const KernelBank twin = KernelBank::init(StructureConfig{}, kNumKernelChoices, again);
  Checkpoint a, b;
  bank.save(a);
  twin.save(b);
  CHECK(a.serialize() == b.serialize());

  // He-uniform draws: w / bound is uniform on [-1, 1] with variance 1/3.
  double sq = 0.0;
  std::size_t n = 0;
  for (std::size_t p = 0; p < 8; ++p)
    for (std::size_t c = 0; c < kNumKernelChoices; ++c) {
      const Tensor& w = bank.searched(p, c).weight;
      const double bound = std::sqrt(6.0 / static_cast<double>(w.dim(1) * w.dim(2)));
      for (double v : w.data()) {
        REQUIRE(std::abs(v) <= bound);
        sq += (v / bound) * (v / bound);
        ++n;
      }
      CHECK(values(bank.searched(p, c).gamma) == std::vector<double>(w.dim(0), 1.0));
      CHECK(values(bank.searched(p, c).beta) == std::vector<double>(w.dim(0), 0.0));
    }
  REQUIRE(n >= 100000);
  CHECK(std::abs(sq / static_cast<double>(n) - 1.0 / 3.0) < 0.1 / 3.0);
}

TEST_CASE("M1 is the all-first-kernel network") {
  Rng rng(2);
  KernelBank bank = KernelBank::init(StructureConfig{}, kNumKernelChoices, rng);
  ChildNetwork net = build_child(Architecture::uniform(0, 8), bank);
  for (std::size_t p = 0; p < 8; ++p) {
    CHECK(net.layer(p).weight.dim(2) == 3);
    CHECK(net.layer(p).dilation == 1);
  }
}

TEST_CASE("default network maps [2,1,1000] to [2,6] via length 32") {
  Rng rng(3);
  KernelBank bank = KernelBank::init(StructureConfig{}, kNumKernelChoices, rng);
  ChildNetwork net = build_child(Architecture::parse("0 1 2 3 4 5 0 1"), bank);
  Tensor x = random_tensor({2, 1, 1000}, rng, -1, 1, false);
  Tensor h = net.forward_stem(nullptr, x, NormMode::kEval);
  CHECK(h.dim(2) == 500);
  CHECK(net.forward(nullptr, x, NormMode::kEval).shape() == Shape{2, 6});
  CHECK_THROWS_AS(net.forward(nullptr, random_tensor({2, 1, 999}, rng, -1, 1, false), NormMode::kEval), ShapeError);
}

TEST_CASE("every L=2 architecture builds and runs") {
  Rng rng(4);
  KernelBank bank = KernelBank::init(small_structure(), kNumKernelChoices, rng);
  Tensor x = random_tensor({3, 1, 64}, rng, -1, 1, false);
  std::size_t built = 0;
  for (std::size_t a = 0; a < 6; ++a)
    for (std::size_t b = 0; b < 6; ++b) {
      ChildNetwork net = build_child(Architecture{{a, b}}, bank);
      CHECK(net.forward(nullptr, x, NormMode::kTrain).shape() == Shape{3, 6});
      ++built;
    }
  CHECK(built == 36);
}

TEST_CASE("all choices at a position give the same shape") {
  Rng rng(5);
  KernelBank bank = KernelBank::init(small_structure(2, 2), kNumKernelChoices, rng);
  Tensor x = random_tensor({2, 4, 32}, rng, -1, 1, false);
  for (std::size_t c = 0; c < kNumKernelChoices; ++c) {
    CHECK(bank.searched(0, c).forward(nullptr, x, NormMode::kBatchStats).shape() == x.shape());
  }
}

TEST_CASE("swapping a token only changes that position's storage") {
  Rng rng(6);
  KernelBank bank = KernelBank::init(small_structure(2, 2), kNumKernelChoices, rng);
  const Architecture a = Architecture::parse("0 4 2 1");
  Architecture b = a;
  b.tokens[2] = 5;
  ChildNetwork na = build_child(a, bank), nb = build_child(b, bank);
  for (std::size_t p = 0; p < 4; ++p) {
    CHECK(na.layer(p).weight.same_storage(bank.searched(p, a.tokens[p]).weight));
    CHECK(nb.layer(p).weight.same_storage(bank.searched(p, b.tokens[p]).weight));
    CHECK(nb.layer(p).gamma.same_storage(bank.searched(p, b.tokens[p]).gamma));
    CHECK(na.layer(p).weight.same_storage(nb.layer(p).weight) == (p != 2));
  }
  CHECK(na.head_weight().same_storage(nb.head_weight()));
}

TEST_CASE("two builds of one architecture share training") {
  Rng rng(7);
  KernelBank bank = KernelBank::init(small_structure(), kNumKernelChoices, rng);
  const Architecture arch = Architecture::parse("3 5");
  ChildNetwork first = build_child(arch, bank), second = build_child(arch, bank);
  Tensor x = random_tensor({4, 1, 64}, rng, -1, 1, false);
  const std::size_t labels[] = {0, 1, 2, 3};
  const auto before = values(second.forward(nullptr, x, NormMode::kBatchStats));

  Adam adam(first.parameters(), AdamOptions{.lr = 0.01});
  Tape tape;
  tape.backward(softmax_cross_entropy(&tape, first.forward(&tape, x, NormMode::kTrain), labels).loss);
  adam.step();

  const auto a = values(first.forward(nullptr, x, NormMode::kBatchStats));
  const auto b = values(second.forward(nullptr, x, NormMode::kBatchStats));
  CHECK(a == b);
  CHECK(a != before);
}

TEST_CASE("eval forward is deterministic") {
  Rng rng(8);
  KernelBank bank = KernelBank::init(small_structure(), kNumKernelChoices, rng);
  ChildNetwork net = build_child(Architecture::parse("1 2"), bank);
  Tensor x = random_tensor({2, 1, 64}, rng, -1, 1, false);
  CHECK(values(net.forward(nullptr, x, NormMode::kEval)) == values(net.forward(nullptr, x, NormMode::kEval)));
}

TEST_CASE("zero classifier gives a uniform softmax") {
  Rng rng(9);
  KernelBank bank = KernelBank::init(small_structure(), kNumKernelChoices, rng);
  ChildNetwork net = build_child(Architecture::parse("0 0"), bank);
  Tensor hw = net.head_weight(), hb = net.head_bias();
  std::fill(hw.data().begin(), hw.data().end(), 0.0);
  std::fill(hb.data().begin(), hb.data().end(), 0.0);
  Tensor logits = net.forward(nullptr, random_tensor({3, 1, 64}, rng, -1, 1, false), NormMode::kEval);
  for (std::size_t r = 0; r < 3; ++r) {
    const auto p = softmax(std::span<const double>(logits.data().data() + r * 6, 6));
    for (double v : p) CHECK(v == doctest::Approx(1.0 / 6.0).epsilon(1e-15));
  }
}

TEST_CASE("a block with zeroed convolutions passes relu(input)") {
  Rng rng(10);
  KernelBank bank = KernelBank::init(small_structure(), kNumKernelChoices, rng);
  ChildNetwork net = build_child(Architecture::parse("2 4"), bank);
  for (std::size_t p = 0; p < 2; ++p) {
    Tensor w = net.layer(p).weight, b = net.layer(p).bias;
    std::fill(w.data().begin(), w.data().end(), 0.0);
    std::fill(b.data().begin(), b.data().end(), 0.0);
  }
  // Fresh running statistics (mean 0, var 1) and beta 0 make the norm map 0 to 0.
  Tensor x = random_tensor({2, 4, 32}, rng, -1, 1, false);
  const auto out = values(net.forward_block(nullptr, 0, x, NormMode::kEval));
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == std::max(0.0, x.at(i)));
}

TEST_CASE("bank and model checkpoints round-trip") {
  Rng rng(11);
  const StructureConfig s = small_structure(2, 2);
  KernelBank bank = KernelBank::init(s, kNumKernelChoices, rng);
  Checkpoint saved;
  bank.save(saved);
  Rng other(12);
  KernelBank restored = KernelBank::init(s, kNumKernelChoices, other);
  restored.load(saved);
  Checkpoint again;
  restored.save(again);
  CHECK(saved.serialize() == again.serialize());

  Rng wrong(13);
  KernelBank mismatched = KernelBank::init(small_structure(1, 2), kNumKernelChoices, wrong);
  CHECK_THROWS_AS(mismatched.load(saved), CheckpointError);

  ChildNetwork net = build_standalone(Architecture::parse("5 0 3 1"), s, rng);
  Checkpoint model;
  net.save(model);
  ChildNetwork back = ChildNetwork::load(model);
  CHECK(back.architecture() == net.architecture());
  Tensor x = random_tensor({2, 1, 64}, rng, -1, 1, false);
  CHECK(values(back.forward(nullptr, x, NormMode::kEval)) == values(net.forward(nullptr, x, NormMode::kEval)));
  CHECK_FALSE(back.layer(0).weight.same_storage(net.layer(0).weight));
}

TEST_CASE("standalone children own their parameters") {
  Rng rng(14);
  const StructureConfig s = small_structure();
  ChildNetwork a = build_standalone(Architecture::parse("1 1"), s, rng);
  ChildNetwork b = build_standalone(Architecture::parse("1 1"), s, rng);
  CHECK_FALSE(a.layer(0).weight.same_storage(b.layer(0).weight));
  CHECK(values(a.layer(0).weight) != values(b.layer(0).weight));
}
