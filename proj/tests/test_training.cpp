#include <doctest.h>

#include "kforge/search_engine.hpp"

using namespace kforge;

// Full-size network on the low-noise synthetic task. Slow: a few minutes on one core.

namespace {

DatasetSplits easy_data() {
  SynthCorpusConfig corpus;
  corpus.duration_samples = duration_for_windows(40);
  corpus.noise_sigma = 0.05;
  Rng data_rng = Rng::stream(1, "data");
  const WindowPool pool = build_window_pool(synth_corpus(corpus, data_rng));
  Rng split_rng = Rng::stream(1, "split");
  return materialize(pool, split_indices(pool.labels, SplitRatios{}, split_rng, true));
}

// Budget well inside 30 epochs; the cosine schedule spans the whole budget.
constexpr std::size_t kEpochs = 10;

double trained_test_accuracy(const Architecture& arch, const DatasetSplits& data) {
  ScratchConfig cfg;
  cfg.epochs = kEpochs;
  Rng rng = Rng::stream(1, "scratch");
  const ScratchResult r = train_from_scratch(arch, StructureConfig{}, data, cfg, rng);
  MESSAGE("[" << arch.to_string() << "] test " << r.test_accuracy << ", best val " << r.best_val_accuracy
              << " at epoch " << r.best_epoch);
  return r.test_accuracy;
}

}  // namespace

TEST_CASE("low-noise synthetic task is learnable") {
  const DatasetSplits data = easy_data();
  REQUIRE(data.train.size() == 864);

  CHECK(trained_test_accuracy(Architecture::uniform(5, 8), data) >= 0.95);
  CHECK(trained_test_accuracy(Architecture::uniform(0, 8), data) >= 0.9);
  Rng pick = Rng::stream(1, "random-search");
  Architecture mixed;
  for (int i = 0; i < 8; ++i) mixed.tokens.push_back(pick.uniform_index(kNumKernelChoices));
  CHECK(trained_test_accuracy(mixed, data) >= 0.9);
}
