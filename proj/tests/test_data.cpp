#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <map>
#include <numbers>
#include <set>

#include "kforge/data.hpp"
#include "support.hpp"

using namespace kforge;

namespace {

std::vector<double> ramp(std::size_t n) {
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = static_cast<double>(i);
  return x;
}

std::vector<std::size_t> balanced_labels(std::size_t per_class, std::size_t classes) {
  std::vector<std::size_t> labels;
  for (std::size_t c = 0; c < classes; ++c) labels.insert(labels.end(), per_class, c);
  return labels;
}

void check_partition(const SplitIndices& s, std::size_t n) {
  std::vector<std::size_t> all;
  for (const auto* part : {&s.train, &s.val, &s.test}) all.insert(all.end(), part->begin(), part->end());
  std::sort(all.begin(), all.end());
  CHECK(all.size() == n);
  CHECK(std::adjacent_find(all.begin(), all.end()) == all.end());
  if (!all.empty()) CHECK(all.back() == n - 1);
}

// Onsets of bursts in a residual: samples whose magnitude crosses `level`
// after at least `quiet` samples below it.
std::size_t count_bursts(std::span<const double> x, double level, std::size_t quiet) {
  std::size_t bursts = 0, below = quiet;
  for (double v : x) {
    if (std::abs(v) >= level) {
      if (below >= quiet) ++bursts;
      below = 0;
    } else {
      ++below;
    }
  }
  return bursts;
}

}  // namespace

TEST_SUITE("segment") {
  TEST_CASE("10000 samples give 181 windows") {
    const auto x = ramp(10000);
    const auto w = segment(x, 1000, 50);
    CHECK(w.size() == 181);
    CHECK(w.front().front() == 0.0);
    CHECK(w.back().front() == 9000.0);
    CHECK(w.back().back() == 9999.0);
    CHECK(window_count(10000, 1000, 50) == 181);
  }

  TEST_CASE("exact length gives one window") {
    CHECK(segment(ramp(1000), 1000, 50).size() == 1);
    CHECK(segment(ramp(1049), 1000, 50).size() == 1);
    CHECK(segment(ramp(1050), 1000, 50).size() == 2);
  }

  TEST_CASE("count formula matches enumeration on a grid") {
    for (std::size_t len = 20; len <= 140; len += 7)
      for (std::size_t w = 5; w <= 20; w += 5)
        for (std::size_t s = 1; s <= 9; s += 2) {
          std::size_t enumerated = 0;
          for (std::size_t start = 0; start + w <= len; start += s) ++enumerated;
          CHECK(window_count(len, w, s) == enumerated);
          CHECK(segment(ramp(len), w, s).size() == enumerated);
        }
  }

  TEST_CASE("neighbouring windows overlap by W minus s") {
    const auto x = ramp(3000);
    const auto w = segment(x, 1000, 50);
    for (std::size_t i = 0; i + 1 < w.size(); ++i) {
      CHECK(std::equal(w[i].begin() + 50, w[i].end(), w[i + 1].begin()));
      CHECK(w[i][0] == static_cast<double>(i * 50));
    }
  }

  TEST_CASE("errors") {
    CHECK_THROWS_AS(segment(ramp(999), 1000, 50), std::invalid_argument);
    CHECK_THROWS_AS(segment(ramp(2000), 1000, 0), std::invalid_argument);
  }
}

TEST_SUITE("normalize") {
  TEST_CASE("three-point example") {
    const std::vector<double> x{0, 5, 10};
    CHECK(normalize(x) == std::vector<double>{-1, 0, 1});
  }

  TEST_CASE("already normalized input is unchanged") {
    const std::vector<double> x{-1, 0.25, 1, -0.5};
    CHECK(normalize(x) == x);
  }

  TEST_CASE("random windows hit both bounds and keep their order") {
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> x(200);
      for (double& v : x) v = rng.uniform(-30.0, 70.0);
      const auto y = normalize(x);
      CHECK(*std::min_element(y.begin(), y.end()) == -1.0);
      CHECK(*std::max_element(y.begin(), y.end()) == 1.0);
      std::vector<std::size_t> ox(x.size()), oy(y.size());
      std::iota(ox.begin(), ox.end(), std::size_t{0});
      std::iota(oy.begin(), oy.end(), std::size_t{0});
      std::stable_sort(ox.begin(), ox.end(), [&](auto a, auto b) { return x[a] < x[b]; });
      std::stable_sort(oy.begin(), oy.end(), [&](auto a, auto b) { return y[a] < y[b]; });
      CHECK(ox == oy);
    }
  }

  TEST_CASE("scale and offset invariance") {
    Rng rng(2);
    for (int trial = 0; trial < 30; ++trial) {
      std::vector<double> x(100);
      for (double& v : x) v = rng.normal();
      const double a = rng.uniform(0.01, 100.0), b = rng.uniform(-50.0, 50.0);
      std::vector<double> z(x.size());
      std::transform(x.begin(), x.end(), z.begin(), [&](double v) { return a * v + b; });
      CHECK(kforge::testing::max_abs_diff(normalize(x), normalize(z)) < 1e-12);
    }
  }

  TEST_CASE("constant window is rejected") {
    const std::vector<double> x(10, 3.0);
    CHECK_THROWS_AS(normalize(x), DegenerateWindowError);
  }

  TEST_CASE("the pool skips constant windows") {
    Recording flat;
    flat.samples.assign(300, 0.0);
    flat.samples[250] = 1.0;
    const WindowPool pool = build_window_pool({flat}, 100, 50);
    // Windows start at 0..200; only those starting at 200 contain the spike.
    CHECK(pool.size() == 1);
    CHECK(pool.rejected == 4);
  }
}

TEST_SUITE("split") {
  TEST_CASE("31899 windows split 22967 / 2552 / 6380") {
    Rng rng(3);
    std::vector<std::size_t> labels(31899);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % 6;
    for (bool stratified : {false, true}) {
      const SplitIndices s = split_indices(labels, SplitRatios{}, rng, stratified);
      CHECK(std::abs(static_cast<long>(s.train.size()) - 22967) <= 1);
      CHECK(std::abs(static_cast<long>(s.val.size()) - 2552) <= 1);
      CHECK(std::abs(static_cast<long>(s.test.size()) - 6380) <= 1);
      check_partition(s, labels.size());
    }
  }

  TEST_CASE("all-train ratio") {
    Rng rng(4);
    const auto labels = balanced_labels(10, 3);
    const SplitIndices s = split_indices(labels, SplitRatios{1.0, 0.0, 0.0}, rng, false);
    CHECK(s.train.size() == 30);
    CHECK(s.val.empty());
    CHECK(s.test.empty());
  }

  TEST_CASE("partition property over many seeds") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed);
      std::vector<std::size_t> labels(97 + seed * 13);
      for (auto& l : labels) l = rng.uniform_index(4);
      check_partition(split_indices(labels, SplitRatios{}, rng, false), labels.size());
    }
  }

  TEST_CASE("stratified proportions hold within one window per class") {
    Rng rng(5);
    std::vector<std::size_t> labels;
    const std::size_t sizes[] = {101, 57, 333, 12, 250, 89};
    for (std::size_t c = 0; c < 6; ++c) labels.insert(labels.end(), sizes[c], c);
    const SplitRatios r{};
    const SplitIndices s = split_indices(labels, r, rng, true);
    check_partition(s, labels.size());
    const std::pair<const std::vector<std::size_t>*, double> parts[] = {
        {&s.train, r.train}, {&s.val, r.val}, {&s.test, r.test}};
    for (const auto& [part, ratio] : parts) {
      std::vector<std::size_t> counts(6, 0);
      for (std::size_t i : *part) ++counts[labels[i]];
      for (std::size_t c = 0; c < 6; ++c) CHECK(std::abs(static_cast<double>(counts[c]) - sizes[c] * ratio) <= 1.0);
    }
  }

  TEST_CASE("deterministic under a seed") {
    const auto labels = balanced_labels(40, 6);
    Rng a(6), b(6);
    const SplitIndices x = split_indices(labels, SplitRatios{}, a, true);
    const SplitIndices y = split_indices(labels, SplitRatios{}, b, true);
    CHECK(x.train == y.train);
    CHECK(x.test == y.test);
  }

  TEST_CASE("errors") {
    Rng rng(7);
    const auto labels = balanced_labels(5, 2);
    CHECK_THROWS_AS(split_indices(labels, SplitRatios{0.5, 0.3, 0.3}, rng, false), std::invalid_argument);
    CHECK_THROWS_AS(split_indices(labels, SplitRatios{1.2, -0.1, -0.1}, rng, false), std::invalid_argument);
    const std::vector<std::size_t> gap{0, 0, 2, 2};  // class 1 empty
    CHECK_THROWS_AS(split_indices(gap, SplitRatios{}, rng, true), std::invalid_argument);
  }

  TEST_CASE("group mode keeps recordings together") {
    Rng rng(8);
    std::vector<std::size_t> labels, groups;
    for (std::size_t g = 0; g < 30; ++g) {
      const std::size_t n = 5 + g % 4;
      labels.insert(labels.end(), n, g % 6);
      groups.insert(groups.end(), n, g);
    }
    const SplitIndices s = split_indices_by_group(labels, groups, SplitRatios{}, rng);
    check_partition(s, labels.size());
    std::map<std::size_t, std::set<int>> where;
    int part_id = 0;
    for (const auto* part : {&s.train, &s.val, &s.test}) {
      for (std::size_t i : *part) where[groups[i]].insert(part_id);
      ++part_id;
    }
    for (const auto& [g, parts] : where) CHECK(parts.size() == 1);
    CHECK_FALSE(s.train.empty());
    CHECK_FALSE(s.test.empty());
  }

  TEST_CASE("materialized splits carry their windows") {
    Rng rng(9);
    std::vector<Recording> recs;
    for (std::size_t c = 0; c < 3; ++c) {
      Recording r;
      r.label = c;
      for (std::size_t i = 0; i < 400; ++i) r.samples.push_back(std::sin(0.01 * static_cast<double>(i * (c + 1))));
      recs.push_back(r);
    }
    const WindowPool pool = build_window_pool(recs, 100, 50);
    const SplitIndices idx = split_indices(pool.labels, SplitRatios{}, rng, true);
    const DatasetSplits d = materialize(pool, idx);
    CHECK(d.train.size() + d.val.size() + d.test.size() == pool.size());
    CHECK(d.test.split == Split::kTest);
    for (std::size_t k = 0; k < d.train.size(); ++k) {
      const auto w = d.train.window(k);
      CHECK(std::equal(w.begin(), w.end(), pool.windows.begin() + static_cast<std::ptrdiff_t>(idx.train[k] * 100)));
      CHECK(*std::min_element(w.begin(), w.end()) == -1.0);
      CHECK(*std::max_element(w.begin(), w.end()) == 1.0);
    }
    const std::size_t picks[] = {1, 0};
    const Tensor batch = d.train.batch(picks);
    CHECK(batch.shape() == Shape{2, 1, 100});
    CHECK(batch.at(100) == d.train.window(0)[0]);
  }
}

TEST_SUITE("synthetic signals") {
  TEST_CASE("same seed, same recording") {
    Rng a(10), b(10);
    const Recording x = synth_generate(3, 40.0, 5000, 0.3, a);
    const Recording y = synth_generate(3, 40.0, 5000, 0.3, b);
    CHECK(x.samples == y.samples);
    CHECK(x.label == 3);
  }

  TEST_CASE("clean healthy signal has only carrier harmonics in its spectrum") {
    // 4000 samples at 20 kHz: 5 Hz bins; mesh harmonics at 30 Hz shaft speed fall on bins 192, 384, 576.
    Rng rng(11);
    const std::size_t n = 4000;
    const Recording rec = synth_generate(0, 30.0, n, 0.0, rng);
    std::vector<double> magnitude(n / 2 + 1);
    for (std::size_t k = 0; k <= n / 2; ++k) {
      std::complex<double> acc = 0.0;
      for (std::size_t t = 0; t < n; ++t) {
        const double angle = -2.0 * std::numbers::pi * static_cast<double>(k * t % n) / static_cast<double>(n);
        acc += rec.samples[t] * std::polar(1.0, angle);
      }
      magnitude[k] = std::abs(acc);
    }
    const double peak = *std::max_element(magnitude.begin(), magnitude.end());
    std::vector<std::size_t> strong;
    for (std::size_t k = 0; k < magnitude.size(); ++k)
      if (magnitude[k] > 1e-6 * peak) strong.push_back(k);
    CHECK(strong == std::vector<std::size_t>{192, 384, 576});
    CHECK(magnitude[192] > magnitude[384]);
    CHECK(magnitude[384] > magnitude[576]);
  }

  TEST_CASE("fault classes 1 and 2 repeat at different rates") {
    // The residual against the healthy signal from the same seed is the bare impulse train.
    const std::size_t n = 20000;
    std::map<std::size_t, double> per_thousand;
    for (std::size_t cls : {1, 2}) {
      Rng healthy_rng(12), fault_rng(12);
      const Recording healthy = synth_generate(0, 30.0, n, 0.0, healthy_rng);
      const Recording faulty = synth_generate(cls, 30.0, n, 0.0, fault_rng);
      std::vector<double> residual(n);
      for (std::size_t t = 0; t < n; ++t) residual[t] = faulty.samples[t] - healthy.samples[t];
      const std::size_t bursts = count_bursts(residual, 0.05, 40);
      per_thousand[cls] = 1000.0 * static_cast<double>(bursts) / static_cast<double>(n);
      const double expected = 1000.0 / fault_period_samples(cls, 30.0);
      MESSAGE("class " << cls << ": " << per_thousand[cls] << " bursts per 1000 samples, expected " << expected);
      CHECK(std::abs(per_thousand[cls] - expected) < 0.1 * expected + 0.05);
    }
    CHECK(per_thousand[2] > 1.5 * per_thousand[1]);
  }

  TEST_CASE("corpus layout and amplitude") {
    Rng rng(13);
    SynthCorpusConfig cfg;
    cfg.duration_samples = 3000;
    const auto corpus = synth_corpus(cfg, rng);
    CHECK(corpus.size() == 30);
    CHECK(corpus[0].label == 0);
    CHECK(corpus[29].label == 5);
    CHECK(corpus[6].speed_hz == 35.0);
    for (const Recording& r : corpus) {
      double peak = 0.0;
      for (double v : r.samples) peak = std::max(peak, std::abs(v));
      CHECK(peak < 4.0);
      CHECK(peak > 0.3);
    }
  }

  TEST_CASE("invalid arguments") {
    Rng rng(14);
    CHECK_THROWS_AS(synth_generate(6, 30.0, 100, 0.1, rng), std::out_of_range);
    CHECK_THROWS_AS(synth_generate(1, 0.0, 100, 0.1, rng), std::invalid_argument);
    CHECK_THROWS_AS(synth_generate(1, 30.0, 100, -1.0, rng), std::invalid_argument);
    CHECK(duration_for_windows(181) == 10000);
  }
}

TEST_SUITE("recording files") {
  TEST_CASE("round trip") {
    const auto dir = kforge::testing::scratch_dir("recordings");
    Rng rng(15);
    const Recording rec = synth_generate(4, 45.0, 2000, 0.3, rng);
    write_recording(dir / "r.txt", rec);
    const Recording back = read_recording(dir / "r.txt");
    CHECK(back.label == 4);
    CHECK(back.speed_hz == 45.0);
    REQUIRE(back.samples.size() == 2000);
    CHECK(kforge::testing::max_abs_diff(back.samples, rec.samples) <= 1e-12);
  }

  TEST_CASE("hand-written file with only a label") {
    const auto dir = kforge::testing::scratch_dir("recordings-plain");
    {
      std::ofstream out(dir / "a.txt");
      out << "label=3\n";
      for (int i = 0; i < 2000; ++i) out << i * 0.5 << "\n";
    }
    const Recording r = read_recording(dir / "a.txt");
    CHECK(r.label == 3);
    CHECK(r.samples.size() == 2000);
    CHECK(r.samples[3] == 1.5);
  }

  TEST_CASE("errors name the line") {
    const auto dir = kforge::testing::scratch_dir("recordings-bad");
    const auto write = [&](const char* name, const char* text) {
      std::ofstream(dir / name) << text;
      return dir / name;
    };
    const auto expect_line = [](const std::filesystem::path& p, std::size_t line) {
      try {
        read_recording(p);
        FAIL("no error for " << p);
      } catch (const ParseError& e) {
        CHECK(e.line() == line);
        CHECK(std::string(e.what()).find(p.filename().string()) != std::string::npos);
      }
    };
    expect_line(write("no_header.txt", "0.5\n0.25\n"), 1);
    expect_line(write("bad_label.txt", "label=x\n1\n"), 1);
    expect_line(write("bad_sample.txt", "label=1\nspeed_hz=30\n0.1\nabc\n"), 4);
    expect_line(write("empty.txt", ""), 1);
  }

  TEST_CASE("a directory loads in name order") {
    const auto dir = kforge::testing::scratch_dir("recordings-dir");
    for (std::size_t c : {2, 0, 1}) {
      Recording r;
      r.label = c;
      r.samples = {1.0, 2.0, 3.0};
      write_recording(dir / ("rec" + std::to_string(c) + ".txt"), r);
    }
    const auto recs = load_recordings(dir);
    REQUIRE(recs.size() == 3);
    CHECK(recs[0].label == 0);
    CHECK(recs[2].label == 2);
    CHECK_THROWS(load_recordings(dir / "missing"));
  }
}

TEST_CASE("dataset cache round trip") {
  const auto dir = kforge::testing::scratch_dir("cache");
  Rng rng(16);
  SynthCorpusConfig cfg;
  cfg.speeds_hz = {30.0};
  cfg.duration_samples = duration_for_windows(8, 200, 50);
  const WindowPool pool = build_window_pool(synth_corpus(cfg, rng), 200, 50);
  const DatasetSplits d = materialize(pool, split_indices(pool.labels, SplitRatios{}, rng, true));
  save_dataset_cache(dir / "data.kf", d);
  const DatasetSplits back = load_dataset_cache(dir / "data.kf");
  for (Split s : {Split::kTrain, Split::kVal, Split::kTest}) {
    CHECK(back.get(s).windows == d.get(s).windows);
    CHECK(back.get(s).labels == d.get(s).labels);
    CHECK(back.get(s).window_length == 200);
    CHECK(back.get(s).split == s);
  }
  CHECK_THROWS(load_dataset_cache(dir / "absent.kf"));
}
