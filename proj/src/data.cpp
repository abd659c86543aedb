#include "kforge/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "kforge/checkpoint.hpp"

namespace kforge {

const char* split_name(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

Split parse_split(const std::string& text) {
  if (text == "train") return Split::kTrain;
  if (text == "val") return Split::kVal;
  if (text == "test") return Split::kTest;
  throw std::invalid_argument("unknown split '" + text + "' (expected train, val or test)");
}

std::span<const double> WindowedDataset::window(std::size_t i) const {
  if (i >= size()) throw std::out_of_range("window index out of range");
  return std::span<const double>(windows).subspan(i * window_length, window_length);
}

Tensor WindowedDataset::batch(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw std::invalid_argument("empty batch");
  std::vector<double> values;
  values.reserve(indices.size() * window_length);
  for (std::size_t i : indices) {
    const auto w = window(i);
    values.insert(values.end(), w.begin(), w.end());
  }
  return Tensor::from({indices.size(), 1, window_length}, std::move(values));
}

std::vector<std::size_t> WindowedDataset::class_counts(std::size_t num_classes) const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (std::size_t y : labels) {
    if (y >= num_classes) throw std::out_of_range("label exceeds class count");
    ++counts[y];
  }
  return counts;
}

const WindowedDataset& DatasetSplits::get(Split split) const {
  switch (split) {
    case Split::kTrain: return train;
    case Split::kVal: return val;
    case Split::kTest: return test;
  }
  throw std::invalid_argument("bad split");
}

ParseError::ParseError(const std::string& file, std::size_t line, const std::string& message)
    : std::runtime_error(file + ":" + std::to_string(line) + ": " + message), file_(file), line_(line) {}

std::size_t window_count(std::size_t length, std::size_t window, std::size_t step) {
  if (window == 0 || step == 0) throw std::invalid_argument("window and step must be positive");
  if (length < window) {
    throw std::invalid_argument("recording of " + std::to_string(length) + " samples is shorter than the window (" +
                                std::to_string(window) + ")");
  }
  return (length - window) / step + 1;
}

std::vector<std::vector<double>> segment(std::span<const double> samples, std::size_t window, std::size_t step) {
  const std::size_t count = window_count(samples.size(), window, step);
  std::vector<std::vector<double>> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto w = samples.subspan(i * step, window);
    out.emplace_back(w.begin(), w.end());
  }
  return out;
}

std::vector<double> normalize(std::span<const double> window) {
  if (window.empty()) throw DegenerateWindowError("cannot normalize an empty window");
  const auto [lo_it, hi_it] = std::minmax_element(window.begin(), window.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) throw DegenerateWindowError("constant window cannot be scaled to [-1, 1]");
  std::vector<double> out(window.size());
  const double range = hi - lo;
  for (std::size_t i = 0; i < window.size(); ++i) {
    if (window[i] == lo) {
      out[i] = -1.0;
    } else if (window[i] == hi) {
      out[i] = 1.0;
    } else {
      out[i] = std::clamp(2.0 * (window[i] - lo) / range - 1.0, -1.0, 1.0);
    }
  }
  return out;
}

WindowPool build_window_pool(const std::vector<Recording>& recordings, std::size_t window, std::size_t step) {
  WindowPool pool;
  pool.window_length = window;
  for (std::size_t r = 0; r < recordings.size(); ++r) {
    const Recording& rec = recordings[r];
    const std::size_t count = window_count(rec.samples.size(), window, step);
    for (std::size_t i = 0; i < count; ++i) {
      const auto raw = std::span<const double>(rec.samples).subspan(i * step, window);
      try {
        const auto norm = normalize(raw);
        pool.windows.insert(pool.windows.end(), norm.begin(), norm.end());
        pool.labels.push_back(rec.label);
        pool.groups.push_back(r);
      } catch (const DegenerateWindowError&) {
        ++pool.rejected;
      }
    }
  }
  return pool;
}

namespace {

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.uniform_index(i)]);
}

void check_ratios(const SplitRatios& r) {
  if (r.train < 0 || r.val < 0 || r.test < 0) throw std::invalid_argument("split ratios must be non-negative");
  if (std::abs(r.train + r.val + r.test - 1.0) > 1e-9) throw std::invalid_argument("split ratios must sum to 1");
}

// Integer allocation of `target` items over buckets proportional to quotas,
// capped per bucket, by largest remainder (ties to the lower index).
std::vector<std::size_t> apportion(const std::vector<double>& quotas, const std::vector<std::size_t>& caps,
                                   std::size_t target) {
  const std::size_t k = quotas.size();
  std::vector<std::size_t> out(k);
  std::size_t given = 0;
  for (std::size_t c = 0; c < k; ++c) {
    out[c] = std::min(caps[c], static_cast<std::size_t>(std::floor(quotas[c])));
    given += out[c];
  }
  std::vector<std::size_t> order(k);
  for (std::size_t c = 0; c < k; ++c) order[c] = c;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return quotas[a] - std::floor(quotas[a]) > quotas[b] - std::floor(quotas[b]);
  });
  while (given < target) {
    bool progressed = false;
    for (std::size_t c : order) {
      if (given == target) break;
      if (out[c] < caps[c]) {
        ++out[c];
        ++given;
        progressed = true;
      }
    }
    if (!progressed) break;
  }
  return out;
}

struct Targets {
  std::size_t train, val;
};

Targets split_targets(std::size_t n, const SplitRatios& r) {
  auto train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * r.train));
  auto val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * r.val));
  train = std::min(train, n);
  val = std::min(val, n - train);
  return {train, val};
}

// Splits items that are grouped into classes; `members[c]` already shuffled.
SplitIndices apportion_classes(const std::vector<std::vector<std::size_t>>& members, const SplitRatios& r,
                               std::size_t total) {
  const std::size_t k = members.size();
  const Targets t = split_targets(total, r);
  std::vector<double> quotas(k);
  std::vector<std::size_t> caps(k);
  for (std::size_t c = 0; c < k; ++c) {
    quotas[c] = static_cast<double>(members[c].size()) * r.train;
    caps[c] = members[c].size();
  }
  const auto n_train = apportion(quotas, caps, t.train);
  for (std::size_t c = 0; c < k; ++c) {
    quotas[c] = static_cast<double>(members[c].size()) * r.val;
    caps[c] = members[c].size() - n_train[c];
  }
  const auto n_val = apportion(quotas, caps, t.val);

  SplitIndices out;
  for (std::size_t c = 0; c < k; ++c) {
    const auto& m = members[c];
    out.train.insert(out.train.end(), m.begin(), m.begin() + static_cast<std::ptrdiff_t>(n_train[c]));
    out.val.insert(out.val.end(), m.begin() + static_cast<std::ptrdiff_t>(n_train[c]),
                   m.begin() + static_cast<std::ptrdiff_t>(n_train[c] + n_val[c]));
    out.test.insert(out.test.end(), m.begin() + static_cast<std::ptrdiff_t>(n_train[c] + n_val[c]), m.end());
  }
  return out;
}

std::vector<std::vector<std::size_t>> members_by_class(std::span<const std::size_t> labels) {
  const std::size_t k = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<std::vector<std::size_t>> members(k);
  for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(i);
  for (std::size_t c = 0; c < k; ++c) {
    if (members[c].empty()) {
      throw std::invalid_argument("stratified split: class " + std::to_string(c) + " has no windows");
    }
  }
  return members;
}

}  // namespace

SplitIndices split_indices(std::span<const std::size_t> labels, SplitRatios ratios, Rng& rng, bool stratified) {
  check_ratios(ratios);
  SplitIndices out;
  if (stratified) {
    auto members = members_by_class(labels);
    for (auto& m : members) shuffle(m, rng);
    out = apportion_classes(members, ratios, labels.size());
  } else {
    std::vector<std::size_t> all(labels.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    shuffle(all, rng);
    const Targets t = split_targets(all.size(), ratios);
    out.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(t.train));
    out.val.assign(all.begin() + static_cast<std::ptrdiff_t>(t.train),
                   all.begin() + static_cast<std::ptrdiff_t>(t.train + t.val));
    out.test.assign(all.begin() + static_cast<std::ptrdiff_t>(t.train + t.val), all.end());
  }
  shuffle(out.train, rng);
  shuffle(out.val, rng);
  shuffle(out.test, rng);
  return out;
}

SplitIndices split_indices_by_group(std::span<const std::size_t> labels, std::span<const std::size_t> groups,
                                    SplitRatios ratios, Rng& rng) {
  check_ratios(ratios);
  if (labels.size() != groups.size()) throw std::invalid_argument("labels and groups differ in length");
  const std::size_t n_groups = groups.empty() ? 0 : *std::max_element(groups.begin(), groups.end()) + 1;
  std::vector<std::vector<std::size_t>> group_members(n_groups);
  std::vector<std::size_t> group_label(n_groups, 0);
  for (std::size_t i = 0; i < groups.size(); ++i) {
    group_members[groups[i]].push_back(i);
    group_label[groups[i]] = labels[i];
  }
  std::vector<std::size_t> present;
  std::vector<std::size_t> present_labels;
  for (std::size_t g = 0; g < n_groups; ++g) {
    if (group_members[g].empty()) continue;
    present.push_back(g);
    present_labels.push_back(group_label[g]);
  }
  auto members = members_by_class(present_labels);
  for (auto& m : members) {
    shuffle(m, rng);
    for (std::size_t& idx : m) idx = present[idx];
  }
  const SplitIndices by_group = apportion_classes(members, ratios, present.size());
  SplitIndices out;
  auto expand = [&](const std::vector<std::size_t>& gs, std::vector<std::size_t>& dst) {
    for (std::size_t g : gs) dst.insert(dst.end(), group_members[g].begin(), group_members[g].end());
    shuffle(dst, rng);
  };
  expand(by_group.train, out.train);
  expand(by_group.val, out.val);
  expand(by_group.test, out.test);
  return out;
}

DatasetSplits materialize(const WindowPool& pool, const SplitIndices& indices) {
  auto take = [&](const std::vector<std::size_t>& idx, Split split) {
    WindowedDataset ds;
    ds.window_length = pool.window_length;
    ds.split = split;
    ds.windows.reserve(idx.size() * pool.window_length);
    for (std::size_t i : idx) {
      if (i >= pool.size()) throw std::out_of_range("split index outside window pool");
      const auto begin = pool.windows.begin() + static_cast<std::ptrdiff_t>(i * pool.window_length);
      ds.windows.insert(ds.windows.end(), begin, begin + static_cast<std::ptrdiff_t>(pool.window_length));
      ds.labels.push_back(pool.labels[i]);
    }
    return ds;
  };
  return {take(indices.train, Split::kTrain), take(indices.val, Split::kVal), take(indices.test, Split::kTest)};
}

namespace {

struct FaultSignature {
  double order;           // impulses per shaft revolution
  double resonance_hz;
  double decay_samples;
};

// Classes 3 and 4 share a resonance and differ only in repetition period.
constexpr FaultSignature kSignatures[kSynthClasses] = {
    {0.0, 0.0, 0.0},
    {4.0, 3000.0, 10.0},
    {9.0, 4500.0, 8.0},
    {1.5, 2200.0, 14.0},
    {2.5, 2200.0, 14.0},
    {6.0, 6000.0, 8.0},
};

constexpr double kMeshTeeth = 32.0;

}  // namespace

double fault_period_samples(std::size_t class_id, double speed_hz) {
  if (class_id >= kSynthClasses) throw std::out_of_range("synthetic class must lie in [0, 6)");
  if (class_id == 0) return 0.0;
  return kSynthSampleRate / (kSignatures[class_id].order * speed_hz);
}

Recording synth_generate(std::size_t class_id, double speed_hz, std::size_t duration_samples, double noise_sigma,
                         Rng& rng) {
  if (class_id >= kSynthClasses) {
    throw std::out_of_range("synthetic class " + std::to_string(class_id) + " outside [0, 6)");
  }
  if (!(speed_hz > 0.0)) throw std::invalid_argument("shaft speed must be positive");
  if (noise_sigma < 0.0) throw std::invalid_argument("noise sigma must be non-negative");
  if (duration_samples == 0) throw std::invalid_argument("duration must be positive");

  constexpr double two_pi = 2.0 * std::numbers::pi;
  const double mesh_hz = kMeshTeeth * speed_hz;
  const double phase[3] = {rng.uniform(0.0, two_pi), rng.uniform(0.0, two_pi), rng.uniform(0.0, two_pi)};
  constexpr double harmonic_amp[3] = {1.0, 0.5, 0.25};

  std::vector<double> x(duration_samples, 0.0);
  for (std::size_t t = 0; t < duration_samples; ++t) {
    const double time = static_cast<double>(t) / kSynthSampleRate;
    double v = 0.0;
    for (int h = 0; h < 3; ++h) v += harmonic_amp[h] * std::sin(two_pi * (h + 1) * mesh_hz * time + phase[h]);
    x[t] = v;
  }

  if (class_id != 0) {
    const FaultSignature& sig = kSignatures[class_id];
    const double period = fault_period_samples(class_id, speed_hz);
    const auto tail = static_cast<std::size_t>(std::ceil(8.0 * sig.decay_samples));
    double onset = rng.uniform(0.0, period);
    while (onset < static_cast<double>(duration_samples)) {
      const double amplitude = 1.2 * rng.uniform(0.8, 1.2);
      const auto start = static_cast<std::size_t>(onset);
      for (std::size_t k = 0; k < tail && start + k < duration_samples; ++k) {
        const double dt = static_cast<double>(k);
        x[start + k] += amplitude * std::exp(-dt / sig.decay_samples) *
                        std::sin(two_pi * sig.resonance_hz * dt / kSynthSampleRate + std::numbers::pi / 2.0);
      }
      onset += period * rng.uniform(0.97, 1.03);
    }
  }

  if (noise_sigma > 0.0) {
    for (double& v : x) v += noise_sigma * rng.normal();
  }
  for (double& v : x) v *= 0.5;

  Recording rec;
  rec.samples = std::move(x);
  rec.label = class_id;
  rec.speed_hz = speed_hz;
  return rec;
}

std::vector<Recording> synth_corpus(const SynthCorpusConfig& config, Rng& rng) {
  if (config.speeds_hz.empty()) throw std::invalid_argument("synthetic corpus needs at least one shaft speed");
  std::vector<Recording> out;
  for (std::size_t c = 0; c < kSynthClasses; ++c) {
    for (double speed : config.speeds_hz) {
      for (std::size_t r = 0; r < config.recordings_per_condition; ++r) {
        out.push_back(synth_generate(c, speed, config.duration_samples, config.noise_sigma, rng));
      }
    }
  }
  return out;
}

std::size_t duration_for_windows(std::size_t windows, std::size_t window, std::size_t step) {
  if (windows == 0) throw std::invalid_argument("window count must be positive");
  return (windows - 1) * step + window;
}

void write_recording(const std::filesystem::path& path, const Recording& recording) {
  std::ostringstream out;
  out << "label=" << recording.label << '\n';
  if (recording.speed_hz > 0.0) out << "speed_hz=" << std::setprecision(17) << recording.speed_hz << '\n';
  out << std::setprecision(17);
  for (double v : recording.samples) out << v << '\n';
  write_file_atomic(path, out.str());
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

bool parse_double(std::string_view s, double& out) {
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size() && std::isfinite(out);
}

}  // namespace

Recording read_recording(const std::filesystem::path& path) {
  std::ifstream in(path);
  const std::string file = path.string();
  if (!in) throw ParseError(file, 0, "cannot open file");
  Recording rec;
  std::string line;
  std::size_t line_no = 0;

  if (!std::getline(in, line)) throw ParseError(file, 1, "empty file");
  ++line_no;
  std::string_view head = trim(line);
  if (head.substr(0, 6) != "label=") throw ParseError(file, 1, "expected header 'label=<int>'");
  {
    const std::string_view value = head.substr(6);
    long long label = -1;
    const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), label);
    if (ec != std::errc() || ptr != value.data() + value.size() || label < 0) {
      throw ParseError(file, 1, "label must be a non-negative integer");
    }
    rec.label = static_cast<std::size_t>(label);
  }

  while (std::getline(in, line)) {
    ++line_no;
    const std::string_view text = trim(line);
    if (text.empty()) continue;
    if (rec.samples.empty() && text.substr(0, 9) == "speed_hz=") {
      if (!parse_double(text.substr(9), rec.speed_hz)) throw ParseError(file, line_no, "speed_hz is not a number");
      continue;
    }
    double v = 0.0;
    if (!parse_double(text, v)) throw ParseError(file, line_no, "sample '" + std::string(text) + "' is not a number");
    rec.samples.push_back(v);
  }
  if (rec.samples.empty()) throw ParseError(file, line_no, "recording has no samples");
  return rec;
}

std::vector<Recording> load_recordings(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw std::runtime_error("'" + dir.string() + "' is not a directory");
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Recording> out;
  out.reserve(files.size());
  for (const auto& f : files) out.push_back(read_recording(f));
  return out;
}

void save_dataset_cache(const std::filesystem::path& path, const DatasetSplits& splits) {
  Checkpoint ckpt;
  ckpt.put_scalar("meta/window_length", static_cast<double>(splits.train.window_length));
  for (Split s : {Split::kTrain, Split::kVal, Split::kTest}) {
    const WindowedDataset& ds = splits.get(s);
    const std::string prefix = split_name(s);
    ckpt.put_scalar(prefix + "/count", static_cast<double>(ds.size()));
    if (ds.empty()) continue;
    ckpt.put(prefix + "/windows", Shape{ds.size(), 1, ds.window_length}, ds.windows);
    std::vector<double> labels(ds.labels.begin(), ds.labels.end());
    ckpt.put(prefix + "/labels", Shape{ds.size()}, std::move(labels));
  }
  ckpt.save(path);
}

DatasetSplits load_dataset_cache(const std::filesystem::path& path) {
  const Checkpoint ckpt = Checkpoint::load(path);
  const auto window_length = static_cast<std::size_t>(ckpt.get_scalar("meta/window_length"));
  DatasetSplits out;
  for (Split s : {Split::kTrain, Split::kVal, Split::kTest}) {
    WindowedDataset& ds = s == Split::kTrain ? out.train : (s == Split::kVal ? out.val : out.test);
    ds.split = s;
    ds.window_length = window_length;
    const std::string prefix = split_name(s);
    const auto count = static_cast<std::size_t>(ckpt.get_scalar(prefix + "/count"));
    if (count == 0) continue;
    const NamedArray& w = ckpt.get(prefix + "/windows");
    if (w.shape != Shape{count, 1, window_length}) {
      throw CheckpointError("dataset cache: " + prefix + "/windows has shape " + shape_to_string(w.shape));
    }
    ds.windows = w.values;
    const NamedArray& l = ckpt.get(prefix + "/labels");
    if (l.values.size() != count) throw CheckpointError("dataset cache: " + prefix + "/labels has the wrong length");
    for (double v : l.values) ds.labels.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

}  // namespace kforge
