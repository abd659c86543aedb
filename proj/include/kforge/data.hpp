#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "kforge/random.hpp"
#include "kforge/tensor.hpp"

namespace kforge {

struct Recording {
  std::vector<double> samples;
  std::size_t label = 0;
  double speed_hz = 0.0;  // informational
  std::string load;       // informational
};

enum class Split { kTrain, kVal, kTest };
const char* split_name(Split split);
Split parse_split(const std::string& text);

struct WindowedDataset {
  std::size_t window_length = 0;
  std::vector<double> windows;  // [size, 1, window_length] row-major
  std::vector<std::size_t> labels;
  Split split = Split::kTrain;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  std::span<const double> window(std::size_t i) const;
  /// Stacks the given windows into a [B, 1, W] tensor.
  Tensor batch(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> class_counts(std::size_t num_classes) const;
};

class DegenerateWindowError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& file, std::size_t line, const std::string& message);
  const std::string& file() const { return file_; }
  std::size_t line() const { return line_; }

 private:
  std::string file_;
  std::size_t line_;
};

std::size_t window_count(std::size_t length, std::size_t window, std::size_t step);

/// Windows starting at 0, step, 2·step, …; the trailing partial window is dropped.
std::vector<std::vector<double>> segment(std::span<const double> samples, std::size_t window = 1000,
                                         std::size_t step = 50);

/// Per-window min-max scaling to [−1, 1]. Throws DegenerateWindowError on a constant window.
std::vector<double> normalize(std::span<const double> window);

/// All normalized windows of a set of recordings, tagged with label and source recording.
struct WindowPool {
  std::size_t window_length = 0;
  std::vector<double> windows;
  std::vector<std::size_t> labels;
  std::vector<std::size_t> groups;  // index of the source recording
  std::size_t rejected = 0;         // constant windows skipped

  std::size_t size() const { return labels.size(); }
};

WindowPool build_window_pool(const std::vector<Recording>& recordings, std::size_t window = 1000,
                             std::size_t step = 50);

struct SplitRatios {
  double train = 0.72;
  double val = 0.08;
  double test = 0.20;
};

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

/*
 * Random partition of [0, labels.size()). Split sizes are round(N·r_train) and
 * round(N·r_val), the rest going to test. When stratified, each class is
 * apportioned by largest remainder so class proportions hold to within one
 * window while the totals stay exact.
 */
SplitIndices split_indices(std::span<const std::size_t> labels, SplitRatios ratios, Rng& rng, bool stratified);

/// Keeps all windows of a recording in one split (whole recordings are apportioned).
SplitIndices split_indices_by_group(std::span<const std::size_t> labels, std::span<const std::size_t> groups,
                                    SplitRatios ratios, Rng& rng);

struct DatasetSplits {
  WindowedDataset train;
  WindowedDataset val;
  WindowedDataset test;

  const WindowedDataset& get(Split split) const;
};

DatasetSplits materialize(const WindowPool& pool, const SplitIndices& indices);

inline constexpr double kSynthSampleRate = 20000.0;
inline constexpr std::size_t kSynthClasses = 6;

/// Samples between fault impulses for a class at a shaft speed (0 for class 0).
double fault_period_samples(std::size_t class_id, double speed_hz);

/*
 * Gearbox-like vibration: gear-mesh carrier with two harmonics, plus for
 * classes 1–5 a train of exponentially decaying resonance bursts whose
 * repetition period and resonance band depend on the class, plus white noise.
 */
Recording synth_generate(std::size_t class_id, double speed_hz, std::size_t duration_samples, double noise_sigma,
                         Rng& rng);

struct SynthCorpusConfig {
  std::vector<double> speeds_hz{30.0, 35.0, 40.0, 45.0, 50.0};
  std::size_t recordings_per_condition = 1;  // per (class, speed)
  std::size_t duration_samples = 60000;
  double noise_sigma = 0.3;
};

/// One recording per (class, speed, repeat), classes outermost.
std::vector<Recording> synth_corpus(const SynthCorpusConfig& config, Rng& rng);

/// Recording length that yields exactly `windows` windows.
std::size_t duration_for_windows(std::size_t windows, std::size_t window = 1000, std::size_t step = 50);

/// Text format: "label=<int>", optional "speed_hz=<float>", then one float per line.
void write_recording(const std::filesystem::path& path, const Recording& recording);
Recording read_recording(const std::filesystem::path& path);
/// Every regular file in dir, in lexicographic path order.
std::vector<Recording> load_recordings(const std::filesystem::path& dir);

void save_dataset_cache(const std::filesystem::path& path, const DatasetSplits& splits);
DatasetSplits load_dataset_cache(const std::filesystem::path& path);

}  // namespace kforge
