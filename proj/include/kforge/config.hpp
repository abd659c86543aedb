#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "kforge/controller.hpp"
#include "kforge/data.hpp"
#include "kforge/search_engine.hpp"
#include "kforge/search_space.hpp"

namespace kforge {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataSettings {
  std::string recordings_dir;  // empty: generate the synthetic benchmark
  std::size_t window_length = 1000;
  std::size_t window_step = 50;
  double train_ratio = 0.72;
  double val_ratio = 0.08;
  double test_ratio = 0.20;
  std::string split_mode = "stratified";  // stratified | random | group
  std::size_t windows_per_recording = 1064;
  std::size_t recordings_per_condition = 1;
  double noise_sigma = 0.3;
  std::string cache = "dataset.kf";  // relative paths resolve against the output directory
};

/*
 * Everything a command needs. The text form is line-oriented
 * "key = value" under [section] headers:
 *
 *   [cli]            seed, output_dir
 *   [data-pipeline]  DataSettings
 *   [search-space]   StructureConfig
 *   [controller]     ControllerConfig (lr, hidden_size, ...)
 *   [search-engine]  SearchConfig
 *
 * '#' starts a comment. Unknown sections or keys are errors.
 */
struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "run";
  DataSettings data;
  StructureConfig structure;
  ControllerConfig controller;
  SearchConfig search;

  static RunConfig parse(const std::string& text, const std::string& source = "<config>");
  static RunConfig load(const std::filesystem::path& path);
  std::string to_text() const;
  void save(const std::filesystem::path& path) const;
  void validate() const;

  std::filesystem::path out_path(const std::string& name) const;
  std::filesystem::path cache_path() const;
  SplitRatios ratios() const { return {data.train_ratio, data.val_ratio, data.test_ratio}; }

  bool operator==(const RunConfig& other) const { return to_text() == other.to_text(); }
};

}  // namespace kforge
