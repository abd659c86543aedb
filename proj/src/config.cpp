#include "kforge/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

#include "kforge/checkpoint.hpp"

namespace kforge {
namespace {

struct Field {
  const char* section;
  const char* key;
  std::function<std::string()> get;
  std::function<void(std::string_view)> set;  // throws std::invalid_argument on a bad value
};

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

Field size_field(const char* section, const char* key, std::size_t& target) {
  return {section, key, [&target] { return std::to_string(target); },
          [&target](std::string_view v) {
            unsigned long long parsed = 0;
            const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), parsed);
            if (ec != std::errc() || ptr != v.data() + v.size()) {
              throw std::invalid_argument("expected a non-negative integer");
            }
            target = static_cast<std::size_t>(parsed);
          }};
}

Field u64_field(const char* section, const char* key, std::uint64_t& target) {
  return {section, key, [&target] { return std::to_string(target); },
          [&target](std::string_view v) {
            std::uint64_t parsed = 0;
            const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), parsed);
            if (ec != std::errc() || ptr != v.data() + v.size()) {
              throw std::invalid_argument("expected a non-negative integer");
            }
            target = parsed;
          }};
}

Field double_field(const char* section, const char* key, double& target) {
  return {section, key, [&target] { return format_double(target); },
          [&target](std::string_view v) {
            double parsed = 0.0;
            const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), parsed);
            if (ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(parsed)) {
              throw std::invalid_argument("expected a number");
            }
            target = parsed;
          }};
}

Field bool_field(const char* section, const char* key, bool& target) {
  return {section, key, [&target] { return std::string(target ? "true" : "false"); },
          [&target](std::string_view v) {
            if (v == "true") {
              target = true;
            } else if (v == "false") {
              target = false;
            } else {
              throw std::invalid_argument("expected true or false");
            }
          }};
}

Field string_field(const char* section, const char* key, std::string& target) {
  return {section, key, [&target] { return target; }, [&target](std::string_view v) { target = std::string(v); }};
}

std::vector<Field> fields(RunConfig& c) {
  return {
      u64_field("cli", "seed", c.seed),
      string_field("cli", "output_dir", c.output_dir),

      string_field("data-pipeline", "recordings_dir", c.data.recordings_dir),
      size_field("data-pipeline", "window_length", c.data.window_length),
      size_field("data-pipeline", "window_step", c.data.window_step),
      double_field("data-pipeline", "train_ratio", c.data.train_ratio),
      double_field("data-pipeline", "val_ratio", c.data.val_ratio),
      double_field("data-pipeline", "test_ratio", c.data.test_ratio),
      string_field("data-pipeline", "split_mode", c.data.split_mode),
      size_field("data-pipeline", "windows_per_recording", c.data.windows_per_recording),
      size_field("data-pipeline", "recordings_per_condition", c.data.recordings_per_condition),
      double_field("data-pipeline", "noise_sigma", c.data.noise_sigma),
      string_field("data-pipeline", "cache", c.data.cache),

      size_field("search-space", "num_blocks", c.structure.num_blocks),
      size_field("search-space", "layers_per_block", c.structure.layers_per_block),
      size_field("search-space", "stem_kernel", c.structure.stem_kernel),
      size_field("search-space", "stem_stride", c.structure.stem_stride),
      size_field("search-space", "base_channels", c.structure.base_channels),
      size_field("search-space", "downsample_kernel", c.structure.downsample_kernel),
      size_field("search-space", "downsample_stride", c.structure.downsample_stride),
      size_field("search-space", "num_classes", c.structure.num_classes),

      size_field("controller", "input_size", c.controller.input_size),
      size_field("controller", "hidden_size", c.controller.hidden_size),
      double_field("controller", "lr", c.controller.lr),
      double_field("controller", "grad_clip", c.controller.grad_clip),
      double_field("controller", "init_range", c.controller.init_range),

      size_field("search-engine", "epochs", c.search.epochs),
      size_field("search-engine", "controller_steps", c.search.controller_steps),
      size_field("search-engine", "archs_per_step", c.search.archs_per_step),
      size_field("search-engine", "final_samples", c.search.final_samples),
      size_field("search-engine", "batch_size", c.search.batch_size),
      double_field("search-engine", "child_lr", c.search.child_lr),
      double_field("search-engine", "child_weight_decay", c.search.child_weight_decay),
      size_field("search-engine", "reward_batch_size", c.search.reward_batch_size),
      bool_field("search-engine", "reward_full_validation", c.search.reward_full_validation),
      size_field("search-engine", "trend_samples", c.search.trend_samples),
      size_field("search-engine", "scratch_epochs", c.search.scratch_epochs),
  };
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

}  // namespace

RunConfig RunConfig::parse(const std::string& text, const std::string& source) {
  RunConfig c;
  const std::vector<Field> table = fields(c);
  std::istringstream in(text);
  std::string raw;
  std::string section;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& msg) {
    throw ConfigError(source + ":" + std::to_string(line_no) + ": " + msg);
  };
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail("malformed section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      const bool known = std::any_of(table.begin(), table.end(), [&](const Field& f) { return section == f.section; });
      if (!known) fail("unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) fail("expected 'key = value'");
    const std::string key(trim(line.substr(0, eq)));
    const std::string_view value = trim(line.substr(eq + 1));
    if (section.empty()) fail("key '" + key + "' appears before any [section]");
    const auto it = std::find_if(table.begin(), table.end(),
                                 [&](const Field& f) { return section == f.section && key == f.key; });
    if (it == table.end()) fail("unknown key '" + key + "' in [" + section + "]");
    try {
      it->set(value);
    } catch (const std::invalid_argument& e) {
      fail("bad value for " + key + ": " + e.what());
    }
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

std::string RunConfig::to_text() const {
  RunConfig copy = *this;
  const std::vector<Field> table = fields(copy);
  std::string out;
  std::string section;
  for (const Field& f : table) {
    if (section != f.section) {
      if (!section.empty()) out += '\n';
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += std::string(f.key) + " = " + f.get() + "\n";
  }
  return out;
}

void RunConfig::save(const std::filesystem::path& path) const { write_file_atomic(path, to_text()); }

void RunConfig::validate() const {
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
  if (data.window_length == 0 || data.window_step == 0) throw ConfigError("window length and step must be positive");
  if (data.windows_per_recording == 0 || data.recordings_per_condition == 0) {
    throw ConfigError("synthetic corpus sizes must be positive");
  }
  if (data.noise_sigma < 0.0) throw ConfigError("noise_sigma must be non-negative");
  if (data.split_mode != "stratified" && data.split_mode != "random" && data.split_mode != "group") {
    throw ConfigError("split_mode must be stratified, random or group");
  }
  if (data.train_ratio < 0 || data.val_ratio < 0 || data.test_ratio < 0 ||
      std::abs(data.train_ratio + data.val_ratio + data.test_ratio - 1.0) > 1e-9) {
    throw ConfigError("split ratios must be non-negative and sum to 1");
  }
  StructureConfig s = structure;
  s.input_length = data.window_length;
  try {
    s.validate();
    search.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  if (controller.input_size == 0 || controller.hidden_size == 0) throw ConfigError("controller sizes must be positive");
  if (!(controller.lr > 0.0)) throw ConfigError("controller lr must be positive");
}

std::filesystem::path RunConfig::out_path(const std::string& name) const {
  return std::filesystem::path(output_dir) / name;
}

std::filesystem::path RunConfig::cache_path() const {
  const std::filesystem::path p(data.cache);
  return p.is_absolute() ? p : out_path(data.cache);
}

}  // namespace kforge
