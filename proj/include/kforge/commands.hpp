#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include "kforge/config.hpp"

namespace kforge {

/// Machine-readable results go to `out`; progress and diagnostics to `log`.
struct CommandIo {
  std::ostream& out;
  std::ostream& log;
};

/// "M1".."M6" name the uniform architectures of tokens 0..5; anything else is parsed as tokens.
Architecture resolve_architecture(const std::string& text, std::size_t num_positions);

/// Builds the windowed splits described by the config (synthetic or from recordings).
DatasetSplits build_dataset(const RunConfig& config, std::ostream* progress = nullptr);
/// Loads the cache written by gen-data, checking it against the config.
DatasetSplits load_dataset(const RunConfig& config);

/// The structure config with its input length tied to the data windows.
StructureConfig effective_structure(const RunConfig& config);

// Each returns the process exit code.
int cmd_gen_data(const RunConfig& config, CommandIo io);
int cmd_search(const RunConfig& config, CommandIo io);
int cmd_train(const RunConfig& config, const std::string& arch, CommandIo io);
int cmd_eval(const RunConfig& config, const std::filesystem::path& checkpoint, Split split, CommandIo io);
int cmd_compare(const RunConfig& config, CommandIo io);

/// Header of the comparison table written by compare.
inline constexpr const char* kComparisonHeader = "model,architecture,accuracy";

}  // namespace kforge
