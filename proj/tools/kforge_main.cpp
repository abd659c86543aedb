#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "kforge/commands.hpp"

namespace {

struct GlobalFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

kforge::RunConfig resolve(const GlobalFlags& flags) {
  kforge::RunConfig config = flags.config.empty() ? kforge::RunConfig{} : kforge::RunConfig::load(flags.config);
  if (flags.seed) config.seed = *flags.seed;
  if (!flags.out.empty()) config.output_dir = flags.out;
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Kernel-size search for 1-D convolutional fault classifiers"};
  app.require_subcommand(1);

  GlobalFlags flags;
  auto add_common = [&flags](CLI::App* cmd) {
    cmd->add_option("--config", flags.config, "INI-style run configuration")->check(CLI::ExistingFile);
    cmd->add_option("--seed", flags.seed, "Overrides [cli] seed");
    cmd->add_option("--out", flags.out, "Overrides [cli] output_dir");
  };

  auto* gen = app.add_subcommand("gen-data", "Build the windowed dataset cache");
  auto* search = app.add_subcommand("search", "Run the architecture search and retrain the winner");
  auto* train = app.add_subcommand("train", "Train one architecture from scratch");
  auto* eval = app.add_subcommand("eval", "Score a trained checkpoint");
  auto* compare = app.add_subcommand("compare", "Baselines versus searched and random-search architectures");
  for (auto* cmd : {gen, search, train, eval, compare}) add_common(cmd);

  std::string arch;
  train->add_option("--arch", arch, "M1..M6 or space-separated tokens, e.g. \"0 3 1 5 2 4 0 1\"")->required();

  std::string checkpoint;
  std::string split = "test";
  eval->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  eval->add_option("--split", split, "train, val or test")
      ->check(CLI::IsMember({"train", "val", "test"}));

  CLI11_PARSE(app, argc, argv);

  kforge::RunConfig config;
  try {
    config = resolve(flags);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  const kforge::CommandIo io{std::cout, std::cerr};

  if (gen->parsed()) return kforge::cmd_gen_data(config, io);
  if (search->parsed()) return kforge::cmd_search(config, io);
  if (train->parsed()) return kforge::cmd_train(config, arch, io);
  if (eval->parsed()) return kforge::cmd_eval(config, checkpoint, kforge::parse_split(split), io);
  return kforge::cmd_compare(config, io);
}
