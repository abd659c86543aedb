#include "kforge/commands.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "kforge/checkpoint.hpp"

namespace kforge {
namespace {

template <class Fn>
int guarded(CommandIo io, Fn&& fn) {
  try {
    fn();
    return 0;
  } catch (const std::exception& e) {
    io.log << "error: " << e.what() << "\n";
    return 1;
  }
}

void prepare_output(const RunConfig& config) {
  config.validate();
  std::error_code ec;
  std::filesystem::create_directories(config.output_dir, ec);
  if (ec || !std::filesystem::is_directory(config.output_dir)) {
    throw std::runtime_error("cannot create output directory '" + config.output_dir + "'");
  }
  config.save(config.out_path("config.ini"));
}

std::string format_fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

struct SearchArtifacts {
  KernelBank bank;
  Architecture searched;
};

SearchOutcome search_and_save(const RunConfig& config, const DatasetSplits& data, std::ostream& log) {
  SearchOutcome outcome =
      run_search(data, config.search, effective_structure(config), config.controller, config.seed, &log);
  outcome.metrics.write_csv(config.out_path("metrics.csv"));
  write_file_atomic(config.out_path("derivation.json"), outcome.derivation.to_report());
  Checkpoint ckpt;
  outcome.bank.save(ckpt);
  outcome.controller.save(ckpt, outcome.baseline);
  ckpt.save(config.out_path("search.kf"));
  return outcome;
}

// Reuses a finished search in the output directory, or runs one.
SearchArtifacts searched_or_run(const RunConfig& config, const DatasetSplits& data, std::ostream& log) {
  const auto report = config.out_path("derivation.json");
  const auto bank_file = config.out_path("search.kf");
  if (std::filesystem::exists(report) && std::filesystem::exists(bank_file)) {
    log << "reusing search results in " << config.output_dir << "\n";
    std::ifstream in(report);
    const auto j = nlohmann::json::parse(in);
    Architecture searched = Architecture::parse(j.at("winner").at("arch").get<std::string>());
    const StructureConfig structure = effective_structure(config);
    validate_architecture(searched, structure.num_positions());
    Rng init(0);
    KernelBank bank = KernelBank::init(structure, kNumKernelChoices, init);
    bank.load(Checkpoint::load(bank_file));
    return {std::move(bank), std::move(searched)};
  }
  SearchOutcome outcome = search_and_save(config, data, log);
  return {std::move(outcome.bank), outcome.derivation.best};
}

}  // namespace

Architecture resolve_architecture(const std::string& text, std::size_t num_positions) {
  if (text.size() == 2 && (text[0] == 'M' || text[0] == 'm') && text[1] >= '1' && text[1] <= '6') {
    return Architecture::uniform(static_cast<std::size_t>(text[1] - '1'), num_positions);
  }
  Architecture arch = Architecture::parse(text);
  validate_architecture(arch, num_positions);
  return arch;
}

StructureConfig effective_structure(const RunConfig& config) {
  StructureConfig s = config.structure;
  s.input_length = config.data.window_length;
  return s;
}

DatasetSplits build_dataset(const RunConfig& config, std::ostream* progress) {
  const DataSettings& d = config.data;
  std::vector<Recording> recordings;
  if (!d.recordings_dir.empty()) {
    recordings = load_recordings(d.recordings_dir);
    if (recordings.empty()) throw std::runtime_error("no recordings found in '" + d.recordings_dir + "'");
  } else {
    Rng rng = Rng::stream(config.seed, "data");
    SynthCorpusConfig synth;
    synth.recordings_per_condition = d.recordings_per_condition;
    synth.duration_samples = duration_for_windows(d.windows_per_recording, d.window_length, d.window_step);
    synth.noise_sigma = d.noise_sigma;
    recordings = synth_corpus(synth, rng);
  }
  for (const Recording& r : recordings) {
    if (r.label >= config.structure.num_classes) {
      throw std::runtime_error("recording label " + std::to_string(r.label) + " exceeds num_classes");
    }
  }
  const WindowPool pool = build_window_pool(recordings, d.window_length, d.window_step);
  if (progress && pool.rejected > 0) *progress << "warning: skipped " << pool.rejected << " constant windows\n";

  Rng split_rng = Rng::stream(config.seed, "split");
  SplitIndices indices;
  if (d.split_mode == "group") {
    indices = split_indices_by_group(pool.labels, pool.groups, config.ratios(), split_rng);
  } else {
    indices = split_indices(pool.labels, config.ratios(), split_rng, d.split_mode == "stratified");
  }
  return materialize(pool, indices);
}

DatasetSplits load_dataset(const RunConfig& config) {
  const auto path = config.cache_path();
  if (!std::filesystem::exists(path)) {
    throw std::runtime_error("dataset cache '" + path.string() + "' not found; run gen-data first");
  }
  DatasetSplits data = load_dataset_cache(path);
  if (data.train.window_length != config.data.window_length) {
    throw std::runtime_error("dataset cache holds windows of length " + std::to_string(data.train.window_length) +
                             " but the config expects " + std::to_string(config.data.window_length));
  }
  return data;
}

int cmd_gen_data(const RunConfig& config, CommandIo io) {
  return guarded(io, [&] {
    prepare_output(config);
    const DatasetSplits data = build_dataset(config, &io.log);
    save_dataset_cache(config.cache_path(), data);
    io.log << "wrote " << config.cache_path().string() << "\n";
    for (Split s : {Split::kTrain, Split::kVal, Split::kTest}) {
      io.out << split_name(s) << " " << data.get(s).size() << "\n";
    }
  });
}

int cmd_search(const RunConfig& config, CommandIo io) {
  return guarded(io, [&] {
    prepare_output(config);
    const DatasetSplits data = load_dataset(config);
    SearchOutcome outcome = search_and_save(config, data, io.log);

    Rng rng = Rng::stream(config.seed, "scratch");
    io.log << "retraining " << outcome.derivation.best.to_string() << " from scratch\n";
    ScratchResult result = train_from_scratch(outcome.derivation.best, effective_structure(config), data,
                                              ScratchConfig::from(config.search), rng, &io.log);
    Checkpoint model;
    result.model.save(model);
    model.save(config.out_path("model.kf"));

    io.out << "derived_arch " << outcome.derivation.best.to_string() << "\n";
    io.out << "derived_val_reward " << format_fixed(outcome.derivation.best_reward, 4) << "\n";
    io.out << "test_accuracy " << format_fixed(result.test_accuracy, 4) << "\n";
  });
}

int cmd_train(const RunConfig& config, const std::string& arch_text, CommandIo io) {
  return guarded(io, [&] {
    prepare_output(config);
    const StructureConfig structure = effective_structure(config);
    const Architecture arch = resolve_architecture(arch_text, structure.num_positions());
    const DatasetSplits data = load_dataset(config);
    Rng rng = Rng::stream(config.seed, "scratch");
    ScratchResult result = train_from_scratch(arch, structure, data, ScratchConfig::from(config.search), rng, &io.log);
    const double train_acc = evaluate(result.model, data.train, NormMode::kEval);
    Checkpoint model;
    result.model.save(model);
    model.save(config.out_path("trained.kf"));

    io.out << "arch " << arch.to_string() << "\n";
    io.out << "train_accuracy " << format_fixed(train_acc, 4) << "\n";
    io.out << "val_accuracy " << format_fixed(result.best_val_accuracy, 4) << "\n";
    io.out << "test_accuracy " << format_fixed(result.test_accuracy, 4) << "\n";
  });
}

int cmd_eval(const RunConfig& config, const std::filesystem::path& checkpoint, Split split, CommandIo io) {
  return guarded(io, [&] {
    config.validate();
    ChildNetwork net = ChildNetwork::load(Checkpoint::load(checkpoint));
    const DatasetSplits data = load_dataset(config);
    const WindowedDataset& set = data.get(split);
    if (net.structure().input_length != set.window_length) {
      throw std::runtime_error("checkpoint expects windows of length " + std::to_string(net.structure().input_length) +
                               ", dataset has " + std::to_string(set.window_length));
    }
    if (set.empty()) throw std::runtime_error(std::string("split '") + split_name(split) + "' is empty");
    for (std::size_t y : set.labels) {
      if (y >= net.structure().num_classes) throw std::runtime_error("dataset labels exceed the model's class count");
    }
    io.out << format_fixed(evaluate(net, set, NormMode::kEval), 4) << "\n";
  });
}

int cmd_compare(const RunConfig& config, CommandIo io) {
  return guarded(io, [&] {
    prepare_output(config);
    const DatasetSplits data = load_dataset(config);
    const StructureConfig structure = effective_structure(config);
    SearchArtifacts search = searched_or_run(config, data, io.log);
    const Derivation random = random_search_on_bank(search.bank, data, config.search, config.seed);

    std::vector<std::pair<std::string, Architecture>> rows;
    for (int m = 1; m <= 6; ++m) {
      const std::string name = "M" + std::to_string(m);
      rows.emplace_back(name, resolve_architecture(name, structure.num_positions()));
    }
    rows.emplace_back("searched", search.searched);
    rows.emplace_back("random-search", random.best);

    std::map<Architecture, double> trained;
    std::string csv = std::string(kComparisonHeader) + "\n";
    for (const auto& [name, arch] : rows) {
      auto it = trained.find(arch);
      if (it == trained.end()) {
        io.log << "training " << name << " [" << arch.to_string() << "]\n";
        Rng rng = Rng::stream(config.seed, "scratch");
        const ScratchResult r = train_from_scratch(arch, structure, data, ScratchConfig::from(config.search), rng);
        it = trained.emplace(arch, r.test_accuracy).first;
      }
      csv += name + "," + arch.to_string() + "," + format_fixed(100.0 * it->second, 2) + "\n";
    }
    write_file_atomic(config.out_path("comparison.csv"), csv);
    io.out << csv;
  });
}

}  // namespace kforge
