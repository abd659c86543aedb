#include "kforge/search_engine.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "kforge/checkpoint.hpp"

namespace kforge {

void SearchConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw std::invalid_argument(std::string("search: ") + name + " must be positive");
  };
  positive(epochs, "epochs");
  positive(controller_steps, "controller_steps");
  positive(archs_per_step, "archs_per_step");
  positive(final_samples, "final_samples");
  positive(batch_size, "batch_size");
  positive(reward_batch_size, "reward_batch_size");
  positive(trend_samples, "trend_samples");
  if (!(child_lr > 0.0)) throw std::invalid_argument("search: child_lr must be positive");
  if (child_weight_decay < 0.0) throw std::invalid_argument("search: child_weight_decay must be non-negative");
}

ScratchConfig ScratchConfig::from(const SearchConfig& search) {
  ScratchConfig c;
  c.epochs = search.scratch_epochs;
  c.batch_size = search.batch_size;
  c.lr = search.child_lr;
  c.weight_decay = search.child_weight_decay;
  return c;
}

std::string MetricsLog::to_csv() const {
  std::string out = kHeader;
  out += '\n';
  char line[256];
  for (const MetricsRow& r : rows) {
    std::snprintf(line, sizeof line, "%zu,%.6f,%.6f,%.6f,%.6f,%.6f,%.3f\n", r.epoch, r.mean_acc, r.max_acc,
                  r.min_acc, r.baseline, r.ctrl_loss, r.seconds);
    out += line;
  }
  return out;
}

void MetricsLog::write_csv(const std::filesystem::path& path) const { write_file_atomic(path, to_csv()); }

double accuracy_of(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("accuracy: logits " + shape_to_string(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t classes = logits.dim(1);
  const auto v = logits.data();
  std::size_t correct = 0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    const auto row = v.subspan(b * classes, classes);
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    if (best == labels[b]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

double evaluate(ChildNetwork& net, const WindowedDataset& data, std::span<const std::size_t> indices, NormMode mode,
                std::size_t chunk_size) {
  if (indices.empty()) throw std::invalid_argument("evaluate: empty dataset");
  if (chunk_size == 0) throw std::invalid_argument("evaluate: chunk size must be positive");
  std::size_t correct = 0;
  std::vector<std::size_t> labels;
  for (std::size_t start = 0; start < indices.size(); start += chunk_size) {
    const auto chunk = indices.subspan(start, std::min(chunk_size, indices.size() - start));
    labels.clear();
    for (std::size_t i : chunk) labels.push_back(data.labels.at(i));
    const Tensor logits = net.forward(nullptr, data.batch(chunk), mode);
    correct += static_cast<std::size_t>(std::llround(accuracy_of(logits, labels) * static_cast<double>(chunk.size())));
  }
  return static_cast<double>(correct) / static_cast<double>(indices.size());
}

double evaluate(ChildNetwork& net, const WindowedDataset& data, NormMode mode, std::size_t chunk_size) {
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return evaluate(net, data, all, mode, chunk_size);
}

double evaluate_shared(KernelBank& bank, const Architecture& arch, const WindowedDataset& data,
                       std::span<const std::size_t> indices, std::size_t chunk_size) {
  ChildNetwork child = build_child(arch, bank);
  return evaluate(child, data, indices, NormMode::kBatchStats, chunk_size);
}

double evaluate_shared(KernelBank& bank, const Architecture& arch, const WindowedDataset& data,
                       std::size_t chunk_size) {
  ChildNetwork child = build_child(arch, bank);
  return evaluate(child, data, NormMode::kBatchStats, chunk_size);
}

namespace {

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.uniform_index(i)]);
}

std::vector<std::size_t> labels_of(const WindowedDataset& data, std::span<const std::size_t> indices) {
  std::vector<std::size_t> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(data.labels.at(i));
  return out;
}

}  // namespace

std::vector<std::vector<std::size_t>> shuffled_batches(std::size_t n, std::size_t batch_size, Rng& rng) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  shuffle(order, rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + batch_size)));
  }
  return out;
}

double shared_train_step(KernelBank& bank, Adam& optimizer, const Architecture& arch, const Tensor& x,
                         std::span<const std::size_t> labels) {
  optimizer.zero_grad();
  ChildNetwork child = build_child(arch, bank);
  Tape tape;
  const Tensor logits = child.forward(&tape, x, NormMode::kTrain);
  const Tensor loss = softmax_cross_entropy(&tape, logits, labels).loss;
  const double value = loss.item();
  tape.backward(loss);
  optimizer.step();
  return value;
}

SharedEpochStats shared_train_epoch(KernelBank& bank, Adam& optimizer, const ArchSampler& sampler,
                                    const WindowedDataset& train, std::size_t batch_size, Rng& sample_rng,
                                    Rng& shuffle_rng) {
  if (train.empty()) throw std::invalid_argument("shared training needs a non-empty training set");
  SharedEpochStats stats;
  double loss_sum = 0.0;
  for (const auto& batch : shuffled_batches(train.size(), batch_size, shuffle_rng)) {
    Architecture arch = sampler(sample_rng);
    const auto labels = labels_of(train, batch);
    loss_sum += shared_train_step(bank, optimizer, arch, train.batch(batch), labels);
    stats.sampled.push_back(std::move(arch));
    ++stats.steps;
  }
  optimizer.zero_grad();
  stats.mean_loss = loss_sum / static_cast<double>(stats.steps);
  return stats;
}

SharedEpochStats shared_train_epoch(KernelBank& bank, Adam& optimizer, const Controller& controller,
                                    const WindowedDataset& train, std::size_t batch_size, Rng& sample_rng,
                                    Rng& shuffle_rng) {
  const ArchSampler sampler = [&controller](Rng& rng) { return controller.sample(rng).arch; };
  return shared_train_epoch(bank, optimizer, sampler, train, batch_size, sample_rng, shuffle_rng);
}

ControllerPhaseStats controller_train_phase(Controller& controller, RewardBaseline& baseline,
                                            const BatchRewardFn& reward, std::size_t steps, std::size_t m,
                                            Rng& sample_rng) {
  if (m == 0) throw std::invalid_argument("controller phase needs at least one architecture per step");
  ControllerPhaseStats stats;
  for (std::size_t step = 0; step < steps; ++step) {
    std::vector<SampleRecord> records;
    std::vector<Architecture> archs;
    for (std::size_t k = 0; k < m; ++k) {
      records.push_back(controller.sample(sample_rng));
      archs.push_back(records.back().arch);
    }
    const std::vector<double> rewards = reward(archs);
    if (rewards.size() != m) throw std::logic_error("reward function returned the wrong number of rewards");
    stats.reward_evaluations += m;
    for (std::size_t k = 0; k < m; ++k) records[k].reward = rewards[k];
    stats.surrogate_losses.push_back(controller.reinforce_update(records, baseline));
    baseline.update(rewards);
    stats.mean_rewards.push_back(std::accumulate(rewards.begin(), rewards.end(), 0.0) / static_cast<double>(m));
  }
  return stats;
}

Derivation pick_best(std::vector<Architecture> samples, const RewardFn& reward) {
  if (samples.empty()) throw std::invalid_argument("derivation needs at least one sample");
  Derivation d;
  d.samples = std::move(samples);
  std::map<Architecture, std::size_t> seen;  // arch -> index into scored
  for (const Architecture& a : d.samples) {
    auto [it, inserted] = seen.try_emplace(a, d.scored.size());
    if (inserted) {
      d.scored.push_back({a, reward(a), 1});
      ++d.evaluations;
    } else {
      ++d.scored[it->second].times_sampled;
    }
  }
  // std::map iterates in token order, so the first maximum is the smallest tie.
  const CandidateScore* best = nullptr;
  for (const auto& [arch, idx] : seen) {
    const CandidateScore& c = d.scored[idx];
    if (best == nullptr || c.reward > best->reward) best = &c;
  }
  d.best = best->arch;
  d.best_reward = best->reward;
  for (const auto& [arch, idx] : seen) {
    if (d.scored[idx].reward == d.best_reward && arch != d.best) d.tied.push_back(arch);
  }
  return d;
}

std::string Derivation::to_report() const {
  nlohmann::ordered_json j;
  j["num_samples"] = samples.size();
  j["unique_architectures"] = scored.size();
  j["evaluations"] = evaluations;
  nlohmann::ordered_json list = nlohmann::ordered_json::array();
  for (const Architecture& a : samples) {
    const auto it = std::find_if(scored.begin(), scored.end(), [&](const CandidateScore& c) { return c.arch == a; });
    list.push_back({{"arch", a.to_string()}, {"reward", it->reward}});
  }
  j["samples"] = std::move(list);
  j["winner"] = {{"arch", best.to_string()}, {"reward", best_reward}};
  nlohmann::ordered_json ties = nlohmann::ordered_json::array();
  for (const Architecture& a : tied) ties.push_back(a.to_string());
  j["ties"] = std::move(ties);
  j["tie_rule"] = "lexicographically smallest token list";
  return j.dump(2) + "\n";
}

Derivation derive_best(const Controller& controller, std::size_t samples, const RewardFn& reward, Rng& rng) {
  std::vector<Architecture> drawn;
  for (std::size_t i = 0; i < samples; ++i) drawn.push_back(controller.sample(rng).arch);
  return pick_best(std::move(drawn), reward);
}

Derivation random_search_baseline(std::size_t budget, std::size_t num_positions, std::size_t num_choices,
                                  const RewardFn& reward, Rng& rng) {
  if (budget == 0) throw std::invalid_argument("random search budget must be at least 1");
  bool enumerate = false;
  std::uint64_t total = 0;
  try {
    total = space_size(num_choices, num_positions);
    enumerate = budget >= total;
  } catch (const std::overflow_error&) {
  }
  std::vector<Architecture> drawn;
  if (enumerate) {
    Architecture a = Architecture::uniform(0, num_positions);
    for (std::uint64_t i = 0; i < total; ++i) {
      drawn.push_back(a);
      for (std::size_t p = num_positions; p-- > 0;) {
        if (++a.tokens[p] < num_choices) break;
        a.tokens[p] = 0;
      }
    }
  } else {
    for (std::size_t i = 0; i < budget; ++i) {
      Architecture a;
      for (std::size_t p = 0; p < num_positions; ++p) a.tokens.push_back(rng.uniform_index(num_choices));
      drawn.push_back(std::move(a));
    }
  }
  return pick_best(std::move(drawn), reward);
}

ScratchResult train_from_scratch(const Architecture& arch, const StructureConfig& structure,
                                 const DatasetSplits& data, const ScratchConfig& config, Rng& rng,
                                 std::ostream* progress) {
  validate_architecture(arch, structure.num_positions());
  if (data.test.empty()) throw std::invalid_argument("from-scratch training needs a test split");
  if (config.epochs > 0 && (data.train.empty() || data.val.empty())) {
    throw std::invalid_argument("from-scratch training needs train and validation splits");
  }
  ChildNetwork net = build_standalone(arch, structure, rng);
  Adam optimizer(net.parameters(), {.lr = config.lr, .weight_decay = config.weight_decay});

  ScratchResult result{net, 0.0, 0.0, 0, {}};
  Checkpoint best;
  net.save(best);
  double best_val = -1.0;

  const std::size_t batches = (data.train.size() + config.batch_size - 1) / config.batch_size;
  const auto total_steps = static_cast<std::int64_t>(config.epochs * batches);
  std::int64_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t n = 0;
    double lr = config.lr;
    for (const auto& batch : shuffled_batches(data.train.size(), config.batch_size, rng)) {
      lr = cosine_annealing_lr(step++, total_steps, config.lr, config.lr_min);
      optimizer.set_lr(lr);
      optimizer.zero_grad();
      Tape tape;
      const auto labels = labels_of(data.train, batch);
      const Tensor logits = net.forward(&tape, data.train.batch(batch), NormMode::kTrain);
      const Tensor loss = softmax_cross_entropy(&tape, logits, labels).loss;
      loss_sum += loss.item();
      ++n;
      tape.backward(loss);
      optimizer.step();
    }
    optimizer.zero_grad();
    const double val = evaluate(net, data.val, NormMode::kEval, config.eval_batch_size);
    result.curve.push_back({epoch, loss_sum / static_cast<double>(n), val, lr});
    if (val > best_val) {
      best_val = val;
      best = Checkpoint();
      net.save(best);
      result.best_epoch = epoch;
    }
    if (progress) {
      *progress << "  [" << arch.to_string() << "] epoch " << epoch << "/" << config.epochs << " loss "
                << loss_sum / static_cast<double>(n) << " val " << val << "\n";
    }
  }

  result.model = ChildNetwork::load(best);
  result.best_val_accuracy = config.epochs > 0 ? best_val : 0.0;
  result.test_accuracy = evaluate(result.model, data.test, NormMode::kEval, config.eval_batch_size);
  return result;
}

SearchOutcome run_search(const DatasetSplits& data, const SearchConfig& config, const StructureConfig& structure,
                         ControllerConfig controller_config, std::uint64_t seed, std::ostream* progress) {
  config.validate();
  structure.validate();
  if (data.train.empty()) throw std::invalid_argument("search needs a non-empty training split");
  if (data.val.empty()) throw std::invalid_argument("search needs a non-empty validation split");
  controller_config.num_positions = structure.num_positions();

  Rng bank_rng = Rng::stream(seed, "bank-init");
  Rng ctrl_init_rng = Rng::stream(seed, "controller-init");
  Rng sample_rng = Rng::stream(seed, "controller-sample");
  Rng shuffle_rng = Rng::stream(seed, "shared-shuffle");
  Rng reward_rng = Rng::stream(seed, "reward-batch");
  Rng trend_rng = Rng::stream(seed, "trend");
  Rng derive_rng = Rng::stream(seed, "derive");

  SearchOutcome out{KernelBank::init(structure, controller_config.num_choices, bank_rng),
                    Controller(controller_config, ctrl_init_rng), RewardBaseline{}, MetricsLog{}, Derivation{}, 0, 0};
  Adam optimizer(out.bank.parameters(), {.lr = config.child_lr, .weight_decay = config.child_weight_decay});

  const std::size_t chunk = config.reward_batch_size;
  const BatchRewardFn reward = [&](std::span<const Architecture> archs) {
    std::vector<std::size_t> indices;
    if (config.reward_full_validation || data.val.size() <= chunk) {
      indices.resize(data.val.size());
      std::iota(indices.begin(), indices.end(), std::size_t{0});
    } else {
      indices = shuffled_batches(data.val.size(), chunk, reward_rng).front();
    }
    std::vector<double> rewards;
    for (const Architecture& a : archs) rewards.push_back(evaluate_shared(out.bank, a, data.val, indices, chunk));
    return rewards;
  };

  const auto start = std::chrono::steady_clock::now();
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const SharedEpochStats shared =
        shared_train_epoch(out.bank, optimizer, out.controller, data.train, config.batch_size, sample_rng, shuffle_rng);
    out.shared_steps += shared.steps;

    const ControllerPhaseStats phase = controller_train_phase(out.controller, out.baseline, reward,
                                                              config.controller_steps, config.archs_per_step,
                                                              sample_rng);
    out.reward_evaluations += phase.reward_evaluations;

    MetricsRow row;
    row.epoch = epoch;
    row.min_acc = 1.0;
    for (std::size_t i = 0; i < config.trend_samples; ++i) {
      const double acc = evaluate_shared(out.bank, out.controller.sample(trend_rng).arch, data.val, chunk);
      row.mean_acc += acc;
      row.max_acc = std::max(row.max_acc, acc);
      row.min_acc = std::min(row.min_acc, acc);
    }
    row.mean_acc /= static_cast<double>(config.trend_samples);
    row.baseline = out.baseline.current();
    row.ctrl_loss = std::accumulate(phase.surrogate_losses.begin(), phase.surrogate_losses.end(), 0.0) /
                    static_cast<double>(phase.surrogate_losses.size());
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    out.metrics.rows.push_back(row);
    if (progress) {
      *progress << "epoch " << epoch << "/" << config.epochs << " shared-loss " << shared.mean_loss << " val-acc mean "
                << row.mean_acc << " max " << row.max_acc << " baseline " << row.baseline << " (" << row.seconds
                << " s)\n";
    }
  }

  const RewardFn full_val = [&](const Architecture& a) { return evaluate_shared(out.bank, a, data.val, chunk); };
  out.derivation = derive_best(out.controller, config.final_samples, full_val, derive_rng);
  if (progress) {
    *progress << "derived " << out.derivation.best.to_string() << " (val " << out.derivation.best_reward << ", "
              << out.derivation.evaluations << " distinct of " << config.final_samples << ")\n";
  }
  return out;
}

Derivation random_search_on_bank(KernelBank& bank, const DatasetSplits& data, const SearchConfig& config,
                                 std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "random-search");
  const RewardFn full_val = [&](const Architecture& a) {
    return evaluate_shared(bank, a, data.val, config.reward_batch_size);
  };
  return random_search_baseline(config.final_samples, bank.structure().num_positions(), bank.num_choices(), full_val,
                                rng);
}

}  // namespace kforge
