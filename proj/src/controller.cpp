#include "kforge/controller.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace kforge {
namespace {

Tensor uniform_param(Shape shape, double range, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (double& v : t.data()) v = rng.uniform(-range, range);
  return t;
}

}  // namespace

void RewardBaseline::update(std::span<const double> rewards) {
  if (rewards.empty()) throw std::invalid_argument("baseline update needs at least one reward");
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / static_cast<double>(rewards.size());
  if (!initialized) {
    value = mean;
    initialized = true;
  } else {
    value = decay * value + (1.0 - decay) * mean;
  }
}

double SampleRecord::total_log_prob() const { return std::accumulate(log_probs.begin(), log_probs.end(), 0.0); }

Controller::Controller(ControllerConfig config, Rng& init_rng)
    : config_(config), optimizer_({}, config.lr) {
  if (config_.num_choices < 1 || config_.num_positions < 1 || config_.input_size < 1 || config_.hidden_size < 1) {
    throw std::invalid_argument("controller dimensions must be positive");
  }
  const std::size_t n = config_.num_choices, in = config_.input_size, h = config_.hidden_size;
  const double r = config_.init_range;
  embedding_ = uniform_param({n + 1, in}, r, init_rng);
  lstm_.w_ih = uniform_param({4 * h, in}, r, init_rng);
  lstm_.w_hh = uniform_param({4 * h, h}, r, init_rng);
  lstm_.bias = uniform_param({4 * h}, r, init_rng);
  head_weight_ = uniform_param({n, h}, r, init_rng);
  head_bias_ = uniform_param({n}, r, init_rng);
  optimizer_ = Sgd(parameters(), config_.lr);
}

std::vector<Tensor> Controller::parameters() const {
  return {embedding_, lstm_.w_ih, lstm_.w_hh, lstm_.bias, head_weight_, head_bias_};
}

void Controller::zero_grad() { optimizer_.zero_grad(); }

LstmState Controller::initial_state(std::size_t batch) const {
  return {Tensor::zeros({batch, config_.hidden_size}), Tensor::zeros({batch, config_.hidden_size})};
}

SampleRecord Controller::sample(Rng& rng) const {
  SampleRecord rec;
  LstmState state = initial_state(1);
  std::size_t input_token = config_.num_choices;  // start symbol
  for (std::size_t l = 0; l < config_.num_positions; ++l) {
    const Tensor x = embedding_lookup(nullptr, embedding_, std::span(&input_token, 1));
    state = lstm_cell(nullptr, x, state, lstm_);
    const Tensor logits = linear(nullptr, state.h, head_weight_, head_bias_);
    const std::vector<double> probs = softmax(logits.data());
    const std::size_t token = categorical_sample(probs, rng);
    // log-softmax computed directly for accuracy at small probabilities.
    const auto lg = logits.data();
    double mx = lg[0];
    for (double v : lg) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : lg) z += std::exp(v - mx);
    rec.log_probs.push_back(lg[token] - mx - std::log(z));
    rec.arch.tokens.push_back(token);
    input_token = token;
  }
  return rec;
}

std::vector<Tensor> Controller::teacher_forced_logits(Tape* tape, std::span<const Architecture> batch) const {
  for (const Architecture& a : batch) validate_architecture(a, config_.num_positions, config_.num_choices);
  const std::size_t m = batch.size();
  LstmState state = initial_state(m);
  std::vector<std::size_t> inputs(m, config_.num_choices);
  std::vector<Tensor> out;
  out.reserve(config_.num_positions);
  for (std::size_t l = 0; l < config_.num_positions; ++l) {
    const Tensor x = embedding_lookup(tape, embedding_, inputs);
    state = lstm_cell(tape, x, state, lstm_);
    out.push_back(linear(tape, state.h, head_weight_, head_bias_));
    for (std::size_t k = 0; k < m; ++k) inputs[k] = batch[k].tokens[l];
  }
  return out;
}

std::vector<std::vector<double>> Controller::step_distributions(const Architecture& arch) const {
  const auto logits = teacher_forced_logits(nullptr, std::span(&arch, 1));
  std::vector<std::vector<double>> out;
  for (const Tensor& t : logits) out.push_back(softmax(t.data()));
  return out;
}

double Controller::log_prob_of(const Architecture& arch) const {
  const auto logits = teacher_forced_logits(nullptr, std::span(&arch, 1));
  double total = 0.0;
  for (std::size_t l = 0; l < logits.size(); ++l) {
    const std::size_t label = arch.tokens[l];
    total -= softmax_cross_entropy(nullptr, logits[l], std::span(&label, 1)).loss.item();
  }
  return total;
}

double Controller::reinforce_gradient(std::span<const SampleRecord> records, double baseline) {
  if (records.empty()) throw std::invalid_argument("reinforce update needs at least one record");
  std::vector<Architecture> archs;
  std::vector<double> advantages;
  for (const SampleRecord& r : records) {
    if (!r.reward) throw std::invalid_argument("reinforce update: record '" + r.arch.to_string() + "' has no reward");
    archs.push_back(r.arch);
    advantages.push_back(*r.reward - baseline);
  }

  Tape tape;
  const auto logits = teacher_forced_logits(&tape, archs);
  Tensor loss;
  std::vector<std::size_t> labels(archs.size());
  for (std::size_t l = 0; l < logits.size(); ++l) {
    for (std::size_t k = 0; k < archs.size(); ++k) labels[k] = archs[k].tokens[l];
    // Weighted mean over the batch of −log P(a_l)·(R_k − b).
    Tensor step = softmax_cross_entropy(&tape, logits[l], labels, advantages).loss;
    loss = loss.defined() ? add(&tape, loss, step) : step;
  }
  const double value = loss.item();
  tape.backward(loss);
  return value;
}

double Controller::reinforce_update(std::span<const SampleRecord> records, const RewardBaseline& baseline) {
  optimizer_.zero_grad();
  const double value = reinforce_gradient(records, baseline.current());
  auto params = parameters();
  clip_grad_norm(params, config_.grad_clip);
  optimizer_.step();
  optimizer_.zero_grad();
  return value;
}

void Controller::save(Checkpoint& ckpt, const RewardBaseline& baseline) const {
  ckpt.put("ctrl/embed", embedding_);
  ckpt.put("ctrl/lstm/w_ih", lstm_.w_ih);
  ckpt.put("ctrl/lstm/w_hh", lstm_.w_hh);
  ckpt.put("ctrl/lstm/bias", lstm_.bias);
  ckpt.put("ctrl/head/w", head_weight_);
  ckpt.put("ctrl/head/b", head_bias_);
  ckpt.put_scalar("ctrl/baseline", baseline.value);
  ckpt.put_scalar("ctrl/baseline_initialized", baseline.initialized ? 1.0 : 0.0);
  ckpt.put_scalar("ctrl/baseline_decay", baseline.decay);
}

void Controller::load(const Checkpoint& ckpt, RewardBaseline& baseline) {
  ckpt.copy_into("ctrl/embed", embedding_);
  ckpt.copy_into("ctrl/lstm/w_ih", lstm_.w_ih);
  ckpt.copy_into("ctrl/lstm/w_hh", lstm_.w_hh);
  ckpt.copy_into("ctrl/lstm/bias", lstm_.bias);
  ckpt.copy_into("ctrl/head/w", head_weight_);
  ckpt.copy_into("ctrl/head/b", head_bias_);
  baseline.value = ckpt.get_scalar("ctrl/baseline");
  baseline.initialized = ckpt.contains("ctrl/baseline_initialized") && ckpt.get_scalar("ctrl/baseline_initialized") != 0.0;
  if (ckpt.contains("ctrl/baseline_decay")) baseline.decay = ckpt.get_scalar("ctrl/baseline_decay");
}

}  // namespace kforge
