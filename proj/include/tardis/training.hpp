#pragma once

// Losses, the REINFORCE estimator with discounted centered returns, the
// auxiliary memory-only reward, Adam, and the batch training loop.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tardis/controller.hpp"
#include "tardis/errors.hpp"
#include "tardis/rng.hpp"
#include "tardis/tasks.hpp"
#include "tardis/tensor.hpp"

namespace tardis {

enum class TrainMode { reinforce_aux, reinforce_r, gumbel_st, lstm_baseline };

inline std::string_view to_string(TrainMode m) {
  switch (m) {
    case TrainMode::reinforce_aux: return "reinforce-aux";
    case TrainMode::reinforce_r: return "reinforce-R";
    case TrainMode::gumbel_st: return "gumbel-st";
    case TrainMode::lstm_baseline: return "lstm-baseline";
  }
  return "?";
}

inline TrainMode parse_train_mode(std::string_view s) {
  for (auto m : {TrainMode::reinforce_aux, TrainMode::reinforce_r, TrainMode::gumbel_st,
                 TrainMode::lstm_baseline}) {
    if (s == to_string(m)) return m;
  }
  throw ValueError("unknown mode '" + std::string(s) +
                   "' (expected reinforce-aux, reinforce-R, gumbel-st or lstm-baseline)");
}

inline constexpr double kLogClamp = 1e-12;

// ------------------------------------------------------------------ losses

/// Loss of one step from a predicted distribution (values only). Bernoulli
/// outputs are averaged over bits.
inline double step_nll(std::span<const double> prediction, std::span<const double> target,
                       OutputKind kind) {
  if (prediction.size() != target.size()) {
    throw ShapeError("nll: prediction width " + std::to_string(prediction.size()) +
                     " vs target width " + std::to_string(target.size()));
  }
  double loss = 0.0;
  for (std::size_t k = 0; k < target.size(); ++k) {
    const double p = prediction[k];
    if (kind == OutputKind::categorical) {
      loss -= target[k] * std::log(std::max(p, kLogClamp));
    } else {
      loss -= target[k] * std::log(std::max(p, kLogClamp)) +
              (1.0 - target[k]) * std::log(std::max(1.0 - p, kLogClamp));
    }
  }
  return kind == OutputKind::bernoulli ? loss / static_cast<double>(target.size()) : loss;
}

/// Mean over unmasked steps of the per-step loss.
inline double nll_loss(const std::vector<std::vector<double>>& predictions,
                       const std::vector<std::vector<double>>& targets,
                       const std::vector<double>& mask, OutputKind kind) {
  if (predictions.size() != targets.size() || targets.size() != mask.size()) {
    throw ShapeError("nll: predictions, targets and mask must share length");
  }
  double total = 0.0;
  double n = 0.0;
  for (std::size_t t = 0; t < mask.size(); ++t) {
    if (mask[t] == 0.0) continue;
    total += step_nll(predictions[t], targets[t], kind);
    n += 1.0;
  }
  return n > 0.0 ? total / n : 0.0;
}

/// Differentiable per-step loss from pre-activation logits.
inline Tensor step_loss(const Tensor& logits, const Tensor& target, OutputKind kind) {
  if (kind == OutputKind::categorical) {
    return cross_entropy_with_softmax(logits, target);
  }
  return scale(bce_with_logits(logits, target), 1.0 / static_cast<double>(target.size()));
}

// --------------------------------------------------------------- REINFORCE

/// A_t = (R_t - b_t) + gamma A_{t+1}.
inline std::vector<double> discounted_advantages(const std::vector<double>& rewards,
                                                 const std::vector<double>& baselines,
                                                 double gamma) {
  if (rewards.size() != baselines.size()) {
    throw ShapeError("advantages: rewards and baselines differ in length");
  }
  if (gamma < 0.0 || gamma > 1.0) {
    throw ValueError("advantages: gamma must lie in [0, 1]");
  }
  std::vector<double> a(rewards.size());
  double next = 0.0;
  for (std::size_t t = rewards.size(); t-- > 0;) {
    next = (rewards[t] - baselines[t]) + gamma * next;
    a[t] = next;
  }
  return a;
}

/// -sum_t A_t log w_t[i_t]; the advantages are plain numbers, so no gradient
/// reaches them.
inline Tensor reinforce_surrogate(const std::vector<Tensor>& log_probs,
                                  const std::vector<double>& advantages) {
  if (log_probs.size() != advantages.size()) {
    throw ShapeError("surrogate: log-prob and advantage counts differ");
  }
  if (log_probs.empty()) return Tensor::scalar(0.0);
  std::vector<Tensor> terms;
  terms.reserve(log_probs.size());
  for (std::size_t t = 0; t < log_probs.size(); ++t) {
    terms.push_back(scale(sum(log_probs[t]), -advantages[t]));
  }
  Tensor s = terms[0];
  for (std::size_t t = 1; t < terms.size(); ++t) s = add(s, terms[t]);
  return s;
}

/// Log-likelihood of y under the head that sees only the content part of
/// the (detached) read and the input. Differentiable in the aux parameters.
inline Tensor auxiliary_reward(const Tensor& read_vector, const Tensor& x, const Tensor& y,
                               const AuxParams& aux, std::size_t address_width, OutputKind kind) {
  const Tensor r = read_vector.detach();
  const Tensor content = slice(r, address_width, r.size());
  const Tensor logits = add({matmul(aux.w_r, content), matmul(aux.w_x, x), aux.b});
  return scale(step_loss(logits, y, kind), -1.0);
}

/// Running mean/variance of advantages (decay 0.99); scaling by
/// 1 / max(sd, 1).
struct VarianceNormalizer {
  double decay = 0.99;
  double mean = 0.0;
  double var = 0.0;

  [[nodiscard]] double divisor() const { return std::max(std::sqrt(var), 1.0); }

  [[nodiscard]] std::vector<double> apply(const std::vector<double>& a) const {
    std::vector<double> out(a.size());
    const double d = divisor();
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] / d;
    return out;
  }

  void update(const std::vector<double>& a) {
    for (double v : a) {
      mean = decay * mean + (1.0 - decay) * v;
      var = decay * var + (1.0 - decay) * (v - mean) * (v - mean);
    }
  }
};

/// Per-position exponential moving average of rewards (decay 0.9). A position
/// starts at the mean of its first batch; until then its baseline is 0.
struct BaselineEMA {
  double decay = 0.9;
  std::vector<double> value;
  std::vector<bool> seen;

  [[nodiscard]] std::vector<double> get(std::size_t T) const {
    std::vector<double> b(T, 0.0);
    for (std::size_t t = 0; t < T && t < value.size(); ++t) b[t] = seen[t] ? value[t] : 0.0;
    return b;
  }

  void update(const std::vector<std::vector<double>>& rewards) {
    std::size_t T = 0;
    for (const auto& r : rewards) T = std::max(T, r.size());
    if (value.size() < T) {
      value.resize(T, 0.0);
      seen.resize(T, false);
    }
    for (std::size_t t = 0; t < T; ++t) {
      double s = 0.0;
      double n = 0.0;
      for (const auto& r : rewards) {
        if (t < r.size()) {
          s += r[t];
          n += 1.0;
        }
      }
      const double m = s / n;
      value[t] = seen[t] ? decay * value[t] + (1.0 - decay) * m : m;
      seen[t] = true;
    }
  }
};

// ---------------------------------------------------------------- optimizer

struct Adam {
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip = 1.0;  // global gradient norm; <= 0 disables
  std::size_t steps = 0;
  std::vector<std::vector<double>> m, v;

  /// Clips, updates every parameter in place, and clears the gradients.
  /// Returns the pre-clip global norm.
  double step(std::vector<Tensor>& params) {
    if (m.empty()) {
      for (auto& p : params) {
        m.emplace_back(p.size(), 0.0);
        v.emplace_back(p.size(), 0.0);
      }
    }
    if (m.size() != params.size()) {
      throw ShapeError("adam: parameter list changed between steps");
    }
    double sq = 0.0;
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      for (double g : p.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) {
      throw NumericalError("adam: non-finite gradient norm");
    }
    const double scale = clip > 0.0 && norm > clip ? clip / norm : 1.0;
    ++steps;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(steps));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(steps));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = params[i];
      auto& mi = m[i];
      auto& vi = v[i];
      if (mi.size() != p.size()) {
        throw ShapeError("adam: moment shape does not match parameter " + std::to_string(i));
      }
      auto values = p.mutable_values();
      const bool has = p.has_grad();
      for (std::size_t j = 0; j < p.size(); ++j) {
        const double g = has ? p.grad()[j] * scale : 0.0;
        mi[j] = beta1 * mi[j] + (1.0 - beta1) * g;
        vi[j] = beta2 * vi[j] + (1.0 - beta2) * g * g;
        values[j] -= lr * (mi[j] / c1) / (std::sqrt(vi[j] / c2) + eps);
      }
      p.clear_grad();
    }
    return norm;
  }
};

// ----------------------------------------------------------------- episodes

struct EpisodeOptions {
  TrainMode mode = TrainMode::gumbel_st;
  bool training = true;
  bool compute_aux = false;  // also evaluate the auxiliary head
  /// Feed back the previous argmax prediction on scored steps (evaluation).
  bool free_running = false;
};

struct EpisodeResult {
  Tensor task_loss;  // sum over scored steps
  Tensor aux_loss;   // sum over scored steps of -R'
  std::vector<Tensor> log_probs;
  std::vector<double> rewards;
  std::vector<std::size_t> reads;
  std::vector<std::size_t> predicted;  // argmax per scored step (categorical)
  std::vector<std::size_t> labels;
  std::size_t scored = 0;
  std::size_t bit_errors = 0;
  std::size_t bits = 0;
};

inline AddressingMode addressing_for(TrainMode mode, bool training) {
  if (!training) return AddressingMode::argmax;
  return mode == TrainMode::gumbel_st ? AddressingMode::gumbel_st
                                      : AddressingMode::reinforce_sample;
}

inline Tensor accumulate(const std::vector<Tensor>& terms) {
  if (terms.empty()) return Tensor::scalar(0.0);
  Tensor s = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) s = add(s, terms[i]);
  return s;
}

/// Runs one example through the model from empty memory.
inline EpisodeResult run_episode(const Model& model, const Example& ex,
                                 std::optional<std::size_t> feedback_offset,
                                 const EpisodeOptions& opt, const Rng& episode_rng) {
  const ModelConfig& cfg = model.config;
  const OutputKind kind = cfg.output;
  const bool memory = cfg.use_memory && opt.mode != TrainMode::lstm_baseline;
  const bool want_aux = memory && (opt.compute_aux || (opt.training && opt.mode == TrainMode::reinforce_aux));
  StepOptions so;
  so.mode = addressing_for(opt.mode, opt.training);
  so.training = opt.training;

  EpisodeResult res;
  std::vector<Tensor> losses;
  std::vector<Tensor> aux_losses;
  ControllerState state = model.initial_state();
  MemoryState mem = memory ? model.fresh_memory() : MemoryState{};
  std::optional<std::size_t> previous_prediction;

  for (std::size_t t = 1; t <= ex.steps(); ++t) {
    std::vector<double> xin = ex.inputs[t - 1];
    const bool scored = ex.mask[t - 1] != 0.0;
    if (opt.free_running && feedback_offset && scored && t > 1 && ex.mask[t - 2] != 0.0 &&
        previous_prediction) {
      for (std::size_t j = 0; j < cfg.output_size; ++j) xin[*feedback_offset + j] = 0.0;
      xin[*feedback_offset + *previous_prediction] = 1.0;
    }
    const Tensor x = Tensor::vector(std::move(xin));
    StepOutput out = memory ? tardis_step(state, mem, x, model, so, episode_rng, t)
                            : lstm_step(state, x, model);
    double reward = 0.0;
    if (scored) {
      const Tensor y = Tensor::vector(ex.targets[t - 1]);
      const Tensor l = step_loss(out.logits, y, kind);
      losses.push_back(l);
      ++res.scored;
      if (kind == OutputKind::categorical) {
        const std::size_t p = argmax(out.logits.values());
        const std::size_t target = argmax(ex.targets[t - 1]);
        res.predicted.push_back(p);
        res.labels.push_back(target);
        previous_prediction = p;
      } else {
        for (std::size_t j = 0; j < y.size(); ++j) {
          const bool bit = out.logits[j] > 0.0;
          res.bit_errors += bit != (y[j] > 0.5) ? 1 : 0;
          ++res.bits;
        }
      }
      if (opt.mode == TrainMode::reinforce_r) {
        reward = -l.item();
      }
      if (want_aux) {
        const Tensor r_aux = auxiliary_reward(out.read_vector, x, y, model.aux,
                                              cfg.memory.address_width, kind);
        aux_losses.push_back(scale(r_aux, -1.0));
        if (opt.mode == TrainMode::reinforce_aux) reward = r_aux.item();
      }
    }
    if (memory) {
      res.log_probs.push_back(out.read.log_prob);
      res.reads.push_back(out.read.index);
      res.rewards.push_back(reward);
      mem = std::move(out.memory);
    }
    state = std::move(out.state);
  }
  res.task_loss = accumulate(losses);
  res.aux_loss = accumulate(aux_losses);
  return res;
}

// --------------------------------------------------------------- evaluation

struct EvalResult {
  double loss = 0.0;             // mean per scored step (per bit for Bernoulli)
  double aux_loss = 0.0;         // same, auxiliary head (memory models)
  double per_digit_error = 0.0;  // categorical tasks
  double bit_error = 0.0;        // Bernoulli tasks
  std::size_t scored = 0;

  /// The number early stopping and the metrics stream track.
  [[nodiscard]] double metric(OutputKind kind) const {
    return kind == OutputKind::categorical ? per_digit_error : loss;
  }
};

/// Deterministic evaluation: argmax reads, noiseless reset gates, and
/// free-running feedback where the task has it.
inline EvalResult evaluate(const Model& model, const TaskBatch& batch, TrainMode mode,
                           std::uint64_t seed = 0) {
  EpisodeOptions opt;
  opt.mode = mode;
  opt.training = false;
  opt.compute_aux = model.config.use_memory && mode != TrainMode::lstm_baseline;
  opt.free_running = batch.feedback_offset.has_value();
  EvalResult r;
  double loss = 0.0, aux = 0.0;
  std::size_t bits = 0, bit_errors = 0;
  std::vector<std::size_t> pred, lab;
  const Rng base(seed);
  for (std::size_t e = 0; e < batch.examples.size(); ++e) {
    const EpisodeResult ep = run_episode(model, batch.examples[e], batch.feedback_offset, opt,
                                         base.substream("eval", e));
    loss += ep.task_loss.item();
    aux += ep.aux_loss.item();
    r.scored += ep.scored;
    bits += ep.bits;
    bit_errors += ep.bit_errors;
    pred.insert(pred.end(), ep.predicted.begin(), ep.predicted.end());
    lab.insert(lab.end(), ep.labels.begin(), ep.labels.end());
  }
  const double n = std::max<double>(1.0, static_cast<double>(r.scored));
  r.loss = loss / n;
  r.aux_loss = aux / n;
  r.bit_error = bits ? static_cast<double>(bit_errors) / static_cast<double>(bits) : 0.0;
  r.per_digit_error = per_digit_error(pred, lab);
  return r;
}

// ----------------------------------------------------------------- training

struct TrainOptions {
  TrainMode mode = TrainMode::gumbel_st;
  std::size_t batch = 16;
  double lr = 3e-3;
  double gamma = 0.99;
  double clip = 1.0;
  std::size_t budget = 1000;        // optimizer updates
  std::size_t eval_interval = 100;  // updates between validation passes
  std::optional<double> target;     // early stop once valid metric <= target
  std::uint64_t seed = 1;
  std::string task = "copy";
  bool record_wall_time = true;
  std::string dump_path;            // where a diverging batch is written
};

struct MetricRecord {
  std::size_t step = 0;
  std::string mode;
  std::string task;
  double train_loss = 0.0;
  double valid_metric = 0.0;
  double wall_time_s = 0.0;
  std::uint64_t seed = 0;
};

/// Everything the loop mutates, so a run can be checkpointed and resumed.
struct TrainState {
  std::size_t step = 0;
  Adam adam;
  BaselineEMA baseline;
  VarianceNormalizer normalizer;
};

struct TrainResult {
  std::vector<MetricRecord> metrics;
  std::size_t steps = 0;
  bool early_stopped = false;
  double final_valid = 0.0;
};

using BatchGenerator = std::function<TaskBatch(Rng&)>;
using MetricSink = std::function<void(const MetricRecord&)>;

inline std::vector<Tensor> parameter_tensors(const Model& model) {
  std::vector<Tensor> out;
  for (auto& [name, t] : model.parameters()) out.push_back(t);
  return out;
}

namespace detail {

inline void dump_batch(const std::string& path, const TaskBatch& batch, std::size_t step,
                       std::size_t example) {
  if (path.empty()) return;
  std::ofstream out(path);
  out << "# non-finite loss at step " << step << ", example " << example << "\n";
  out << "# task " << batch.task << ", one row per timestep: inputs | targets | mask\n";
  const Example& ex = batch.examples.at(example);
  for (std::size_t t = 0; t < ex.steps(); ++t) {
    for (double v : ex.inputs[t]) out << v << ' ';
    out << "| ";
    for (double v : ex.targets[t]) out << v << ' ';
    out << "| " << ex.mask[t] << '\n';
  }
}

}  // namespace detail

/// One optimizer update on `batch`; returns the mean task loss per scored step.
inline double train_step(Model& model, const TaskBatch& batch, const TrainOptions& opt,
                         TrainState& st, const Rng& step_rng) {
  std::vector<Tensor> params = parameter_tensors(model);
  st.adam.lr = opt.lr;
  st.adam.clip = opt.clip;
  std::size_t total_scored = 0;
  for (const auto& ex : batch.examples) total_scored += ex.scored();
  const double inv_scored = 1.0 / std::max<double>(1.0, static_cast<double>(total_scored));
  const double inv_batch = 1.0 / std::max<double>(1.0, static_cast<double>(batch.examples.size()));
  const bool reinforce = opt.mode == TrainMode::reinforce_aux || opt.mode == TrainMode::reinforce_r;

  EpisodeOptions eo;
  eo.mode = opt.mode;
  eo.training = true;
  double loss_sum = 0.0;
  std::vector<std::vector<double>> all_rewards;
  std::vector<double> all_advantages;
  for (std::size_t e = 0; e < batch.examples.size(); ++e) {
    Graph g;
    EpisodeResult ep = run_episode(model, batch.examples[e], batch.feedback_offset, eo,
                                   step_rng.substream("episode", e));
    Tensor objective = scale(ep.task_loss, inv_scored);
    if (reinforce) {
      const auto adv = st.normalizer.apply(
          discounted_advantages(ep.rewards, st.baseline.get(ep.rewards.size()), opt.gamma));
      objective = add(objective, scale(reinforce_surrogate(ep.log_probs, adv), inv_batch));
      all_advantages.insert(all_advantages.end(), adv.begin(), adv.end());
      all_rewards.push_back(ep.rewards);
    }
    if (opt.mode == TrainMode::reinforce_aux) {
      objective = add(objective, scale(ep.aux_loss, inv_scored));
    }
    if (!std::isfinite(objective.item())) {
      detail::dump_batch(opt.dump_path, batch, st.step, e);
      throw NumericalError("non-finite loss at step " + std::to_string(st.step) + ", example " +
                           std::to_string(e) +
                           (opt.dump_path.empty() ? "" : " (batch written to " + opt.dump_path + ")"));
    }
    g.backward(objective);
    loss_sum += ep.task_loss.item();
  }
  if (reinforce) {
    st.baseline.update(all_rewards);
    st.normalizer.update(all_advantages);
  }
  try {
    st.adam.step(params);
  } catch (const NumericalError&) {
    detail::dump_batch(opt.dump_path, batch, st.step, 0);
    throw;
  }
  ++st.step;
  return loss_sum * inv_scored;
}

/// Runs until the update budget is spent or the validation metric reaches
/// the target. Validation happens every eval_interval updates and at the end.
inline TrainResult train_run(Model& model, const TrainOptions& opt, const BatchGenerator& make_batch,
                             const TaskBatch& valid, TrainState& st, const MetricSink& sink = {}) {
  if (opt.batch == 0 || opt.eval_interval == 0) {
    throw ValueError("train: batch and eval_interval must be positive");
  }
  if ((opt.mode == TrainMode::lstm_baseline) == model.config.use_memory) {
    throw ValueError("train: mode " + std::string(to_string(opt.mode)) +
                     (model.config.use_memory ? " needs a model without memory"
                                              : " needs a memory model"));
  }
  const auto start = std::chrono::steady_clock::now();
  const Rng root(opt.seed);
  TrainResult result;
  double window_loss = 0.0;
  std::size_t window = 0;
  while (st.step < opt.budget) {
    const Rng step_rng = root.substream("step", st.step);
    Rng data_rng = step_rng.substream("data");
    const TaskBatch batch = make_batch(data_rng);
    window_loss += train_step(model, batch, opt, st, step_rng);
    ++window;
    if (st.step % opt.eval_interval == 0 || st.step == opt.budget) {
      const EvalResult ev = evaluate(model, valid, opt.mode, opt.seed);
      MetricRecord rec;
      rec.step = st.step;
      rec.mode = std::string(to_string(opt.mode));
      rec.task = opt.task;
      rec.train_loss = window_loss / static_cast<double>(window);
      rec.valid_metric = ev.metric(model.config.output);
      rec.seed = opt.seed;
      if (opt.record_wall_time) {
        rec.wall_time_s =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      }
      window_loss = 0.0;
      window = 0;
      result.metrics.push_back(rec);
      result.final_valid = rec.valid_metric;
      if (sink) sink(rec);
      if (opt.target && rec.valid_metric <= *opt.target) {
        result.early_stopped = true;
        break;
      }
    }
  }
  result.steps = st.step;
  return result;
}

}  // namespace tardis
