#pragma once

// Two cells, two steps: small enough to enumerate every read sequence.
// The objective is E[R_1 + R_2] with R_t = log p(y_t | h_t, r_t).

#include <cmath>
#include <string>
#include <vector>

#include "tardis/controller.hpp"
#include "tardis/training.hpp"

namespace toy {

using namespace tardis;

struct Problem {
  Model model;
  std::vector<Tensor> xs;
  std::vector<std::size_t> ys;
  double baseline = -1.0;  // any constant keeps the estimator unbiased
};

inline Problem make_problem(std::uint64_t seed) {
  ModelConfig c;
  c.input_size = 2;
  c.hidden_size = 4;
  c.output_size = 2;
  c.attention_size = 3;
  c.memory = {2, 2, 2};
  c.mask_last_read = false;  // otherwise the second read is forced
  Rng rng(seed);
  Problem p{Model::init(c, rng), {}, {}};
  // sharpen the addressing scores so the two cells matter
  for (auto& v : p.model.addressing.score.mutable_values()) v *= 3.0;
  for (std::size_t t = 0; t < 2; ++t) {
    p.xs.push_back(Tensor::vector({rng.uniform(-1, 1), rng.uniform(-1, 1)}));
    p.ys.push_back(rng.below(2));
  }
  return p;
}

struct Rollout {
  std::vector<Tensor> rewards;  // differentiable R_t
  std::vector<Tensor> log_probs;
};

inline Rollout rollout(const Problem& p, const Rng& episode, const std::size_t* forced) {
  StepOptions so;
  so.mode = AddressingMode::reinforce_sample;
  so.training = false;  // noiseless reset gates: the reads are the only randomness
  Rollout r;
  ControllerState s = p.model.initial_state();
  MemoryState m = p.model.fresh_memory();
  for (std::size_t t = 1; t <= 2; ++t) {
    if (forced) so.forced_read = forced[t - 1];
    StepOutput out = tardis_step(s, m, p.xs[t - 1], p.model, so, episode, t);
    r.rewards.push_back(scale(step_loss(out.logits, Tensor::one_hot(2, p.ys[t - 1]),
                                        OutputKind::categorical),
                              -1.0));
    r.log_probs.push_back(out.read.log_prob);
    s = out.state;
    m = out.memory;
  }
  return r;
}

using Grad = std::vector<std::vector<double>>;

inline Grad collect(const Problem& p) {
  Grad g;
  for (auto& [name, t] : p.model.parameters()) {
    g.emplace_back(t.size(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), g.back().begin());
    Tensor(t).clear_grad();
  }
  return g;
}

inline std::vector<std::string> names(const Problem& p) {
  std::vector<std::string> n;
  for (auto& [name, t] : p.model.parameters()) n.push_back(name);
  return n;
}

/// d/dtheta sum over read sequences of p(sequence) (R_1 + R_2).
inline Grad exact_gradient(const Problem& p) {
  for (std::size_t a = 0; a < 2; ++a) {
    for (std::size_t b = 0; b < 2; ++b) {
      const std::size_t path[2] = {a, b};
      Graph g;
      const Rollout r = rollout(p, Rng(0), path);
      const Tensor prob = exp(add(sum(r.log_probs[0]), sum(r.log_probs[1])));
      g.backward(mul(prob, add(r.rewards[0], r.rewards[1])));
    }
  }
  return collect(p);
}

/// Expected objective, values only.
inline double expected_return(const Problem& p) {
  double e = 0.0;
  for (std::size_t a = 0; a < 2; ++a) {
    for (std::size_t b = 0; b < 2; ++b) {
      const std::size_t path[2] = {a, b};
      const Rollout r = rollout(p, Rng(0), path);
      e += std::exp(r.log_probs[0][0] + r.log_probs[1][0]) * (r.rewards[0].item() + r.rewards[1].item());
    }
  }
  return e;
}

/// Average over sampled episodes of grad(R_1 + R_2) - grad(surrogate), with
/// undiscounted advantages and a constant baseline.
inline Grad monte_carlo_gradient(const Problem& p, std::size_t n, std::uint64_t seed) {
  const Rng root(seed);
  for (std::size_t i = 0; i < n; ++i) {
    Graph g;
    const Rollout r = rollout(p, root.substream("episode", i), nullptr);
    const std::vector<double> rewards{r.rewards[0].item(), r.rewards[1].item()};
    const auto adv = discounted_advantages(rewards, {p.baseline, p.baseline}, 1.0);
    const Tensor objective =
        sub(add(r.rewards[0], r.rewards[1]), reinforce_surrogate(r.log_probs, adv));
    g.backward(scale(objective, 1.0 / static_cast<double>(n)));
  }
  return collect(p);
}

inline double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline double block_error(const std::vector<double>& mc, const std::vector<double>& exact) {
  std::vector<double> d(mc.size());
  for (std::size_t i = 0; i < mc.size(); ++i) d[i] = mc[i] - exact[i];
  const double n = norm(exact);
  return n == 0.0 ? norm(d) : norm(d) / n;
}

}  // namespace toy
