#pragma once

// Named finite-difference suites used by `tardis gradcheck` and the
// acceptance run. Each returns one entry per checked parameter block.

#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "tardis/controller.hpp"
#include "tardis/gradcheck.hpp"
#include "tardis/training.hpp"

namespace tardis {

struct SuiteResult {
  std::string block;  // "<case>/<parameter>"
  double max_rel_error = 0.0;
  bool finite = true;
};

inline constexpr std::string_view kGradcheckScopes[] = {"ops", "controller", "full-step", "gumbel-st"};

namespace detail {

inline Tensor random_param(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), true);
}

inline void append(std::vector<SuiteResult>& out, const std::string& prefix,
                   const GradCheckReport& rep) {
  for (const auto& p : rep.params) out.push_back({prefix + "/" + p.name, p.max_rel_error, p.finite});
}

inline std::vector<NamedTensor> trainable(const Model& m) {
  std::vector<NamedTensor> out;
  for (auto& [n, t] : m.parameters()) {
    if (n.rfind("aux.", 0) != 0) out.push_back({n, t});
  }
  return out;
}

struct SmallEpisode {
  Model model;
  std::vector<Tensor> xs;
  std::vector<std::size_t> ys;
};

inline SmallEpisode small_episode(std::uint64_t seed, std::size_t T) {
  ModelConfig c;
  c.input_size = 3;
  c.hidden_size = 8;
  c.output_size = 3;
  c.attention_size = 4;
  c.memory = {3, 2, 4};
  c.output = OutputKind::categorical;
  Rng rng(seed);
  SmallEpisode e{Model::init(c, rng), {}, {}};
  for (std::size_t t = 0; t < T; ++t) {
    e.xs.push_back(Tensor::vector({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)}));
    e.ys.push_back(rng.below(3));
  }
  return e;
}

// Loss over T steps; the first call records the sampled reads, later calls
// replay them.
inline Tensor replay(const SmallEpisode& e, StepOptions so, std::vector<std::size_t>& reads,
                     bool record, bool with_log_probs, std::uint64_t noise_seed) {
  ControllerState s = e.model.initial_state();
  MemoryState mem = e.model.fresh_memory();
  std::vector<Tensor> terms;
  const Rng episode(noise_seed);
  for (std::size_t t = 1; t <= e.xs.size(); ++t) {
    if (!record) so.forced_read = reads[t - 1];
    StepOutput out = tardis_step(s, mem, e.xs[t - 1], e.model, so, episode, t);
    if (record) reads.push_back(out.read.index);
    terms.push_back(step_loss(out.logits, Tensor::one_hot(3, e.ys[t - 1]), OutputKind::categorical));
    if (with_log_probs) terms.push_back(sum(out.read.log_prob));
    s = out.state;
    mem = out.memory;
  }
  return accumulate(terms);
}

}  // namespace detail

/// Every differentiable op against central differences on random inputs.
inline std::vector<SuiteResult> gradcheck_ops(std::uint64_t seed, const GradCheckOptions& gopt = {}) {
  using In = const std::vector<Tensor>&;
  struct Case {
    const char* name;
    std::vector<Shape> shapes;
    std::function<Tensor(In)> f;
  };
  const std::vector<Case> cases = {
      {"matmul_mm", {{3, 4}, {4, 2}}, [](In p) { return matmul(p[0], p[1]); }},
      {"matmul_mv", {{3, 4}, {4}}, [](In p) { return matmul(p[0], p[1]); }},
      {"matmul_vm", {{4}, {4, 3}}, [](In p) { return matmul(p[0], p[1]); }},
      {"add", {{5}, {5}}, [](In p) { return add(p[0], p[1]); }},
      {"sub", {{5}, {5}}, [](In p) { return sub(p[0], p[1]); }},
      {"mul", {{2, 3}, {2, 3}}, [](In p) { return mul(p[0], p[1]); }},
      {"mul_scalar", {{1}, {4}}, [](In p) { return mul_scalar(p[0], p[1]); }},
      {"add_row", {{3, 4}, {4}}, [](In p) { return add_row(p[0], p[1]); }},
      {"tanh", {{6}}, [](In p) { return tanh(p[0]); }},
      {"sigmoid", {{6}}, [](In p) { return sigmoid(p[0]); }},
      {"softplus", {{6}}, [](In p) { return softplus(p[0]); }},
      {"softmax", {{2, 5}}, [](In p) { return softmax(p[0]); }},
      {"log_softmax", {{5}}, [](In p) { return log_softmax(p[0]); }},
      {"log", {{6}}, [](In p) { return log(add(mul(p[0], p[0]), Tensor::from({6}, std::vector<double>(6, 0.5)))); }},
      {"exp", {{6}}, [](In p) { return exp(p[0]); }},
      {"concat", {{3}, {2}}, [](In p) { return concat({p[0], p[1]}); }},
      {"concat_cols", {{3, 2}, {3, 3}}, [](In p) { return concat({p[0], p[1]}, 1); }},
      {"slice", {{7}}, [](In p) { return slice(p[0], 2, 5); }},
      {"gather_row", {{4, 3}}, [](In p) { return gather_row(p[0], 2); }},
      {"scatter_row", {{4, 3}, {3}}, [](In p) { return scatter_row(p[0], 1, p[1]); }},
      {"sum", {{2, 3}}, [](In p) { return sum(p[0]); }},
      {"mean", {{2, 3}}, [](In p) { return mean(p[0]); }},
      {"cross_entropy_with_softmax", {{5}},
       [](In p) { return cross_entropy_with_softmax(p[0], Tensor::vector({0.1, 0.2, 0.3, 0.4, 0.0})); }},
      {"bce_with_logits", {{5}}, [](In p) { return bce_with_logits(p[0], Tensor::vector({0, 1, 1, 0, 1})); }},
  };
  std::vector<SuiteResult> out;
  const Rng root(seed);
  bool fault = gopt.inject_fault;
  for (const auto& c : cases) {
    Rng rng = root.substream(c.name);
    std::vector<Tensor> inputs;
    std::vector<NamedTensor> named;
    for (std::size_t i = 0; i < c.shapes.size(); ++i) {
      inputs.push_back(detail::random_param(c.shapes[i], rng));
      named.push_back({"in" + std::to_string(i), inputs.back()});
    }
    const Tensor probe = c.f(inputs);
    std::vector<double> w(probe.size());
    for (double& x : w) x = rng.uniform(-1, 1);
    const Tensor weights = Tensor::from(probe.shape(), w);
    GradCheckOptions o = gopt;
    o.inject_fault = fault;
    fault = false;
    detail::append(out, c.name, check_gradients([&] { return sum(mul(c.f(inputs), weights)); }, named, o));
  }
  return out;
}

/// One TARDIS step from a half-filled memory, read index fixed.
inline std::vector<SuiteResult> gradcheck_controller(std::uint64_t seed, const GradCheckOptions& gopt = {}) {
  const detail::SmallEpisode e = detail::small_episode(seed, 3);
  StepOptions so;
  so.mode = AddressingMode::reinforce_sample;
  so.training = true;
  // two warm-up steps outside any graph put constant content in memory
  ControllerState s = e.model.initial_state();
  MemoryState mem = e.model.fresh_memory();
  for (std::size_t t = 1; t <= 2; ++t) {
    StepOutput out = tardis_step(s, mem, e.xs[t - 1], e.model, so, Rng(seed), t);
    s = out.state;
    mem = out.memory;
  }
  const ControllerState s0 = s;
  const MemoryState m0 = mem;
  const std::size_t read = tardis_step(s0, m0, e.xs[2], e.model, so, Rng(seed), 3).read.index;
  so.forced_read = read;
  auto loss = [&] {
    StepOutput out = tardis_step(s0, m0, e.xs[2], e.model, so, Rng(seed), 3);
    return add(step_loss(out.logits, Tensor::one_hot(3, e.ys[2]), OutputKind::categorical),
               sum(out.read.log_prob));
  };
  std::vector<SuiteResult> out;
  detail::append(out, "step", check_gradients(loss, detail::trainable(e.model), gopt));
  return out;
}

/// T=6 episodes with reads frozen to a first sampled rollout, 10 seeds.
inline std::vector<SuiteResult> gradcheck_full_step(std::uint64_t seed, const GradCheckOptions& gopt = {},
                                                    std::size_t n_seeds = 10) {
  std::vector<SuiteResult> out;
  for (std::size_t i = 0; i < n_seeds; ++i) {
    const detail::SmallEpisode e = detail::small_episode(seed + i, 6);
    StepOptions so;
    so.mode = AddressingMode::reinforce_sample;
    so.training = true;
    std::vector<std::size_t> reads;
    (void)detail::replay(e, so, reads, true, true, seed + 1000 + i);
    GradCheckOptions o = gopt;
    o.inject_fault = gopt.inject_fault && i == 0;
    detail::append(out, "seed" + std::to_string(seed + i),
                   check_gradients([&] { return detail::replay(e, so, reads, false, true, seed + 1000 + i); },
                                   detail::trainable(e.model), o));
  }
  return out;
}

/// Relaxed Gumbel episode: noise and argmax frozen, soft reads differentiated.
inline std::vector<SuiteResult> gradcheck_gumbel_st(std::uint64_t seed, const GradCheckOptions& gopt = {}) {
  const detail::SmallEpisode e = detail::small_episode(seed, 6);
  StepOptions so;
  so.mode = AddressingMode::gumbel_st;
  so.training = true;
  so.soft_reads = true;
  std::vector<std::size_t> reads;
  (void)detail::replay(e, so, reads, true, false, seed + 1);
  std::vector<SuiteResult> out;
  detail::append(out, "episode",
                 check_gradients([&] { return detail::replay(e, so, reads, false, false, seed + 1); },
                                 detail::trainable(e.model), gopt));
  return out;
}

inline std::vector<SuiteResult> run_gradcheck(std::string_view scope, std::uint64_t seed,
                                              const GradCheckOptions& gopt = {}) {
  if (scope == "ops") return gradcheck_ops(seed, gopt);
  if (scope == "controller") return gradcheck_controller(seed, gopt);
  if (scope == "full-step") return gradcheck_full_step(seed, gopt);
  if (scope == "gumbel-st") return gradcheck_gumbel_st(seed, gopt);
  throw ValueError("unknown gradcheck scope '" + std::string(scope) +
                   "' (expected ops, controller, full-step or gumbel-st)");
}

}  // namespace tardis
