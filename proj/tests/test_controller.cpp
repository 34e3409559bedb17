#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "tardis/controller.hpp"
#include "tardis/gradcheck.hpp"

using namespace tardis;

namespace {

ModelConfig small_config(std::size_t k = 3) {
  ModelConfig c;
  c.input_size = 3;
  c.hidden_size = 8;
  c.output_size = 3;
  c.attention_size = 4;
  c.memory = {k, 2, 4};
  return c;
}

Tensor rand_vec(std::size_t n, Rng& rng, double lo = -1.0, double hi = 1.0,
                bool requires_grad = false) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::vector(std::move(v), requires_grad);
}

void fill(Tensor t, double value) {
  auto v = t.mutable_values();
  std::fill(v.begin(), v.end(), value);
}

struct Trace {
  std::vector<StepOutput> steps;
  Tensor loss;
};

// Runs T steps from empty memory. Reads are forced when `reads` is given.
Trace run(const Model& model, const std::vector<Tensor>& xs, const std::vector<std::size_t>& ys,
          StepOptions opt, const std::vector<std::size_t>* reads = nullptr,
          std::uint64_t episode_seed = 77) {
  const Rng episode(episode_seed);
  Trace tr;
  ControllerState s = model.initial_state();
  MemoryState m = model.fresh_memory();
  std::vector<Tensor> terms;
  for (std::size_t t = 1; t <= xs.size(); ++t) {
    if (reads) opt.forced_read = (*reads)[t - 1];
    StepOutput out = tardis_step(s, m, xs[t - 1], model, opt, episode, t);
    terms.push_back(cross_entropy_with_softmax(
        out.logits, Tensor::one_hot(model.config.output_size, ys[t - 1])));
    terms.push_back(sum(out.read.log_prob));
    s = out.state;
    m = out.memory;
    tr.steps.push_back(std::move(out));
  }
  Tensor loss = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) loss = add(loss, terms[i]);
  tr.loss = loss;
  return tr;
}

std::vector<Tensor> random_inputs(std::size_t T, std::size_t dx, Rng& rng, bool grad = false) {
  std::vector<Tensor> xs;
  for (std::size_t t = 0; t < T; ++t) xs.push_back(rand_vec(dx, rng, -1, 1, grad));
  return xs;
}

std::vector<std::size_t> random_labels(std::size_t T, std::size_t n, Rng& rng) {
  std::vector<std::size_t> ys;
  for (std::size_t t = 0; t < T; ++t) ys.push_back(rng.below(n));
  return ys;
}

}  // namespace

TEST(Gates, ZeroWeightsGiveOneHalf) {
  Rng rng(1);
  ControllerParams p = ControllerParams::init(small_config(), rng);
  for (auto& [n, t] : p.named(true)) fill(t, 0.0);
  const Gates g = gates(p, rand_vec(8, rng), rand_vec(3, rng), rand_vec(6, rng));
  for (const Tensor* t : {&g.forget, &g.input, &g.output}) {
    for (double v : t->values()) EXPECT_EQ(v, 0.5);
  }
}

TEST(Gates, LargeNegativeBiasClosesGates) {
  Rng rng(2);
  ControllerParams p = ControllerParams::init(small_config(), rng);
  for (auto& [n, t] : p.named(true)) fill(t, 0.0);
  fill(p.gate_b, -50.0);
  const Gates g = gates(p, rand_vec(8, rng), rand_vec(3, rng), rand_vec(6, rng));
  for (double v : g.input.values()) EXPECT_LT(v, 1e-21);
}

TEST(Gates, ForgetBiasStartsAtOne) {
  Rng rng(3);
  const ControllerParams p = ControllerParams::init(small_config(), rng);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(p.gate_b[i], 1.0);
  for (std::size_t i = 8; i < 24; ++i) EXPECT_EQ(p.gate_b[i], 0.0);
}

TEST(Gates, MatchRecomputation) {
  Rng rng(4);
  const ControllerParams p = ControllerParams::init(small_config(), rng);
  const Tensor h = rand_vec(8, rng), x = rand_vec(3, rng), r = rand_vec(6, rng);
  const Gates g = gates(p, h, x, r);
  for (std::size_t row = 0; row < 24; ++row) {
    double z = p.gate_b[row];
    for (std::size_t j = 0; j < 8; ++j) z += p.gate_h.at(row, j) * h[j];
    for (std::size_t j = 0; j < 3; ++j) z += p.gate_x.at(row, j) * x[j];
    for (std::size_t j = 0; j < 6; ++j) z += p.gate_r.at(row, j) * r[j];
    const double expect = 1.0 / (1.0 + std::exp(-z));
    const Tensor& block = row < 8 ? g.forget : row < 16 ? g.input : g.output;
    EXPECT_NEAR(block[row % 8], expect, 1e-15);
  }
}

TEST(ResetGates, EvaluationIsNoiselessSigmoid) {
  Rng rng(5);
  ControllerParams p = ControllerParams::init(small_config(), rng);
  for (auto& [n, t] : p.named(true)) fill(t, 0.0);
  ResetGates g = reset_gates(p, rand_vec(8, rng), rand_vec(3, rng), rand_vec(6, rng), rng, false);
  EXPECT_EQ(g.alpha[0], 0.5);
  EXPECT_EQ(g.beta[0], 0.5);
  p.reset_b.mutable_values()[0] = 3.0;
  g = reset_gates(p, rand_vec(8, rng), rand_vec(3, rng), rand_vec(6, rng), rng, false);
  EXPECT_NEAR(g.alpha[0], 1.0 / (1.0 + std::exp(-10.0)), 1e-15);
  EXPECT_NEAR(g.alpha[0], 0.9999546, 1e-7);
}

TEST(ResetGates, TrainingValuesStayInUnitInterval) {
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    Rng rng(seed);
    const ControllerParams p = ControllerParams::init(small_config(), rng);
    const ResetGates g =
        reset_gates(p, rand_vec(8, rng), rand_vec(3, rng), rand_vec(6, rng), rng, true);
    ASSERT_GE(g.alpha[0], 0.0);
    ASSERT_LE(g.alpha[0], 1.0);
    ASSERT_GE(g.beta[0], 0.0);
    ASSERT_LE(g.beta[0], 1.0);
  }
}

TEST(CellUpdate, ClosedResetGatesRemoveTheirPaths) {
  Rng rng(6);
  const ControllerParams p = ControllerParams::init(small_config(), rng);
  const ControllerState s{rand_vec(8, rng), rand_vec(8, rng)};
  const Tensor x = rand_vec(3, rng);
  const Gates g = gates(p, s.h, x, rand_vec(6, rng));
  const ResetGates closed_alpha{Tensor::vector({0.0}), Tensor::vector({0.7})};
  const auto a = cell_update(p, s, x, rand_vec(6, rng), g, closed_alpha);
  const auto b = cell_update(p, s, x, rand_vec(6, rng), g, closed_alpha);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(a.h[i], b.h[i]);

  const ResetGates closed_beta{Tensor::vector({0.7}), Tensor::vector({0.0})};
  const Tensor r = rand_vec(6, rng);
  const auto c = cell_update(p, {rand_vec(8, rng), s.cell}, x, r, g, closed_beta);
  const auto d = cell_update(p, {rand_vec(8, rng), s.cell}, x, r, g, closed_beta);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(c.h[i], d.h[i]);
}

TEST(CellUpdate, OpenForgetClosedInputCarriesCell) {
  Rng rng(7);
  const ControllerParams p = ControllerParams::init(small_config(), rng);
  const ControllerState s{rand_vec(8, rng), rand_vec(8, rng)};
  const Gates g{Tensor::vector(std::vector<double>(8, 1.0)), Tensor::zeros({8}),
                Tensor::vector(std::vector<double>(8, 1.0))};
  const auto out = cell_update(p, s, rand_vec(3, rng), rand_vec(6, rng), g, std::nullopt);
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(out.cell[i], s.cell[i]);
    EXPECT_EQ(out.h[i], std::tanh(s.cell[i]));
  }
}

TEST(CellUpdate, MatchesRecomputation) {
  Rng rng(8);
  const ControllerParams p = ControllerParams::init(small_config(), rng);
  const ControllerState s{rand_vec(8, rng), rand_vec(8, rng)};
  const Tensor x = rand_vec(3, rng), r = rand_vec(6, rng);
  const Gates g = gates(p, s.h, x, r);
  const double alpha = 0.3, beta = 0.8;
  const auto out = cell_update(p, s, x, r, g,
                               ResetGates{Tensor::vector({alpha}), Tensor::vector({beta})});
  for (std::size_t i = 0; i < 8; ++i) {
    double hz = 0.0, xz = p.cand_b[i], rz = 0.0;
    for (std::size_t j = 0; j < 8; ++j) hz += p.cand_h.at(i, j) * s.h[j];
    for (std::size_t j = 0; j < 3; ++j) xz += p.cand_x.at(i, j) * x[j];
    for (std::size_t j = 0; j < 6; ++j) rz += p.cand_r.at(i, j) * r[j];
    const double cand = std::tanh(beta * hz + xz + alpha * rz);
    const double cell = g.forget[i] * s.cell[i] + g.input[i] * cand;
    EXPECT_NEAR(out.cell[i], cell, 1e-15);
    EXPECT_NEAR(out.h[i], g.output[i] * std::tanh(cell), 1e-15);
  }
}

TEST(Output, ZeroWeightsPredictUniform) {
  Rng rng(9);
  ControllerParams p = ControllerParams::init(small_config(), rng);
  fill(p.out_w, 0.0);
  const Tensor y = predict(p, rand_vec(8, rng), rand_vec(6, rng), OutputKind::categorical);
  for (double v : y.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Output, DistributionInvariants) {
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    Rng rng(seed);
    const ControllerParams p = ControllerParams::init(small_config(), rng);
    const Tensor logits = output_logits(p, rand_vec(8, rng), rand_vec(6, rng));
    const Tensor y = output_distribution(logits, OutputKind::categorical);
    double s = 0.0;
    for (double v : y.values()) s += v;
    ASSERT_NEAR(s, 1.0, 1e-12);
    const Tensor shifted = output_distribution(add_constant(logits, 4.25), OutputKind::categorical);
    for (std::size_t i = 0; i < y.size(); ++i) ASSERT_NEAR(y[i], shifted[i], 1e-12);
    const Tensor bits = output_distribution(logits, OutputKind::bernoulli);
    for (double v : bits.values()) {
      ASSERT_GT(v, 0.0);
      ASSERT_LT(v, 1.0);
    }
  }
}

TEST(Model, HiddenMustExceedContentWidth) {
  ModelConfig c = small_config();
  c.hidden_size = 4;
  Rng rng(0);
  EXPECT_THROW((void)Model::init(c, rng), ValueError);
}

TEST(Step, SingleCellIsAlwaysReadAndOverwritten) {
  Rng rng(10);
  const Model model = Model::init(small_config(1), rng);
  const auto xs = random_inputs(6, 3, rng);
  const auto ys = random_labels(6, 3, rng);
  for (auto mode : {AddressingMode::reinforce_sample, AddressingMode::gumbel_st}) {
    StepOptions opt;
    opt.mode = mode;
    const Trace tr = run(model, xs, ys, opt);
    for (const auto& s : tr.steps) {
      EXPECT_EQ(s.read.index, 0u);
      EXPECT_EQ(s.write_slot, 0u);
    }
  }
}

TEST(Step, ScheduleAndBookkeepingInvariants) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const std::size_t k = 1 + rng.below(5);
    const Model model = Model::init(small_config(k), rng);
    const std::size_t T = 2 + rng.below(12);
    const auto xs = random_inputs(T, 3, rng);
    const auto ys = random_labels(T, 3, rng);
    StepOptions opt;
    opt.mode = static_cast<AddressingMode>(seed % 3);
    const Trace tr = run(model, xs, ys, opt, nullptr, seed);
    std::optional<std::size_t> prev;
    for (std::size_t t = 1; t <= T; ++t) {
      const StepOutput& s = tr.steps[t - 1];
      if (t <= k) {
        ASSERT_EQ(s.write_slot, t - 1);
      } else {
        ASSERT_EQ(s.write_slot, s.read.index);
      }
      if (prev && k > 1) {
        ASSERT_NE(s.read.index, *prev);
      }
      prev = s.read.index;
      std::size_t total = 0;
      for (auto c : s.memory.usage_counts) total += c;
      ASSERT_EQ(total, t);
      ASSERT_EQ(address_checksum(s.memory), address_checksum(tr.steps[0].memory));
      for (double v : s.state.h.values()) ASSERT_LE(std::abs(v), 1.0);
    }
  }
}

TEST(Step, DeterministicForFixedSeeds) {
  Rng r1(11), r2(11);
  const Model a = Model::init(small_config(4), r1);
  const Model b = Model::init(small_config(4), r2);
  Rng d(5);
  const auto xs = random_inputs(9, 3, d);
  const auto ys = random_labels(9, 3, d);
  for (auto mode : {AddressingMode::reinforce_sample, AddressingMode::gumbel_st}) {
    StepOptions opt;
    opt.mode = mode;
    const Trace ta = run(a, xs, ys, opt);
    const Trace tb = run(b, xs, ys, opt);
    EXPECT_EQ(ta.loss.item(), tb.loss.item());
    for (std::size_t t = 0; t < 9; ++t) EXPECT_EQ(ta.steps[t].read.index, tb.steps[t].read.index);
  }
}

TEST(Step, RejectsBadInput) {
  Rng rng(12);
  const Model model = Model::init(small_config(), rng);
  StepOptions opt;
  EXPECT_THROW((void)tardis_step(model.initial_state(), model.fresh_memory(), rand_vec(2, rng),
                                 model, opt, Rng(0), 1),
               ShapeError);
  EXPECT_THROW((void)tardis_step(model.initial_state(), model.fresh_memory(), rand_vec(3, rng),
                                 model, opt, Rng(0), 0),
               ValueError);
}

// With the discrete reads held fixed, the whole episode is a smooth function
// of every parameter.
TEST(Step, EpisodeGradientsMatchFiniteDifferences) {
  Rng rng(13);
  const Model model = Model::init(small_config(3), rng);
  const auto xs = random_inputs(6, 3, rng);
  const auto ys = random_labels(6, 3, rng);
  StepOptions opt;
  opt.mode = AddressingMode::reinforce_sample;
  std::vector<std::size_t> reads;
  for (const auto& s : run(model, xs, ys, opt).steps) reads.push_back(s.read.index);

  std::vector<NamedTensor> params;
  for (auto& [n, t] : model.parameters()) {
    if (n.rfind("aux.", 0) != 0) params.push_back({n, t});
  }
  const auto report = check_gradients([&] { return run(model, xs, ys, opt, &reads).loss; }, params);
  for (const auto& p : report.params) {
    EXPECT_LT(p.max_rel_error, 1e-4) << p.name << " analytic " << p.analytic << " numeric "
                                     << p.numeric;
  }
  EXPECT_TRUE(report.all_finite());
}

// The state written at t=5 and read back at t=12 links the two steps
// directly through memory, with no recurrent steps in between.
TEST(Step, WormholeCarriesGradientAcrossTime) {
  Rng rng(14);
  const Model model = Model::init(small_config(4), rng);
  const auto xs = random_inputs(12, 3, rng, true);
  const auto ys = random_labels(12, 3, rng);
  // t:      1  2  3  4  5  6  7  8  9  10 11 12
  // read:   a  b  c  d  1  0  2  0  3  0  2  1
  // slot 1 is written at t=5 and untouched until it is read at t=12.
  const std::vector<std::size_t> reads{1, 2, 3, 0, 1, 0, 2, 0, 3, 0, 2, 1};
  StepOptions opt;
  opt.mode = AddressingMode::argmax;
  opt.training = false;
  const Trace tr = run(model, xs, ys, opt, &reads);
  ASSERT_EQ(tr.steps[4].write_slot, 1u);
  ASSERT_EQ(tr.steps[11].read.index, 1u);

  Graph g;
  const Trace tg = run(model, xs, ys, opt, &reads);
  // content part of the read at t=12
  g.backward(sum(slice(tg.steps[11].read_vector, 2, 6)));
  bool nonzero = false;
  for (double v : xs[4].grad()) nonzero = nonzero || v != 0.0;
  EXPECT_TRUE(nonzero) << "no gradient from r_12 to x_5";
  for (std::size_t t : {5u, 6u, 7u, 8u, 9u, 10u}) {
    for (double v : xs[t].grad()) EXPECT_EQ(v, 0.0) << "x_" << t + 1;
  }
}

// alpha = beta = 0 with no read influence on the gates leaves an LSTM whose
// candidate sees only x.
TEST(Step, ClosedResetGatesReduceToLstm) {
  Rng rng(15);
  ModelConfig cfg = small_config(3);
  Model tardis_model = Model::init(cfg, rng);
  fill(tardis_model.controller.gate_r, 0.0);
  ModelConfig lcfg = cfg;
  lcfg.use_memory = false;
  Model lstm = tardis_model;
  lstm.config = lcfg;
  lstm.controller.cand_h = Tensor::zeros({8, 8});

  const auto xs = random_inputs(10, 3, rng);
  StepOptions opt;
  opt.forced_reset = std::make_pair(0.0, 0.0);
  const Rng episode(3);
  ControllerState a = tardis_model.initial_state(), b = lstm.initial_state();
  MemoryState m = tardis_model.fresh_memory();
  for (std::size_t t = 1; t <= 10; ++t) {
    const StepOutput sa = tardis_step(a, m, xs[t - 1], tardis_model, opt, episode, t);
    const StepOutput sb = lstm_step(b, xs[t - 1], lstm);
    for (std::size_t i = 0; i < 8; ++i) {
      ASSERT_NEAR(sa.state.h[i], sb.state.h[i], 1e-15) << "t=" << t;
      ASSERT_NEAR(sa.state.cell[i], sb.state.cell[i], 1e-15) << "t=" << t;
    }
    a = sa.state;
    b = sb.state;
    m = sa.memory;
  }
}

TEST(Step, LstmBaselineHasNoMemoryParameters) {
  ModelConfig cfg = small_config();
  cfg.use_memory = false;
  Rng rng(16);
  const Model m = Model::init(cfg, rng);
  for (auto& [n, t] : m.parameters()) {
    EXPECT_EQ(n.rfind("controller.", 0), 0u) << n;
    EXPECT_NE(n, "controller.gate_r");
  }
  const StepOutput s = lstm_step(m.initial_state(), rand_vec(3, rng), m);
  for (double v : s.state.h.values()) EXPECT_LE(std::abs(v), 1.0);
}
