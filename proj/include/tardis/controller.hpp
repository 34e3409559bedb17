#pragma once

// LSTM controller whose gates see the memory read r, with two scalar
// Gumbel-sigmoid RESET gates scaling the r and h_{t-1} paths of the cell
// candidate, plus the fused (h, r) output head. tardis_step composes one
// full timestep of the memory-augmented model.

#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tardis/addressing.hpp"
#include "tardis/errors.hpp"
#include "tardis/init.hpp"
#include "tardis/memory.hpp"
#include "tardis/rng.hpp"
#include "tardis/tensor.hpp"

namespace tardis {

enum class OutputKind { categorical, bernoulli };

inline constexpr double kResetTemperature = 0.3;

struct ModelConfig {
  std::size_t input_size = 0;
  std::size_t hidden_size = 120;
  std::size_t output_size = 0;
  std::size_t attention_size = 32;
  MemoryConfig memory{16, 4, 32};
  OutputKind output = OutputKind::categorical;
  bool use_memory = true;  // false: plain LSTM baseline
  bool reset_gates = true;
  bool mask_last_read = true;

  [[nodiscard]] std::size_t read_width() const { return use_memory ? memory.row_width() : 0; }

  void validate() const {
    if (input_size == 0 || hidden_size == 0 || output_size == 0) {
      throw ValueError("model: input, hidden and output sizes must be positive");
    }
    if (use_memory) {
      memory.validate();
      if (attention_size == 0) {
        throw ValueError("model: attention_size must be positive");
      }
      if (hidden_size <= memory.content_width) {
        throw ValueError("model: d_h (" + std::to_string(hidden_size) +
                         ") must exceed the memory content width d_m (" +
                         std::to_string(memory.content_width) + ")");
      }
    }
  }
};

struct ControllerState {
  Tensor h;
  Tensor cell;
};

struct ControllerParams {
  // f, i, o gate blocks stacked in that order
  Tensor gate_h, gate_x, gate_r, gate_b;
  // cell candidate
  Tensor cand_h, cand_x, cand_r, cand_b;
  // RESET gates: row 0 is alpha (scales the r path), row 1 is beta (h path)
  Tensor reset_h, reset_x, reset_r, reset_b;
  // deep-fusion output head
  Tensor fuse_h, fuse_r, fuse_b, out_w, out_b;
  // micro-state projection written to memory
  Tensor write_proj;

  static ControllerParams init(const ModelConfig& c, Rng& rng) {
    const std::size_t dh = c.hidden_size;
    const std::size_t dx = c.input_size;
    const std::size_t dr = c.read_width();
    ControllerParams p;
    p.gate_h = init::glorot(3 * dh, dh, rng);
    p.gate_x = init::glorot(3 * dh, dx, rng);
    p.gate_b = init::zeros(3 * dh);
    for (std::size_t i = 0; i < dh; ++i) p.gate_b.mutable_values()[i] = 1.0;  // forget bias
    p.cand_h = init::glorot(dh, dh, rng);
    p.cand_x = init::glorot(dh, dx, rng);
    p.cand_b = init::zeros(dh);
    p.fuse_h = init::glorot(dh, dh, rng);
    p.fuse_b = init::zeros(dh);
    p.out_w = init::glorot(c.output_size, dh, rng);
    p.out_b = init::zeros(c.output_size);
    if (c.use_memory) {
      p.gate_r = init::glorot(3 * dh, dr, rng);
      p.cand_r = init::glorot(dh, dr, rng);
      p.reset_h = init::glorot(2, dh, rng);
      p.reset_x = init::glorot(2, dx, rng);
      p.reset_r = init::glorot(2, dr, rng);
      p.reset_b = init::zeros(2);
      p.fuse_r = init::glorot(dh, dr, rng);
      p.write_proj = init::glorot(c.memory.content_width, dh, rng);
    }
    return p;
  }

  [[nodiscard]] std::vector<std::pair<std::string, Tensor>> named(bool use_memory) const {
    std::vector<std::pair<std::string, Tensor>> out = {
        {"controller.gate_h", gate_h}, {"controller.gate_x", gate_x},
        {"controller.gate_b", gate_b}, {"controller.cand_h", cand_h},
        {"controller.cand_x", cand_x}, {"controller.cand_b", cand_b},
        {"controller.fuse_h", fuse_h}, {"controller.fuse_b", fuse_b},
        {"controller.out_w", out_w},   {"controller.out_b", out_b}};
    if (use_memory) {
      out.insert(out.end(), {{"controller.gate_r", gate_r},
                             {"controller.cand_r", cand_r},
                             {"controller.reset_h", reset_h},
                             {"controller.reset_x", reset_x},
                             {"controller.reset_r", reset_r},
                             {"controller.reset_b", reset_b},
                             {"controller.fuse_r", fuse_r},
                             {"controller.write_proj", write_proj}});
    }
    return out;
  }
};

/// Output head that sees only the (detached) memory read and the input.
struct AuxParams {
  Tensor w_r;  // d_out x d_m (content section of the read)
  Tensor w_x;  // d_out x d_x
  Tensor b;

  static AuxParams init(const ModelConfig& c, Rng& rng) {
    AuxParams p;
    p.w_r = init::glorot(c.output_size, c.memory.content_width, rng);
    p.w_x = init::glorot(c.output_size, c.input_size, rng);
    p.b = init::zeros(c.output_size);
    return p;
  }

  [[nodiscard]] std::vector<std::pair<std::string, Tensor>> named() const {
    return {{"aux.w_r", w_r}, {"aux.w_x", w_x}, {"aux.b", b}};
  }
};

struct Gates {
  Tensor forget, input, output;
};

/// sigmoid(W_h h + W_x x + W_r r + b) for the f, i, o blocks.
inline Gates gates(const ControllerParams& p, const Tensor& h_prev, const Tensor& x,
                   const std::optional<Tensor>& r) {
  Tensor pre = add({matmul(p.gate_h, h_prev), matmul(p.gate_x, x), p.gate_b});
  if (r) {
    pre = add(pre, matmul(p.gate_r, *r));
  }
  const Tensor s = sigmoid(pre);
  const std::size_t dh = h_prev.size();
  return {slice(s, 0, dh), slice(s, dh, 2 * dh), slice(s, 2 * dh, 3 * dh)};
}

struct ResetGates {
  Tensor alpha;  // shape {1}
  Tensor beta;
};

/// Gumbel-sigmoid at temperature 0.3 during training, noiseless
/// sigmoid(s / 0.3) at evaluation.
inline ResetGates reset_gates(const ControllerParams& p, const Tensor& h_prev, const Tensor& x,
                              const Tensor& r, Rng& rng, bool training) {
  Tensor s = add({matmul(p.reset_h, h_prev), matmul(p.reset_x, x), matmul(p.reset_r, r),
                  p.reset_b});
  if (training) {
    std::vector<double> noise(2);
    for (double& n : noise) n = rng.gumbel() - rng.gumbel();
    s = add(s, Tensor::vector(std::move(noise)));
  }
  const Tensor g = sigmoid(scale(s, 1.0 / kResetTemperature));
  return {slice(g, 0, 1), slice(g, 1, 2)};
}

/// c~ = tanh(beta W_h h + W_x x + alpha W_r r + b); c' = f c + i c~; h' = o tanh(c').
/// Without a read (LSTM baseline) the candidate is tanh(W_h h + W_x x + b).
inline ControllerState cell_update(const ControllerParams& p, const ControllerState& state,
                                   const Tensor& x, const std::optional<Tensor>& r,
                                   const Gates& g, const std::optional<ResetGates>& reset) {
  Tensor hidden_path = matmul(p.cand_h, state.h);
  Tensor pre = add(matmul(p.cand_x, x), p.cand_b);
  if (r) {
    Tensor read_path = matmul(p.cand_r, *r);
    if (reset) {
      hidden_path = mul_scalar(reset->beta, hidden_path);
      read_path = mul_scalar(reset->alpha, read_path);
    }
    pre = add(pre, read_path);
  }
  const Tensor candidate = tanh(add(pre, hidden_path));
  const Tensor cell = add(mul(g.forget, state.cell), mul(g.input, candidate));
  return {mul(g.output, tanh(cell)), cell};
}

/// Pre-activation output scores W_o tanh(W_fh h + W_fr r + b) + b_o.
inline Tensor output_logits(const ControllerParams& p, const Tensor& h,
                            const std::optional<Tensor>& r) {
  Tensor fused = add(matmul(p.fuse_h, h), p.fuse_b);
  if (r) {
    fused = add(fused, matmul(p.fuse_r, *r));
  }
  return add(matmul(p.out_w, tanh(fused)), p.out_b);
}

inline Tensor output_distribution(const Tensor& logits, OutputKind kind) {
  return kind == OutputKind::categorical ? softmax(logits) : sigmoid(logits);
}

inline Tensor predict(const ControllerParams& p, const Tensor& h, const std::optional<Tensor>& r,
                      OutputKind kind) {
  return output_distribution(output_logits(p, h, r), kind);
}

struct Model {
  ModelConfig config;
  Tensor address;  // fixed sparse address section, k x a
  AddressingParams addressing;
  ControllerParams controller;
  AuxParams aux;

  static Model init(const ModelConfig& config, Rng& rng) {
    config.validate();
    Model m;
    m.config = config;
    Rng prng = rng.substream("init");
    m.controller = ControllerParams::init(config, prng);
    if (config.use_memory) {
      Rng arng = rng.substream("address");
      m.address = random_sparse_addresses(config.memory, arng);
      m.addressing = AddressingParams::init(config.hidden_size, config.input_size,
                                            config.memory.row_width(), config.memory.cells,
                                            config.attention_size, prng);
      m.aux = AuxParams::init(config, prng);
    }
    return m;
  }

  /// Every trainable tensor with a stable name (checkpoint / optimizer order).
  [[nodiscard]] std::vector<std::pair<std::string, Tensor>> parameters() const {
    auto out = controller.named(config.use_memory);
    if (config.use_memory) {
      for (auto& p : addressing.named()) out.push_back(p);
      for (auto& p : aux.named()) out.push_back(p);
    }
    return out;
  }

  [[nodiscard]] MemoryState fresh_memory() const { return tardis::fresh_memory(config.memory, address); }

  [[nodiscard]] ControllerState initial_state() const {
    return {Tensor::zeros({config.hidden_size}), Tensor::zeros({config.hidden_size})};
  }
};

struct StepOptions {
  AddressingMode mode = AddressingMode::gumbel_st;
  bool training = true;
  std::optional<std::size_t> forced_read;
  /// Overrides (alpha, beta); used by equivalence tests.
  std::optional<std::pair<double, double>> forced_reset;
  /// Read with the continuous weights instead of the one-hot (gradient checks
  /// of the relaxed path). The write slot still follows the discrete index.
  bool soft_reads = false;
};

struct StepOutput {
  ControllerState state;
  MemoryState memory;
  ReadDecision read;
  Tensor read_vector;
  Tensor logits;
  Tensor prediction;
  std::optional<ResetGates> reset;
  std::size_t write_slot = 0;
};

/// One timestep, in order: read logits from (h_{t-1}, x, M, u), last-read
/// mask, discretize, read, controller update, select write slot, write
/// W_m h_t, predict from (h_t, r_t). `t` is 1-based.
inline StepOutput tardis_step(const ControllerState& state, const MemoryState& memory,
                              const Tensor& x, const Model& model, const StepOptions& opt,
                              const Rng& episode_rng, std::size_t t) {
  if (t == 0) {
    throw ValueError("tardis_step: timestep is 1-based");
  }
  const ModelConfig& cfg = model.config;
  if (x.size() != cfg.input_size) {
    throw ShapeError("tardis_step: input shape " + shape_str(x.shape()) + " vs d_x=" +
                     std::to_string(cfg.input_size));
  }
  Rng address_rng = episode_rng.substream("address", t);
  Rng reset_rng = episode_rng.substream("reset", t);

  StepOutput out;
  const Tensor usage = Tensor::vector(normalize_usage(memory.usage_counts));
  const Tensor mem_matrix = memory.matrix();
  Tensor logits = read_logits(model.addressing, state.h, x, mem_matrix, usage);
  if (cfg.mask_last_read) {
    logits = mask_last_read(logits, memory.last_read_index);
  }
  out.read = discretize(logits, state.h, opt.mode, model.addressing, address_rng, opt.forced_read);
  out.read_vector = opt.soft_reads ? matmul(out.read.weights, mem_matrix)
                                   : read(memory, out.read.onehot);

  MemoryState next = memory;
  next.usage_counts[out.read.index] += 1;
  next.last_read_index = out.read.index;

  const Gates g = gates(model.controller, state.h, x, out.read_vector);
  if (opt.forced_reset) {
    out.reset = ResetGates{Tensor::vector({opt.forced_reset->first}),
                           Tensor::vector({opt.forced_reset->second})};
  } else if (cfg.reset_gates) {
    out.reset = reset_gates(model.controller, state.h, x, out.read_vector, reset_rng, opt.training);
  }
  out.state = cell_update(model.controller, state, x, out.read_vector, g, out.reset);

  out.write_slot = select_write_slot(next, t, out.read.index);
  out.memory = write(next, out.write_slot, out.state.h, model.controller.write_proj);

  out.logits = output_logits(model.controller, out.state.h, out.read_vector);
  out.prediction = output_distribution(out.logits, cfg.output);
  return out;
}

/// Baseline LSTM step with the same controller parameters minus memory paths.
inline StepOutput lstm_step(const ControllerState& state, const Tensor& x, const Model& model) {
  StepOutput out;
  const Gates g = gates(model.controller, state.h, x, std::nullopt);
  out.state = cell_update(model.controller, state, x, std::nullopt, g, std::nullopt);
  out.logits = output_logits(model.controller, out.state.h, std::nullopt);
  out.prediction = output_distribution(out.logits, model.config.output);
  return out;
}

}  // namespace tardis
