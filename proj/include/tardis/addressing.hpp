#pragma once

// Read-weight generation: an MLP scores every memory row, the last-read row
// is pushed down by 100, and the scores are discretized by sampling,
// Gumbel-softmax with a learned inverse temperature, or argmax.

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tardis/errors.hpp"
#include "tardis/init.hpp"
#include "tardis/rng.hpp"
#include "tardis/tensor.hpp"

namespace tardis {

enum class AddressingMode { reinforce_sample, gumbel_st, argmax };

inline std::string_view to_string(AddressingMode m) {
  switch (m) {
    case AddressingMode::reinforce_sample: return "reinforce-sample";
    case AddressingMode::gumbel_st: return "gumbel-st";
    case AddressingMode::argmax: return "argmax";
  }
  return "?";
}

inline constexpr double kLastReadPenalty = 100.0;
inline constexpr double kUsageEpsilon = 1e-5;

struct AddressingParams {
  Tensor w_hidden;  // d_att x d_h
  Tensor w_input;   // d_att x d_x
  Tensor w_memory;  // (a + c) x d_att, applied to memory rows from the right
  Tensor w_usage;   // d_att x k
  Tensor bias;      // d_att
  Tensor score;     // d_att, the outer vector of the scoring MLP
  Tensor temp_w;    // d_h, inverse-temperature head
  Tensor temp_b;    // 1

  static AddressingParams init(std::size_t d_h, std::size_t d_x, std::size_t row_width,
                               std::size_t cells, std::size_t d_att, Rng& rng) {
    AddressingParams p;
    p.w_hidden = init::glorot(d_att, d_h, rng);
    p.w_input = init::glorot(d_att, d_x, rng);
    p.w_memory = init::glorot(row_width, d_att, rng);
    p.w_usage = init::glorot(d_att, cells, rng);
    p.bias = init::zeros(d_att);
    p.score = init::glorot_vector(d_att, rng);
    p.temp_w = init::glorot_vector(d_h, rng);
    p.temp_b = init::zeros(1);
    return p;
  }

  [[nodiscard]] std::vector<std::pair<std::string, Tensor>> named() const {
    return {{"addressing.w_hidden", w_hidden}, {"addressing.w_input", w_input},
            {"addressing.w_memory", w_memory}, {"addressing.w_usage", w_usage},
            {"addressing.bias", bias},         {"addressing.score", score},
            {"addressing.temp_w", temp_w},     {"addressing.temp_b", temp_b}};
  }
};

struct ReadDecision {
  Tensor logits;       // masked scores, k
  Tensor weights;      // continuous weights on the k-simplex
  Tensor onehot;       // forward read weights
  std::size_t index = 0;
  Tensor log_prob;     // log weights[index], shape {1}
  std::optional<Tensor> temperature;  // gumbel-st only
};

/// pi[i] = score . tanh(W_h h + W_x x + W_m M[i] + W_u u + bias)
inline Tensor read_logits(const AddressingParams& p, const Tensor& h, const Tensor& x,
                          const Tensor& memory_matrix, const Tensor& usage) {
  if (memory_matrix.rank() != 2 || usage.rank() != 1 || usage.size() != memory_matrix.dim(0)) {
    throw ShapeError("read_logits: memory " + shape_str(memory_matrix.shape()) + " vs usage " +
                     shape_str(usage.shape()));
  }
  const Tensor shared = add({matmul(p.w_hidden, h), matmul(p.w_input, x), matmul(p.w_usage, usage),
                             p.bias});
  const Tensor per_row = matmul(memory_matrix, p.w_memory);  // k x d_att
  return matmul(tanh(add_row(per_row, shared)), p.score);
}

inline Tensor mask_last_read(const Tensor& logits, std::optional<std::size_t> last_read_index) {
  if (!last_read_index) {
    return logits;
  }
  std::vector<double> offset(logits.size(), 0.0);
  offset.at(*last_read_index) = -kLastReadPenalty;
  return add(logits, Tensor::vector(std::move(offset)));
}

/// Inverse-CDF draw from a discrete distribution.
inline std::size_t sample_index(std::span<const double> probs, double u) {
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) {
      return i;
    }
  }
  // rounding left u beyond the accumulated mass: last nonzero entry
  for (std::size_t i = probs.size(); i-- > 0;) {
    if (probs[i] > 0.0) return i;
  }
  return probs.size() - 1;
}

/// Turns masked logits into a discrete read. `h` is the controller state the
/// logits were computed from (feeds the inverse-temperature head).
inline ReadDecision discretize(const Tensor& logits, const Tensor& h, AddressingMode mode,
                               const AddressingParams& p, Rng& rng,
                               std::optional<std::size_t> forced_index = std::nullopt) {
  if (!all_finite(logits.values())) {
    throw NumericalError("discretize: non-finite read logits");
  }
  const std::size_t k = logits.size();
  if (forced_index && *forced_index >= k) {
    throw ValueError("discretize: forced index " + std::to_string(*forced_index) +
                     " out of range for k=" + std::to_string(k));
  }
  ReadDecision d;
  d.logits = logits;
  switch (mode) {
    case AddressingMode::reinforce_sample: {
      const Tensor logp = log_softmax(logits);
      d.weights = exp(logp);
      const double u = rng.uniform();
      d.index = forced_index ? *forced_index : sample_index(d.weights.values(), u);
      d.log_prob = slice(logp, d.index, d.index + 1);
      d.onehot = Tensor::one_hot(k, d.index);
      break;
    }
    case AddressingMode::gumbel_st: {
      std::vector<double> noise(k);
      for (double& g : noise) g = rng.gumbel();
      const Tensor tau = add_constant(softplus(add(matmul(p.temp_w, h), sum(p.temp_b))), 1.0);
      d.temperature = tau;
      const Tensor noisy = add(logits, Tensor::vector(std::move(noise)));
      const Tensor logp = log_softmax(mul_scalar(tau, noisy));
      d.weights = exp(logp);
      d.index = forced_index ? *forced_index : argmax(d.weights.values());
      d.log_prob = slice(logp, d.index, d.index + 1);
      d.onehot = straight_through(d.weights, d.index);
      break;
    }
    case AddressingMode::argmax: {
      const Tensor logp = log_softmax(logits);
      d.weights = exp(logp);
      d.index = forced_index ? *forced_index : argmax(logits.values());
      d.log_prob = slice(logp, d.index, d.index + 1);
      d.onehot = Tensor::one_hot(k, d.index);
      break;
    }
  }
  return d;
}

/// Centering and divisive standard-deviation normalization of read counts.
inline std::vector<double> normalize_usage(std::span<const std::size_t> counts,
                                           double eps = kUsageEpsilon) {
  const double n = static_cast<double>(counts.size());
  double mean = 0.0;
  for (auto c : counts) mean += static_cast<double>(c);
  mean /= n;
  double var = 0.0;
  for (auto c : counts) var += (static_cast<double>(c) - mean) * (static_cast<double>(c) - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> u(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) {
    u[i] = (static_cast<double>(counts[i]) - mean) / (sd + eps);
  }
  return u;
}

/// counts += onehot; returns the normalized usage vector for the next step.
inline std::vector<double> update_usage(std::vector<std::size_t>& counts, std::size_t index,
                                        double eps = kUsageEpsilon) {
  counts.at(index) += 1;
  return normalize_usage(counts, eps);
}

}  // namespace tardis
