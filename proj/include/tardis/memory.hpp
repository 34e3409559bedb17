#pragma once

// External memory M = [A; C]: a fixed random sparse address section A
// (k x a) and a differentiable content section C (k x c) that holds
// projections of past controller states.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tardis/errors.hpp"
#include "tardis/rng.hpp"
#include "tardis/tensor.hpp"

namespace tardis {

struct MemoryConfig {
  std::size_t cells = 16;          // k
  std::size_t address_width = 4;   // a
  std::size_t content_width = 32;  // c (= d_m)

  [[nodiscard]] std::size_t row_width() const { return address_width + content_width; }

  void validate() const {
    if (cells == 0 || address_width == 0 || content_width == 0) {
      throw ValueError("memory: cells, address_width and content_width must be positive (got k=" +
                       std::to_string(cells) + ", a=" + std::to_string(address_width) +
                       ", c=" + std::to_string(content_width) + ")");
    }
  }
};

struct MemoryState {
  MemoryConfig config;
  Tensor address;  // k x a, constant
  Tensor content;  // k x c
  std::vector<std::size_t> usage_counts;
  std::size_t write_cursor = 0;
  std::optional<std::size_t> last_read_index;

  /// [A | C] as one k x (a+c) tensor; differentiable through C.
  [[nodiscard]] Tensor matrix() const { return concat({address, content}, 1); }
};

/// Random sparse addresses: ceil(a/4) nonzeros per row, each +1 or -1, at
/// uniformly chosen distinct positions.
inline Tensor random_sparse_addresses(const MemoryConfig& config, Rng& rng) {
  config.validate();
  const std::size_t a = config.address_width;
  const std::size_t nnz = (a + 3) / 4;
  std::vector<double> values(config.cells * a, 0.0);
  std::vector<std::size_t> pos(a);
  for (std::size_t row = 0; row < config.cells; ++row) {
    for (std::size_t j = 0; j < a; ++j) pos[j] = j;
    // partial Fisher-Yates
    for (std::size_t j = 0; j < nnz; ++j) {
      const std::size_t pick = j + rng.below(a - j);
      std::swap(pos[j], pos[pick]);
      values[row * a + pos[j]] = rng.bernoulli(0.5) ? 1.0 : -1.0;
    }
  }
  return Tensor::matrix(config.cells, a, std::move(values));
}

/// Empty memory (zero content, no reads) over an existing address section.
inline MemoryState fresh_memory(const MemoryConfig& config, const Tensor& address) {
  config.validate();
  if (address.shape() != Shape{config.cells, config.address_width}) {
    throw ShapeError("fresh_memory: address shape " + shape_str(address.shape()) +
                     " does not match k x a = " +
                     shape_str({config.cells, config.address_width}));
  }
  MemoryState m;
  m.config = config;
  m.address = address;
  m.content = Tensor::zeros({config.cells, config.content_width});
  m.usage_counts.assign(config.cells, 0);
  return m;
}

inline MemoryState init_memory(const MemoryConfig& config, Rng& rng) {
  return fresh_memory(config, random_sparse_addresses(config, rng));
}

/// Index of the hot entry; throws unless `w` is exactly one-hot.
inline std::size_t onehot_index(const Tensor& w) {
  std::optional<std::size_t> hot;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i] == 1.0 && !hot) {
      hot = i;
    } else if (w[i] != 0.0) {
      hot.reset();
      break;
    }
  }
  if (!hot || w.rank() != 1) {
    throw ValueError("read: weights are not a one-hot vector");
  }
  return *hot;
}

/// r = M^T w = [A[i]; C[i]] for the hot index i. When `w` carries a gradient
/// (straight-through reads) the full linear map is recorded so the adjoint
/// reaches w; otherwise only row i is touched.
inline Tensor read(const MemoryState& memory, const Tensor& w_onehot) {
  if (w_onehot.rank() != 1 || w_onehot.size() != memory.config.cells) {
    throw ShapeError("read: weights shape " + shape_str(w_onehot.shape()) + " vs memory " +
                     shape_str({memory.config.cells, memory.config.row_width()}));
  }
  const std::size_t i = onehot_index(w_onehot);
  if (w_onehot.requires_grad()) {
    return matmul(w_onehot, memory.matrix());
  }
  return concat({gather_row(memory.address, i), gather_row(memory.content, i)});
}

/// C[index] = W_m h; returns the new state, `memory` is left as it was.
inline MemoryState write(const MemoryState& memory, std::size_t index, const Tensor& h,
                         const Tensor& write_proj) {
  if (index >= memory.config.cells) {
    throw ValueError("write: index " + std::to_string(index) + " out of range for k=" +
                     std::to_string(memory.config.cells));
  }
  if (write_proj.rank() != 2 || write_proj.dim(0) != memory.config.content_width) {
    throw ShapeError("write: projection shape " + shape_str(write_proj.shape()) +
                     " does not produce content width " +
                     std::to_string(memory.config.content_width));
  }
  MemoryState next = memory;
  next.content = scatter_row(memory.content, index, matmul(write_proj, h));
  return next;
}

/// Sequential fill for t <= k (t is 1-based), then the slot just read.
inline std::size_t select_write_slot(MemoryState& memory, std::size_t t, std::size_t read_index) {
  if (t <= memory.config.cells) {
    memory.write_cursor = t;
    return t - 1;
  }
  return read_index;
}

inline std::uint64_t address_checksum(const MemoryState& memory) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (double v : memory.address.values()) {
    h ^= static_cast<std::uint64_t>(std::llround(v * 1024.0));
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace tardis
