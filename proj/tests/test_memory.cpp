#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "tardis/init.hpp"
#include "tardis/memory.hpp"

using namespace tardis;

TEST(Memory, AddressRowsHaveQuarterDensity) {
  Rng rng(1);
  for (std::size_t a : {1u, 4u, 5u, 9u, 16u}) {
    const MemoryState m = init_memory({6, a, 3}, rng);
    const std::size_t expected = (a + 3) / 4;
    for (std::size_t row = 0; row < 6; ++row) {
      std::size_t nnz = 0;
      for (std::size_t j = 0; j < a; ++j) {
        const double v = m.address.at(row, j);
        if (v != 0.0) {
          ++nnz;
          EXPECT_TRUE(v == 1.0 || v == -1.0);
        }
      }
      EXPECT_EQ(nnz, expected) << "a=" << a;
    }
  }
}

TEST(Memory, FreshStateIsEmpty) {
  Rng rng(2);
  const MemoryState m = init_memory({4, 4, 3}, rng);
  EXPECT_EQ(m.write_cursor, 0u);
  EXPECT_FALSE(m.last_read_index.has_value());
  for (auto c : m.usage_counts) EXPECT_EQ(c, 0u);
  for (std::size_t i = 0; i < 4; ++i) {
    const Tensor r = read(m, Tensor::one_hot(4, i));
    ASSERT_EQ(r.size(), 7u);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(r[j], m.address.at(i, j));
    for (std::size_t j = 4; j < 7; ++j) EXPECT_EQ(r[j], 0.0);
  }
}

TEST(Memory, SameSeedSameAddresses) {
  Rng a(42), b(42), c(43);
  const auto ma = init_memory({8, 6, 2}, a);
  const auto mb = init_memory({8, 6, 2}, b);
  const auto mc = init_memory({8, 6, 2}, c);
  EXPECT_EQ(address_checksum(ma), address_checksum(mb));
  EXPECT_NE(address_checksum(ma), address_checksum(mc));
}

TEST(Memory, NonPositiveDimensionsRejected) {
  Rng rng(0);
  EXPECT_THROW((void)init_memory({0, 4, 4}, rng), ValueError);
  EXPECT_THROW((void)init_memory({4, 0, 4}, rng), ValueError);
  EXPECT_THROW((void)init_memory({4, 4, 0}, rng), ValueError);
}

TEST(Memory, WriteThenReadReturnsProjection) {
  Rng rng(5);
  const std::size_t dh = 8, dm = 4;
  MemoryState m = init_memory({5, 4, dm}, rng);
  const Tensor wm = init::glorot(dm, dh, rng);
  const Tensor h = init::glorot_vector(dh, rng);
  m = write(m, 2, h, wm);
  const Tensor r = read(m, Tensor::one_hot(5, 2));
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(r[j], m.address.at(2, j));
  // independent matrix-vector product
  for (std::size_t i = 0; i < dm; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < dh; ++j) acc += wm.at(i, j) * h[j];
    EXPECT_NEAR(r[4 + i], acc, 1e-14);
  }
}

TEST(Memory, IdentityProjectionWritesLeadingCoordinates) {
  Rng rng(6);
  const std::size_t dh = 6, dm = 3;
  MemoryState m = init_memory({3, 2, dm}, rng);
  std::vector<double> w(dm * dh, 0.0);
  for (std::size_t i = 0; i < dm; ++i) w[i * dh + i] = 1.0;
  const Tensor wm = Tensor::matrix(dm, dh, w);
  const Tensor h = Tensor::vector({1, 2, 3, 4, 5, 6});
  m = write(m, 1, h, wm);
  for (std::size_t i = 0; i < dm; ++i) EXPECT_EQ(m.content.at(1, i), static_cast<double>(i + 1));
}

TEST(Memory, SecondWriteWins) {
  Rng rng(7);
  MemoryState m = init_memory({3, 2, 2}, rng);
  const Tensor wm = Tensor::matrix(2, 3, {1, 0, 0, 0, 1, 0});
  const MemoryState m1 = write(m, 0, Tensor::vector({1, 1, 1}), wm);
  const MemoryState m2 = write(m1, 0, Tensor::vector({5, 6, 7}), wm);
  EXPECT_EQ(m2.content.at(0, 0), 5.0);
  EXPECT_EQ(m2.content.at(0, 1), 6.0);
  // functional writes: the earlier version still holds its value
  EXPECT_EQ(m1.content.at(0, 0), 1.0);
  EXPECT_EQ(m.content.at(0, 0), 0.0);
}

TEST(Memory, WriteOutOfRangeRejected) {
  Rng rng(8);
  MemoryState m = init_memory({3, 2, 2}, rng);
  const Tensor wm = Tensor::matrix(2, 3, {1, 0, 0, 0, 1, 0});
  EXPECT_THROW((void)write(m, 3, Tensor::vector({1, 1, 1}), wm), ValueError);
}

TEST(Memory, ReadRejectsNonOneHot) {
  Rng rng(9);
  MemoryState m = init_memory({3, 2, 2}, rng);
  EXPECT_THROW((void)read(m, Tensor::vector({0.5, 0.5, 0.0})), ValueError);
  EXPECT_THROW((void)read(m, Tensor::vector({1, 1, 0})), ValueError);
  EXPECT_THROW((void)read(m, Tensor::vector({0, 0, 0})), ValueError);
  EXPECT_THROW((void)read(m, Tensor::vector({0, 1})), ShapeError);
}

TEST(Memory, ReadGradientHitsOnlyTheReadRow) {
  Rng rng(10);
  MemoryState m = init_memory({4, 2, 3}, rng);
  m.content = Tensor::from({4, 3}, std::vector<double>(12, 0.5), true);
  Graph g;
  g.backward(sum(read(m, Tensor::one_hot(4, 1))));
  for (std::size_t row = 0; row < 4; ++row) {
    for (std::size_t c = 0; c < 3; ++c) {
      EXPECT_EQ(m.content.grad()[row * 3 + c], row == 1 ? 1.0 : 0.0);
    }
  }
}

TEST(Memory, WriteGradientReachesProjectionAndState) {
  Rng rng(11);
  MemoryState m = init_memory({3, 2, 2}, rng);
  Tensor wm = init::glorot(2, 4, rng);
  Tensor h = init::glorot_vector(4, rng);
  Graph g;
  const MemoryState m2 = write(m, 1, h, wm);
  g.backward(sum(m2.content));
  ASSERT_TRUE(wm.has_grad());
  ASSERT_TRUE(h.has_grad());
  // d/dh sum(W h) = column sums of W
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_NEAR(h.grad()[j], wm.at(0, j) + wm.at(1, j), 1e-15);
  }
}

TEST(Memory, WriteSlotSelection) {
  Rng rng(12);
  MemoryState m = init_memory({5, 2, 2}, rng);
  EXPECT_EQ(select_write_slot(m, 3, 0), 2u);
  EXPECT_EQ(m.write_cursor, 3u);
  EXPECT_EQ(select_write_slot(m, 5, 0), 4u);
  EXPECT_EQ(m.write_cursor, 5u);
  EXPECT_EQ(select_write_slot(m, 9, 1), 1u);
  EXPECT_EQ(m.write_cursor, 5u);
}
