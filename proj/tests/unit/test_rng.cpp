#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <numeric>
#include <set>
#include <thread>
#include <vector>

#include "pfedpf/parallel.hpp"
#include "pfedpf/rng.hpp"

using namespace pfedpf;

// Known-answer vectors of Philox4x32-10 (counter words, key words).
TEST(Philox, KnownAnswerZero) {
  const RngStream rng(0, 0);
  const std::array<std::uint32_t, 4> expected{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u};
  EXPECT_EQ(rng.block(0), expected);
}

TEST(Philox, KnownAnswerAllOnes) {
  const RngStream rng(~0ull, ~0ull);
  const std::array<std::uint32_t, 4> expected{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu};
  EXPECT_EQ(rng.block(~0ull), expected);
}

TEST(Philox, KnownAnswerPi) {
  const RngStream rng(0x299f31d0a4093822ull, 0x0370734413198a2eull);
  const std::array<std::uint32_t, 4> expected{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u};
  EXPECT_EQ(rng.block(0x85a308d3243f6a88ull), expected);
}

TEST(RngStream, SameTripleSameSequence) {
  RngStream a(7, 3, 100), b(7, 3, 100);
  for (int i = 0; i < 50; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_EQ(a.counter(), 150u);
}

TEST(RngStream, StreamsDiffer) {
  RngStream a(7, 3), b(7, 4), c(8, 3);
  EXPECT_NE(a.next_u64(), b.next_u64());
  EXPECT_NE(RngStream(7, 3).next_u64(), c.next_u64());
}

TEST(RngStream, UniformInOpenInterval) {
  RngStream rng(1, 1);
  double sum = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const double u = rng.uniform();
    ASSERT_GT(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
  }
  EXPECT_NEAR(sum / 100000.0, 0.5, 0.005);
}

TEST(RngStream, BelowIsInRangeAndCoversIt) {
  RngStream rng(2, 2);
  std::vector<int> hits(7, 0);
  for (int i = 0; i < 7000; ++i) {
    const auto v = rng.below(7);
    ASSERT_LT(v, 7u);
    ++hits[v];
  }
  for (int h : hits) EXPECT_GT(h, 800);
  EXPECT_EQ(rng.below(1), 0u);
}

TEST(RngStream, NormalMoments) {
  RngStream rng(3, 3);
  double s = 0.0, s2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    s += z;
    s2 += z * z;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.015);
}

TEST(RngStream, StreamIdsAreDistinctPerTagTuple) {
  std::set<std::uint64_t> ids;
  for (std::uint64_t purpose = 1; purpose <= 10; ++purpose)
    for (std::uint64_t client = 0; client < 20; ++client)
      for (std::uint64_t round = 0; round < 5; ++round) ids.insert(stream_id_for({purpose, client, round}));
  EXPECT_EQ(ids.size(), 1000u);
  EXPECT_NE(stream_id_for({1, 2}), stream_id_for({2, 1}));
  EXPECT_EQ(stream_id_for({4, 5}), stream_id_for({4, 5}));
}

TEST(RngStream, DeriveIsPure) {
  const RngStream parent(9, 4, 33);
  EXPECT_EQ(parent.derive({1, 2}).next_u64(), parent.derive({1, 2}).next_u64());
  EXPECT_NE(parent.derive({1, 2}).stream_id(), parent.derive({1, 3}).stream_id());
  EXPECT_EQ(parent.derive({1}).counter(), 0u);
}

TEST(RngStream, ConcurrentStreamsMatchSequential) {
  const std::size_t tasks = 16;
  auto draw = [](std::size_t i) {
    RngStream rng(42, stream_id_for({3, i}));
    double acc = 0.0;
    for (int k = 0; k < 1000; ++k) acc += rng.normal();
    return acc;
  };
  std::vector<double> seq(tasks), par(tasks);
  for (std::size_t i = 0; i < tasks; ++i) seq[i] = draw(i);
  parallel_for(tasks, 4, [&](std::size_t i) { par[i] = draw(i); });
  EXPECT_EQ(seq, par);
}

TEST(Shuffle, IsPermutationAndReproducible) {
  std::vector<int> a(100), b(100);
  std::iota(a.begin(), a.end(), 0);
  b = a;
  RngStream r1(5, 5), r2(5, 5);
  shuffle(a, r1);
  shuffle(b, r2);
  EXPECT_EQ(a, b);
  std::vector<int> sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sorted[i], i);
  std::vector<int> identity(100);
  std::iota(identity.begin(), identity.end(), 0);
  EXPECT_NE(a, identity);
}

TEST(ParallelFor, EveryIndexOnceAndFirstErrorRethrown) {
  std::vector<std::atomic<int>> seen(50);
  parallel_for(50, 3, [&](std::size_t i) { ++seen[i]; });
  for (auto& s : seen) EXPECT_EQ(s.load(), 1);
  EXPECT_THROW(parallel_for(10, 3,
                            [](std::size_t i) {
                              if (i == 4) throw std::runtime_error("four");
                            }),
               std::runtime_error);
}
