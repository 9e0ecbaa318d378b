// Copyright 2026 The ReinPool Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "reinpool/pooling.hpp"
#include "reinpool/random.hpp"
#include "test_util.hpp"

namespace reinpool {
namespace {

using testing::error_code_of;

using Rows = std::vector<std::vector<double>>;

Matrix<double> rows(const Rows& r) {
  std::vector<double> flat;
  for (const auto& row : r) flat.insert(flat.end(), row.begin(), row.end());
  return Matrix<double>(r.size(), r.front().size(), std::move(flat));
}

KeepMask mask(std::initializer_list<int> bits) {
  return KeepMask(std::vector<std::uint8_t>(bits.begin(), bits.end()));
}

Matrix<double> random_matrix(std::size_t n, std::size_t d, RandomStream& rng) {
  Matrix<double> m(n, d);
  for (double& v : m.flat()) v = rng.normal();
  return m;
}

KeepMask random_mask(std::size_t n, RandomStream& rng) {
  KeepMask m(n, false);
  for (std::size_t i = 0; i < n; ++i) m.set(i, rng.below(2) == 1);
  return m;
}

TEST(Pooling, MeanOfFullMask) {
  EXPECT_EQ(pool(rows({{1, 2}, {3, 4}}), mask({1, 1}), PoolKind::kMean),
            (std::vector<double>{2, 3}));
}

TEST(Pooling, MaxOfFullMask) {
  EXPECT_EQ(pool(rows({{1, -2}, {0, 5}}), mask({1, 1}), PoolKind::kMax),
            (std::vector<double>{1, 5}));
}

TEST(Pooling, EmptyMaskFallsBackToAllRows) {
  EXPECT_EQ(pool(rows({{1, 2}, {3, 4}}), mask({0, 0}), PoolKind::kMean),
            (std::vector<double>{2, 3}));
  EXPECT_EQ(pool(rows({{1, -2}, {0, 5}}), mask({0, 0}), PoolKind::kMax),
            (std::vector<double>{1, 5}));
}

TEST(Pooling, FilteredRowsAreExcluded) {
  EXPECT_EQ(pool(rows({{1, 2}, {3, 4}, {100, 100}}), mask({1, 1, 0}), PoolKind::kMean),
            (std::vector<double>{2, 3}));
}

TEST(Pooling, MaskLengthMismatchIsShapeError) {
  EXPECT_EQ(error_code_of([] { pool(rows({{1, 2}, {3, 4}}), mask({1}), PoolKind::kMean); }),
            ErrorCode::kShape);
}

TEST(Pooling, NonFiniteInputFailsValidation) {
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_EQ(error_code_of([&] { pool(rows({{1, inf}}), mask({1}), PoolKind::kMax); }),
            ErrorCode::kDataValidation);
}

TEST(Pooling, QueryPooling) {
  MultiVectorQuery single{"q", Matrix<float>(1, 3, {0.5f, -1.0f, 2.0f}), {}};
  for (auto kind : {PoolKind::kMean, PoolKind::kMax}) {
    EXPECT_EQ(pool_query(single, kind), (std::vector<double>{0.5, -1.0, 2.0}));
  }
  MultiVectorQuery two{"q", Matrix<float>(2, 2, {0, 1, 1, 0}), {}};
  EXPECT_EQ(pool_query(two, PoolKind::kMean), (std::vector<double>{0.5, 0.5}));
  EXPECT_EQ(pool_query(two, PoolKind::kMax), (std::vector<double>{1, 1}));
}

TEST(Pooling, KindNamesRoundTrip) {
  for (auto kind : {PoolKind::kMean, PoolKind::kMax}) {
    EXPECT_EQ(parse_pool_kind(pool_kind_name(kind)), kind);
  }
  EXPECT_EQ(error_code_of([] { parse_pool_kind("sum"); }), ErrorCode::kConfiguration);
}

TEST(PoolingProperty, InvariantUnderSimultaneousPermutation) {
  RandomStream rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(12), d = 1 + rng.below(6);
    const auto x = random_matrix(n, d, rng);
    const auto m = random_mask(n, rng);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    shuffle(perm.begin(), perm.end(), rng);
    Matrix<double> px(n, d);
    KeepMask pm(n, false);
    for (std::size_t i = 0; i < n; ++i) {
      std::copy(x.row(perm[i]).begin(), x.row(perm[i]).end(), px.row(i).begin());
      pm.set(i, m[perm[i]]);
    }
    // Max is order-free exactly; the mean may differ in the last bits.
    EXPECT_EQ(pool(px, pm, PoolKind::kMax), pool(x, m, PoolKind::kMax));
    const auto a = pool(px, pm, PoolKind::kMean), b = pool(x, m, PoolKind::kMean);
    for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(a[c], b[c], 1e-12);
  }
}

TEST(PoolingProperty, FullMaskEqualsStaticBaseline) {
  RandomStream rng(8);
  const auto x = random_matrix(9, 5, rng);
  for (auto kind : {PoolKind::kMean, PoolKind::kMax}) {
    EXPECT_EQ(pool(x, KeepMask(9, true), kind), pool_all(x, kind));
  }
}

TEST(PoolingProperty, MaxIsMonotoneInTheKeptSet) {
  RandomStream rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(10), d = 1 + rng.below(6);
    const auto x = random_matrix(n, d, rng);
    auto m = random_mask(n, rng);
    if (m.none()) m.set(0, true);
    const auto before = pool(x, m, PoolKind::kMax);
    m.set(rng.below(n), true);
    const auto after = pool(x, m, PoolKind::kMax);
    for (std::size_t c = 0; c < d; ++c) EXPECT_GE(after[c], before[c]);
  }
}

TEST(PoolingProperty, SingleKeptRowIsReturnedUnchanged) {
  RandomStream rng(10);
  const auto x = random_matrix(7, 4, rng);
  for (std::size_t r = 0; r < 7; ++r) {
    KeepMask m(7, false);
    m.set(r, true);
    const std::vector<double> expected(x.row(r).begin(), x.row(r).end());
    EXPECT_EQ(pool(x, m, PoolKind::kMean), expected);
    EXPECT_EQ(pool(x, m, PoolKind::kMax), expected);
  }
}

TEST(PoolingProperty, FloatInputAccumulatesInDouble) {
  // 2^24 + 1 is not representable in float; the double sum is exact.
  Matrix<float> x(3, 1, {16777216.0f, 1.0f, 1.0f});
  EXPECT_EQ(pool_all(x, PoolKind::kMean)[0], (16777216.0 + 2.0) / 3.0);
}

}  // namespace
}  // namespace reinpool
