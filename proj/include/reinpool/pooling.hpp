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

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "reinpool/embedding_store.hpp"
#include "reinpool/error.hpp"
#include "reinpool/matrix.hpp"

namespace reinpool {

enum class PoolKind { kMean, kMax };

inline std::string_view pool_kind_name(PoolKind kind) {
  return kind == PoolKind::kMean ? "mean" : "max";
}

inline PoolKind parse_pool_kind(std::string_view name) {
  if (name == "mean" || name == "Mean") return PoolKind::kMean;
  if (name == "max" || name == "Max") return PoolKind::kMax;
  fail(ErrorCode::kConfiguration, "unknown pooling kind '" + std::string(name) + "'");
}

// Per-row keep/discard decision for one document.
class KeepMask {
 public:
  KeepMask() = default;
  explicit KeepMask(std::size_t n, bool keep = true) : bits_(n, keep ? 1 : 0) {}
  explicit KeepMask(std::vector<std::uint8_t> bits) : bits_(std::move(bits)) {
    for (auto& b : bits_) b = b ? 1 : 0;
  }

  std::size_t size() const noexcept { return bits_.size(); }
  bool operator[](std::size_t i) const { return bits_[i] != 0; }
  void set(std::size_t i, bool keep) { bits_[i] = keep ? 1 : 0; }

  std::size_t count() const {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), 1));
  }
  bool none() const { return count() == 0; }
  double kept_fraction() const {
    return bits_.empty() ? 0.0 : static_cast<double>(count()) / bits_.size();
  }
  const std::vector<std::uint8_t>& bits() const noexcept { return bits_; }

  friend bool operator==(const KeepMask&, const KeepMask&) = default;

 private:
  std::vector<std::uint8_t> bits_;
};

// Pools the rows selected by `mask`. An all-zero mask pools every row, which
// is the static baseline; the result is never empty or NaN.
template <typename T>
std::vector<double> pool(const Matrix<T>& vectors, const KeepMask& mask,
                         PoolKind kind) {
  const std::size_t n = vectors.rows();
  const std::size_t d = vectors.cols();
  if (mask.size() != n) {
    fail(ErrorCode::kShape, "mask length " + std::to_string(mask.size()) +
                                " does not match " + std::to_string(n) + " rows");
  }
  if (d == 0 || n == 0) fail(ErrorCode::kShape, "pooling an empty matrix");
  if (!vectors.all_finite()) {
    fail(ErrorCode::kDataValidation, "non-finite value in pooled rows");
  }
  const bool use_all = mask.none();

  std::vector<double> out(d, kind == PoolKind::kMean
                                 ? 0.0
                                 : -std::numeric_limits<double>::infinity());
  std::size_t kept = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (!use_all && !mask[r]) continue;
    ++kept;
    auto row = vectors.row(r);
    if (kind == PoolKind::kMean) {
      for (std::size_t c = 0; c < d; ++c) out[c] += static_cast<double>(row[c]);
    } else {
      for (std::size_t c = 0; c < d; ++c) {
        out[c] = std::max(out[c], static_cast<double>(row[c]));
      }
    }
  }
  if (kind == PoolKind::kMean) {
    for (double& x : out) x /= static_cast<double>(kept);
  }
  return out;
}

template <typename T>
std::vector<double> pool_all(const Matrix<T>& vectors, PoolKind kind) {
  return pool(vectors, KeepMask(vectors.rows(), true), kind);
}

inline std::vector<double> pool_query(const MultiVectorQuery& query,
                                      PoolKind kind) {
  return pool_all(query.vectors, kind);
}

// Pools every query into one row each, preserving order.
inline SingleVectorIndex pool_queries(const std::vector<MultiVectorQuery>& queries,
                                      PoolKind kind) {
  SingleVectorIndex index;
  if (queries.empty()) return index;
  const std::size_t d = queries.front().dim();
  std::vector<float> flat;
  flat.reserve(queries.size() * d);
  for (const auto& q : queries) {
    if (q.dim() != d) {
      fail(ErrorCode::kDimensionMismatch, "query " + q.id + " has a different dimension");
    }
    index.ids.push_back(q.id);
    for (double x : pool_query(q, kind)) flat.push_back(static_cast<float>(x));
  }
  index.vectors = Matrix<float>(queries.size(), d, std::move(flat));
  return index;
}

}  // namespace reinpool
