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
#include <cstddef>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "reinpool/embedding_store.hpp"
#include "reinpool/error.hpp"
#include "reinpool/matrix.hpp"
#include "reinpool/random.hpp"

namespace reinpool {

template <typename A, typename B>
double similarity(std::span<const A> v_pool, std::span<const B> pooled_query) {
  if (v_pool.size() != pooled_query.size()) {
    fail(ErrorCode::kShape, "similarity between vectors of different dimension");
  }
  return dot(v_pool, pooled_query);
}

struct ScoredCandidate {
  std::string id;
  double score = 0.0;

  friend bool operator==(const ScoredCandidate&, const ScoredCandidate&) = default;
};

// Descending by score; equal scores ordered by ascending id.
struct RankedList {
  std::vector<ScoredCandidate> items;

  std::size_t size() const { return items.size(); }
  friend bool operator==(const RankedList&, const RankedList&) = default;
};

// Orders candidate positions by (score desc, tie_rank asc) and returns the
// first `top` of them (all when top >= n).
inline std::vector<std::size_t> top_order(std::span<const double> scores,
                                          std::span<const std::size_t> tie_rank,
                                          std::size_t top) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto before = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return tie_rank[a] < tie_rank[b];
  };
  top = std::min(top, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top),
                    order.end(), before);
  order.resize(top);
  return order;
}

// Rank of each id in ascending lexicographic order.
inline std::vector<std::size_t> lexicographic_ranks(const std::vector<std::string>& ids) {
  std::vector<std::size_t> by_id(ids.size());
  std::iota(by_id.begin(), by_id.end(), std::size_t{0});
  std::sort(by_id.begin(), by_id.end(),
            [&](std::size_t a, std::size_t b) { return ids[a] < ids[b]; });
  std::vector<std::size_t> rank(ids.size());
  for (std::size_t r = 0; r < by_id.size(); ++r) rank[by_id[r]] = r;
  return rank;
}

inline RankedList make_ranked_list(const std::vector<std::string>& ids,
                                   std::span<const double> scores,
                                   std::optional<std::size_t> top = std::nullopt) {
  const auto ranks = lexicographic_ranks(ids);
  RankedList list;
  for (std::size_t i : top_order(scores, ranks, top.value_or(ids.size()))) {
    list.items.push_back({ids[i], scores[i]});
  }
  return list;
}

inline double discount(std::size_t rank_zero_based) {
  return 1.0 / std::log2(static_cast<double>(rank_zero_based) + 2.0);
}

// Ideal DCG@k for the given grades (any order; zeros ignored).
inline double ideal_dcg(std::vector<int> grades, std::size_t k) {
  std::sort(grades.begin(), grades.end(), std::greater<>());
  double idcg = 0.0;
  for (std::size_t i = 0; i < std::min(k, grades.size()); ++i) {
    if (grades[i] <= 0) break;
    idcg += grades[i] * discount(i);
  }
  return idcg;
}

// Linear-gain NDCG@k: sum_i grade_i / log2(i + 1) over 1-based ranks,
// normalised by the DCG of the ideal ordering; 0 when nothing is relevant.
inline double ndcg_at_k(const RankedList& ranking,
                        const std::map<std::string, int>& relevant, std::size_t k) {
  if (k == 0) fail(ErrorCode::kConfiguration, "NDCG cutoff must be >= 1");
  std::vector<int> grades;
  for (const auto& [id, g] : relevant) {
    if (g < 0) fail(ErrorCode::kDataValidation, "negative relevance grade for " + id);
    grades.push_back(g);
  }
  const double idcg = ideal_dcg(std::move(grades), k);
  if (idcg == 0.0) return 0.0;
  double dcg = 0.0;
  for (std::size_t i = 0; i < std::min(k, ranking.size()); ++i) {
    auto it = relevant.find(ranking.items[i].id);
    if (it != relevant.end()) dcg += it->second * discount(i);
  }
  return dcg / idcg;
}

struct RewardSpec {
  std::size_t k = 3;
  // Number of sampled negatives; nullopt ranks against every candidate.
  std::optional<std::size_t> candidate_pool_size;
};

// Pooled-query candidates for inverse retrieval with precomputed tie ranks.
class CandidatePool {
 public:
  explicit CandidatePool(SingleVectorIndex index)
      : index_(std::move(index)), tie_rank_(lexicographic_ranks(index_.ids)) {
    if (index_.ids.empty()) fail(ErrorCode::kEmptyInput, "empty candidate pool");
    for (std::size_t i = 0; i < index_.ids.size(); ++i) position_.emplace(index_.ids[i], i);
  }

  const SingleVectorIndex& index() const { return index_; }
  std::size_t size() const { return index_.ids.size(); }
  std::size_t dim() const { return index_.dim(); }
  std::span<const std::size_t> tie_ranks() const { return tie_rank_; }

  std::size_t position(const std::string& id) const {
    auto it = position_.find(id);
    if (it == position_.end()) {
      fail(ErrorCode::kConfiguration, "positive query " + id + " is not in the candidate pool");
    }
    return it->second;
  }

  std::vector<std::size_t> positions(const std::set<std::string>& ids) const {
    std::vector<std::size_t> out;
    out.reserve(ids.size());
    for (const auto& id : ids) out.push_back(position(id));
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  SingleVectorIndex index_;
  std::vector<std::size_t> tie_rank_;
  std::unordered_map<std::string, std::size_t> position_;
};

// NDCG@k of the candidate ranking induced by v_pool, every positive carrying
// grade 1. `positives` are sorted positions into the pool.
inline double inverse_retrieval_reward(std::span<const double> v_pool,
                                       std::span<const std::size_t> positives,
                                       const CandidatePool& pool, const RewardSpec& spec,
                                       RandomStream* rng = nullptr) {
  if (spec.k == 0) fail(ErrorCode::kConfiguration, "reward cutoff must be >= 1");
  if (v_pool.size() != pool.dim()) {
    fail(ErrorCode::kShape, "pooled vector dimension does not match the candidate pool");
  }
  if (positives.empty()) return 0.0;

  std::vector<std::size_t> candidates;
  if (spec.candidate_pool_size && *spec.candidate_pool_size + positives.size() < pool.size()) {
    if (rng == nullptr) {
      fail(ErrorCode::kConfiguration, "negative sampling needs a random stream");
    }
    std::vector<std::size_t> negatives;
    negatives.reserve(pool.size() - positives.size());
    for (std::size_t i = 0, p = 0; i < pool.size(); ++i) {
      if (p < positives.size() && positives[p] == i) {
        ++p;
        continue;
      }
      negatives.push_back(i);
    }
    // Partial Fisher-Yates for the first m entries.
    const std::size_t m = *spec.candidate_pool_size;
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t j = i + rng->below(negatives.size() - i);
      std::swap(negatives[i], negatives[j]);
    }
    candidates.assign(positives.begin(), positives.end());
    candidates.insert(candidates.end(), negatives.begin(),
                      negatives.begin() + static_cast<std::ptrdiff_t>(m));
  } else {
    candidates.resize(pool.size());
    std::iota(candidates.begin(), candidates.end(), std::size_t{0});
  }

  std::vector<double> scores(candidates.size());
  std::vector<std::size_t> ties(candidates.size());
  const auto& vectors = pool.index().vectors;
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    scores[c] = dot(v_pool, vectors.row(candidates[c]));
    ties[c] = pool.tie_ranks()[candidates[c]];
  }
  const auto order = top_order(scores, ties, spec.k);
  double dcg = 0.0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (std::binary_search(positives.begin(), positives.end(), candidates[order[i]])) {
      dcg += discount(i);
    }
  }
  double idcg = 0.0;
  for (std::size_t i = 0; i < std::min(spec.k, positives.size()); ++i) idcg += discount(i);
  return dcg / idcg;
}

inline double inverse_retrieval_reward(std::span<const double> v_pool,
                                       const std::set<std::string>& positives,
                                       const SingleVectorIndex& pooled_queries,
                                       const RewardSpec& spec, RandomStream* rng = nullptr) {
  CandidatePool pool(pooled_queries);
  const auto pos = pool.positions(positives);
  return inverse_retrieval_reward(v_pool, pos, pool, spec, rng);
}

// Forward retrieval: each pooled query ranks every document row (ties by doc
// id); returns NDCG@k per query in query order, nullopt for unjudged queries.
inline std::vector<std::optional<double>> forward_retrieval_ndcg(
    const SingleVectorIndex& docs, const SingleVectorIndex& queries, const Qrels& qrels,
    std::size_t k) {
  if (docs.ids.empty()) fail(ErrorCode::kEmptyInput, "no documents to retrieve");
  if (docs.dim() != queries.dim() && !queries.ids.empty()) {
    fail(ErrorCode::kDimensionMismatch, "query and document dimensions differ");
  }
  const auto ties = lexicographic_ranks(docs.ids);
  std::vector<std::optional<double>> out;
  std::vector<double> scores(docs.ids.size());
  for (std::size_t qi = 0; qi < queries.ids.size(); ++qi) {
    const auto& relevant = qrels.docs_for(queries.ids[qi]);
    if (relevant.empty()) {
      out.emplace_back();
      continue;
    }
    auto q = queries.vectors.row(qi);
    for (std::size_t di = 0; di < docs.ids.size(); ++di) scores[di] = dot(q, docs.vectors.row(di));
    RankedList list;
    for (std::size_t i : top_order(scores, ties, k)) list.items.push_back({docs.ids[i], scores[i]});
    out.push_back(ndcg_at_k(list, relevant, k));
  }
  return out;
}

inline double mean_forward_ndcg(const SingleVectorIndex& docs, const SingleVectorIndex& queries,
                                const Qrels& qrels, std::size_t k) {
  double total = 0.0;
  std::size_t judged = 0;
  for (const auto& v : forward_retrieval_ndcg(docs, queries, qrels, k)) {
    if (!v) continue;
    total += *v;
    ++judged;
  }
  if (judged == 0) fail(ErrorCode::kConfiguration, "no judged queries for retrieval");
  return total / static_cast<double>(judged);
}

}  // namespace reinpool
