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

#include <cstddef>
#include <string>
#include <vector>

#include "reinpool/embedding_store.hpp"
#include "reinpool/error.hpp"
#include "reinpool/matrix.hpp"
#include "reinpool/pooling.hpp"
#include "reinpool/policy.hpp"

namespace reinpool {

struct CompressedDoc {
  std::vector<double> vector;
  KeepMask mask;
};

// Greedy policy mask followed by pooling; the inference-time path.
inline CompressedDoc compress_document(const PolicyParams& params,
                                       const MultiVectorDoc& doc, PoolKind kind,
                                       double threshold = 0.5) {
  if (params.dim() != doc.dim()) {
    fail(ErrorCode::kConfiguration,
         "policy dimension " + std::to_string(params.dim()) + " does not match document " +
             doc.id + " dimension " + std::to_string(doc.dim()));
  }
  const auto out = forward(params, doc.vectors);
  KeepMask mask = greedy_mask(out, threshold);
  auto v = pool(doc.vectors, mask, kind);
  return {std::move(v), std::move(mask)};
}

// Stacks pooled rows into an index, narrowing to float32 storage.
inline SingleVectorIndex make_index(const std::vector<std::string>& ids,
                                    const std::vector<std::vector<double>>& rows) {
  SingleVectorIndex index;
  index.ids = ids;
  if (rows.empty()) return index;
  const std::size_t d = rows.front().size();
  std::vector<float> flat;
  flat.reserve(rows.size() * d);
  for (const auto& r : rows) {
    for (double x : r) flat.push_back(static_cast<float>(x));
  }
  index.vectors = Matrix<float>(rows.size(), d, std::move(flat));
  return index;
}

inline SingleVectorIndex compress_static(const std::vector<MultiVectorDoc>& docs,
                                         PoolKind kind) {
  std::vector<std::string> ids;
  std::vector<std::vector<double>> rows;
  for (const auto& doc : docs) {
    ids.push_back(doc.id);
    rows.push_back(pool_all(doc.vectors, kind));
  }
  return make_index(ids, rows);
}

inline SingleVectorIndex compress_with_policy(const PolicyParams& params,
                                              const std::vector<MultiVectorDoc>& docs,
                                              PoolKind kind, double threshold = 0.5,
                                              double* kept_fraction = nullptr) {
  std::vector<std::string> ids;
  std::vector<std::vector<double>> rows;
  double kept = 0.0;
  for (const auto& doc : docs) {
    auto c = compress_document(params, doc, kind, threshold);
    kept += c.mask.kept_fraction();
    ids.push_back(doc.id);
    rows.push_back(std::move(c.vector));
  }
  if (kept_fraction != nullptr) {
    *kept_fraction = docs.empty() ? 0.0 : kept / static_cast<double>(docs.size());
  }
  return make_index(ids, rows);
}

// Compresses with an explicit per-document mask (oracle evaluation).
inline SingleVectorIndex compress_with_masks(const std::vector<MultiVectorDoc>& docs,
                                             const std::vector<KeepMask>& masks,
                                             PoolKind kind) {
  if (masks.size() != docs.size()) {
    fail(ErrorCode::kShape, "one mask per document is required");
  }
  std::vector<std::string> ids;
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    ids.push_back(docs[i].id);
    rows.push_back(pool(docs[i].vectors, masks[i], kind));
  }
  return make_index(ids, rows);
}

}  // namespace reinpool
