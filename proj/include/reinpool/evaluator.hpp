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
#include <filesystem>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "reinpool/compress.hpp"
#include "reinpool/embedding_store.hpp"
#include "reinpool/error.hpp"
#include "reinpool/parallel.hpp"
#include "reinpool/policy.hpp"
#include "reinpool/pooling.hpp"
#include "reinpool/ranking.hpp"

namespace reinpool {

// Late interaction with a pooled query: max_i q . v_i over document rows.
template <typename Q>
double score_full_multivector(std::span<const Q> pooled_query, const MultiVectorDoc& doc) {
  if (pooled_query.size() != doc.dim()) {
    fail(ErrorCode::kShape, "query dimension does not match document " + doc.id);
  }
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < doc.num_vectors(); ++i) {
    best = std::max(best, dot(pooled_query, doc.vectors.row(i)));
  }
  return best;
}

// Token-level MaxSim: sum over query rows of the best matching document row.
inline double score_maxsim(const MultiVectorQuery& query, const MultiVectorDoc& doc) {
  if (query.dim() != doc.dim()) {
    fail(ErrorCode::kShape, "query " + query.id + " dimension does not match document " + doc.id);
  }
  double total = 0.0;
  for (std::size_t j = 0; j < query.num_vectors(); ++j) {
    total += score_full_multivector(query.vectors.row(j), doc);
  }
  return total;
}

struct EvalMethod {
  enum class Kind { kFullMultiVector, kStaticPool, kReinPool };

  Kind kind = Kind::kStaticPool;
  PoolKind pool = PoolKind::kMean;  // query pooling; also corpus pooling when compressed
  bool token_maxsim = false;        // full multi-vector only: unpooled queries
  fs::path checkpoint;
  double threshold = 0.5;
  std::shared_ptr<const PolicyParams> policy;  // loaded lazily from checkpoint

  static EvalMethod of(Kind kind, PoolKind pool) {
    EvalMethod m;
    m.kind = kind;
    m.pool = pool;
    return m;
  }
  static EvalMethod full(PoolKind query_pool) { return of(Kind::kFullMultiVector, query_pool); }
  static EvalMethod full_maxsim() {
    auto m = of(Kind::kFullMultiVector, PoolKind::kMean);
    m.token_maxsim = true;
    return m;
  }
  static EvalMethod static_pool(PoolKind kind) { return of(Kind::kStaticPool, kind); }
  static EvalMethod reinpool(PoolKind kind, PolicyParams params, double threshold = 0.5) {
    auto m = of(Kind::kReinPool, kind);
    m.policy = std::make_shared<const PolicyParams>(std::move(params));
    m.threshold = threshold;
    return m;
  }
  static EvalMethod reinpool(PoolKind kind, fs::path checkpoint, double threshold = 0.5) {
    auto m = of(Kind::kReinPool, kind);
    m.checkpoint = std::move(checkpoint);
    m.threshold = threshold;
    return m;
  }

  bool compressed() const { return kind != Kind::kFullMultiVector; }

  std::string label() const {
    switch (kind) {
      case Kind::kFullMultiVector:
        return token_maxsim ? "full-maxsim" : fmt::format("full-{}", pool_kind_name(pool));
      case Kind::kStaticPool:
        return fmt::format("static-{}", pool_kind_name(pool));
      case Kind::kReinPool:
        return fmt::format("reinpool-{}", pool_kind_name(pool));
    }
    return "?";
  }
  std::string query_pooling() const {
    if (token_maxsim) return "-";
    return pool == PoolKind::kMean ? "Mean" : "Max";
  }
  std::string corpus_pooling() const {
    const std::string k = pool == PoolKind::kMean ? "Mean" : "Max";
    switch (kind) {
      case Kind::kFullMultiVector: return "-";
      case Kind::kStaticPool: return k;
      case Kind::kReinPool: return "ReinPool_" + k;
    }
    return "?";
  }

  const PolicyParams& resolved_policy() {
    if (!policy) {
      if (checkpoint.empty()) fail(ErrorCode::kConfiguration, "reinpool method needs a checkpoint");
      policy = std::make_shared<const PolicyParams>(load_policy(checkpoint));
    }
    return *policy;
  }
};

// Names accepted on the command line: full-mean, full-max, full-maxsim,
// static-mean, static-max, reinpool-mean, reinpool-max.
inline EvalMethod parse_eval_method(const std::string& name, const fs::path& checkpoint,
                                    double threshold) {
  if (name == "full-mean") return EvalMethod::full(PoolKind::kMean);
  if (name == "full-max") return EvalMethod::full(PoolKind::kMax);
  if (name == "full-maxsim") return EvalMethod::full_maxsim();
  if (name == "static-mean") return EvalMethod::static_pool(PoolKind::kMean);
  if (name == "static-max") return EvalMethod::static_pool(PoolKind::kMax);
  if (name == "reinpool-mean" || name == "reinpool-max") {
    if (!(threshold > 0 && threshold < 1)) fail(ErrorCode::kConfiguration, "threshold must lie in (0, 1)");
    return EvalMethod::reinpool(name == "reinpool-mean" ? PoolKind::kMean : PoolKind::kMax,
                                checkpoint, threshold);
  }
  fail(ErrorCode::kConfiguration, "unknown evaluation method '" + name + "'");
}

inline SingleVectorIndex compress_corpus(const std::vector<MultiVectorDoc>& docs,
                                         EvalMethod& method) {
  switch (method.kind) {
    case EvalMethod::Kind::kStaticPool:
      return compress_static(docs, method.pool);
    case EvalMethod::Kind::kReinPool: {
      const auto& params = method.resolved_policy();
      if (!docs.empty() && params.dim() != docs.front().dim()) {
        fail(ErrorCode::kConfiguration,
             fmt::format("checkpoint dimension {} does not match corpus dimension {}",
                         params.dim(), docs.front().dim()));
      }
      return compress_with_policy(params, docs, method.pool, method.threshold);
    }
    case EvalMethod::Kind::kFullMultiVector:
      break;
  }
  fail(ErrorCode::kConfiguration, "full multi-vector scoring does not compress the corpus");
}

inline void normalize_rows(SingleVectorIndex& index) {
  for (std::size_t r = 0; r < index.vectors.rows(); ++r) {
    auto row = index.vectors.row(r);
    const double norm = std::sqrt(dot(std::span<const float>(row), std::span<const float>(row)));
    if (norm > 0.0) {
      for (float& v : row) v = static_cast<float>(v / norm);
    }
  }
}

struct MethodResult {
  std::string label;
  std::string query_pooling;
  std::string corpus_pooling;
  double mean_vectors = 0.0;  // stored vectors per document
  std::size_t dim = 0;
  double compression_ratio = 1.0;
  std::vector<double> subset_ndcg;  // aligned with EvalReport::subsets
  double average = 0.0;
  std::vector<double> per_query;    // judged queries, corpus query order
};

struct EvalReport {
  std::size_t k = 3;
  std::vector<std::string> subsets;
  std::vector<MethodResult> methods;
  std::size_t judged_queries = 0;
  std::size_t excluded_queries = 0;  // no qrels entries
};

// Each judged query ranks every document (ties by ascending doc id); NDCG@k is
// averaged per subset (the query's tag, "all" when untagged), and the
// average is the mean of the subset scores. With normalize_pooled, compressed
// document vectors are rescaled to unit length before scoring.
inline EvalReport evaluate(std::vector<EvalMethod> methods, const std::vector<MultiVectorDoc>& corpus,
                           const std::vector<MultiVectorQuery>& queries, const Qrels& qrels,
                           std::size_t k = 3, std::size_t threads = 1,
                           bool normalize_pooled = false) {
  if (methods.empty()) fail(ErrorCode::kConfiguration, "no evaluation methods");
  if (corpus.empty()) fail(ErrorCode::kEmptyInput, "empty corpus");
  if (k == 0) fail(ErrorCode::kConfiguration, "k must be >= 1");
  const std::size_t d = corpus.front().dim();
  std::set<std::string> doc_ids;
  std::vector<std::string> ids;
  for (const auto& doc : corpus) {
    if (doc.dim() != d) fail(ErrorCode::kDimensionMismatch, "corpus mixes dimensions");
    doc_ids.insert(doc.id);
    ids.push_back(doc.id);
  }
  const auto ties = lexicographic_ranks(ids);

  EvalReport report;
  report.k = k;
  std::vector<std::size_t> judged;
  std::vector<std::size_t> subset_of;
  std::map<std::string, std::size_t> subset_index;
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    const auto& q = queries[qi];
    if (q.dim() != d) fail(ErrorCode::kDimensionMismatch, "query " + q.id + " dimension differs from corpus");
    const auto& rel = qrels.docs_for(q.id);
    if (rel.empty()) {
      ++report.excluded_queries;
      continue;
    }
    for (const auto& [doc_id, grade] : rel) {
      if (!doc_ids.count(doc_id)) {
        fail(ErrorCode::kConfiguration, "qrels reference unknown document " + doc_id);
      }
    }
    const std::string tag = q.subset.empty() ? "all" : q.subset;
    auto [it, inserted] = subset_index.emplace(tag, report.subsets.size());
    if (inserted) report.subsets.push_back(tag);
    judged.push_back(qi);
    subset_of.push_back(it->second);
  }
  report.judged_queries = judged.size();
  if (judged.empty()) fail(ErrorCode::kConfiguration, "no judged queries");

  const auto cost = embedding_cost(corpus);
  for (auto& method : methods) {
    MethodResult res;
    res.label = method.label();
    res.query_pooling = method.query_pooling();
    res.corpus_pooling = method.corpus_pooling();
    res.dim = d;
    std::optional<SingleVectorIndex> index;
    if (method.compressed()) {
      index = compress_corpus(corpus, method);
      if (normalize_pooled) normalize_rows(*index);
      res.mean_vectors = 1.0;
      res.compression_ratio = cost.compression_ratio();
    } else {
      res.mean_vectors = cost.mean_vectors;
      res.compression_ratio = 1.0;
    }

    res.per_query.assign(judged.size(), 0.0);
    parallel_for(judged.size(), threads, [&](std::size_t j) {
      const auto& q = queries[judged[j]];
      std::vector<double> scores(corpus.size());
      if (method.token_maxsim) {
        for (std::size_t di = 0; di < corpus.size(); ++di) scores[di] = score_maxsim(q, corpus[di]);
      } else {
        const auto pooled = pool_query(q, method.pool);
        if (index) {
          // Compressed indices hold float32 rows; score the query at the same
          // precision it would be stored with.
          std::vector<float> qf(pooled.begin(), pooled.end());
          for (std::size_t di = 0; di < corpus.size(); ++di) {
            scores[di] = dot(std::span<const float>(qf), std::as_const(*index).vectors.row(di));
          }
        } else {
          for (std::size_t di = 0; di < corpus.size(); ++di) {
            scores[di] = score_full_multivector(std::span<const double>(pooled), corpus[di]);
          }
        }
      }
      RankedList list;
      for (std::size_t i : top_order(scores, ties, k)) list.items.push_back({ids[i], scores[i]});
      res.per_query[j] = ndcg_at_k(list, qrels.docs_for(q.id), k);
    });

    std::vector<double> sums(report.subsets.size(), 0.0);
    std::vector<std::size_t> counts(report.subsets.size(), 0);
    for (std::size_t j = 0; j < judged.size(); ++j) {
      sums[subset_of[j]] += res.per_query[j];
      ++counts[subset_of[j]];
    }
    double total = 0.0;
    for (std::size_t s = 0; s < sums.size(); ++s) {
      res.subset_ndcg.push_back(sums[s] / static_cast<double>(counts[s]));
      total += res.subset_ndcg.back();
    }
    res.average = total / static_cast<double>(res.subset_ndcg.size());
    report.methods.push_back(std::move(res));
  }
  return report;
}

enum class ReportFormat { kText, kCsv, kJson };

inline ReportFormat parse_report_format(const std::string& name) {
  if (name == "text" || name == "txt") return ReportFormat::kText;
  if (name == "csv") return ReportFormat::kCsv;
  if (name == "json") return ReportFormat::kJson;
  fail(ErrorCode::kConfiguration, "unknown report format '" + name + "'");
}

inline std::string format_cost(double mean_vectors, std::size_t dim) {
  return fmt::format("{:.6g} × {}", mean_vectors, dim);
}

inline std::string format_ratio(double ratio) { return fmt::format("{:.6g}×", ratio); }

// Text table columns: Method | Query Pooling | Corpus Pooling | Cost |
// subsets... | AVG | Ratio, NDCG in percent.
inline std::string render_report(const EvalReport& report, ReportFormat format) {
  if (report.methods.empty()) fail(ErrorCode::kConfiguration, "empty report");
  std::string out;
  switch (format) {
    case ReportFormat::kText: {
      std::vector<std::vector<std::string>> rows;
      std::vector<std::string> header = {"Method", "Query Pooling", "Corpus Pooling", "Cost"};
      for (const auto& s : report.subsets) header.push_back(s);
      header.push_back("AVG");
      header.push_back("Ratio");
      rows.push_back(header);
      for (const auto& m : report.methods) {
        std::vector<std::string> row = {m.label, m.query_pooling, m.corpus_pooling,
                                        format_cost(m.mean_vectors, m.dim)};
        for (double v : m.subset_ndcg) row.push_back(fmt::format("{:.2f}", 100.0 * v));
        row.push_back(fmt::format("{:.2f}", 100.0 * m.average));
        row.push_back(format_ratio(m.compression_ratio));
        rows.push_back(std::move(row));
      }
      // Display width; "×" is two bytes but one column.
      auto width = [](const std::string& s) {
        std::size_t w = 0;
        for (unsigned char c : s) w += (c & 0xC0) != 0x80;
        return w;
      };
      std::vector<std::size_t> widths(header.size(), 0);
      for (const auto& r : rows) {
        for (std::size_t c = 0; c < r.size(); ++c) widths[c] = std::max(widths[c], width(r[c]));
      }
      out += fmt::format("NDCG@{} ({} judged queries, {} excluded)\n", report.k,
                         report.judged_queries, report.excluded_queries);
      for (std::size_t r = 0; r < rows.size(); ++r) {
        std::string line;
        for (std::size_t c = 0; c < rows[r].size(); ++c) {
          if (c > 0) line += " | ";
          const auto pad = std::string(widths[c] - width(rows[r][c]), ' ');
          line += c < 4 ? rows[r][c] + pad : pad + rows[r][c];
        }
        while (!line.empty() && line.back() == ' ') line.pop_back();
        out += line + "\n";
        if (r == 0) {
          std::string rule;
          for (std::size_t c = 0; c < widths.size(); ++c) {
            if (c > 0) rule += "-+-";
            rule += std::string(widths[c], '-');
          }
          out += rule + "\n";
        }
      }
      break;
    }
    case ReportFormat::kCsv: {
      out += "method,query_pooling,corpus_pooling,mean_vectors,dim,compression_ratio";
      for (const auto& s : report.subsets) out += ",ndcg_" + s;
      out += ",avg\n";
      for (const auto& m : report.methods) {
        out += fmt::format("{},{},{},{},{},{}", m.label, m.query_pooling, m.corpus_pooling,
                           m.mean_vectors, m.dim, m.compression_ratio);
        for (double v : m.subset_ndcg) out += fmt::format(",{}", v);
        out += fmt::format(",{}\n", m.average);
      }
      break;
    }
    case ReportFormat::kJson: {
      nlohmann::ordered_json j;
      j["k"] = report.k;
      j["subsets"] = report.subsets;
      j["judged_queries"] = report.judged_queries;
      j["excluded_queries"] = report.excluded_queries;
      j["methods"] = nlohmann::ordered_json::array();
      for (const auto& m : report.methods) {
        nlohmann::ordered_json row;
        row["method"] = m.label;
        row["query_pooling"] = m.query_pooling;
        row["corpus_pooling"] = m.corpus_pooling;
        row["mean_vectors"] = m.mean_vectors;
        row["dim"] = m.dim;
        row["compression_ratio"] = m.compression_ratio;
        row["subset_ndcg"] = m.subset_ndcg;
        row["average"] = m.average;
        j["methods"].push_back(std::move(row));
      }
      out = j.dump(2) + "\n";
      break;
    }
  }
  return out;
}

inline void emit_report(const EvalReport& report, ReportFormat format, const fs::path& path) {
  const auto text = render_report(report, format);
  if (!path.parent_path().empty()) detail::ensure_directory(path.parent_path());
  detail::write_text(path, text);
}

}  // namespace reinpool
