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

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "reinpool/error.hpp"
#include "reinpool/matrix.hpp"

namespace reinpool {

namespace fs = std::filesystem;

// One document (or query) as an N x d block of 32-bit embedding rows.
struct MultiVectorRecord {
  std::string id;
  Matrix<float> vectors;
  std::string subset;  // optional evaluation tag; empty means untagged

  std::size_t num_vectors() const { return vectors.rows(); }
  std::size_t dim() const { return vectors.cols(); }

  friend bool operator==(const MultiVectorRecord&,
                         const MultiVectorRecord&) = default;
};

using MultiVectorDoc = MultiVectorRecord;
using MultiVectorQuery = MultiVectorRecord;

// Compressed corpus: one row per document, in corpus order.
struct SingleVectorIndex {
  std::vector<std::string> ids;
  Matrix<float> vectors;

  std::size_t dim() const { return vectors.cols(); }

  friend bool operator==(const SingleVectorIndex&,
                         const SingleVectorIndex&) = default;
};

struct QrelEntry {
  std::string query_id;
  std::string doc_id;
  int grade = 0;
};

class Qrels {
 public:
  void add(const std::string& query_id, const std::string& doc_id, int grade) {
    if (grade < 0) {
      fail(ErrorCode::kDataValidation,
           "negative grade for (" + query_id + ", " + doc_id + ")");
    }
    auto& docs = by_query_[query_id];
    if (!docs.emplace(doc_id, grade).second) {
      fail(ErrorCode::kDuplicateEntry,
           "duplicate qrels entry (" + query_id + ", " + doc_id + ")");
    }
    by_doc_[doc_id].emplace(query_id, grade);
    entries_.push_back({query_id, doc_id, grade});
  }

  const std::vector<QrelEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  // doc id -> grade for one query (empty map if unjudged).
  const std::map<std::string, int>& docs_for(const std::string& query_id) const {
    auto it = by_query_.find(query_id);
    return it == by_query_.end() ? empty_ : it->second;
  }
  // query id -> grade for one document.
  const std::map<std::string, int>& queries_for(const std::string& doc_id) const {
    auto it = by_doc_.find(doc_id);
    return it == by_doc_.end() ? empty_ : it->second;
  }

 private:
  std::vector<QrelEntry> entries_;
  std::map<std::string, std::map<std::string, int>> by_query_;
  std::map<std::string, std::map<std::string, int>> by_doc_;
  inline static const std::map<std::string, int> empty_{};
};

struct EmbeddingCost {
  double mean_vectors = 0.0;
  std::size_t dim = 0;

  // Storage of the full multi-vector form relative to one pooled vector.
  double compression_ratio() const { return mean_vectors; }
};

namespace detail {

inline std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) |
        (v >> 24);
  }
  return v;
}

inline void write_f32_le(std::ostream& out, std::span<const float> values) {
  std::vector<char> buf(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::uint32_t bits =
        to_little_endian(std::bit_cast<std::uint32_t>(values[i]));
    std::memcpy(buf.data() + 4 * i, &bits, 4);
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline std::vector<float> decode_f32_le(const std::vector<char>& bytes) {
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, bytes.data() + 4 * i, 4);
    out[i] = std::bit_cast<float>(to_little_endian(bits));
  }
  return out;
}

inline std::vector<char> read_all_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kStorage, "cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
  if (in.bad()) fail(ErrorCode::kStorage, "read failed: " + path.string());
  return bytes;
}

inline std::string read_text(const fs::path& path) {
  auto bytes = read_all_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::kStorage, "cannot write " + path.string());
  out << text;
  if (!out) fail(ErrorCode::kStorage, "write failed: " + path.string());
}

inline void ensure_directory(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorCode::kStorage, "cannot create " + dir.string());
}

inline nlohmann::json parse_json_file(const fs::path& path, ErrorCode on_error) {
  try {
    return nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    fail(on_error, path.string() + ": " + e.what());
  }
}

}  // namespace detail

inline void save_collection(const std::vector<MultiVectorRecord>& docs,
                            const fs::path& dir) {
  std::size_t dim = docs.empty() ? 0 : docs.front().dim();
  for (const auto& doc : docs) {
    if (doc.dim() != dim) {
      fail(ErrorCode::kDimensionMismatch,
           "document " + doc.id + " has d=" + std::to_string(doc.dim()) +
               ", collection has d=" + std::to_string(dim));
    }
  }
  detail::ensure_directory(dir);

  nlohmann::json manifest;
  manifest["dim"] = dim;
  manifest["docs"] = nlohmann::json::array();
  std::size_t offset = 0;
  std::ofstream bin(dir / "vectors.bin", std::ios::binary | std::ios::trunc);
  if (!bin) fail(ErrorCode::kStorage, "cannot write " + (dir / "vectors.bin").string());
  for (const auto& doc : docs) {
    nlohmann::json entry = {{"id", doc.id},
                            {"num_vectors", doc.num_vectors()},
                            {"offset_floats", offset}};
    if (!doc.subset.empty()) entry["subset"] = doc.subset;
    manifest["docs"].push_back(std::move(entry));
    detail::write_f32_le(bin, doc.vectors.flat());
    offset += doc.vectors.size();
  }
  bin.close();
  if (!bin) fail(ErrorCode::kStorage, "write failed: " + (dir / "vectors.bin").string());
  detail::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline std::vector<MultiVectorRecord> load_collection(const fs::path& dir) {
  const auto manifest =
      detail::parse_json_file(dir / "manifest.json", ErrorCode::kCorruptStore);
  std::size_t dim = 0;
  std::vector<std::tuple<std::string, std::size_t, std::size_t, std::string>> layout;
  try {
    dim = manifest.at("dim").get<std::size_t>();
    for (const auto& entry : manifest.at("docs")) {
      layout.emplace_back(entry.at("id").get<std::string>(),
                          entry.at("num_vectors").get<std::size_t>(),
                          entry.at("offset_floats").get<std::size_t>(),
                          entry.value("subset", std::string{}));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kCorruptStore, "malformed manifest: " + std::string(e.what()));
  }
  if (dim == 0) fail(ErrorCode::kCorruptStore, "manifest dim must be >= 1");

  const auto bytes = detail::read_all_bytes(dir / "vectors.bin");
  std::size_t expected_floats = 0;
  for (const auto& [id, n, offset, subset] : layout) {
    if (n == 0) fail(ErrorCode::kCorruptStore, "document " + id + " has no vectors");
    if (offset != expected_floats) {
      fail(ErrorCode::kCorruptStore, "non-cumulative offset for " + id);
    }
    expected_floats += n * dim;
  }
  if (bytes.size() != expected_floats * 4) {
    fail(ErrorCode::kCorruptStore,
         "vectors.bin holds " + std::to_string(bytes.size()) + " bytes, manifest expects " +
             std::to_string(expected_floats * 4));
  }
  const auto floats = detail::decode_f32_le(bytes);

  std::vector<MultiVectorRecord> docs;
  docs.reserve(layout.size());
  std::set<std::string> seen;
  for (const auto& [id, n, offset, subset] : layout) {
    if (!seen.insert(id).second) {
      fail(ErrorCode::kCorruptStore, "duplicate id " + id + " in manifest");
    }
    std::vector<float> rows(floats.begin() + static_cast<std::ptrdiff_t>(offset),
                            floats.begin() + static_cast<std::ptrdiff_t>(offset + n * dim));
    Matrix<float> m(n, dim, std::move(rows));
    if (!m.all_finite()) {
      fail(ErrorCode::kDataValidation, "non-finite value in " + id);
    }
    docs.push_back({id, std::move(m), subset});
  }
  return docs;
}

inline void save_index(const SingleVectorIndex& index, const fs::path& dir) {
  std::vector<MultiVectorRecord> rows;
  rows.reserve(index.ids.size());
  for (std::size_t i = 0; i < index.ids.size(); ++i) {
    auto r = index.vectors.row(i);
    rows.push_back({index.ids[i], Matrix<float>(1, r.size(), {r.begin(), r.end()}), {}});
  }
  save_collection(rows, dir);
}

inline SingleVectorIndex load_index(const fs::path& dir) {
  auto docs = load_collection(dir);
  SingleVectorIndex index;
  if (docs.empty()) return index;
  std::vector<float> flat;
  for (auto& d : docs) {
    if (d.num_vectors() != 1) {
      fail(ErrorCode::kCorruptStore, "index entry " + d.id + " is not a single vector");
    }
    index.ids.push_back(d.id);
    flat.insert(flat.end(), d.vectors.flat().begin(), d.vectors.flat().end());
  }
  index.vectors = Matrix<float>(docs.size(), docs.front().dim(), std::move(flat));
  return index;
}

// Tab-separated query_id, doc_id, grade. Blank lines are ignored.
inline Qrels parse_qrels(std::istream& in) {
  Qrels qrels;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
      const auto tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    const auto where = "qrels line " + std::to_string(line_no);
    if (fields.size() != 3 || fields[0].empty() || fields[1].empty()) {
      fail(ErrorCode::kParse, where + ": expected query_id<TAB>doc_id<TAB>grade");
    }
    int grade = 0;
    const auto& g = fields[2];
    auto [ptr, ec] = std::from_chars(g.data(), g.data() + g.size(), grade);
    if (ec != std::errc() || ptr != g.data() + g.size()) {
      fail(ErrorCode::kParse, where + ": grade '" + g + "' is not an integer");
    }
    if (grade < 0) {
      fail(ErrorCode::kDataValidation, where + ": negative grade " + g);
    }
    try {
      qrels.add(fields[0], fields[1], grade);
    } catch (const Error& e) {
      fail(e.code(), where + ": " + e.what());
    }
  }
  return qrels;
}

inline Qrels load_qrels(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kStorage, "cannot open qrels " + path.string());
  return parse_qrels(in);
}

inline void save_qrels(const Qrels& qrels, const fs::path& path) {
  std::ostringstream out;
  for (const auto& e : qrels.entries()) {
    out << e.query_id << '\t' << e.doc_id << '\t' << e.grade << '\n';
  }
  detail::write_text(path, out.str());
}

inline EmbeddingCost embedding_cost(const std::vector<MultiVectorRecord>& docs) {
  if (docs.empty()) fail(ErrorCode::kEmptyInput, "embedding cost of an empty collection");
  double total = 0.0;
  for (const auto& d : docs) total += static_cast<double>(d.num_vectors());
  return {total / static_cast<double>(docs.size()), docs.front().dim()};
}

}  // namespace reinpool
