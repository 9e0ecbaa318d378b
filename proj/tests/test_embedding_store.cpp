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

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "reinpool/embedding_store.hpp"
#include "reinpool/random.hpp"
#include "test_util.hpp"

namespace reinpool {
namespace {

using testing::error_code_of;
using testing::ScratchDir;

MultiVectorDoc make_doc(std::string id, std::size_t n, std::size_t d, RandomStream& rng) {
  std::vector<float> flat(n * d);
  for (float& v : flat) v = static_cast<float>(rng.normal() * 10.0);
  return {std::move(id), Matrix<float>(n, d, std::move(flat)), {}};
}

TEST(EmbeddingStore, SixteenByteLittleEndianLayout) {
  ScratchDir dir("store");
  save_collection({{"d0", Matrix<float>(2, 2, {1, 2, 3, 4}), {}}}, dir.path());
  std::ifstream in(dir / "vectors.bin", std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), {});
  const std::vector<unsigned char> expected = {
      0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0x40,   // 1.0f, 2.0f
      0x00, 0x00, 0x40, 0x40, 0x00, 0x00, 0x80, 0x40};  // 3.0f, 4.0f
  EXPECT_EQ(bytes, expected);

  const auto manifest = nlohmann::json::parse(detail::read_text(dir / "manifest.json"));
  EXPECT_EQ(manifest["dim"], 2);
  EXPECT_EQ(manifest["docs"][0]["id"], "d0");
  EXPECT_EQ(manifest["docs"][0]["num_vectors"], 2);
  EXPECT_EQ(manifest["docs"][0]["offset_floats"], 0);
}

TEST(EmbeddingStore, RandomCollectionsRoundTripBitExactly) {
  RandomStream rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d = 1 + rng.below(40);
    std::vector<MultiVectorDoc> docs;
    std::size_t total = 0;
    for (std::size_t i = 0, n = 1 + rng.below(8); i < n; ++i) {
      docs.push_back(make_doc("doc" + std::to_string(i), 1 + rng.below(30), d, rng));
      if (rng.below(2) == 0) docs.back().subset = "S" + std::to_string(rng.below(3));
      total += docs.back().num_vectors();
    }
    ScratchDir dir("roundtrip");
    save_collection(docs, dir.path());
    EXPECT_EQ(std::filesystem::file_size(dir / "vectors.bin"), 4 * total * d);
    const auto loaded = load_collection(dir.path());
    ASSERT_EQ(loaded, docs);
    for (std::size_t i = 0; i < docs.size(); ++i) {
      EXPECT_EQ(std::memcmp(loaded[i].vectors.flat().data(), docs[i].vectors.flat().data(),
                            4 * docs[i].vectors.size()),
                0);
    }
  }
}

TEST(EmbeddingStore, MixedDimensionsAreRejected) {
  RandomStream rng(3);
  ScratchDir dir("mixed");
  const auto code = error_code_of([&] {
    save_collection({make_doc("a", 2, 320, rng), make_doc("b", 2, 128, rng)}, dir.path());
  });
  EXPECT_EQ(code, ErrorCode::kDimensionMismatch);
}

TEST(EmbeddingStore, TruncatedBinaryIsCorrupt) {
  RandomStream rng(5);
  ScratchDir dir("trunc");
  save_collection({make_doc("a", 3, 4, rng)}, dir.path());
  const auto bin = dir / "vectors.bin";
  std::filesystem::resize_file(bin, std::filesystem::file_size(bin) - 4);
  EXPECT_EQ(error_code_of([&] { load_collection(dir.path()); }), ErrorCode::kCorruptStore);
}

TEST(EmbeddingStore, NonFiniteValueFailsValidation) {
  ScratchDir dir("nan");
  save_collection({{"a", Matrix<float>(1, 2, {1.0f, 2.0f}), {}}}, dir.path());
  {
    std::fstream f(dir / "vectors.bin", std::ios::in | std::ios::out | std::ios::binary);
    const unsigned char nan_bits[4] = {0x00, 0x00, 0xc0, 0x7f};
    f.seekp(4);
    f.write(reinterpret_cast<const char*>(nan_bits), 4);
  }
  EXPECT_EQ(error_code_of([&] { load_collection(dir.path()); }), ErrorCode::kDataValidation);
}

TEST(EmbeddingStore, IndexRoundTrip) {
  SingleVectorIndex index{{"x", "y"}, Matrix<float>(2, 3, {1, 2, 3, 4, 5, 6})};
  ScratchDir dir("index");
  save_index(index, dir.path());
  EXPECT_EQ(std::filesystem::file_size(dir / "vectors.bin"), 2u * 3 * 4);
  EXPECT_EQ(load_index(dir.path()), index);
}

TEST(Qrels, ParsesOneEntry) {
  std::istringstream in("q1\td7\t1\n");
  const auto qrels = parse_qrels(in);
  ASSERT_EQ(qrels.size(), 1u);
  EXPECT_EQ(qrels.entries()[0].query_id, "q1");
  EXPECT_EQ(qrels.entries()[0].doc_id, "d7");
  EXPECT_EQ(qrels.entries()[0].grade, 1);
  EXPECT_EQ(qrels.docs_for("q1").at("d7"), 1);
  EXPECT_EQ(qrels.queries_for("d7").at("q1"), 1);
  EXPECT_TRUE(qrels.docs_for("q2").empty());
}

TEST(Qrels, DuplicatePairIsRejected) {
  std::istringstream in("q1\td7\t1\nq1\td7\t1\n");
  EXPECT_EQ(error_code_of([&] { parse_qrels(in); }), ErrorCode::kDuplicateEntry);
}

TEST(Qrels, NegativeGradeFailsValidation) {
  std::istringstream in("q1\td7\t-1\n");
  EXPECT_EQ(error_code_of([&] { parse_qrels(in); }), ErrorCode::kDataValidation);
}

TEST(Qrels, MalformedLineReportsLineNumber) {
  std::istringstream in("q1\td7\t1\n\nq2 d8 1\n");
  try {
    parse_qrels(in);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kParse);
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
}

TEST(Qrels, ZeroGradeIsAllowedAndFileRoundTrips) {
  Qrels q;
  q.add("q1", "d1", 0);
  q.add("q1", "d2", 3);
  q.add("q2", "d1", 1);
  ScratchDir dir("qrels");
  save_qrels(q, dir / "qrels.tsv");
  const auto loaded = load_qrels(dir / "qrels.tsv");
  EXPECT_EQ(loaded.docs_for("q1"), q.docs_for("q1"));
  EXPECT_EQ(loaded.docs_for("q2"), q.docs_for("q2"));
}

TEST(EmbeddingCost, ReportsMeanVectorsAndDimension) {
  // 1249 mean vectors at d=320, loaded through a manifest.
  ScratchDir dir("cost");
  std::vector<MultiVectorDoc> docs;
  for (std::size_t n : {1000u, 1249u, 1498u}) {
    docs.push_back({"d" + std::to_string(n), Matrix<float>(n, 320), {}});
  }
  save_collection(docs, dir.path());
  const auto cost = embedding_cost(load_collection(dir.path()));
  EXPECT_EQ(cost.mean_vectors, 1249.0);
  EXPECT_EQ(cost.dim, 320u);
  EXPECT_EQ(cost.compression_ratio(), 1249.0);

  std::vector<MultiVectorDoc> small = {{"a", Matrix<float>(746, 128), {}}};
  EXPECT_EQ(embedding_cost(small).mean_vectors, 746.0);
  EXPECT_EQ(embedding_cost(small).dim, 128u);

  std::vector<MultiVectorDoc> single = {{"a", Matrix<float>(1, 4), {}}};
  EXPECT_EQ(embedding_cost(single).compression_ratio(), 1.0);
}

TEST(EmbeddingCost, EmptyCollectionIsAnError) {
  EXPECT_EQ(error_code_of([] { embedding_cost({}); }), ErrorCode::kEmptyInput);
}

}  // namespace
}  // namespace reinpool
