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

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "reinpool/compress.hpp"
#include "reinpool/embedding_store.hpp"
#include "reinpool/error.hpp"
#include "reinpool/evaluator.hpp"
#include "reinpool/synth_bench.hpp"
#include "reinpool/trainer.hpp"

namespace reinpool {

// Benchmark settings for the planted-signal corpus. Starting from an even
// keep probability avoids the early drift toward keeping every row that a
// positive initial bias invites on some corpora.
inline TrainConfig planted_train_config() {
  TrainConfig cfg;
  cfg.group_size = 16;
  cfg.learning_rate = 3e-3;
  cfg.max_steps = 1000;
  cfg.initial_keep_bias = 0.0;
  return cfg;
}

// Short run used by selftest; finishes in a few seconds on one core.
inline TrainConfig smoke_train_config() {
  TrainConfig cfg = planted_train_config();
  cfg.learning_rate = 5e-3;
  cfg.max_steps = 200;
  return cfg;
}

struct EvalSettings {
  std::vector<std::string> methods;  // empty: a default set
  std::size_t k = 3;
  double threshold = 0.5;
  std::string format = "text";
  bool normalize_pooled = false;

  void merge_json(const nlohmann::json& j) {
    for (const auto& [key, value] : j.items()) {
      if (key == "methods") methods = value.get<std::vector<std::string>>();
      else if (key == "k") k = value.get<std::size_t>();
      else if (key == "threshold") threshold = value.get<double>();
      else if (key == "format") format = value.get<std::string>();
      else if (key == "normalize_pooled") normalize_pooled = value.get<bool>();
      else fail(ErrorCode::kConfiguration, "unknown eval key '" + key + "'");
    }
  }
  nlohmann::json to_json() const {
    return {{"methods", methods}, {"k", k}, {"threshold", threshold}, {"format", format},
            {"normalize_pooled", normalize_pooled}};
  }
};

// One file configures every subcommand: {"synth": {...}, "train": {...},
// "eval": {...}}. Missing sections keep their defaults.
struct RunConfig {
  SynthConfig synth;
  TrainConfig train;
  EvalSettings eval;

  void merge_json(const nlohmann::json& j) {
    if (!j.is_object()) fail(ErrorCode::kConfiguration, "configuration must be a JSON object");
    for (const auto& [key, value] : j.items()) {
      try {
        if (key == "synth") synth.merge_json(value);
        else if (key == "train") train.merge_json(value);
        else if (key == "eval") eval.merge_json(value);
        else fail(ErrorCode::kConfiguration, "unknown configuration section '" + key + "'");
      } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::kConfiguration, "bad value in section '" + key + "': " + e.what());
      }
    }
  }
  nlohmann::json to_json() const {
    return {{"synth", synth.to_json()}, {"train", train.to_json()}, {"eval", eval.to_json()}};
  }
};

inline RunConfig load_run_config(const fs::path& path) {
  RunConfig cfg;
  cfg.merge_json(detail::parse_json_file(path, ErrorCode::kConfiguration));
  return cfg;
}

inline TrainingData load_training_data(const fs::path& dataset_dir) {
  auto train = load_split(dataset_dir / "train");
  TrainingData data{std::move(train.corpus), std::move(train.queries), std::move(train.qrels),
                    {}, {}, {}};
  if (fs::exists(dataset_dir / "val")) {
    auto val = load_split(dataset_dir / "val");
    data.val_docs = std::move(val.corpus);
    data.val_queries = std::move(val.queries);
    data.val_qrels = std::move(val.qrels);
  }
  return data;
}

struct PlantedRun {
  double oracle = 0.0;        // oracle-mask ceiling on the test split
  double static_mean = 0.0;   // static mean pooling on the test split
  double trained = 0.0;       // learned policy on the test split
  double kept_fraction = 0.0;
  std::uint64_t steps = 0;

  bool beats_static(double margin = 0.10) const { return trained - static_mean >= margin; }
  bool near_ceiling(double fraction = 0.80) const { return trained >= fraction * oracle; }
};

// gen -> train -> compress -> eval on a planted corpus written under dir.
inline PlantedRun run_planted(const SynthConfig& synth, const TrainConfig& train_cfg,
                              const fs::path& dir) {
  write_dataset(generate(synth), synth, dir / "data");
  const auto data = load_training_data(dir / "data");
  const auto test = load_split(dir / "data" / "test");

  PlantedRun run;
  run.oracle = oracle_eval(test.corpus, test.queries, test.qrels, test.oracle_masks,
                           PoolKind::kMean, train_cfg.ndcg_k);
  const auto result = train(data, train_cfg, default_train_paths(dir / "run"));
  run.steps = result.steps;

  const auto params = load_policy(dir / "run" / "checkpoint");
  save_index(compress_with_policy(params, test.corpus, PoolKind::kMean, 0.5, &run.kept_fraction),
             dir / "index");
  const auto report = evaluate({EvalMethod::static_pool(PoolKind::kMean),
                                EvalMethod::reinpool(PoolKind::kMean, dir / "run" / "checkpoint")},
                               test.corpus, test.queries, test.qrels, train_cfg.ndcg_k,
                               train_cfg.threads);
  run.static_mean = report.methods[0].average;
  run.trained = report.methods[1].average;
  return run;
}

}  // namespace reinpool
