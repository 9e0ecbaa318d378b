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
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>
#include <spdlog/spdlog.h>
#include <zlib.h>

#include "reinpool/compress.hpp"
#include "reinpool/embedding_store.hpp"
#include "reinpool/error.hpp"
#include "reinpool/parallel.hpp"
#include "reinpool/policy.hpp"
#include "reinpool/pooling.hpp"
#include "reinpool/random.hpp"
#include "reinpool/ranking.hpp"

namespace reinpool {

struct TrainConfig {
  std::size_t group_size = 8;
  std::size_t batch_docs = 8;
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 1.0;
  std::size_t ndcg_k = 3;
  std::size_t max_steps = 1000;
  std::size_t plateau_patience = 5;
  double plateau_factor = 0.5;
  double plateau_threshold = 1e-4;
  double min_lr = 1e-6;
  std::uint64_t seed = 42;
  bool advantage_std_normalize = false;
  double entropy_coeff = 0.0;
  std::size_t heads = 8;
  PoolKind pool = PoolKind::kMean;
  std::size_t val_every = 50;
  std::size_t candidate_pool_size = 0;  // 0: rank against all training queries
  double initial_keep_bias = 1.0;
  std::size_t threads = 1;  // execution only; never changes results

  void validate() const {
    auto bad = [](const std::string& m) { fail(ErrorCode::kConfiguration, m); };
    if (group_size < 2) bad("group_size must be >= 2");
    if (batch_docs < 1) bad("batch_docs must be >= 1");
    if (!(learning_rate > 0)) bad("learning_rate must be positive");
    if (weight_decay < 0) bad("weight_decay must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) bad("betas must lie in [0, 1)");
    if (!(epsilon > 0)) bad("epsilon must be positive");
    if (!(clip_norm > 0)) bad("clip_norm must be positive");
    if (ndcg_k < 1) bad("ndcg_k must be >= 1");
    if (!(plateau_factor > 0 && plateau_factor < 1)) bad("plateau_factor must lie in (0, 1)");
    if (plateau_patience < 1) bad("plateau_patience must be >= 1");
    if (!(min_lr > 0)) bad("min_lr must be positive");
    if (val_every < 1) bad("val_every must be >= 1");
    if (heads < 1) bad("heads must be >= 1");
  }

  // Everything that influences the trajectory, excluding run length and
  // thread count.
  nlohmann::json trajectory_json() const {
    return {{"group_size", group_size},
            {"batch_docs", batch_docs},
            {"learning_rate", learning_rate},
            {"weight_decay", weight_decay},
            {"beta1", beta1},
            {"beta2", beta2},
            {"epsilon", epsilon},
            {"clip_norm", clip_norm},
            {"ndcg_k", ndcg_k},
            {"plateau_patience", plateau_patience},
            {"plateau_factor", plateau_factor},
            {"plateau_threshold", plateau_threshold},
            {"min_lr", min_lr},
            {"seed", seed},
            {"advantage_std_normalize", advantage_std_normalize},
            {"entropy_coeff", entropy_coeff},
            {"heads", heads},
            {"pool", std::string(pool_kind_name(pool))},
            {"val_every", val_every},
            {"candidate_pool_size", candidate_pool_size},
            {"initial_keep_bias", initial_keep_bias}};
  }

  nlohmann::json to_json() const {
    auto j = trajectory_json();
    j["max_steps"] = max_steps;
    j["threads"] = threads;
    return j;
  }

  // Applies the keys present in `j`; unknown keys are rejected.
  void merge_json(const nlohmann::json& j) {
    if (!j.is_object()) fail(ErrorCode::kConfiguration, "training config must be an object");
    try {
      for (const auto& [key, value] : j.items()) {
        if (key == "group_size") group_size = value.get<std::size_t>();
        else if (key == "batch_docs") batch_docs = value.get<std::size_t>();
        else if (key == "learning_rate") learning_rate = value.get<double>();
        else if (key == "weight_decay") weight_decay = value.get<double>();
        else if (key == "beta1") beta1 = value.get<double>();
        else if (key == "beta2") beta2 = value.get<double>();
        else if (key == "epsilon") epsilon = value.get<double>();
        else if (key == "clip_norm") clip_norm = value.get<double>();
        else if (key == "ndcg_k") ndcg_k = value.get<std::size_t>();
        else if (key == "max_steps") max_steps = value.get<std::size_t>();
        else if (key == "plateau_patience") plateau_patience = value.get<std::size_t>();
        else if (key == "plateau_factor") plateau_factor = value.get<double>();
        else if (key == "plateau_threshold") plateau_threshold = value.get<double>();
        else if (key == "min_lr") min_lr = value.get<double>();
        else if (key == "seed") seed = value.get<std::uint64_t>();
        else if (key == "advantage_std_normalize") advantage_std_normalize = value.get<bool>();
        else if (key == "entropy_coeff") entropy_coeff = value.get<double>();
        else if (key == "heads") heads = value.get<std::size_t>();
        else if (key == "pool") pool = parse_pool_kind(value.get<std::string>());
        else if (key == "val_every") val_every = value.get<std::size_t>();
        else if (key == "candidate_pool_size") candidate_pool_size = value.get<std::size_t>();
        else if (key == "initial_keep_bias") initial_keep_bias = value.get<double>();
        else if (key == "threads") threads = value.get<std::size_t>();
        else fail(ErrorCode::kConfiguration, "unknown training config key '" + key + "'");
      }
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::kConfiguration, std::string("bad training config value: ") + e.what());
    }
  }

  std::uint32_t hash() const {
    const auto text = trajectory_json().dump();
    return static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(text.data()), static_cast<uInt>(text.size())));
  }
};

// r_g - mean(r), optionally divided by (population std + 1e-8).
inline std::vector<double> compute_advantages(std::span<const double> rewards,
                                              bool std_normalize) {
  if (rewards.size() < 2) fail(ErrorCode::kConfiguration, "group size must be >= 2");
  const double n = static_cast<double>(rewards.size());
  // Mean taken relative to the first reward so that a group of identical
  // rewards centres to exact zeros.
  double shift = 0.0;
  for (double r : rewards) shift += r - rewards[0];
  const double mean = rewards[0] + shift / n;
  std::vector<double> adv(rewards.size());
  for (std::size_t g = 0; g < rewards.size(); ++g) adv[g] = rewards[g] - mean;
  if (std_normalize) {
    double var = 0.0;
    for (double a : adv) var += a * a;
    const double denom = std::sqrt(var / n) + 1e-8;
    for (double& a : adv) a /= denom;
  }
  return adv;
}

struct OptimizerState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;

  static OptimizerState zeros(std::size_t n) { return {std::vector<double>(n, 0.0), std::vector<double>(n, 0.0), 0}; }
  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

// Adam moments plus decoupled weight decay:
//   theta -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * theta
inline void apply_update(OptimizerState& state, std::span<double> params,
                         std::span<const double> grad, double lr, const TrainConfig& cfg) {
  if (params.size() != grad.size() || state.m.size() != params.size() ||
      state.v.size() != params.size()) {
    fail(ErrorCode::kShape, "optimizer state, parameters and gradient sizes differ");
  }
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grad[i];
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    params[i] = params[i] - lr * m_hat / (std::sqrt(v_hat) + cfg.epsilon) -
                lr * cfg.weight_decay * params[i];
  }
}

// Scales `grad` in place to global L2 norm <= max_norm; returns the norm
// before clipping.
inline double clip_global_norm(std::span<double> grad, double max_norm) {
  double sq = 0.0;
  for (double g : grad) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (double& g : grad) g *= scale;
  }
  return norm;
}

// Halves (by plateau_factor) the learning rate once the best validation
// score has gone plateau_patience validations without improving by more
// than plateau_threshold.
class PlateauScheduler {
 public:
  PlateauScheduler() = default;
  PlateauScheduler(double lr, const TrainConfig& cfg)
      : lr_(lr), factor_(cfg.plateau_factor), threshold_(cfg.plateau_threshold),
        min_lr_(cfg.min_lr), patience_(cfg.plateau_patience) {}

  // Returns true if the learning rate was reduced.
  bool observe(double score) {
    history_.push_back(score);
    if (score > best_ + threshold_) {
      best_ = score;
      bad_ = 0;
      return false;
    }
    if (++bad_ >= patience_) {
      bad_ = 0;
      const double next = std::max(lr_ * factor_, min_lr_);
      const bool changed = next < lr_;
      lr_ = next;
      return changed;
    }
    return false;
  }

  double learning_rate() const { return lr_; }
  double best() const { return best_; }
  std::size_t bad_count() const { return bad_; }
  const std::vector<double>& history() const { return history_; }

  nlohmann::json to_json() const {
    return {{"learning_rate", lr_}, {"best", std::isfinite(best_) ? nlohmann::json(best_) : nlohmann::json(nullptr)},
            {"bad_count", bad_}, {"history", history_}};
  }
  void restore(const nlohmann::json& j) {
    lr_ = j.at("learning_rate").get<double>();
    best_ = j.at("best").is_null() ? -std::numeric_limits<double>::infinity()
                                   : j.at("best").get<double>();
    bad_ = j.at("bad_count").get<std::size_t>();
    history_ = j.at("history").get<std::vector<double>>();
  }

 private:
  double lr_ = 1e-3;
  double factor_ = 0.5;
  double threshold_ = 1e-4;
  double min_lr_ = 1e-6;
  std::size_t patience_ = 5;
  double best_ = -std::numeric_limits<double>::infinity();
  std::size_t bad_ = 0;
  std::vector<double> history_;
};

// Learning rate after replaying `history` from `initial_lr`.
inline double plateau_scheduler(std::span<const double> history, const TrainConfig& cfg,
                                double initial_lr) {
  if (history.empty()) fail(ErrorCode::kEmptyInput, "empty validation history");
  PlateauScheduler s(initial_lr, cfg);
  for (double h : history) s.observe(h);
  return s.learning_rate();
}

struct Rollout {
  KeepMask mask;
  double log_prob = 0.0;
  std::vector<double> v_pool;
  double reward = 0.0;
  double advantage = 0.0;
};

struct RolloutGroup {
  PolicyOutput output;
  std::vector<Rollout> rollouts;
};

namespace stream_tag {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kShuffle = 2;
inline constexpr std::uint64_t kRollout = 3;
inline constexpr std::uint64_t kNegatives = 4;
}  // namespace stream_tag

// Samples G masks for one document, pools each and scores it by inverse
// retrieval against the candidate pool. Substreams are keyed by
// (seed, step, doc, g), so the result does not depend on scheduling.
inline RolloutGroup rollout_group(const PolicyParams& params, const MultiVectorDoc& doc,
                                  std::span<const std::size_t> positives,
                                  const CandidatePool& pool, const TrainConfig& cfg,
                                  std::uint64_t step, std::uint64_t doc_ordinal) {
  if (cfg.group_size < 2) fail(ErrorCode::kConfiguration, "group_size must be >= 2");
  if (positives.empty()) fail(ErrorCode::kConfiguration, "document " + doc.id + " has no positive queries");
  RolloutGroup group;
  group.output = forward(params, doc.vectors);
  RewardSpec spec{cfg.ndcg_k, cfg.candidate_pool_size == 0
                                  ? std::nullopt
                                  : std::optional<std::size_t>(cfg.candidate_pool_size)};
  std::vector<double> rewards;
  for (std::size_t g = 0; g < cfg.group_size; ++g) {
    RandomStream rng(RandomStream::derive_key(cfg.seed, {stream_tag::kRollout, step, doc_ordinal, g}));
    auto sampled = sample_mask(group.output, rng);
    Rollout r;
    r.v_pool = reinpool::pool(doc.vectors, sampled.mask, cfg.pool);
    RandomStream neg(RandomStream::derive_key(cfg.seed, {stream_tag::kNegatives, step, doc_ordinal, g}));
    r.reward = inverse_retrieval_reward(r.v_pool, positives, pool, spec, &neg);
    r.mask = std::move(sampled.mask);
    r.log_prob = sampled.log_prob;
    rewards.push_back(r.reward);
    group.rollouts.push_back(std::move(r));
  }
  const auto adv = compute_advantages(rewards, cfg.advantage_std_normalize);
  for (std::size_t g = 0; g < adv.size(); ++g) group.rollouts[g].advantage = adv[g];
  return group;
}

// Frozen inputs for a training run.
struct TrainingData {
  std::vector<MultiVectorDoc> train_docs;
  std::vector<MultiVectorQuery> train_queries;
  Qrels train_qrels;
  std::vector<MultiVectorDoc> val_docs;
  std::vector<MultiVectorQuery> val_queries;
  Qrels val_qrels;
};

struct StepMetrics {
  std::uint64_t step = 0;  // 1-based, after the update
  double loss = 0.0;
  double mean_reward = 0.0;
  double kept_fraction = 0.0;
  double grad_norm = 0.0;
  double learning_rate = 0.0;
  std::optional<double> val_ndcg;
};

// Documents usable for training (at least one positive query) with the
// positions of their positives in the candidate pool.
class TrainingSet {
 public:
  TrainingSet(const TrainingData& data, const TrainConfig& cfg)
      : docs_(&data.train_docs), pool_(pool_queries(data.train_queries, cfg.pool)) {
    if (data.train_docs.empty()) fail(ErrorCode::kEmptyInput, "no training documents");
    for (std::size_t i = 0; i < data.train_docs.size(); ++i) {
      const auto& doc = data.train_docs[i];
      if (doc.dim() != pool_.dim()) {
        fail(ErrorCode::kDimensionMismatch, "training document and query dimensions differ");
      }
      std::set<std::string> pos;
      for (const auto& [qid, grade] : data.train_qrels.queries_for(doc.id)) {
        if (grade > 0) pos.insert(qid);
      }
      if (pos.empty()) {
        ++skipped_;
        continue;
      }
      usable_.push_back(i);
      positives_.push_back(pool_.positions(pos));
    }
    if (skipped_ > 0) {
      spdlog::warn("skipping {} training documents without positive queries", skipped_);
    }
    if (usable_.empty()) fail(ErrorCode::kConfiguration, "no training document has a positive query");
  }

  std::size_t size() const { return usable_.size(); }
  std::size_t skipped() const { return skipped_; }
  const MultiVectorDoc& doc(std::size_t i) const { return (*docs_)[usable_[i]]; }
  std::span<const std::size_t> positives(std::size_t i) const { return positives_[i]; }
  const CandidatePool& pool() const { return pool_; }

 private:
  const std::vector<MultiVectorDoc>* docs_;
  CandidatePool pool_;
  std::vector<std::size_t> usable_;
  std::vector<std::vector<std::size_t>> positives_;
  std::size_t skipped_ = 0;
};

// Document ordinals for one step: consecutive slices of per-epoch seeded
// permutations (sampling without replacement within an epoch).
inline std::vector<std::size_t> batch_for_step(std::uint64_t step, std::size_t num_docs,
                                               std::size_t batch_docs, std::uint64_t seed) {
  std::vector<std::size_t> batch;
  std::uint64_t cached_epoch = std::numeric_limits<std::uint64_t>::max();
  std::vector<std::size_t> perm;
  for (std::size_t i = 0; i < batch_docs; ++i) {
    const std::uint64_t p = step * batch_docs + i;
    const std::uint64_t epoch = p / num_docs;
    if (epoch != cached_epoch) {
      perm.resize(num_docs);
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      RandomStream rng(RandomStream::derive_key(seed, {stream_tag::kShuffle, epoch}));
      shuffle(perm.begin(), perm.end(), rng);
      cached_epoch = epoch;
    }
    batch.push_back(perm[p % num_docs]);
  }
  return batch;
}

// One GRPO update over a batch. `step` is the 0-based step index used to key
// random substreams.
inline StepMetrics train_step(PolicyParams& params, OptimizerState& state,
                              std::span<const std::size_t> batch, const TrainingSet& set,
                              const TrainConfig& cfg, double lr, std::uint64_t step) {
  if (batch.empty()) fail(ErrorCode::kConfiguration, "empty batch");
  struct DocResult {
    PolicyParams grad;
    double loss = 0.0;
    double reward = 0.0;
    double kept = 0.0;
  };
  std::vector<DocResult> results(batch.size());
  parallel_for(batch.size(), cfg.threads, [&](std::size_t b) {
    const std::size_t ordinal = batch[b];
    const auto group = rollout_group(params, set.doc(ordinal), set.positives(ordinal),
                                     set.pool(), cfg, step, ordinal);
    std::vector<KeepMask> masks;
    std::vector<double> coefs;
    DocResult r;
    for (const auto& ro : group.rollouts) {
      masks.push_back(ro.mask);
      coefs.push_back(ro.advantage);
      r.reward += ro.reward;
      r.kept += ro.mask.kept_fraction();
    }
    r.reward /= static_cast<double>(group.rollouts.size());
    r.kept /= static_cast<double>(group.rollouts.size());
    r.loss = surrogate_loss(group.output, masks, coefs, cfg.entropy_coeff);
    r.grad = backward(params, group.output, masks, coefs, cfg.entropy_coeff);
    results[b] = std::move(r);
  });

  // Fixed-order reduction.
  std::vector<double> grad(params.size(), 0.0);
  StepMetrics m;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (const auto& r : results) {
    auto g = r.grad.flat();
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
    m.loss += r.loss;
    m.mean_reward += r.reward;
    m.kept_fraction += r.kept;
  }
  for (double& g : grad) g *= inv_b;
  m.loss *= inv_b;
  m.mean_reward *= inv_b;
  m.kept_fraction *= inv_b;
  for (double g : grad) {
    if (!std::isfinite(g)) fail(ErrorCode::kNumericOverflow, "non-finite gradient at step " + std::to_string(step + 1));
  }
  m.grad_norm = clip_global_norm(grad, cfg.clip_norm);
  apply_update(state, params.flat(), grad, lr, cfg);
  if (!params.all_finite()) fail(ErrorCode::kNumericOverflow, "non-finite parameter after update");
  m.step = step + 1;
  m.learning_rate = lr;
  return m;
}

// Greedy-mask compression of the validation documents, then forward
// retrieval with the validation queries; mean NDCG@k.
inline double validate(const PolicyParams& params, const std::vector<MultiVectorDoc>& val_docs,
                       const std::vector<MultiVectorQuery>& val_queries, const Qrels& qrels,
                       const TrainConfig& cfg, double* kept_fraction = nullptr) {
  if (val_docs.empty() || val_queries.empty()) {
    fail(ErrorCode::kConfiguration, "empty validation set");
  }
  const auto index = compress_with_policy(params, val_docs, cfg.pool, 0.5, kept_fraction);
  const auto queries = pool_queries(val_queries, cfg.pool);
  return mean_forward_ndcg(index, queries, qrels, cfg.ndcg_k);
}

struct Checkpoint {
  PolicyParams params;
  OptimizerState optimizer;
  std::uint64_t step = 0;
  PlateauScheduler scheduler;
  std::uint32_t config_hash = 0;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::uint32_t crc32_of(std::span<const char> bytes) {
  return static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()),
                                          static_cast<uInt>(bytes.size())));
}

inline std::uint32_t crc32_of_file(const fs::path& path) {
  const auto bytes = read_all_bytes(path);
  return crc32_of(bytes);
}

// Write to a sibling temporary, then rename into place.
inline void atomic_write(const fs::path& path, const std::function<void(const fs::path&)>& write) {
  const fs::path tmp = path.string() + ".tmp";
  write(tmp);
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) fail(ErrorCode::kStorage, "cannot rename " + tmp.string() + ": " + ec.message());
}

}  // namespace detail

// Layout: policy.json + policy.bin, optimizer.bin (m then v, float64 LE),
// run_state.json (step, scheduler, config hash, RNG cursor, CRC32s).
inline void save_checkpoint(const Checkpoint& ckpt, const fs::path& dir) {
  detail::ensure_directory(dir);
  const fs::path staging = dir / ".staging";
  detail::ensure_directory(staging);
  save_policy(ckpt.params, staging);
  detail::atomic_write(dir / "policy.json", [&](const fs::path& p) {
    fs::copy_file(staging / "policy.json", p, fs::copy_options::overwrite_existing);
  });
  detail::atomic_write(dir / "policy.bin", [&](const fs::path& p) {
    fs::copy_file(staging / "policy.bin", p, fs::copy_options::overwrite_existing);
  });
  fs::remove_all(staging);
  detail::atomic_write(dir / "optimizer.bin", [&](const fs::path& p) {
    std::vector<double> mv(ckpt.optimizer.m);
    mv.insert(mv.end(), ckpt.optimizer.v.begin(), ckpt.optimizer.v.end());
    detail::write_f64_file(p, mv);
  });
  nlohmann::json state = {
      {"step", ckpt.step},
      {"optimizer_t", ckpt.optimizer.t},
      {"scheduler", ckpt.scheduler.to_json()},
      {"config_hash", ckpt.config_hash},
      {"rng", {{"seed", ckpt.seed}, {"next_step", ckpt.step}}},
      {"checksums",
       {{"policy.bin", detail::crc32_of_file(dir / "policy.bin")},
        {"policy.json", detail::crc32_of_file(dir / "policy.json")},
        {"optimizer.bin", detail::crc32_of_file(dir / "optimizer.bin")}}}};
  detail::atomic_write(dir / "run_state.json",
                       [&](const fs::path& p) { detail::write_text(p, state.dump(2) + "\n"); });
}

inline Checkpoint load_checkpoint(const fs::path& dir,
                                  std::optional<std::uint32_t> expected_hash = std::nullopt) {
  const auto state = detail::parse_json_file(dir / "run_state.json", ErrorCode::kCorruptStore);
  Checkpoint ckpt;
  try {
    for (const char* name : {"policy.bin", "policy.json", "optimizer.bin"}) {
      const auto want = state.at("checksums").at(name).get<std::uint32_t>();
      if (detail::crc32_of_file(dir / name) != want) {
        fail(ErrorCode::kChecksum, std::string(name) + " does not match its recorded CRC32");
      }
    }
    ckpt.step = state.at("step").get<std::uint64_t>();
    ckpt.config_hash = state.at("config_hash").get<std::uint32_t>();
    ckpt.seed = state.at("rng").at("seed").get<std::uint64_t>();
    ckpt.optimizer.t = state.at("optimizer_t").get<std::uint64_t>();
    ckpt.scheduler.restore(state.at("scheduler"));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kCorruptStore, "malformed run_state.json: " + std::string(e.what()));
  }
  if (expected_hash && *expected_hash != ckpt.config_hash) {
    fail(ErrorCode::kIncompatibleCheckpoint,
         "checkpoint was written with a different training configuration");
  }
  ckpt.params = load_policy(dir);
  const auto bytes = detail::read_all_bytes(dir / "optimizer.bin");
  if (bytes.size() != 16 * ckpt.params.size()) {
    fail(ErrorCode::kCorruptStore, "optimizer.bin size does not match the policy");
  }
  auto mv = detail::decode_f64_le(bytes);
  const auto n = static_cast<std::ptrdiff_t>(ckpt.params.size());
  ckpt.optimizer.m.assign(mv.begin(), mv.begin() + n);
  ckpt.optimizer.v.assign(mv.begin() + n, mv.end());
  return ckpt;
}

// Checkpoints go to checkpoint_dir; the policy with the best validation score
// goes to best_dir; metrics are appended to metrics_csv.
struct TrainPaths {
  fs::path checkpoint_dir;
  fs::path best_dir;
  fs::path metrics_csv;
};

inline TrainPaths default_train_paths(const fs::path& out_dir) {
  return {out_dir / "checkpoint", out_dir / "best", out_dir / "metrics.csv"};
}

struct TrainResult {
  PolicyParams params;
  std::uint64_t steps = 0;
  double initial_val_ndcg = 0.0;
  double final_val_ndcg = 0.0;
  double initial_kept_fraction = 0.0;
  double final_kept_fraction = 0.0;
  std::size_t skipped_docs = 0;
  std::vector<StepMetrics> metrics;
};

inline constexpr const char* kMetricsHeader = "step,loss,mean_reward,kept_fraction,grad_norm,lr,val_ndcg3";

inline std::string format_metrics_row(const StepMetrics& m) {
  return fmt::format("{},{},{},{},{},{},{}", m.step, m.loss, m.mean_reward, m.kept_fraction,
                     m.grad_norm, m.learning_rate,
                     m.val_ndcg ? fmt::format("{}", *m.val_ndcg) : std::string());
}

// Full GRPO loop. With resume set and a checkpoint present, training
// continues from it and the metrics log is truncated to the checkpoint step,
// so a resumed run reproduces the uninterrupted one bit for bit.
inline TrainResult train(const TrainingData& data, const TrainConfig& cfg, const TrainPaths& paths,
                         bool resume = false) {
  cfg.validate();
  const TrainingSet set(data, cfg);
  const std::size_t dim = set.pool().dim();

  Checkpoint ckpt;
  const bool resuming = resume && fs::exists(paths.checkpoint_dir / "run_state.json");
  if (resuming) {
    ckpt = load_checkpoint(paths.checkpoint_dir, cfg.hash());
    PlateauScheduler scheduler(cfg.learning_rate, cfg);
    scheduler.restore(ckpt.scheduler.to_json());
    ckpt.scheduler = std::move(scheduler);
    if (ckpt.params.dim() != dim) {
      fail(ErrorCode::kConfiguration, "checkpoint dimension does not match the data");
    }
    spdlog::info("resuming from step {}", ckpt.step);
  } else {
    ckpt.params = init_policy(dim, cfg.heads,
                              RandomStream(RandomStream::derive_key(cfg.seed, {stream_tag::kInit})),
                              cfg.initial_keep_bias);
    ckpt.optimizer = OptimizerState::zeros(ckpt.params.size());
    ckpt.scheduler = PlateauScheduler(cfg.learning_rate, cfg);
    ckpt.config_hash = cfg.hash();
    ckpt.seed = cfg.seed;
  }

  // Metrics log.
  std::vector<std::string> kept_rows;
  if (resuming && fs::exists(paths.metrics_csv)) {
    std::istringstream in(detail::read_text(paths.metrics_csv));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (std::stoull(line.substr(0, line.find(','))) <= ckpt.step) kept_rows.push_back(line);
    }
  }
  if (!paths.metrics_csv.parent_path().empty()) detail::ensure_directory(paths.metrics_csv.parent_path());
  {
    std::string text = std::string(kMetricsHeader) + "\n";
    for (const auto& r : kept_rows) text += r + "\n";
    detail::write_text(paths.metrics_csv, text);
  }
  std::ofstream csv(paths.metrics_csv, std::ios::app | std::ios::binary);
  if (!csv) fail(ErrorCode::kStorage, "cannot append to " + paths.metrics_csv.string());

  TrainResult result;
  result.skipped_docs = set.skipped();
  const bool have_val = !data.val_docs.empty() && !data.val_queries.empty();
  if (have_val) {
    result.initial_val_ndcg = validate(ckpt.params, data.val_docs, data.val_queries,
                                       data.val_qrels, cfg, &result.initial_kept_fraction);
    spdlog::info("step {} validation NDCG@{} {:.4f} kept {:.3f}", ckpt.step, cfg.ndcg_k,
                 result.initial_val_ndcg, result.initial_kept_fraction);
  }

  for (std::uint64_t s = ckpt.step; s < cfg.max_steps; ++s) {
    const auto batch = batch_for_step(s, set.size(), cfg.batch_docs, cfg.seed);
    auto m = train_step(ckpt.params, ckpt.optimizer, batch, set, cfg,
                        ckpt.scheduler.learning_rate(), s);
    ckpt.step = s + 1;
    if (have_val && ckpt.step % cfg.val_every == 0) {
      double kept = 0.0;
      const double score =
          validate(ckpt.params, data.val_docs, data.val_queries, data.val_qrels, cfg, &kept);
      m.val_ndcg = score;
      const double best_before = ckpt.scheduler.best();
      if (ckpt.scheduler.observe(score)) {
        spdlog::info("validation plateau: learning rate now {}", ckpt.scheduler.learning_rate());
      }
      if (score > best_before) save_policy(ckpt.params, paths.best_dir);
      spdlog::info("step {} loss {:.5f} reward {:.4f} kept {:.3f} val NDCG@{} {:.4f}", ckpt.step,
                   m.loss, m.mean_reward, m.kept_fraction, cfg.ndcg_k, score);
      save_checkpoint(ckpt, paths.checkpoint_dir);
    } else {
      spdlog::debug("step {} loss {:.5f} reward {:.4f} kept {:.3f}", ckpt.step, m.loss,
                    m.mean_reward, m.kept_fraction);
    }
    csv << format_metrics_row(m) << '\n';
    csv.flush();
    result.metrics.push_back(m);
  }
  save_checkpoint(ckpt, paths.checkpoint_dir);

  if (have_val) {
    result.final_val_ndcg = validate(ckpt.params, data.val_docs, data.val_queries, data.val_qrels,
                                     cfg, &result.final_kept_fraction);
  }
  result.params = std::move(ckpt.params);
  result.steps = ckpt.step;
  return result;
}

}  // namespace reinpool
