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

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "reinpool/pipeline.hpp"
#include "reinpool/synth_bench.hpp"
#include "reinpool/trainer.hpp"
#include "test_util.hpp"

namespace reinpool {
namespace {

using testing::error_code_of;
using testing::ScratchDir;

SynthConfig tiny_synth() {
  SynthConfig s;
  s.num_topics = 4;
  s.docs_per_topic = 8;
  s.vectors_per_doc = 12;
  s.signal_count = 3;
  s.dim = 8;
  s.queries_per_doc = 2;
  return s;
}

TrainConfig tiny_train() {
  TrainConfig c;
  c.heads = 2;
  c.group_size = 4;
  c.batch_docs = 4;
  c.max_steps = 12;
  c.val_every = 4;
  c.learning_rate = 1e-2;
  return c;
}

TrainingData data_from(const SynthDataset& ds) {
  return {ds.train.corpus, ds.train.queries, ds.train.qrels,
          ds.val.corpus,   ds.val.queries,   ds.val.qrels};
}

std::string file_bytes(const std::filesystem::path& p) { return detail::read_text(p); }

TEST(Advantages, MeanCentering) {
  const std::vector<double> r = {0.2, 0.8, 0.5};
  const auto a = compute_advantages(r, false);
  EXPECT_NEAR(a[0], -0.3, 1e-15);
  EXPECT_NEAR(a[1], 0.3, 1e-15);
  EXPECT_NEAR(a[2], 0.0, 1e-15);
  const std::vector<double> pair = {0.2, 0.8};
  const auto b = compute_advantages(pair, false);
  EXPECT_NEAR(b[0], -0.3, 1e-15);
  EXPECT_NEAR(b[1], 0.3, 1e-15);
}

TEST(Advantages, EqualRewardsGiveExactZeros) {
  for (double r : {0.1, 0.3, 1.0 / 3.0, 0.7}) {
    for (std::size_t g : {2u, 3u, 7u, 16u}) {
      const std::vector<double> rewards(g, r);
      for (bool norm : {false, true}) {
        for (double a : compute_advantages(rewards, norm)) EXPECT_EQ(a, 0.0);
      }
    }
  }
}

TEST(Advantages, StdNormalizationUsesPopulationStd) {
  const std::vector<double> r = {0.0, 1.0};
  const auto a = compute_advantages(r, true);
  EXPECT_NEAR(a[0], -1.0, 1e-7);
  EXPECT_NEAR(a[1], 1.0, 1e-7);
}

TEST(Advantages, SumToZeroOnRandomGroups) {
  RandomStream rng(31);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> r(2 + rng.below(31));
    for (double& x : r) x = rng.uniform();
    const auto a = compute_advantages(r, false);
    EXPECT_NEAR(std::accumulate(a.begin(), a.end(), 0.0), 0.0, 1e-12);
  }
}

TEST(Advantages, SingletonGroupIsRejected) {
  const std::vector<double> r = {0.5};
  EXPECT_EQ(error_code_of([&] { compute_advantages(r, false); }), ErrorCode::kConfiguration);
}

TEST(AdamW, SingleScalarStep) {
  TrainConfig cfg;
  auto state = OptimizerState::zeros(1);
  std::vector<double> theta = {1.0};
  const std::vector<double> g = {1.0};
  apply_update(state, theta, g, 1e-3, cfg);
  EXPECT_NEAR(theta[0], 1.0 - 1e-3 / (1.0 + 1e-8) - 1e-3 * 0.01, 1e-15);
  EXPECT_NEAR(theta[0], 0.998990, 5e-7);
  EXPECT_EQ(state.t, 1u);
}

TEST(AdamW, TenIdenticalGradientsMoveMonotonically) {
  // Hand recurrence: with a constant gradient the bias-corrected moments are
  // m_hat = g and v_hat = g^2, so theta <- theta - lr/(1+eps) - lr*wd*theta.
  TrainConfig cfg;
  auto state = OptimizerState::zeros(1);
  std::vector<double> theta = {1.0};
  const std::vector<double> g = {1.0};
  double expected = 1.0, prev = 1.0;
  for (int t = 0; t < 10; ++t) {
    apply_update(state, theta, g, 1e-3, cfg);
    expected = expected - 1e-3 / (1.0 + 1e-8) - 1e-3 * 0.01 * expected;
    EXPECT_NEAR(theta[0], expected, 1e-12);
    EXPECT_LT(theta[0], prev);
    prev = theta[0];
  }
  EXPECT_EQ(state.t, 10u);
  EXPECT_GE(state.v[0], 0.0);
}

TEST(AdamW, ZeroGradientWithoutDecayLeavesParameters) {
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  auto state = OptimizerState::zeros(3);
  std::vector<double> theta = {1.5, -2.0, 0.25};
  const auto before = theta;
  apply_update(state, theta, std::vector<double>(3, 0.0), 1e-2, cfg);
  EXPECT_EQ(theta, before);
}

TEST(Clip, ScalesToTheMaximumNorm) {
  std::vector<double> g = {6.0, 8.0};  // norm 10
  EXPECT_EQ(clip_global_norm(g, 1.0), 10.0);
  EXPECT_NEAR(g[0], 0.6, 1e-15);
  EXPECT_NEAR(g[1], 0.8, 1e-15);
  std::vector<double> small = {0.3, 0.4};
  clip_global_norm(small, 1.0);
  EXPECT_EQ(small, (std::vector<double>{0.3, 0.4}));

  RandomStream rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> r(50);
    for (double& x : r) x = rng.normal() * 10.0;
    clip_global_norm(r, 1.0);
    double sq = 0.0;
    for (double x : r) sq += x * x;
    EXPECT_LE(std::sqrt(sq), 1.0 + 1e-9);
  }
}

TEST(Plateau, HalvesAfterPatienceFlatValidations) {
  TrainConfig cfg;
  const std::vector<double> flat = {0.5, 0.5, 0.5, 0.5, 0.5, 0.5};
  EXPECT_EQ(plateau_scheduler(std::span(flat).first(5), cfg, 1e-3), 1e-3);
  EXPECT_EQ(plateau_scheduler(flat, cfg, 1e-3), 5e-4);
}

TEST(Plateau, ImprovingHistoryKeepsRate) {
  TrainConfig cfg;
  std::vector<double> h;
  for (int i = 0; i < 30; ++i) h.push_back(0.1 + 0.01 * i);
  EXPECT_EQ(plateau_scheduler(h, cfg, 1e-3), 1e-3);
}

TEST(Plateau, SmallGainsDoNotCountAsImprovement) {
  TrainConfig cfg;
  const std::vector<double> h = {0.5, 0.50009, 0.5, 0.50005, 0.50009, 0.5};
  EXPECT_EQ(plateau_scheduler(h, cfg, 1e-3), 5e-4);
}

TEST(Plateau, FloorAtMinimumRate) {
  TrainConfig cfg;
  const std::vector<double> flat(40, 0.5);
  EXPECT_EQ(plateau_scheduler(flat, cfg, cfg.min_lr), cfg.min_lr);
  EXPECT_EQ(plateau_scheduler(flat, cfg, 1e-3), std::max(1e-3 / 128.0, cfg.min_lr));
}

TEST(Plateau, CounterResetsAfterHalving) {
  TrainConfig cfg;
  PlateauScheduler s(1e-3, cfg);
  s.observe(0.5);
  for (int i = 0; i < 4; ++i) EXPECT_FALSE(s.observe(0.5));
  EXPECT_TRUE(s.observe(0.5));
  EXPECT_EQ(s.bad_count(), 0u);
  for (int i = 0; i < 4; ++i) EXPECT_FALSE(s.observe(0.5));
  EXPECT_TRUE(s.observe(0.5));
  EXPECT_EQ(s.learning_rate(), 2.5e-4);
}

TEST(Plateau, EmptyHistoryIsAnError) {
  TrainConfig cfg;
  EXPECT_EQ(error_code_of([&] { plateau_scheduler({}, cfg, 1e-3); }), ErrorCode::kEmptyInput);
}

TEST(TrainConfigTest, ValidationAndJson) {
  TrainConfig c;
  c.group_size = 1;
  EXPECT_EQ(error_code_of([&] { c.validate(); }), ErrorCode::kConfiguration);
  c = TrainConfig();
  c.plateau_factor = 1.0;
  EXPECT_EQ(error_code_of([&] { c.validate(); }), ErrorCode::kConfiguration);

  TrainConfig a = tiny_train();
  TrainConfig b;
  b.merge_json(a.to_json());
  EXPECT_EQ(a.hash(), b.hash());
  b.threads = 7;
  b.max_steps = 99;
  EXPECT_EQ(a.hash(), b.hash());
  b.learning_rate = 0.5;
  EXPECT_NE(a.hash(), b.hash());
  EXPECT_EQ(error_code_of([&] { b.merge_json({{"learning_rat", 0.1}}); }),
            ErrorCode::kConfiguration);
}

TEST(Rollouts, GroupIsReproducibleAndCentred) {
  const auto ds = generate(tiny_synth());
  const auto data = data_from(ds);
  auto cfg = tiny_train();
  const TrainingSet set(data, cfg);
  const auto params = init_policy(8, 2, RandomStream(3), 0.0);
  const auto a = rollout_group(params, set.doc(0), set.positives(0), set.pool(), cfg, 5, 0);
  const auto b = rollout_group(params, set.doc(0), set.positives(0), set.pool(), cfg, 5, 0);
  ASSERT_EQ(a.rollouts.size(), 4u);
  double sum = 0.0;
  for (std::size_t g = 0; g < 4; ++g) {
    EXPECT_EQ(a.rollouts[g].mask, b.rollouts[g].mask);
    EXPECT_EQ(a.rollouts[g].reward, b.rollouts[g].reward);
    EXPECT_GE(a.rollouts[g].reward, 0.0);
    EXPECT_LE(a.rollouts[g].reward, 1.0);
    sum += a.rollouts[g].advantage;
  }
  EXPECT_NEAR(sum, 0.0, 1e-12);
  const auto c = rollout_group(params, set.doc(0), set.positives(0), set.pool(), cfg, 6, 0);
  bool differs = false;
  for (std::size_t g = 0; g < 4; ++g) differs = differs || !(c.rollouts[g].mask == a.rollouts[g].mask);
  EXPECT_TRUE(differs);
}

TEST(Rollouts, SaturatedPolicyGivesIdenticalRolloutsAndZeroAdvantage) {
  const auto ds = generate(tiny_synth());
  const auto data = data_from(ds);
  auto cfg = tiny_train();
  const TrainingSet set(data, cfg);
  const auto params = init_policy(8, 2, RandomStream(3), 40.0);
  const auto group = rollout_group(params, set.doc(1), set.positives(1), set.pool(), cfg, 0, 1);
  for (const auto& r : group.rollouts) {
    EXPECT_EQ(r.mask, KeepMask(12, true));
    EXPECT_EQ(r.advantage, 0.0);
  }
}

TEST(TrainStep, EqualRewardGroupsApplyPureWeightDecay) {
  const auto ds = generate(tiny_synth());
  const auto data = data_from(ds);
  auto cfg = tiny_train();
  const TrainingSet set(data, cfg);
  auto params = init_policy(8, 2, RandomStream(9), 40.0);
  const auto before = params;
  auto state = OptimizerState::zeros(params.size());
  const std::vector<std::size_t> batch = {0, 1, 2, 3};
  const auto m = train_step(params, state, batch, set, cfg, 1e-2, 0);
  EXPECT_EQ(m.grad_norm, 0.0);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double theta = before.flat()[i];
    EXPECT_EQ(params.flat()[i], theta - 1e-2 * cfg.weight_decay * theta) << i;
  }
}

TEST(TrainStep, NonFiniteParametersAbortWithNumericError) {
  const auto ds = generate(tiny_synth());
  const auto data = data_from(ds);
  auto cfg = tiny_train();
  const TrainingSet set(data, cfg);
  auto params = init_policy(8, 2, RandomStream(9), 0.0);
  params.tensor(Tensor::kBcls)[0] = std::numeric_limits<double>::quiet_NaN();
  auto state = OptimizerState::zeros(params.size());
  const std::vector<std::size_t> batch = {0};
  const auto code = error_code_of([&] { train_step(params, state, batch, set, cfg, 1e-2, 0); });
  EXPECT_EQ(code, ErrorCode::kNumericOverflow);
  EXPECT_EQ(exit_code_for(code), 2);
}

TEST(TrainStep, DocumentsWithoutPositivesAreSkipped) {
  const auto ds = generate(tiny_synth());
  auto data = data_from(ds);
  auto extra = data.train_docs.front();
  extra.id = "doc-orphan";
  data.train_docs.push_back(extra);
  const TrainingSet set(data, tiny_train());
  EXPECT_EQ(set.skipped(), 1u);
  EXPECT_EQ(set.size(), data.train_docs.size() - 1);
}

TEST(Batches, EpochsVisitEveryDocumentOnce) {
  std::vector<int> seen(10, 0);
  for (std::uint64_t step = 0; step < 5; ++step) {
    for (std::size_t d : batch_for_step(step, 10, 2, 42)) ++seen[d];
  }
  for (int s : seen) EXPECT_EQ(s, 1);
  EXPECT_EQ(batch_for_step(3, 10, 4, 42), batch_for_step(3, 10, 4, 42));
}

TEST(Validation, InitialPolicyMatchesStaticMean) {
  const auto ds = generate(SynthConfig{});
  for (double bias : {0.0, 1.0}) {
    TrainConfig cfg;
    cfg.initial_keep_bias = bias;
    const auto params = init_policy(32, 8, RandomStream(1), bias);
    double kept = 0.0;
    const double v = validate(params, ds.val.corpus, ds.val.queries, ds.val.qrels, cfg, &kept);
    EXPECT_EQ(kept, 1.0);
    EXPECT_NEAR(v, static_eval(ds.val.corpus, ds.val.queries, ds.val.qrels, PoolKind::kMean), 0.02);
  }
  EXPECT_EQ(error_code_of([&] {
              validate(init_policy(32, 8, RandomStream(1)), {}, ds.val.queries, ds.val.qrels,
                       TrainConfig{});
            }),
            ErrorCode::kConfiguration);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  ScratchDir dir("ckpt");
  Checkpoint c;
  c.params = init_policy(8, 2, RandomStream(5));
  c.optimizer = OptimizerState::zeros(c.params.size());
  RandomStream rng(6);
  for (double& x : c.optimizer.m) x = rng.normal();
  for (double& x : c.optimizer.v) x = rng.uniform();
  c.optimizer.t = 17;
  c.step = 17;
  TrainConfig cfg;
  c.scheduler = PlateauScheduler(1e-3, cfg);
  c.scheduler.observe(0.25);
  c.scheduler.observe(0.25);
  c.config_hash = cfg.hash();
  c.seed = 99;
  save_checkpoint(c, dir.path());
  const auto back = load_checkpoint(dir.path(), cfg.hash());
  EXPECT_EQ(back.params, c.params);
  EXPECT_EQ(back.optimizer, c.optimizer);
  EXPECT_EQ(back.step, 17u);
  EXPECT_EQ(back.seed, 99u);
  EXPECT_EQ(back.scheduler.history(), c.scheduler.history());
  EXPECT_EQ(back.scheduler.bad_count(), 1u);
}

TEST(Checkpoint, CorruptionIsDetected) {
  ScratchDir dir("corrupt");
  Checkpoint c;
  c.params = init_policy(8, 2, RandomStream(5));
  c.optimizer = OptimizerState::zeros(c.params.size());
  save_checkpoint(c, dir.path());
  {
    std::fstream f(dir / "policy.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(11);
    f.put('\x5a');
  }
  const auto code = error_code_of([&] { load_checkpoint(dir.path()); });
  EXPECT_EQ(code, ErrorCode::kChecksum);
  EXPECT_EQ(exit_code_for(code), 3);
}

TEST(Checkpoint, ConfigHashMismatchIsIncompatible) {
  ScratchDir dir("hash");
  const auto ds = generate(tiny_synth());
  auto cfg = tiny_train();
  train(data_from(ds), cfg, default_train_paths(dir.path()));
  cfg.learning_rate *= 2;
  EXPECT_EQ(error_code_of([&] { train(data_from(ds), cfg, default_train_paths(dir.path()), true); }),
            ErrorCode::kIncompatibleCheckpoint);
}

TEST(Training, ResumedRunReproducesUninterruptedRun) {
  const auto ds = generate(tiny_synth());
  auto cfg = tiny_train();
  cfg.plateau_patience = 1;  // exercise scheduler state across the splice
  ScratchDir whole("whole"), split("split");
  train(data_from(ds), cfg, default_train_paths(whole.path()));
  auto first = cfg;
  first.max_steps = 6;  // stops between validations; resume replays steps 5-6
  train(data_from(ds), first, default_train_paths(split.path()));
  train(data_from(ds), cfg, default_train_paths(split.path()), true);
  for (const char* f : {"checkpoint/policy.bin", "checkpoint/optimizer.bin",
                        "checkpoint/run_state.json", "metrics.csv"}) {
    EXPECT_EQ(file_bytes(whole / f), file_bytes(split / f)) << f;
  }
}

TEST(Training, ThreadCountDoesNotChangeResults) {
  const auto ds = generate(tiny_synth());
  auto cfg = tiny_train();
  ScratchDir one("t1"), four("t4");
  train(data_from(ds), cfg, default_train_paths(one.path()));
  cfg.threads = 4;
  train(data_from(ds), cfg, default_train_paths(four.path()));
  for (const char* f : {"checkpoint/policy.bin", "checkpoint/optimizer.bin",
                        "checkpoint/run_state.json", "metrics.csv"}) {
    EXPECT_EQ(file_bytes(one / f), file_bytes(four / f)) << f;
  }
}

TEST(Training, EmbeddingsStayFrozen) {
  const auto ds = generate(tiny_synth());
  const auto data = data_from(ds);
  const auto copy = data;
  ScratchDir dir("frozen");
  train(data, tiny_train(), default_train_paths(dir.path()));
  EXPECT_EQ(data.train_docs, copy.train_docs);
  EXPECT_EQ(data.train_queries, copy.train_queries);
  EXPECT_EQ(data.val_docs, copy.val_docs);
}

TEST(Training, MetricsCsvHasOneRowPerStep) {
  const auto ds = generate(tiny_synth());
  ScratchDir dir("csv");
  const auto result = train(data_from(ds), tiny_train(), default_train_paths(dir.path()));
  std::istringstream in(file_bytes(dir / "metrics.csv"));
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, kMetricsHeader);
  std::size_t rows = 0, with_val = 0;
  while (std::getline(in, line)) {
    ++rows;
    if (line.back() != ',') ++with_val;
  }
  EXPECT_EQ(rows, 12u);
  EXPECT_EQ(with_val, 3u);
  EXPECT_EQ(result.steps, 12u);
}

TEST(Training, PlantedKeptFractionFalls) {
  ScratchDir dir("planted");
  const auto ds = generate(SynthConfig{});
  const auto result =
      train(data_from(ds), smoke_train_config(), default_train_paths(dir.path()));
  auto window_mean = [&](std::size_t from) {
    double s = 0.0;
    for (std::size_t i = from; i < from + 10; ++i) s += result.metrics[i].kept_fraction;
    return s / 10.0;
  };
  const double initial = window_mean(0);
  const double final = window_mean(result.metrics.size() - 10);
  EXPECT_GT(initial - final, 0.2) << initial << " -> " << final;
  EXPECT_GT(result.final_val_ndcg, result.initial_val_ndcg + 0.1);
}

TEST(Presets, ConfigFilesMatchBuiltInSchedules) {
  const fs::path configs = fs::path(REINPOOL_SOURCE_DIR) / "configs";
  EXPECT_EQ(load_run_config(configs / "planted.json").train.to_json(), planted_train_config().to_json());
  EXPECT_EQ(load_run_config(configs / "smoke.json").train.to_json(), smoke_train_config().to_json());
  EXPECT_LE(smoke_train_config().max_steps, 200u);
  EXPECT_EQ(load_run_config(configs / "planted.json").synth.to_json(), SynthConfig{}.to_json());
}

}  // namespace
}  // namespace reinpool
