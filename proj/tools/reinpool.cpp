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

// Command-line front end: gen, train, compress, eval, gradcheck, selftest.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "reinpool/reinpool.hpp"

namespace {

using reinpool::ErrorCode;
using reinpool::fail;
namespace fs = std::filesystem;

// Flags shared by several subcommands. Unset optionals leave the config
// file (or the defaults) alone.
struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::string out;
  std::string checkpoint;
  std::optional<double> threshold;
  std::optional<std::size_t> group_size;
  std::optional<double> lr;
  std::optional<std::size_t> steps;
  std::optional<std::string> pool;
  std::vector<std::string> methods;

  std::string data;
  std::string corpus;
  std::string format;
  bool resume = false;
  bool corrupt_gradient = false;
  std::size_t gc_dim = 8;
  std::size_t gc_heads = 2;
  std::size_t gc_rows = 6;
};

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("reinpool");
  logger->set_pattern("[%H:%M:%S.%e] [%^%l%$] %v");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::info);
  if (const char* env = std::getenv("REINPOOL_LOG"); env != nullptr && *env != '\0') {
    const auto level = spdlog::level::from_str(env);
    // from_str maps unknown names to off; only "off" itself should do that.
    if (level == spdlog::level::off && std::string(env) != "off") {
      spdlog::warn("REINPOOL_LOG='{}' is not a log level; using info", env);
    } else {
      spdlog::set_level(level);
    }
  }
}

reinpool::RunConfig resolve_config(const Flags& f) {
  reinpool::RunConfig cfg;
  if (!f.config.empty()) cfg = reinpool::load_run_config(f.config);
  if (f.seed) {
    cfg.synth.seed = *f.seed;
    cfg.train.seed = *f.seed;
  }
  if (f.threads) cfg.train.threads = *f.threads;
  if (f.group_size) cfg.train.group_size = *f.group_size;
  if (f.lr) cfg.train.learning_rate = *f.lr;
  if (f.steps) cfg.train.max_steps = *f.steps;
  if (f.pool) cfg.train.pool = reinpool::parse_pool_kind(*f.pool);
  if (f.threshold) cfg.eval.threshold = *f.threshold;
  if (!f.methods.empty()) cfg.eval.methods = f.methods;
  if (!f.format.empty()) cfg.eval.format = f.format;
  return cfg;
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) fail(ErrorCode::kConfiguration, fmt::format("{} is required", flag));
}

int cmd_gen(const Flags& f) {
  const auto cfg = resolve_config(f);
  require(f.out, "--out");
  const auto ds = reinpool::generate(cfg.synth);
  reinpool::write_dataset(ds, cfg.synth, f.out);
  const auto& t = ds.test;
  spdlog::info("wrote {} train / {} val / {} test documents to {}", ds.train.corpus.size(),
               ds.val.corpus.size(), t.corpus.size(), f.out);
  if (!t.corpus.empty()) {
    spdlog::info("test NDCG@3 oracle-mask mean {:.4f}, static mean {:.4f}",
                 reinpool::oracle_eval(t.corpus, t.queries, t.qrels, t.oracle_masks,
                                       reinpool::PoolKind::kMean),
                 reinpool::static_eval(t.corpus, t.queries, t.qrels, reinpool::PoolKind::kMean));
  }
  return 0;
}

int cmd_train(const Flags& f) {
  const auto cfg = resolve_config(f);
  require(f.data, "--data");
  require(f.out, "--out");
  cfg.train.validate();
  const auto data = reinpool::load_training_data(f.data);
  reinpool::detail::ensure_directory(f.out);
  reinpool::detail::write_text(fs::path(f.out) / "train_config.json",
                               cfg.train.to_json().dump(2) + "\n");
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = reinpool::train(data, cfg.train, reinpool::default_train_paths(f.out), f.resume);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  spdlog::info("trained {} steps in {:.1f} s", result.steps, secs);
  std::cout << fmt::format("final validation NDCG@{} {:.6f} kept {:.4f}\n", cfg.train.ndcg_k,
                           result.final_val_ndcg, result.final_kept_fraction);
  return 0;
}

int cmd_compress(const Flags& f) {
  const auto cfg = resolve_config(f);
  require(f.checkpoint, "--checkpoint");
  require(f.corpus, "--corpus");
  require(f.out, "--out");
  const auto params = reinpool::load_policy(f.checkpoint);
  const auto docs = reinpool::load_collection(f.corpus);
  if (!docs.empty() && docs.front().dim() != params.dim()) {
    fail(ErrorCode::kConfiguration, fmt::format("checkpoint d={} but corpus d={}", params.dim(),
                                                docs.front().dim()));
  }
  double kept = 0.0;
  const auto index = reinpool::compress_with_policy(params, docs, cfg.train.pool,
                                                    cfg.eval.threshold, &kept);
  reinpool::save_index(index, f.out);
  std::cout << fmt::format("compressed {} documents, kept fraction {:.4f}\n", docs.size(), kept);
  return 0;
}

int cmd_eval(const Flags& f) {
  const auto cfg = resolve_config(f);
  require(f.data, "--data");
  const fs::path split = f.data;
  auto names = cfg.eval.methods;
  if (names.empty()) {
    names = {"full-mean", "full-max", "static-mean", "static-max"};
    if (!f.checkpoint.empty()) {
      names.push_back("reinpool-mean");
      names.push_back("reinpool-max");
    }
  }
  std::vector<reinpool::EvalMethod> methods;
  for (const auto& n : names) {
    methods.push_back(reinpool::parse_eval_method(n, f.checkpoint, cfg.eval.threshold));
  }
  const auto format = reinpool::parse_report_format(cfg.eval.format);
  const auto corpus = reinpool::load_collection(f.corpus.empty() ? split / "corpus" : fs::path(f.corpus));
  const auto queries = reinpool::load_collection(split / "queries");
  const auto qrels = reinpool::load_qrels(split / "qrels.tsv");
  const auto report = reinpool::evaluate(std::move(methods), corpus, queries, qrels, cfg.eval.k,
                                         cfg.train.threads, cfg.eval.normalize_pooled);
  if (report.excluded_queries > 0) {
    spdlog::warn("{} queries have no judgments and were excluded", report.excluded_queries);
  }
  if (f.out.empty()) {
    std::cout << reinpool::render_report(report, format);
  } else {
    reinpool::emit_report(report, format, f.out);
    spdlog::info("report written to {}", f.out);
  }
  return 0;
}

int cmd_gradcheck(const Flags& f) {
  reinpool::GradCheckOptions opt;
  opt.dim = f.gc_dim;
  opt.heads = f.gc_heads;
  opt.rows = f.gc_rows;
  if (f.seed) opt.seed = *f.seed;
  opt.corrupt_gradient = f.corrupt_gradient;
  const auto result = reinpool::gradient_check(opt);
  for (std::size_t i = 0; i < reinpool::kAllTensors.size(); ++i) {
    spdlog::info("{:>6} max relative error {:.3e}", reinpool::tensor_name(reinpool::kAllTensors[i]),
                 result.tensor_rel_error[i]);
  }
  std::cout << fmt::format("max relative error {:.6e} ({})\n", result.max_rel_error,
                           result.passed ? "pass" : "FAIL");
  return result.passed ? 0 : 2;
}

int cmd_selftest(const Flags& f) {
  auto cfg = resolve_config(f);
  // The smoke schedule applies unless a config file chose otherwise.
  if (f.config.empty()) {
    const auto threads = cfg.train.threads;
    const auto seed = cfg.train.seed;
    cfg.train = reinpool::smoke_train_config();
    cfg.train.threads = threads;
    cfg.train.seed = seed;
    if (f.group_size) cfg.train.group_size = *f.group_size;
    if (f.lr) cfg.train.learning_rate = *f.lr;
    if (f.steps) cfg.train.max_steps = *f.steps;
  }
  const fs::path dir = f.out.empty() ? fs::temp_directory_path() / "reinpool-selftest" : fs::path(f.out);
  const auto t0 = std::chrono::steady_clock::now();
  const auto run = reinpool::run_planted(cfg.synth, cfg.train, dir);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << fmt::format(
      "test NDCG@3: oracle {:.4f} static-mean {:.4f} reinpool-mean {:.4f} (kept {:.3f}, {} steps, "
      "{:.1f} s)\n",
      run.oracle, run.static_mean, run.trained, run.kept_fraction, run.steps, secs);
  const bool gap = run.beats_static();
  const bool ceiling = run.near_ceiling();
  std::cout << fmt::format("{} learned exceeds static mean by >= 0.10\n", gap ? "PASS" : "FAIL");
  std::cout << fmt::format("{} learned reaches >= 80% of the oracle ceiling\n",
                           ceiling ? "PASS" : "FAIL");
  return gap && ceiling ? 0 : 2;
}

void add_common(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "JSON configuration file");
  sub->add_option("--seed", f.seed, "64-bit seed");
  sub->add_option("--threads", f.threads, "worker threads")->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Learned filtering and pooling for multi-vector embeddings"};
  app.require_subcommand(1);
  Flags f;

  auto* gen = app.add_subcommand("gen", "generate a planted-signal dataset");
  add_common(gen, f);
  gen->add_option("--out", f.out, "dataset directory");

  auto* tr = app.add_subcommand("train", "train a filtering policy");
  add_common(tr, f);
  tr->add_option("--data", f.data, "dataset directory with train/ and val/");
  tr->add_option("--out", f.out, "run directory");
  tr->add_option("--group-size", f.group_size, "rollouts per document");
  tr->add_option("--lr", f.lr, "initial learning rate");
  tr->add_option("--steps", f.steps, "total optimizer steps");
  tr->add_option("--pool", f.pool, "pooling kind")->check(CLI::IsMember({"mean", "max"}));
  tr->add_flag("--resume", f.resume, "continue from <out>/checkpoint");

  auto* cp = app.add_subcommand("compress", "write a single-vector index");
  add_common(cp, f);
  cp->add_option("--checkpoint", f.checkpoint, "policy or checkpoint directory");
  cp->add_option("--corpus", f.corpus, "multi-vector collection directory");
  cp->add_option("--out", f.out, "index directory");
  cp->add_option("--threshold", f.threshold, "keep threshold in (0, 1)");
  cp->add_option("--pool", f.pool, "pooling kind")->check(CLI::IsMember({"mean", "max"}));

  auto* ev = app.add_subcommand("eval", "retrieval evaluation report");
  add_common(ev, f);
  ev->add_option("--data", f.data, "split directory with corpus/, queries/, qrels.tsv");
  ev->add_option("--corpus", f.corpus, "override the corpus directory");
  ev->add_option("--method", f.methods,
                 "full-mean, full-max, full-maxsim, static-mean, static-max, reinpool-mean, "
                 "reinpool-max (repeatable)");
  ev->add_option("--checkpoint", f.checkpoint, "policy for reinpool methods");
  ev->add_option("--threshold", f.threshold, "keep threshold in (0, 1)");
  ev->add_option("--format", f.format, "text, csv or json");
  ev->add_option("--out", f.out, "report file (stdout when omitted)");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the policy gradient");
  gc->add_option("--seed", f.seed, "parameter seed");
  gc->add_option("--dim", f.gc_dim, "embedding dimension");
  gc->add_option("--heads", f.gc_heads, "attention heads");
  gc->add_option("--rows", f.gc_rows, "vectors per document");
  gc->add_flag("--corrupt-gradient", f.corrupt_gradient, "perturb one analytic entry (test hook)");

  auto* st = app.add_subcommand("selftest", "gen, train, compress and eval on a planted corpus");
  add_common(st, f);
  st->add_option("--out", f.out, "working directory");
  st->add_option("--group-size", f.group_size, "rollouts per document");
  st->add_option("--lr", f.lr, "initial learning rate");
  st->add_option("--steps", f.steps, "total optimizer steps");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return cmd_gen(f);
    if (tr->parsed()) return cmd_train(f);
    if (cp->parsed()) return cmd_compress(f);
    if (ev->parsed()) return cmd_eval(f);
    if (gc->parsed()) return cmd_gradcheck(f);
    if (st->parsed()) return cmd_selftest(f);
  } catch (const reinpool::Error& e) {
    spdlog::error("{}", e.what());
    return reinpool::exit_code_for(e.code());
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 3;
  }
  return 1;
}
