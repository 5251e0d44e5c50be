#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lrsa/errors.hpp"
#include "lrsa/lagkv.hpp"
#include "lrsa/model.hpp"
#include "lrsa/train.hpp"

// Run configuration: a single JSON document, every leaf overridable by a CLI
// flag of the same dotted name. Validation collects every violation and
// reports them in one pass.

namespace lrsa::config {

using json = nlohmann::ordered_json;

struct RunSection {
  i64 chunks_per_step = 2;
  std::string precision = "f64";
  std::uint64_t seed = 1;
  i64 seq_len = 272;  // S + 8L at the toy defaults
  i64 threads = 0;    // 0 = OpenMP default
};

struct TaskSection {
  std::string kind = "copy";
  i64 needle_len = 4;
};

struct EquivalenceSection {
  i64 seeds = 100;
  i64 decode_tokens = 4;
};

struct BenchSection {
  std::vector<i64> lengths = {48, 144, 272, 544};  // S+L, S+4L, S+8L, 2(S+8L)
};

struct RunConfig {
  model::ModelConfig model;
  lagkv::LagkvParams lagkv;
  RunSection run;
  train::TrainConfig train;
  TaskSection task;
  EquivalenceSection equivalence;
  BenchSection bench;
  std::string mode = "vanilla";
  std::string out_dir = "out";

  std::vector<std::string> collect_errors() const {
    std::vector<std::string> errs = model.validate();
    for (auto& e : lagkv.validate()) errs.push_back(e);
    for (auto& e : train.validate()) errs.push_back(e);
    if (run.chunks_per_step < 1)
      errs.push_back("run.chunks_per_step must be >= 1, got " +
                     std::to_string(run.chunks_per_step));
    if (run.precision != "f32" && run.precision != "f64")
      errs.push_back("run.precision must be 'f32' or 'f64', got '" + run.precision + "'");
    if (run.seq_len < 1) errs.push_back("run.seq_len must be >= 1");
    if (run.threads < 0) errs.push_back("run.threads must be >= 0");
    if (task.kind != "copy" && task.kind != "needle")
      errs.push_back("task.kind must be 'copy' or 'needle', got '" + task.kind + "'");
    if (task.needle_len < 1) errs.push_back("task.needle_len must be >= 1");
    if (mode != "vanilla" && mode != "lrsa")
      errs.push_back("mode must be 'vanilla' or 'lrsa', got '" + mode + "'");
    if (equivalence.seeds < 1) errs.push_back("equivalence.seeds must be >= 1");
    if (equivalence.decode_tokens < 0) errs.push_back("equivalence.decode_tokens must be >= 0");
    if (bench.lengths.empty()) errs.push_back("bench.lengths must not be empty");
    for (i64 n : bench.lengths)
      if (n < lagkv.sink + 1)
        errs.push_back("bench.lengths entry " + std::to_string(n) +
                       " is shorter than sink+1");
    return errs;
  }

  // Throws ConfigError listing all violations at once.
  void validate() const {
    auto errs = collect_errors();
    if (errs.empty()) return;
    std::ostringstream os;
    os << "invalid configuration (" << errs.size() << " problem" << (errs.size() > 1 ? "s" : "")
       << "):";
    for (const auto& e : errs) os << "\n  - " << e;
    throw ConfigError(os.str());
  }
};

namespace detail {

template <typename T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline void merge_json(RunConfig& cfg, const json& j) {
  using detail::get_if;
  if (j.contains("model")) {
    const auto& m = j.at("model");
    get_if(m, "vocab", cfg.model.vocab);
    get_if(m, "d_model", cfg.model.d_model);
    get_if(m, "heads", cfg.model.heads);
    get_if(m, "kv_heads", cfg.model.kv_heads);
    get_if(m, "head_dim", cfg.model.head_dim);
    get_if(m, "layers", cfg.model.layers);
    get_if(m, "mlp_ratio", cfg.model.mlp_ratio);
    get_if(m, "rope_base", cfg.model.rope_base);
    get_if(m, "norm_eps", cfg.model.norm_eps);
  }
  if (j.contains("lagkv")) {
    const auto& m = j.at("lagkv");
    get_if(m, "sink", cfg.lagkv.sink);
    get_if(m, "lag", cfg.lagkv.lag);
    get_if(m, "retention", cfg.lagkv.retention);
    get_if(m, "epsilon", cfg.lagkv.epsilon);
  }
  if (j.contains("run")) {
    const auto& m = j.at("run");
    get_if(m, "chunks_per_step", cfg.run.chunks_per_step);
    get_if(m, "precision", cfg.run.precision);
    get_if(m, "seed", cfg.run.seed);
    get_if(m, "seq_len", cfg.run.seq_len);
    get_if(m, "threads", cfg.run.threads);
  }
  if (j.contains("train")) {
    const auto& m = j.at("train");
    get_if(m, "lr", cfg.train.lr);
    get_if(m, "beta1", cfg.train.beta1);
    get_if(m, "beta2", cfg.train.beta2);
    get_if(m, "weight_decay", cfg.train.weight_decay);
    get_if(m, "adam_eps", cfg.train.adam_eps);
    get_if(m, "steps", cfg.train.steps);
    get_if(m, "batch", cfg.train.batch);
    get_if(m, "seed", cfg.train.seed);
  }
  if (j.contains("task")) {
    const auto& m = j.at("task");
    get_if(m, "kind", cfg.task.kind);
    get_if(m, "needle_len", cfg.task.needle_len);
  }
  if (j.contains("equivalence")) {
    const auto& m = j.at("equivalence");
    get_if(m, "seeds", cfg.equivalence.seeds);
    get_if(m, "decode_tokens", cfg.equivalence.decode_tokens);
  }
  if (j.contains("bench")) {
    const auto& m = j.at("bench");
    get_if(m, "lengths", cfg.bench.lengths);
  }
  detail::get_if(j, "mode", cfg.mode);
  detail::get_if(j, "out_dir", cfg.out_dir);
}

inline json to_json(const RunConfig& cfg) {
  json j;
  j["model"] = {{"vocab", cfg.model.vocab},       {"d_model", cfg.model.d_model},
                {"heads", cfg.model.heads},       {"kv_heads", cfg.model.kv_heads},
                {"head_dim", cfg.model.head_dim}, {"layers", cfg.model.layers},
                {"mlp_ratio", cfg.model.mlp_ratio}, {"rope_base", cfg.model.rope_base},
                {"norm_eps", cfg.model.norm_eps}};
  j["lagkv"] = {{"sink", cfg.lagkv.sink},
                {"lag", cfg.lagkv.lag},
                {"retention", cfg.lagkv.retention},
                {"epsilon", cfg.lagkv.epsilon}};
  j["run"] = {{"chunks_per_step", cfg.run.chunks_per_step},
              {"precision", cfg.run.precision},
              {"seed", cfg.run.seed},
              {"seq_len", cfg.run.seq_len},
              {"threads", cfg.run.threads}};
  j["train"] = {{"lr", cfg.train.lr},
                {"beta1", cfg.train.beta1},
                {"beta2", cfg.train.beta2},
                {"weight_decay", cfg.train.weight_decay},
                {"adam_eps", cfg.train.adam_eps},
                {"steps", cfg.train.steps},
                {"batch", cfg.train.batch},
                {"seed", cfg.train.seed}};
  j["task"] = {{"kind", cfg.task.kind}, {"needle_len", cfg.task.needle_len}};
  j["equivalence"] = {{"seeds", cfg.equivalence.seeds},
                      {"decode_tokens", cfg.equivalence.decode_tokens}};
  j["bench"] = {{"lengths", cfg.bench.lengths}};
  j["mode"] = cfg.mode;
  j["out_dir"] = cfg.out_dir;
  return j;
}

}  // namespace lrsa::config
