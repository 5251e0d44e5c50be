#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lrsa/checkpoint.hpp"
#include "lrsa/config.hpp"
#include "lrsa/log.hpp"
#include "lrsa/model.hpp"
#include "lrsa/parallel.hpp"
#include "lrsa/prefill.hpp"
#include "lrsa/tasks.hpp"
#include "lrsa/train.hpp"

// Command bodies shared by the CLI and the acceptance suite. Reports carry
// no wall-clock values, so a re-run with the same seed reproduces them
// byte for byte; timings go to the human-readable table instead.

namespace lrsa::harness {

using json = nlohmann::ordered_json;

template <typename T>
constexpr double equivalence_tolerance() {
  return sizeof(T) == 8 ? 1e-12 : 1e-5;
}

inline Rng seed_rng(std::uint64_t base, i64 index) {
  return Rng(base + 0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(index + 1));
}

template <typename T>
std::pair<model::ModelParams<T>, std::vector<std::int32_t>> model_and_tokens(
    const config::RunConfig& cfg, Rng& rng, i64 seq_len) {
  auto m = model::ModelParams<T>::init(cfg.model, rng);
  auto tokens = random_tokens(rng, seq_len, cfg.model.vocab);
  return {std::move(m), std::move(tokens)};
}

// Engine-path logits for every prefill position.
template <typename T>
Tensor<T> engine_prefill_logits(engine::PrefillState<T>& st, const model::ModelParams<T>& m,
                                const std::vector<std::int32_t>& tokens,
                                const kv::ScoreRecorder<T>* recorder = nullptr) {
  Tensor<T> hidden = engine::prefill(st, tokens, m, recorder);
  NoGradGuard ng;
  return matmul_nt(hidden.detached(), m.embedding.detached());
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double mx = 0.0;
  for (i64 i = 0; i < a.numel(); ++i)
    mx = std::max(mx, std::abs(static_cast<double>(a.at(i)) - static_cast<double>(b.at(i))));
  return mx;
}

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape == b.shape &&
         std::memcmp(a.ptr(), b.ptr(), static_cast<std::size_t>(a.numel()) * sizeof(T)) == 0;
}

// ---------------------------------------------------------------------------
// equivalence

template <typename T>
json run_equivalence_t(const config::RunConfig& cfg) {
  const double tol = equivalence_tolerance<T>();
  const i64 seeds = cfg.equivalence.seeds;
  const i64 n = cfg.run.seq_len;
  std::vector<double> diffs(static_cast<std::size_t>(seeds), 0.0);
  std::vector<double> decode_diffs(static_cast<std::size_t>(seeds), 0.0);

#pragma omp parallel for schedule(dynamic) num_threads(kernel_threads())
  for (i64 s = 0; s < seeds; ++s) {
    NoGradGuard ng;
    Rng rng = seed_rng(cfg.run.seed, s);
    auto [m, tokens] = model_and_tokens<T>(cfg, rng, n);
    Tensor<T> oracle =
        model::forward(m, tokens, model::AttnMode::kLrsa, cfg.lagkv);
    engine::PrefillState<T> st(cfg.model, cfg.lagkv, cfg.run.chunks_per_step);
    Tensor<T> engine_logits = engine_prefill_logits(st, m, tokens);
    diffs[static_cast<std::size_t>(s)] = max_abs_diff(oracle, engine_logits);

    std::vector<std::int32_t> extended = tokens;
    double ddiff = 0.0;
    for (i64 j = 0; j < cfg.equivalence.decode_tokens; ++j) {
      const auto tok = static_cast<std::int32_t>(rng.uniform_int(cfg.model.vocab));
      Tensor<T> engine_row = engine::decode_step(st, tok, m);
      extended.push_back(tok);
      Tensor<T> oracle_all = model::forward(m, extended, model::AttnMode::kLrsa, cfg.lagkv);
      Tensor<T> oracle_row = slice_rows(oracle_all.detached(), oracle_all.shape[0] - 1,
                                        oracle_all.shape[0]);
      ddiff = std::max(ddiff, max_abs_diff(engine_row, oracle_row));
    }
    decode_diffs[static_cast<std::size_t>(s)] = ddiff;
  }
  double max_diff = 0.0, decode_max = 0.0;
  for (double d : diffs) max_diff = std::max(max_diff, d);
  for (double d : decode_diffs) decode_max = std::max(decode_max, d);

  // Batching invariance: chunks_per_step in {1,2,4} must agree bitwise.
  const i64 check_seeds = std::min<i64>(seeds, 20);
  bool batching_bitwise = true;
  for (i64 s = 0; s < check_seeds && batching_bitwise; ++s) {
    NoGradGuard ng;
    Rng rng = seed_rng(cfg.run.seed, s);
    auto [m, tokens] = model_and_tokens<T>(cfg, rng, n);
    Tensor<T> h1, h2, h4;
    {
      engine::PrefillState<T> st(cfg.model, cfg.lagkv, 1);
      h1 = engine::prefill(st, tokens, m);
    }
    {
      engine::PrefillState<T> st(cfg.model, cfg.lagkv, 2);
      h2 = engine::prefill(st, tokens, m);
    }
    {
      engine::PrefillState<T> st(cfg.model, cfg.lagkv, 4);
      h4 = engine::prefill(st, tokens, m);
    }
    batching_bitwise = bitwise_equal(h1, h2) && bitwise_equal(h1, h4);
  }

  // Reduction: r=1 degenerates to plain causal attention, bitwise; and a
  // single-chunk input (n <= S+L) has nothing to compress in either mode.
  bool r1_exact = true, single_chunk_exact = true;
  lagkv::LagkvParams r1 = cfg.lagkv;
  r1.retention = 1.0;
  for (i64 s = 0; s < check_seeds && (r1_exact && single_chunk_exact); ++s) {
    NoGradGuard ng;
    Rng rng = seed_rng(cfg.run.seed, s);
    auto [m, tokens] = model_and_tokens<T>(cfg, rng, n);
    Tensor<T> vanilla = model::forward(m, tokens, model::AttnMode::kVanilla, cfg.lagkv);
    Tensor<T> lrsa_r1 = model::forward(m, tokens, model::AttnMode::kLrsa, r1);
    r1_exact = bitwise_equal(vanilla, lrsa_r1);
    engine::PrefillState<T> st(cfg.model, r1, cfg.run.chunks_per_step);
    Tensor<T> engine_r1 = engine_prefill_logits(st, m, tokens);
    r1_exact = r1_exact && bitwise_equal(vanilla, engine_r1);

    std::vector<std::int32_t> short_tokens(
        tokens.begin(), tokens.begin() + std::min<i64>(n, cfg.lagkv.sink + cfg.lagkv.lag));
    Tensor<T> v_short = model::forward(m, short_tokens, model::AttnMode::kVanilla, cfg.lagkv);
    Tensor<T> l_short = model::forward(m, short_tokens, model::AttnMode::kLrsa, cfg.lagkv);
    single_chunk_exact = bitwise_equal(v_short, l_short);
  }

  // Snapshot round-trip through the binary cache format.
  bool snapshot_ok = true;
  {
    NoGradGuard ng;
    Rng rng = seed_rng(cfg.run.seed, 0);
    auto [m, tokens] = model_and_tokens<T>(cfg, rng, n);
    engine::PrefillState<T> st(cfg.model, cfg.lagkv, cfg.run.chunks_per_step);
    (void)engine::prefill(st, tokens, m);
    std::stringstream buf;
    st.cache.save(buf);
    auto restored = kv::SegmentedKvCache<T>::load(buf);
    for (i64 l = 0; l < cfg.model.layers && snapshot_ok; ++l)
      for (i64 h = 0; h < cfg.model.kv_heads && snapshot_ok; ++h) {
        auto a = st.cache.layer(l).head_view(h);
        auto b = restored.layer(l).head_view(h);
        snapshot_ok = bitwise_equal(a.k, b.k) && bitwise_equal(a.v, b.v) &&
                      a.positions == b.positions;
      }
  }

  const bool pass = max_diff <= tol && decode_max <= tol && batching_bitwise && r1_exact &&
                    single_chunk_exact && snapshot_ok;
  json report;
  report["precision"] = cfg.run.precision;
  report["seeds"] = seeds;
  report["seq_len"] = n;
  report["tolerance"] = tol;
  report["max_abs_diff"] = max_diff;
  report["decode_max_abs_diff"] = decode_max;
  report["batching_bitwise"] = batching_bitwise;
  report["batching_seeds"] = check_seeds;
  report["r1_exact"] = r1_exact;
  report["single_chunk_exact"] = single_chunk_exact;
  report["snapshot_roundtrip"] = snapshot_ok;
  report["pass"] = pass;
  return report;
}

inline json run_equivalence(const config::RunConfig& cfg) {
  set_max_threads(static_cast<int>(cfg.run.threads));
  return cfg.run.precision == "f32" ? run_equivalence_t<float>(cfg)
                                    : run_equivalence_t<double>(cfg);
}

// ---------------------------------------------------------------------------
// bench

// Closed-form visible score entries per (layer, query head): sink triangle,
// then per chunk q: len*(S + window + retained) + causal-self triangle.
inline std::uint64_t lrsa_entry_bound(i64 n, const lagkv::LagkvParams& p) {
  const i64 s = std::min(p.sink, n);
  std::uint64_t total = static_cast<std::uint64_t>(s) * (s + 1) / 2;
  const i64 k = p.retain_count();
  for (i64 q = 1;; ++q) {
    const i64 qs = p.sink + (q - 1) * p.lag;
    if (qs >= n) break;
    const i64 len = std::min(p.lag, n - qs);
    i64 ctx = p.sink;
    if (q >= 2) ctx += p.lag;
    if (q >= 3) ctx += (q - 2) * k;
    total += static_cast<std::uint64_t>(len) * ctx +
             static_cast<std::uint64_t>(len) * (len + 1) / 2;
  }
  return total;
}

inline std::uint64_t causal_entries(i64 n) {
  return static_cast<std::uint64_t>(n) * (n + 1) / 2;
}

template <typename T>
std::pair<json, std::string> run_bench_t(const config::RunConfig& cfg) {
  json report;
  report["precision"] = cfg.run.precision;
  report["retention"] = cfg.lagkv.retention;
  json rows = json::array();
  std::ostringstream table;
  table << "    n   lrsa entries/head   full entries/head   lrsa ms   full ms\n";
  bool all_match = true, all_below = true;
  std::vector<std::pair<i64, std::uint64_t>> measured;
  for (i64 n : cfg.bench.lengths) {
    NoGradGuard ng;
    Rng rng = seed_rng(cfg.run.seed, 1000 + n);
    auto [m, tokens] = model_and_tokens<T>(cfg, rng, n);

    const auto t0 = std::chrono::steady_clock::now();
    engine::PrefillState<T> st(cfg.model, cfg.lagkv, cfg.run.chunks_per_step);
    (void)engine::prefill(st, tokens, m);
    const auto t1 = std::chrono::steady_clock::now();
    lagkv::LagkvParams full = cfg.lagkv;
    full.retention = 1.0;
    engine::PrefillState<T> st_full(cfg.model, full, cfg.run.chunks_per_step);
    (void)engine::prefill(st_full, tokens, m);
    const auto t2 = std::chrono::steady_clock::now();

    const std::uint64_t lrsa_entries = st.score_entries_per_head();
    const std::uint64_t full_entries = st_full.score_entries_per_head();
    const std::uint64_t bound = lrsa_entry_bound(n, cfg.lagkv);
    const std::uint64_t causal = causal_entries(n);
    const bool matches = lrsa_entries == bound;
    // Strictly below full causal once anything is compressible; equal before.
    const bool compressible =
        cfg.lagkv.retention < 1.0 && cfg.lagkv.retain_count() < cfg.lagkv.lag &&
        n >= cfg.lagkv.sink + 2 * cfg.lagkv.lag;
    const bool below = compressible ? lrsa_entries < causal : lrsa_entries <= causal;
    all_match = all_match && matches;
    all_below = all_below && below && full_entries == causal;
    measured.emplace_back(n, lrsa_entries);
    rows.push_back({{"n", n},
                    {"lrsa_entries_per_head", lrsa_entries},
                    {"full_entries_per_head", full_entries},
                    {"bound_per_head", bound},
                    {"causal_per_head", causal},
                    {"matches_bound", matches},
                    {"below_full", below}});
    const double ms1 = std::chrono::duration<double, std::milli>(t1 - t0).count();
    const double ms2 = std::chrono::duration<double, std::milli>(t2 - t1).count();
    char line[160];
    std::snprintf(line, sizeof(line), "%5lld %19llu %19llu %9.2f %9.2f\n",
                  static_cast<long long>(n), static_cast<unsigned long long>(lrsa_entries),
                  static_cast<unsigned long long>(full_entries), ms1, ms2);
    table << line;
  }
  // Scaling: when the length list contains an (n, 2n) pair, doubling the
  // input must grow LRSA entries by strictly less than the causal ratio.
  json scaling = json::array();
  for (const auto& [n, e] : measured)
    for (const auto& [n2, e2] : measured)
      if (n2 == 2 * n) {
        const double lrsa_ratio = static_cast<double>(e2) / static_cast<double>(e);
        const double causal_ratio =
            static_cast<double>(causal_entries(n2)) / static_cast<double>(causal_entries(n));
        scaling.push_back({{"n", n},
                           {"n2", n2},
                           {"lrsa_ratio", lrsa_ratio},
                           {"causal_ratio", causal_ratio},
                           {"sublinear_vs_causal", lrsa_ratio < causal_ratio}});
      }
  report["rows"] = rows;
  report["scaling"] = scaling;
  report["all_match_bound"] = all_match;
  report["all_below_full"] = all_below;
  report["pass"] = all_match && all_below;
  return {report, table.str()};
}

inline std::pair<json, std::string> run_bench(const config::RunConfig& cfg) {
  set_max_threads(static_cast<int>(cfg.run.threads));
  return cfg.run.precision == "f32" ? run_bench_t<float>(cfg) : run_bench_t<double>(cfg);
}

// ---------------------------------------------------------------------------
// train

struct TrainOutput {
  std::string csv;
  json summary;
  train::TrainResult result;
};

template <typename T>
TrainOutput run_train_t(const config::RunConfig& cfg) {
  Rng model_rng(cfg.run.seed);
  auto m = model::ModelParams<T>::init(cfg.model, model_rng);
  const model::AttnMode mode = model::mode_from_string(cfg.mode);

  auto sampler = [&cfg](Rng& rng) {
    if (cfg.task.kind == "needle")
      return tasks::gen_needle_task(rng, cfg.run.seq_len, cfg.model.vocab, cfg.task.needle_len);
    return tasks::gen_copy_task(rng, cfg.run.seq_len, cfg.model.vocab);
  };
  train::TrainResult result = train::train(m, sampler, cfg.train, mode, cfg.lagkv);

  std::ostringstream csv;
  csv << "step,lr,loss\n";
  char line[96];
  for (const auto& r : result.curve) {
    std::snprintf(line, sizeof(line), "%lld,%.17g,%.17g\n", static_cast<long long>(r.step), r.lr,
                  r.loss);
    csv << line;
  }
  json summary;
  summary["mode"] = cfg.mode;
  summary["task"] = cfg.task.kind;
  summary["steps_run"] = static_cast<i64>(result.curve.size());
  summary["diverged"] = result.diverged;
  if (result.curve.empty())
    summary["final_loss"] = nullptr;
  else
    summary["final_loss"] = result.final_loss;
  summary["config"] = config::to_json(cfg);
  return {csv.str(), summary, std::move(result)};
}

inline TrainOutput run_train(const config::RunConfig& cfg) {
  set_max_threads(static_cast<int>(cfg.run.threads));
  return cfg.run.precision == "f32" ? run_train_t<float>(cfg) : run_train_t<double>(cfg);
}

// ---------------------------------------------------------------------------
// score dump

template <typename T>
json run_score_dump_t(const config::RunConfig& cfg, const std::vector<std::int32_t>* tokens_in) {
  Rng rng(cfg.run.seed);
  auto [m, generated] = model_and_tokens<T>(cfg, rng, cfg.run.seq_len);
  const std::vector<std::int32_t>& tokens = tokens_in ? *tokens_in : generated;
  const i64 min_len = cfg.lagkv.sink + 2 * cfg.lagkv.lag;
  if (static_cast<i64>(tokens.size()) < min_len)
    throw ConfigError("score-dump: need at least sink+2*lag = " + std::to_string(min_len) +
                      " tokens for one compressible chunk, got " +
                      std::to_string(tokens.size()));

  json events = json::array();
  kv::ScoreRecorder<T> recorder = [&events](const kv::ScoreEvent<T>& e) {
    for (std::size_t h = 0; h < e.head_scores.size(); ++h) {
      json entry;
      entry["layer"] = e.layer;
      entry["head"] = static_cast<i64>(h);
      entry["chunk_index"] = e.chunk_index;
      entry["scores"] = e.head_scores[h];
      entry["retained"] = e.head_retained[h];
      events.push_back(entry);
    }
  };
  engine::PrefillState<T> st(cfg.model, cfg.lagkv, cfg.run.chunks_per_step);
  (void)engine::prefill(st, tokens, m, &recorder);

  json report;
  report["precision"] = cfg.run.precision;
  report["tokens"] = static_cast<i64>(tokens.size());
  report["retain_count"] = cfg.lagkv.retain_count();
  report["events"] = events;
  return report;
}

inline json run_score_dump(const config::RunConfig& cfg,
                           const std::vector<std::int32_t>* tokens = nullptr) {
  set_max_threads(static_cast<int>(cfg.run.threads));
  return cfg.run.precision == "f32" ? run_score_dump_t<float>(cfg, tokens)
                                    : run_score_dump_t<double>(cfg, tokens);
}

// ---------------------------------------------------------------------------
// task generation

inline json gen_task_json(const config::RunConfig& cfg) {
  Rng rng(cfg.run.seed);
  tasks::TaskInstance t =
      cfg.task.kind == "needle"
          ? tasks::gen_needle_task(rng, cfg.run.seq_len, cfg.model.vocab, cfg.task.needle_len)
          : tasks::gen_copy_task(rng, cfg.run.seq_len, cfg.model.vocab);
  json j;
  j["kind"] = t.kind;
  j["tokens"] = t.tokens;
  j["targets"] = t.targets;
  j["needle_pos"] = t.needle_pos;
  j["needle_len"] = t.needle_len;
  return j;
}

}  // namespace lrsa::harness
