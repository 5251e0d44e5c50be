#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "lrsa/model.hpp"
#include "lrsa/prefill.hpp"
#include "oracles.hpp"

// The engine's physically compacted path against the masked full-cache path,
// plus the reductions and instrumentation the visibility rule promises.

using lrsa::i64;
using lrsa::Rng;
using lrsa::Tensor;
using lrsa::model::AttnMode;
using lrsa::model::ModelConfig;
using lrsa::model::ModelParams;

namespace {

ModelConfig tiny_config(i64 layers = 2, i64 heads = 4, i64 kv_heads = 4) {
  ModelConfig cfg;
  cfg.vocab = 48;
  cfg.d_model = 32;
  cfg.heads = heads;
  cfg.kv_heads = kv_heads;
  cfg.head_dim = 32 / heads;
  cfg.layers = layers;
  cfg.mlp_ratio = 2;
  return cfg;
}

lrsa::lagkv::LagkvParams tiny_params(i64 sink = 4, i64 lag = 8, double r = 0.5) {
  lrsa::lagkv::LagkvParams p;
  p.sink = sink;
  p.lag = lag;
  p.retention = r;
  return p;
}

template <typename T>
Tensor<T> engine_logits(lrsa::engine::PrefillState<T>& st, const ModelParams<T>& m,
                        const std::vector<std::int32_t>& tokens) {
  Tensor<T> hidden = lrsa::engine::prefill(st, tokens, m);
  lrsa::NoGradGuard ng;
  return lrsa::matmul_nt(hidden.detached(), m.embedding.detached());
}

double max_diff(const Tensor<double>& a, const Tensor<double>& b) {
  REQUIRE(a.shape == b.shape);
  double mx = 0.0;
  for (i64 i = 0; i < a.numel(); ++i) mx = std::max(mx, std::abs(a.at(i) - b.at(i)));
  return mx;
}

}  // namespace

TEST_CASE("single chunk input: LRSA forward equals vanilla causal bitwise") {
  Rng rng(1);
  auto cfg = tiny_config();
  auto p = tiny_params();
  auto m = ModelParams<double>::init(cfg, rng);
  auto tokens = lrsa::random_tokens(rng, p.sink + p.lag, cfg.vocab);
  lrsa::NoGradGuard ng;
  auto vanilla = lrsa::model::forward(m, tokens, AttnMode::kVanilla, p);
  auto sparse = lrsa::model::forward(m, tokens, AttnMode::kLrsa, p);
  CHECK(*vanilla.data == *sparse.data);
}

TEST_CASE("r=1: LRSA equals vanilla for long inputs, engine included") {
  Rng rng(2);
  auto cfg = tiny_config();
  auto p = tiny_params(4, 8, 1.0);
  auto m = ModelParams<double>::init(cfg, rng);
  auto tokens = lrsa::random_tokens(rng, 4 + 8 * 5 + 3, cfg.vocab);
  lrsa::NoGradGuard ng;
  auto vanilla = lrsa::model::forward(m, tokens, AttnMode::kVanilla, p);
  auto sparse = lrsa::model::forward(m, tokens, AttnMode::kLrsa, p);
  CHECK(*vanilla.data == *sparse.data);
  lrsa::engine::PrefillState<double> st(cfg, p, 2);
  auto engine = engine_logits(st, m, tokens);
  CHECK(*vanilla.data == *engine.data);
}

TEST_CASE("condensation equivalence: compacted cache matches masked full attention") {
  for (std::uint64_t seed : {3u, 4u, 5u}) {
    Rng rng(seed);
    auto cfg = tiny_config();
    auto p = tiny_params();
    auto m = ModelParams<double>::init(cfg, rng);
    auto tokens = lrsa::random_tokens(rng, p.sink + 3 * p.lag, cfg.vocab);
    lrsa::NoGradGuard ng;
    auto oracle = lrsa::model::forward(m, tokens, AttnMode::kLrsa, p);
    lrsa::engine::PrefillState<double> st(cfg, p, 2);
    auto engine = engine_logits(st, m, tokens);
    CHECK(max_diff(oracle, engine) <= 1e-12);
  }
}

TEST_CASE("condensation equivalence holds with a partial tail chunk") {
  Rng rng(6);
  auto cfg = tiny_config();
  auto p = tiny_params();
  auto m = ModelParams<double>::init(cfg, rng);
  auto tokens = lrsa::random_tokens(rng, p.sink + 4 * p.lag + 3, cfg.vocab);
  lrsa::NoGradGuard ng;
  auto oracle = lrsa::model::forward(m, tokens, AttnMode::kLrsa, p);
  lrsa::engine::PrefillState<double> st(cfg, p, 3);
  auto engine = engine_logits(st, m, tokens);
  CHECK(max_diff(oracle, engine) <= 1e-12);
}

TEST_CASE("batching invariance: chunks_per_step in {1,2,4} is bitwise identical") {
  Rng rng(7);
  auto cfg = tiny_config();
  auto p = tiny_params();
  auto m = ModelParams<double>::init(cfg, rng);
  auto tokens = lrsa::random_tokens(rng, p.sink + 6 * p.lag, cfg.vocab);
  Tensor<double> hidden[3];
  int i = 0;
  for (i64 cps : {1, 2, 4}) {
    lrsa::engine::PrefillState<double> st(cfg, p, cps);
    hidden[i++] = lrsa::engine::prefill(st, tokens, m);
  }
  CHECK(*hidden[0].data == *hidden[1].data);
  CHECK(*hidden[0].data == *hidden[2].data);
}

TEST_CASE("decode: first decoded token equals the masked full-attention oracle") {
  Rng rng(8);
  auto cfg = tiny_config();
  auto p = tiny_params();
  auto m = ModelParams<double>::init(cfg, rng);
  auto tokens = lrsa::random_tokens(rng, p.sink + 3 * p.lag, cfg.vocab);
  lrsa::engine::PrefillState<double> st(cfg, p, 2);
  (void)lrsa::engine::prefill(st, tokens, m);

  std::vector<std::int32_t> extended = tokens;
  for (i64 j = 0; j < 3; ++j) {
    const auto tok = static_cast<std::int32_t>(rng.uniform_int(cfg.vocab));
    auto row = lrsa::engine::decode_step(st, tok, m);
    extended.push_back(tok);
    lrsa::NoGradGuard ng;
    auto oracle = lrsa::model::forward(m, extended, AttnMode::kLrsa, p);
    auto oracle_row =
        lrsa::slice_rows(oracle.detached(), oracle.shape[0] - 1, oracle.shape[0]);
    CHECK(max_diff(row, oracle_row) <= 1e-12);
  }
}

TEST_CASE("decode: L tokens cross exactly one chunk boundary / one compression event") {
  Rng rng(9);
  auto cfg = tiny_config(1);
  auto p = tiny_params();
  auto m = ModelParams<double>::init(cfg, rng);
  auto tokens = lrsa::random_tokens(rng, p.sink + 2 * p.lag, cfg.vocab);
  lrsa::engine::PrefillState<double> st(cfg, p, 2);
  (void)lrsa::engine::prefill(st, tokens, m);
  i64 events = 0;
  lrsa::kv::ScoreRecorder<double> rec = [&events](const lrsa::kv::ScoreEvent<double>&) {
    ++events;
  };
  for (i64 j = 0; j < p.lag; ++j)
    (void)lrsa::engine::decode_step(st, static_cast<std::int32_t>(rng.uniform_int(cfg.vocab)), m,
                                    &rec);
  CHECK(events == 1);  // one event in the single layer
}

TEST_CASE("decode: op counter grows by token_count per step") {
  Rng rng(10);
  auto cfg = tiny_config();
  auto p = tiny_params();
  auto m = ModelParams<double>::init(cfg, rng);
  auto tokens = lrsa::random_tokens(rng, p.sink + 2 * p.lag, cfg.vocab);
  lrsa::engine::PrefillState<double> st(cfg, p, 2);
  (void)lrsa::engine::prefill(st, tokens, m);
  const auto before = st.score_entries_per_head();
  (void)lrsa::engine::decode_step(st, 1, m);
  const auto after = st.score_entries_per_head();
  CHECK(after - before == static_cast<std::uint64_t>(st.cache.layer(0).token_count(0)));
}

TEST_CASE("prefill: op counter matches the closed-form visible-entry count") {
  Rng rng(11);
  auto cfg = tiny_config();
  auto p = tiny_params(4, 8, 0.5);
  auto m = ModelParams<double>::init(cfg, rng);
  const i64 n = p.sink + 5 * p.lag;
  auto tokens = lrsa::random_tokens(rng, n, cfg.vocab);
  lrsa::engine::PrefillState<double> st(cfg, p, 2);
  (void)lrsa::engine::prefill(st, tokens, m);

  const i64 k = p.retain_count();
  std::uint64_t expect = static_cast<std::uint64_t>(p.sink) * (p.sink + 1) / 2;
  for (i64 q = 1; q <= 5; ++q) {
    i64 ctx = p.sink + (q >= 2 ? p.lag : 0) + (q >= 3 ? (q - 2) * k : 0);
    expect += static_cast<std::uint64_t>(p.lag) * ctx +
              static_cast<std::uint64_t>(p.lag) * (p.lag + 1) / 2;
  }
  CHECK(st.score_entries_per_head() == expect);
  CHECK(st.score_entries_per_head() < static_cast<std::uint64_t>(n) * (n + 1) / 2);
}

TEST_CASE("causality: perturbing a token leaves earlier logits bitwise unchanged") {
  Rng rng(12);
  auto cfg = tiny_config();
  auto p = tiny_params();
  auto m = ModelParams<double>::init(cfg, rng);
  auto tokens = lrsa::random_tokens(rng, p.sink + 4 * p.lag, cfg.vocab);
  lrsa::NoGradGuard ng;
  auto base = lrsa::model::forward(m, tokens, AttnMode::kLrsa, p);
  const i64 t = p.sink + 2 * p.lag + 3;  // somewhere in chunk 3
  auto mutated = tokens;
  mutated[static_cast<std::size_t>(t)] =
      static_cast<std::int32_t>((mutated[static_cast<std::size_t>(t)] + 1) % cfg.vocab);
  auto changed = lrsa::model::forward(m, mutated, AttnMode::kLrsa, p);
  for (i64 r = 0; r < t; ++r)
    for (i64 c = 0; c < cfg.vocab; ++c) CHECK(base.at(r, c) == changed.at(r, c));
}

TEST_CASE("GQA: explicit KV-head replication reproduces the grouped model bitwise") {
  Rng rng(13);
  auto gqa_cfg = tiny_config(2, 4, 2);
  auto p = tiny_params();
  auto gqa = ModelParams<double>::init(gqa_cfg, rng);

  auto mha_cfg = gqa_cfg;
  mha_cfg.kv_heads = 4;
  Rng scratch(0);
  auto mha = ModelParams<double>::init(mha_cfg, scratch);
  // copy shared weights, duplicating each KV head across its group
  for (auto& [name, t] : mha.named_parameters()) {
    for (auto& [gname, gt] : gqa.named_parameters())
      if (gname == name && gt->shape == t->shape) *t->data = *gt->data;
  }
  const i64 dh = gqa_cfg.head_dim;
  for (i64 l = 0; l < gqa_cfg.layers; ++l) {
    for (auto pick : {0, 1}) {
      const auto& src = pick == 0 ? gqa.blocks[static_cast<std::size_t>(l)].wk
                                  : gqa.blocks[static_cast<std::size_t>(l)].wv;
      auto& dst = pick == 0 ? mha.blocks[static_cast<std::size_t>(l)].wk
                            : mha.blocks[static_cast<std::size_t>(l)].wv;
      for (i64 row = 0; row < src.shape[0]; ++row)
        for (i64 qh = 0; qh < 4; ++qh) {
          const i64 kvh = qh / 2;  // group size 2
          for (i64 c = 0; c < dh; ++c) dst.at(row, qh * dh + c) = src.at(row, kvh * dh + c);
        }
    }
  }
  auto tokens = lrsa::random_tokens(rng, p.sink + 3 * p.lag, gqa_cfg.vocab);
  lrsa::NoGradGuard ng;
  auto a = lrsa::model::forward(gqa, tokens, AttnMode::kLrsa, p);
  auto b = lrsa::model::forward(mha, tokens, AttnMode::kLrsa, p);
  CHECK(*a.data == *b.data);
}

TEST_CASE("prefill/decode sequencing errors") {
  Rng rng(14);
  auto cfg = tiny_config(1);
  auto p = tiny_params();
  auto m = ModelParams<double>::init(cfg, rng);
  lrsa::engine::PrefillState<double> st(cfg, p, 2);
  CHECK_THROWS_AS((void)lrsa::engine::decode_step(st, 0, m), lrsa::SequencingError);
  auto tokens = lrsa::random_tokens(rng, p.sink + p.lag, cfg.vocab);
  (void)lrsa::engine::prefill(st, tokens, m);
  CHECK_THROWS_AS((void)lrsa::engine::prefill(st, tokens, m), lrsa::SequencingError);
  std::vector<std::int32_t> too_short{1, 2};
  lrsa::engine::PrefillState<double> st2(cfg, p, 2);
  CHECK_THROWS_AS((void)lrsa::engine::prefill(st2, too_short, m), lrsa::ShapeError);
}

TEST_CASE("forward rejects out-of-range token ids") {
  Rng rng(15);
  auto cfg = tiny_config(1);
  auto p = tiny_params();
  auto m = ModelParams<double>::init(cfg, rng);
  std::vector<std::int32_t> tokens(static_cast<std::size_t>(p.sink + p.lag), 1);
  tokens[3] = static_cast<std::int32_t>(cfg.vocab);
  lrsa::NoGradGuard ng;
  CHECK_THROWS_AS((void)lrsa::model::forward(m, tokens, AttnMode::kVanilla, p), lrsa::IndexError);
}
