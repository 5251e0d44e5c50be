#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lrsa/attention.hpp"
#include "lrsa/errors.hpp"
#include "lrsa/kv_cache.hpp"
#include "lrsa/model.hpp"
#include "lrsa/tensor.hpp"

// Chunk-by-chunk Attn-Fill over the physically compacted cache. Each step
// ingests chunks_per_step chunks: their queries attend the condensed cache
// plus the in-flight batch under the visibility rule, the new K/V land in
// the cache, and every chunk that gained a complete successor is compressed.
// The hidden states are identical (bitwise in f64) to the masked full-cache
// path for any chunks_per_step.

namespace lrsa::engine {

template <typename T>
struct PrefillState {
  model::ModelConfig cfg;
  lagkv::LagkvParams params;
  kv::SegmentedKvCache<T> cache;
  i64 chunks_per_step = 2;
  i64 next_position = 0;
  bool prefill_done = false;
  attn::OpCounter counter;

  PrefillState(const model::ModelConfig& c, const lagkv::LagkvParams& p, i64 cps)
      : cfg(c), params(p), cache(c.layers, c.kv_heads, c.head_dim, p), chunks_per_step(cps) {
    if (cps < 1) throw ConfigError("chunks_per_step must be >= 1, got " + std::to_string(cps));
  }

  // Score entries normalized per (layer, query head); retention keeps k
  // uniform across heads, so the raw counter divides exactly.
  std::uint64_t score_entries_per_head() const {
    return counter.score_entries /
           static_cast<std::uint64_t>(cfg.layers * cfg.heads);
  }
};

namespace detail {

// Runs one batch of blocks through every layer, returning the final-norm
// hidden rows. Appends the batch K/V per layer after that layer's attends,
// then compresses whatever gained a complete successor.
template <typename T>
Tensor<T> process_batch(PrefillState<T>& st, const model::ModelParams<T>& m,
                        const std::vector<std::int32_t>& tokens, i64 bs, i64 be, i64 stream_len,
                        const std::vector<std::pair<i64, i64>>& batch_blocks,
                        const kv::ScoreRecorder<T>* recorder) {
  NoGradGuard ng;
  const model::ModelConfig& cfg = st.cfg;
  const lagkv::LagkvParams& params = st.params;
  const i64 dh = cfg.head_dim;
  const i64 rows = be - bs;
  std::vector<i64> positions(static_cast<std::size_t>(rows));
  for (i64 i = 0; i < rows; ++i) positions[static_cast<std::size_t>(i)] = bs + i;
  std::vector<std::int32_t> slice(tokens.begin() + bs, tokens.begin() + be);

  Tensor<T> x = embed_rows(m.embedding, slice);
  for (i64 l = 0; l < cfg.layers; ++l) {
    const model::BlockParams<T>& B = m.blocks[static_cast<std::size_t>(l)];
    auto& cacheL = st.cache.layer(l);
    Tensor<T> xn = rmsnorm(x, B.attn_norm, static_cast<T>(cfg.norm_eps));
    Tensor<T> q_all = matmul(xn, B.wq);
    Tensor<T> k_all = matmul(xn, B.wk);
    Tensor<T> v_all = matmul(xn, B.wv);
    std::vector<Tensor<T>> k_heads, v_heads, q_heads;
    for (i64 h = 0; h < cfg.kv_heads; ++h) {
      k_heads.push_back(rope(slice_cols(k_all, h * dh, (h + 1) * dh), positions, cfg.rope_base));
      v_heads.push_back(slice_cols(v_all, h * dh, (h + 1) * dh));
    }
    for (i64 h = 0; h < cfg.heads; ++h)
      q_heads.push_back(rope(slice_cols(q_all, h * dh, (h + 1) * dh), positions, cfg.rope_base));

    // Context per KV head: cache view (pre-append) followed by batch rows.
    std::vector<Tensor<T>> ctx_k(static_cast<std::size_t>(cfg.kv_heads));
    std::vector<Tensor<T>> ctx_v(static_cast<std::size_t>(cfg.kv_heads));
    std::vector<std::vector<i64>> ctx_pos(static_cast<std::size_t>(cfg.kv_heads));
    i64 cache_rows = 0;
    for (i64 h = 0; h < cfg.kv_heads; ++h) {
      auto view = cacheL.head_view(h);
      cache_rows = static_cast<i64>(view.positions.size());
      ctx_k[static_cast<std::size_t>(h)] = concat_rows<T>({view.k, k_heads[static_cast<std::size_t>(h)]});
      ctx_v[static_cast<std::size_t>(h)] = concat_rows<T>({view.v, v_heads[static_cast<std::size_t>(h)]});
      auto& cp = ctx_pos[static_cast<std::size_t>(h)];
      cp = view.positions;
      cp.insert(cp.end(), positions.begin(), positions.end());
    }

    // Retained-prefix positions per head, extended in-batch as chunks gain
    // complete successors. The cache window's reference is the first batch
    // chunk; later references live in the batch itself.
    std::vector<std::vector<i64>> prefix(static_cast<std::size_t>(cfg.kv_heads));
    for (i64 h = 0; h < cfg.kv_heads; ++h)
      prefix[static_cast<std::size_t>(h)] = cacheL.prefix_positions(h);
    i64 computed_through = cacheL.chunks_compressed();
    const i64 window_chunk = cacheL.window_chunk_index();
    const bool window_full = cacheL.window_len() == params.lag;

    auto chunk_rows = [&](i64 p, const Tensor<T>& cache_side,
                          const Tensor<T>& batch_side) -> Tensor<T> {
      // Rows of chunk p: the cache window (last cache rows) or batch rows.
      const i64 cs = params.sink + (p - 1) * params.lag;
      if (window_full && p == window_chunk)
        return model::detail::rows_detached(cache_side, cache_rows - params.lag, cache_rows);
      return model::detail::rows_detached(batch_side, cs - bs, cs - bs + params.lag);
    };
    auto ensure_sets = [&](i64 upto) {
      while (computed_through < upto) {
        const i64 p = computed_through + 1;
        for (i64 h = 0; h < cfg.kv_heads; ++h) {
          const auto hs = static_cast<std::size_t>(h);
          Tensor<T> kp = chunk_rows(p, ctx_k[hs], k_heads[hs]);
          Tensor<T> vp = chunk_rows(p, ctx_v[hs], v_heads[hs]);
          const i64 rs = params.sink + p * params.lag;  // reference = chunk p+1, batch rows
          Tensor<T> kn = model::detail::rows_detached(k_heads[hs], rs - bs, rs - bs + params.lag);
          Tensor<T> vn = model::detail::rows_detached(v_heads[hs], rs - bs, rs - bs + params.lag);
          std::vector<T> scores = lagkv::score_chunk(kp, vp, kn, vn, params);
          std::vector<i64> idx = lagkv::select_topk(scores, params.retain_count());
          const i64 cs = params.sink + (p - 1) * params.lag;
          for (i64 i : idx) prefix[hs].push_back(cs + i);
        }
        ++computed_through;
      }
    };

    std::vector<std::vector<Tensor<T>>> head_chunks(static_cast<std::size_t>(cfg.heads));
    for (const auto& [qs, qe] : batch_blocks) {
      const i64 chunk_q = qs < params.sink ? 0 : (qs - params.sink) / params.lag + 1;
      ensure_sets(chunk_q - 2);
      const auto spec = attn::build_visibility(chunk_q, stream_len, prefix, params, cfg.kv_heads);
      const i64 t_eff = cache_rows + (qe - bs);
      std::vector<Tensor<T>> masks;
      for (i64 h = 0; h < cfg.kv_heads; ++h) {
        const auto& cp = ctx_pos[static_cast<std::size_t>(h)];
        std::vector<i64> keys(cp.begin(), cp.begin() + t_eff);
        masks.push_back(attn::additive_mask<T>(spec, h, keys));
      }
      for (i64 h = 0; h < cfg.heads; ++h) {
        const i64 kvh = cfg.attn().kv_head_of(h);
        const auto hs = static_cast<std::size_t>(h);
        const auto ks = static_cast<std::size_t>(kvh);
        Tensor<T> qb = slice_rows(q_heads[hs], qs - bs, qe - bs);
        Tensor<T> kc = slice_rows(ctx_k[ks], 0, t_eff);
        Tensor<T> vc = slice_rows(ctx_v[ks], 0, t_eff);
        head_chunks[hs].push_back(attn::attend(qb, kc, vc, masks[ks], &st.counter));
      }
    }
    std::vector<Tensor<T>> head_outs;
    for (i64 h = 0; h < cfg.heads; ++h)
      head_outs.push_back(concat_rows(head_chunks[static_cast<std::size_t>(h)]));
    x = add(x, matmul(concat_cols(head_outs), B.wo));
    Tensor<T> xm = rmsnorm(x, B.mlp_norm, static_cast<T>(cfg.norm_eps));
    x = add(x, matmul(silu_gate(matmul(xm, B.w_gate), matmul(xm, B.w_up)), B.w_down));

    cacheL.append_tokens(k_heads, v_heads, positions);
    cacheL.compress_ready(recorder);
  }
  return rmsnorm(x, m.final_norm, static_cast<T>(cfg.norm_eps));
}

}  // namespace detail

// Ingests the whole token stream: sink first, then chunks_per_step chunks at
// a time. Returns the final-norm hidden states for every position.
template <typename T>
Tensor<T> prefill(PrefillState<T>& st, const std::vector<std::int32_t>& tokens,
                  const model::ModelParams<T>& m, const kv::ScoreRecorder<T>* recorder = nullptr) {
  const i64 n = static_cast<i64>(tokens.size());
  if (st.next_position != 0)
    throw SequencingError("prefill: state already holds " + std::to_string(st.next_position) +
                          " tokens");
  if (n < std::max<i64>(st.params.sink, 1))
    throw ShapeError("prefill: need at least " + std::to_string(std::max<i64>(st.params.sink, 1)) +
                     " tokens, got " + std::to_string(n));
  const auto blocks = attn::chunk_blocks(n, st.params.sink, st.params.lag);
  Tensor<T> hidden = Tensor<T>::zeros({n, st.cfg.d_model});

  std::size_t i = 0;
  while (i < blocks.size()) {
    std::size_t j = i;
    if (blocks[i].first < st.params.sink) {
      j = i + 1;  // the sink ingests alone
    } else {
      while (j < blocks.size() && static_cast<i64>(j - i) < st.chunks_per_step) ++j;
    }
    const i64 bs = blocks[i].first;
    const i64 be = blocks[j - 1].second;
    std::vector<std::pair<i64, i64>> batch(blocks.begin() + i, blocks.begin() + j);
    Tensor<T> out = detail::process_batch(st, m, tokens, bs, be, n, batch, recorder);
    for (i64 r = 0; r < be - bs; ++r)
      for (i64 c = 0; c < st.cfg.d_model; ++c) hidden.at(bs + r, c) = out.at(r, c);
    st.next_position = be;
    i = j;
  }
  st.prefill_done = true;
  return hidden;
}

// Appends one token, attends the condensed cache with a zero mask (the cache
// is already compacted, so no masking is needed), and compresses at chunk
// boundaries. Returns the logits row for the new position.
template <typename T>
Tensor<T> decode_step(PrefillState<T>& st, std::int32_t token, const model::ModelParams<T>& m,
                      const kv::ScoreRecorder<T>* recorder = nullptr) {
  if (!st.prefill_done) throw SequencingError("decode_step: prefill has not completed");
  NoGradGuard ng;
  const model::ModelConfig& cfg = st.cfg;
  const i64 dh = cfg.head_dim;
  const std::vector<i64> positions{st.next_position};
  Tensor<T> x = embed_rows(m.embedding, {token});
  for (i64 l = 0; l < cfg.layers; ++l) {
    const model::BlockParams<T>& B = m.blocks[static_cast<std::size_t>(l)];
    auto& cacheL = st.cache.layer(l);
    Tensor<T> xn = rmsnorm(x, B.attn_norm, static_cast<T>(cfg.norm_eps));
    Tensor<T> q_all = matmul(xn, B.wq);
    Tensor<T> k_all = matmul(xn, B.wk);
    Tensor<T> v_all = matmul(xn, B.wv);
    std::vector<Tensor<T>> k_heads, v_heads;
    for (i64 h = 0; h < cfg.kv_heads; ++h) {
      k_heads.push_back(rope(slice_cols(k_all, h * dh, (h + 1) * dh), positions, cfg.rope_base));
      v_heads.push_back(slice_cols(v_all, h * dh, (h + 1) * dh));
    }
    std::vector<Tensor<T>> head_outs;
    for (i64 h = 0; h < cfg.heads; ++h) {
      const i64 kvh = cfg.attn().kv_head_of(h);
      const auto ks = static_cast<std::size_t>(kvh);
      auto view = cacheL.head_view(kvh);
      Tensor<T> kc = concat_rows<T>({view.k, k_heads[ks]});
      Tensor<T> vc = concat_rows<T>({view.v, v_heads[ks]});
      Tensor<T> qb = rope(slice_cols(q_all, h * dh, (h + 1) * dh), positions, cfg.rope_base);
      Tensor<T> zero_mask = Tensor<T>::zeros({1, kc.shape[0]});
      head_outs.push_back(attn::attend(qb, kc, vc, zero_mask, &st.counter));
    }
    x = add(x, matmul(concat_cols(head_outs), B.wo));
    Tensor<T> xm = rmsnorm(x, B.mlp_norm, static_cast<T>(cfg.norm_eps));
    x = add(x, matmul(silu_gate(matmul(xm, B.w_gate), matmul(xm, B.w_up)), B.w_down));
    cacheL.append_tokens(k_heads, v_heads, positions);
    cacheL.compress_ready(recorder);
  }
  st.next_position += 1;
  Tensor<T> h_final = rmsnorm(x, m.final_norm, static_cast<T>(cfg.norm_eps));
  return matmul_nt(h_final, m.embedding);
}

}  // namespace lrsa::engine
