#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "lrsa/errors.hpp"
#include "lrsa/lagkv.hpp"
#include "lrsa/tensor.hpp"

// Masked attention per head plus the static visibility rule: queries of
// chunk q attend sink ∪ retained(chunks ≤ q−2) ∪ all of chunk q−1 ∪ causal
// self. The rule never reads query content, so the same mask describes both
// the additive-mask path and the physically compacted cache.

namespace lrsa::attn {

struct AttnConfig {
  i64 d_model = 64;
  i64 heads = 4;
  i64 kv_heads = 4;
  i64 head_dim = 16;
  double rope_base = 10000.0;

  i64 group_size() const { return heads / kv_heads; }
  i64 kv_head_of(i64 query_head) const { return query_head / group_size(); }

  std::vector<std::string> validate() const {
    std::vector<std::string> errs;
    if (heads < 1) errs.push_back("model.heads must be >= 1");
    if (kv_heads < 1 || heads % kv_heads != 0)
      errs.push_back("model.kv_heads must divide model.heads (" + std::to_string(heads) + " % " +
                     std::to_string(kv_heads) + " != 0)");
    if (head_dim < 2 || head_dim % 2 != 0)
      errs.push_back("model.head_dim must be even and >= 2, got " + std::to_string(head_dim));
    if (d_model != heads * head_dim)
      errs.push_back("model.d_model must equal heads*head_dim, got " + std::to_string(d_model) +
                     " != " + std::to_string(heads * head_dim));
    if (!(rope_base > 0.0)) errs.push_back("model.rope_base must be > 0");
    return errs;
  }
};

// Query-chunk boundaries: block 0 is the sink, later blocks are lag-sized
// chunks (the last may be partial). first/second of each pair are absolute
// [start, end) positions.
inline std::vector<std::pair<i64, i64>> chunk_blocks(i64 n, i64 sink, i64 lag) {
  std::vector<std::pair<i64, i64>> blocks;
  if (n <= 0) return blocks;
  const i64 s = std::min(sink, n);
  if (s > 0) blocks.emplace_back(0, s);
  for (i64 b = s; b < n; b += lag) blocks.emplace_back(b, std::min(b + lag, n));
  return blocks;
}

// Attention score-entry instrumentation. attend() adds the number of
// non-masked mask entries; per-head contributions are summed in fixed order.
struct OpCounter {
  std::uint64_t score_entries = 0;
};

// Which key positions the queries of one chunk may attend, per KV head.
struct VisibilitySpec {
  i64 chunk_index = 0;  // q: 0 = sink block, 1-based chunks after it
  i64 q_start = 0, q_end = 0;
  i64 sink_end = 0;
  i64 window_start = 0, window_end = 0;  // chunk q-1 (empty when q <= 1)
  // Per KV head: ascending absolute positions retained from chunks <= q-2.
  std::vector<std::vector<i64>> retained;

  bool visible(i64 head, i64 key_pos, i64 query_pos) const {
    if (key_pos > query_pos) return false;
    if (key_pos < sink_end) return true;
    if (key_pos >= window_start) return true;  // window chunk, own chunk
    const auto& r = retained[head];
    return std::binary_search(r.begin(), r.end(), key_pos);
  }
};

// Visibility for the queries of chunk q. `retained_prefix` holds, per KV
// head, the ascending absolute positions kept from chunks 1..q-2; it is a
// SequencingError to call this before those chunks were scored.
inline VisibilitySpec build_visibility(i64 chunk_q, i64 n_tokens,
                                       const std::vector<std::vector<i64>>& retained_prefix,
                                       const lagkv::LagkvParams& params, i64 kv_heads) {
  if (chunk_q < 0) throw SequencingError("build_visibility: negative chunk index");
  VisibilitySpec spec;
  spec.chunk_index = chunk_q;
  spec.sink_end = std::min(params.sink, n_tokens);
  if (chunk_q == 0) {
    spec.q_start = 0;
    spec.q_end = spec.sink_end;
    spec.window_start = spec.window_end = 0;
    spec.retained.assign(kv_heads, {});
    return spec;
  }
  spec.q_start = params.sink + (chunk_q - 1) * params.lag;
  spec.q_end = std::min(spec.q_start + params.lag, n_tokens);
  spec.window_start = chunk_q >= 2 ? params.sink + (chunk_q - 2) * params.lag : spec.q_start;
  spec.window_end = chunk_q >= 2 ? spec.q_start : spec.q_start;
  if (chunk_q <= 2) {
    spec.retained.assign(kv_heads, {});
    return spec;
  }
  if (static_cast<i64>(retained_prefix.size()) != kv_heads)
    throw SequencingError("build_visibility: retained positions for " +
                          std::to_string(retained_prefix.size()) + " heads, expected " +
                          std::to_string(kv_heads));
  const i64 expected = (chunk_q - 2) * params.retain_count();
  for (i64 h = 0; h < kv_heads; ++h)
    if (static_cast<i64>(retained_prefix[h].size()) != expected)
      throw SequencingError("build_visibility: chunk " + std::to_string(chunk_q) + " head " +
                            std::to_string(h) + " has " +
                            std::to_string(retained_prefix[h].size()) +
                            " retained positions, expected " + std::to_string(expected) +
                            " (Attn-Fill order violated)");
  spec.retained = retained_prefix;
  return spec;
}

// Additive {0, -inf} mask for the queries of `spec` against keys at
// `key_positions` (ascending originals, compacted or not).
template <typename T>
Tensor<T> additive_mask(const VisibilitySpec& spec, i64 head, const std::vector<i64>& key_positions) {
  constexpr T kNegInf = -std::numeric_limits<T>::infinity();
  const i64 nq = spec.q_end - spec.q_start;
  const i64 nk = static_cast<i64>(key_positions.size());
  Tensor<T> mask = Tensor<T>::zeros({nq, nk});
  for (i64 r = 0; r < nq; ++r) {
    const i64 qpos = spec.q_start + r;
    for (i64 c = 0; c < nk; ++c)
      if (!spec.visible(head, key_positions[c], qpos)) mask.at(r, c) = kNegInf;
  }
  return mask;
}

// Plain causal mask for query positions vs key positions.
template <typename T>
Tensor<T> causal_mask(i64 q_start, i64 q_len, const std::vector<i64>& key_positions) {
  constexpr T kNegInf = -std::numeric_limits<T>::infinity();
  const i64 nk = static_cast<i64>(key_positions.size());
  Tensor<T> mask = Tensor<T>::zeros({q_len, nk});
  for (i64 r = 0; r < q_len; ++r)
    for (i64 c = 0; c < nk; ++c)
      if (key_positions[c] > q_start + r) mask.at(r, c) = kNegInf;
  return mask;
}

// Rotary encoding with the standard (2j, 2j+1) pairing.
template <typename T>
Tensor<T> rope_apply(const Tensor<T>& x, const std::vector<i64>& positions, double base) {
  if (x.rank() != 2 || x.shape[1] % 2 != 0)
    throw ConfigError("rope_apply: head_dim must be even, got " + shape_str(x.shape));
  return rope(x, positions, base);
}

// softmax(Q K^T / sqrt(d_h) + mask) V for one head. Mask entries are 0 or
// -inf; a fully masked row raises DegenerateRowError from the softmax.
// Differentiable through Q, K, V; the mask is constant.
template <typename T>
Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                 const Tensor<T>& mask, OpCounter* counter = nullptr) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.shape[1] != k.shape[1] ||
      k.shape != v.shape)
    throw ShapeError("attend: shapes " + shape_str(q.shape) + ", " + shape_str(k.shape) + ", " +
                     shape_str(v.shape) + " inconsistent");
  if (mask.shape != Shape{q.shape[0], k.shape[0]})
    throw ShapeError("attend: mask " + shape_str(mask.shape) + " does not match [" +
                     std::to_string(q.shape[0]) + "," + std::to_string(k.shape[0]) + "]");
  if (counter) {
    constexpr T kNegInf = -std::numeric_limits<T>::infinity();
    std::uint64_t visible = 0;
    const i64 n = mask.numel();
    for (i64 i = 0; i < n; ++i)
      if (mask.at(i) != kNegInf) ++visible;
    counter->score_entries += visible;
  }
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(q.shape[1]));
  Tensor<T> scores = scale(matmul_nt(q, k), inv_sqrt);
  Tensor<T> weights = softmax(add(scores, mask.detached()), 1);
  return matmul(weights, v);
}

}  // namespace lrsa::attn
