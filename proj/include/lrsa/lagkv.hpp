#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "lrsa/errors.hpp"
#include "lrsa/tensor.hpp"

// Lag-relative token importance scoring. A chunk of L tokens is normalized
// channel-wise against the min/max of the *next* chunk, scored by the
// per-token channel dispersion pushed through a softmax over the chunk, and
// the K and V scores are summed. Selection keeps the top-k positions per KV
// head. Nothing in here ever sees a query: the scores, and therefore the
// masks built from them, are static.

namespace lrsa::lagkv {

struct LagkvParams {
  i64 sink = 16;           // S: tokens never evicted
  i64 lag = 32;            // L: chunk length
  double retention = 0.5;  // r in (0, 1]
  double epsilon = 1e-6;   // normalization guard for max == min channels

  // k = floor(r*L), clamped to [1, L].
  i64 retain_count() const {
    i64 k = static_cast<i64>(retention * static_cast<double>(lag));
    return std::clamp<i64>(k, 1, lag);
  }

  std::vector<std::string> validate() const {
    std::vector<std::string> errs;
    if (sink < 0) errs.push_back("lagkv.sink must be >= 0, got " + std::to_string(sink));
    if (lag < 1) errs.push_back("lagkv.lag must be >= 1, got " + std::to_string(lag));
    if (!(retention > 0.0 && retention <= 1.0))
      errs.push_back("lagkv.retention must be in (0,1], got " + std::to_string(retention));
    if (!(epsilon > 0.0))
      errs.push_back("lagkv.epsilon must be > 0, got " + std::to_string(epsilon));
    return errs;
  }
};

// Per-KV-head scores for one lag-sized chunk. Each head's vector sums to 2
// (sum of the K-softmax and the V-softmax).
template <typename T>
struct ChunkScores {
  i64 chunk_index = 0;  // 1-based chunk position after the sink
  std::vector<std::vector<T>> head_scores;
};

// Per-KV-head strictly ascending within-chunk indices of the kept tokens.
struct RetentionSet {
  i64 chunk_index = 0;
  std::vector<std::vector<i64>> head_indices;
};

// Channel-wise min-max normalization of `chunk` against the token axis of
// `next_chunk`. epsilon >= 0; the params-level invariant keeps it positive,
// but exact-invariance checks are allowed to pass 0 for tie-free inputs.
template <typename T>
Tensor<T> normalize_chunk(const Tensor<T>& chunk, const Tensor<T>& next_chunk, double epsilon) {
  if (chunk.rank() != 2 || next_chunk.rank() != 2 || chunk.shape[1] != next_chunk.shape[1])
    throw ShapeError("normalize_chunk: channel mismatch: " + shape_str(chunk.shape) + " vs " +
                     shape_str(next_chunk.shape));
  if (next_chunk.shape[0] < 1)
    throw ShapeError("normalize_chunk: reference chunk is empty");
  auto [mn, mx] = reduce_minmax(next_chunk.detached(), 0);
  const i64 rows = chunk.shape[0], d = chunk.shape[1];
  Tensor<T> out = Tensor<T>::zeros({rows, d});
  for (i64 c = 0; c < d; ++c) {
    const T lo = mn.at(c);
    const T inv = T(1) / (mx.at(c) - lo + static_cast<T>(epsilon));
    for (i64 r = 0; r < rows; ++r) out.at(r, c) = (chunk.at(r, c) - lo) * inv;
  }
  return out;
}

// Population std across channels per token, then softmax across the chunk's
// tokens. Sums to 1.
template <typename T>
Tensor<T> token_scores(const Tensor<T>& normalized) {
  if (normalized.rank() != 2)
    throw ShapeError("token_scores: expected 2-d chunk, got " + shape_str(normalized.shape));
  return softmax(reduce_std(normalized.detached(), 1), 0);
}

// Combined importance of one head's chunk: score(K) + score(V). Sums to 2.
template <typename T>
std::vector<T> score_chunk(const Tensor<T>& k_chunk, const Tensor<T>& v_chunk,
                           const Tensor<T>& k_next, const Tensor<T>& v_next,
                           const LagkvParams& params) {
  Tensor<T> sk = token_scores(normalize_chunk(k_chunk, k_next, params.epsilon));
  Tensor<T> sv = token_scores(normalize_chunk(v_chunk, v_next, params.epsilon));
  std::vector<T> out(static_cast<std::size_t>(sk.numel()));
  for (i64 i = 0; i < sk.numel(); ++i) out[static_cast<std::size_t>(i)] = sk.at(i) + sv.at(i);
  return out;
}

// The k highest-scoring indices, ties broken toward the lower index, result
// sorted ascending so the retained tokens keep their original order.
template <typename T>
std::vector<i64> select_topk(const std::vector<T>& scores, i64 k) {
  const i64 n = static_cast<i64>(scores.size());
  if (k < 1 || k > n)
    throw IndexError("select_topk: k=" + std::to_string(k) + " invalid for " + std::to_string(n) +
                     " scores");
  std::vector<i64> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::nth_element(idx.begin(), idx.begin() + (k - 1), idx.end(), [&](i64 a, i64 b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)] ||
           (scores[static_cast<std::size_t>(a)] == scores[static_cast<std::size_t>(b)] && a < b);
  });
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace lrsa::lagkv
