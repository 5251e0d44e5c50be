#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lrsa/attention.hpp"
#include "lrsa/errors.hpp"
#include "lrsa/kv_cache.hpp"
#include "lrsa/lagkv.hpp"
#include "lrsa/rng.hpp"
#include "lrsa/tensor.hpp"

// Small decoder-only transformer: tied embeddings, pre-norm RMS blocks with
// rotary attention (optionally grouped-query) and a gated MLP. forward()
// runs the whole sequence under per-chunk additive masks — the uncompacted
// reference path that training uses and that the engine's compacted path is
// checked against.

namespace lrsa::model {

struct ModelConfig {
  i64 vocab = 64;
  i64 d_model = 64;
  i64 heads = 4;
  i64 kv_heads = 4;
  i64 head_dim = 16;
  i64 layers = 2;
  i64 mlp_ratio = 4;
  double rope_base = 10000.0;
  double norm_eps = 1e-6;

  attn::AttnConfig attn() const { return {d_model, heads, kv_heads, head_dim, rope_base}; }

  std::vector<std::string> validate() const {
    std::vector<std::string> errs = attn().validate();
    if (vocab < 2) errs.push_back("model.vocab must be >= 2");
    if (layers < 1) errs.push_back("model.layers must be >= 1");
    if (mlp_ratio < 1) errs.push_back("model.mlp_ratio must be >= 1");
    if (!(norm_eps > 0.0)) errs.push_back("model.norm_eps must be > 0");
    return errs;
  }
};

template <typename T>
struct BlockParams {
  Tensor<T> attn_norm, wq, wk, wv, wo;
  Tensor<T> mlp_norm, w_gate, w_up, w_down;
};

template <typename T>
struct ModelParams {
  ModelConfig cfg;
  Tensor<T> embedding;  // vocab x d; also the tied output head
  std::vector<BlockParams<T>> blocks;
  Tensor<T> final_norm;

  // Draw order is fixed: embedding, then each block's matrices in
  // declaration order. Residual-facing projections get the 1/sqrt(2*layers)
  // shrink so the stream stays well-scaled at init.
  static ModelParams init(const ModelConfig& cfg, Rng& rng) {
    ModelParams m;
    m.cfg = cfg;
    auto normal = [&rng](Shape shape, double sigma) {
      Tensor<T> t = Tensor<T>::zeros(std::move(shape), true);
      for (i64 i = 0; i < t.numel(); ++i) t.at(i) = static_cast<T>(rng.normal() * sigma);
      return t;
    };
    const double w_sigma = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
    const double o_sigma = w_sigma / std::sqrt(2.0 * static_cast<double>(cfg.layers));
    const i64 inner = cfg.mlp_ratio * cfg.d_model;
    m.embedding = normal({cfg.vocab, cfg.d_model}, 0.08);
    m.blocks.resize(static_cast<std::size_t>(cfg.layers));
    for (auto& b : m.blocks) {
      b.attn_norm = ones({cfg.d_model});
      b.wq = normal({cfg.d_model, cfg.heads * cfg.head_dim}, w_sigma);
      b.wk = normal({cfg.d_model, cfg.kv_heads * cfg.head_dim}, w_sigma);
      b.wv = normal({cfg.d_model, cfg.kv_heads * cfg.head_dim}, w_sigma);
      b.wo = normal({cfg.heads * cfg.head_dim, cfg.d_model}, o_sigma);
      b.mlp_norm = ones({cfg.d_model});
      b.w_gate = normal({cfg.d_model, inner}, w_sigma);
      b.w_up = normal({cfg.d_model, inner}, w_sigma);
      b.w_down = normal({inner, cfg.d_model}, o_sigma);
    }
    m.final_norm = ones({cfg.d_model});
    return m;
  }

  static Tensor<T> ones(Shape shape) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape), true);
    for (i64 i = 0; i < t.numel(); ++i) t.at(i) = T(1);
    return t;
  }

  std::vector<std::pair<std::string, Tensor<T>*>> named_parameters() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    out.emplace_back("embedding", &embedding);
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      const std::string p = "blocks." + std::to_string(l) + ".";
      auto& b = blocks[l];
      out.emplace_back(p + "attn_norm", &b.attn_norm);
      out.emplace_back(p + "wq", &b.wq);
      out.emplace_back(p + "wk", &b.wk);
      out.emplace_back(p + "wv", &b.wv);
      out.emplace_back(p + "wo", &b.wo);
      out.emplace_back(p + "mlp_norm", &b.mlp_norm);
      out.emplace_back(p + "w_gate", &b.w_gate);
      out.emplace_back(p + "w_up", &b.w_up);
      out.emplace_back(p + "w_down", &b.w_down);
    }
    out.emplace_back("final_norm", &final_norm);
    return out;
  }

  std::vector<Tensor<T>*> parameters() {
    std::vector<Tensor<T>*> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }
};

enum class AttnMode { kVanilla, kLrsa };

inline AttnMode mode_from_string(const std::string& s) {
  if (s == "vanilla") return AttnMode::kVanilla;
  if (s == "lrsa") return AttnMode::kLrsa;
  throw ConfigError("mode must be 'vanilla' or 'lrsa', got '" + s + "'");
}

// Retention sets captured per layer / chunk / KV head as absolute positions.
// grad_check freezes one of these so finite differences see a fixed mask.
struct VisibilityPlan {
  // sets[layer][p-1][head]: ascending positions retained from chunk p
  std::vector<std::vector<std::vector<std::vector<i64>>>> sets;
};

namespace detail {

// Detached copy of rows [r0, r1) — no autograd edge, used for scoring.
template <typename T>
Tensor<T> rows_detached(const Tensor<T>& x, i64 r0, i64 r1) {
  NoGradGuard ng;
  return slice_rows(x.detached(), r0, r1);
}

// Retention sets for every chunk of this layer that has a complete
// successor, computed from gradient-detached K/V.
template <typename T>
std::vector<std::vector<std::vector<i64>>> layer_retention_sets(
    const std::vector<Tensor<T>>& k_heads, const std::vector<Tensor<T>>& v_heads, i64 n,
    const lagkv::LagkvParams& params) {
  NoGradGuard ng;
  std::vector<std::vector<std::vector<i64>>> sets;
  const i64 kv_heads = static_cast<i64>(k_heads.size());
  for (i64 p = 1;; ++p) {
    const i64 qs = params.sink + (p - 1) * params.lag;
    const i64 ref_end = qs + 2 * params.lag;
    if (ref_end > n) break;  // successor incomplete: chunk p is never compressed
    std::vector<std::vector<i64>> head_sets(static_cast<std::size_t>(kv_heads));
    for (i64 h = 0; h < kv_heads; ++h) {
      Tensor<T> kp = rows_detached(k_heads[h], qs, qs + params.lag);
      Tensor<T> vp = rows_detached(v_heads[h], qs, qs + params.lag);
      Tensor<T> kn = rows_detached(k_heads[h], qs + params.lag, ref_end);
      Tensor<T> vn = rows_detached(v_heads[h], qs + params.lag, ref_end);
      std::vector<T> scores = lagkv::score_chunk(kp, vp, kn, vn, params);
      std::vector<i64> idx = lagkv::select_topk(scores, params.retain_count());
      for (auto& i : idx) i += qs;
      head_sets[static_cast<std::size_t>(h)] = std::move(idx);
    }
    sets.push_back(std::move(head_sets));
  }
  return sets;
}

}  // namespace detail

// Full-sequence forward. mode=kLrsa applies the per-chunk visibility masks
// (retention computed from detached K/V, or taken from `frozen` when given);
// mode=kVanilla applies plain causal masks. Returns logits [n x vocab].
template <typename T>
Tensor<T> forward(const ModelParams<T>& model, const std::vector<std::int32_t>& tokens,
                  AttnMode mode, const lagkv::LagkvParams& params,
                  attn::OpCounter* counter = nullptr, const VisibilityPlan* frozen = nullptr,
                  VisibilityPlan* captured = nullptr) {
  const ModelConfig& cfg = model.cfg;
  const i64 n = static_cast<i64>(tokens.size());
  if (n < 1) throw ShapeError("forward: empty token sequence");
  const i64 dh = cfg.head_dim;
  std::vector<i64> positions(static_cast<std::size_t>(n));
  for (i64 i = 0; i < n; ++i) positions[static_cast<std::size_t>(i)] = i;
  const auto blocks = attn::chunk_blocks(n, params.sink, params.lag);
  std::vector<i64> all_positions = positions;

  Tensor<T> x = embed_rows(model.embedding, tokens);
  for (i64 l = 0; l < cfg.layers; ++l) {
    const BlockParams<T>& B = model.blocks[static_cast<std::size_t>(l)];
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

    std::vector<std::vector<std::vector<i64>>> sets;
    if (mode == AttnMode::kLrsa) {
      if (frozen)
        sets = frozen->sets[static_cast<std::size_t>(l)];
      else
        sets = detail::layer_retention_sets(k_heads, v_heads, n, params);
      if (captured) captured->sets.push_back(sets);
    }

    // Running per-head retained-prefix positions for chunks 1..q-2.
    std::vector<std::vector<i64>> prefix(static_cast<std::size_t>(cfg.kv_heads));
    i64 appended_sets = 0;
    std::vector<std::vector<Tensor<T>>> head_chunks(static_cast<std::size_t>(cfg.heads));
    for (const auto& [qs, qe] : blocks) {
      const i64 chunk_q = qs < params.sink ? 0 : (qs - params.sink) / params.lag + 1;
      while (mode == AttnMode::kLrsa && appended_sets < chunk_q - 2) {
        const auto& set = sets[static_cast<std::size_t>(appended_sets)];
        for (i64 h = 0; h < cfg.kv_heads; ++h)
          prefix[static_cast<std::size_t>(h)].insert(prefix[static_cast<std::size_t>(h)].end(),
                                                     set[static_cast<std::size_t>(h)].begin(),
                                                     set[static_cast<std::size_t>(h)].end());
        ++appended_sets;
      }
      std::vector<i64> key_positions(all_positions.begin(), all_positions.begin() + qe);
      std::vector<Tensor<T>> masks;
      if (mode == AttnMode::kLrsa) {
        const auto spec = attn::build_visibility(chunk_q, n, prefix, params, cfg.kv_heads);
        for (i64 h = 0; h < cfg.kv_heads; ++h)
          masks.push_back(attn::additive_mask<T>(spec, h, key_positions));
      } else {
        masks.push_back(attn::causal_mask<T>(qs, qe - qs, key_positions));
      }
      for (i64 h = 0; h < cfg.heads; ++h) {
        const i64 kvh = cfg.attn().kv_head_of(h);
        const Tensor<T>& mask = mode == AttnMode::kLrsa ? masks[static_cast<std::size_t>(kvh)]
                                                        : masks[0];
        Tensor<T> qb = slice_rows(q_heads[static_cast<std::size_t>(h)], qs, qe);
        Tensor<T> kc = slice_rows(k_heads[static_cast<std::size_t>(kvh)], 0, qe);
        Tensor<T> vc = slice_rows(v_heads[static_cast<std::size_t>(kvh)], 0, qe);
        head_chunks[static_cast<std::size_t>(h)].push_back(attn::attend(qb, kc, vc, mask, counter));
      }
    }
    std::vector<Tensor<T>> head_outs;
    for (i64 h = 0; h < cfg.heads; ++h)
      head_outs.push_back(concat_rows(head_chunks[static_cast<std::size_t>(h)]));
    x = add(x, matmul(concat_cols(head_outs), B.wo));

    Tensor<T> xm = rmsnorm(x, B.mlp_norm, static_cast<T>(cfg.norm_eps));
    Tensor<T> gated = silu_gate(matmul(xm, B.w_gate), matmul(xm, B.w_up));
    x = add(x, matmul(gated, B.w_down));
  }
  Tensor<T> h_final = rmsnorm(x, model.final_norm, static_cast<T>(cfg.norm_eps));
  return matmul_nt(h_final, model.embedding);
}

}  // namespace lrsa::model
