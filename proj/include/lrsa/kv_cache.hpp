#pragma once

#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "lrsa/errors.hpp"
#include "lrsa/lagkv.hpp"
#include "lrsa/tensor.hpp"

// Segmented per-layer, per-KV-head cache: sink | compressed prefix | window
// chunk | partial tail, with the original absolute position of every cached
// token. Keys are stored post-RoPE at their original positions; eviction
// never re-rotates survivors, which is what makes physical compaction agree
// with additive masking.

namespace lrsa::kv {

using lagkv::LagkvParams;

struct CacheReport {
  i64 tokens_cached = 0;  // per head (uniform across heads)
  i64 tokens_seen = 0;
  double ratio = 1.0;     // tokens_seen / tokens_cached; 1.0 when empty
};

// One compression event, recorded for the score-dump interface.
template <typename T>
struct ScoreEvent {
  i64 layer = 0;
  i64 chunk_index = 0;
  std::vector<std::vector<T>> head_scores;
  std::vector<std::vector<i64>> head_retained;  // within-chunk indices
};

template <typename T>
using ScoreRecorder = std::function<void(const ScoreEvent<T>&)>;

namespace detail {

// One contiguous row-major segment of d_h-wide rows plus their positions.
template <typename T>
struct Segment {
  std::vector<T> k, v;
  std::vector<i64> pos;

  i64 size() const { return static_cast<i64>(pos.size()); }
  void clear() {
    k.clear();
    v.clear();
    pos.clear();
  }
  void append_row(const T* krow, const T* vrow, i64 position, i64 d) {
    k.insert(k.end(), krow, krow + d);
    v.insert(v.end(), vrow, vrow + d);
    pos.push_back(position);
  }
  void take_front(Segment& dst, i64 rows, i64 d) {
    dst.k.assign(k.begin(), k.begin() + rows * d);
    dst.v.assign(v.begin(), v.begin() + rows * d);
    dst.pos.assign(pos.begin(), pos.begin() + rows);
    k.erase(k.begin(), k.begin() + rows * d);
    v.erase(v.begin(), v.begin() + rows * d);
    pos.erase(pos.begin(), pos.begin() + rows);
  }
};

}  // namespace detail

template <typename T>
struct HeadView {
  Tensor<T> k, v;               // [T x d_h]
  std::vector<i64> positions;   // strictly ascending originals
};

template <typename T>
class LayerKvCache {
 public:
  LayerKvCache() = default;
  LayerKvCache(i64 layer_index, i64 kv_heads, i64 head_dim, LagkvParams params)
      : layer_(layer_index), head_dim_(head_dim), params_(params), heads_(kv_heads) {}

  i64 kv_heads() const { return static_cast<i64>(heads_.size()); }
  i64 head_dim() const { return head_dim_; }
  i64 tokens_seen() const { return tokens_seen_; }
  i64 chunks_compressed() const { return chunks_compressed_; }
  const LagkvParams& params() const { return params_; }

  i64 token_count(i64 head) const {
    const auto& h = heads_[head];
    return h.sink.size() + h.prefix.size() + h.window.size() + h.tail.size();
  }
  i64 window_len() const { return heads_.empty() ? 0 : heads_[0].window.size(); }
  i64 tail_len() const { return heads_.empty() ? 0 : heads_[0].tail.size(); }
  // 1-based index of the chunk currently held in the window.
  i64 window_chunk_index() const { return chunks_compressed_ + 1; }

  const std::vector<i64>& prefix_positions(i64 head) const { return heads_[head].prefix.pos; }

  // Appends m tokens per head. Positions must continue the stream. Tokens
  // fill the sink first; the rest land in the tail, and the tail promotes to
  // the window when it holds a full chunk and the window is empty.
  void append_tokens(const std::vector<Tensor<T>>& k_heads, const std::vector<Tensor<T>>& v_heads,
                     const std::vector<i64>& positions) {
    const i64 m = static_cast<i64>(positions.size());
    for (i64 i = 0; i < m; ++i)
      if (positions[i] != tokens_seen_ + i)
        throw PositionError("append_tokens: position " + std::to_string(positions[i]) +
                            " does not continue stream at " + std::to_string(tokens_seen_ + i));
    if (static_cast<i64>(k_heads.size()) != kv_heads() ||
        static_cast<i64>(v_heads.size()) != kv_heads())
      throw ShapeError("append_tokens: expected " + std::to_string(kv_heads()) + " heads");
    for (i64 h = 0; h < kv_heads(); ++h) {
      if (k_heads[h].shape != Shape{m, head_dim_} || v_heads[h].shape != Shape{m, head_dim_})
        throw ShapeError("append_tokens: head tensor " + shape_str(k_heads[h].shape) +
                         " does not match [" + std::to_string(m) + "," +
                         std::to_string(head_dim_) + "]");
    }
    for (i64 h = 0; h < kv_heads(); ++h) {
      auto& seg = heads_[h];
      for (i64 i = 0; i < m; ++i) {
        const i64 p = positions[i];
        const T* krow = k_heads[h].ptr() + i * head_dim_;
        const T* vrow = v_heads[h].ptr() + i * head_dim_;
        if (p < params_.sink)
          seg.sink.append_row(krow, vrow, p, head_dim_);
        else
          seg.tail.append_row(krow, vrow, p, head_dim_);
      }
    }
    tokens_seen_ += m;
    promote_if_ready();
  }

  // Scores and compacts while the window is full and the tail supplies a
  // complete lag-sized reference chunk. Returns the number of chunks
  // compressed. The final full chunk and any partial tail stay untouched.
  i64 compress_ready(const ScoreRecorder<T>* recorder = nullptr) {
    i64 compressed = 0;
    const i64 L = params_.lag;
    const i64 k = params_.retain_count();
    while (window_len() == L && tail_len() >= L) {
      ScoreEvent<T> event;
      event.layer = layer_;
      event.chunk_index = window_chunk_index();
      for (i64 h = 0; h < kv_heads(); ++h) {
        auto& seg = heads_[h];
        Tensor<T> wk = Tensor<T>::from({L, head_dim_}, seg.window.k);
        Tensor<T> wv = Tensor<T>::from({L, head_dim_}, seg.window.v);
        Tensor<T> rk = Tensor<T>::from(
            {L, head_dim_}, std::vector<T>(seg.tail.k.begin(), seg.tail.k.begin() + L * head_dim_));
        Tensor<T> rv = Tensor<T>::from(
            {L, head_dim_}, std::vector<T>(seg.tail.v.begin(), seg.tail.v.begin() + L * head_dim_));
        std::vector<T> scores = lagkv::score_chunk(wk, wv, rk, rv, params_);
        std::vector<i64> retained = lagkv::select_topk(scores, k);
        Tensor<T> gk = gather_rows(wk, retained);
        Tensor<T> gv = gather_rows(wv, retained);
        for (i64 i = 0; i < k; ++i)
          seg.prefix.append_row(gk.ptr() + i * head_dim_, gv.ptr() + i * head_dim_,
                                seg.window.pos[retained[i]], head_dim_);
        if (recorder) {
          event.head_scores.push_back(std::move(scores));
          event.head_retained.push_back(retained);
        }
      }
      for (i64 h = 0; h < kv_heads(); ++h) {
        auto& seg = heads_[h];
        seg.window.clear();
        seg.tail.take_front(seg.window, L, head_dim_);
      }
      ++chunks_compressed_;
      ++compressed;
      if (recorder) (*recorder)(event);
    }
    return compressed;
  }

  // Contiguous sink | prefix | window | tail concatenation for one head.
  HeadView<T> head_view(i64 head) const {
    if (head < 0 || head >= kv_heads())
      throw IndexError("head_view: head " + std::to_string(head) + " out of range");
    const auto& seg = heads_[head];
    const i64 total = token_count(head);
    HeadView<T> view;
    view.k = Tensor<T>::zeros({total, head_dim_});
    view.v = Tensor<T>::zeros({total, head_dim_});
    view.positions.reserve(total);
    i64 row = 0;
    for (const auto* s : {&seg.sink, &seg.prefix, &seg.window, &seg.tail}) {
      if (s->size() > 0) {
        std::memcpy(view.k.ptr() + row * head_dim_, s->k.data(), s->k.size() * sizeof(T));
        std::memcpy(view.v.ptr() + row * head_dim_, s->v.data(), s->v.size() * sizeof(T));
        view.positions.insert(view.positions.end(), s->pos.begin(), s->pos.end());
        row += s->size();
      }
    }
    return view;
  }

  CacheReport report() const {
    CacheReport r;
    r.tokens_seen = tokens_seen_;
    r.tokens_cached = heads_.empty() ? 0 : token_count(0);
    r.ratio = r.tokens_cached == 0
                  ? 1.0
                  : static_cast<double>(r.tokens_seen) / static_cast<double>(r.tokens_cached);
    return r;
  }

  // Serialization hooks used by the cache snapshot format.
  template <typename F>
  void for_each_segment(F&& fn) const {
    for (const auto& h : heads_)
      for (const auto* s : {&h.sink, &h.prefix, &h.window, &h.tail}) fn(*s);
  }
  template <typename F>
  void for_each_segment_mut(F&& fn) {
    for (auto& h : heads_)
      for (auto* s : {&h.sink, &h.prefix, &h.window, &h.tail}) fn(*s);
  }
  void set_counters(i64 tokens_seen, i64 chunks_compressed) {
    tokens_seen_ = tokens_seen;
    chunks_compressed_ = chunks_compressed;
  }

 private:
  struct HeadSegments {
    detail::Segment<T> sink, prefix, window, tail;
  };

  void promote_if_ready() {
    if (window_len() == 0 && tail_len() >= params_.lag)
      for (auto& h : heads_) h.tail.take_front(h.window, params_.lag, head_dim_);
  }

  i64 layer_ = 0;
  i64 head_dim_ = 0;
  LagkvParams params_;
  i64 tokens_seen_ = 0;
  i64 chunks_compressed_ = 0;
  std::vector<HeadSegments> heads_;
};

template <typename T>
class SegmentedKvCache {
 public:
  SegmentedKvCache() = default;
  SegmentedKvCache(i64 layers, i64 kv_heads, i64 head_dim, LagkvParams params)
      : params_(params) {
    layers_.reserve(layers);
    for (i64 l = 0; l < layers; ++l) layers_.emplace_back(l, kv_heads, head_dim, params);
  }

  i64 layer_count() const { return static_cast<i64>(layers_.size()); }
  LayerKvCache<T>& layer(i64 l) { return layers_[l]; }
  const LayerKvCache<T>& layer(i64 l) const { return layers_[l]; }
  const LagkvParams& params() const { return params_; }

  i64 tokens_seen() const { return layers_.empty() ? 0 : layers_[0].tokens_seen(); }

  CacheReport report() const {
    return layers_.empty() ? CacheReport{} : layers_[0].report();
  }

  // Snapshot format: magic "LRKV", u32 version, u32 layers/heads/head_dim,
  // u8 scalar width, u32 sink/lag, f64 retention/epsilon, per layer u64
  // tokens_seen + u64 chunks_compressed, then per head four segments as
  // u32 row count + rows (K then V, little-endian) + u32 positions.
  void save(std::ostream& os) const {
    auto put_u32 = [&os](std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); };
    auto put_u64 = [&os](std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); };
    auto put_f64 = [&os](double v) { os.write(reinterpret_cast<const char*>(&v), 8); };
    os.write("LRKV", 4);
    put_u32(1);
    put_u32(static_cast<std::uint32_t>(layer_count()));
    put_u32(layer_count() ? static_cast<std::uint32_t>(layers_[0].kv_heads()) : 0);
    put_u32(layer_count() ? static_cast<std::uint32_t>(layers_[0].head_dim()) : 0);
    const std::uint8_t width = sizeof(T);
    os.write(reinterpret_cast<const char*>(&width), 1);
    put_u32(static_cast<std::uint32_t>(params_.sink));
    put_u32(static_cast<std::uint32_t>(params_.lag));
    put_f64(params_.retention);
    put_f64(params_.epsilon);
    for (const auto& layer : layers_) {
      put_u64(static_cast<std::uint64_t>(layer.tokens_seen()));
      put_u64(static_cast<std::uint64_t>(layer.chunks_compressed()));
      layer.for_each_segment([&](const detail::Segment<T>& s) {
        put_u32(static_cast<std::uint32_t>(s.size()));
        if (s.size() > 0) {
          os.write(reinterpret_cast<const char*>(s.k.data()),
                   static_cast<std::streamsize>(s.k.size() * sizeof(T)));
          os.write(reinterpret_cast<const char*>(s.v.data()),
                   static_cast<std::streamsize>(s.v.size() * sizeof(T)));
          for (i64 p : s.pos) put_u32(static_cast<std::uint32_t>(p));
        }
      });
    }
  }

  static SegmentedKvCache load(std::istream& is) {
    auto get_u32 = [&is]() {
      std::uint32_t v = 0;
      is.read(reinterpret_cast<char*>(&v), 4);
      return v;
    };
    auto get_u64 = [&is]() {
      std::uint64_t v = 0;
      is.read(reinterpret_cast<char*>(&v), 8);
      return v;
    };
    auto get_f64 = [&is]() {
      double v = 0;
      is.read(reinterpret_cast<char*>(&v), 8);
      return v;
    };
    char magic[4];
    is.read(magic, 4);
    if (std::memcmp(magic, "LRKV", 4) != 0)
      throw ConfigError("cache snapshot: bad magic");
    const std::uint32_t version = get_u32();
    if (version != 1)
      throw ConfigError("cache snapshot: unsupported version " + std::to_string(version));
    const i64 layers = get_u32();
    const i64 heads = get_u32();
    const i64 head_dim = get_u32();
    std::uint8_t width = 0;
    is.read(reinterpret_cast<char*>(&width), 1);
    if (width != sizeof(T))
      throw ConfigError("cache snapshot: scalar width " + std::to_string(width) +
                        " does not match this build");
    LagkvParams params;
    params.sink = get_u32();
    params.lag = get_u32();
    params.retention = get_f64();
    params.epsilon = get_f64();
    SegmentedKvCache cache(layers, heads, head_dim, params);
    for (i64 l = 0; l < layers; ++l) {
      const i64 seen = static_cast<i64>(get_u64());
      const i64 done = static_cast<i64>(get_u64());
      cache.layers_[l].for_each_segment_mut([&](detail::Segment<T>& s) {
        const i64 rows = get_u32();
        if (rows == 0) return;
        s.k.resize(static_cast<std::size_t>(rows * head_dim));
        s.v.resize(static_cast<std::size_t>(rows * head_dim));
        is.read(reinterpret_cast<char*>(s.k.data()),
                static_cast<std::streamsize>(s.k.size() * sizeof(T)));
        is.read(reinterpret_cast<char*>(s.v.data()),
                static_cast<std::streamsize>(s.v.size() * sizeof(T)));
        s.pos.resize(static_cast<std::size_t>(rows));
        for (auto& p : s.pos) p = get_u32();
      });
      cache.layers_[l].set_counters(seen, done);
    }
    if (!is) throw ConfigError("cache snapshot: truncated stream");
    return cache;
  }

 private:
  LagkvParams params_;
  std::vector<LayerKvCache<T>> layers_;
};

}  // namespace lrsa::kv
