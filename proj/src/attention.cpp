#include "longenc/attention.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace longenc {

std::string to_string(AttentionMode m) {
  switch (m) {
    case AttentionMode::kDense:
      return "dense";
    case AttentionMode::kLocal:
      return "local";
    case AttentionMode::kTGlobal:
      return "tglobal";
  }
  return "?";
}

AttentionMode attention_mode_from_string(const std::string& s) {
  if (s == "dense") return AttentionMode::kDense;
  if (s == "local") return AttentionMode::kLocal;
  if (s == "tglobal") return AttentionMode::kTGlobal;
  throw std::invalid_argument("unknown attention mode: " + s);
}

void AttentionConfig::validate() const {
  if (radius < 0) throw std::invalid_argument("attention: radius must be >= 0");
  if (block_size < 1) throw std::invalid_argument("attention: block_size must be >= 1");
  if (num_heads < 1 || head_dim < 1) throw std::invalid_argument("attention: bad head config");
  if (num_buckets < 4 || num_buckets % 2 != 0)
    throw std::invalid_argument("attention: num_buckets must be even and >= 4");
  if (max_distance <= num_buckets / 2)
    throw std::invalid_argument("attention: max_distance must exceed num_buckets/2");
}

void PackedBatch::validate() const {
  const std::size_t l = tokens.size();
  if (segment_ids.size() != l || positions.size() != l)
    throw std::invalid_argument("packed batch: field lengths differ");
  std::int32_t prev_seg = -1;
  std::map<std::int32_t, bool> seen;
  for (std::size_t i = 0; i < l; ++i) {
    const std::int32_t s = segment_ids[i];
    if (s < 0) throw std::invalid_argument("packed batch: negative segment id");
    if (s != prev_seg) {
      if (s != 0 && seen.count(s))
        throw std::invalid_argument("packed batch: segment ids must form contiguous runs");
      seen[s] = true;
      if (s != 0 && positions[i] != 0)
        throw std::invalid_argument("packed batch: positions must restart at segment start");
    } else if (s != 0 && i > 0 && positions[i] != positions[i - 1] + 1) {
      throw std::invalid_argument("packed batch: positions must increase within a segment");
    }
    prev_seg = s;
  }
}

PackedBatch PackedBatch::single_segment(std::vector<std::int32_t> tokens) {
  PackedBatch b;
  const std::size_t l = tokens.size();
  b.tokens = std::move(tokens);
  b.segment_ids.assign(l, 1);
  b.positions.resize(l);
  for (std::size_t i = 0; i < l; ++i) b.positions[i] = static_cast<std::int32_t>(i);
  return b;
}

std::size_t AttentionMask::popcount() const {
  std::size_t n = 0;
  for (std::uint8_t v : allowed) n += v ? 1 : 0;
  return n;
}

int relative_position_bucket(std::int64_t rel, int num_buckets, int max_distance,
                             bool bidirectional) {
  int bucket = 0;
  int half = num_buckets;
  std::int64_t n;
  if (bidirectional) {
    half = num_buckets / 2;
    if (rel > 0) bucket += half;
    n = std::llabs(rel);
  } else {
    n = rel < 0 ? -rel : 0;
  }
  const int max_exact = half / 2;
  if (n < max_exact) return bucket + static_cast<int>(n);
  const double log_ratio =
      std::log(static_cast<double>(n) / max_exact) / std::log(static_cast<double>(max_distance) / max_exact);
  int v = max_exact + static_cast<int>(log_ratio * (half - max_exact));
  return bucket + std::min(v, half - 1);
}

AttentionMask build_local_mask(const PackedBatch& batch, int radius) {
  const std::size_t l = batch.length();
  AttentionMask m(l, l);
  for (std::size_t i = 0; i < l; ++i) {
    if (batch.segment_ids[i] == 0) continue;
    const std::size_t lo = i >= static_cast<std::size_t>(radius) ? i - radius : 0;
    const std::size_t hi = std::min(l - 1, i + static_cast<std::size_t>(radius));
    for (std::size_t j = lo; j <= hi; ++j)
      if (batch.segment_ids[j] == batch.segment_ids[i]) m.at(i, j) = 1;
  }
  return m;
}

std::size_t num_blocks(std::size_t length, int block_size) {
  return (length + static_cast<std::size_t>(block_size) - 1) / static_cast<std::size_t>(block_size);
}

std::vector<std::int32_t> block_segments(const PackedBatch& batch, int block_size) {
  const std::size_t l = batch.length();
  const std::size_t g = num_blocks(l, block_size);
  std::vector<std::int32_t> seg(g, 0);
  for (std::size_t b = 0; b < g; ++b) {
    const std::size_t lo = b * static_cast<std::size_t>(block_size);
    const std::size_t hi = std::min(l, lo + static_cast<std::size_t>(block_size));
    std::map<std::int32_t, int> votes;
    for (std::size_t i = lo; i < hi; ++i)
      if (batch.segment_ids[i] != 0) ++votes[batch.segment_ids[i]];
    int best = 0;
    std::int32_t best_seg = 0;
    for (const auto& [s, c] : votes)  // map order: ties go to the lower id
      if (c > best) {
        best = c;
        best_seg = s;
      }
    seg[b] = best_seg;
  }
  return seg;
}

AttentionMask build_global_mask(const PackedBatch& batch,
                                const std::vector<std::int32_t>& global_segment) {
  const std::size_t l = batch.length();
  const std::size_t g = global_segment.size();
  AttentionMask m(l, g);
  for (std::size_t i = 0; i < l; ++i) {
    if (batch.segment_ids[i] == 0) continue;
    for (std::size_t j = 0; j < g; ++j)
      if (global_segment[j] == batch.segment_ids[i]) m.at(i, j) = 1;
  }
  return m;
}

AttentionMask build_segment_mask(const PackedBatch& batch) {
  const std::size_t l = batch.length();
  AttentionMask m(l, l);
  for (std::size_t i = 0; i < l; ++i) {
    if (batch.segment_ids[i] == 0) continue;
    for (std::size_t j = 0; j < l; ++j)
      if (batch.segment_ids[j] == batch.segment_ids[i]) m.at(i, j) = 1;
  }
  return m;
}

std::int64_t count_kv_pairs(const PackedBatch& batch, int radius, int block_size,
                            AttentionMode mode) {
  const std::size_t l = batch.length();
  std::int64_t count = 0;
  if (mode == AttentionMode::kDense) {
    std::map<std::int32_t, std::int64_t> seg_len;
    for (std::int32_t s : batch.segment_ids)
      if (s != 0) ++seg_len[s];
    for (const auto& [s, n] : seg_len) count += n * n;
    return count;
  }
  // local band, shared by local and tglobal
  for (std::size_t i = 0; i < l; ++i) {
    if (batch.segment_ids[i] == 0) continue;
    const std::size_t lo = i >= static_cast<std::size_t>(radius) ? i - radius : 0;
    const std::size_t hi = std::min(l - 1, i + static_cast<std::size_t>(radius));
    for (std::size_t j = lo; j <= hi; ++j)
      if (batch.segment_ids[j] == batch.segment_ids[i]) ++count;
  }
  if (mode == AttentionMode::kTGlobal) {
    const auto gseg = block_segments(batch, block_size);
    std::map<std::int32_t, std::int64_t> blocks_per_seg;
    for (std::int32_t s : gseg)
      if (s != 0) ++blocks_per_seg[s];
    for (std::size_t i = 0; i < l; ++i) {
      const std::int32_t s = batch.segment_ids[i];
      if (s == 0) continue;
      auto it = blocks_per_seg.find(s);
      if (it != blocks_per_seg.end()) count += it->second;
    }
  }
  return count;
}

std::int64_t count_kv_pairs(std::size_t l, int radius, int block_size, AttentionMode mode) {
  std::vector<std::int32_t> toks(l, 0);
  return count_kv_pairs(PackedBatch::single_segment(std::move(toks)), radius, block_size, mode);
}

namespace attn_instr {
namespace {
std::int64_t g_live = 0;
std::int64_t g_peak = 0;
}  // namespace
void reset() { g_live = g_peak = 0; }
std::int64_t peak_score_floats() { return g_peak; }
void note_alloc(std::int64_t n) {
  g_live += n;
  g_peak = std::max(g_peak, g_live);
}
void note_free(std::int64_t n) { g_live -= n; }
}  // namespace attn_instr

template <typename T>
typename Tape<T>::Var compute_global_tokens(Tape<T>& tape, typename Tape<T>::Var x,
                                            const PackedBatch& batch, int block_size,
                                            typename Tape<T>::Var scale) {
  const std::size_t d = tape.value(x).cols();
  const auto gseg = block_segments(batch, block_size);
  auto sums = tape.block_sum(x, static_cast<std::size_t>(block_size));
  // All-padding blocks are zeroed; they stay masked everywhere downstream.
  bool any_dead_block = false;
  for (std::int32_t s : gseg) any_dead_block |= (s == 0);
  if (any_dead_block) {
    Tensor<T> rowmask({gseg.size(), d});
    for (std::size_t b = 0; b < gseg.size(); ++b) {
      const T v = gseg[b] != 0 ? T(1) : T(0);
      for (std::size_t j = 0; j < d; ++j) rowmask.data()[b * d + j] = v;
    }
    sums = tape.mul(sums, tape.constant(std::move(rowmask)));
  }
  return tape.rms_norm(sums, scale);
}

template <typename T>
typename Tape<T>::Var dense_attention(Tape<T>& tape, typename Tape<T>::Var q,
                                      typename Tape<T>::Var k, typename Tape<T>::Var v,
                                      std::optional<typename Tape<T>::Var> bias,
                                      std::shared_ptr<const AttentionMask> mask,
                                      std::size_t* dead_rows) {
  const auto& qs = tape.value(q).shape();
  if (qs.size() != 3) throw ShapeError("dense_attention: q must be [h, n_q, d]");
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(qs[2]));
  auto scores = tape.scale(tape.matmul(q, k, false, true), inv_sqrt);
  if (bias) scores = tape.add(scores, *bias);
  auto mask_view =
      std::shared_ptr<const std::vector<std::uint8_t>>(mask, &mask->allowed);
  auto probs = tape.softmax_masked(scores, mask_view, dead_rows);
  return tape.matmul(probs, v);
}

// ---------------------------------------------------------------------------
// Fused banded + transient-global attention kernel.
//
// Each query attends its local band slots (key j = i - r + s) and, in tglobal
// mode, every same-segment global token, under one joint softmax. Scores are
// computed rowwise into a scratch buffer and only the probability tensors
// (band: [h, l, 2r+1], global: [h, l, g]) are materialized, so live
// score-shaped storage stays at l*(2r+1) (+ l*g) floats per head.
// ---------------------------------------------------------------------------

namespace {

template <typename T>
struct ScoreTensor {
  Tensor<T> t;
  explicit ScoreTensor(std::vector<std::size_t> shape) : t(std::move(shape)) {
    attn_instr::note_alloc(static_cast<std::int64_t>(t.size()));
  }
  ~ScoreTensor() { attn_instr::note_free(static_cast<std::int64_t>(t.size())); }
};

struct SparseMeta {
  int radius = 0;
  int block_size = 1;
  std::size_t length = 0;
  std::size_t num_globals = 0;  // 0 in local mode
  std::vector<std::uint8_t> band_allowed;  // [l * (2r+1)]
  std::vector<std::int32_t> band_bucket;   // [2r+1]
  std::vector<std::uint8_t> glb_allowed;   // [l * g]
  std::vector<std::int32_t> glb_bucket;    // [num_blocks(l) * g]
};

SparseMeta make_sparse_meta(const PackedBatch& batch, const AttentionConfig& cfg,
                            bool with_globals) {
  SparseMeta meta;
  meta.radius = cfg.radius;
  meta.block_size = cfg.block_size;
  const std::size_t l = batch.length();
  meta.length = l;
  const int r = cfg.radius;
  const std::size_t w = 2 * static_cast<std::size_t>(r) + 1;
  meta.band_allowed.assign(l * w, 0);
  for (std::size_t i = 0; i < l; ++i) {
    if (batch.segment_ids[i] == 0) continue;
    for (std::size_t s = 0; s < w; ++s) {
      const std::int64_t j = static_cast<std::int64_t>(i) - r + static_cast<std::int64_t>(s);
      if (j < 0 || j >= static_cast<std::int64_t>(l)) continue;
      if (batch.segment_ids[static_cast<std::size_t>(j)] == batch.segment_ids[i])
        meta.band_allowed[i * w + s] = 1;
    }
  }
  meta.band_bucket.resize(w);
  for (std::size_t s = 0; s < w; ++s)
    meta.band_bucket[s] = static_cast<std::int32_t>(relative_position_bucket(
        static_cast<std::int64_t>(s) - r, cfg.num_buckets, cfg.max_distance));
  if (with_globals) {
    const auto gseg = block_segments(batch, cfg.block_size);
    const std::size_t g = gseg.size();
    meta.num_globals = g;
    AttentionMask gm = build_global_mask(batch, gseg);
    meta.glb_allowed = std::move(gm.allowed);
    const std::size_t nb = num_blocks(l, cfg.block_size);
    meta.glb_bucket.resize(nb * g);
    for (std::size_t bi = 0; bi < nb; ++bi)
      for (std::size_t j = 0; j < g; ++j)
        meta.glb_bucket[bi * g + j] = static_cast<std::int32_t>(relative_position_bucket(
            static_cast<std::int64_t>(bi) - static_cast<std::int64_t>(j), cfg.num_buckets,
            cfg.max_distance));
  }
  return meta;
}

// Joint masked softmax attention over band + global keys. q/k/v: [h, l, hd];
// kg/vg: [h, g, hd] when meta.num_globals > 0.
template <typename T>
typename Tape<T>::Var sparse_attention(Tape<T>& tape, typename Tape<T>::Var q,
                                       typename Tape<T>::Var k, typename Tape<T>::Var v,
                                       typename Tape<T>::Var kg, typename Tape<T>::Var vg,
                                       typename Tape<T>::Var token_bias,
                                       typename Tape<T>::Var side_bias,
                                       std::shared_ptr<const SparseMeta> meta,
                                       std::size_t* dead_rows) {
  using Var = typename Tape<T>::Var;
  const auto& qshape = tape.value(q).shape();
  if (qshape.size() != 3) throw ShapeError("sparse_attention: q must be [h, l, hd]");
  const std::size_t heads = qshape[0], l = qshape[1], hd = qshape[2];
  if (l != meta->length) throw ShapeError("sparse_attention: batch length mismatch");
  const std::size_t w = 2 * static_cast<std::size_t>(meta->radius) + 1;
  const std::size_t g = meta->num_globals;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(hd));
  const std::size_t nbuckets = tape.value(token_bias).dim(1);

  auto probs_band = std::make_shared<ScoreTensor<T>>(std::vector<std::size_t>{heads, l, w});
  auto probs_glb = g > 0 ? std::make_shared<ScoreTensor<T>>(std::vector<std::size_t>{heads, l, g})
                         : nullptr;
  Tensor<T> out = Tensor<T>::zeros({heads, l, hd});

  const Tensor<T>& qv = tape.value(q);
  const Tensor<T>& kv = tape.value(k);
  const Tensor<T>& vv = tape.value(v);
  const Tensor<T>& tbv = tape.value(token_bias);
  const Tensor<T>* kgv = g > 0 ? &tape.value(kg) : nullptr;
  const Tensor<T>* vgv = g > 0 ? &tape.value(vg) : nullptr;
  const Tensor<T>* sbv = g > 0 ? &tape.value(side_bias) : nullptr;

  std::size_t dead = 0;
  std::vector<T> srow(w + g);  // per-query scratch scores
  for (std::size_t h = 0; h < heads; ++h) {
    const T* tb = tbv.data() + h * nbuckets;
    const T* sb = sbv ? sbv->data() + h * nbuckets : nullptr;
    for (std::size_t i = 0; i < l; ++i) {
      const T* qi = qv.data() + (h * l + i) * hd;
      T mx = -std::numeric_limits<T>::infinity();
      const std::uint8_t* ba = meta->band_allowed.data() + i * w;
      for (std::size_t s = 0; s < w; ++s) {
        if (!ba[s]) continue;
        const std::size_t j = i - meta->radius + s;
        const T* kj = kv.data() + (h * l + j) * hd;
        T dot = T(0);
        for (std::size_t c = 0; c < hd; ++c) dot += qi[c] * kj[c];
        srow[s] = dot * inv_sqrt + tb[meta->band_bucket[s]];
        mx = std::max(mx, srow[s]);
      }
      const std::uint8_t* ga = g > 0 ? meta->glb_allowed.data() + i * g : nullptr;
      const std::int32_t* gb =
          g > 0 ? meta->glb_bucket.data() + (i / meta->block_size) * g : nullptr;
      for (std::size_t j = 0; j < g; ++j) {
        if (!ga[j]) continue;
        const T* kj = kgv->data() + (h * g + j) * hd;
        T dot = T(0);
        for (std::size_t c = 0; c < hd; ++c) dot += qi[c] * kj[c];
        srow[w + j] = dot * inv_sqrt + sb[gb[j]];
        mx = std::max(mx, srow[w + j]);
      }
      T* pb = probs_band->t.data() + (h * l + i) * w;
      T* pg = g > 0 ? probs_glb->t.data() + (h * l + i) * g : nullptr;
      if (mx == -std::numeric_limits<T>::infinity()) {
        ++dead;  // fully masked query; probabilities stay zero, output row zero
        continue;
      }
      T sum = T(0);
      for (std::size_t s = 0; s < w; ++s)
        if (ba[s]) {
          pb[s] = std::exp(srow[s] - mx);
          sum += pb[s];
        }
      for (std::size_t j = 0; j < g; ++j)
        if (ga[j]) {
          pg[j] = std::exp(srow[w + j] - mx);
          sum += pg[j];
        }
      const T inv = T(1) / sum;
      T* oi = out.data() + (h * l + i) * hd;
      for (std::size_t s = 0; s < w; ++s) {
        if (!ba[s]) continue;
        pb[s] *= inv;
        const std::size_t j = i - meta->radius + s;
        const T* vj = vv.data() + (h * l + j) * hd;
        for (std::size_t c = 0; c < hd; ++c) oi[c] += pb[s] * vj[c];
      }
      for (std::size_t j = 0; j < g; ++j) {
        if (!ga[j]) continue;
        pg[j] *= inv;
        const T* vj = vgv->data() + (h * g + j) * hd;
        for (std::size_t c = 0; c < hd; ++c) oi[c] += pg[j] * vj[c];
      }
    }
  }
  if (dead_rows) *dead_rows = dead;

  bool needs_grad = tape.requires_grad(q) || tape.requires_grad(k) || tape.requires_grad(v) ||
                    tape.requires_grad(token_bias);
  if (g > 0)
    needs_grad = needs_grad || tape.requires_grad(kg) || tape.requires_grad(vg) ||
                 tape.requires_grad(side_bias);
  Var out_v = tape.push(std::move(out), needs_grad, false, nullptr);

  Tape<T>* tp = &tape;
  auto backward = [tp, q, k, v, kg, vg, token_bias, side_bias, meta, probs_band, probs_glb,
                   heads, l, hd, w, g, inv_sqrt, nbuckets, out_v]() {
    const Tensor<T>& go = tp->out_grad(out_v);
    const Tensor<T>& qv2 = tp->value(q);
    const Tensor<T>& kv2 = tp->value(k);
    const Tensor<T>& vv2 = tp->value(v);
    const Tensor<T>* kgv2 = g > 0 ? &tp->value(kg) : nullptr;
    const Tensor<T>* vgv2 = g > 0 ? &tp->value(vg) : nullptr;

    Tensor<T>* gq = tp->grad_buffer(q);
    Tensor<T>* gk = tp->grad_buffer(k);
    Tensor<T>* gv = tp->grad_buffer(v);
    Tensor<T>* gkg = g > 0 ? tp->grad_buffer(kg) : nullptr;
    Tensor<T>* gvg = g > 0 ? tp->grad_buffer(vg) : nullptr;
    Tensor<T>* gtb = tp->grad_buffer(token_bias);
    Tensor<T>* gsb = g > 0 ? tp->grad_buffer(side_bias) : nullptr;

    std::vector<T> dp(w + g), ds(w + g);
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < l; ++i) {
        const T* goi = go.data() + (h * l + i) * hd;
        const T* pb = probs_band->t.data() + (h * l + i) * w;
        const T* pg = g > 0 ? probs_glb->t.data() + (h * l + i) * g : nullptr;
        const std::uint8_t* ba = meta->band_allowed.data() + i * w;
        const std::uint8_t* ga = g > 0 ? meta->glb_allowed.data() + i * g : nullptr;
        const std::int32_t* gb =
            g > 0 ? meta->glb_bucket.data() + (i / meta->block_size) * g : nullptr;

        T dotsum = T(0);
        for (std::size_t s = 0; s < w; ++s) {
          if (!ba[s] || pb[s] == T(0)) {
            dp[s] = T(0);
            continue;
          }
          const std::size_t j = i - meta->radius + s;
          const T* vj = vv2.data() + (h * l + j) * hd;
          T d = T(0);
          for (std::size_t c = 0; c < hd; ++c) d += goi[c] * vj[c];
          dp[s] = d;
          dotsum += pb[s] * d;
        }
        for (std::size_t j = 0; j < g; ++j) {
          if (!ga[j] || pg[j] == T(0)) {
            dp[w + j] = T(0);
            continue;
          }
          const T* vj = vgv2->data() + (h * g + j) * hd;
          T d = T(0);
          for (std::size_t c = 0; c < hd; ++c) d += goi[c] * vj[c];
          dp[w + j] = d;
          dotsum += pg[j] * d;
        }

        const T* qi = qv2.data() + (h * l + i) * hd;
        T* gqi = gq ? gq->data() + (h * l + i) * hd : nullptr;
        for (std::size_t s = 0; s < w; ++s) {
          if (!ba[s] || pb[s] == T(0)) continue;
          const std::size_t j = i - meta->radius + s;
          const T dsv = pb[s] * (dp[s] - dotsum);
          const T* kj = kv2.data() + (h * l + j) * hd;
          if (gqi)
            for (std::size_t c = 0; c < hd; ++c) gqi[c] += dsv * inv_sqrt * kj[c];
          if (gk) {
            T* gkj = gk->data() + (h * l + j) * hd;
            for (std::size_t c = 0; c < hd; ++c) gkj[c] += dsv * inv_sqrt * qi[c];
          }
          if (gv) {
            T* gvj = gv->data() + (h * l + j) * hd;
            for (std::size_t c = 0; c < hd; ++c) gvj[c] += pb[s] * goi[c];
          }
          if (gtb) gtb->data()[h * nbuckets + meta->band_bucket[s]] += dsv;
        }
        for (std::size_t j = 0; j < g; ++j) {
          if (!ga[j] || pg[j] == T(0)) continue;
          const T dsv = pg[j] * (dp[w + j] - dotsum);
          const T* kj = kgv2->data() + (h * g + j) * hd;
          if (gqi)
            for (std::size_t c = 0; c < hd; ++c) gqi[c] += dsv * inv_sqrt * kj[c];
          if (gkg) {
            T* gkj = gkg->data() + (h * g + j) * hd;
            for (std::size_t c = 0; c < hd; ++c) gkj[c] += dsv * inv_sqrt * qi[c];
          }
          if (gvg) {
            T* gvj = gvg->data() + (h * g + j) * hd;
            for (std::size_t c = 0; c < hd; ++c) gvj[c] += pg[j] * goi[c];
          }
          if (gsb) gsb->data()[h * nbuckets + gb[j]] += dsv;
        }
      }
    }
  };
  // tape.push returned the node; attach backward through a second push-free path
  tp->set_backward(out_v, std::move(backward));
  return out_v;
}

}  // namespace

template <typename T>
typename Tape<T>::Var attention_layer(Tape<T>& tape, typename Tape<T>::Var x,
                                      const AttentionVars<T>& params, const PackedBatch& batch,
                                      const AttentionConfig& cfg, AttentionMode mode) {
  using Var = typename Tape<T>::Var;
  cfg.validate();
  const std::size_t l = batch.length();
  if (tape.value(x).dim(0) != l) throw ShapeError("attention_layer: x rows != batch length");
  const std::size_t heads = static_cast<std::size_t>(cfg.num_heads);

  std::size_t pad_count = 0;
  for (std::int32_t s : batch.segment_ids) pad_count += (s == 0);

  Var q = tape.split_heads(tape.matmul(x, params.wq), heads);
  Var k = tape.split_heads(tape.matmul(x, params.wk), heads);
  Var v = tape.split_heads(tape.matmul(x, params.wv), heads);

  std::size_t dead = 0;
  Var ctx;
  if (mode == AttentionMode::kDense) {
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(cfg.head_dim));
    auto scores = tape.scale(tape.matmul(q, k, false, true), inv_sqrt);
    auto bucket = std::make_shared<std::vector<std::int32_t>>(l * l);
    for (std::size_t i = 0; i < l; ++i)
      for (std::size_t j = 0; j < l; ++j)
        (*bucket)[i * l + j] = static_cast<std::int32_t>(relative_position_bucket(
            static_cast<std::int64_t>(j) - static_cast<std::int64_t>(i), cfg.num_buckets,
            cfg.max_distance));
    scores = tape.add_rel_bias(scores, params.token_bias, bucket);
    auto mask = std::make_shared<AttentionMask>(build_segment_mask(batch));
    auto mask_view = std::shared_ptr<const std::vector<std::uint8_t>>(mask, &mask->allowed);
    auto probs = tape.softmax_masked(scores, mask_view, &dead);
    ctx = tape.matmul(probs, v);
  } else {
    const bool with_globals = mode == AttentionMode::kTGlobal;
    Var kg{}, vg{};
    if (with_globals) {
      Var globals = compute_global_tokens(tape, x, batch, cfg.block_size, params.global_scale);
      kg = tape.split_heads(tape.matmul(globals, params.wk), heads);
      vg = tape.split_heads(tape.matmul(globals, params.wv), heads);
    }
    auto meta = std::make_shared<const SparseMeta>(make_sparse_meta(batch, cfg, with_globals));
    ctx = sparse_attention(tape, q, k, v, kg, vg, params.token_bias, params.side_bias, meta,
                           &dead);
  }
  if (dead != heads * pad_count)
    throw NumericError("attention_layer: fully-masked row for a non-padding query (got " +
                       std::to_string(dead) + " dead rows, expected " +
                       std::to_string(heads * pad_count) + ")");
  return tape.matmul(tape.merge_heads(ctx), params.wo);
}

// explicit instantiations
template typename Tape<double>::Var compute_global_tokens(Tape<double>&, Tape<double>::Var,
                                                          const PackedBatch&, int,
                                                          Tape<double>::Var);
template typename Tape<float>::Var compute_global_tokens(Tape<float>&, Tape<float>::Var,
                                                         const PackedBatch&, int,
                                                         Tape<float>::Var);
template typename Tape<double>::Var dense_attention(Tape<double>&, Tape<double>::Var,
                                                    Tape<double>::Var, Tape<double>::Var,
                                                    std::optional<Tape<double>::Var>,
                                                    std::shared_ptr<const AttentionMask>,
                                                    std::size_t*);
template typename Tape<float>::Var dense_attention(Tape<float>&, Tape<float>::Var,
                                                   Tape<float>::Var, Tape<float>::Var,
                                                   std::optional<Tape<float>::Var>,
                                                   std::shared_ptr<const AttentionMask>,
                                                   std::size_t*);
template typename Tape<double>::Var attention_layer(Tape<double>&, Tape<double>::Var,
                                                    const AttentionVars<double>&,
                                                    const PackedBatch&, const AttentionConfig&,
                                                    AttentionMode);
template typename Tape<float>::Var attention_layer(Tape<float>&, Tape<float>::Var,
                                                   const AttentionVars<float>&, const PackedBatch&,
                                                   const AttentionConfig&, AttentionMode);

}  // namespace longenc
