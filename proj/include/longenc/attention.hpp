#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "longenc/tape.hpp"
#include "longenc/tensor.hpp"

namespace longenc {

enum class AttentionMode { kDense, kLocal, kTGlobal };

std::string to_string(AttentionMode m);
AttentionMode attention_mode_from_string(const std::string& s);

struct AttentionConfig {
  int radius = 127;      // tokens attended on each side in the local band
  int block_size = 16;   // tokens aggregated into one global token
  int num_heads = 4;
  int head_dim = 16;
  int num_buckets = 32;  // relative-position bias buckets (even)
  int max_distance = 128;

  void validate() const;
  int d_model() const { return num_heads * head_dim; }
};

// Token ids plus packing metadata. segment_ids: 0 = padding, >= 1 = example
// id in non-decreasing runs. positions restart at 0 at each segment start.
struct PackedBatch {
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> segment_ids;
  std::vector<std::int32_t> positions;

  std::size_t length() const { return tokens.size(); }
  void validate() const;

  // Single segment covering every position, positions 0..n-1.
  static PackedBatch single_segment(std::vector<std::int32_t> tokens);
};

// Dense boolean (queries x keys) mask.
struct AttentionMask {
  std::size_t num_queries = 0;
  std::size_t num_keys = 0;
  std::vector<std::uint8_t> allowed;  // row-major [num_queries * num_keys]

  AttentionMask() = default;
  AttentionMask(std::size_t q, std::size_t k) : num_queries(q), num_keys(k), allowed(q * k, 0) {}
  std::uint8_t& at(std::size_t i, std::size_t j) { return allowed[i * num_keys + j]; }
  std::uint8_t at(std::size_t i, std::size_t j) const { return allowed[i * num_keys + j]; }
  std::size_t popcount() const;
};

// T5 relative-position bucketing. Bidirectional: sign picks the half, exact
// buckets for small |rel|, log-spaced up to max_distance, clamped beyond.
// Unidirectional (decoder): rel > 0 clamps to 0, full bucket range on -rel.
int relative_position_bucket(std::int64_t rel, int num_buckets, int max_distance,
                             bool bidirectional = true);

// allowed[i][j] <=> |i-j| <= r, same segment, segment != 0.
AttentionMask build_local_mask(const PackedBatch& batch, int radius);

// allowed[i][j] <=> segment_ids[i] != 0 and segment_ids[i] == global_segment[j].
AttentionMask build_global_mask(const PackedBatch& batch,
                                const std::vector<std::int32_t>& global_segment);

// Dominant segment id per block of k tokens: majority over non-pad members,
// ties to the lower id, 0 if the whole block is padding.
std::vector<std::int32_t> block_segments(const PackedBatch& batch, int block_size);

std::size_t num_blocks(std::size_t length, int block_size);

// Exact allowed (query, key) pair counts without materializing masks.
// tglobal = local band pairs + token-to-global pairs.
std::int64_t count_kv_pairs(std::size_t l, int radius, int block_size, AttentionMode mode);
std::int64_t count_kv_pairs(const PackedBatch& batch, int radius, int block_size,
                            AttentionMode mode);

// Per-layer attention parameters. The dense/local modes leave side_bias and
// global_scale unused; tglobal adds exactly num_heads*num_buckets + d_model
// values on top of the local set.
template <typename T>
struct AttentionParams {
  Tensor<T> wq, wk, wv, wo;        // [d_model, d_model]
  Tensor<T> token_bias;            // [num_heads, num_buckets]
  Tensor<T> side_bias;             // [num_heads, num_buckets] (tglobal only)
  Tensor<T> global_scale;          // [d_model]               (tglobal only)
};

template <typename T>
struct AttentionVars {
  using Var = typename Tape<T>::Var;
  Var wq, wk, wv, wo, token_bias;
  Var side_bias{}, global_scale{};
};

// Score/probability tensor instrumentation for the sparse kernels. Tracks
// live and peak float counts of materialized score-shaped storage only.
namespace attn_instr {
void reset();
std::int64_t peak_score_floats();
void note_alloc(std::int64_t n);
void note_free(std::int64_t n);
}  // namespace attn_instr

// Sum-then-normalize per-block global token embeddings, recomputed from the
// current layer input. Returns the [g, d] tape var; the caller pairs it with
// block_segments() for masking. All-padding blocks come out as zero rows.
template <typename T>
typename Tape<T>::Var compute_global_tokens(Tape<T>& tape, typename Tape<T>::Var x,
                                            const PackedBatch& batch, int block_size,
                                            typename Tape<T>::Var scale);

// O(n_q * n_k) masked multi-head attention over explicit q/k/v and bias used
// as the ground-truth route and the dense encoder/decoder path. Dead query
// rows produce zero output rows.
template <typename T>
typename Tape<T>::Var dense_attention(Tape<T>& tape, typename Tape<T>::Var q,
                                      typename Tape<T>::Var k, typename Tape<T>::Var v,
                                      std::optional<typename Tape<T>::Var> bias,
                                      std::shared_ptr<const AttentionMask> mask,
                                      std::size_t* dead_rows = nullptr);

// Full attention layer in a given mode: projections, bias tables, kernel,
// output projection. x is [l, d_model]; result is [l, d_model].
template <typename T>
typename Tape<T>::Var attention_layer(Tape<T>& tape, typename Tape<T>::Var x,
                                      const AttentionVars<T>& params, const PackedBatch& batch,
                                      const AttentionConfig& cfg, AttentionMode mode);

extern template typename Tape<double>::Var compute_global_tokens(Tape<double>&,
                                                                 Tape<double>::Var,
                                                                 const PackedBatch&, int,
                                                                 Tape<double>::Var);
extern template typename Tape<float>::Var compute_global_tokens(Tape<float>&, Tape<float>::Var,
                                                                const PackedBatch&, int,
                                                                Tape<float>::Var);

}  // namespace longenc
