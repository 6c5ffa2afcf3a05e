// SPDX-License-Identifier: Apache-2.0
//
// Toy-scale decoder with interleaved sliding-window (RoPE) and full (NoPE) attention
// layers, grouped-query attention, parallel attention/FFN blocks without bias terms,
// tied input/output embeddings, and document masking.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "alignlab/checkpoint.h"
#include "alignlab/tensor.h"

namespace alignlab {

enum class LayerKind { SlidingWindowRoPE, FullNoPE };

const char* layer_kind_name(LayerKind kind);

enum class AttentionLayout {
  /// Three sliding-window layers followed by one full layer, repeated.
  Interleaved3To1,
  /// Every layer uses full attention without positional signal.
  AllFull,
};

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 64;
  std::size_t n_layers = 8;
  std::size_t n_heads = 8;
  std::size_t n_kv_heads = 2;
  std::size_t head_dim = 8;
  std::size_t ffn_hidden = 128;
  /// Query token plus window - 1 predecessors.
  std::size_t window = 64;
  std::size_t max_seq = 128;
  double rope_base = 10000.0;
  double layernorm_eps = 1e-5;
  std::size_t dtype_bytes = 2;
  AttentionLayout layout = AttentionLayout::Interleaved3To1;

  /// Throws ValueError on any violated invariant.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

/// Sliding layers first; full layers at indices 3, 7, 11, ...
std::vector<LayerKind> layer_pattern(std::size_t n_layers);
std::vector<LayerKind> layer_kinds(const ModelConfig& config);

/// Row-major batch x seq token grid with document ids and absolute positions.
struct SequenceBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::size_t> token_ids;
  std::vector<std::size_t> doc_ids;
  std::vector<double> positions;

  /// Single document per row, positions 0..seq-1.
  static SequenceBatch from_tokens(std::size_t batch, std::size_t seq, std::vector<std::size_t> tokens);
  void validate(std::size_t vocab_size) const;
};

/// 1 marks a blocked (query, key) pair. Layout [batch, seq, seq].
std::vector<std::uint8_t> attention_mask(const SequenceBatch& batch, LayerKind kind, std::size_t window);

namespace param_names {
inline constexpr const char* kEmbedding = "embed.weight";
inline constexpr const char* kFinalNorm = "final_norm.weight";
std::string layer(std::size_t index, const char* leaf);
}  // namespace param_names

/// Random initialization; rejects invalid configs.
Checkpoint init_params(const ModelConfig& config, std::uint64_t seed);
/// Shapes must match the config and no parameter may be a bias.
void validate_params(const ModelConfig& config, const Checkpoint& params);
std::size_t parameter_count(const Checkpoint& params);
/// Count the same architecture would have with a separate unembedding matrix.
std::size_t untied_parameter_count(const ModelConfig& config);

/// Checkpoint parameters bound as graph leaves.
class BoundParams {
 public:
  BoundParams(Graph& graph, const Checkpoint& params, bool trainable);
  Var operator[](const std::string& name) const;
  /// Points an existing name at another leaf, e.g. one supplied by grad_check.
  void rebind(const std::string& name, Var v);
  const std::vector<std::pair<std::string, Var>>& entries() const noexcept { return entries_; }

 private:
  std::vector<std::pair<std::string, Var>> entries_;
  std::unordered_map<std::string, Var> index_;
};

struct BlockParams {
  Var norm;
  Var q_proj, k_proj, v_proj, o_proj;
  Var gate_proj, up_proj, down_proj;
};

BlockParams block_params(const BoundParams& params, std::size_t layer);

struct AttentionResult {
  Var output;         // [batch, seq, heads * head_dim]
  Var probabilities;  // [batch, kv_heads, group * seq, seq]
};

/// q: [b, s, heads, hd]; k, v: [b, s, kv_heads, hd]. RoPE applied for sliding layers.
AttentionResult attention(Graph& g, Var q, Var k, Var v, LayerKind kind, std::size_t window, const SequenceBatch& batch,
                          double rope_base);

/// x + Attn(LN(x)) + FFN(LN(x)).
Var block_forward(Graph& g, Var x, const BlockParams& p, LayerKind kind, const ModelConfig& config,
                  const SequenceBatch& batch);
/// x' = x + Attn(LN(x)); x' + FFN(LN(x')). Used only for comparison against the parallel form.
Var sequential_block_forward(Graph& g, Var x, const BlockParams& p, LayerKind kind, const ModelConfig& config,
                             const SequenceBatch& batch);

/// Final normalized hidden states [b, s, d_model].
Var model_hidden(Graph& g, const ModelConfig& config, const BoundParams& params, const SequenceBatch& batch);
/// Logits [b, s, vocab] through the shared embedding matrix.
Var model_logits(Graph& g, const ModelConfig& config, const BoundParams& params, const SequenceBatch& batch);
Tensor model_forward(const SequenceBatch& batch, const ModelConfig& config, const Checkpoint& params);

/// Pairwise rotations of vectors [heads, seq, head_dim] by position * base^(-2i/head_dim).
Tensor rope_rotate(const Tensor& vectors, std::span<const double> positions, double base);

std::uint64_t kv_cache_bytes(const ModelConfig& config, std::size_t seq_len);

}  // namespace alignlab
