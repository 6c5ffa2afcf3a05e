// SPDX-License-Identifier: Apache-2.0
#include "alignlab/model.h"

#include <cmath>
#include <string_view>

#include "alignlab/errors.h"
#include "alignlab/rng.h"

namespace alignlab {

namespace {

// exp(kMaskedLogit - rowmax) underflows to exactly 0 for any finite row max.
constexpr double kMaskedLogit = -1e300;

std::string count_msg(const char* what, std::size_t v) { return std::string(what) + " = " + std::to_string(v); }

}  // namespace

const char* layer_kind_name(LayerKind kind) {
  return kind == LayerKind::SlidingWindowRoPE ? "sliding-window-rope" : "full-nope";
}

void ModelConfig::validate() const {
  const std::pair<const char*, std::size_t> positive[] = {
      {"vocab_size", vocab_size}, {"d_model", d_model}, {"n_layers", n_layers},     {"n_heads", n_heads},
      {"n_kv_heads", n_kv_heads}, {"head_dim", head_dim}, {"ffn_hidden", ffn_hidden}, {"max_seq", max_seq},
      {"dtype_bytes", dtype_bytes}};
  for (const auto& [name, v] : positive) {
    if (v == 0) throw ValueError(std::string("model config: ") + name + " must be positive");
  }
  if (window < 1) throw ValueError("model config: window must be >= 1");
  if (n_heads % n_kv_heads != 0) {
    throw ValueError("model config: n_heads (" + std::to_string(n_heads) + ") not divisible by n_kv_heads (" +
                     std::to_string(n_kv_heads) + ")");
  }
  if (window > max_seq) throw ValueError("model config: window exceeds max_seq");
  if (layout == AttentionLayout::Interleaved3To1 && n_layers % 4 != 0) {
    throw ValueError("model config: 3:1 interleaving needs n_layers divisible by 4, " + count_msg("n_layers", n_layers));
  }
  if (layout == AttentionLayout::Interleaved3To1 && head_dim % 2 != 0) {
    throw ValueError("model config: rotary layers need an even head_dim");
  }
  if (!(rope_base > 0.0)) throw ValueError("model config: rope_base must be positive");
  if (!(layernorm_eps >= 0.0)) throw ValueError("model config: layernorm_eps must be >= 0");
}

std::vector<LayerKind> layer_pattern(std::size_t n_layers) {
  if (n_layers == 0 || n_layers % 4 != 0) {
    throw ValueError("layer_pattern: n_layers must be a positive multiple of 4, got " + std::to_string(n_layers));
  }
  std::vector<LayerKind> kinds(n_layers, LayerKind::SlidingWindowRoPE);
  for (std::size_t i = 3; i < n_layers; i += 4) kinds[i] = LayerKind::FullNoPE;
  return kinds;
}

std::vector<LayerKind> layer_kinds(const ModelConfig& config) {
  if (config.layout == AttentionLayout::AllFull) return std::vector<LayerKind>(config.n_layers, LayerKind::FullNoPE);
  return layer_pattern(config.n_layers);
}

SequenceBatch SequenceBatch::from_tokens(std::size_t batch, std::size_t seq, std::vector<std::size_t> tokens) {
  SequenceBatch out;
  out.batch = batch;
  out.seq = seq;
  out.token_ids = std::move(tokens);
  out.doc_ids.assign(batch * seq, 0);
  out.positions.resize(batch * seq);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t s = 0; s < seq; ++s) out.positions[b * seq + s] = static_cast<double>(s);
  return out;
}

void SequenceBatch::validate(std::size_t vocab_size) const {
  const std::size_t n = batch * seq;
  if (n == 0) throw ShapeError("sequence batch: empty");
  if (token_ids.size() != n || doc_ids.size() != n || positions.size() != n) {
    throw ShapeError("sequence batch: token/doc/position grids must each hold batch * seq entries");
  }
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t s = 0; s < seq; ++s) {
      const std::size_t i = b * seq + s;
      if (token_ids[i] >= vocab_size) {
        throw ValueError("sequence batch: token " + std::to_string(token_ids[i]) + " out of range at row " +
                         std::to_string(b) + ", position " + std::to_string(s));
      }
      if (s > 0 && doc_ids[i] < doc_ids[i - 1]) {
        throw ValueError("sequence batch: doc_ids decrease at row " + std::to_string(b) + ", position " +
                         std::to_string(s));
      }
    }
  }
}

std::vector<std::uint8_t> attention_mask(const SequenceBatch& batch, LayerKind kind, std::size_t window) {
  if (window < 1) throw ValueError("attention: window must be >= 1");
  const std::size_t s = batch.seq;
  std::vector<std::uint8_t> mask(batch.batch * s * s, 0);
  for (std::size_t b = 0; b < batch.batch; ++b) {
    const std::size_t* docs = batch.doc_ids.data() + b * s;
    for (std::size_t q = 0; q < s; ++q)
      for (std::size_t k = 0; k < s; ++k) {
        bool blocked = k > q || docs[k] != docs[q];
        if (kind == LayerKind::SlidingWindowRoPE && q - std::min(q, k) >= window) blocked = true;
        mask[(b * s + q) * s + k] = blocked ? 1 : 0;
      }
  }
  return mask;
}

namespace param_names {
std::string layer(std::size_t index, const char* leaf) { return "layers." + std::to_string(index) + "." + leaf; }
}  // namespace param_names

namespace {

const char* const kBlockLeaves[] = {"norm.weight",    "attn.q_proj",  "attn.k_proj",  "attn.v_proj",
                                    "attn.o_proj",    "ffn.gate_proj", "ffn.up_proj", "ffn.down_proj"};

std::vector<std::pair<std::string, Shape>> expected_shapes(const ModelConfig& c) {
  const std::size_t qd = c.n_heads * c.head_dim;
  const std::size_t kvd = c.n_kv_heads * c.head_dim;
  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back(param_names::kEmbedding, Shape{c.vocab_size, c.d_model});
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const Shape shapes[] = {{c.d_model},          {c.d_model, qd},  {c.d_model, kvd}, {c.d_model, kvd},
                            {qd, c.d_model},       {c.d_model, c.ffn_hidden}, {c.d_model, c.ffn_hidden},
                            {c.ffn_hidden, c.d_model}};
    for (std::size_t i = 0; i < std::size(kBlockLeaves); ++i) {
      out.emplace_back(param_names::layer(l, kBlockLeaves[i]), shapes[i]);
    }
  }
  out.emplace_back(param_names::kFinalNorm, Shape{c.d_model});
  return out;
}

}  // namespace

Checkpoint init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  Checkpoint ckpt;
  for (auto& [name, shape] : expected_shapes(config)) {
    const std::size_t n = numel(shape);
    std::vector<double> v(n);
    if (name.ends_with("norm.weight")) {
      std::fill(v.begin(), v.end(), 1.0);
    } else if (name == param_names::kEmbedding) {
      for (double& x : v) x = 0.1 * rng.normal();
    } else {
      const double stddev = 1.0 / std::sqrt(static_cast<double>(shape[0]));
      const bool output_proj = name.ends_with("o_proj") || name.ends_with("down_proj");
      const double s = output_proj ? stddev / std::sqrt(2.0 * static_cast<double>(config.n_layers)) : stddev;
      for (double& x : v) x = s * rng.normal();
    }
    ckpt.insert(name, Tensor(shape, std::move(v)));
  }
  ckpt.provenance = "init(seed=" + std::to_string(seed) + ")";
  return ckpt;
}

void validate_params(const ModelConfig& config, const Checkpoint& params) {
  for (const auto& [name, _] : params.entries()) {
    if (name.find("bias") != std::string::npos) throw ValueError("model parameters may not contain biases: '" + name + "'");
  }
  for (const auto& [name, shape] : expected_shapes(config)) {
    if (!params.contains(name)) throw ValueError("model parameters: missing '" + name + "'");
    if (params.at(name).shape() != shape) {
      throw ShapeError("model parameters: '" + name + "' has shape " + shape_str(params.at(name).shape()) +
                       ", expected " + shape_str(shape));
    }
  }
}

std::size_t parameter_count(const Checkpoint& params) { return params.element_count(); }

std::size_t untied_parameter_count(const ModelConfig& config) {
  std::size_t total = 0;
  for (const auto& [_, shape] : expected_shapes(config)) total += numel(shape);
  return total + config.vocab_size * config.d_model;
}

BoundParams::BoundParams(Graph& graph, const Checkpoint& params, bool trainable) {
  for (const auto& [name, t] : params.entries()) {
    const Var v = graph.leaf(t, trainable);
    entries_.emplace_back(name, v);
    index_.emplace(name, v);
  }
}

void BoundParams::rebind(const std::string& name, Var v) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValueError("bound parameters: no '" + name + "'");
  it->second = v;
  for (auto& entry : entries_) {
    if (entry.first == name) entry.second = v;
  }
}

Var BoundParams::operator[](const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValueError("bound parameters: no '" + name + "'");
  return it->second;
}

BlockParams block_params(const BoundParams& p, std::size_t l) {
  using param_names::layer;
  return BlockParams{p[layer(l, "norm.weight")],   p[layer(l, "attn.q_proj")],  p[layer(l, "attn.k_proj")],
                     p[layer(l, "attn.v_proj")],   p[layer(l, "attn.o_proj")],  p[layer(l, "ffn.gate_proj")],
                     p[layer(l, "ffn.up_proj")],   p[layer(l, "ffn.down_proj")]};
}

AttentionResult attention(Graph& g, Var q, Var k, Var v, LayerKind kind, std::size_t window, const SequenceBatch& batch,
                          double rope_base) {
  if (window < 1) throw ValueError("attention: window must be >= 1");
  const Shape& qs = g.shape(q);
  const Shape& ks = g.shape(k);
  if (qs.size() != 4 || ks.size() != 4 || g.shape(v) != ks || qs[0] != ks[0] || qs[1] != ks[1] || qs[3] != ks[3]) {
    throw ShapeError("attention: q " + shape_str(qs) + ", k " + shape_str(ks) + ", v " + shape_str(g.shape(v)));
  }
  const std::size_t b = qs[0], s = qs[1], h = qs[2], hd = qs[3], hkv = ks[2];
  if (h % hkv != 0) throw ShapeError("attention: query heads not divisible by kv heads");
  if (b != batch.batch || s != batch.seq) throw ShapeError("attention: batch grid does not match q");
  const std::size_t group = h / hkv;

  if (kind == LayerKind::SlidingWindowRoPE) {
    q = g.rope(q, batch.positions, rope_base);
    k = g.rope(k, batch.positions, rope_base);
  }
  // [b, h, s, hd] with heads of one kv group contiguous -> [b, hkv, group * s, hd]
  Var qh = g.reshape(g.transpose(q, 1, 2), Shape{b, hkv, group * s, hd});
  Var kh = g.transpose(g.transpose(k, 1, 2), 2, 3);  // [b, hkv, hd, s]
  Var vh = g.transpose(v, 1, 2);                     // [b, hkv, s, hd]

  Var scores = g.scale(g.matmul(qh, kh), 1.0 / std::sqrt(static_cast<double>(hd)));
  const std::vector<std::uint8_t> row_mask = attention_mask(batch, kind, window);
  std::vector<std::uint8_t> mask(b * hkv * group * s * s);
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t kvh = 0; kvh < hkv; ++kvh)
      for (std::size_t gi = 0; gi < group; ++gi) {
        std::uint8_t* dst = mask.data() + (((bi * hkv + kvh) * group + gi) * s) * s;
        std::copy_n(row_mask.data() + bi * s * s, s * s, dst);
      }
  scores = g.masked_fill(scores, std::move(mask), Shape{b, hkv, group * s, s}, kMaskedLogit);
  Var probs = g.softmax(scores);
  Var out = g.matmul(probs, vh);  // [b, hkv, group * s, hd]
  out = g.reshape(g.transpose(g.reshape(out, Shape{b, h, s, hd}), 1, 2), Shape{b, s, h * hd});
  return {out, probs};
}

namespace {

Var normed(Graph& g, Var x, Var gain, double eps) { return g.mul(g.layernorm(x, eps), gain); }

Var attention_branch(Graph& g, Var h, const BlockParams& p, LayerKind kind, const ModelConfig& c,
                     const SequenceBatch& batch) {
  const std::size_t b = batch.batch, s = batch.seq;
  Var q = g.reshape(g.matmul(h, p.q_proj), Shape{b, s, c.n_heads, c.head_dim});
  Var k = g.reshape(g.matmul(h, p.k_proj), Shape{b, s, c.n_kv_heads, c.head_dim});
  Var v = g.reshape(g.matmul(h, p.v_proj), Shape{b, s, c.n_kv_heads, c.head_dim});
  return g.matmul(attention(g, q, k, v, kind, c.window, batch, c.rope_base).output, p.o_proj);
}

Var ffn_branch(Graph& g, Var h, const BlockParams& p) {
  return g.matmul(g.swiglu(g.matmul(h, p.gate_proj), g.matmul(h, p.up_proj)), p.down_proj);
}

}  // namespace

Var block_forward(Graph& g, Var x, const BlockParams& p, LayerKind kind, const ModelConfig& config,
                  const SequenceBatch& batch) {
  const Shape& xs = g.shape(x);
  if (xs != Shape{batch.batch, batch.seq, config.d_model}) {
    throw ShapeError("block: input " + shape_str(xs) + " does not match batch/d_model");
  }
  Var h = normed(g, x, p.norm, config.layernorm_eps);
  return g.add(g.add(x, attention_branch(g, h, p, kind, config, batch)), ffn_branch(g, h, p));
}

Var sequential_block_forward(Graph& g, Var x, const BlockParams& p, LayerKind kind, const ModelConfig& config,
                             const SequenceBatch& batch) {
  Var h = normed(g, x, p.norm, config.layernorm_eps);
  Var mid = g.add(x, attention_branch(g, h, p, kind, config, batch));
  return g.add(mid, ffn_branch(g, normed(g, mid, p.norm, config.layernorm_eps), p));
}

Var model_hidden(Graph& g, const ModelConfig& config, const BoundParams& params, const SequenceBatch& batch) {
  config.validate();
  batch.validate(config.vocab_size);
  if (batch.seq > config.max_seq) throw ValueError("model: sequence longer than max_seq");
  Var x = g.embed(params[param_names::kEmbedding], batch.token_ids, Shape{batch.batch, batch.seq});
  const auto kinds = layer_kinds(config);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    x = block_forward(g, x, block_params(params, l), kinds[l], config, batch);
  }
  return normed(g, x, params[param_names::kFinalNorm], config.layernorm_eps);
}

Var model_logits(Graph& g, const ModelConfig& config, const BoundParams& params, const SequenceBatch& batch) {
  Var h = model_hidden(g, config, params, batch);
  Var unembed = g.transpose(params[param_names::kEmbedding], 0, 1);  // tied: the same leaf as the lookup table
  return g.matmul(h, unembed);
}

Tensor model_forward(const SequenceBatch& batch, const ModelConfig& config, const Checkpoint& params) {
  validate_params(config, params);
  Graph g;
  BoundParams bound(g, params, false);
  return g.value(model_logits(g, config, bound, batch));
}

Tensor rope_rotate(const Tensor& vectors, std::span<const double> positions, double base) {
  const Shape& s = vectors.shape();
  if (s.size() != 3) throw ShapeError("rope_rotate: expects [heads, seq, head_dim], got " + shape_str(s));
  const std::size_t h = s[0], seq = s[1], d = s[2];
  if (d % 2 != 0) throw ShapeError("rope_rotate: head_dim must be even, got " + std::to_string(d));
  if (positions.size() != seq) throw ShapeError("rope_rotate: one position per sequence index required");
  std::vector<double> out(vectors.size());
  for (std::size_t hh = 0; hh < h; ++hh)
    for (std::size_t t = 0; t < seq; ++t)
      for (std::size_t i = 0; i < d / 2; ++i) {
        const double angle = positions[t] * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
        const double c = std::cos(angle), sn = std::sin(angle);
        const std::size_t o = (hh * seq + t) * d + 2 * i;
        out[o] = vectors[o] * c - vectors[o + 1] * sn;
        out[o + 1] = vectors[o] * sn + vectors[o + 1] * c;
      }
  return Tensor(s, std::move(out));
}

std::uint64_t kv_cache_bytes(const ModelConfig& config, std::size_t seq_len) {
  if (seq_len < 1) throw ValueError("kv_cache_bytes: seq_len must be >= 1");
  config.validate();
  const std::uint64_t per_token = 2ull * config.n_kv_heads * config.head_dim * config.dtype_bytes;
  std::uint64_t total = 0;
  for (LayerKind kind : layer_kinds(config)) {
    const std::size_t cached = kind == LayerKind::FullNoPE ? seq_len : std::min(config.window, seq_len);
    total += per_token * cached;
  }
  return total;
}

}  // namespace alignlab
