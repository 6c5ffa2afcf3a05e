// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "alignlab/errors.h"
#include "alignlab/model.h"
#include "test_util.h"

using namespace alignlab;
using alignlab::testing::max_abs_diff;
using alignlab::testing::random_tensor;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.vocab_size = 16;
  c.d_model = 16;
  c.n_layers = 4;
  c.n_heads = 4;
  c.n_kv_heads = 2;
  c.head_dim = 4;
  c.ffn_hidden = 24;
  c.window = 3;
  c.max_seq = 16;
  return c;
}

SequenceBatch random_batch(Rng& rng, std::size_t b, std::size_t s, std::size_t vocab) {
  std::vector<std::size_t> tokens(b * s);
  for (auto& t : tokens) t = rng.index(vocab);
  return SequenceBatch::from_tokens(b, s, std::move(tokens));
}

// Plain multi-head attention with explicit loops, kv head (h / group) serving query head h.
std::vector<double> reference_attention(const Tensor& q, const Tensor& k, const Tensor& v, const SequenceBatch& batch,
                                        LayerKind kind, std::size_t window) {
  const std::size_t b = q.shape()[0], s = q.shape()[1], h = q.shape()[2], d = q.shape()[3];
  const std::size_t hkv = k.shape()[2], group = h / hkv;
  const auto mask = attention_mask(batch, kind, window);
  std::vector<double> out(b * s * h * d, 0.0);
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t hh = 0; hh < h; ++hh)
      for (std::size_t i = 0; i < s; ++i) {
        std::vector<double> w(s, 0.0);
        double mx = -1e308;
        for (std::size_t j = 0; j < s; ++j) {
          if (mask[(bi * s + i) * s + j]) continue;
          double dot = 0.0;
          for (std::size_t e = 0; e < d; ++e)
            dot += q[((bi * s + i) * h + hh) * d + e] * k[((bi * s + j) * hkv + hh / group) * d + e];
          w[j] = dot / std::sqrt(static_cast<double>(d));
          mx = std::max(mx, w[j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < s; ++j) total += (w[j] = mask[(bi * s + i) * s + j] ? 0.0 : std::exp(w[j] - mx));
        for (std::size_t j = 0; j < s; ++j)
          for (std::size_t e = 0; e < d; ++e)
            out[((bi * s + i) * h + hh) * d + e] += w[j] / total * v[((bi * s + j) * hkv + hh / group) * d + e];
      }
  return out;
}

}  // namespace

TEST_CASE("layer pattern is three sliding layers then one full", "[model]") {
  using enum LayerKind;
  CHECK(layer_pattern(8) == std::vector<LayerKind>{SlidingWindowRoPE, SlidingWindowRoPE, SlidingWindowRoPE, FullNoPE,
                                                   SlidingWindowRoPE, SlidingWindowRoPE, SlidingWindowRoPE, FullNoPE});
  CHECK(layer_pattern(4) == std::vector<LayerKind>{SlidingWindowRoPE, SlidingWindowRoPE, SlidingWindowRoPE, FullNoPE});
  CHECK_THROWS_AS(layer_pattern(6), ValueError);
  const auto kinds = layer_pattern(8);
  CHECK(std::count(kinds.begin(), kinds.end(), FullNoPE) == 2);
}

TEST_CASE("config invariants", "[model]") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  c.n_kv_heads = 3;
  CHECK_THROWS_AS(c.validate(), ValueError);
  c = ModelConfig{};
  c.n_layers = 6;
  CHECK_THROWS_AS(c.validate(), ValueError);
  c.layout = AttentionLayout::AllFull;
  CHECK_NOTHROW(c.validate());
  c = ModelConfig{};
  c.window = c.max_seq + 1;
  CHECK_THROWS_AS(c.validate(), ValueError);
}

TEST_CASE("rope is an isometry that encodes relative position", "[model][rope]") {
  Rng rng(5);
  const Tensor x = random_tensor(rng, {2, 3, 8});
  const std::vector<double> zeros(3, 0.0);
  CHECK(rope_rotate(x, zeros, 10000.0).bitwise_equal(x));

  const std::vector<double> pos{3.0, 17.0, 250.0};
  const Tensor r = rope_rotate(x, pos, 10000.0);
  for (std::size_t row = 0; row < 6; ++row) {
    double before = 0.0, after = 0.0;
    for (std::size_t e = 0; e < 8; ++e) {
      before += x[row * 8 + e] * x[row * 8 + e];
      after += r[row * 8 + e] * r[row * 8 + e];
    }
    CHECK(std::abs(before - after) <= 1e-12 * before);
  }

  for (int trial = 0; trial < 100; ++trial) {
    const Tensor q = random_tensor(rng, {1, 1, 8});
    const Tensor k = random_tensor(rng, {1, 1, 8});
    const double p = rng.uniform(0, 500), pk = rng.uniform(0, 500), shift = rng.uniform(-200, 200);
    auto dot = [](const Tensor& a, const Tensor& b) {
      double acc = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
      return acc;
    };
    const double base_dot = dot(rope_rotate(q, std::vector{p}, 10000.0), rope_rotate(k, std::vector{pk}, 10000.0));
    const double shifted =
        dot(rope_rotate(q, std::vector{p + shift}, 10000.0), rope_rotate(k, std::vector{pk + shift}, 10000.0));
    CHECK(std::abs(base_dot - shifted) <= 1e-10);
  }
  CHECK_THROWS_AS(rope_rotate(random_tensor(rng, {1, 2, 5}), std::vector{0.0, 1.0}, 10000.0), ShapeError);
}

TEST_CASE("graph rope primitive agrees with rope_rotate", "[model][rope]") {
  Rng rng(6);
  const Tensor x = random_tensor(rng, {1, 3, 1, 8});
  const std::vector<double> pos{0.0, 5.0, 9.0};
  Graph g;
  const Tensor& a = g.value(g.rope(g.constant(x), pos, 500.0));
  const Tensor b = rope_rotate(Tensor({1, 3, 8}, std::vector<double>(x.values().begin(), x.values().end())), pos, 500.0);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("attention matches an explicit-loop reference", "[model][attention]") {
  Rng rng(7);
  const std::size_t b = 2, s = 6, d = 4;
  SequenceBatch batch = random_batch(rng, b, s, 8);
  for (std::size_t hkv : {4, 2, 1}) {
    const Tensor q = random_tensor(rng, {b, s, 4, d});
    const Tensor k = random_tensor(rng, {b, s, hkv, d});
    const Tensor v = random_tensor(rng, {b, s, hkv, d});
    Graph g;
    const auto res = attention(g, g.constant(q), g.constant(k), g.constant(v), LayerKind::FullNoPE, 64, batch, 1e4);
    const auto ref = reference_attention(q, k, v, batch, LayerKind::FullNoPE, 64);
    CHECK(max_abs_diff(g.value(res.output), Tensor({b, s, 4 * d}, ref)) <= 1e-12);
  }
}

TEST_CASE("saturated sliding window equals full attention under the same positional scheme", "[model][attention]") {
  Rng rng(8);
  const std::size_t b = 1, s = 7, d = 4;
  SequenceBatch batch = random_batch(rng, b, s, 8);
  CHECK(attention_mask(batch, LayerKind::SlidingWindowRoPE, s) == attention_mask(batch, LayerKind::FullNoPE, 1));
  const Tensor q = random_tensor(rng, {b, s, 2, d});
  const Tensor k = random_tensor(rng, {b, s, 1, d});
  const Tensor v = random_tensor(rng, {b, s, 1, d});
  Graph g;
  const auto sliding = attention(g, g.constant(q), g.constant(k), g.constant(v), LayerKind::SlidingWindowRoPE, s, batch, 1e4);
  Var qr = g.rope(g.constant(q), batch.positions, 1e4);
  Var kr = g.rope(g.constant(k), batch.positions, 1e4);
  const auto full = attention(g, qr, kr, g.constant(v), LayerKind::FullNoPE, 1, batch, 1e4);
  CHECK(max_abs_diff(g.value(sliding.output), g.value(full.output)) <= 1e-12);
}

TEST_CASE("cross-document attention weight is exactly zero", "[model][attention]") {
  Rng rng(9);
  SequenceBatch batch = random_batch(rng, 1, 8, 8);
  batch.doc_ids = {0, 0, 0, 1, 1, 1, 1, 1};
  const Tensor q = random_tensor(rng, {1, 8, 2, 4});
  const Tensor k = random_tensor(rng, {1, 8, 1, 4});
  for (LayerKind kind : {LayerKind::FullNoPE, LayerKind::SlidingWindowRoPE}) {
    Graph g;
    const auto res = attention(g, g.constant(q), g.constant(k), g.constant(k), kind, 8, batch, 1e4);
    const Tensor& p = g.value(res.probabilities);  // [1, 1, 2 * 8, 8]
    for (std::size_t grp = 0; grp < 2; ++grp)
      for (std::size_t i = 3; i < 8; ++i)
        for (std::size_t j = 0; j < 3; ++j) CHECK(p[(grp * 8 + i) * 8 + j] == 0.0);
    for (std::size_t row = 0; row < 16; ++row) {
      double total = 0.0;
      for (std::size_t j = 0; j < 8; ++j) {
        CHECK(p[row * 8 + j] >= 0.0);
        total += p[row * 8 + j];
      }
      CHECK(std::abs(total - 1.0) <= 1e-10);
    }
  }
}

TEST_CASE("sliding window blocks keys older than window - 1", "[model][attention]") {
  SequenceBatch batch = SequenceBatch::from_tokens(1, 5, {0, 0, 0, 0, 0});
  const auto m = attention_mask(batch, LayerKind::SlidingWindowRoPE, 2);
  // query 4 sees keys 3 and 4 only
  CHECK(m[4 * 5 + 2] == 1);
  CHECK(m[4 * 5 + 3] == 0);
  CHECK(m[4 * 5 + 4] == 0);
  CHECK_THROWS_AS(attention_mask(batch, LayerKind::SlidingWindowRoPE, 0), ValueError);
}

TEST_CASE("block with zero output projections is the identity", "[model][block]") {
  const ModelConfig c = small_config();
  Checkpoint params = init_params(c, 1);
  for (const char* leaf : {"attn.o_proj", "ffn.down_proj"}) {
    Tensor& t = params.at(param_names::layer(0, leaf));
    std::fill(t.mutable_values().begin(), t.mutable_values().end(), 0.0);
  }
  Rng rng(2);
  SequenceBatch batch = random_batch(rng, 2, 5, c.vocab_size);
  Graph g;
  BoundParams bound(g, params, false);
  const Tensor x = random_tensor(rng, {2, 5, c.d_model});
  Var xv = g.constant(x);
  CHECK(g.value(block_forward(g, xv, block_params(bound, 0), LayerKind::SlidingWindowRoPE, c, batch)).bitwise_equal(x));
}

TEST_CASE("parallel block differs from the sequential form", "[model][block]") {
  const ModelConfig c = small_config();
  const Checkpoint params = init_params(c, 3);
  Rng rng(4);
  SequenceBatch batch = random_batch(rng, 2, 5, c.vocab_size);
  Graph g;
  BoundParams bound(g, params, false);
  Var x = g.constant(random_tensor(rng, {2, 5, c.d_model}));
  const Tensor& par = g.value(block_forward(g, x, block_params(bound, 0), LayerKind::FullNoPE, c, batch));
  const Tensor& seq = g.value(sequential_block_forward(g, x, block_params(bound, 0), LayerKind::FullNoPE, c, batch));
  CHECK(max_abs_diff(par, seq) > 1e-6);
}

TEST_CASE("block gradient matches finite differences", "[model][block][gradient]") {
  const ModelConfig c = small_config();
  const Checkpoint params = init_params(c, 5);
  Rng rng(6);
  SequenceBatch batch = random_batch(rng, 1, 4, c.vocab_size);
  const Tensor probe_w = random_tensor(rng, {1, 4, c.d_model});
  std::vector<Tensor> point{random_tensor(rng, {1, 4, c.d_model})};
  std::vector<std::string> names;
  for (const char* leaf : {"norm.weight", "attn.q_proj", "attn.k_proj", "attn.v_proj", "attn.o_proj", "ffn.gate_proj",
                           "ffn.up_proj", "ffn.down_proj"}) {
    names.push_back(param_names::layer(0, leaf));
    point.push_back(params.at(names.back()));
  }
  GraphFunction fn = [&](Graph& g, std::span<const Var> in) {
    BlockParams p{in[1], in[2], in[3], in[4], in[5], in[6], in[7], in[8]};
    Var y = block_forward(g, in[0], p, LayerKind::SlidingWindowRoPE, c, batch);
    return g.sum(g.mul(y, g.constant(probe_w)));
  };
  CHECK(grad_check(fn, point) <= 1e-4);
}

TEST_CASE("embedding is shared between lookup and projection", "[model][tying]") {
  const ModelConfig c = small_config();
  const Checkpoint params = init_params(c, 7);
  CHECK(parameter_count(params) + c.vocab_size * c.d_model == untied_parameter_count(c));

  Rng rng(8);
  SequenceBatch batch = random_batch(rng, 1, 6, c.vocab_size);
  batch.token_ids[0] = 5;
  const Tensor base = model_forward(batch, c, params);
  Checkpoint bumped = params;
  bumped.at(param_names::kEmbedding).mutable_values()[5 * c.d_model] += 0.5;
  const Tensor moved = model_forward(batch, c, bumped);
  // lookup: every position downstream of token 5 changes; projection: logit column 5 changes everywhere
  for (std::size_t s = 0; s < 6; ++s) {
    for (std::size_t v = 0; v < c.vocab_size; ++v) CHECK(moved[s * c.vocab_size + v] != base[s * c.vocab_size + v]);
  }

  // tied gradient = lookup contribution + projection contribution
  Graph g;
  BoundParams bound(g, params, true);
  Var logits = model_logits(g, c, bound, batch);
  Var flat = g.reshape(logits, Shape{6, c.vocab_size});
  const std::vector<std::size_t> targets{1, 2, 3, 4, 5, 6};
  const Gradients tied = g.backward(g.cross_entropy(flat, targets, std::vector<double>(6, 1.0)));

  Graph gu;
  BoundParams ub(gu, params, true);
  Var out_embed = gu.param(params.at(param_names::kEmbedding));
  Var ulogits = gu.matmul(model_hidden(gu, c, ub, batch), gu.transpose(out_embed, 0, 1));
  const Gradients untied =
      gu.backward(gu.cross_entropy(gu.reshape(ulogits, Shape{6, c.vocab_size}), targets, std::vector<double>(6, 1.0)));
  const Tensor& gt = tied[bound[param_names::kEmbedding]];
  const Tensor& g_in = untied[ub[param_names::kEmbedding]];
  const Tensor& g_out = untied[out_embed];
  for (std::size_t i = 0; i < gt.size(); ++i) CHECK(std::abs(gt[i] - (g_in[i] + g_out[i])) <= 1e-12);

  GraphFunction embed_only = [&](Graph& gg, std::span<const Var> in) {
    Checkpoint rest = params;
    BoundParams bp(gg, rest, false);
    // rebind the embedding to the probed leaf
    Var h = gg.embed(in[0], batch.token_ids, Shape{1, 6});
    const auto kinds = layer_kinds(c);
    for (std::size_t l = 0; l < c.n_layers; ++l) h = block_forward(gg, h, block_params(bp, l), kinds[l], c, batch);
    h = gg.mul(gg.layernorm(h, c.layernorm_eps), bp[param_names::kFinalNorm]);
    Var lg = gg.reshape(gg.matmul(h, gg.transpose(in[0], 0, 1)), Shape{6, c.vocab_size});
    return gg.cross_entropy(lg, targets, std::vector<double>(6, 1.0));
  };
  CHECK(grad_check(embed_only, {params.at(param_names::kEmbedding)}) <= 1e-4);
}

TEST_CASE("out-of-range tokens are rejected with their position", "[model]") {
  const ModelConfig c = small_config();
  const Checkpoint params = init_params(c, 1);
  SequenceBatch batch = SequenceBatch::from_tokens(1, 3, {1, 2, 99});
  try {
    model_forward(batch, c, params);
    FAIL("expected ValueError");
  } catch (const ValueError& e) {
    CHECK(std::string(e.what()).find("position 2") != std::string::npos);
  }
}

TEST_CASE("no bias parameters exist or are accepted", "[model]") {
  const ModelConfig c = small_config();
  Checkpoint params = init_params(c, 1);
  for (const auto& name : params.names()) CHECK(name.find("bias") == std::string::npos);
  params.insert("layers.0.attn.q_bias", Tensor::zeros({c.n_heads * c.head_dim}));
  CHECK_THROWS_AS(validate_params(c, params), ValueError);
}

TEST_CASE("uniform position shifts leave layer outputs unchanged", "[model][property]") {
  const ModelConfig c = small_config();
  const Checkpoint params = init_params(c, 11);
  Rng rng(12);
  SequenceBatch batch = random_batch(rng, 2, 6, c.vocab_size);
  SequenceBatch shifted = batch;
  for (double& p : shifted.positions) p += 37.0;
  const Tensor x = random_tensor(rng, {2, 6, c.d_model});
  for (LayerKind kind : {LayerKind::FullNoPE, LayerKind::SlidingWindowRoPE}) {
    Graph g;
    BoundParams bound(g, params, false);
    const Tensor& a = g.value(block_forward(g, g.constant(x), block_params(bound, 0), kind, c, batch));
    const Tensor& b = g.value(block_forward(g, g.constant(x), block_params(bound, 0), kind, c, shifted));
    if (kind == LayerKind::FullNoPE) {
      CHECK(a.bitwise_equal(b));
    } else {
      CHECK(max_abs_diff(a, b) <= 1e-9);
    }
  }
}

TEST_CASE("kv cache accounting", "[model][kv]") {
  ModelConfig hybrid;
  hybrid.window = 4096;
  hybrid.max_seq = 262144;
  ModelConfig full = hybrid;
  full.layout = AttentionLayout::AllFull;

  for (std::size_t s : {1u, 100u, 4096u}) {
    CHECK(kv_cache_bytes(hybrid, s) == kv_cache_bytes(full, s));
  }
  const double ratio =
      static_cast<double>(kv_cache_bytes(hybrid, 131072)) / static_cast<double>(kv_cache_bytes(full, 131072));
  CHECK(std::abs(ratio - (0.25 * 131072 + 0.75 * 4096) / 131072) <= 1e-12);
  CHECK(std::abs(ratio - 0.2734375) <= 1e-12);

  // 2 (K,V) * bytes 2 => 4 * L * h * d * s
  CHECK(kv_cache_bytes(full, 1000) == 4ull * full.n_layers * full.n_kv_heads * full.head_dim * 1000);

  std::uint64_t prev = 0;
  for (std::size_t s = 1; s < 10000; s += 97) {
    const auto bytes = kv_cache_bytes(hybrid, s);
    CHECK(bytes >= prev);
    prev = bytes;
  }
  ModelConfig wide = hybrid;
  wide.dtype_bytes = 6;
  CHECK(kv_cache_bytes(wide, 5000) == 3 * kv_cache_bytes(hybrid, 5000));
  CHECK_THROWS_AS(kv_cache_bytes(hybrid, 0), ValueError);
}
