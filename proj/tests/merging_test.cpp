// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include "alignlab/errors.h"
#include "alignlab/merging.h"
#include "alignlab/model.h"
#include "test_util.h"

using namespace alignlab;
using alignlab::testing::random_tensor;
using Catch::Matchers::WithinAbs;

namespace {

using CkptPtr = std::shared_ptr<const Checkpoint>;

CkptPtr random_checkpoint(Rng& rng, double scale = 1.0) {
  auto c = std::make_shared<Checkpoint>();
  c->insert(param_names::kEmbedding, random_tensor(rng, {6, 3}, scale));
  c->insert("layers.0.attn.q_proj", random_tensor(rng, {3, 4}, scale));
  c->insert("final_norm.weight", random_tensor(rng, {3}, scale));
  return c;
}

CkptPtr constant_checkpoint(double value) {
  auto c = std::make_shared<Checkpoint>();
  c->insert(param_names::kEmbedding, Tensor::full({6, 3}, value));
  c->insert("layers.0.attn.q_proj", Tensor::full({3, 4}, value));
  c->insert("final_norm.weight", Tensor::full({3}, value));
  return c;
}

std::vector<double> random_weights(Rng& rng, std::size_t n) {
  std::vector<double> w(n);
  for (double& v : w) v = rng.uniform(0.05, 1.0);
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  for (double& v : w) v /= total;
  w[0] += 1.0 - std::accumulate(w.begin(), w.end(), 0.0);
  return w;
}

MergeTree random_tree(Rng& rng, int depth, std::vector<CkptPtr>& pool) {
  if (depth == 0) return MergeTree::of(pool[rng.index(pool.size())]);
  const std::size_t n = 2 + rng.index(2);
  std::vector<MergeTree> kids;
  for (std::size_t i = 0; i < n; ++i) kids.push_back(random_tree(rng, depth - 1, pool));
  return MergeTree::node(std::move(kids), random_weights(rng, n));
}

// Reference merge: plain left-to-right accumulation, independent of the library's summation.
Checkpoint naive_merge(const std::vector<CkptPtr>& inputs, const std::vector<double>& weights) {
  Checkpoint out;
  for (const auto& [name, t] : inputs[0]->entries()) {
    std::vector<double> v(t.size(), 0.0);
    for (std::size_t i = 0; i < inputs.size(); ++i)
      for (std::size_t e = 0; e < v.size(); ++e) v[e] += weights[i] * inputs[i]->at(name)[e];
    out.insert(name, Tensor(t.shape(), v));
  }
  return out;
}

}  // namespace

TEST_CASE("linear merge basics", "[merging]") {
  Rng rng(1);
  const CkptPtr a = random_checkpoint(rng), b = random_checkpoint(rng), c = random_checkpoint(rng);

  CHECK(linear_merge({{a}, {1.0}}).bitwise_equal(*a));
  CHECK(linear_merge({{a, a}, {0.3, 0.7}}).max_abs_diff(*a) <= 1e-15);

  const Checkpoint abc = linear_merge({{a, b, c}, {0.2, 0.3, 0.5}});
  CHECK(linear_merge({{c, a, b}, {0.5, 0.2, 0.3}}).bitwise_equal(abc));
  CHECK(linear_merge({{b, c, a}, {0.3, 0.5, 0.2}}).bitwise_equal(abc));
  CHECK(abc.max_abs_diff(naive_merge({a, b, c}, {0.2, 0.3, 0.5})) <= 1e-15);
  CHECK(abc.names() == a->names());
}

TEST_CASE("merge spec validation is strict", "[merging]") {
  Rng rng(2);
  const CkptPtr a = random_checkpoint(rng), b = random_checkpoint(rng);
  try {
    linear_merge({{a, b}, {0.5, 0.6}});
    FAIL("expected ValueError");
  } catch (const ValueError& e) {
    CHECK(std::string(e.what()).find("sum to 1.1") != std::string::npos);
  }
  CHECK_THROWS_AS(linear_merge({{a, b}, {0.5, 0.5 + 1e-10}}), ValueError);
  CHECK_THROWS_AS(linear_merge({{a, b}, {1.0}}), ValueError);
  CHECK_THROWS_AS(linear_merge({{}, {}}), ValueError);

  auto odd = std::make_shared<Checkpoint>(*a);
  odd->at("final_norm.weight") = Tensor::zeros({4});
  try {
    linear_merge({{a, odd}, {0.5, 0.5}});
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("final_norm.weight") != std::string::npos);
  }
}

TEST_CASE("linear merge is linear in its inputs", "[merging][property]") {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    std::vector<CkptPtr> inputs;
    for (int i = 0; i < 3; ++i) inputs.push_back(random_checkpoint(rng));
    const std::vector<double> w = random_weights(rng, 3);
    const double s = rng.uniform(-3.0, 3.0);
    std::vector<CkptPtr> scaled;
    for (const auto& in : inputs) {
      auto c = std::make_shared<Checkpoint>();
      for (const auto& [name, v] : in->entries()) {
        std::vector<double> x(v.values().begin(), v.values().end());
        for (double& e : x) e *= s;
        c->insert(name, Tensor(v.shape(), x));
      }
      scaled.push_back(c);
    }
    const Checkpoint merged = linear_merge({inputs, w});
    const Checkpoint merged_scaled = linear_merge({scaled, w});
    for (const auto& [name, v] : merged.entries())
      for (std::size_t e = 0; e < v.size(); ++e) REQUIRE_THAT(merged_scaled.at(name)[e], WithinAbs(s * v[e], 1e-12));
  }
}

TEST_CASE("compose merge multiplies weights along paths", "[merging]") {
  Rng rng(4);
  const CkptPtr a = random_checkpoint(rng), b = random_checkpoint(rng), c = random_checkpoint(rng);
  const MergeTree tree =
      MergeTree::node({MergeTree::node({MergeTree::of(a), MergeTree::of(b)}, {0.5, 0.5}), MergeTree::of(c)}, {0.5, 0.5});
  const MergeSpec flat = compose_merge(tree);
  REQUIRE(flat.inputs.size() == 3);
  CHECK(flat.inputs[0] == a);
  CHECK(flat.inputs[1] == b);
  CHECK(flat.inputs[2] == c);
  CHECK(flat.weights == std::vector<double>{0.25, 0.25, 0.5});

  const MergeTree shallow = MergeTree::node({MergeTree::of(a), MergeTree::of(b)}, {0.3, 0.7});
  const MergeSpec same = compose_merge(shallow);
  CHECK(same.weights == std::vector<double>{0.3, 0.7});
  CHECK(same.inputs == std::vector<CkptPtr>{a, b});

  MergeTree bad = shallow;
  bad.weights = {0.3, 0.6};
  CHECK_THROWS_AS(compose_merge(bad), ValueError);
  MergeTree mixed = MergeTree::of(a);
  mixed.children.push_back(MergeTree::of(b));
  CHECK_THROWS_AS(compose_merge(mixed), ValueError);
  CHECK_THROWS_AS(evaluate_tree(MergeTree{}), ValueError);
}

TEST_CASE("tree evaluation equals the flattened merge", "[merging][property]") {
  Rng rng(5);
  double worst = 0.0;
  for (int t = 0; t < 50; ++t) {
    std::vector<CkptPtr> pool;
    for (int i = 0; i < 5; ++i) pool.push_back(random_checkpoint(rng));
    const MergeTree tree = random_tree(rng, 3, pool);
    const MergeSpec flat = compose_merge(tree);
    CHECK_THAT(std::accumulate(flat.weights.begin(), flat.weights.end(), 0.0), WithinAbs(1.0, 1e-12));
    worst = std::max(worst, evaluate_tree(tree).max_abs_diff(linear_merge(flat)));
  }
  INFO("worst difference " << worst);
  CHECK(worst <= 1e-12);
}

TEST_CASE("polyak averaging", "[merging]") {
  Rng rng(6);
  const CkptPtr a = random_checkpoint(rng), b = random_checkpoint(rng), c = random_checkpoint(rng);
  const std::vector<CkptPtr> one = {a};
  CHECK(polyak_average(one).bitwise_equal(*a));
  const std::vector<CkptPtr> two = {a, b};
  const Checkpoint mid = polyak_average(two);
  for (const auto& [name, v] : mid.entries())
    for (std::size_t e = 0; e < v.size(); ++e) CHECK(v[e] == 0.5 * (a->at(name)[e] + b->at(name)[e]));
  const std::vector<CkptPtr> three = {a, b, c};
  CHECK(polyak_average(three).max_abs_diff(naive_merge(three, {1.0 / 3, 1.0 / 3, 1.0 / 3})) <= 1e-15);
  CHECK_THROWS_AS(polyak_average(std::vector<CkptPtr>{}), ValueError);
}

TEST_CASE("interpolation toward the parent", "[merging]") {
  Rng rng(7);
  const CkptPtr child = random_checkpoint(rng), parent = random_checkpoint(rng);
  CHECK(interpolate_to_parent(*child, *parent, 1.0).bitwise_equal(*child));
  CHECK(interpolate_to_parent(*child, *parent, 0.0).bitwise_equal(*parent));
  const Checkpoint mid = interpolate_to_parent(*child, *parent, 0.5);
  const std::vector<CkptPtr> pair = {child, parent};
  CHECK(mid.max_abs_diff(polyak_average(pair)) <= 1e-15);
  for (int t = 0; t < 20; ++t) {
    const double alpha = rng.uniform(), gamma = rng.uniform();
    const Checkpoint twice = interpolate_to_parent(interpolate_to_parent(*child, *parent, alpha), *parent, gamma);
    CHECK(twice.max_abs_diff(interpolate_to_parent(*child, *parent, alpha * gamma)) <= 1e-12);
  }
  CHECK_THROWS_AS(interpolate_to_parent(*child, *parent, 1.5), ValueError);
  CHECK_THROWS_AS(interpolate_to_parent(*child, *parent, -0.1), ValueError);
}

TEST_CASE("leave-one-out renormalizes the remaining weights", "[merging]") {
  Rng rng(8);
  const CkptPtr a = random_checkpoint(rng), b = random_checkpoint(rng), c = random_checkpoint(rng);
  const MergeSpec loo = leave_one_out({{a, b, c}, {0.2, 0.3, 0.5}}, 2);
  CHECK(loo.inputs == std::vector<CkptPtr>{a, b});
  CHECK_THAT(loo.weights[0], WithinAbs(0.4, 1e-15));
  CHECK_THAT(loo.weights[1], WithinAbs(0.6, 1e-15));
  const MergeSpec eq = leave_one_out({{a, b, c}, {1.0 / 3, 1.0 / 3, 1.0 / 3 + 1e-17}}, 0);
  CHECK_THAT(eq.weights[0], WithinAbs(0.5, 1e-15));
  CHECK_THAT(eq.weights[1], WithinAbs(0.5, 1e-15));
  CHECK_THROWS_AS(leave_one_out({{a}, {1.0}}, 0), ValueError);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 2 + rng.index(5);
    std::vector<CkptPtr> in(n, a);
    const MergeSpec out = leave_one_out({in, random_weights(rng, n)}, rng.index(n));
    CHECK_THAT(std::accumulate(out.weights.begin(), out.weights.end(), 0.0), WithinAbs(1.0, 1e-12));
  }
}

TEST_CASE("perturbation search", "[merging]") {
  // Expert i holds the constant i-th basis value, so a merged parameter reads off a weight.
  auto e0 = constant_checkpoint(1.0), e1 = constant_checkpoint(0.0), e2 = constant_checkpoint(0.0);
  const MergeSpec base{{e0, e1, e2}, {0.3, 0.3, 0.4}};
  std::size_t calls = 0;
  const MergeEvaluator weight_of_expert0 = [&](const Checkpoint& c) {
    ++calls;
    return std::map<std::string, double>{{"w0", c.at("final_norm.weight")[0]}};
  };
  const PerturbResult r = perturb_search(base, 0.1, weight_of_expert0);
  CHECK(r.ranked.size() == 7);
  CHECK(calls == 7);
  CHECK(r.skipped.empty());
  for (const auto& c : r.ranked) {
    double total = 0.0;
    for (double w : c.weights) {
      CHECK(w >= 0.0);
      total += w;
    }
    CHECK_THAT(total, WithinAbs(1.0, 1e-12));
  }
  CHECK(r.ranked.front().id == 1);
  CHECK_THAT(r.ranked.front().weights[0], WithinAbs(0.4, 1e-15));
  CHECK(r.ranked.back().id == 2);

  // A large step pushes some coordinates off the simplex; those are recorded, not evaluated.
  calls = 0;
  const PerturbResult big = perturb_search({{e0, e1, e2}, {0.1, 0.1, 0.8}}, 0.3, weight_of_expert0);
  CHECK(big.ranked.size() + big.skipped.size() == 7);
  CHECK(big.skipped.size() == 3);
  CHECK(calls == big.ranked.size());
  CHECK_THROWS_AS(perturb_search(base, 0.0, weight_of_expert0), ValueError);
}

TEST_CASE("perturbation candidates stay on the simplex", "[merging][property]") {
  Rng rng(9);
  const MergeEvaluator flat = [](const Checkpoint&) { return std::map<std::string, double>{{"x", 0.0}}; };
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 1 + rng.index(5);
    std::vector<CkptPtr> in(n, constant_checkpoint(1.0));
    const PerturbResult r = perturb_search({in, random_weights(rng, n)}, rng.uniform(0.01, 0.6), flat);
    CHECK(r.ranked.size() + r.skipped.size() == 2 * n + 1);
    for (std::size_t i = 0; i + 1 < r.ranked.size(); ++i) CHECK(r.ranked[i].id < r.ranked[i + 1].id);
    for (const auto& c : r.ranked) {
      double total = 0.0;
      for (double w : c.weights) {
        REQUIRE(w >= 0.0);
        total += w;
      }
      REQUIRE_THAT(total, WithinAbs(1.0, 1e-12));
    }
  }
}

TEST_CASE("selective embedding merge only touches listed rows", "[merging]") {
  Rng rng(10);
  const CkptPtr base = random_checkpoint(rng), donor = random_checkpoint(rng);
  CHECK(selective_embedding_merge(*base, *donor, std::vector<std::size_t>{}).bitwise_equal(*base));

  const std::vector<std::size_t> all = {0, 1, 2, 3, 4, 5};
  const Checkpoint full = selective_embedding_merge(*base, *donor, all);
  CHECK(full.at(param_names::kEmbedding).bitwise_equal(donor->at(param_names::kEmbedding)));

  const std::vector<std::size_t> some = {1, 4};
  const Checkpoint part = selective_embedding_merge(*base, *donor, some);
  const Tensor& emb = part.at(param_names::kEmbedding);
  for (std::size_t row = 0; row < 6; ++row) {
    const Checkpoint& src = (row == 1 || row == 4) ? *donor : *base;
    for (std::size_t d = 0; d < 3; ++d) CHECK(emb[row * 3 + d] == src.at(param_names::kEmbedding)[row * 3 + d]);
  }
  for (const auto& [name, v] : part.entries()) {
    if (name != param_names::kEmbedding) CHECK(v.bitwise_equal(base->at(name)));
  }
  CHECK_THROWS_AS(selective_embedding_merge(*base, *donor, std::vector<std::size_t>{6}), ValueError);
  Checkpoint bare;
  bare.insert("final_norm.weight", Tensor::zeros({3}));
  CHECK_THROWS_AS(selective_embedding_merge(bare, *donor, some), ValueError);
}
