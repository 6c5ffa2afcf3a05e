// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "alignlab/errors.h"
#include "alignlab/tensor.h"
#include "test_util.h"

using namespace alignlab;
using alignlab::testing::random_tensor;
using Catch::Matchers::WithinAbs;

namespace {

// Contract a node against fixed random weights so every output coordinate matters.
Var probe(Graph& g, Var v, std::uint64_t seed) {
  Rng rng(seed);
  return g.sum(g.mul(v, g.constant(random_tensor(rng, g.shape(v)))));
}

double check_primitive(const GraphFunction& fn, std::vector<Shape> shapes, std::uint64_t seed, int points = 20,
                       double scale = 1.0) {
  Rng rng(seed);
  double worst = 0.0;
  for (int p = 0; p < points; ++p) {
    std::vector<Tensor> point;
    for (const Shape& s : shapes) point.push_back(random_tensor(rng, s, scale));
    worst = std::max(worst, grad_check(fn, point));
  }
  return worst;
}

}  // namespace

TEST_CASE("tensor rejects non-finite and malformed values", "[tensor]") {
  CHECK_THROWS_AS(Tensor({2}, {1.0, std::numeric_limits<double>::quiet_NaN()}), ValueError);
  CHECK_THROWS_AS(Tensor({2}, {1.0, std::numeric_limits<double>::infinity()}), ValueError);
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
  CHECK_THROWS_AS(Tensor({0}, {}), ShapeError);
}

TEST_CASE("matmul by identity returns the operand", "[tensor]") {
  Rng rng(1);
  Graph g;
  Var eye = g.constant(Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
  Var a = g.constant(random_tensor(rng, {3, 3}));
  CHECK(g.value(g.matmul(eye, a)).bitwise_equal(g.value(a)));
}

TEST_CASE("shape rule violations name the offending dimensions", "[tensor]") {
  Graph g;
  Var a = g.constant(Tensor::zeros({2, 3}));
  Var b = g.constant(Tensor::zeros({4, 2}));
  try {
    g.matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("[2, 3] x [4, 2]") != std::string::npos);
  }
  CHECK_THROWS_AS(g.add(a, g.constant(Tensor::zeros({2}))), ShapeError);
  CHECK_THROWS_AS(g.swiglu(a, b), ShapeError);
  CHECK_THROWS_AS(g.slice(a, 1, 2, 5), ShapeError);
  CHECK_NOTHROW(g.add(a, g.constant(Tensor::zeros({3}))));
}

TEST_CASE("softmax of zeros is uniform", "[tensor]") {
  Graph g;
  const Tensor& y = g.value(g.softmax(g.constant(Tensor::zeros({3}))));
  for (double v : y.values()) CHECK_THAT(v, WithinAbs(1.0 / 3.0, 1e-15));
}

TEST_CASE("swiglu vanishes at zero", "[tensor]") {
  Graph g;
  const Tensor& y = g.value(g.swiglu(g.constant(Tensor::zeros({2, 4})), g.constant(Tensor::zeros({2, 4}))));
  for (double v : y.values()) CHECK(v == 0.0);
}

TEST_CASE("softmax rows are simplices", "[tensor][property]") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Graph g;
    const Tensor& y = g.value(g.softmax(g.constant(random_tensor(rng, {5, 7}, 10.0))));
    for (std::size_t r = 0; r < 5; ++r) {
      double total = 0.0;
      for (std::size_t j = 0; j < 7; ++j) {
        CHECK(y[r * 7 + j] >= 0.0);
        total += y[r * 7 + j];
      }
      CHECK(std::abs(total - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("layernorm standardizes each row", "[tensor][property]") {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    Graph g;
    // eps = 0 exposes the pre-affine standardization exactly; the model default is 1e-5.
    const Tensor& y = g.value(g.layernorm(g.constant(random_tensor(rng, {4, 16}, 3.0)), 0.0));
    for (std::size_t r = 0; r < 4; ++r) {
      double mean = 0.0, var = 0.0;
      for (std::size_t j = 0; j < 16; ++j) mean += y[r * 16 + j];
      mean /= 16.0;
      for (std::size_t j = 0; j < 16; ++j) var += (y[r * 16 + j] - mean) * (y[r * 16 + j] - mean);
      var /= 16.0;
      CHECK(std::abs(mean) <= 1e-10);
      CHECK(std::abs(var - 1.0) <= 1e-8);
    }
  }
}

TEST_CASE("backward of a product follows the product rule", "[tensor]") {
  Graph g;
  Var x = g.param(Tensor::scalar(2.0));
  Var y = g.param(Tensor::scalar(3.0));
  const Gradients grads = g.backward(g.mul(x, y));
  CHECK(grads[x].item() == 3.0);
  CHECK(grads[y].item() == 2.0);
}

TEST_CASE("sum of softmax has zero gradient", "[tensor]") {
  Rng rng(2);
  Graph g;
  Var z = g.param(random_tensor(rng, {6}));
  const Gradients grads = g.backward(g.sum(g.softmax(z)));
  for (double v : grads[z].values()) CHECK(std::abs(v) <= 1e-15);
}

TEST_CASE("backward rejects non-scalar losses and zero-fills unreached leaves", "[tensor]") {
  Graph g;
  Var x = g.param(Tensor({2}, {1.0, 2.0}));
  Var unused = g.param(Tensor({3}, {1.0, 2.0, 3.0}));
  CHECK_THROWS_AS(g.backward(g.exp(x)), ShapeError);
  const Gradients grads = g.backward(g.sum(x));
  REQUIRE(grads.contains(unused));
  for (double v : grads[unused].values()) CHECK(v == 0.0);
}

TEST_CASE("random three-layer composition matches central differences", "[tensor][gradient]") {
  GraphFunction fn = [](Graph& g, std::span<const Var> in) {
    Var h = g.layernorm(g.matmul(in[0], in[1]), 1e-5);
    h = g.swiglu(g.matmul(h, in[2]), g.matmul(h, in[3]));
    Var logits = g.matmul(h, in[4]);
    return g.sum(g.mul(g.softmax(logits), logits));
  };
  const double err = check_primitive(fn, {{3, 4}, {4, 5}, {5, 6}, {5, 6}, {6, 3}}, 11, 5);
  CHECK(err <= 1e-5);
}

TEST_CASE("grad_check on an exact quadratic", "[tensor][gradient]") {
  GraphFunction half_sq = [](Graph& g, std::span<const Var> in) { return g.scale(g.sum(g.mul(in[0], in[0])), 0.5); };
  Rng rng(3);
  CHECK(grad_check(half_sq, {random_tensor(rng, {10})}) <= 1e-7);
  CHECK_THROWS_AS(grad_check(half_sq, {random_tensor(rng, {10})}, {.step = 0.0}), ValueError);
}

TEST_CASE("every primitive's gradient matches central differences", "[tensor][gradient]") {
  constexpr double kTol = 1e-5;
  SECTION("matmul shared and batched") {
    CHECK(check_primitive([](Graph& g, std::span<const Var> in) { return probe(g, g.matmul(in[0], in[1]), 1); },
                          {{2, 3, 4}, {4, 5}}, 21) <= kTol);
    CHECK(check_primitive([](Graph& g, std::span<const Var> in) { return probe(g, g.matmul(in[0], in[1]), 2); },
                          {{2, 3, 4}, {2, 4, 2}}, 22) <= kTol);
  }
  SECTION("add and mul with broadcasting") {
    CHECK(check_primitive([](Graph& g, std::span<const Var> in) { return probe(g, g.add(in[0], in[1]), 3); },
                          {{3, 4}, {4}}, 23) <= kTol);
    CHECK(check_primitive([](Graph& g, std::span<const Var> in) { return probe(g, g.mul(in[0], in[1]), 4); },
                          {{3, 4}, {3, 4}}, 24) <= kTol);
    CHECK(check_primitive([](Graph& g, std::span<const Var> in) { return probe(g, g.mul(in[0], in[1]), 5); },
                          {{3, 4}, {}}, 25) <= kTol);
  }
  SECTION("softmax, layernorm, swiglu") {
    CHECK(check_primitive([](Graph& g, std::span<const Var> in) { return probe(g, g.softmax(in[0]), 6); }, {{3, 5}},
                          26) <= kTol);
    CHECK(check_primitive([](Graph& g, std::span<const Var> in) { return probe(g, g.layernorm(in[0], 1e-5), 7); },
                          {{3, 6}}, 27) <= kTol);
    CHECK(check_primitive([](Graph& g, std::span<const Var> in) { return probe(g, g.swiglu(in[0], in[1]), 8); },
                          {{3, 4}, {3, 4}}, 28) <= kTol);
  }
  SECTION("embed lookup and cross entropy") {
    CHECK(check_primitive(
              [](Graph& g, std::span<const Var> in) { return probe(g, g.embed(in[0], {2, 0, 2, 1}, {2, 2}), 9); },
              {{3, 4}}, 29) <= kTol);
    CHECK(check_primitive(
              [](Graph& g, std::span<const Var> in) {
                return g.cross_entropy(in[0], {1, 0, 4}, {0.5, 1.0, 0.25});
              },
              {{3, 5}}, 30) <= kTol);
  }
  SECTION("log and exp") {
    CHECK(check_primitive([](Graph& g, std::span<const Var> in) { return probe(g, g.log(g.exp(in[0])), 10); },
                          {{4}}, 31) <= kTol);
    CHECK(check_primitive([](Graph& g, std::span<const Var> in) { return probe(g, g.log(g.softmax(in[0])), 11); },
                          {{2, 4}}, 32) <= kTol);
    CHECK(check_primitive([](Graph& g, std::span<const Var> in) { return probe(g, g.exp(in[0]), 12); }, {{5}},
                          33) <= kTol);
  }
  SECTION("concat, slice, transpose, reshape") {
    CHECK(check_primitive(
              [](Graph& g, std::span<const Var> in) {
                const Var parts[] = {in[0], in[1]};
                return probe(g, g.concat(parts, 1), 13);
              },
              {{2, 3, 2}, {2, 1, 2}}, 34) <= kTol);
    CHECK(check_primitive([](Graph& g, std::span<const Var> in) { return probe(g, g.slice(in[0], 1, 1, 3), 14); },
                          {{2, 4, 3}}, 35) <= kTol);
    CHECK(check_primitive([](Graph& g, std::span<const Var> in) { return probe(g, g.transpose(in[0], 0, 2), 15); },
                          {{2, 3, 4}}, 36) <= kTol);
    CHECK(check_primitive(
              [](Graph& g, std::span<const Var> in) { return probe(g, g.reshape(in[0], Shape{4, 3}), 16); },
              {{2, 6}}, 37) <= kTol);
  }
  SECTION("masked fill, softplus, relu, rope") {
    CHECK(check_primitive(
              [](Graph& g, std::span<const Var> in) {
                return probe(g, g.softmax(g.masked_fill(in[0], {0, 1, 0, 0, 0, 1}, Shape{2, 3}, -1e300)), 17);
              },
              {{2, 2, 3}}, 38) <= kTol);
    CHECK(check_primitive([](Graph& g, std::span<const Var> in) { return probe(g, g.softplus(in[0]), 18); }, {{6}},
                          39) <= kTol);
    CHECK(check_primitive([](Graph& g, std::span<const Var> in) { return probe(g, g.relu(in[0]), 19); }, {{6}},
                          40) <= kTol);
    CHECK(check_primitive(
              [](Graph& g, std::span<const Var> in) {
                return probe(g, g.rope(in[0], {0.0, 1.0, 2.0, 7.0, 3.0, 5.0}, 10000.0), 20);
              },
              {{2, 3, 2, 4}}, 41) <= kTol);
  }
}

TEST_CASE("evaluation is bitwise deterministic", "[tensor]") {
  auto run = [] {
    Rng rng(99);
    Graph g;
    Var x = g.param(random_tensor(rng, {4, 8}));
    Var w = g.param(random_tensor(rng, {8, 8}));
    Var loss = g.sum(g.softmax(g.layernorm(g.matmul(x, w), 1e-5)));
    loss = g.add(loss, g.sum(g.mul(x, x)));
    const Gradients grads = g.backward(loss);
    return std::make_pair(g.value(loss), grads[w]);
  };
  const auto a = run();
  const auto b = run();
  CHECK(a.first.bitwise_equal(b.first));
  CHECK(a.second.bitwise_equal(b.second));
}

TEST_CASE("log rejects non-positive input", "[tensor]") {
  Graph g;
  CHECK_THROWS_AS(g.log(g.constant(Tensor({2}, {1.0, 0.0}))), ValueError);
}
