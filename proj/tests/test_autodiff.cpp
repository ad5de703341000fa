// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "gradweave/finite_diff.hpp"
#include "gradweave/graph.hpp"
#include "gradweave/tensor.hpp"

using namespace gradweave;

namespace {

// Simpson quadrature of the standard normal density; independent route to
// Phi(z) used to pin the GeLU reference values.
double normal_cdf_quadrature(double z) {
  const double lo = 0.0, hi = std::abs(z);
  const int n = 4000;  // even
  const double h = (hi - lo) / n;
  auto phi = [](double t) { return std::exp(-0.5 * t * t) * 0.39894228040143267794; };
  double acc = phi(lo) + phi(hi);
  for (int i = 1; i < n; ++i) acc += phi(lo + i * h) * (i % 2 ? 4.0 : 2.0);
  const double integral = acc * h / 3.0;
  return z >= 0.0 ? 0.5 + integral : 0.5 - integral;
}

}  // namespace

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor({1}, {std::nan("")}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor({2}, {1.0, std::numeric_limits<double>::infinity()}),
                  std::invalid_argument);
  CHECK_THROWS_AS(Tensor({0}), std::invalid_argument);
  Tensor t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
}

TEST_CASE("gelu values") {
  // frozen from the quadrature oracle below
  const double phi1 = 0.8413447460685429;
  CHECK(std::abs(normal_cdf_quadrature(1.0) - phi1) < 1e-12);

  Tensor z({3}, {0.0, 10.0, 1.0});
  Tensor out = gelu(z);
  CHECK(out[0] == 0.0);
  CHECK(std::abs(out[1] - 10.0) < 1e-6);
  CHECK(std::abs(out[2] - 1.0 * phi1) < 1e-9);
}

TEST_CASE("gelu derivative regimes") {
  Tensor z({3}, {0.0, 10.0, -10.0});
  Tensor d = gelu_derivative(z);
  CHECK(d[0] == 0.5);
  CHECK(std::abs(d[1] - 1.0) < 1e-6);
  CHECK(std::abs(d[2] - 0.0) < 1e-6);
}

TEST_CASE("gelu derivative matches the numeric derivative of gelu") {
  for (double z = -6.0; z <= 6.0; z += 0.37) {
    const double eps = 1e-6;
    const double numeric = (gelu_scalar(z + eps) - gelu_scalar(z - eps)) / (2.0 * eps);
    CHECK(std::abs(gelu_derivative_scalar(z) - numeric) < 1e-6);
  }
}

TEST_CASE("backward of a linear map broadcasts the input") {
  Graph g;
  Node w = g.param("w", Tensor({2, 2}, {1.0, -2.0, 0.5, 3.0}));
  Node x = g.input(Tensor({2, 1}, {4.0, -1.5}));
  Node loss = g.sum(g.matmul(w, x));
  GradientMap gm = g.backward(loss);
  REQUIRE(gm.count("w") == 1);
  // d/dW_ij sum(Wx) = x_j
  CHECK(gm.at("w")[0] == 4.0);
  CHECK(gm.at("w")[1] == -1.5);
  CHECK(gm.at("w")[2] == 4.0);
  CHECK(gm.at("w")[3] == -1.5);
}

TEST_CASE("loss constant in a parameter gives zero gradient") {
  Graph g;
  Node used = g.param("used", Tensor::scalar(2.0));
  Node unused = g.param("unused", Tensor({3}, {1.0, 2.0, 3.0}));
  Node killed = g.param("killed", Tensor::scalar(5.0));
  Node loss = g.add(g.mul(used, used), g.affine(killed, 0.0, 0.0));
  GradientMap gm = g.backward(loss);
  REQUIRE(gm.size() == 3);  // one entry per registered parameter
  CHECK(gm.at("used")[0] == 4.0);
  for (std::size_t i = 0; i < 3; ++i) CHECK(gm.at("unused")[i] == 0.0);
  CHECK(gm.at("killed")[0] == 0.0);
}

TEST_CASE("backward rejects non-scalar loss") {
  Graph g;
  Node w = g.param("w", Tensor({2}, {1.0, 2.0}));
  CHECK_THROWS_AS(g.backward(w), std::invalid_argument);
}

TEST_CASE("additive fusion distributes the upstream gradient to both branches") {
  Graph g;
  Node a = g.param("a", Tensor({2, 2}, {0.3, -0.4, 1.2, 0.9}));
  Node b = g.param("b", Tensor({2, 2}, {-1.0, 0.2, 0.7, -0.3}));
  Node fused = g.add(a, b);
  Node loss = g.sum(g.mul(g.sigmoid(fused), g.gelu(fused)));
  GradientMap gm = g.backward(loss);
  for (std::size_t i = 0; i < 4; ++i) CHECK(gm.at("a")[i] == gm.at("b")[i]);
}

TEST_CASE("finite difference oracle basics") {
  auto square = [](const ParamSet& p) { return p.at("t")[0] * p.at("t")[0]; };
  GradientMap g1 = finite_diff_gradient(square, {{"t", Tensor::scalar(3.0)}}, 1e-5);
  CHECK(std::abs(g1.at("t")[0] - 6.0) < 1e-6);

  auto constant = [](const ParamSet&) { return 42.0; };
  GradientMap g2 = finite_diff_gradient(constant, {{"t", Tensor({3}, {1.0, 2.0, 3.0})}}, 1e-5);
  for (std::size_t i = 0; i < 3; ++i) CHECK(g2.at("t")[i] == 0.0);

  auto gl = [](const ParamSet& p) { return gelu_scalar(p.at("t")[0]); };
  GradientMap g3 = finite_diff_gradient(gl, {{"t", Tensor::scalar(0.0)}}, 1e-5);
  CHECK(std::abs(g3.at("t")[0] - 0.5) < 1e-5);

  CHECK_THROWS_AS(finite_diff_gradient(square, {{"t", Tensor::scalar(1.0)}}, 0.0),
                  std::invalid_argument);
}

namespace {

// small composite exercising most ops; scalar objective of three parameters
double composite_loss(const ParamSet& p, GradientMap* grads) {
  Graph g;
  Node W1 = g.param("W1", p.at("W1"));
  Node b1 = g.param("b1", p.at("b1"));
  Node W2 = g.param("W2", p.at("W2"));
  Node x = g.input(Tensor({3, 4}, {0.3, -0.2, 0.8, 1.1, -0.6, 0.4, 0.9, -1.2, 0.1, 0.5, -0.7, 0.2}));
  Node h = g.gelu(g.add_row_bias(g.matmul(x, W1), b1));
  Node y = g.sigmoid(g.matmul(h, W2));
  Node pooled = g.mean_pool_rows(y);
  Node sm = g.softmax(pooled);
  Node scaled = g.scalar_mul(y, g.affine(g.element(sm, 0), 2.0, 0.1));
  Node weighted = g.cmul(scaled, Tensor({3, 2}, {1.0, 2.0, 0.5, 1.5, 2.5, 0.25}));
  Node num = g.affine(g.sum(weighted), 1.0, 1.0);
  Node den = g.affine(g.sum(g.mul(y, y)), 1.0, 2.0);
  Node loss = g.div(num, den);
  if (grads) *grads = g.backward(loss);
  return g.value(loss)[0];
}

double topk_loss(const ParamSet& p, GradientMap* grads) {
  Graph g;
  Node W = g.param("W", p.at("W"));
  // rows have distinct, well-separated activations: no ties near k
  Node x = g.input(Tensor({2, 3}, {1.0, -0.5, 0.25, -1.25, 0.75, 2.0}));
  Node z = g.matmul(x, W);
  Node kept = g.topk_mask(z, 2, true);
  Node dropped_small = g.topk_mask(z, 1, false);
  Node loss = g.sum(g.add(g.gelu(kept), g.mul(dropped_small, dropped_small)));
  if (grads) *grads = g.backward(loss);
  return g.value(loss)[0];
}

}  // namespace

TEST_CASE("random composite graphs match finite differences") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    ParamSet p;
    p.emplace("W1", random_normal({4, 3}, 0.6, rng));
    p.emplace("b1", random_normal({1, 3}, 0.3, rng));
    p.emplace("W2", random_normal({3, 2}, 0.6, rng));
    GradientMap ad;
    composite_loss(p, &ad);
    GradientMap fd = finite_diff_gradient([](const ParamSet& q) { return composite_loss(q, nullptr); },
                                          p, 1e-5);
    GradCompareResult cmp = compare_gradients(ad, fd);
    CHECK(cmp.compared == 4 * 3 + 3 + 3 * 2);
    CHECK(cmp.max_rel_err < 1e-4);
  }
}

TEST_CASE("topk graphs match finite differences away from ties") {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 5; ++trial) {
    ParamSet p;
    p.emplace("W", random_normal({3, 4}, 0.8, rng));
    GradientMap ad;
    topk_loss(p, &ad);
    GradientMap fd =
        finite_diff_gradient([](const ParamSet& q) { return topk_loss(q, nullptr); }, p, 1e-5);
    CHECK(compare_gradients(ad, fd).max_rel_err < 1e-4);
  }
}

TEST_CASE("topk gradient is exactly zero on dropped entries") {
  Graph g;
  Node v = g.param("v", Tensor({1, 4}, {0.2, -0.5, 0.9, 0.1}));
  Node loss = g.sum(g.topk_mask(v, 2, true));
  GradientMap gm = g.backward(loss);
  CHECK(gm.at("v")[0] == 1.0);
  CHECK(gm.at("v")[1] == 0.0);
  CHECK(gm.at("v")[2] == 1.0);
  CHECK(gm.at("v")[3] == 0.0);
}

TEST_CASE("graph ops validate shapes") {
  Graph g;
  Node a = g.input(Tensor({2, 2}));
  Node b = g.input(Tensor({2, 3}));
  CHECK_THROWS_AS(g.add(a, b), std::invalid_argument);
  CHECK_THROWS_AS(g.matmul(b, b), std::invalid_argument);
  CHECK_THROWS_AS(g.topk_mask(a, 5, true), std::invalid_argument);
  CHECK_THROWS_AS(g.element(a, 9), std::invalid_argument);
}
