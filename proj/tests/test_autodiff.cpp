#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "taskweight/autodiff.hpp"
#include "taskweight/common.hpp"

using namespace taskweight;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, SplitMix64& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.next_range(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("forward identities") {
  Graph g;
  Value x = g.leaf(Tensor({3}, {0.5, -1.25, 2.0}));
  Value zero = g.constant(Tensor({3}));
  Value same = g.add(x, zero);
  for (std::size_t i = 0; i < 3; ++i) REQUIRE(g.value(same)[i] == g.value(x)[i]);

  Value pos = g.leaf(Tensor({3}, {0.5, 1.25, 2.0}));
  Value roundtrip = g.exp(g.log(pos));
  for (std::size_t i = 0; i < 3; ++i)
    REQUIRE(std::abs(g.value(roundtrip)[i] - g.value(pos)[i]) < 1e-12);

  Value a = g.leaf(Tensor::scalar(2.0));
  Value b = g.leaf(Tensor::scalar(3.0));
  REQUIRE(g.value(g.mul(a, b))[0] == 6.0);
}

TEST_CASE("recompute re-evaluates in topological order") {
  Graph g;
  Value x = g.leaf(Tensor::scalar(2.0));
  Value y = g.mul(x, x);
  REQUIRE(g.value(y)[0] == 4.0);
  g.leaf_value(x).data[0] = 5.0;
  g.recompute();
  REQUIRE(g.value(y)[0] == 25.0);
}

TEST_CASE("backward on simple functions") {
  Graph g;
  Value x = g.leaf(Tensor::scalar(3.0));
  Value y = g.mul(x, x);
  g.backward(y);
  REQUIRE(g.grad(x)[0] == Catch::Approx(6.0).margin(1e-12));

  // gradient of a constant w.r.t. an unused leaf is zero
  Graph g2;
  Value unused = g2.leaf(Tensor::scalar(7.0));
  Value c = g2.leaf(Tensor::scalar(1.5));
  g2.backward(c);
  REQUIRE(g2.grad(unused)[0] == 0.0);
}

TEST_CASE("backward requires a scalar output") {
  Graph g;
  Value x = g.leaf(Tensor({2}, {1.0, 2.0}));
  REQUIRE_THROWS_AS(g.backward(x), ValidationError);
}

TEST_CASE("shape mismatch is reported") {
  Graph g;
  Value a = g.leaf(Tensor({2}, {1, 2}));
  Value b = g.leaf(Tensor({3}, {1, 2, 3}));
  REQUIRE_THROWS_AS(g.add(a, b), ValidationError);
  Value m = g.leaf(Tensor({2, 2}, {1, 2, 3, 4}));
  Value n = g.leaf(Tensor({3, 2}, {1, 2, 3, 4, 5, 6}));
  REQUIRE_THROWS_AS(g.matmul(m, n), ValidationError);
}

// Cross-entropy with softmax: gradient w.r.t. the logits must equal
// softmax(logits) - one_hot(true class). Checked against both the closed
// form and central differences.
TEST_CASE("softmax cross-entropy gradient matches the closed form") {
  Tensor logits({3}, {1.0, 2.0, 3.0});
  Tensor z({3}, {0.0, 0.0, 1.0});  // true class 2

  Graph g;
  Value x = g.leaf(logits);
  Value y = g.softmax(x);
  Value loss = g.affine(g.reduce_sum(g.mul(g.constant(z), g.log(y))), -1.0, 0.0);
  g.backward(loss);

  double m = 3.0;
  double e0 = std::exp(1.0 - m), e1 = std::exp(2.0 - m), e2 = std::exp(3.0 - m);
  double s = e0 + e1 + e2;
  double expected[3] = {e0 / s, e1 / s, e2 / s - 1.0};
  for (std::size_t i = 0; i < 3; ++i)
    REQUIRE(g.grad(x)[i] == Catch::Approx(expected[i]).margin(1e-9));

  double err = grad_check(
      [&](Graph& gg, Value v) {
        return gg.affine(gg.reduce_sum(gg.mul(gg.constant(z), gg.log(gg.softmax(v)))), -1.0,
                         0.0);
      },
      logits, 1e-6);
  REQUIRE(err < 1e-7);
}

TEST_CASE("grad_check on a linear function is exact") {
  Tensor x({4}, {0.3, -1.0, 2.0, 0.7});
  double err = grad_check([](Graph& g, Value v) { return g.reduce_sum(v); }, x, 1e-6);
  REQUIRE(err < 1e-10);
}

TEST_CASE("linearity of reverse accumulation") {
  SplitMix64 rng(99);
  Tensor x = random_tensor({5}, rng, 0.2, 1.5);
  const double alpha = 0.37, beta = -1.7;

  auto grads = [&](bool combined) {
    Graph g;
    Value v = g.leaf(x);
    Value f = g.reduce_sum(g.mul(v, v));
    Value h = g.reduce_sum(g.exp(v));
    if (combined) {
      g.backward(g.add(g.affine(f, alpha, 0.0), g.affine(h, beta, 0.0)));
      return g.grad(v);
    }
    g.backward(f);
    Tensor gf = g.grad(v);
    g.backward(h);
    Tensor gh = g.grad(v);
    Tensor out({x.size()});
    for (std::size_t i = 0; i < x.size(); ++i)
      out.data[i] = alpha * gf.data[i] + beta * gh.data[i];
    return out;
  };
  Tensor combined = grads(true);
  Tensor separate = grads(false);
  for (std::size_t i = 0; i < x.size(); ++i)
    REQUIRE(std::abs(combined.data[i] - separate.data[i]) < 1e-12);
}

TEST_CASE("repeated forward/backward is bit-identical") {
  auto run = [] {
    SplitMix64 rng(123);
    Graph g;
    Value x = g.leaf(random_tensor({3, 4}, rng, 0.1, 2.0));
    Value w = g.leaf(random_tensor({4, 2}, rng, -1.0, 1.0));
    Value out = g.reduce_sum(g.sigmoid(g.matmul(x, w)));
    g.backward(out);
    std::vector<double> result = {g.value(out)[0]};
    for (double v : g.grad(x).data) result.push_back(v);
    for (double v : g.grad(w).data) result.push_back(v);
    return result;
  };
  auto a = run();
  auto b = run();
  REQUIRE(a == b);
}

// Every primitive passes central-difference checks on random shapes and
// values (double precision, step 1e-6, threshold 1e-7).
TEST_CASE("primitive gradients pass grad_check on random inputs") {
  SplitMix64 rng(2026);
  double worst = 0.0;
  auto check = [&](double err) {
    worst = std::max(worst, err);
    REQUIRE(err < 1e-7);
  };

  for (int iter = 0; iter < 100; ++iter) {
    std::vector<std::size_t> shape;
    std::size_t rank = 1 + rng.next_below(2);
    for (std::size_t d = 0; d < rank; ++d) shape.push_back(1 + rng.next_below(4));
    Tensor pos = random_tensor(shape, rng, 0.1, 2.0);
    Tensor any = random_tensor(shape, rng, -1.6, 1.6);
    Tensor other = random_tensor(shape, rng, 0.3, 1.5);
    double expo = rng.next_range(0.05, 2.5);

    check(grad_check([&](Graph& g, Value v) { return g.reduce_sum(g.exp(v)); }, any, 1e-6));
    check(grad_check([&](Graph& g, Value v) { return g.reduce_sum(g.log(v)); }, pos, 1e-6));
    check(grad_check(
        [&](Graph& g, Value v) { return g.reduce_sum(g.pow(v, expo)); }, pos, 1e-6));
    check(grad_check([&](Graph& g, Value v) { return g.reduce_sum(g.sigmoid(v)); }, any, 1e-6));
    check(grad_check([&](Graph& g, Value v) { return g.reduce_sum(g.tanh(v)); }, any, 1e-6));
    check(grad_check(
        [&](Graph& g, Value v) { return g.reduce_sum(g.leaky_relu(v, 0.01)); }, any, 1e-6));
    // softmax probed through one-hot cross-entropy: its gradient there is
    // y - z, whose coordinates stay bounded away from zero
    Tensor onehot(shape);
    onehot.data[rng.next_below(onehot.size())] = 1.0;
    check(grad_check(
        [&](Graph& g, Value v) {
          return g.affine(
              g.reduce_sum(g.mul(g.constant(onehot), g.log(g.softmax(v)))), -1.0, 0.0);
        },
        any, 1e-6));
    check(grad_check(
        [&](Graph& g, Value v) { return g.reduce_max(g.mul(v, v)); }, pos, 1e-6));
    check(grad_check(
        [&](Graph& g, Value v) {
          Value o = g.constant(other);
          return g.reduce_sum(g.exp(g.mul(v, o)));
        },
        any, 1e-6));
    check(grad_check(
        [&](Graph& g, Value v) {
          Value o = g.constant(other);
          return g.reduce_sum(g.div(v, o));
        },
        any, 1e-6));
    // (v-o)(v+o) has gradient 2v; keep v away from zero so the relative
    // check is conditioned
    Tensor signed_pos = pos;
    for (std::size_t i = 0; i < signed_pos.size(); ++i)
      if (rng.next_below(2)) signed_pos.data[i] = -signed_pos.data[i];
    check(grad_check(
        [&](Graph& g, Value v) {
          Value o = g.constant(other);
          return g.reduce_sum(g.mul(g.sub(v, o), g.add(v, o)));
        },
        signed_pos, 1e-6));
    check(grad_check(
        [&](Graph& g, Value v) { return g.reduce_sum(g.affine(v, -1.7, 0.4)); }, any, 1e-6));
  }

  // matmul, permute, reshape, slice/select, concat, stack, broadcast,
  // axis reductions. Matmul operands stay positive and the output is
  // reduced through positive weights: every gradient coordinate is then
  // bounded below and the finite-difference quotient stays conditioned.
  for (int iter = 0; iter < 100; ++iter) {
    std::size_t m = 1 + rng.next_below(3), k = 1 + rng.next_below(3),
                n = 1 + rng.next_below(3);
    Tensor a = random_tensor({m, k}, rng, 0.2, 1.0);
    Tensor b = random_tensor({k, n}, rng, 0.2, 1.0);
    Tensor w_out = random_tensor({m, n}, rng, 0.5, 1.5);
    {
      Graph g;
      Value va = g.leaf(a), vb = g.leaf(b);
      Value out = g.reduce_sum(g.mul(g.matmul(va, vb), g.constant(w_out)));
      check(grad_check(g, out, {va, vb}, 1e-6));
    }
    Tensor x = random_tensor({2, 3, 2}, rng, -1.0, 1.0);
    check(grad_check(
        [&](Graph& g, Value v) {
          return g.reduce_sum(g.exp(g.permute(v, {2, 0, 1})));
        },
        x, 1e-6));
    check(grad_check(
        [&](Graph& g, Value v) {
          return g.reduce_sum(g.sigmoid(g.reshape(v, {6, 2})));
        },
        x, 1e-6));
    check(grad_check(
        [&](Graph& g, Value v) {
          return g.reduce_sum(g.mul(g.slice(v, 1, 1, 2), g.slice(v, 1, 0, 2)));
        },
        x, 1e-6));
    check(grad_check(
        [&](Graph& g, Value v) { return g.reduce_sum(g.exp(g.select(v, 1, 1))); }, x, 1e-6));
    check(grad_check(
        [&](Graph& g, Value v) {
          return g.reduce_sum(g.tanh(g.concat(v, v, 2)));
        },
        x, 1e-6));
    check(grad_check(
        [&](Graph& g, Value v) {
          Value s0 = g.select(v, 0, 0);
          Value s1 = g.select(v, 0, 1);
          return g.reduce_sum(g.sigmoid(g.stack({s0, s1, s0}, 1)));
        },
        x, 1e-6));
    Tensor small = random_tensor({1, 3, 1}, rng, -1.0, 1.0);
    check(grad_check(
        [&](Graph& g, Value v) {
          return g.reduce_sum(g.exp(g.broadcast(v, {2, 3, 2})));
        },
        small, 1e-6));
    check(grad_check(
        [&](Graph& g, Value v) {
          return g.reduce_sum(g.mul(g.reduce_sum_axes(v, {false, true, false}),
                                    g.reduce_sum_axes(v, {false, true, false})));
        },
        x, 1e-6));
  }

  // conv2d and max_pool2d on random 4D inputs. Positive operands and a
  // positive weighted reduction bound every gradient coordinate away from
  // zero; pooling inputs come from a shuffled grid so window maxima are
  // separated by far more than the probe step.
  for (int iter = 0; iter < 100; ++iter) {
    std::size_t bsz = 1 + rng.next_below(2), ci = 1 + rng.next_below(2),
                co = 1 + rng.next_below(2);
    std::size_t t = 2 + rng.next_below(2), f = 2 + rng.next_below(2);
    Tensor x = random_tensor({bsz, ci, t, f}, rng, 0.2, 0.4);
    Tensor k = random_tensor({co, ci, 3, 3}, rng, 0.15, 0.35);
    Tensor bias = random_tensor({co}, rng, 0.1, 0.3);
    Tensor w_out = random_tensor({bsz, co, t, f}, rng, 0.5, 1.5);
    Graph g;
    Value vx = g.leaf(x), vk = g.leaf(k), vb = g.leaf(bias);
    Value conv = g.conv2d(vx, vk, vb);
    Value out = g.reduce_sum(g.mul(conv, g.constant(w_out)));
    check(grad_check(g, out, {vx, vk, vb}, 1e-6));

    Tensor xp({1, 1, 4, 4});
    for (std::size_t i = 0; i < xp.size(); ++i)
      xp.data[i] = 0.1 + 0.03 * static_cast<double>(i);
    for (std::size_t i = xp.size(); i > 1; --i)
      std::swap(xp.data[i - 1], xp.data[rng.next_below(i)]);
    Graph g2;
    Value px = g2.leaf(xp);
    Value pooled = g2.max_pool2d(px, 1 + rng.next_below(2), 1 + rng.next_below(2));
    Tensor wp = random_tensor(g2.value(pooled).shape, rng, 0.5, 1.5);
    check(grad_check(g2, g2.reduce_sum(g2.mul(pooled, g2.constant(wp))), {px}, 1e-6));
  }
  INFO("worst primitive grad_check error " << worst);
}

TEST_CASE("grad_check rejects a non-positive step") {
  Tensor x({2}, {1.0, 2.0});
  REQUIRE_THROWS_AS(
      grad_check([](Graph& g, Value v) { return g.reduce_sum(v); }, x, 0.0),
      ValidationError);
}
