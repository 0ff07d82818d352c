#include "doctest.h"
#include "hybridlm/tensor.hpp"
#include "test_util.hpp"

using namespace hybridlm;

namespace {

Tensor rand_t(Shape shape, uint64_t seed, float scale = 1.0f) {
  Rng rng(seed);
  return randn(std::move(shape), rng, scale);
}

}  // namespace

TEST_CASE("softmax symmetry and frozen values") {
  Tensor z = from_vector({2}, {0.0f, 0.0f});
  Tensor s = softmax_last(z);
  CHECK(s.data()[0] == doctest::Approx(0.5).epsilon(1e-7));
  CHECK(s.data()[1] == doctest::Approx(0.5).epsilon(1e-7));

  // expected values evaluated by hand: exp(1,2,3)/sum = .09003, .24473, .66524
  Tensor z2 = from_vector({3}, {1.0f, 2.0f, 3.0f});
  Tensor s2 = softmax_last(z2);
  CHECK(std::abs(s2.data()[0] - 0.0900f) < 1e-4);
  CHECK(std::abs(s2.data()[1] - 0.2447f) < 1e-4);
  CHECK(std::abs(s2.data()[2] - 0.6652f) < 1e-4);
}

TEST_CASE("softmax rows sum to one for any finite input") {
  for (uint64_t seed = 1; seed <= 8; ++seed) {
    Tensor x = rand_t({5, 33}, seed, seed % 3 ? 1.0f : 40.0f);
    Tensor s = softmax_last(x);
    for (int r = 0; r < 5; ++r) {
      double total = 0.0;
      for (int c = 0; c < 33; ++c) total += s.data()[r * 33 + c];
      CHECK(std::abs(total - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("matmul identity and shape errors") {
  Tensor x = rand_t({3, 5}, 7);
  Tensor y = matmul(eye(3), x);
  CHECK(hlmtest::bit_equal(x, y));

  CHECK_THROWS_AS(matmul(rand_t({2, 3}, 1), rand_t({4, 2}, 2)), ShapeError);
  CHECK_THROWS_WITH_AS(add(rand_t({2, 2}, 1), rand_t({2, 3}, 2)),
                       doctest::Contains("add"), ShapeError);
}

TEST_CASE("backward: d(x*x)/dx at x=3 is 6") {
  Tensor x = from_vector({1}, {3.0f}, true);
  Tensor loss = mul(x, x);
  GradientMap grads = backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(6.0f));
  const std::vector<float>* g = grads.find(x);
  REQUIRE(g != nullptr);
  CHECK((*g)[0] == doctest::Approx(6.0f));
}

TEST_CASE("backward: uniform softmax+CE at uniform target has zero gradient") {
  Tensor z = zeros({1, 4});
  z.set_requires_grad(true);
  std::vector<int32_t> targets{2};
  // CE grad = softmax(z) - onehot = [.25,.25,.25,.25] - e2; against a uniform
  // *distributional* target the gradient is exactly zero: check via KL with a
  // uniform teacher instead
  Tensor zt = zeros({1, 4});
  Tensor loss = kl_div(z, zt, 1.0f, KlDirection::kForward);
  backward(loss);
  for (float g : z.grad()) CHECK(std::abs(g) < 1e-7);
  (void)targets;
}

TEST_CASE("backward rejects non-scalar losses") {
  Tensor x = rand_t({2, 2}, 3);
  x.set_requires_grad(true);
  Tensor y = mul(x, x);
  CHECK_THROWS_AS(backward(y), ShapeError);
}

TEST_CASE("grad_check: linear function is exact to 1e-6") {
  Tensor w = rand_t({4, 1}, 11);
  auto f = [&](const Tensor& x) { return sum(matmul(x, w)); };
  GradCheckReport rep = grad_check(f, rand_t({3, 4}, 12), 1e-3f);
  CHECK(rep.max_rel_err < 1e-6);
  CHECK_FALSE(rep.nan_in_analytic);
}

TEST_CASE("3-layer MLP gradient matches an independent finite-difference oracle") {
  Tensor w1 = rand_t({6, 16}, 21, 0.5f);
  Tensor w2 = rand_t({16, 16}, 22, 0.4f);
  Tensor w3 = rand_t({16, 3}, 23, 0.5f);
  Tensor b = rand_t({16}, 24, 0.2f);
  auto f = [&](const Tensor& x) {
    Tensor h1 = silu(add_row(matmul(x, w1), b));
    Tensor h2 = sigmoid(matmul(h1, w2));
    return mean(matmul(h2, w3));
  };
  Tensor point = rand_t({4, 6}, 25);

  // oracle computed independently of grad_check's internals
  std::vector<float> fd = hlmtest::finite_difference(f, point, 1e-3f);
  Tensor x = point.clone();
  x.set_requires_grad(true);
  backward(f(x));
  float worst = 0.0f, scale = 0.0f;
  for (float g : x.grad()) scale = std::max(scale, std::abs(g));
  for (size_t i = 0; i < fd.size(); ++i) {
    const float err = std::abs(fd[i] - x.grad()[i]);
    worst = std::max(worst, err / (std::abs(fd[i]) + std::abs(x.grad()[i]) + 1e-4f * scale + 1e-12f));
  }
  CHECK(worst < 1e-3);

  // and grad_check agrees with the oracle's verdict
  CHECK(grad_check(f, point, 1e-3f).max_rel_err < 1e-3);
}

TEST_CASE("every differentiable op passes grad_check at 5 random points") {
  auto check5 = [](const char* name, const std::function<Tensor(const Tensor&)>& f, Shape shape,
                   float scale = 1.0f) {
    for (uint64_t seed = 101; seed < 106; ++seed) {
      GradCheckReport r = grad_check(f, rand_t(shape, seed, scale), 1e-2f);
      INFO(name, " seed ", seed, " rel err ", r.max_rel_err);
      CHECK(r.ok(1e-3f));
    }
  };
  Tensor m = rand_t({5, 4}, 55);
  check5("matmul", [&](const Tensor& x) { return mean(matmul(x, m)); }, {3, 5});
  check5("add", [&](const Tensor& x) { return mean(add(x, mul_scalar(x, 0.5f))); }, {4, 4});
  check5("mul", [&](const Tensor& x) { return mean(mul(x, add_scalar(x, 1.0f))); }, {4, 4});
  check5("exp", [&](const Tensor& x) { return mean(exp(x)); }, {3, 4});
  check5("log", [&](const Tensor& x) { return mean(log(add_scalar(mul(x, x), 1.0f))); }, {3, 4});
  check5("sigmoid", [&](const Tensor& x) { return mean(sigmoid(x)); }, {3, 4});
  check5("silu", [&](const Tensor& x) { return mean(silu(x)); }, {3, 4});
  check5("softplus", [&](const Tensor& x) { return mean(softplus(x)); }, {3, 4});
  Tensor mix = rand_t({6}, 56);
  check5("softmax", [&](const Tensor& x) { return mean(mul(softmax_last(x), mix)); }, {1, 6});
  Tensor nw = rand_t({8}, 57);
  check5("rms_norm", [&](const Tensor& x) { return mean(rms_norm(x, nw)); }, {3, 8});
  Tensor kern = rand_t({4, 5}, 58);
  Tensor cb = rand_t({5}, 59);
  check5("causal_conv1d",
         [&](const Tensor& x) { return mean(causal_conv1d(x, kern, cb)); }, {6, 5});
  check5("slice", [&](const Tensor& x) { return mean(slice(x, 1, 1, 2)); }, {3, 4});
  check5("concat", [&](const Tensor& x) {
    std::vector<Tensor> parts{slice(x, 0, 0, 2), slice(x, 0, 2, 2)};
    return mean(mul(concat(parts, 0), concat(parts, 0)));
  }, {4, 3});
  check5("reshape", [&](const Tensor& x) { return mean(mul(reshape(x, {2, 6}), reshape(x, {2, 6}))); },
         {3, 4});
  check5("transpose", [&](const Tensor& x) { return mean(matmul(transpose(x), m)); }, {5, 3});
  check5("rope", [&](const Tensor& x) { return mean(mul(rope(x, 4, 3), x)); }, {3, 8});
  check5("causal_softmax", [&](const Tensor& x) { return mean(causal_softmax(x, 1)); }, {4, 5});

  // embedding: gradient w.r.t. the table
  std::vector<int32_t> ids{0, 2, 1, 2};
  check5("embedding", [&](const Tensor& tbl) { return mean(embedding(tbl, ids)); }, {3, 4});

  // cross entropy w.r.t. logits, with a mask
  std::vector<int32_t> targets{1, 0, 3};
  std::vector<uint8_t> mask{1, 0, 1};
  check5("cross_entropy",
         [&](const Tensor& z) { return cross_entropy(z, targets, mask); }, {3, 4});

  // both KL directions w.r.t. student logits
  Tensor zt = rand_t({3, 5}, 60);
  check5("kl_reverse", [&](const Tensor& z) { return kl_div(z, zt, 1.0f, KlDirection::kReverse); },
         {3, 5});
  check5("kl_forward", [&](const Tensor& z) { return kl_div(z, zt, 1.0f, KlDirection::kForward); },
         {3, 5});
}

TEST_CASE("embedding rejects out-of-range ids") {
  Tensor tbl = rand_t({4, 2}, 61);
  std::vector<int32_t> bad{0, 5};
  CHECK_THROWS_AS(embedding(tbl, bad), ShapeError);
  std::vector<int32_t> neg{-1};
  CHECK_THROWS_AS(embedding(tbl, neg), ShapeError);
}

TEST_CASE("cross entropy of a uniform distribution is log(V)") {
  Tensor z = zeros({2, 8});
  std::vector<int32_t> tg{3, 5};
  CHECK(cross_entropy(z, tg).item() == doctest::Approx(std::log(8.0)).epsilon(1e-6));
}

TEST_CASE("detach cuts the graph") {
  Tensor x = from_vector({1}, {2.0f}, true);
  Tensor y = mul(x, x).detach();
  Tensor z = mul_scalar(y, 3.0f);
  CHECK_FALSE(z.requires_grad());
}

TEST_CASE("determinism: same seed gives bit-identical tensors and streams") {
  Tensor a = rand_t({16, 16}, 321);
  Tensor b = rand_t({16, 16}, 321);
  CHECK(hlmtest::bit_equal(a, b));
}
