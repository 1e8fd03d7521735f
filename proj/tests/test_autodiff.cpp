#include <catch2/catch_amalgamated.hpp>

#include "thn/train.hpp"

using namespace thn;

namespace {

Tensor filled(Rng& rng, std::vector<int64_t> shape, real lo = -1.0, real hi = 1.0) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("gradients through the convolution pipeline match finite differences") {
  ConvGeometry g;
  g.kernel_h = 3;
  g.kernel_w = 3;
  g.pad_h = 1;
  g.pad_w = 1;
  g.in_channels = 2;
  g.out_channels = 3;

  Rng rng(61);
  std::vector<Tensor> params;
  params.push_back(filled(rng, {2, 2, 5, 4}));   // batch of two maps
  params.push_back(filled(rng, {3, 18}, -0.5, 0.5));  // filter bank over patches
  params.push_back(filled(rng, {3}, -0.2, 0.2));  // bias
  params.push_back(filled(rng, {3}, 0.5, 1.5));   // gamma
  params.push_back(filled(rng, {3}, -0.3, 0.3));  // beta
  params.push_back(filled(rng, {3, 3}, -0.6, 0.6));  // head

  BatchNorm host;
  host.gamma = Tensor({3});
  host.beta = Tensor({3});
  host.mean = Tensor({3});
  host.var = Tensor({3});
  std::vector<int> labels = {0, 2};

  real worst = grad_check(params, [&](Tape& t, const std::vector<Var>& v) {
    Var cols = ad::im2col_batch(t, v[0], g);              // [18, 2*20]
    Var pre = ad::matmul(t, v[1], cols);                  // [3, 40]
    pre = ad::bias_rows(t, pre, v[2]);
    pre = ad::batchnorm_rows(t, pre, v[3], v[4], &host);
    Var maps = ad::cols2maps(t, pre, 2, 5, 4);            // [2,3,5,4]
    Var pooled = ad::avg_pool_batch(t, maps, 5, 4, 5, 4); // [2,3,1,1]
    Var feats = ad::flatten_cols(t, pooled);              // [3,2]
    Var scores = ad::matmul_tn(t, v[5], feats);           // [3,2]
    return ad::cross_entropy(t, scores, labels);
  });
  REQUIRE(worst < 5e-6);
}

TEST_CASE("gradients through elementwise and scaling ops match finite differences") {
  Rng rng(67);
  std::vector<Tensor> params;
  params.push_back(filled(rng, {4, 3}));        // x
  params.push_back(filled(rng, {4}, 0.3, 1.2)); // row scales
  params.push_back(filled(rng, {3}, 0.3, 1.2)); // column scales
  params.push_back(filled(rng, {4, 3}));        // u
  params.push_back(filled(rng, {4, 3}));        // v
  std::vector<int> labels = {1, 0, 3};

  real worst = grad_check(params, [&](Tape& t, const std::vector<Var>& v) {
    Var y = ad::rowscale(t, v[0], v[1]);
    y = ad::colscale(t, y, v[2]);
    Var z = ad::add(t, ad::mul(t, v[3], ad::tanh_op(t, y)), ad::affine_const(t, v[4], 0.7, -0.2));
    return ad::cross_entropy(t, z, labels);
  });
  REQUIRE(worst < 5e-6);
}

TEST_CASE("relu gradient is exact away from the origin") {
  Rng rng(71);
  Tensor x({3, 4});
  for (int64_t i = 0; i < x.size(); ++i) {
    real v = rng.uniform(0.3, 1.0);
    x[i] = rng.uniform(-1.0, 1.0) < 0 ? -v : v;  // keep |x| >= 0.3
  }
  std::vector<Tensor> params = {x};
  std::vector<int> labels = {2, 0, 1, 2};
  real worst = grad_check(params, [&](Tape& t, const std::vector<Var>& v) {
    return ad::cross_entropy(t, ad::relu(t, v[0]), labels);
  });
  REQUIRE(worst < 1e-6);
}

TEST_CASE("gradients flow through a fixed ternary multiply") {
  Rng rng(73);
  TernaryMatrix M = TernaryMatrix::from_values(
      3, 5, std::vector<int>{1, -1, 0, 1, 0, 0, 1, 1, -1, 0, -1, 0, 0, 1, 1});
  M.set_scale(0.8);
  std::vector<Tensor> params = {filled(rng, {5, 4})};
  std::vector<int> labels = {0, 1, 2, 1};
  real worst = grad_check(params, [&](Tape& t, const std::vector<Var>& v) {
    return ad::cross_entropy(t, ad::tern_matmul(t, M, v[0]), labels);
  });
  REQUIRE(worst < 1e-6);
}

TEST_CASE("eval-mode normalization backpropagates its fixed scale") {
  Rng rng(79);
  BatchNorm bn;
  bn.gamma = filled(rng, {3}, 0.5, 1.5);
  bn.beta = filled(rng, {3}, -0.3, 0.3);
  bn.mean = filled(rng, {3}, -0.2, 0.2);
  bn.var = filled(rng, {3}, 0.5, 2.0);
  std::vector<Tensor> params = {filled(rng, {3, 4})};
  std::vector<int> labels = {2, 2, 0, 1};
  real worst = grad_check(params, [&](Tape& t, const std::vector<Var>& v) {
    return ad::cross_entropy(t, ad::batchnorm_rows_eval(t, v[0], bn), labels);
  });
  REQUIRE(worst < 1e-6);
}

TEST_CASE("training-mode normalization updates the host running statistics") {
  Tensor x({2, 4});
  real vals[8] = {1.0, 2.0, 3.0, 6.0, -1.0, 0.0, 1.0, 4.0};
  for (int i = 0; i < 8; ++i) x[i] = vals[i];
  BatchNorm host;
  host.gamma = Tensor({2});
  host.beta = Tensor({2});
  host.mean = Tensor({2});
  host.var = Tensor({2});
  host.var[0] = host.var[1] = 1.0;

  Tape t;
  Var vx = t.push(x);
  Tensor ones({2}), zeros({2});
  ones[0] = ones[1] = 1.0;
  ad::batchnorm_rows(t, vx, t.push(ones), t.push(zeros), &host, 0.1);

  // row means 3 and 1; population variances 3.5 and 3.5
  REQUIRE(host.mean[0] == Catch::Approx(0.9 * 0.0 + 0.1 * 3.0));
  REQUIRE(host.mean[1] == Catch::Approx(0.1 * 1.0));
  REQUIRE(host.var[0] == Catch::Approx(0.9 * 1.0 + 0.1 * 3.5));
  REQUIRE(host.var[1] == Catch::Approx(0.9 * 1.0 + 0.1 * 3.5));
}

TEST_CASE("the straight-through estimator quantizes values and passes gradients unchanged") {
  Tensor w({4});
  w[0] = 0.5;
  w[1] = -0.5;
  w[2] = 0.05;
  w[3] = 0.0;

  Tape t;
  Var vw = t.push(w);
  Var y = ad::ternarize_ste(t, vw);
  REQUIRE(t.val(y)[0] == Catch::Approx(0.5));
  REQUIRE(t.val(y)[1] == Catch::Approx(-0.5));
  REQUIRE(t.val(y)[2] == 0.0);
  REQUIRE(t.val(y)[3] == 0.0);

  Var scores = ad::reshape(t, y, {4, 1});
  Var loss = ad::cross_entropy(t, scores, {1});
  t.backward(loss);
  // identity backward: the gradient at w is the gradient at y, element by element
  const Tensor& gy = t.grad(y);
  const Tensor& gw = t.grad(vw);
  for (int64_t i = 0; i < 4; ++i) REQUIRE(gw[i] == gy[i]);
}

TEST_CASE("multiclass margin loss at hand-computed values") {
  Tensor S({2, 2});
  S.at2(0, 0) = 1.0;
  S.at2(1, 0) = 0.7;
  S.at2(0, 1) = 0.2;
  S.at2(1, 1) = 0.1;
  std::vector<int> labels = {0, 1};

  Tape t;
  Var vs = t.push(S);
  Var loss = ad::hinge_loss(t, vs, labels);
  // margins 0.7 and 1.1, averaged
  REQUIRE(t.val(loss)[0] == Catch::Approx(0.9));

  t.backward(loss);
  const Tensor& g = t.grad(vs);
  REQUIRE(g.at2(1, 0) == Catch::Approx(0.5));
  REQUIRE(g.at2(0, 0) == Catch::Approx(-0.5));
  REQUIRE(g.at2(0, 1) == Catch::Approx(0.5));
  REQUIRE(g.at2(1, 1) == Catch::Approx(-0.5));

  SECTION("finite differences agree away from the hinge point") {
    std::vector<Tensor> params = {S};
    real worst = grad_check(params, [&](Tape& tt, const std::vector<Var>& v) {
      return ad::hinge_loss(tt, v[0], labels);
    });
    REQUIRE(worst < 1e-8);
  }
}

TEST_CASE("cross entropy of all-equal scores is log of the class count") {
  Tensor S({2, 2});
  Tape t;
  Var loss = ad::cross_entropy(t, t.push(S), {0, 1});
  REQUIRE(t.val(loss)[0] == Catch::Approx(std::log(2.0)));
}

TEST_CASE("distillation divergence vanishes when student equals teacher") {
  Rng rng(83);
  Tensor S = filled(rng, {4, 3});
  Tape t;
  Var loss = ad::kd_kl(t, t.push(S), S, 2.0);
  REQUIRE(t.val(loss)[0] == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("distillation divergence matches an independent recomputation") {
  Rng rng(89);
  Tensor S = filled(rng, {3, 2});
  Tensor T = filled(rng, {3, 2});
  real tau = 2.0;

  auto soft = [&](const Tensor& M, int64_t n, real temp) {
    std::vector<real> p(3);
    real z = 0.0;
    for (int64_t j = 0; j < 3; ++j) z += std::exp(M.at2(j, n) / temp);
    for (int64_t j = 0; j < 3; ++j) p[static_cast<size_t>(j)] = std::exp(M.at2(j, n) / temp) / z;
    return p;
  };
  real want = 0.0;
  for (int64_t n = 0; n < 2; ++n) {
    std::vector<real> p = soft(S, n, tau), q = soft(T, n, tau);
    for (int64_t j = 0; j < 3; ++j)
      want += q[static_cast<size_t>(j)] * std::log(q[static_cast<size_t>(j)] / p[static_cast<size_t>(j)]);
  }
  want = want * tau * tau / 2.0;

  Tape t;
  Var loss = ad::kd_kl(t, t.push(S), T, tau);
  REQUIRE(t.val(loss)[0] == Catch::Approx(want).epsilon(1e-10));

  std::vector<Tensor> params = {S};
  real worst = grad_check(params, [&](Tape& tt, const std::vector<Var>& v) {
    return ad::kd_kl(tt, v[0], T, tau);
  });
  REQUIRE(worst < 1e-6);
}

TEST_CASE("scalar mixing combines losses linearly") {
  Tape t;
  Var a = t.push(Tensor::scalar(3.0));
  Var b = t.push(Tensor::scalar(-1.0));
  Var m = ad::mix(t, a, b, 0.5, 2.0);
  REQUIRE(t.val(m)[0] == Catch::Approx(-0.5));
  t.backward(m);
  REQUIRE(t.grad(a)[0] == Catch::Approx(0.5));
  REQUIRE(t.grad(b)[0] == Catch::Approx(2.0));
}
