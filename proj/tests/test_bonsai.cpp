#include <catch2/catch_amalgamated.hpp>

#include "thn/bonsai.hpp"

using namespace thn;

namespace {

Tensor random_tensor(Rng& rng, std::vector<int64_t> shape, real lo = -1.0, real hi = 1.0) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// depth-2 tree with dense matrices everywhere
BonsaiTree dense_tree(Rng& rng, int depth, int64_t D, int64_t Dh, int64_t L) {
  BonsaiTree t;
  t.depth = depth;
  t.dim_in = D;
  t.dim_proj = Dh;
  t.num_classes = L;
  t.Z = random_tensor(rng, {Dh, D});
  t.nodes.resize(static_cast<size_t>(t.node_count()));
  for (int64_t k = 0; k < t.node_count(); ++k) {
    BonsaiNode& n = t.nodes[static_cast<size_t>(k)];
    n.W = random_tensor(rng, {Dh, L});
    n.V = random_tensor(rng, {Dh, L});
    if (t.is_internal(k)) n.theta = random_tensor(rng, {Dh});
  }
  return t;
}

Tensor transposed(const Tensor& M) {
  Tensor out({M.dim(1), M.dim(0)});
  for (int64_t i = 0; i < M.dim(0); ++i)
    for (int64_t j = 0; j < M.dim(1); ++j) out.at2(j, i) = M.at2(i, j);
  return out;
}

StrassenLayer inference_spn(Rng& rng, int64_t fan_in, int64_t fan_out, int64_t r) {
  StrassenLayer S;
  S.kind = StrassenKind::matmul;
  S.r = r;
  S.fan_in = fan_in;
  S.fan_out = fan_out;
  std::vector<int> b(static_cast<size_t>(r * fan_in)), c(static_cast<size_t>(fan_out * r));
  for (int& x : b) x = static_cast<int>(rng.uniform_int(-1, 1));
  for (int& x : c) x = static_cast<int>(rng.uniform_int(-1, 1));
  S.Wb = TernaryMatrix::from_values(r, fan_in, b);
  S.Wc = TernaryMatrix::from_values(fan_out, r, c);
  S.a_hat = random_tensor(rng, {r});
  return S;
}

}  // namespace

TEST_CASE("path indicators partition unit mass at every level") {
  Rng rng(31);
  BonsaiTree t = dense_tree(rng, 3, 10, 6, 4);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor xhat = random_tensor(rng, {6});
    std::vector<real> ind = path_indicators(t, xhat, t.sigma_i);
    REQUIRE(ind.size() == 15);
    REQUIRE(ind[0] == 1.0);
    for (real v : ind) {
      REQUIRE(v >= 0.0);
      REQUIRE(v <= 1.0);
    }
    for (int level = 0; level <= 3; ++level) {
      real sum = 0.0;
      int64_t first = (int64_t{1} << level) - 1;
      for (int64_t k = first; k < 2 * first + 1; ++k) sum += ind[static_cast<size_t>(k)];
      REQUIRE(sum == Catch::Approx(1.0).epsilon(1e-6));
    }
    // each split conserves its parent's mass exactly
    for (int64_t k = 0; k < t.internal_count(); ++k)
      REQUIRE(ind[static_cast<size_t>(2 * k + 1)] + ind[static_cast<size_t>(2 * k + 2)] ==
              Catch::Approx(ind[static_cast<size_t>(k)]).margin(1e-12));
  }
}

TEST_CASE("a sharp branching slope collapses soft scores onto the hard path") {
  Rng rng(37);
  BonsaiTree t = dense_tree(rng, 2, 12, 6, 5);
  t.sigma_i = 1e4;
  int checked = 0;
  for (int trial = 0; trial < 40; ++trial) {
    Tensor x = random_tensor(rng, {12});
    Tensor xhat = project(t, x);
    // skip inputs that sit on a decision boundary; sharpness cannot separate those
    bool near_boundary = false;
    for (int64_t k = 0; k < t.internal_count(); ++k) {
      real d = 0.0;
      for (int64_t i = 0; i < 6; ++i) d += t.nodes[static_cast<size_t>(k)].theta[i] * xhat[i];
      if (std::abs(d) < 1e-3) near_boundary = true;
    }
    if (near_boundary) continue;
    Tensor soft = tree_predict(t, x, PredictMode::soft);
    Tensor hard = tree_predict(t, x, PredictMode::hard);
    for (int64_t l = 0; l < 5; ++l)
      REQUIRE(soft[l] == Catch::Approx(hard[l]).margin(1e-3));
    ++checked;
  }
  REQUIRE(checked >= 20);
}

TEST_CASE("zero branching margin routes to the left child") {
  Rng rng(41);
  BonsaiTree t = dense_tree(rng, 1, 4, 3, 2);
  // kill the root's branching vector so d = 0 for every input
  t.nodes[0].theta = Tensor({3});
  Tensor x = random_tensor(rng, {4});
  Tensor xhat = project(t, x);

  Tensor got = tree_predict(t, x, PredictMode::hard);
  Tensor want = node_score(t, 0, xhat);
  Tensor left = node_score(t, 1, xhat);
  for (int64_t l = 0; l < 2; ++l) want[l] += left[l];
  for (int64_t l = 0; l < 2; ++l) REQUIRE(got[l] == Catch::Approx(want[l]).margin(1e-12));
}

TEST_CASE("instrumented tree op counts follow the closed form") {
  Rng rng(43);
  int64_t D = 9, Dh = 5, L = 4;
  BonsaiTree t = dense_tree(rng, 2, D, Dh, L);
  Tensor x = random_tensor(rng, {D});

  OpCounter ops;
  tree_predict(t, x, PredictMode::soft, &ops);
  int64_t nodes = t.node_count(), internal = t.internal_count();
  REQUIRE(ops.macs == Dh * D + nodes * 2 * Dh * L + internal * Dh);
  REQUIRE(ops.muls == nodes * L);
  REQUIRE(ops.adds == 0);

  OpCounter hard_ops;
  tree_predict(t, x, PredictMode::hard, &hard_ops);
  // one root-to-leaf path: depth+1 nodes, depth branching dots
  REQUIRE(hard_ops.macs == Dh * D + 3 * 2 * Dh * L + 2 * Dh);
  REQUIRE(hard_ops.muls == 3 * L);
}

TEST_CASE("a tree with factorized matrices matches its dense reconstruction") {
  Rng rng(47);
  int64_t D = 8, Dh = 5, L = 3;
  BonsaiTree spn_t;
  spn_t.depth = 2;
  spn_t.dim_in = D;
  spn_t.dim_proj = Dh;
  spn_t.num_classes = L;
  spn_t.Z = inference_spn(rng, D, Dh, 4);
  spn_t.nodes.resize(static_cast<size_t>(spn_t.node_count()));

  BonsaiTree dense_t = spn_t;
  {
    const StrassenLayer& S = std::get<StrassenLayer>(spn_t.Z);
    dense_t.Z = reconstruct_dense(S);  // [Dh, D], applied directly
  }
  for (int64_t k = 0; k < spn_t.node_count(); ++k) {
    BonsaiNode& n = spn_t.nodes[static_cast<size_t>(k)];
    n.W = inference_spn(rng, Dh, L, L);
    n.V = inference_spn(rng, Dh, L, L);
    BonsaiNode& dn = dense_t.nodes[static_cast<size_t>(k)];
    // dense node matrices are stored [Dh, L] and applied transposed
    dn.W = transposed(reconstruct_dense(std::get<StrassenLayer>(n.W)));
    dn.V = transposed(reconstruct_dense(std::get<StrassenLayer>(n.V)));
    if (spn_t.is_internal(k)) {
      n.theta = random_tensor(rng, {Dh});
      dn.theta = n.theta;
    }
  }

  for (int trial = 0; trial < 25; ++trial) {
    Tensor x = random_tensor(rng, {D});
    for (PredictMode mode : {PredictMode::soft, PredictMode::hard}) {
      Tensor a = tree_predict(spn_t, x, mode);
      Tensor b = tree_predict(dense_t, x, mode);
      for (int64_t l = 0; l < L; ++l)
        REQUIRE(a[l] == Catch::Approx(b[l]).margin(1e-4));
    }
  }
}

TEST_CASE("tree validation catches malformed nodes") {
  Rng rng(53);
  BonsaiTree t = dense_tree(rng, 1, 4, 3, 2);
  SECTION("wrong node count") {
    t.nodes.pop_back();
    REQUIRE_THROWS_AS(t.validate(), ShapeError);
  }
  SECTION("internal node without branching vector") {
    t.nodes[0].theta = Tensor();
    REQUIRE_THROWS_AS(t.validate(), ShapeError);
  }
  SECTION("input length mismatch") {
    Tensor x({5});
    REQUIRE_THROWS_AS(tree_predict(t, x, PredictMode::soft), ShapeError);
  }
}
