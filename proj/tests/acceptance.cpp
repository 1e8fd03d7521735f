// End-to-end acceptance harness. Each numbered check prints one PASS/FAIL
// line with the measured figures; the process exits nonzero if any fails.
// Unlike the unit suites this runs the full pipeline, so the later checks
// train a real model and take a few minutes.

#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <string>
#include <vector>

#include "thn/thn.hpp"

using namespace thn;

namespace {

int failures = 0;

void line(int n, bool ok, const std::string& detail) {
  std::printf("criterion %d: %s (%s)\n", n, ok ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

Tensor random_tensor(Rng& rng, std::vector<int64_t> shape, real lo = -1.0, real hi = 1.0) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

TernaryMatrix random_ternary(Rng& rng, int64_t rows, int64_t cols, bool allow_zero = true) {
  std::vector<int> v(static_cast<size_t>(rows * cols));
  for (int& x : v) {
    x = static_cast<int>(rng.uniform_int(-1, 1));
    if (!allow_zero && x == 0) x = 1;
  }
  return TernaryMatrix::from_values(rows, cols, v);
}

// ---------------------------------------------------------------------------
// 1. The seven-product 2x2 kernel is exact and costs exactly 7 muls, 36 adds.

void criterion1() {
  SpnCoeffs s = strassen_2x2();
  Rng rng(101);
  int exact = 0;
  bool counts_ok = true;
  for (int trial = 0; trial < 1000; ++trial) {
    Tensor A({2, 2}), B({2, 2});
    for (int64_t i = 0; i < 4; ++i) {
      A[i] = static_cast<real>(rng.uniform_int(-50, 50));
      B[i] = static_cast<real>(rng.uniform_int(-50, 50));
    }
    OpCounter ops;
    Tensor C = spn_matmul(s.Wa, s.Wb, s.Wc, A, B, &ops);
    Tensor R = matmul_ref(A, B);
    bool same = true;
    for (int64_t i = 0; i < 4; ++i)
      if (C[i] != R[i]) same = false;
    if (same) ++exact;
    if (ops.muls != 7 || ops.adds != 36 || ops.macs != 0) counts_ok = false;
  }
  line(1, exact == 1000 && counts_ok,
       fmt("2x2 factored matmul bit-exact on %d/1000 integer pairs, 7 muls and 36 adds each",
           exact));
}

// ---------------------------------------------------------------------------
// 2. A factored pointwise conv with c_in = c_out = r costs twice the adds of
//    the dense layer's MACs, analytically and as executed.

HybridModel pointwise_model(int64_t c, bool factored, Rng& rng) {
  HybridModel m;
  m.name = factored ? "pw_spn" : "pw_dense";
  m.input_shape = {c, 4, 3};
  m.num_classes = 1;
  ConvGeometry g;
  g.in_channels = c;
  g.out_channels = c;
  if (factored) {
    StrassenConvLayer L;
    L.spn.kind = StrassenKind::conv_pointwise;
    L.spn.geom = g;
    L.spn.r = c;
    L.spn.fan_in = c;
    L.spn.fan_out = c;
    // zero-free coefficients so the executed-nnz figure equals the dense one
    L.spn.Wb = random_ternary(rng, c, c, false);
    L.spn.Wc = random_ternary(rng, c, c, false);
    L.spn.a_hat = random_tensor(rng, {c});
    m.layers.push_back(L);
  } else {
    DenseConvLayer L;
    L.kind = StrassenKind::conv_pointwise;
    L.geom = g;
    L.W = random_tensor(rng, {c, c, 1, 1});
    m.layers.push_back(L);
  }
  m.layers.push_back(FlattenLayer{});
  DenseHead h;
  h.W = random_tensor(rng, {1, c * 12});
  h.bias = Tensor({1});
  m.head = h;
  return m;
}

void criterion2() {
  Rng rng(103);
  bool ok = true;
  std::string detail;
  for (int64_t c : {int64_t{8}, int64_t{16}, int64_t{64}}) {
    HybridModel spn_m = pointwise_model(c, true, rng);
    HybridModel dense_m = pointwise_model(c, false, rng);
    Tensor x = random_tensor(rng, {c, 4, 3});
    const int64_t P = 4 * 3;
    for (CountMode mode : {CountMode::inference_nnz, CountMode::dense_estimate}) {
      OpReport rs = count_ops(spn_m, mode);
      OpReport rd = count_ops(dense_m, mode);
      long long want_adds = 2 * c * c * P;
      if (rs.rows[0].adds != want_adds || rd.rows[0].macs != c * c * P ||
          rs.rows[0].adds != 2 * rd.rows[0].macs)
        ok = false;
      OpCounter is, id;
      is.mode = mode;
      id.mode = mode;
      forward(spn_m, x, &is);
      forward(dense_m, x, &id);
      long long head_macs = rd.rows.back().macs;
      if (is.adds != want_adds || id.macs - head_macs != c * c * P) ok = false;
      if (c == 64 && mode == CountMode::inference_nnz)
        detail = fmt("c=8,16,64: factored adds = 2x dense MACs (%lld = 2x%lld at c=64), "
                     "counted and executed",
                     is.adds, id.macs - head_macs);
    }
  }
  line(2, ok, detail);
}

// ---------------------------------------------------------------------------
// 3. Size accounting reproduces the three reference figures.

StrassenConvLayer sized_spn_conv(StrassenKind kind, ConvGeometry g, int64_t r) {
  StrassenConvLayer L;
  L.spn.kind = kind;
  L.spn.geom = g;
  L.spn.r = r;
  L.spn.fan_in = g.patch_len();
  L.spn.fan_out = g.out_channels;
  L.spn.Wb.emplace(r, L.spn.fan_in);
  L.spn.Wc.emplace(L.spn.fan_out, r);
  L.spn.a_hat.emplace(std::vector<int64_t>{r});
  L.spn.bias = Tensor({g.out_channels});
  return L;
}

HybridModel sized_model_a() {
  HybridModel m;
  m.name = "size_a";
  m.input_shape = {6897, 1, 1};
  m.num_classes = 1;
  ConvGeometry g;
  g.in_channels = 6897;
  g.out_channels = 937;
  m.layers.push_back(sized_spn_conv(StrassenKind::conv_pointwise, g, 4));
  m.layers.push_back(FlattenLayer{});
  DenseHead h;
  h.W = Tensor({1, 937});
  h.bias = Tensor({1});
  m.head = h;
  return m;
}

HybridModel sized_model_bc(int64_t in_h, int64_t in_w, int64_t pad) {
  HybridModel m;
  m.name = "size_bc";
  m.input_shape = {1, in_h, in_w};
  m.num_classes = 12;
  ConvGeometry g0;
  g0.kernel_h = g0.kernel_w = 3;
  g0.pad_h = g0.pad_w = pad;
  g0.in_channels = 1;
  g0.out_channels = 2;
  g0.depthwise = true;
  m.layers.push_back(sized_spn_conv(StrassenKind::conv_depthwise, g0, 7));
  AvgPoolLayer pool;
  pool.kernel_h = g0.out_h(in_h);
  pool.kernel_w = g0.out_w(in_w);
  m.layers.push_back(pool);
  ConvGeometry g2;
  g2.in_channels = 2;
  g2.out_channels = 12;
  m.layers.push_back(sized_spn_conv(StrassenKind::conv_pointwise, g2, 1342));
  m.layers.push_back(FlattenLayer{});
  DenseHead h;
  h.W = Tensor({12, 12});
  h.bias = Tensor({12});
  m.head = h;

  auto q = std::make_shared<ModelQuant>();
  for (const char* s :
       {"layer0.a_hat", "layer0.bias", "layer2.a_hat", "layer2.bias", "head.W", "head.bias"})
    q->fmts[s] = QFormat{32, 16};
  for (const char* s : {"act.input", "act.layer0.out", "act.layer1.out", "act.layer2.out"})
    q->fmts[s] = QFormat{8, 4};
  for (const char* s : {"act.layer0.mid", "act.layer2.mid", "act.head.scores"})
    q->fmts[s] = QFormat{16, 8};
  m.quant = q;
  return m;
}

void criterion3() {
  auto kib = [](int64_t bytes) { return static_cast<double>(bytes) / 1024.0; };
  auto near = [](double x, double want) { return std::fabs(x - want) <= 0.01; };

  HybridModel a = sized_model_a();
  SizeReport ra = model_size(a);
  bool ok_a = near(kib(ra.total_bytes), 14.99) && near(kib(ra.ternary_bytes()), 7.65) &&
              near(kib(ra.other_bytes()), 7.34);

  MemoryReport rb = memory_footprint(sized_model_bc(943, 3, 0));
  bool ok_b = near(kib(rb.model_bytes), 10.54) && near(kib(rb.peak_pair_bytes), 15.63) &&
              near(rb.kib(), 26.17);

  MemoryReport rc = memory_footprint(sized_model_bc(40, 50, 1));
  bool ok_c = near(kib(rc.model_bytes), 10.54) && near(kib(rc.peak_pair_bytes), 31.25) &&
              near(rc.kib(), 41.79);

  line(3, ok_a && ok_b && ok_c,
       fmt("model bytes 7.34f+7.65t=%.2f KiB, footprints %.2f+%.2f=%.2f and %.2f+%.2f=%.2f KiB",
           kib(ra.total_bytes), kib(rb.model_bytes), kib(rb.peak_pair_bytes), rb.kib(),
           kib(rc.model_bytes), kib(rc.peak_pair_bytes), rc.kib()));
}

// ---------------------------------------------------------------------------
// 4. Analytic counts equal instrumented execution across randomized models,
//    every layer kind, both count modes, both tree modes.

void collapse_all(HybridModel& m) {
  for (Layer& l : m.layers)
    if (auto* s = std::get_if<StrassenConvLayer>(&l))
      if (s->spn.shadow) collapse_layer(s->spn);
  if (auto* bh = std::get_if<BonsaiHead>(&m.head)) {
    auto maybe = [](BonsaiMatrix& bm) {
      if (auto* S = std::get_if<StrassenLayer>(&bm))
        if (S->shadow) collapse_layer(*S);
    };
    maybe(bh->tree.Z);
    for (BonsaiNode& n : bh->tree.nodes) {
      maybe(n.W);
      maybe(n.V);
    }
  }
}

std::string random_arch(int i, bool& dense_conv, bool& spn_conv, bool& dense_dw, bool& spn_dw,
                        bool& dense_pw, bool& spn_pw, bool& pooled, bool& dense_head,
                        bool& tree_dense, bool& tree_spn) {
  int64_t C = 1 + i % 3, H = 7 + i % 6, W = 6 + i % 5;
  int classes = 2 + i % 4;
  std::string a = "name rand" + std::to_string(i) + "\n";
  a += fmt("input %lld %lld %lld\nclasses %d\n", C, H, W, classes);

  int64_t s = i % 2 ? 2 : 1;
  int64_t c1 = 3 + i % 5;
  a += fmt("conv %lld k 3x3 s %lldx%lld p 1x1", c1, s, s);
  if (i % 2) {
    a += fmt(" spn r %d", 4 + i % 6);
    spn_conv = true;
  } else {
    dense_conv = true;
  }
  a += "\n";
  H = (H + 2 - 3) / s + 1;
  W = (W + 2 - 3) / s + 1;

  if (i % 3 != 2) {
    if ((i / 2) % 2) {
      a += fmt("dw_conv k 3x3 p 1x1 spn r %d\n", 4 + i % 5);
      spn_dw = true;
    } else {
      a += fmt("dw_conv mult %d k 3x3 p 1x1\n", 1 + i % 2);
      dense_dw = true;
    }
    int64_t c2 = 4 + i % 6;
    if ((i / 3) % 2) {
      a += fmt("pw_conv %lld spn r %d\n", c2, 3 + i % 7);
      spn_pw = true;
    } else {
      a += fmt("pw_conv %lld\n", c2);
      dense_pw = true;
    }
  }

  if (i % 5 != 0) {
    int64_t kh = i % 4 == 1 ? H : std::max<int64_t>(1, H / 2);
    int64_t kw = i % 4 == 1 ? W : std::max<int64_t>(1, W / 2);
    a += fmt("avg_pool %lldx%lld\n", kh, kw);
    pooled = true;
  }
  a += "flatten\n";

  if (i % 2) {
    int depth = 1 + i % 2, proj = 3 + i % 4;
    a += fmt("head bonsai depth %d proj %d", depth, proj);
    if ((i / 4) % 2) {
      a += fmt(" spn r %d", 4 + i % 5);
      tree_spn = true;
    } else {
      tree_dense = true;
    }
    if (i % 3 == 0) a += " sigma 1.5 sigma_i 0.7";
    a += "\n";
  } else {
    a += "head dense\n";
    dense_head = true;
  }
  return a;
}

void criterion4() {
  bool ok = true;
  bool dc = false, sc = false, ddw = false, sdw = false, dpw = false, spw = false, pooled = false,
       dh = false, td = false, ts = false;
  int mismatches = 0;
  for (int i = 0; i < 50; ++i) {
    HybridModel m =
        materialize(parse_arch(random_arch(i, dc, sc, ddw, sdw, dpw, spw, pooled, dh, td, ts)),
                    static_cast<uint64_t>(1000 + i));
    collapse_all(m);
    Rng rng(static_cast<uint64_t>(2000 + i));
    Tensor x = random_tensor(rng, m.input_shape);
    Tensor zero(m.input_shape);
    auto check = [&](CountMode cm, PredictMode tm, const Tensor& input) {
      OpReport rep = count_ops(m, cm, tm);
      OpCounter ops;
      ops.mode = cm;
      forward(m, input, &ops, tm);
      if (rep.muls != ops.muls || rep.adds != ops.adds || rep.macs != ops.macs) {
        ok = false;
        ++mismatches;
      }
    };
    check(CountMode::inference_nnz, PredictMode::soft, x);
    check(CountMode::dense_estimate, PredictMode::soft, x);
    check(CountMode::dense_estimate, PredictMode::hard, x);
    // zero input routes the hard walk down the leftmost path, which is the
    // path the analytic hard count prices (ties go left)
    check(CountMode::inference_nnz, PredictMode::hard, zero);
  }
  bool covered = dc && sc && ddw && sdw && dpw && spw && pooled && dh && td && ts;
  if (!covered) ok = false;
  line(4, ok,
       fmt("50 randomized models x 4 count/tree mode pairs, %d mismatches, all layer kinds %s",
           mismatches, covered ? "covered" : "NOT covered"));
}

// ---------------------------------------------------------------------------
// 5. Reverse-mode gradients match central finite differences through every
//    differentiable region: conv stack, factored layers with the estimator
//    off, soft tree scoring, hinge loss, distillation loss.

void criterion5() {
  real worst = 0;
  Rng rng(61);
  auto filled = [&rng](std::vector<int64_t> shape, real lo = -1.0, real hi = 1.0) {
    return random_tensor(rng, std::move(shape), lo, hi);
  };

  {  // conv + bias + norm + pool + linear head
    ConvGeometry g;
    g.kernel_h = g.kernel_w = 3;
    g.pad_h = g.pad_w = 1;
    g.in_channels = 2;
    g.out_channels = 3;
    std::vector<Tensor> params;
    params.push_back(filled({2, 2, 5, 4}));
    params.push_back(filled({3, 18}, -0.5, 0.5));
    params.push_back(filled({3}, -0.2, 0.2));
    params.push_back(filled({3}, 0.5, 1.5));
    params.push_back(filled({3}, -0.3, 0.3));
    params.push_back(filled({3, 3}, -0.6, 0.6));
    BatchNorm host;
    host.gamma = Tensor({3});
    host.beta = Tensor({3});
    host.mean = Tensor({3});
    host.var = Tensor({3});
    std::vector<int> labels = {0, 2};
    worst = std::max(worst, grad_check(params, [&](Tape& t, const std::vector<Var>& v) {
      Var cols = ad::im2col_batch(t, v[0], g);
      Var pre = ad::matmul(t, v[1], cols);
      pre = ad::bias_rows(t, pre, v[2]);
      pre = ad::batchnorm_rows(t, pre, v[3], v[4], &host);
      Var maps = ad::cols2maps(t, pre, 2, 5, 4);
      Var pooled = ad::avg_pool_batch(t, maps, 5, 4, 5, 4);
      Var feats = ad::flatten_cols(t, pooled);
      Var scores = ad::matmul_tn(t, v[5], feats);
      return ad::cross_entropy(t, scores, labels);
    }));
  }

  {  // factored layer in float form (estimator off): a = Wa vecA, Wc((Wb x) . a)
    const int64_t r = 5, fi = 4, fo = 3, N = 3;
    std::vector<Tensor> params;
    params.push_back(filled({r, fi * fo}, -0.6, 0.6));
    params.push_back(filled({fi * fo}, -0.6, 0.6));
    params.push_back(filled({r, fi}, -0.6, 0.6));
    params.push_back(filled({fo, r}, -0.6, 0.6));
    params.push_back(filled({fi, N}));
    std::vector<int> labels = {2, 0, 1};
    worst = std::max(worst, grad_check(params, [&](Tape& t, const std::vector<Var>& v) {
      Var a = ad::reshape(t, ad::matmul(t, v[0], ad::reshape(t, v[1], {fi * fo, 1})), {r});
      Var mid = ad::rowscale(t, ad::matmul(t, v[2], v[4]), a);
      Var out = ad::matmul(t, v[3], mid);
      return ad::hinge_loss(t, out, labels);
    }));
  }

  {  // depth-1 soft tree: projected scores weighted by branch indicators
    const int64_t D = 6, Dh = 4, L = 3, N = 4;
    const real sigma = 0.8, sigma_i = 1.3;
    std::vector<Tensor> params;
    params.push_back(filled({D, N}));
    params.push_back(filled({Dh, D}, -0.5, 0.5));
    for (int k = 0; k < 3; ++k) {
      params.push_back(filled({Dh, L}, -0.5, 0.5));
      params.push_back(filled({Dh, L}, -0.5, 0.5));
    }
    params.push_back(filled({Dh}, -0.5, 0.5));
    std::vector<int> labels = {1, 0, 2, 1};
    worst = std::max(worst, grad_check(params, [&](Tape& t, const std::vector<Var>& v) {
      Var xhat = ad::matmul(t, v[1], v[0]);
      std::vector<Var> score;
      for (int k = 0; k < 3; ++k) {
        Var u = ad::matmul_tn(t, v[2 + 2 * k], xhat);
        Var w = ad::matmul_tn(t, v[3 + 2 * k], xhat);
        score.push_back(ad::mul(t, u, ad::tanh_op(t, ad::scale_const(t, w, sigma))));
      }
      Var th = ad::reshape(t, v[8], {Dh, 1});
      Var d = ad::reshape(t, ad::matmul_tn(t, th, xhat), {N});
      Var p = ad::affine_const(t, ad::tanh_op(t, ad::scale_const(t, d, sigma_i)), 0.5, 0.5);
      Var q = ad::affine_const(t, p, -1.0, 1.0);
      Var total = ad::add(t, score[0], ad::add(t, ad::colscale(t, score[1], p),
                                               ad::colscale(t, score[2], q)));
      return ad::cross_entropy(t, total, labels);
    }));
  }

  {  // hinge and distillation terms mixed, gradients through the student
    const int64_t L = 4, N = 3;
    std::vector<Tensor> params;
    params.push_back(filled({L, N}, -0.8, 0.8));
    Tensor teacher = filled({L, N}, -1.0, 1.0);
    std::vector<int> labels = {3, 1, 0};
    worst = std::max(worst, grad_check(params, [&](Tape& t, const std::vector<Var>& v) {
      Var h = ad::hinge_loss(t, v[0], labels);
      Var k = ad::kd_kl(t, v[0], teacher, 3.0);
      return ad::mix(t, h, k, 0.5, 0.5);
    }));
  }

  line(5, worst < 1e-4, fmt("worst relative gradient error %.3g across conv, factored, "
                            "tree, hinge and distillation graphs (budget 1e-4)",
                            worst));
}

// ---------------------------------------------------------------------------
// 6. Tree invariants: indicators partition mass at every level, and a sharp
//    branching slope collapses soft scores onto the hard path.

BonsaiTree random_dense_tree(Rng& rng, int depth, int64_t D, int64_t Dh, int64_t L) {
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

void criterion6() {
  Rng rng(107);
  BonsaiTree t = random_dense_tree(rng, 3, 10, 6, 4);
  real worst_sum = 0;
  for (int trial = 0; trial < 30; ++trial) {
    Tensor xhat = random_tensor(rng, {6});
    std::vector<real> ind = path_indicators(t, xhat, t.sigma_i);
    for (int level = 0; level <= 3; ++level) {
      real sum = 0;
      int64_t first = (int64_t{1} << level) - 1;
      for (int64_t k = first; k < 2 * first + 1; ++k) sum += ind[static_cast<size_t>(k)];
      worst_sum = std::max(worst_sum, std::fabs(sum - 1.0));
    }
  }

  BonsaiTree sharp = random_dense_tree(rng, 2, 12, 6, 5);
  sharp.sigma_i = 1e4;
  real worst_gap = 0;
  int checked = 0;
  for (int trial = 0; trial < 60 && checked < 25; ++trial) {
    Tensor x = random_tensor(rng, {12});
    Tensor xhat = project(sharp, x);
    bool near_boundary = false;
    for (int64_t k = 0; k < sharp.internal_count(); ++k) {
      real d = 0;
      for (int64_t i = 0; i < 6; ++i) d += sharp.nodes[static_cast<size_t>(k)].theta[i] * xhat[i];
      if (std::fabs(d) < 1e-3) near_boundary = true;
    }
    if (near_boundary) continue;
    Tensor soft = tree_predict(sharp, x, PredictMode::soft);
    Tensor hard = tree_predict(sharp, x, PredictMode::hard);
    for (int64_t l = 0; l < 5; ++l) worst_gap = std::max(worst_gap, std::fabs(soft[l] - hard[l]));
    ++checked;
  }

  line(6, worst_sum <= 1e-6 && checked >= 20 && worst_gap < 1e-3,
       fmt("level sums off by %.2g (budget 1e-6); soft vs hard gap %.2g over %d "
           "off-boundary inputs at slope 1e4 (budget 1e-3)",
           worst_sum, worst_gap, checked));
}

// ---------------------------------------------------------------------------
// 7 and 8 share one trained model: the seeded 12-class pipeline.

const char* kFixtureArch = R"(
name kws_hybrid
input 1 49 10
classes 12
conv 24 k 10x4 s 2x2 p 5x1 spn r 18
dw_conv k 3x3 s 2x2 p 1x1 spn r 18
pw_conv 32 spn r 24
dw_conv k 3x3 p 1x1 spn r 24
pw_conv 48 spn r 36
avg_pool 13x3
flatten
head bonsai depth 2 proj 24 spn r 18 sigma 1 sigma_i 1
)";

const char* kDenseArch = R"(
name kws_dense
input 1 49 10
classes 12
conv 24 k 10x4 s 2x2 p 5x1
dw_conv k 3x3 s 2x2 p 1x1
pw_conv 32
dw_conv k 3x3 p 1x1
pw_conv 48
avg_pool 13x3
flatten
head bonsai depth 2 proj 24 sigma 1 sigma_i 1
)";

struct Fixture {
  GeneratedData data;
  HybridModel model;
  bool trained = false;
};

void criterion7(Fixture& fx) {
  GenConfig gc;
  gc.classes = 12;
  gc.per_class = 100;
  gc.height = 49;
  gc.width = 10;
  gc.difficulty = 1.0;
  gc.seed = 7;
  fx.data = gen_data(gc);

  fx.model = materialize(parse_arch(kFixtureArch), 1);

  // Three runs: float warmup, quantization-aware with distillation against
  // the float model, then collapsed fine-tuning of the surviving scales. The
  // last run keeps distillation off because a collapsed entry model would be
  // its own teacher, and uses a gentler step so the frozen ternary patterns
  // are not fought.
  TrainConfig p1;
  p1.epochs1 = 40;
  p1.epochs2 = 0;
  p1.epochs3 = 0;
  p1.lr = 5e-4;
  p1.kd_lambda = 0;
  p1.seed = 1;
  p1.sigma_i_end = 25;
  train(fx.model, fx.data.train, fx.data.val, p1);
  double acc1 = trainer::eval_accuracy(fx.model, fx.data.test, 1);

  TrainConfig p2 = p1;
  p2.epochs1 = 0;
  p2.epochs2 = 15;
  p2.kd_lambda = 0.5;
  p2.seed = 2;
  train(fx.model, fx.data.train, fx.data.val, p2);

  TrainConfig p3 = p1;
  p3.epochs1 = 0;
  p3.epochs3 = 8;
  p3.lr = 1e-4;
  p3.seed = 3;
  train(fx.model, fx.data.train, fx.data.val, p3);
  double acc3 = evaluate_accuracy(fx.model, fx.data.test, PredictMode::soft);
  fx.trained = true;

  HybridModel dense = materialize(parse_arch(kDenseArch), 1);
  long long muls_s = count_ops(fx.model).mul_count();
  long long muls_d = count_ops(dense).mul_count();
  double reduction = 1.0 - static_cast<double>(muls_s) / static_cast<double>(muls_d);

  bool ok = acc1 >= 0.90 && (acc1 - acc3) <= 0.0200001 && reduction >= 0.95;
  line(7, ok,
       fmt("float test acc %.4f, collapsed ternary %.4f (budget: drop <= 2 pts); "
           "%lld muls vs %lld dense (%.1f%% fewer, budget >= 95%%)",
           acc1, acc3, muls_s, muls_d, 100.0 * reduction));
}

void criterion8(const Fixture& fx) {
  if (!fx.trained) {
    line(8, false, "skipped: the trained model from the pipeline check is unavailable");
    return;
  }
  HybridModel qm = fx.model, q8 = fx.model;
  fold_batchnorm(qm);
  quantize_model(qm, fx.data.val, quant_policy("mixed"), 120);
  fold_batchnorm(q8);
  quantize_model(q8, fx.data.val, quant_policy("all8"), 120);

  double af = evaluate_accuracy(fx.model, fx.data.test, PredictMode::hard);
  double am = evaluate_accuracy(qm, fx.data.test, PredictMode::hard);
  double a8 = evaluate_accuracy(q8, fx.data.test, PredictMode::hard);
  int64_t fb = model_size(fx.model).total_bytes;
  int64_t qb = model_size(qm).total_bytes;

  bool ok = (af - am) <= 0.0100001 && am >= a8 && qb < fb;
  line(8, ok,
       fmt("float %.4f, mixed 8/16-bit %.4f (budget: drop <= 1 pt), all-8-bit %.4f "
           "(mixed must not lose); %lld bytes quantized vs %lld float",
           af, am, a8, qb, fb));
}

// ---------------------------------------------------------------------------
// 9. Collapsing a trained layer into ternary factors plus a scale vector
//    preserves its outputs.

void criterion9() {
  Rng rng(113);
  real worst = 0;
  for (int trial = 0; trial < 20; ++trial) {
    int64_t r = rng.uniform_int(3, 12);
    int64_t fi = rng.uniform_int(2, 10);
    int64_t fo = rng.uniform_int(2, 8);
    StrassenLayer L;
    L.kind = StrassenKind::matmul;
    L.r = r;
    L.fan_in = fi;
    L.fan_out = fo;
    SpnShadow s;
    s.Wa = random_tensor(rng, {r, fi * fo});
    s.vecA = random_tensor(rng, {fi * fo});
    s.Wb = random_tensor(rng, {r, fi});
    s.Wc = random_tensor(rng, {fo, r});
    s.quantize = true;
    L.shadow = std::move(s);
    if (trial % 2) L.bias = random_tensor(rng, {fo});
    if (trial % 3 == 0) {
      BatchNorm bn;
      bn.gamma = random_tensor(rng, {r}, 0.5, 1.5);
      bn.beta = random_tensor(rng, {r}, -0.3, 0.3);
      bn.mean = random_tensor(rng, {r}, -0.5, 0.5);
      bn.var = random_tensor(rng, {r}, 0.2, 1.5);
      L.bn = bn;
    }

    Tensor X = random_tensor(rng, {fi, 100});
    Tensor before = spn_shadow_apply_cols(L, X);
    collapse_layer(L);
    for (int64_t j = 0; j < 100; ++j) {
      Tensor col({fi});
      for (int64_t i = 0; i < fi; ++i) col[i] = X.at2(i, j);
      Tensor y = spn_matvec_forward(L, col);
      for (int64_t i = 0; i < fo; ++i) {
        real rel = std::fabs(y[i] - before.at2(i, j)) / std::max<real>(1.0, std::fabs(before.at2(i, j)));
        worst = std::max(worst, rel);
      }
    }
  }
  line(9, worst <= 1e-5,
       fmt("20 random layers x 100 inputs, worst relative gap %.3g (budget 1e-5)", worst));
}

}  // namespace

template <class F>
void guarded(int n, F&& f) {
  try {
    f();
  } catch (const std::exception& e) {
    line(n, false, std::string("exception: ") + e.what());
  }
}

int main() {
  guarded(1, [] { criterion1(); });
  guarded(2, [] { criterion2(); });
  guarded(3, [] { criterion3(); });
  guarded(4, [] { criterion4(); });
  guarded(5, [] { criterion5(); });
  guarded(6, [] { criterion6(); });
  Fixture fx;
  guarded(7, [&] { criterion7(fx); });
  guarded(8, [&] { criterion8(fx); });
  guarded(9, [] { criterion9(); });
  if (failures) std::printf("%d criterion(s) failed\n", failures);
  return failures ? 1 : 0;
}
