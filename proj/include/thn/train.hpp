#pragma once

#include <unordered_map>

#include "thn/autodiff.hpp"
#include "thn/dataset.hpp"

namespace thn {

// ---------------------------------------------------------------------------
// Three-phase quantization-aware training.
//
//   phase 1: full-precision shadows (Wa, vecA, Wb, Wc) and everything else
//   phase 2: shadows pass through a straight-through ternary projection in
//            the forward pass; shadow weights clamp to [-1, 1] after each
//            update (vecA stays unclamped)
//   phase 3: ternary patterns frozen by the collapse; only a_hat, biases,
//            batch norm, and the tree's float parameters keep training
//
// Collapse runs once, after phase 2, whenever phase 2 or 3 has epochs.
// Distillation (optional) uses the model state entering phase 2 as the
// teacher (the phase-1 result, or the loaded checkpoint when phase 1 is
// skipped): its per-sample scores are cached once and mixed into the later
// phases' loss. All epoch counts at zero is a no-op that returns the model
// unchanged.

struct TrainConfig {
  int batch_size = 20;
  int epochs1 = 135, epochs2 = 135, epochs3 = 135;
  real lr = 1e-3;
  int lr_step = 45;     // epochs between decays, counted within each phase
  real lr_decay = 0.1;
  std::string loss = "hinge";  // or "cross_entropy"
  real kd_lambda = 0.5;        // 0 disables distillation
  real kd_tau = 3.0;
  real sigma_i_start = 1.0;    // branching sharpness ramp across phase 1
  real sigma_i_end = 100.0;
  uint64_t seed = 1;
  real adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;

  void validate() const {
    if (batch_size < 2) throw ConfigError("batch size must be at least 2");
    if (epochs1 < 0 || epochs2 < 0 || epochs3 < 0) throw ConfigError("negative epoch count");
    if (lr <= 0 || lr_decay <= 0 || lr_step <= 0) throw ConfigError("bad learning rate schedule");
    if (loss != "hinge" && loss != "cross_entropy")
      throw ConfigError("unknown loss '" + loss + "' (hinge or cross_entropy)");
    if (kd_lambda < 0 || kd_lambda > 1) throw ConfigError("distillation weight outside [0,1]");
    if (kd_tau <= 0) throw ConfigError("distillation temperature must be positive");
    if (sigma_i_start <= 0 || sigma_i_end < sigma_i_start)
      throw ConfigError("branching sharpness ramp must be positive and nondecreasing");
  }
};

struct EpochStats {
  int phase = 0;
  int epoch = 0;  // 1-based within the phase
  real loss = 0.0;
  real train_acc = 0.0;
  real val_acc = 0.0;
  real sigma_i = 0.0;
  real lr = 0.0;
};

struct TrainResult {
  std::vector<EpochStats> history;
};

namespace trainer {

template <class F>
inline void for_each_spn(HybridModel& m, F&& f) {
  for (Layer& l : m.layers)
    if (auto* s = std::get_if<StrassenConvLayer>(&l)) f(s->spn);
  if (auto* bh = std::get_if<BonsaiHead>(&m.head)) {
    if (auto* S = std::get_if<StrassenLayer>(&bh->tree.Z)) f(*S);
    for (BonsaiNode& n : bh->tree.nodes) {
      if (auto* S = std::get_if<StrassenLayer>(&n.W)) f(*S);
      if (auto* S = std::get_if<StrassenLayer>(&n.V)) f(*S);
    }
  }
}

// ---------------------------------------------------------------------------
// Per-batch graph construction. Parameters enter the tape once each (keyed by
// host address), so a weight shared across uses accumulates one gradient.

struct Ctx {
  Tape& t;
  HybridModel& m;
  int phase = 1;
  bool train_mode = true;  // batch-stat BN and running updates vs running stats
  std::unordered_map<const Tensor*, Var> vars;

  Var leaf(Tensor& host) {
    auto it = vars.find(&host);
    if (it != vars.end()) return it->second;
    Var v = t.push(host);
    vars.emplace(&host, v);
    return v;
  }
};

inline Var bn_rows(Ctx& c, Var x, BatchNorm& bn) {
  if (c.train_mode)
    return ad::batchnorm_rows(c.t, x, c.leaf(bn.gamma), c.leaf(bn.beta), &bn);
  return ad::batchnorm_rows_eval(c.t, x, bn);
}

// Strassenified map on column data, mirroring the inference order exactly:
// mid = (Wb x) . a, then BN on the r rows, then Wc, then bias.
inline Var spn_cols(Ctx& c, StrassenLayer& S, Var cols) {
  Tape& t = c.t;
  Var mid, out;
  if (c.phase <= 2) {
    if (!S.shadow)
      throw StateError("training phases 1 and 2 need strassen shadows (already collapsed?)");
    SpnShadow& sh = *S.shadow;
    Var wa = c.leaf(sh.Wa), wb = c.leaf(sh.Wb), wc = c.leaf(sh.Wc);
    if (c.phase == 2) {
      wa = ad::ternarize_ste(t, wa);
      wb = ad::ternarize_ste(t, wb);
      wc = ad::ternarize_ste(t, wc);
    }
    Var a_col = ad::matmul(t, wa, ad::reshape(t, c.leaf(sh.vecA), {sh.vecA.size(), 1}));
    mid = ad::rowscale(t, ad::matmul(t, wb, cols), a_col);
    if (S.bn) mid = bn_rows(c, mid, *S.bn);
    out = ad::matmul(t, wc, mid);
  } else {
    if (!S.inference_ready())
      throw StateError("phase 3 needs collapsed strassen weights");
    mid = ad::rowscale(t, ad::tern_matmul(t, *S.Wb, cols), c.leaf(*S.a_hat));
    if (S.bn) mid = bn_rows(c, mid, *S.bn);
    out = ad::tern_matmul(t, *S.Wc, mid);
  }
  if (!S.bias.empty()) out = ad::bias_rows(t, out, c.leaf(S.bias));
  return out;
}

// Dense conv on column data; conv, then bias, then BN, as at inference.
inline Var dense_conv_cols(Ctx& c, DenseConvLayer& L, Var cols) {
  if (L.geom.depthwise)
    throw ConfigError("training dense depthwise convolutions is not supported");
  Tape& t = c.t;
  Var wm = ad::reshape(t, c.leaf(L.W), {L.geom.out_channels, L.geom.patch_len()});
  Var out = ad::matmul(t, wm, cols);
  if (!L.bias.empty()) out = ad::bias_rows(t, out, c.leaf(L.bias));
  if (L.bn) out = bn_rows(c, out, *L.bn);
  return out;
}

// A bonsai matrix applied to batched columns. Node matrices are stored
// [D_hat, L] and act transposed; the projection Z ([D_hat, D]) acts directly.
inline Var bonsai_mat(Ctx& c, BonsaiMatrix& bm, Var x, bool transposed) {
  if (Tensor* W = std::get_if<Tensor>(&bm))
    return transposed ? ad::matmul_tn(c.t, c.leaf(*W), x) : ad::matmul(c.t, c.leaf(*W), x);
  return spn_cols(c, std::get<StrassenLayer>(bm), x);
}

inline Var tree_scores(Ctx& c, BonsaiTree& tr, Var feat) {
  Tape& t = c.t;
  int64_t N = t.val(feat).dim(1);
  Var xhat = bonsai_mat(c, tr.Z, feat, false);
  std::vector<Var> score(static_cast<size_t>(tr.node_count()));
  for (int64_t k = 0; k < tr.node_count(); ++k) {
    BonsaiNode& n = tr.nodes[static_cast<size_t>(k)];
    Var u = bonsai_mat(c, n.W, xhat, true);
    Var v = bonsai_mat(c, n.V, xhat, true);
    score[static_cast<size_t>(k)] =
        ad::mul(t, u, ad::tanh_op(t, ad::scale_const(t, v, tr.sigma)));
  }
  // Path indicators: the root carries weight one; internal node k hands p to
  // child 2k+1 and (1 - p) to 2k+2.
  std::vector<Var> ind(static_cast<size_t>(tr.node_count()));
  for (int64_t k = 0; k < tr.internal_count(); ++k) {
    Tensor& theta = tr.nodes[static_cast<size_t>(k)].theta;
    Var th = ad::reshape(t, c.leaf(theta), {tr.dim_proj, 1});
    Var d = ad::reshape(t, ad::matmul_tn(t, th, xhat), {N});
    Var p = ad::affine_const(t, ad::tanh_op(t, ad::scale_const(t, d, tr.sigma_i)), 0.5, 0.5);
    Var q = ad::affine_const(t, p, -1.0, 1.0);
    ind[static_cast<size_t>(2 * k + 1)] = k == 0 ? p : ad::mul(t, ind[static_cast<size_t>(k)], p);
    ind[static_cast<size_t>(2 * k + 2)] = k == 0 ? q : ad::mul(t, ind[static_cast<size_t>(k)], q);
  }
  Var total = score[0];
  for (int64_t k = 1; k < tr.node_count(); ++k)
    total = ad::add(t, total,
                    ad::colscale(t, score[static_cast<size_t>(k)], ind[static_cast<size_t>(k)]));
  return total;
}

// Batched scores [L, N] for input maps [N, C, H, W].
inline Var build_scores(Ctx& c, Var x4) {
  Tape& t = c.t;
  int64_t N = t.val(x4).dim(0);
  std::vector<int64_t> s = c.m.input_shape;
  Var cur = x4;
  Var feat{-1};
  bool flattened = false;
  for (Layer& l : c.m.layers) {
    if (auto* d = std::get_if<DenseConvLayer>(&l)) {
      Var out = dense_conv_cols(c, *d, ad::im2col_batch(t, cur, d->geom));
      if (d->relu) out = ad::relu(t, out);
      int64_t OH = d->geom.out_h(s[1]), OW = d->geom.out_w(s[2]);
      cur = ad::cols2maps(t, out, N, OH, OW);
      s = {d->geom.out_channels, OH, OW};
    } else if (auto* sc = std::get_if<StrassenConvLayer>(&l)) {
      Var out = spn_cols(c, sc->spn, ad::im2col_batch(t, cur, sc->spn.geom));
      if (sc->relu) out = ad::relu(t, out);
      int64_t OH = sc->spn.geom.out_h(s[1]), OW = sc->spn.geom.out_w(s[2]);
      cur = ad::cols2maps(t, out, N, OH, OW);
      s = {sc->spn.geom.out_channels, OH, OW};
    } else if (auto* p = std::get_if<AvgPoolLayer>(&l)) {
      cur = ad::avg_pool_batch(t, cur, p->kernel_h, p->kernel_w, p->sh(), p->sw());
      s = {s[0], (s[1] - p->kernel_h) / p->sh() + 1, (s[2] - p->kernel_w) / p->sw() + 1};
    } else {
      feat = ad::flatten_cols(t, cur);
      flattened = true;
    }
  }
  if (!flattened) feat = ad::flatten_cols(t, cur);
  if (auto* dh = std::get_if<DenseHead>(&c.m.head)) {
    Var out = ad::matmul(t, c.leaf(dh->W), feat);
    if (!dh->bias.empty()) out = ad::bias_rows(t, out, c.leaf(dh->bias));
    return out;
  }
  return tree_scores(c, std::get<BonsaiHead>(c.m.head).tree, feat);
}

// ---------------------------------------------------------------------------
// Parameter slots and the optimizer. Moments live outside the tape and are
// rebuilt (with the step counter) at each phase boundary.

struct Slot {
  Tensor* host = nullptr;
  bool clamp = false;  // phase-2 ternary shadows pin to [-1, 1]
  Tensor mom, vel;
};

inline std::vector<Slot> collect_params(HybridModel& m, int phase) {
  std::vector<Slot> out;
  auto add = [&out](Tensor& h, bool clamp = false) {
    if (!h.empty()) out.push_back({&h, clamp, Tensor(), Tensor()});
  };
  auto add_spn = [&](StrassenLayer& S) {
    if (phase <= 2) {
      if (!S.shadow) throw StateError("training phases 1 and 2 need strassen shadows");
      add(S.shadow->Wa, phase == 2);
      add(S.shadow->vecA);
      add(S.shadow->Wb, phase == 2);
      add(S.shadow->Wc, phase == 2);
    } else {
      if (!S.a_hat) throw StateError("phase 3 needs collapsed strassen weights");
      add(*S.a_hat);
    }
    add(S.bias);
    if (S.bn) {
      add(S.bn->gamma);
      add(S.bn->beta);
    }
  };
  auto add_bonsai_mat = [&](BonsaiMatrix& bm) {
    if (Tensor* W = std::get_if<Tensor>(&bm))
      add(*W);
    else
      add_spn(std::get<StrassenLayer>(bm));
  };
  for (Layer& l : m.layers) {
    if (auto* d = std::get_if<DenseConvLayer>(&l)) {
      if (phase <= 2) add(d->W);
      add(d->bias);
      if (d->bn) {
        add(d->bn->gamma);
        add(d->bn->beta);
      }
    } else if (auto* s = std::get_if<StrassenConvLayer>(&l)) {
      add_spn(s->spn);
    }
  }
  if (auto* dh = std::get_if<DenseHead>(&m.head)) {
    if (phase <= 2) add(dh->W);
    add(dh->bias);
  } else {
    BonsaiTree& tr = std::get<BonsaiHead>(m.head).tree;
    add_bonsai_mat(tr.Z);
    for (int64_t k = 0; k < tr.node_count(); ++k) {
      BonsaiNode& n = tr.nodes[static_cast<size_t>(k)];
      add_bonsai_mat(n.W);
      add_bonsai_mat(n.V);
      if (tr.is_internal(k)) add(n.theta);
    }
  }
  return out;
}

struct Adam {
  real b1, b2, eps;
  int64_t steps = 0;

  void step(std::vector<Slot>& slots, Tape& t, const std::vector<Var>& vars, real lr) {
    ++steps;
    real c1 = 1.0 - std::pow(b1, static_cast<real>(steps));
    real c2 = 1.0 - std::pow(b2, static_cast<real>(steps));
    for (size_t i = 0; i < slots.size(); ++i) {
      Slot& s = slots[i];
      const Tensor& g = t.grad(vars[i]);
      if (s.mom.empty()) {
        s.mom = Tensor(s.host->shape());
        s.vel = Tensor(s.host->shape());
      }
      Tensor& w = *s.host;
      for (int64_t j = 0; j < w.size(); ++j) {
        s.mom[j] = b1 * s.mom[j] + (1.0 - b1) * g[j];
        s.vel[j] = b2 * s.vel[j] + (1.0 - b2) * g[j] * g[j];
        w[j] -= lr * (s.mom[j] / c1) / (std::sqrt(s.vel[j] / c2) + eps);
        if (s.clamp) w[j] = std::clamp(w[j], -1.0, 1.0);
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Evaluation mid-training runs the same graph builder without gradients,
// using running BN statistics and the phase's forward semantics.

inline Tensor batch_input(const HybridModel& m, const FeatureDataset& ds,
                          const std::vector<int64_t>& idx, size_t lo, size_t hi) {
  int64_t n = static_cast<int64_t>(hi - lo);
  Tensor X({n, m.input_shape[0], m.input_shape[1], m.input_shape[2]});
  int64_t per = X.size() / n;
  for (size_t b = lo; b < hi; ++b) {
    const Tensor& s = ds.samples[static_cast<size_t>(idx[b])];
    if (s.size() != per) throw ShapeError("sample does not match the model input shape");
    std::copy(s.data(), s.data() + per, X.data() + static_cast<int64_t>(b - lo) * per);
  }
  return X;
}

inline Tensor eval_scores(HybridModel& m, const FeatureDataset& ds,
                          const std::vector<int64_t>& idx, size_t lo, size_t hi, int phase) {
  Tape t;
  Ctx c{t, m, phase, false, {}};
  Var scores = build_scores(c, t.push(batch_input(m, ds, idx, lo, hi)));
  return t.val(scores);
}

inline real eval_accuracy(HybridModel& m, const FeatureDataset& ds, int phase) {
  if (ds.size() == 0) return 0.0;
  std::vector<int64_t> idx(static_cast<size_t>(ds.size()));
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int64_t>(i);
  int64_t correct = 0;
  const size_t chunk = 64;
  for (size_t lo = 0; lo < idx.size(); lo += chunk) {
    size_t hi = std::min(idx.size(), lo + chunk);
    Tensor S = eval_scores(m, ds, idx, lo, hi, phase);
    for (size_t b = lo; b < hi; ++b) {
      int64_t n = static_cast<int64_t>(b - lo);
      int64_t best = 0;
      for (int64_t l = 1; l < S.dim(0); ++l)
        if (S.at2(l, n) > S.at2(best, n)) best = l;
      if (best == ds.labels[b]) ++correct;
    }
  }
  return static_cast<real>(correct) / static_cast<real>(ds.size());
}

inline int ds_label(const FeatureDataset& ds, int64_t i) {
  return static_cast<int>(ds.labels[static_cast<size_t>(i)]);
}

inline real ramp_sigma_i(const TrainConfig& cfg, int epoch, int epochs) {
  if (epochs <= 1) return cfg.sigma_i_end;
  return cfg.sigma_i_start +
         (cfg.sigma_i_end - cfg.sigma_i_start) * static_cast<real>(epoch) /
             static_cast<real>(epochs - 1);
}

inline void run_phase(HybridModel& m, const FeatureDataset& tr, const FeatureDataset& va,
                      const TrainConfig& cfg, int phase, int epochs, Rng& rng,
                      const std::vector<Tensor>* teacher_scores,
                      std::vector<EpochStats>& history) {
  std::vector<Slot> slots = collect_params(m, phase);
  if (slots.empty()) throw StateError("phase " + std::to_string(phase) + " has nothing to train");
  Adam opt{cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, 0};
  BonsaiTree* tree = nullptr;
  if (auto* bh = std::get_if<BonsaiHead>(&m.head)) tree = &bh->tree;

  std::vector<int64_t> idx(static_cast<size_t>(tr.size()));
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int64_t>(i);

  for (int epoch = 0; epoch < epochs; ++epoch) {
    real lr = cfg.lr * std::pow(cfg.lr_decay, static_cast<real>(epoch / cfg.lr_step));
    if (tree) tree->sigma_i = phase == 1 ? ramp_sigma_i(cfg, epoch, epochs) : cfg.sigma_i_end;
    rng.shuffle(idx);
    real loss_sum = 0.0;
    int batches = 0;
    int64_t correct = 0;
    for (size_t lo = 0; lo < idx.size(); lo += static_cast<size_t>(cfg.batch_size)) {
      size_t hi = std::min(idx.size(), lo + static_cast<size_t>(cfg.batch_size));
      int64_t n = static_cast<int64_t>(hi - lo);
      std::vector<int> labels(static_cast<size_t>(n));
      for (size_t b = lo; b < hi; ++b)
        labels[b - lo] = ds_label(tr, idx[b]);

      Tape t;
      Ctx c{t, m, phase, true, {}};
      std::vector<Var> pvars;
      pvars.reserve(slots.size());
      for (Slot& s : slots) pvars.push_back(c.leaf(*s.host));
      Var scores = build_scores(c, t.push(batch_input(m, tr, idx, lo, hi)));
      Var task = cfg.loss == "hinge" ? ad::hinge_loss(t, scores, labels)
                                     : ad::cross_entropy(t, scores, labels);
      Var loss = task;
      if (teacher_scores && phase >= 2) {
        Tensor tmat({m.num_classes, n});
        for (size_t b = lo; b < hi; ++b) {
          const Tensor& ts = (*teacher_scores)[static_cast<size_t>(idx[b])];
          for (int64_t l = 0; l < m.num_classes; ++l)
            tmat.at2(l, static_cast<int64_t>(b - lo)) = ts[l];
        }
        Var kd = ad::kd_kl(t, scores, tmat, cfg.kd_tau);
        loss = ad::mix(t, task, kd, 1.0 - cfg.kd_lambda, cfg.kd_lambda);
      }
      real lv = t.val(loss)[0];
      if (!std::isfinite(lv))
        throw NumericError("training loss is not finite in phase " + std::to_string(phase));
      loss_sum += lv;
      ++batches;
      const Tensor& S = t.val(scores);
      for (int64_t b = 0; b < n; ++b) {
        int64_t best = 0;
        for (int64_t l = 1; l < S.dim(0); ++l)
          if (S.at2(l, b) > S.at2(best, b)) best = l;
        if (best == labels[static_cast<size_t>(b)]) ++correct;
      }
      t.backward(loss);
      opt.step(slots, t, pvars, lr);
    }
    EpochStats st;
    st.phase = phase;
    st.epoch = epoch + 1;
    st.loss = loss_sum / static_cast<real>(std::max(batches, 1));
    st.train_acc = static_cast<real>(correct) / static_cast<real>(tr.size());
    st.val_acc = eval_accuracy(m, va, phase);
    st.sigma_i = tree ? tree->sigma_i : 0.0;
    st.lr = lr;
    history.push_back(st);
  }
}

}  // namespace trainer

// Snap every float tensor to its float32 image so the in-memory model equals
// its serialized form bit for bit.
inline void snap_model(HybridModel& m) {
  auto snap_bn = [](std::optional<BatchNorm>& bn) {
    if (!bn) return;
    snap_f32(bn->gamma);
    snap_f32(bn->beta);
    snap_f32(bn->mean);
    snap_f32(bn->var);
  };
  for (Layer& l : m.layers) {
    if (auto* d = std::get_if<DenseConvLayer>(&l)) {
      snap_f32(d->W);
      snap_f32(d->bias);
      snap_bn(d->bn);
    }
  }
  trainer::for_each_spn(m, [&](StrassenLayer& S) {
    if (S.a_hat) snap_f32(*S.a_hat);
    snap_f32(S.bias);
    snap_bn(S.bn);
    if (S.shadow) {
      snap_f32(S.shadow->Wa);
      snap_f32(S.shadow->vecA);
      snap_f32(S.shadow->Wb);
      snap_f32(S.shadow->Wc);
    }
  });
  if (auto* dh = std::get_if<DenseHead>(&m.head)) {
    snap_f32(dh->W);
    snap_f32(dh->bias);
  } else if (auto* bh = std::get_if<BonsaiHead>(&m.head)) {
    BonsaiTree& tr = bh->tree;
    if (Tensor* Z = std::get_if<Tensor>(&tr.Z)) snap_f32(*Z);
    for (BonsaiNode& n : tr.nodes) {
      if (Tensor* W = std::get_if<Tensor>(&n.W)) snap_f32(*W);
      if (Tensor* V = std::get_if<Tensor>(&n.V)) snap_f32(*V);
      snap_f32(n.theta);
    }
    tr.sigma = snap_f32(tr.sigma);
    tr.sigma_i = snap_f32(tr.sigma_i);
  }
}

inline TrainResult train(HybridModel& m, const FeatureDataset& train_set,
                         const FeatureDataset& val_set, const TrainConfig& cfg) {
  cfg.validate();
  validate_model(m);
  train_set.validate();
  val_set.validate();
  if (train_set.size() == 0) throw ConfigError("empty training set");
  if (train_set.num_classes != m.num_classes || val_set.num_classes != m.num_classes)
    throw ConfigError("dataset class count does not match the model");
  if (train_set.height != m.input_shape[1] || train_set.width != m.input_shape[2] ||
      m.input_shape[0] != 1)
    throw ShapeError("dataset feature shape does not match the model input");

  Rng rng(cfg.seed);
  TrainResult res;
  if (cfg.epochs1 + cfg.epochs2 + cfg.epochs3 == 0) return res;
  bool later_phases = cfg.epochs2 > 0 || cfg.epochs3 > 0;
  bool kd_on = cfg.kd_lambda > 0 && later_phases;

  if (cfg.epochs1 > 0)
    trainer::run_phase(m, train_set, val_set, cfg, 1, cfg.epochs1, rng, nullptr, res.history);

  std::vector<Tensor> teacher_cache;
  if (kd_on) {
    HybridModel teacher = m;  // whatever enters phase 2 distills into phases 2 and 3
    bool all_shadows = true;
    trainer::for_each_spn(teacher, [&](StrassenLayer& S) {
      if (!S.shadow) all_shadows = false;
    });
    int teacher_phase = all_shadows ? 1 : 3;  // full-precision path when shadows exist
    teacher_cache.reserve(static_cast<size_t>(train_set.size()));
    std::vector<int64_t> idx(static_cast<size_t>(train_set.size()));
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int64_t>(i);
    const size_t chunk = 64;
    for (size_t lo = 0; lo < idx.size(); lo += chunk) {
      size_t hi = std::min(idx.size(), lo + chunk);
      Tensor S = trainer::eval_scores(teacher, train_set, idx, lo, hi, teacher_phase);
      for (size_t b = lo; b < hi; ++b) {
        Tensor col({m.num_classes});
        for (int64_t l = 0; l < m.num_classes; ++l)
          col[l] = S.at2(l, static_cast<int64_t>(b - lo));
        teacher_cache.push_back(col);
      }
    }
  }

  if (later_phases) {
    trainer::for_each_spn(m, [](StrassenLayer& S) {
      if (S.shadow) S.shadow->quantize = true;
    });
    if (cfg.epochs2 > 0)
      trainer::run_phase(m, train_set, val_set, cfg, 2, cfg.epochs2, rng,
                         kd_on ? &teacher_cache : nullptr, res.history);
    trainer::for_each_spn(m, [](StrassenLayer& S) {
      if (S.shadow) collapse_layer(S);
    });
    if (cfg.epochs3 > 0)
      trainer::run_phase(m, train_set, val_set, cfg, 3, cfg.epochs3, rng,
                         kd_on ? &teacher_cache : nullptr, res.history);
  }
  snap_model(m);
  return res;
}

inline std::string history_csv(const std::vector<EpochStats>& h) {
  std::string out = "phase,epoch,loss,train_acc,val_acc,sigma_i,lr\n";
  char buf[160];
  for (const EpochStats& e : h) {
    std::snprintf(buf, sizeof buf, "%d,%d,%.6g,%.6g,%.6g,%.6g,%.6g\n", e.phase, e.epoch, e.loss,
                  e.train_acc, e.val_acc, e.sigma_i, e.lr);
    out += buf;
  }
  return out;
}

inline void write_history_csv(const std::string& path, const std::vector<EpochStats>& h) {
  io::spit(path, history_csv(h));
}

// ---------------------------------------------------------------------------
// Finite-difference check. The builder must be deterministic in the
// parameters; returns the worst relative error across all elements.

using LossBuilder = std::function<Var(Tape&, const std::vector<Var>&)>;

inline real grad_check(std::vector<Tensor>& params, const LossBuilder& build, real eps = 1e-5) {
  auto loss_at = [&]() {
    Tape t;
    std::vector<Var> vs;
    vs.reserve(params.size());
    for (Tensor& p : params) vs.push_back(t.push(p));
    Var l = build(t, vs);
    return t.val(l)[0];
  };
  Tape t;
  std::vector<Var> vs;
  vs.reserve(params.size());
  for (Tensor& p : params) vs.push_back(t.push(p));
  Var l = build(t, vs);
  t.backward(l);
  std::vector<Tensor> ana;
  ana.reserve(params.size());
  for (Var v : vs) ana.push_back(t.grad(v));
  real worst = 0.0;
  for (size_t i = 0; i < params.size(); ++i)
    for (int64_t j = 0; j < params[i].size(); ++j) {
      real keep = params[i][j];
      params[i][j] = keep + eps;
      real lp = loss_at();
      params[i][j] = keep - eps;
      real lm = loss_at();
      params[i][j] = keep;
      real num = (lp - lm) / (2.0 * eps);
      real a = ana[i][j];
      real rel = std::abs(a - num) / std::max({1.0, std::abs(a), std::abs(num)});
      worst = std::max(worst, rel);
    }
  return worst;
}

}  // namespace thn
