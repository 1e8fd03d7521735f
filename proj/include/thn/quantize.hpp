#pragma once

#include <algorithm>
#include <map>
#include <utility>

#include "thn/dataset.hpp"
#include "thn/graph.hpp"

namespace thn {

// ---------------------------------------------------------------------------
// Bit-width policy. Fractions are chosen per tensor by calibration; the
// policy only fixes widths. Ternary matrices are untouched (2-bit already).

struct QuantPolicy {
  int weight_bits = 8;
  int a_hat_bits = 16;
  int act_bits = 8;
  int mid_bits = 16;  // strassen r-channel intermediates
  int bias_bits = 16;
  std::string name = "mixed";

  void validate() const {
    for (int b : {weight_bits, a_hat_bits, act_bits, mid_bits, bias_bits})
      if (b != 8 && b != 16 && b != 32)
        throw PolicyError("unsupported bit width " + std::to_string(b));
  }
};

inline QuantPolicy quant_policy(const std::string& name) {
  if (name == "mixed") return QuantPolicy{};
  if (name == "all8") return QuantPolicy{8, 8, 8, 8, 8, name};
  if (name == "all16") return QuantPolicy{16, 16, 16, 16, 16, name};
  throw PolicyError("unknown quantization policy '" + name + "'");
}

struct ModelQuant {
  QuantPolicy policy;
  std::map<std::string, QFormat> fmts;   // per-tensor and per-buffer formats
  std::map<std::string, QTensor> codes;  // materialized weights
};

// tanh outputs and path probabilities are unit-range scalars; they share one
// fixed format in which +/-1.0 is exactly representable.
inline QFormat prob_format() { return QFormat{16, 14}; }

// ---------------------------------------------------------------------------
// BatchNorm folding. Dense layers absorb BN into filter rows and bias;
// strassen layers absorb the r-space scale into a_hat and push the shift
// through the ternary W_c into the bias. Values snap to float32 so a fold
// before or after a save round-trip gives identical bytes.

inline bool has_batchnorm(const HybridModel& m) {
  for (const Layer& l : m.layers) {
    if (const auto* d = std::get_if<DenseConvLayer>(&l)) {
      if (d->bn) return true;
    } else if (const auto* s = std::get_if<StrassenConvLayer>(&l)) {
      if (s->spn.bn) return true;
    }
  }
  return false;
}

inline void fold_batchnorm(HybridModel& m) {
  bool any = false;
  for (Layer& l : m.layers) {
    if (auto* d = std::get_if<DenseConvLayer>(&l)) {
      if (!d->bn) continue;
      any = true;
      int64_t cout = d->geom.out_channels;
      int64_t per = d->W.size() / cout;
      if (d->bias.empty()) d->bias = Tensor({cout});
      for (int64_t c = 0; c < cout; ++c) {
        real s = d->bn->scale(c), t = d->bn->shift(c);
        for (int64_t j = 0; j < per; ++j) d->W[c * per + j] = snap_f32(d->W[c * per + j] * s);
        d->bias[c] = snap_f32(s * d->bias[c] + t);
      }
      d->bn.reset();
    } else if (auto* sc = std::get_if<StrassenConvLayer>(&l)) {
      StrassenLayer& S = sc->spn;
      if (!S.bn) continue;
      any = true;
      if (!S.inference_ready())
        throw StateError("batchnorm fold needs inference-form strassen weights");
      if (S.bias.empty()) S.bias = Tensor({S.fan_out});
      for (int64_t j = 0; j < S.r; ++j)
        (*S.a_hat)[j] = snap_f32((*S.a_hat)[j] * S.bn->scale(j));
      for (int64_t o = 0; o < S.fan_out; ++o) {
        real add = 0.0;
        for (int64_t j = 0; j < S.r; ++j) {
          int c = S.Wc->get(o, j);
          if (c) add += static_cast<real>(c) * S.bn->shift(j);
        }
        S.bias[o] = snap_f32(S.bias[o] + add);
      }
      S.bn.reset();
    }
  }
  if (!any) throw StateError("no batchnorm to fold");
}

// ---------------------------------------------------------------------------
// Slot naming. Weight slots map 1:1 onto model tensors; "act.*" slots are
// activation buffers. A format map with these keys fully determines the
// fixed-point executor.

namespace qslot {

inline std::string layer_prefix(size_t i) { return "layer" + std::to_string(i); }
inline std::string node_prefix(int64_t k) { return "head.node" + std::to_string(k); }

}  // namespace qslot

inline std::map<std::string, const Tensor*> weight_slots(const HybridModel& m) {
  std::map<std::string, const Tensor*> out;
  auto add_matrix = [&out](const std::string& name, const BonsaiMatrix& bm) {
    if (const Tensor* W = std::get_if<Tensor>(&bm)) {
      out[name] = W;
    } else {
      const StrassenLayer& S = std::get<StrassenLayer>(bm);
      if (!S.a_hat) throw StateError("quantization needs inference-form strassen weights");
      if (!S.bias.empty()) throw PolicyError("fixed point does not support bias on tree matrices");
      out[name + ".a_hat"] = &*S.a_hat;
    }
  };
  for (size_t i = 0; i < m.layers.size(); ++i) {
    std::string lp = qslot::layer_prefix(i);
    if (const auto* d = std::get_if<DenseConvLayer>(&m.layers[i])) {
      out[lp + ".W"] = &d->W;
      if (!d->bias.empty()) out[lp + ".bias"] = &d->bias;
    } else if (const auto* s = std::get_if<StrassenConvLayer>(&m.layers[i])) {
      if (!s->spn.a_hat) throw StateError("quantization needs inference-form strassen weights");
      out[lp + ".a_hat"] = &*s->spn.a_hat;
      if (!s->spn.bias.empty()) out[lp + ".bias"] = &s->spn.bias;
    }
  }
  if (const auto* dh = std::get_if<DenseHead>(&m.head)) {
    out["head.W"] = &dh->W;
    if (!dh->bias.empty()) out["head.bias"] = &dh->bias;
  } else {
    const BonsaiTree& t = std::get<BonsaiHead>(m.head).tree;
    add_matrix("head.Z", t.Z);
    for (int64_t k = 0; k < t.node_count(); ++k) {
      const BonsaiNode& n = t.nodes[static_cast<size_t>(k)];
      add_matrix(qslot::node_prefix(k) + ".W", n.W);
      add_matrix(qslot::node_prefix(k) + ".V", n.V);
      if (t.is_internal(k)) out[qslot::node_prefix(k) + ".theta"] = &n.theta;
    }
  }
  return out;
}

inline int slot_bits(const QuantPolicy& p, const std::string& name) {
  if (name.rfind("act.", 0) == 0)
    return (name.ends_with(".mid") || name.ends_with(".z_mid")) ? p.mid_bits : p.act_bits;
  if (name.ends_with(".a_hat")) return p.a_hat_bits;
  if (name.ends_with(".bias")) return p.bias_bits;
  return p.weight_bits;  // dense weights and branching vectors
}

// Largest fraction that still represents the tensor's extreme value without
// saturating. Biases and branching vectors are not swept; they just need to
// fit, since their resolution is already bounded by the swept tensors.
inline int covering_frac(const Tensor& t, int bits) {
  real mx = 0.0;
  for (int64_t i = 0; i < t.size(); ++i) mx = std::max(mx, std::abs(t[i]));
  for (int f = bits - 1; f >= 1; --f) {
    QFormat q{bits, f};
    if (std::nearbyint(std::ldexp(mx, f)) <= static_cast<real>(q.qmax())) return f;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// Calibration plan: one sweep item per group of tensors that share a
// fraction, listed in execution order so that every item sees a fully
// quantized prefix and a float suffix.

struct SweepItem {
  std::vector<std::string> primary;   // share the swept fraction
  std::vector<std::string> covering;  // fixed covering fraction
  int bits = 8;
};

inline std::vector<SweepItem> sweep_plan(const HybridModel& m, const QuantPolicy& pol) {
  std::vector<SweepItem> plan;
  auto act = [&plan, &pol](const std::string& n) { plan.push_back({{n}, {}, slot_bits(pol, n)}); };
  act("act.input");
  for (size_t i = 0; i < m.layers.size(); ++i) {
    std::string lp = qslot::layer_prefix(i);
    if (const auto* d = std::get_if<DenseConvLayer>(&m.layers[i])) {
      SweepItem w{{lp + ".W"}, {}, pol.weight_bits};
      if (!d->bias.empty()) w.covering.push_back(lp + ".bias");
      plan.push_back(std::move(w));
      act("act." + lp + ".out");
    } else if (const auto* s = std::get_if<StrassenConvLayer>(&m.layers[i])) {
      SweepItem w{{lp + ".a_hat"}, {}, pol.a_hat_bits};
      if (!s->spn.bias.empty()) w.covering.push_back(lp + ".bias");
      plan.push_back(std::move(w));
      act("act." + lp + ".mid");
      act("act." + lp + ".out");
    }
  }
  if (const auto* dh = std::get_if<DenseHead>(&m.head)) {
    SweepItem w{{"head.W"}, {}, pol.weight_bits};
    if (!dh->bias.empty()) w.covering.push_back("head.bias");
    plan.push_back(std::move(w));
    act("act.head.scores");
  } else {
    const BonsaiTree& t = std::get<BonsaiHead>(m.head).tree;
    bool zs = matrix_is_strassen(t.Z);
    plan.push_back(
        {{zs ? "head.Z.a_hat" : "head.Z"}, {}, zs ? pol.a_hat_bits : pol.weight_bits});
    if (zs) act("act.head.z_mid");
    act("act.head.xhat");
    SweepItem nodes;
    bool ns = matrix_is_strassen(t.nodes[0].W);
    nodes.bits = ns ? pol.a_hat_bits : pol.weight_bits;
    for (int64_t k = 0; k < t.node_count(); ++k) {
      std::string np = qslot::node_prefix(k);
      nodes.primary.push_back(np + (ns ? ".W.a_hat" : ".W"));
      nodes.primary.push_back(np + (ns ? ".V.a_hat" : ".V"));
      if (t.is_internal(k)) nodes.covering.push_back(np + ".theta");
    }
    plan.push_back(std::move(nodes));
    act("act.head.scores");
  }
  return plan;
}

inline std::map<std::string, QTensor> materialize_codes(const HybridModel& m,
                                                        const std::map<std::string, QFormat>& fmts) {
  std::map<std::string, QTensor> codes;
  for (const auto& [name, t] : weight_slots(m)) {
    auto it = fmts.find(name);
    if (it != fmts.end()) codes[name] = fx_quantize(*t, it->second);
  }
  return codes;
}

// ---------------------------------------------------------------------------
// Fixed-point executor. Products are held in int64, every accumulate
// saturates at 32 bits, and rescales round to nearest even. A partially
// resolved format map (as during calibration) executes the resolved prefix
// in integers, dequantizes at the frontier, and finishes in float.

namespace qdetail {

struct CodeResolver {
  const std::map<std::string, QFormat>& fmts;
  const std::map<std::string, QTensor>* codes;
  const std::map<std::string, const Tensor*>& slots;

  bool has(const std::string& n) const { return fmts.count(n) != 0; }
  QFormat fmt(const std::string& n) const { return fmts.at(n); }
  QTensor get(const std::string& n) const {
    if (codes) {
      auto it = codes->find(n);
      if (it != codes->end()) return it->second;
    }
    auto it = slots.find(n);
    if (it == slots.end()) throw StateError("no tensor behind quantizer slot " + n);
    return fx_quantize(*it->second, fmt(n));
  }
};

// (column, sign) per row; lets the kernels skip zero ternary coefficients.
using TernRows = std::vector<std::vector<std::pair<int32_t, int8_t>>>;

inline TernRows ternary_rows(const TernaryMatrix& M) {
  TernRows rows(static_cast<size_t>(M.rows()));
  for (int64_t r = 0; r < M.rows(); ++r)
    for (int64_t c = 0; c < M.cols(); ++c) {
      int t = M.get(r, c);
      if (t) rows[static_cast<size_t>(r)].push_back({static_cast<int32_t>(c),
                                                     static_cast<int8_t>(t)});
    }
  return rows;
}

inline void qim2col(const ConvGeometry& g, const QTensor& x, std::vector<int32_t>& cols) {
  int64_t H = x.shape[1], W = x.shape[2];
  int64_t OH = g.out_h(H), OW = g.out_w(W);
  int64_t P = OH * OW;
  cols.assign(static_cast<size_t>(g.patch_len() * P), 0);
  for (int64_t c = 0; c < g.in_channels; ++c)
    for (int64_t ky = 0; ky < g.kernel_h; ++ky)
      for (int64_t kx = 0; kx < g.kernel_w; ++kx) {
        int64_t row = (c * g.kernel_h + ky) * g.kernel_w + kx;
        for (int64_t oy = 0; oy < OH; ++oy) {
          int64_t iy = oy * g.stride_h - g.pad_h + ky;
          if (iy < 0 || iy >= H) continue;
          for (int64_t ox = 0; ox < OW; ++ox) {
            int64_t ix = ox * g.stride_w - g.pad_w + kx;
            if (ix < 0 || ix >= W) continue;
            cols[static_cast<size_t>(row * P + oy * OW + ox)] =
                x.code[static_cast<size_t>((c * H + iy) * W + ix)];
          }
        }
      }
}

inline void qconv_dense(const ConvGeometry& g, const QTensor& x, const QTensor& w,
                        std::vector<int64_t>& acc) {
  int64_t H = x.shape[1], W = x.shape[2];
  int64_t OH = g.out_h(H), OW = g.out_w(W);
  int64_t mult = g.multiplier();
  int64_t cpg = g.in_channels_per_group();
  acc.assign(static_cast<size_t>(g.out_channels * OH * OW), 0);
  for (int64_t oc = 0; oc < g.out_channels; ++oc) {
    int64_t ic0 = g.depthwise ? oc / mult : 0;
    for (int64_t oy = 0; oy < OH; ++oy)
      for (int64_t ox = 0; ox < OW; ++ox) {
        int64_t a = 0;
        for (int64_t ic = 0; ic < cpg; ++ic)
          for (int64_t ky = 0; ky < g.kernel_h; ++ky) {
            int64_t iy = oy * g.stride_h - g.pad_h + ky;
            if (iy < 0 || iy >= H) continue;  // zero tap leaves the sum alone
            for (int64_t kx = 0; kx < g.kernel_w; ++kx) {
              int64_t ix = ox * g.stride_w - g.pad_w + kx;
              if (ix < 0 || ix >= W) continue;
              int64_t xv = x.code[static_cast<size_t>(((ic0 + ic) * H + iy) * W + ix)];
              int64_t wv = w.code[static_cast<size_t>(
                  ((oc * cpg + ic) * g.kernel_h + ky) * g.kernel_w + kx)];
              a = saturate32(a + xv * wv);
            }
          }
        acc[static_cast<size_t>((oc * OH + oy) * OW + ox)] = a;
      }
  }
}

inline Tensor deq_grid(const std::vector<int64_t>& v, const std::vector<int64_t>& shape,
                       int frac) {
  Tensor t(shape);
  for (size_t i = 0; i < v.size(); ++i)
    t[static_cast<int64_t>(i)] = std::ldexp(static_cast<real>(v[i]), -frac);
  return t;
}

inline QTensor requant_grid(const std::vector<int64_t>& v, const std::vector<int64_t>& shape,
                            int frac, QFormat f) {
  QTensor q;
  q.fmt = f;
  q.shape = shape;
  q.code.resize(v.size());
  for (size_t i = 0; i < v.size(); ++i)
    q.code[i] = saturate(rescale_code(v[i], frac, f.frac_bits), f);
  return q;
}

inline void add_bias_acc(std::vector<int64_t>& acc, const QTensor& b, int facc, int64_t per) {
  for (int64_t c = 0; c < b.size(); ++c) {
    int64_t rb = rescale_code(b.code[static_cast<size_t>(c)], b.fmt.frac_bits, facc);
    for (int64_t j = 0; j < per; ++j) {
      int64_t& a = acc[static_cast<size_t>(c * per + j)];
      a = saturate32(a + rb);
    }
  }
}

inline void relu_acc(std::vector<int64_t>& acc) {
  for (int64_t& a : acc)
    if (a < 0) a = 0;
}

}  // namespace qdetail

inline Tensor run_quant(const HybridModel& m, const Tensor& input,
                        const std::map<std::string, QFormat>& fmts,
                        const std::map<std::string, QTensor>* codes = nullptr,
                        PredictMode mode = PredictMode::soft) {
  validate_model(m);
  if (input.shape() != m.input_shape)
    throw ShapeError("run_quant: input " + shape_str(input.shape()) + " vs model " +
                     shape_str(m.input_shape));
  if (has_batchnorm(m)) throw StateError("fixed-point execution requires folded batchnorm");
  std::map<std::string, const Tensor*> slots = weight_slots(m);
  qdetail::CodeResolver R{fmts, codes, slots};

  if (!R.has("act.input")) return forward(m, input, nullptr, mode);
  QTensor act = fx_quantize(input, R.fmt("act.input"));

  for (size_t i = 0; i < m.layers.size(); ++i) {
    std::string lp = qslot::layer_prefix(i);
    const Layer& l = m.layers[i];

    if (const auto* d = std::get_if<DenseConvLayer>(&l)) {
      if (!R.has(lp + ".W")) return forward_from(m, i, fx_dequantize(act), nullptr, mode);
      QTensor W = R.get(lp + ".W");
      const ConvGeometry& g = d->geom;
      int64_t OH = g.out_h(act.shape[1]), OW = g.out_w(act.shape[2]);
      int facc = act.fmt.frac_bits + W.fmt.frac_bits;
      std::vector<int64_t> acc;
      qdetail::qconv_dense(g, act, W, acc);
      if (!d->bias.empty()) qdetail::add_bias_acc(acc, R.get(lp + ".bias"), facc, OH * OW);
      if (d->relu) qdetail::relu_acc(acc);
      std::vector<int64_t> oshape{g.out_channels, OH, OW};
      if (!R.has("act." + lp + ".out"))
        return forward_from(m, i + 1, qdetail::deq_grid(acc, oshape, facc), nullptr, mode);
      act = qdetail::requant_grid(acc, oshape, facc, R.fmt("act." + lp + ".out"));

    } else if (const auto* s = std::get_if<StrassenConvLayer>(&l)) {
      const StrassenLayer& S = s->spn;
      if (!R.has(lp + ".a_hat")) return forward_from(m, i, fx_dequantize(act), nullptr, mode);
      QTensor ah = R.get(lp + ".a_hat");
      const ConvGeometry& g = S.geom;
      int64_t OH = g.out_h(act.shape[1]), OW = g.out_w(act.shape[2]);
      int64_t P = OH * OW;
      std::vector<int32_t> cols;
      qdetail::qim2col(g, act, cols);
      qdetail::TernRows wb = qdetail::ternary_rows(*S.Wb);
      int fp = act.fmt.frac_bits + ah.fmt.frac_bits;
      std::vector<int64_t> pacc(static_cast<size_t>(S.r * P));
      for (int64_t rr = 0; rr < S.r; ++rr)
        for (int64_t j = 0; j < P; ++j) {
          int64_t h = 0;
          for (const auto& [c, sg] : wb[static_cast<size_t>(rr)]) {
            int64_t xv = cols[static_cast<size_t>(static_cast<int64_t>(c) * P + j)];
            h = saturate32(sg > 0 ? h + xv : h - xv);
          }
          pacc[static_cast<size_t>(rr * P + j)] =
              h * static_cast<int64_t>(ah.code[static_cast<size_t>(rr)]);
        }
      std::vector<int64_t> oshape{g.out_channels, OH, OW};
      if (!R.has("act." + lp + ".mid")) {
        Tensor p = qdetail::deq_grid(pacc, {S.r, P}, fp);
        Tensor out = S.Wc->matmat(p);
        if (!S.bias.empty())
          for (int64_t o = 0; o < S.fan_out; ++o)
            for (int64_t j = 0; j < P; ++j) out.at2(o, j) += S.bias[o];
        if (s->relu) detail::apply_relu(out);
        return forward_from(m, i + 1, out.reshaped(oshape), nullptr, mode);
      }
      QFormat midf = R.fmt("act." + lp + ".mid");
      std::vector<int32_t> mid(pacc.size());
      for (size_t idx = 0; idx < pacc.size(); ++idx)
        mid[idx] = saturate(rescale_code(pacc[idx], fp, midf.frac_bits), midf);
      qdetail::TernRows wc = qdetail::ternary_rows(*S.Wc);
      std::vector<int64_t> acc(static_cast<size_t>(S.fan_out * P), 0);
      for (int64_t o = 0; o < S.fan_out; ++o)
        for (int64_t j = 0; j < P; ++j) {
          int64_t a = 0;
          for (const auto& [rr, sg] : wc[static_cast<size_t>(o)]) {
            int64_t pv = mid[static_cast<size_t>(static_cast<int64_t>(rr) * P + j)];
            a = saturate32(sg > 0 ? a + pv : a - pv);
          }
          acc[static_cast<size_t>(o * P + j)] = a;
        }
      if (!S.bias.empty())
        qdetail::add_bias_acc(acc, R.get(lp + ".bias"), midf.frac_bits, P);
      if (s->relu) qdetail::relu_acc(acc);
      if (!R.has("act." + lp + ".out"))
        return forward_from(m, i + 1, qdetail::deq_grid(acc, oshape, midf.frac_bits), nullptr,
                            mode);
      act = qdetail::requant_grid(acc, oshape, midf.frac_bits, R.fmt("act." + lp + ".out"));

    } else if (const auto* p = std::get_if<AvgPoolLayer>(&l)) {
      int64_t C = act.shape[0], H = act.shape[1], W = act.shape[2];
      int64_t OH = (H - p->kernel_h) / p->sh() + 1;
      int64_t OW = (W - p->kernel_w) / p->sw() + 1;
      QTensor y;
      y.fmt = act.fmt;
      y.shape = {C, OH, OW};
      y.code.resize(static_cast<size_t>(C * OH * OW));
      real denom = static_cast<real>(p->kernel_h * p->kernel_w);
      for (int64_t c = 0; c < C; ++c)
        for (int64_t oy = 0; oy < OH; ++oy)
          for (int64_t ox = 0; ox < OW; ++ox) {
            int64_t sum = 0;
            for (int64_t ky = 0; ky < p->kernel_h; ++ky)
              for (int64_t kx = 0; kx < p->kernel_w; ++kx)
                sum = saturate32(
                    sum + act.code[static_cast<size_t>(
                              (c * H + oy * p->sh() + ky) * W + ox * p->sw() + kx)]);
            real q = std::nearbyint(static_cast<real>(sum) / denom);
            y.code[static_cast<size_t>((c * OH + oy) * OW + ox)] =
                saturate(static_cast<int64_t>(q), y.fmt);
          }
      act = std::move(y);

    } else {
      act.shape = {act.size()};  // flatten is a view
    }
  }

  act.shape = {act.size()};
  QFormat pf = prob_format();

  if (const auto* dh = std::get_if<DenseHead>(&m.head)) {
    if (!R.has("head.W")) return apply_head(m, fx_dequantize(act), nullptr, mode);
    QTensor W = R.get("head.W");  // [L, D]
    int64_t D = act.size();
    int facc = act.fmt.frac_bits + W.fmt.frac_bits;
    std::vector<int64_t> acc(static_cast<size_t>(m.num_classes), 0);
    for (int64_t ll = 0; ll < m.num_classes; ++ll)
      for (int64_t dd = 0; dd < D; ++dd)
        acc[static_cast<size_t>(ll)] = saturate32(
            acc[static_cast<size_t>(ll)] +
            static_cast<int64_t>(W.code[static_cast<size_t>(ll * D + dd)]) *
                act.code[static_cast<size_t>(dd)]);
    if (!dh->bias.empty()) qdetail::add_bias_acc(acc, R.get("head.bias"), facc, 1);
    if (!R.has("act.head.scores")) return qdetail::deq_grid(acc, {m.num_classes}, facc);
    QTensor sq = qdetail::requant_grid(acc, {m.num_classes}, facc, R.fmt("act.head.scores"));
    return fx_dequantize(sq);
  }

  const BonsaiTree& tree = std::get<BonsaiHead>(m.head).tree;
  bool zs = matrix_is_strassen(tree.Z);
  if (!R.has(zs ? "head.Z.a_hat" : "head.Z"))
    return apply_head(m, fx_dequantize(act), nullptr, mode);

  // projection to x̂
  QTensor xh;
  if (!zs) {
    QTensor Z = R.get("head.Z");  // [D_hat, D]
    int64_t D = act.size();
    int fz = act.fmt.frac_bits + Z.fmt.frac_bits;
    std::vector<int64_t> acc(static_cast<size_t>(tree.dim_proj), 0);
    for (int64_t dd = 0; dd < tree.dim_proj; ++dd)
      for (int64_t ii = 0; ii < D; ++ii)
        acc[static_cast<size_t>(dd)] = saturate32(
            acc[static_cast<size_t>(dd)] +
            static_cast<int64_t>(Z.code[static_cast<size_t>(dd * D + ii)]) *
                act.code[static_cast<size_t>(ii)]);
    if (!R.has("act.head.xhat"))
      return tree_predict_xhat(tree, qdetail::deq_grid(acc, {tree.dim_proj}, fz), mode);
    xh = qdetail::requant_grid(acc, {tree.dim_proj}, fz, R.fmt("act.head.xhat"));
  } else {
    const StrassenLayer& Z = std::get<StrassenLayer>(tree.Z);
    QTensor ah = R.get("head.Z.a_hat");
    qdetail::TernRows wb = qdetail::ternary_rows(*Z.Wb);
    int fp = act.fmt.frac_bits + ah.fmt.frac_bits;
    std::vector<int64_t> pacc(static_cast<size_t>(Z.r));
    for (int64_t rr = 0; rr < Z.r; ++rr) {
      int64_t h = 0;
      for (const auto& [c, sg] : wb[static_cast<size_t>(rr)]) {
        int64_t xv = act.code[static_cast<size_t>(c)];
        h = saturate32(sg > 0 ? h + xv : h - xv);
      }
      pacc[static_cast<size_t>(rr)] = h * static_cast<int64_t>(ah.code[static_cast<size_t>(rr)]);
    }
    if (!R.has("act.head.z_mid")) {
      Tensor p = qdetail::deq_grid(pacc, {Z.r}, fp);
      Tensor xf({Z.fan_out});
      Z.Wc->matvec(p.data(), 1, xf.data(), 1, nullptr);
      return tree_predict_xhat(tree, xf, mode);
    }
    QFormat midf = R.fmt("act.head.z_mid");
    std::vector<int32_t> mid(pacc.size());
    for (size_t idx = 0; idx < pacc.size(); ++idx)
      mid[idx] = saturate(rescale_code(pacc[idx], fp, midf.frac_bits), midf);
    qdetail::TernRows wcr = qdetail::ternary_rows(*Z.Wc);
    std::vector<int64_t> acc(static_cast<size_t>(Z.fan_out), 0);
    for (int64_t o = 0; o < Z.fan_out; ++o) {
      int64_t a = 0;
      for (const auto& [rr, sg] : wcr[static_cast<size_t>(o)]) {
        int64_t pv = mid[static_cast<size_t>(rr)];
        a = saturate32(sg > 0 ? a + pv : a - pv);
      }
      acc[static_cast<size_t>(o)] = a;
    }
    if (!R.has("act.head.xhat"))
      return tree_predict_xhat(tree, qdetail::deq_grid(acc, {tree.dim_proj}, midf.frac_bits),
                               mode);
    xh = qdetail::requant_grid(acc, {tree.dim_proj}, midf.frac_bits, R.fmt("act.head.xhat"));
  }

  bool ns = matrix_is_strassen(tree.nodes[0].W);
  if (!R.has(qslot::node_prefix(0) + (ns ? ".W.a_hat" : ".W")))
    return tree_predict_xhat(tree, fx_dequantize(xh), mode);

  if (!R.has("act.head.scores")) {
    // node weights resolved, score buffer not: run the tree in float from the
    // quantized x̂ with node tensors rounded onto their grids
    BonsaiTree t2 = tree;
    auto deq_matrix = [&R](BonsaiMatrix& bm, const std::string& base) {
      if (Tensor* W = std::get_if<Tensor>(&bm))
        *W = fx_dequantize(R.get(base));
      else
        std::get<StrassenLayer>(bm).a_hat = fx_dequantize(R.get(base + ".a_hat"));
    };
    for (int64_t k = 0; k < t2.node_count(); ++k) {
      std::string np = qslot::node_prefix(k);
      deq_matrix(t2.nodes[static_cast<size_t>(k)].W, np + ".W");
      deq_matrix(t2.nodes[static_cast<size_t>(k)].V, np + ".V");
      if (t2.is_internal(k))
        t2.nodes[static_cast<size_t>(k)].theta = fx_dequantize(R.get(np + ".theta"));
    }
    return tree_predict_xhat(t2, fx_dequantize(xh), mode);
  }

  QFormat sfmt = R.fmt("act.head.scores");

  // u = W^T x̂ (or the SPN equivalent), accumulator frac returned alongside
  auto mat_apply = [&R, &xh](const BonsaiMatrix& bm,
                             const std::string& name) -> std::pair<std::vector<int64_t>, int> {
    if (const Tensor* W = std::get_if<Tensor>(&bm)) {
      QTensor Wq = R.get(name);  // [D_hat, L]
      int64_t Dh = W->dim(0), L = W->dim(1);
      std::vector<int64_t> acc(static_cast<size_t>(L), 0);
      for (int64_t dd = 0; dd < Dh; ++dd) {
        int64_t xv = xh.code[static_cast<size_t>(dd)];
        for (int64_t ll = 0; ll < L; ++ll)
          acc[static_cast<size_t>(ll)] = saturate32(
              acc[static_cast<size_t>(ll)] +
              static_cast<int64_t>(Wq.code[static_cast<size_t>(dd * L + ll)]) * xv);
      }
      return {std::move(acc), xh.fmt.frac_bits + Wq.fmt.frac_bits};
    }
    const StrassenLayer& S = std::get<StrassenLayer>(bm);
    QTensor ah = R.get(name + ".a_hat");
    std::vector<int64_t> acc(static_cast<size_t>(S.fan_out), 0);
    std::vector<int64_t> pv(static_cast<size_t>(S.r));
    for (int64_t rr = 0; rr < S.r; ++rr) {
      int64_t h = 0;
      for (int64_t c = 0; c < S.fan_in; ++c) {
        int t = S.Wb->get(rr, c);
        if (!t) continue;
        int64_t xv = xh.code[static_cast<size_t>(c)];
        h = saturate32(t > 0 ? h + xv : h - xv);
      }
      pv[static_cast<size_t>(rr)] = h * static_cast<int64_t>(ah.code[static_cast<size_t>(rr)]);
    }
    for (int64_t o = 0; o < S.fan_out; ++o) {
      int64_t a = 0;
      for (int64_t rr = 0; rr < S.r; ++rr) {
        int t = S.Wc->get(o, rr);
        if (!t) continue;
        a = saturate32(t > 0 ? a + pv[static_cast<size_t>(rr)] : a - pv[static_cast<size_t>(rr)]);
      }
      acc[static_cast<size_t>(o)] = a;
    }
    return {std::move(acc), xh.fmt.frac_bits + ah.fmt.frac_bits};
  };

  auto node_scores_q = [&](int64_t k) -> std::vector<int32_t> {
    std::string np = qslot::node_prefix(k);
    const BonsaiNode& n = tree.nodes[static_cast<size_t>(k)];
    auto [u, fu] = mat_apply(n.W, np + ".W");
    auto [v, fv] = mat_apply(n.V, np + ".V");
    std::vector<int32_t> sc(static_cast<size_t>(tree.num_classes));
    for (int64_t ll = 0; ll < tree.num_classes; ++ll) {
      real tv = std::tanh(tree.sigma * std::ldexp(static_cast<real>(v[static_cast<size_t>(ll)]),
                                                  -fv));
      int64_t prod = u[static_cast<size_t>(ll)] * static_cast<int64_t>(fx_quantize_value(tv, pf));
      sc[static_cast<size_t>(ll)] =
          saturate(rescale_code(prod, fu + pf.frac_bits, sfmt.frac_bits), sfmt);
    }
    return sc;
  };

  auto branch_dot = [&](int64_t k) -> std::pair<int64_t, int> {
    QTensor th = R.get(qslot::node_prefix(k) + ".theta");
    int64_t a = 0;
    for (int64_t dd = 0; dd < tree.dim_proj; ++dd)
      a = saturate32(a + static_cast<int64_t>(th.code[static_cast<size_t>(dd)]) *
                             xh.code[static_cast<size_t>(dd)]);
    return {a, xh.fmt.frac_bits + th.fmt.frac_bits};
  };

  Tensor out({tree.num_classes});
  if (mode == PredictMode::soft) {
    std::vector<int32_t> ind(static_cast<size_t>(tree.node_count()), 0);
    ind[0] = fx_quantize_value(1.0, pf);
    for (int64_t k = 0; k < tree.internal_count(); ++k) {
      auto [da, fd] = branch_dot(k);
      real pv = 0.5 * (1.0 + std::tanh(tree.sigma_i * std::ldexp(static_cast<real>(da), -fd)));
      int32_t pq = fx_quantize_value(pv, pf);
      int32_t one = fx_quantize_value(1.0, pf);
      int64_t base = ind[static_cast<size_t>(k)];
      ind[static_cast<size_t>(2 * k + 1)] =
          saturate(rescale_code(base * pq, 2 * pf.frac_bits, pf.frac_bits), pf);
      ind[static_cast<size_t>(2 * k + 2)] =
          saturate(rescale_code(base * (one - pq), 2 * pf.frac_bits, pf.frac_bits), pf);
    }
    std::vector<int64_t> sacc(static_cast<size_t>(tree.num_classes), 0);
    for (int64_t k = 0; k < tree.node_count(); ++k) {
      std::vector<int32_t> sc = node_scores_q(k);
      int64_t w = ind[static_cast<size_t>(k)];
      for (int64_t ll = 0; ll < tree.num_classes; ++ll)
        sacc[static_cast<size_t>(ll)] = saturate32(
            sacc[static_cast<size_t>(ll)] + w * static_cast<int64_t>(sc[static_cast<size_t>(ll)]));
    }
    for (int64_t ll = 0; ll < tree.num_classes; ++ll) {
      int32_t code = saturate(
          rescale_code(sacc[static_cast<size_t>(ll)], pf.frac_bits + sfmt.frac_bits,
                       sfmt.frac_bits),
          sfmt);
      out[ll] = std::ldexp(static_cast<real>(code), -sfmt.frac_bits);
    }
    return out;
  }

  std::vector<int64_t> sacc(static_cast<size_t>(tree.num_classes), 0);
  int64_t k = 0;
  for (;;) {
    std::vector<int32_t> sc = node_scores_q(k);
    for (int64_t ll = 0; ll < tree.num_classes; ++ll)
      sacc[static_cast<size_t>(ll)] =
          saturate32(sacc[static_cast<size_t>(ll)] + sc[static_cast<size_t>(ll)]);
    if (!tree.is_internal(k)) break;
    auto [da, fd] = branch_dot(k);
    (void)fd;
    k = da >= 0 ? 2 * k + 1 : 2 * k + 2;
  }
  for (int64_t ll = 0; ll < tree.num_classes; ++ll)
    out[ll] = std::ldexp(static_cast<real>(saturate(sacc[static_cast<size_t>(ll)], sfmt)),
                         -sfmt.frac_bits);
  return out;
}

// ---------------------------------------------------------------------------
// Calibration: sweep each item's shared fraction in ascending order over a
// held-out batch and keep the most precise fraction among the accuracy
// maxima (>= keeps the later, finer candidate).

inline double quant_accuracy(const HybridModel& m, const FeatureDataset& data, int64_t n,
                             const std::map<std::string, QFormat>& fmts,
                             const std::map<std::string, QTensor>& codes, PredictMode mode) {
  int64_t hit = 0;
  for (int64_t i = 0; i < n; ++i) {
    Tensor s = run_quant(m, data.samples[static_cast<size_t>(i)], fmts, &codes, mode);
    if (argmax(s) == data.labels[static_cast<size_t>(i)]) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(n);
}

inline std::map<std::string, QFormat> calibrate(const HybridModel& m, const FeatureDataset& calib,
                                                const QuantPolicy& pol, int64_t max_samples = 64,
                                                PredictMode mode = PredictMode::hard) {
  pol.validate();
  validate_model(m);
  if (has_batchnorm(m)) throw StateError("calibration requires folded batchnorm");
  std::map<std::string, const Tensor*> slots = weight_slots(m);
  int64_t n = std::min<int64_t>(max_samples, calib.size());
  if (n <= 0) throw ConfigError("calibration set is empty");

  std::map<std::string, QFormat> fmts;
  for (const SweepItem& item : sweep_plan(m, pol)) {
    std::map<std::string, QFormat> cov;
    for (const std::string& cn : item.covering) {
      int b = slot_bits(pol, cn);
      cov[cn] = QFormat{b, covering_frac(*slots.at(cn), b)};
    }
    int best_f = 0;
    double best_acc = -1.0;
    for (int f = 0; f < item.bits; ++f) {
      std::map<std::string, QFormat> trial = fmts;
      for (const auto& [cn, cf] : cov) trial[cn] = cf;
      for (const std::string& pn : item.primary) trial[pn] = QFormat{item.bits, f};
      std::map<std::string, QTensor> tcodes = materialize_codes(m, trial);
      double acc = quant_accuracy(m, calib, n, trial, tcodes, mode);
      if (acc >= best_acc) {
        best_acc = acc;
        best_f = f;
      }
    }
    for (const auto& [cn, cf] : cov) fmts[cn] = cf;
    for (const std::string& pn : item.primary) fmts[pn] = QFormat{item.bits, best_f};
  }
  return fmts;
}

inline ModelQuant quantize_model(HybridModel& m, const FeatureDataset& calib,
                                 const QuantPolicy& pol, int64_t max_samples = 64,
                                 PredictMode mode = PredictMode::hard) {
  ModelQuant q;
  q.policy = pol;
  q.fmts = calibrate(m, calib, pol, max_samples, mode);
  q.codes = materialize_codes(m, q.fmts);
  m.quant = std::make_shared<ModelQuant>(q);
  return q;
}

// Scores via whichever executor the model is in: fixed point when quantized,
// float otherwise.
inline Tensor model_scores(const HybridModel& m, const Tensor& x,
                           PredictMode mode = PredictMode::soft) {
  if (m.quant) return run_quant(m, x, m.quant->fmts, &m.quant->codes, mode);
  return forward(m, x, nullptr, mode);
}

inline double evaluate_accuracy(const HybridModel& m, const FeatureDataset& d,
                                PredictMode mode = PredictMode::hard) {
  if (d.size() == 0) throw ConfigError("empty dataset");
  int64_t hit = 0;
  for (int64_t i = 0; i < d.size(); ++i)
    if (argmax(model_scores(m, d.samples[static_cast<size_t>(i)], mode)) ==
        d.labels[static_cast<size_t>(i)])
      ++hit;
  return static_cast<double>(hit) / static_cast<double>(d.size());
}

}  // namespace thn
