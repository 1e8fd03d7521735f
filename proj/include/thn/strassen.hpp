#pragma once

#include "thn/ternary.hpp"

namespace thn {

// Sum-product network form of a matrix product:
//   vec(C) = W_c [ (W_b vec(B)) . (W_a vec(A)) ]
// with all three coefficient matrices ternary. The hidden width r is the
// number of elementwise products, i.e. the multiplication budget.
struct SpnCoeffs {
  TernaryMatrix Wa, Wb, Wc;
};

// The classic 2x2 algorithm expressed as SPN coefficients: r = 7, and the
// three matrices carry 12 nonzeros each (36 additions per product).
// vec() order is row-major: [X11, X12, X21, X22].
inline SpnCoeffs strassen_2x2() {
  static const int wa[7 * 4] = {
      1, 0, 0, 1,   // M1 = (A11 + A22) ...
      0, 0, 1, 1,   // M2 = (A21 + A22) ...
      1, 0, 0, 0,   // M3 = A11 ...
      0, 0, 0, 1,   // M4 = A22 ...
      1, 1, 0, 0,   // M5 = (A11 + A12) ...
      -1, 0, 1, 0,  // M6 = (A21 - A11) ...
      0, 1, 0, -1,  // M7 = (A12 - A22) ...
  };
  static const int wb[7 * 4] = {
      1, 0, 0, 1,   // ... (B11 + B22)
      1, 0, 0, 0,   // ... B11
      0, 1, 0, -1,  // ... (B12 - B22)
      -1, 0, 1, 0,  // ... (B21 - B11)
      0, 0, 0, 1,   // ... B22
      1, 1, 0, 0,   // ... (B11 + B12)
      0, 0, 1, 1,   // ... (B21 + B22)
  };
  static const int wc[4 * 7] = {
      1, 0, 0, 1, -1, 0, 1,  // C11 = M1 + M4 - M5 + M7
      0, 0, 1, 0, 1, 0, 0,   // C12 = M3 + M5
      0, 1, 0, 1, 0, 0, 0,   // C21 = M2 + M4
      1, -1, 1, 0, 0, 1, 0,  // C22 = M1 - M2 + M3 + M6
  };
  SpnCoeffs s;
  s.Wa = TernaryMatrix::from_values(7, 4, std::vector<int>(wa, wa + 28));
  s.Wb = TernaryMatrix::from_values(7, 4, std::vector<int>(wb, wb + 28));
  s.Wc = TernaryMatrix::from_values(4, 7, std::vector<int>(wc, wc + 28));
  return s;
}

// Evaluate the SPN with both operands dynamic. A is [n,p], B is [p,m];
// requires Wa.cols == n*p, Wb.cols == p*m, Wc.rows == n*m and equal hidden
// widths. Counts one add per ternary coefficient and r muls. Scales attached
// to the matrices participate as plain multipliers on their matvec results.
inline Tensor spn_matmul(const TernaryMatrix& Wa, const TernaryMatrix& Wb,
                         const TernaryMatrix& Wc, const Tensor& A, const Tensor& B,
                         OpCounter* counter = nullptr) {
  if (A.rank() != 2 || B.rank() != 2) throw ShapeError("spn_matmul expects rank-2 operands");
  if (A.dim(1) != B.dim(0)) throw ShapeError("spn_matmul inner dims disagree");
  int64_t n = A.dim(0), p = A.dim(1), m = B.dim(1);
  int64_t r = Wa.rows();
  if (Wb.rows() != r || Wc.cols() != r)
    throw ShapeError("spn_matmul hidden widths disagree");
  if (Wa.cols() != n * p || Wb.cols() != p * m || Wc.rows() != n * m)
    throw ShapeError("spn_matmul coefficient dims do not match operands");

  std::vector<real> a(static_cast<size_t>(r)), b(static_cast<size_t>(r));
  Wa.matvec(A.data(), 1, a.data(), 1, counter);
  Wb.matvec(B.data(), 1, b.data(), 1, counter);
  for (int64_t i = 0; i < r; ++i) {
    a[static_cast<size_t>(i)] *= b[static_cast<size_t>(i)];
    if (counter) ++counter->muls;
  }
  Tensor c({n, m});
  Wc.matvec(a.data(), 1, c.data(), 1, counter);
  return c;
}

// Fold the weight-side matvec and all three ternarization scales into the
// inference vector: a_hat = (alpha_a * alpha_b * alpha_c) * (Wa_t vec(A)).
inline Tensor collapse(const TernaryMatrix& Wa_t, const Tensor& vecA, real alpha_b, real alpha_c) {
  if (Wa_t.cols() != vecA.size())
    throw ShapeError("collapse: Wa columns " + std::to_string(Wa_t.cols()) + " vs vec(A) length " +
                     std::to_string(vecA.size()));
  real alpha_a = Wa_t.scale() ? *Wa_t.scale() : 1.0;
  Tensor a_hat({Wa_t.rows()});
  // scale applied manually so the ternary scale is not double counted
  for (int64_t r = 0; r < Wa_t.rows(); ++r) {
    real acc = 0.0;
    for (int64_t c = 0; c < Wa_t.cols(); ++c) {
      int t = Wa_t.get(r, c);
      if (t == 1)
        acc += vecA[c];
      else if (t == -1)
        acc -= vecA[c];
    }
    a_hat[r] = alpha_a * alpha_b * alpha_c * acc;
  }
  return a_hat;
}

enum class StrassenKind { matmul, conv_standard, conv_depthwise, conv_pointwise };

inline const char* kind_name(StrassenKind k) {
  switch (k) {
    case StrassenKind::matmul: return "matmul";
    case StrassenKind::conv_standard: return "conv";
    case StrassenKind::conv_depthwise: return "dw_conv";
    case StrassenKind::conv_pointwise: return "pw_conv";
  }
  return "?";
}

// Full-precision training-side tensors. Wa is [r, fan_in*fan_out], vecA is
// the flattened weights of the layer being replaced, Wb is [r, fan_in], Wc is
// [fan_out, r]. When `quantize` is set the forward pass sees the ternarized
// projections of the shadows.
struct SpnShadow {
  Tensor Wa, vecA, Wb, Wc;
  bool quantize = false;
};

// One strassenified linear map. After training collapses, only the ternary
// pair (Wb, Wc), the r-vector a_hat, and the bias survive; BN (when present)
// normalizes the r-channel intermediate, which is what makes its fold into
// a_hat and bias exact.
struct StrassenLayer {
  StrassenKind kind = StrassenKind::matmul;
  ConvGeometry geom;           // conv kinds only
  int64_t r = 0, fan_in = 0, fan_out = 0;

  std::optional<TernaryMatrix> Wb, Wc;  // scale-free at inference
  std::optional<Tensor> a_hat;          // [r]
  std::optional<SpnShadow> shadow;

  Tensor bias;                 // [fan_out] or empty
  std::optional<BatchNorm> bn; // over the r intermediate channels

  bool is_conv() const { return kind != StrassenKind::matmul; }
  bool inference_ready() const { return Wb && Wc && a_hat; }

  void validate() const {
    if (r <= 0 || fan_in <= 0 || fan_out <= 0)
      throw ShapeError("strassen layer dims must be positive");
    if (is_conv()) {
      geom.validate();
      if (fan_in != geom.patch_len() || fan_out != geom.out_channels)
        throw ShapeError("strassen conv fan_in/fan_out do not match geometry");
    }
    if (Wb && (Wb->rows() != r || Wb->cols() != fan_in))
      throw ShapeError("strassen Wb dims");
    if (Wc && (Wc->rows() != fan_out || Wc->cols() != r))
      throw ShapeError("strassen Wc dims");
    if (a_hat && a_hat->size() != r) throw ShapeError("strassen a_hat length");
    if (!bias.empty() && bias.size() != fan_out) throw ShapeError("strassen bias length");
    if (bn && bn->channels() != r) throw ShapeError("strassen bn channel count");
    if (shadow) {
      if (shadow->Wa.rank() != 2 || shadow->Wa.dim(0) != r ||
          shadow->Wa.dim(1) != fan_in * fan_out)
        throw ShapeError("strassen shadow Wa dims");
      if (shadow->vecA.size() != fan_in * fan_out) throw ShapeError("strassen shadow vecA length");
      if (shadow->Wb.rank() != 2 || shadow->Wb.dim(0) != r || shadow->Wb.dim(1) != fan_in)
        throw ShapeError("strassen shadow Wb dims");
      if (shadow->Wc.rank() != 2 || shadow->Wc.dim(0) != fan_out || shadow->Wc.dim(1) != r)
        throw ShapeError("strassen shadow Wc dims");
    }
  }
};

namespace detail {

// p = (Wb x) . a_hat  (+BN), out = Wc p (+bias). X_cols is [fan_in, P].
inline Tensor spn_apply_cols(const StrassenLayer& L, const Tensor& X_cols, OpCounter* counter) {
  int64_t P = X_cols.dim(1);
  Tensor H = L.Wb->matmat(X_cols, counter);  // [r, P]
  for (int64_t i = 0; i < L.r; ++i) {
    real a = (*L.a_hat)[i];
    real s = 1.0, t = 0.0;
    if (L.bn) {
      s = L.bn->scale(i);
      t = L.bn->shift(i);
    }
    for (int64_t j = 0; j < P; ++j) {
      real v = H.at2(i, j) * a;
      if (counter) ++counter->muls;
      H.at2(i, j) = L.bn ? s * v + t : v;
    }
  }
  Tensor out = L.Wc->matmat(H, counter);  // [fan_out, P]
  if (!L.bias.empty())
    for (int64_t i = 0; i < L.fan_out; ++i)
      for (int64_t j = 0; j < P; ++j) out.at2(i, j) += L.bias[i];
  return out;
}

}  // namespace detail

// Strassenified convolution at inference. W_b acts as r ternary filters over
// the full receptive field (for depthwise geometry too; grouping only shapes
// the dense baseline), a_hat scales the r channels, W_c is a ternary 1x1.
inline Tensor spn_conv_forward(const StrassenLayer& L, const Tensor& input,
                               OpCounter* counter = nullptr) {
  L.validate();
  if (!L.is_conv()) throw ShapeError("spn_conv_forward: layer is not a convolution");
  if (!L.inference_ready())
    throw StateError("spn_conv_forward: layer lacks inference weights (collapse first)");
  Tensor cols = im2col(input, L.geom);
  Tensor out = detail::spn_apply_cols(L, cols, counter);  // [c_out, P]
  return out.reshaped({L.geom.out_channels, L.geom.out_h(input.dim(1)), L.geom.out_w(input.dim(2))});
}

// Matmul-kind layer applied to one column vector.
inline Tensor spn_matvec_forward(const StrassenLayer& L, const Tensor& x,
                                 OpCounter* counter = nullptr) {
  L.validate();
  if (L.is_conv()) throw ShapeError("spn_matvec_forward: conv-kind layer");
  if (!L.inference_ready())
    throw StateError("spn_matvec_forward: layer lacks inference weights (collapse first)");
  if (x.size() != L.fan_in) throw ShapeError("spn_matvec_forward: input length");
  Tensor out = detail::spn_apply_cols(L, x.reshaped({L.fan_in, 1}), counter);
  return out.reshaped({L.fan_out});
}

// Dense equivalent W = Wc diag(a_hat) Wb, shape [fan_out, fan_in]. BN and
// bias are not included; used by tests and the collapse-equivalence checks.
inline Tensor reconstruct_dense(const StrassenLayer& L) {
  if (!L.inference_ready()) throw StateError("reconstruct_dense: layer lacks inference weights");
  Tensor W({L.fan_out, L.fan_in});
  for (int64_t o = 0; o < L.fan_out; ++o)
    for (int64_t j = 0; j < L.r; ++j) {
      int c = L.Wc->get(o, j);
      if (c == 0) continue;
      real w = static_cast<real>(c) * (*L.a_hat)[j];
      for (int64_t i = 0; i < L.fan_in; ++i) {
        int b = L.Wb->get(j, i);
        if (b != 0) W.at2(o, i) += w * static_cast<real>(b);
      }
    }
  return W;
}

// Freeze the ternary patterns and absorb all three scales into a_hat.
// Batch-stat BN is scale-invariant, so training is untouched; eval-mode
// running stats see the alpha_c rescale of the intermediate, compensated
// exactly by mean *= alpha_c, beta *= alpha_c.
inline void collapse_layer(StrassenLayer& L) {
  if (!L.shadow) throw StateError("collapse: layer has no training shadow");
  TernaryMatrix wa = ternarize(L.shadow->Wa);
  TernaryMatrix wb = ternarize(L.shadow->Wb);
  TernaryMatrix wc = ternarize(L.shadow->Wc);
  real alpha_b = *wb.scale(), alpha_c = *wc.scale();
  L.a_hat = collapse(wa, L.shadow->vecA, alpha_b, alpha_c);
  wb.set_scale(std::nullopt);
  wc.set_scale(std::nullopt);
  L.Wb = std::move(wb);
  L.Wc = std::move(wc);
  if (L.bn) {
    for (int64_t i = 0; i < L.bn->channels(); ++i) {
      L.bn->mean[i] *= alpha_c;
      L.bn->beta[i] *= alpha_c;
    }
  }
  L.shadow.reset();
}

// Full-precision (or quantize-projected) shadow evaluation on column data;
// the float reference for checkpointed models that have not collapsed yet.
inline Tensor spn_shadow_apply_cols(const StrassenLayer& L, const Tensor& X_cols) {
  if (!L.shadow) throw StateError("strassen layer has no training shadow");
  const SpnShadow& s = *L.shadow;
  Tensor wa = s.Wa, wb = s.Wb, wc = s.Wc;
  real alpha_a = 1.0, alpha_b = 1.0, alpha_c = 1.0;
  if (s.quantize) {
    ternarize_values(s.Wa.data(), s.Wa.size(), wa.data(), alpha_a);
    ternarize_values(s.Wb.data(), s.Wb.size(), wb.data(), alpha_b);
    ternarize_values(s.Wc.data(), s.Wc.size(), wc.data(), alpha_c);
  }
  Tensor a = matmul_ref(wa, s.vecA.reshaped({s.vecA.size(), 1}));  // [r,1]
  Tensor H = matmul_ref(wb, X_cols);                               // [r,P]
  int64_t P = H.dim(1);
  for (int64_t i = 0; i < L.r; ++i) {
    real ai = a[i] * alpha_a * alpha_b;
    real sc = 1.0, sh = 0.0;
    if (L.bn) {
      sc = L.bn->scale(i);
      sh = L.bn->shift(i);
    }
    for (int64_t j = 0; j < P; ++j) {
      real v = H.at2(i, j) * ai;
      H.at2(i, j) = L.bn ? sc * v + sh : v;
    }
  }
  Tensor out = matmul_ref(wc, H);
  if (alpha_c != 1.0)
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= alpha_c;
  if (!L.bias.empty())
    for (int64_t i = 0; i < L.fan_out; ++i)
      for (int64_t j = 0; j < P; ++j) out.at2(i, j) += L.bias[i];
  return out;
}

}  // namespace thn
