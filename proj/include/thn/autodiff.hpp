#pragma once

#include <functional>

#include "thn/graph.hpp"

namespace thn {

// ---------------------------------------------------------------------------
// Reverse-mode tape. Each op pushes a value node plus a closure that scatters
// the node's gradient into its parents; backward() replays closures in
// reverse creation order. Gradients allocate lazily and a node whose grad was
// never touched is skipped (nothing downstream reached it). Backward closures
// receive the tape and their own node, so they capture only parent handles
// and whatever forward-pass values they need.

struct Var {
  int64_t idx = -1;
};

class Tape {
 public:
  using BackFn = std::function<void(Tape&, Var)>;

  Var push(Tensor v) { return make(std::move(v), nullptr); }

  Var make(Tensor value, BackFn back) {
    nodes_.push_back({std::move(value), Tensor(), std::move(back)});
    return {static_cast<int64_t>(nodes_.size()) - 1};
  }

  const Tensor& val(Var v) const { return nodes_[static_cast<size_t>(v.idx)].value; }
  Tensor& val(Var v) { return nodes_[static_cast<size_t>(v.idx)].value; }

  Tensor& grad(Var v) {
    Node& n = nodes_[static_cast<size_t>(v.idx)];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  bool touched(Var v) const { return !nodes_[static_cast<size_t>(v.idx)].grad.empty(); }

  void backward(Var loss) {
    if (val(loss).size() != 1) throw ShapeError("backward expects a scalar loss");
    grad(loss)[0] = 1.0;
    for (int64_t i = loss.idx; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.back && !n.grad.empty()) n.back(*this, Var{i});
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackFn back;
  };
  std::vector<Node> nodes_;
};

namespace ad {

inline Var reshape(Tape& t, Var x, std::vector<int64_t> shape) {
  Tensor v = t.val(x).reshaped(shape);
  return t.make(std::move(v), [x](Tape& t, Var self) {
    Tensor& gx = t.grad(x);
    const Tensor& g = t.grad(self);
    for (int64_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

// C = A B
inline Var matmul(Tape& t, Var a, Var b) {
  const Tensor& A = t.val(a);
  const Tensor& B = t.val(b);
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
    throw ShapeError("matmul " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  int64_t n = A.dim(0), k = A.dim(1), m = B.dim(1);
  Tensor C({n, m});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t l = 0; l < k; ++l) {
      real av = A.at2(i, l);
      if (av == 0.0) continue;
      for (int64_t j = 0; j < m; ++j) C.at2(i, j) += av * B.at2(l, j);
    }
  return t.make(std::move(C), [a, b, n, k, m](Tape& t, Var self) {
    const Tensor& g = t.grad(self);
    const Tensor& A = t.val(a);
    const Tensor& B = t.val(b);
    Tensor& ga = t.grad(a);
    Tensor& gb = t.grad(b);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < m; ++j) {
        real gv = g.at2(i, j);
        if (gv == 0.0) continue;
        for (int64_t l = 0; l < k; ++l) {
          ga.at2(i, l) += gv * B.at2(l, j);
          gb.at2(l, j) += A.at2(i, l) * gv;
        }
      }
  });
}

// C = A^T B for A [k,n], B [k,m]
inline Var matmul_tn(Tape& t, Var a, Var b) {
  const Tensor& A = t.val(a);
  const Tensor& B = t.val(b);
  if (A.rank() != 2 || B.rank() != 2 || A.dim(0) != B.dim(0))
    throw ShapeError("matmul_tn " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  int64_t k = A.dim(0), n = A.dim(1), m = B.dim(1);
  Tensor C({n, m});
  for (int64_t l = 0; l < k; ++l)
    for (int64_t i = 0; i < n; ++i) {
      real av = A.at2(l, i);
      if (av == 0.0) continue;
      for (int64_t j = 0; j < m; ++j) C.at2(i, j) += av * B.at2(l, j);
    }
  return t.make(std::move(C), [a, b, k, n, m](Tape& t, Var self) {
    const Tensor& g = t.grad(self);
    const Tensor& A = t.val(a);
    const Tensor& B = t.val(b);
    Tensor& ga = t.grad(a);
    Tensor& gb = t.grad(b);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < m; ++j) {
        real gv = g.at2(i, j);
        if (gv == 0.0) continue;
        for (int64_t l = 0; l < k; ++l) {
          ga.at2(l, i) += B.at2(l, j) * gv;
          gb.at2(l, j) += A.at2(l, i) * gv;
        }
      }
  });
}

namespace detail {

struct SignEntry {
  int32_t col;
  int8_t sign;
};

inline std::vector<std::vector<SignEntry>> row_signs(const TernaryMatrix& M) {
  std::vector<std::vector<SignEntry>> rows(static_cast<size_t>(M.rows()));
  for (int64_t r = 0; r < M.rows(); ++r)
    for (int64_t c = 0; c < M.cols(); ++c) {
      int v = M.get(r, c);
      if (v) rows[static_cast<size_t>(r)].push_back({static_cast<int32_t>(c),
                                                     static_cast<int8_t>(v)});
    }
  return rows;
}

}  // namespace detail

// y = M x for a frozen ternary pattern (phase-3 layers); x is [C, m].
// Gradient flows into x only: dx = M^T dy.
inline Var tern_matmul(Tape& t, const TernaryMatrix& M, Var x) {
  const Tensor& X = t.val(x);
  if (X.rank() != 2 || X.dim(0) != M.cols())
    throw ShapeError("tern_matmul: operand " + shape_str(X.shape()) + " vs cols " +
                     std::to_string(M.cols()));
  int64_t m = X.dim(1);
  auto rows = detail::row_signs(M);
  Tensor Y({M.rows(), m});
  for (int64_t r = 0; r < M.rows(); ++r)
    for (const detail::SignEntry& e : rows[static_cast<size_t>(r)]) {
      const real* src = X.data() + e.col * m;
      real* dst = Y.data() + r * m;
      if (e.sign > 0)
        for (int64_t j = 0; j < m; ++j) dst[j] += src[j];
      else
        for (int64_t j = 0; j < m; ++j) dst[j] -= src[j];
    }
  return t.make(std::move(Y), [x, rows, m](Tape& t, Var self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(x);
    for (size_t r = 0; r < rows.size(); ++r)
      for (const detail::SignEntry& e : rows[r]) {
        const real* src = g.data() + static_cast<int64_t>(r) * m;
        real* dst = gx.data() + e.col * m;
        if (e.sign > 0)
          for (int64_t j = 0; j < m; ++j) dst[j] += src[j];
        else
          for (int64_t j = 0; j < m; ++j) dst[j] -= src[j];
      }
  });
}

// Batched patch extraction: [N,C,H,W] -> [patch_len, N*P] with column blocks
// per sample, matching the single-sample im2col row order.
inline Var im2col_batch(Tape& t, Var x, const ConvGeometry& g) {
  const Tensor& X = t.val(x);
  if (X.rank() != 4 || X.dim(1) != g.in_channels)
    throw ShapeError("im2col_batch: input " + shape_str(X.shape()));
  int64_t N = X.dim(0), H = X.dim(2), W = X.dim(3);
  int64_t OH = g.out_h(H), OW = g.out_w(W), P = OH * OW;
  Tensor Y({g.patch_len(), N * P});
  for (int64_t n = 0; n < N; ++n)
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
              Y.at2(row, n * P + oy * OW + ox) = X.at4(n, c, iy, ix);
            }
          }
        }
  return t.make(std::move(Y), [x, g, N, H, W, OH, OW, P](Tape& t, Var self) {
    const Tensor& gy = t.grad(self);
    Tensor& gx = t.grad(x);
    for (int64_t n = 0; n < N; ++n)
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
                gx.at4(n, c, iy, ix) += gy.at2(row, n * P + oy * OW + ox);
              }
            }
          }
  });
}

// Columns back to feature maps: [C, N*P] -> [N, C, OH, OW].
inline Var cols2maps(Tape& t, Var x, int64_t N, int64_t OH, int64_t OW) {
  const Tensor& X = t.val(x);
  if (X.rank() != 2 || X.dim(1) != N * OH * OW)
    throw ShapeError("cols2maps: operand " + shape_str(X.shape()));
  int64_t C = X.dim(0), P = OH * OW;
  Tensor Y({N, C, OH, OW});
  for (int64_t c = 0; c < C; ++c)
    for (int64_t n = 0; n < N; ++n)
      for (int64_t p = 0; p < P; ++p)
        Y[(n * C + c) * P + p] = X.at2(c, n * P + p);
  return t.make(std::move(Y), [x, N, C, P](Tape& t, Var self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(x);
    for (int64_t c = 0; c < C; ++c)
      for (int64_t n = 0; n < N; ++n)
        for (int64_t p = 0; p < P; ++p) gx.at2(c, n * P + p) += g[(n * C + c) * P + p];
  });
}

// [N,C,H,W] -> [C*H*W, N]; the batched equivalent of flattening one sample.
inline Var flatten_cols(Tape& t, Var x) {
  const Tensor& X = t.val(x);
  if (X.rank() != 4) throw ShapeError("flatten_cols: operand " + shape_str(X.shape()));
  int64_t N = X.dim(0), D = X.size() / N;
  Tensor Y({D, N});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t d = 0; d < D; ++d) Y.at2(d, n) = X[n * D + d];
  return t.make(std::move(Y), [x, N, D](Tape& t, Var self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(x);
    for (int64_t n = 0; n < N; ++n)
      for (int64_t d = 0; d < D; ++d) gx[n * D + d] += g.at2(d, n);
  });
}

// y[i,j] = x[i,j] * s[i]; s is [r] or [r,1]
inline Var rowscale(Tape& t, Var x, Var s) {
  const Tensor& X = t.val(x);
  const Tensor& S = t.val(s);
  if (X.rank() != 2 || S.size() != X.dim(0))
    throw ShapeError("rowscale " + shape_str(X.shape()) + " by " + shape_str(S.shape()));
  int64_t r = X.dim(0), m = X.dim(1);
  Tensor Y({r, m});
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < m; ++j) Y.at2(i, j) = X.at2(i, j) * S[i];
  return t.make(std::move(Y), [x, s, r, m](Tape& t, Var self) {
    const Tensor& g = t.grad(self);
    const Tensor& X = t.val(x);
    const Tensor& S = t.val(s);
    Tensor& gx = t.grad(x);
    Tensor& gs = t.grad(s);
    for (int64_t i = 0; i < r; ++i) {
      real acc = 0.0;
      for (int64_t j = 0; j < m; ++j) {
        real gv = g.at2(i, j);
        gx.at2(i, j) += gv * S[i];
        acc += gv * X.at2(i, j);
      }
      gs[i] += acc;
    }
  });
}

// y[i,j] = x[i,j] * s[j]; s is [m]
inline Var colscale(Tape& t, Var x, Var s) {
  const Tensor& X = t.val(x);
  const Tensor& S = t.val(s);
  if (X.rank() != 2 || S.size() != X.dim(1))
    throw ShapeError("colscale " + shape_str(X.shape()) + " by " + shape_str(S.shape()));
  int64_t r = X.dim(0), m = X.dim(1);
  Tensor Y({r, m});
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < m; ++j) Y.at2(i, j) = X.at2(i, j) * S[j];
  return t.make(std::move(Y), [x, s, r, m](Tape& t, Var self) {
    const Tensor& g = t.grad(self);
    const Tensor& X = t.val(x);
    const Tensor& S = t.val(s);
    Tensor& gx = t.grad(x);
    Tensor& gs = t.grad(s);
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < m; ++j) {
        real gv = g.at2(i, j);
        gx.at2(i, j) += gv * S[j];
        gs[j] += gv * X.at2(i, j);
      }
  });
}

// y[i,j] = x[i,j] + b[i]
inline Var bias_rows(Tape& t, Var x, Var b) {
  const Tensor& X = t.val(x);
  const Tensor& B = t.val(b);
  if (X.rank() != 2 || B.size() != X.dim(0))
    throw ShapeError("bias_rows " + shape_str(X.shape()) + " + " + shape_str(B.shape()));
  int64_t r = X.dim(0), m = X.dim(1);
  Tensor Y({r, m});
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < m; ++j) Y.at2(i, j) = X.at2(i, j) + B[i];
  return t.make(std::move(Y), [x, b, r, m](Tape& t, Var self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(x);
    Tensor& gb = t.grad(b);
    for (int64_t i = 0; i < r; ++i) {
      real acc = 0.0;
      for (int64_t j = 0; j < m; ++j) {
        gx.at2(i, j) += g.at2(i, j);
        acc += g.at2(i, j);
      }
      gb[i] += acc;
    }
  });
}

// Row-wise batch normalization with batch statistics; running stats in the
// host struct are updated in place (biased variance throughout).
inline Var batchnorm_rows(Tape& t, Var x, Var gamma, Var beta, BatchNorm* host,
                          real momentum = 0.1) {
  const Tensor& X = t.val(x);
  if (X.rank() != 2 || t.val(gamma).size() != X.dim(0) || t.val(beta).size() != X.dim(0))
    throw ShapeError("batchnorm_rows: operand " + shape_str(X.shape()));
  int64_t r = X.dim(0), m = X.dim(1);
  if (m < 2) throw ShapeError("batchnorm_rows needs at least two columns");
  Tensor xhat({r, m});
  Tensor inv_std({r});
  const Tensor& G = t.val(gamma);
  const Tensor& Bt = t.val(beta);
  Tensor Y({r, m});
  for (int64_t i = 0; i < r; ++i) {
    real mu = 0.0;
    for (int64_t j = 0; j < m; ++j) mu += X.at2(i, j);
    mu /= static_cast<real>(m);
    real var = 0.0;
    for (int64_t j = 0; j < m; ++j) {
      real d = X.at2(i, j) - mu;
      var += d * d;
    }
    var /= static_cast<real>(m);
    real is = 1.0 / std::sqrt(var + host->eps);
    inv_std[i] = is;
    for (int64_t j = 0; j < m; ++j) {
      xhat.at2(i, j) = (X.at2(i, j) - mu) * is;
      Y.at2(i, j) = G[i] * xhat.at2(i, j) + Bt[i];
    }
    host->mean[i] = (1.0 - momentum) * host->mean[i] + momentum * mu;
    host->var[i] = (1.0 - momentum) * host->var[i] + momentum * var;
  }
  return t.make(std::move(Y),
                [x, gamma, beta, xhat, inv_std, r, m](Tape& t, Var self) {
                  const Tensor& g = t.grad(self);
                  const Tensor& G = t.val(gamma);
                  Tensor& gx = t.grad(x);
                  Tensor& gg = t.grad(gamma);
                  Tensor& gb = t.grad(beta);
                  for (int64_t i = 0; i < r; ++i) {
                    real sum_g = 0.0, sum_gx = 0.0;
                    for (int64_t j = 0; j < m; ++j) {
                      sum_g += g.at2(i, j);
                      sum_gx += g.at2(i, j) * xhat.at2(i, j);
                    }
                    gb[i] += sum_g;
                    gg[i] += sum_gx;
                    real k = G[i] * inv_std[i];
                    real inv_m = 1.0 / static_cast<real>(m);
                    for (int64_t j = 0; j < m; ++j)
                      gx.at2(i, j) +=
                          k * (g.at2(i, j) - sum_g * inv_m - xhat.at2(i, j) * sum_gx * inv_m);
                  }
                });
}

// Eval-mode normalization: the fixed affine from running statistics. Used by
// validation passes mid-training, where batch statistics would leak.
inline Var batchnorm_rows_eval(Tape& t, Var x, const BatchNorm& bn) {
  const Tensor& X = t.val(x);
  if (X.rank() != 2 || bn.channels() != X.dim(0))
    throw ShapeError("batchnorm_rows_eval: operand " + shape_str(X.shape()));
  int64_t r = X.dim(0), m = X.dim(1);
  Tensor Y({r, m});
  std::vector<real> sc(static_cast<size_t>(r));
  for (int64_t i = 0; i < r; ++i) {
    real s = bn.scale(i), sh = bn.shift(i);
    sc[static_cast<size_t>(i)] = s;
    for (int64_t j = 0; j < m; ++j) Y.at2(i, j) = s * X.at2(i, j) + sh;
  }
  return t.make(std::move(Y), [x, sc, r, m](Tape& t, Var self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(x);
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < m; ++j) gx.at2(i, j) += sc[static_cast<size_t>(i)] * g.at2(i, j);
  });
}

inline Var relu(Tape& t, Var x) {
  Tensor Y = t.val(x);
  for (int64_t i = 0; i < Y.size(); ++i)
    if (Y[i] < 0) Y[i] = 0;
  return t.make(std::move(Y), [x](Tape& t, Var self) {
    const Tensor& g = t.grad(self);
    const Tensor& X = t.val(x);
    Tensor& gx = t.grad(x);
    for (int64_t i = 0; i < g.size(); ++i)
      if (X[i] > 0) gx[i] += g[i];
  });
}

inline Var tanh_op(Tape& t, Var x) {
  Tensor Y = t.val(x);
  for (int64_t i = 0; i < Y.size(); ++i) Y[i] = std::tanh(Y[i]);
  Tensor Ycopy = Y;
  return t.make(std::move(Y), [x, Ycopy](Tape& t, Var self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(x);
    for (int64_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (1.0 - Ycopy[i] * Ycopy[i]);
  });
}

// y = a*x + b with scalar constants
inline Var affine_const(Tape& t, Var x, real a, real b) {
  Tensor Y = t.val(x);
  for (int64_t i = 0; i < Y.size(); ++i) Y[i] = a * Y[i] + b;
  return t.make(std::move(Y), [x, a](Tape& t, Var self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(x);
    for (int64_t i = 0; i < g.size(); ++i) gx[i] += a * g[i];
  });
}

inline Var scale_const(Tape& t, Var x, real a) { return affine_const(t, x, a, 0.0); }

inline Var mul(Tape& t, Var a, Var b) {
  const Tensor& A = t.val(a);
  const Tensor& B = t.val(b);
  if (!A.same_shape(B))
    throw ShapeError("mul " + shape_str(A.shape()) + " vs " + shape_str(B.shape()));
  Tensor Y = A;
  for (int64_t i = 0; i < Y.size(); ++i) Y[i] *= B[i];
  return t.make(std::move(Y), [a, b](Tape& t, Var self) {
    const Tensor& g = t.grad(self);
    const Tensor& A = t.val(a);
    const Tensor& B = t.val(b);
    Tensor& ga = t.grad(a);
    Tensor& gb = t.grad(b);
    for (int64_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i] * B[i];
      gb[i] += g[i] * A[i];
    }
  });
}

inline Var add(Tape& t, Var a, Var b) {
  const Tensor& A = t.val(a);
  const Tensor& B = t.val(b);
  if (!A.same_shape(B))
    throw ShapeError("add " + shape_str(A.shape()) + " vs " + shape_str(B.shape()));
  Tensor Y = A;
  for (int64_t i = 0; i < Y.size(); ++i) Y[i] += B[i];
  return t.make(std::move(Y), [a, b](Tape& t, Var self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(a);
    Tensor& gb = t.grad(b);
    for (int64_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i];
      gb[i] += g[i];
    }
  });
}

// Straight-through ternarization: forward is the scaled ternary projection
// alpha * sign pattern, backward passes gradients through unchanged.
inline Var ternarize_ste(Tape& t, Var w) {
  const Tensor& W = t.val(w);
  Tensor Y(W.shape());
  real alpha = 1.0;
  ternarize_values(W.data(), W.size(), Y.data(), alpha);
  for (int64_t i = 0; i < Y.size(); ++i) Y[i] *= alpha;
  return t.make(std::move(Y), [w](Tape& t, Var self) {
    const Tensor& g = t.grad(self);
    Tensor& gw = t.grad(w);
    for (int64_t i = 0; i < g.size(); ++i) gw[i] += g[i];
  });
}

inline Var avg_pool_batch(Tape& t, Var x, int64_t kh, int64_t kw, int64_t sh, int64_t sw) {
  const Tensor& X = t.val(x);
  if (X.rank() != 4) throw ShapeError("avg_pool_batch: operand " + shape_str(X.shape()));
  int64_t N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
  int64_t OH = (H - kh) / sh + 1, OW = (W - kw) / sw + 1;
  Tensor Y({N, C, OH, OW});
  real inv = 1.0 / static_cast<real>(kh * kw);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t oy = 0; oy < OH; ++oy)
        for (int64_t ox = 0; ox < OW; ++ox) {
          real acc = 0.0;
          for (int64_t ky = 0; ky < kh; ++ky)
            for (int64_t kx = 0; kx < kw; ++kx)
              acc += X.at4(n, c, oy * sh + ky, ox * sw + kx);
          Y.at4(n, c, oy, ox) = acc * inv;
        }
  return t.make(std::move(Y), [x, kh, kw, sh, sw, N, C, OH, OW, inv](Tape& t, Var self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(x);
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c)
        for (int64_t oy = 0; oy < OH; ++oy)
          for (int64_t ox = 0; ox < OW; ++ox) {
            real gv = g.at4(n, c, oy, ox) * inv;
            for (int64_t ky = 0; ky < kh; ++ky)
              for (int64_t kx = 0; kx < kw; ++kx)
                gx.at4(n, c, oy * sh + ky, ox * sw + kx) += gv;
          }
  });
}

// ---------------------------------------------------------------------------
// Losses on a score matrix [L, N], one column per sample.

// mean over samples of sum_{j != y} max(0, 1 - s_y + s_j)
inline Var hinge_loss(Tape& t, Var scores, std::vector<int> labels) {
  const Tensor& S = t.val(scores);
  if (S.rank() != 2 || S.dim(1) != static_cast<int64_t>(labels.size()))
    throw ShapeError("hinge_loss: scores " + shape_str(S.shape()));
  int64_t L = S.dim(0), N = S.dim(1);
  real loss = 0.0;
  for (int64_t n = 0; n < N; ++n) {
    int y = labels[static_cast<size_t>(n)];
    for (int64_t j = 0; j < L; ++j) {
      if (j == y) continue;
      real margin = 1.0 - S.at2(y, n) + S.at2(j, n);
      if (margin > 0) loss += margin;
    }
  }
  loss /= static_cast<real>(N);
  return t.make(Tensor::scalar(loss), [scores, labels, L, N](Tape& t, Var self) {
    real g = t.grad(self)[0] / static_cast<real>(N);
    const Tensor& S = t.val(scores);
    Tensor& gs = t.grad(scores);
    for (int64_t n = 0; n < N; ++n) {
      int y = labels[static_cast<size_t>(n)];
      for (int64_t j = 0; j < L; ++j) {
        if (j == y) continue;
        if (1.0 - S.at2(y, n) + S.at2(j, n) > 0) {
          gs.at2(j, n) += g;
          gs.at2(y, n) -= g;
        }
      }
    }
  });
}

namespace detail {

inline void softmax_col(const Tensor& S, int64_t n, real inv_temp, std::vector<real>& p) {
  int64_t L = S.dim(0);
  p.resize(static_cast<size_t>(L));
  real mx = -1e300;
  for (int64_t j = 0; j < L; ++j) mx = std::max(mx, S.at2(j, n) * inv_temp);
  real z = 0.0;
  for (int64_t j = 0; j < L; ++j) {
    p[static_cast<size_t>(j)] = std::exp(S.at2(j, n) * inv_temp - mx);
    z += p[static_cast<size_t>(j)];
  }
  for (int64_t j = 0; j < L; ++j) p[static_cast<size_t>(j)] /= z;
}

}  // namespace detail

// mean over samples of -log softmax(s)[y]
inline Var cross_entropy(Tape& t, Var scores, std::vector<int> labels) {
  const Tensor& S = t.val(scores);
  if (S.rank() != 2 || S.dim(1) != static_cast<int64_t>(labels.size()))
    throw ShapeError("cross_entropy: scores " + shape_str(S.shape()));
  int64_t L = S.dim(0), N = S.dim(1);
  real loss = 0.0;
  std::vector<real> p;
  for (int64_t n = 0; n < N; ++n) {
    detail::softmax_col(S, n, 1.0, p);
    loss -= std::log(std::max(p[static_cast<size_t>(labels[static_cast<size_t>(n)])], 1e-300));
  }
  loss /= static_cast<real>(N);
  return t.make(Tensor::scalar(loss), [scores, labels, L, N](Tape& t, Var self) {
    real g = t.grad(self)[0] / static_cast<real>(N);
    const Tensor& S = t.val(scores);
    Tensor& gs = t.grad(scores);
    std::vector<real> p;
    for (int64_t n = 0; n < N; ++n) {
      detail::softmax_col(S, n, 1.0, p);
      for (int64_t j = 0; j < L; ++j) {
        real onehot = j == labels[static_cast<size_t>(n)] ? 1.0 : 0.0;
        gs.at2(j, n) += g * (p[static_cast<size_t>(j)] - onehot);
      }
    }
  });
}

// tau^2 * mean_n KL(softmax(teacher/tau) || softmax(student/tau)); the
// teacher is a constant. Gradient wrt student scores is tau (p - q) / N.
inline Var kd_kl(Tape& t, Var scores, Tensor teacher, real tau) {
  const Tensor& S = t.val(scores);
  if (!S.same_shape(teacher)) throw ShapeError("kd_kl: teacher shape " + shape_str(teacher.shape()));
  if (tau <= 0) throw ConfigError("distillation temperature must be positive");
  int64_t L = S.dim(0), N = S.dim(1);
  real loss = 0.0;
  std::vector<real> p, q;
  for (int64_t n = 0; n < N; ++n) {
    detail::softmax_col(S, n, 1.0 / tau, p);
    detail::softmax_col(teacher, n, 1.0 / tau, q);
    for (int64_t j = 0; j < L; ++j) {
      real qj = q[static_cast<size_t>(j)];
      if (qj > 0) loss += qj * (std::log(qj) - std::log(std::max(p[static_cast<size_t>(j)], 1e-300)));
    }
  }
  loss = loss * tau * tau / static_cast<real>(N);
  return t.make(Tensor::scalar(loss), [scores, teacher, tau, L, N](Tape& t, Var self) {
    real g = t.grad(self)[0] * tau / static_cast<real>(N);
    const Tensor& S = t.val(scores);
    Tensor& gs = t.grad(scores);
    std::vector<real> p, q;
    for (int64_t n = 0; n < N; ++n) {
      detail::softmax_col(S, n, 1.0 / tau, p);
      detail::softmax_col(teacher, n, 1.0 / tau, q);
      for (int64_t j = 0; j < L; ++j)
        gs.at2(j, n) += g * (p[static_cast<size_t>(j)] - q[static_cast<size_t>(j)]);
    }
  });
}

// ca*a + cb*b for scalar nodes; the loss combiner
inline Var mix(Tape& t, Var a, Var b, real ca, real cb) {
  if (t.val(a).size() != 1 || t.val(b).size() != 1) throw ShapeError("mix expects scalars");
  Tensor Y = Tensor::scalar(ca * t.val(a)[0] + cb * t.val(b)[0]);
  return t.make(std::move(Y), [a, b, ca, cb](Tape& t, Var self) {
    real g = t.grad(self)[0];
    t.grad(a)[0] += ca * g;
    t.grad(b)[0] += cb * g;
  });
}

}  // namespace ad

}  // namespace thn
