#pragma once

#include <variant>

#include "thn/strassen.hpp"

namespace thn {

// A node or projection matrix: dense, or an SPN of matmul kind. Dense node
// matrices are stored [D_hat, L] and applied transposed; the SPN form stores
// the same map with fan_in = D_hat, fan_out = L.
using BonsaiMatrix = std::variant<Tensor, StrassenLayer>;

inline bool matrix_is_strassen(const BonsaiMatrix& m) {
  return std::holds_alternative<StrassenLayer>(m);
}

// y = M^T x for the dense alternative, SPN forward for the other.
inline Tensor bonsai_apply(const BonsaiMatrix& m, const Tensor& x, OpCounter* counter = nullptr) {
  if (const Tensor* W = std::get_if<Tensor>(&m)) {
    if (W->rank() != 2 || W->dim(0) != x.size())
      throw ShapeError("bonsai matrix " + shape_str(W->shape()) + " vs input length " +
                       std::to_string(x.size()));
    int64_t L = W->dim(1);
    Tensor y({L});
    for (int64_t d = 0; d < W->dim(0); ++d) {
      real xv = x[d];
      for (int64_t l = 0; l < L; ++l) y[l] += W->at2(d, l) * xv;
    }
    if (counter) counter->macs += W->dim(0) * L;
    return y;
  }
  const StrassenLayer& S = std::get<StrassenLayer>(m);
  if (S.inference_ready()) return spn_matvec_forward(S, x, counter);
  if (counter)
    throw StateError("op counting requires inference-form strassen weights");
  return spn_shadow_apply_cols(S, x.reshaped({x.size(), 1})).reshaped({S.fan_out});
}

// Heap-ordered soft decision tree. Node 0 is the root; node k has children
// 2k+1 (left, the high-probability branch) and 2k+2. Nodes at index
// < 2^depth - 1 are internal and carry a branching vector theta.
struct BonsaiNode {
  BonsaiMatrix W, V;
  Tensor theta;  // [D_hat], internal nodes only
};

struct BonsaiTree {
  int depth = 0;
  int64_t dim_in = 0;    // D
  int64_t dim_proj = 0;  // D_hat
  int64_t num_classes = 0;
  BonsaiMatrix Z;        // [D_hat, D] dense, or SPN with fan_in = D, fan_out = D_hat
  std::vector<BonsaiNode> nodes;
  real sigma = 1.0;    // score sharpness
  real sigma_i = 1.0;  // branching sharpness

  int64_t node_count() const { return (int64_t{1} << (depth + 1)) - 1; }
  int64_t internal_count() const { return (int64_t{1} << depth) - 1; }
  bool is_internal(int64_t k) const { return k < internal_count(); }

  void validate() const {
    if (depth < 0) throw ShapeError("bonsai depth must be >= 0");
    if (dim_in <= 0 || dim_proj <= 0 || num_classes <= 0)
      throw ShapeError("bonsai dims must be positive");
    if (static_cast<int64_t>(nodes.size()) != node_count())
      throw ShapeError("bonsai node count " + std::to_string(nodes.size()) + " != " +
                       std::to_string(node_count()));
    for (int64_t k = 0; k < node_count(); ++k) {
      const BonsaiNode& n = nodes[static_cast<size_t>(k)];
      if (is_internal(k) && n.theta.size() != dim_proj)
        throw ShapeError("bonsai theta length at node " + std::to_string(k));
    }
    if (sigma <= 0) throw ShapeError("bonsai sigma must be positive");
  }
};

// x̂ = Z x
inline Tensor project(const BonsaiTree& tree, const Tensor& x, OpCounter* counter = nullptr) {
  if (x.size() != tree.dim_in)
    throw ShapeError("bonsai project: input length " + std::to_string(x.size()) + " vs D " +
                     std::to_string(tree.dim_in));
  if (const Tensor* Z = std::get_if<Tensor>(&tree.Z)) {
    Tensor xhat({tree.dim_proj});
    for (int64_t d = 0; d < tree.dim_proj; ++d) {
      real acc = 0.0;
      for (int64_t i = 0; i < tree.dim_in; ++i) acc += Z->at2(d, i) * x[i];
      xhat[d] = acc;
    }
    if (counter) counter->macs += tree.dim_proj * tree.dim_in;
    return xhat;
  }
  const StrassenLayer& S = std::get<StrassenLayer>(tree.Z);
  if (S.inference_ready()) return spn_matvec_forward(S, x, counter);
  if (counter) throw StateError("op counting requires inference-form strassen weights");
  return spn_shadow_apply_cols(S, x.reshaped({x.size(), 1})).reshaped({S.fan_out});
}

// s_k = (W_k^T x̂) . tanh(sigma V_k^T x̂); the elementwise products count as
// muls, tanh itself is not counted.
inline Tensor node_score(const BonsaiTree& tree, int64_t k, const Tensor& xhat,
                         OpCounter* counter = nullptr) {
  const BonsaiNode& n = tree.nodes[static_cast<size_t>(k)];
  Tensor u = bonsai_apply(n.W, xhat, counter);
  Tensor v = bonsai_apply(n.V, xhat, counter);
  Tensor s({tree.num_classes});
  for (int64_t l = 0; l < tree.num_classes; ++l) {
    s[l] = u[l] * std::tanh(tree.sigma * v[l]);
    if (counter) ++counter->muls;
  }
  return s;
}

// Path indicators for every node: I_0 = 1, and an internal node k splits its
// mass by p_k = 0.5 (1 + tanh(sigma_i theta_k^T x̂)), left child taking p_k.
// Branching dot products count as D_hat macs each; the scalar probability
// arithmetic is not counted.
inline std::vector<real> path_indicators(const BonsaiTree& tree, const Tensor& xhat,
                                         real sigma_i, OpCounter* counter = nullptr) {
  if (xhat.size() != tree.dim_proj) throw ShapeError("path_indicators: projected length");
  std::vector<real> ind(static_cast<size_t>(tree.node_count()), 0.0);
  ind[0] = 1.0;
  for (int64_t k = 0; k < tree.internal_count(); ++k) {
    const Tensor& th = tree.nodes[static_cast<size_t>(k)].theta;
    real d = 0.0;
    for (int64_t i = 0; i < tree.dim_proj; ++i) d += th[i] * xhat[i];
    if (counter) counter->macs += tree.dim_proj;
    real p = 0.5 * (1.0 + std::tanh(sigma_i * d));
    ind[static_cast<size_t>(2 * k + 1)] = ind[static_cast<size_t>(k)] * p;
    ind[static_cast<size_t>(2 * k + 2)] = ind[static_cast<size_t>(k)] * (1.0 - p);
  }
  return ind;
}

enum class PredictMode { soft, hard };

// Prediction from an already-projected x̂. Soft mode sums indicator-weighted
// scores over every node; hard mode walks one root-to-leaf path (ties route
// left) and sums the raw scores along it.
inline Tensor tree_predict_xhat(const BonsaiTree& tree, const Tensor& xhat, PredictMode mode,
                                OpCounter* counter = nullptr) {
  if (xhat.size() != tree.dim_proj) throw ShapeError("tree_predict: projected length");
  Tensor out({tree.num_classes});
  if (mode == PredictMode::soft) {
    std::vector<real> ind = path_indicators(tree, xhat, tree.sigma_i, counter);
    for (int64_t k = 0; k < tree.node_count(); ++k) {
      Tensor s = node_score(tree, k, xhat, counter);
      real w = ind[static_cast<size_t>(k)];
      for (int64_t l = 0; l < tree.num_classes; ++l) out[l] += w * s[l];
    }
    return out;
  }
  int64_t k = 0;
  for (;;) {
    Tensor s = node_score(tree, k, xhat, counter);
    for (int64_t l = 0; l < tree.num_classes; ++l) out[l] += s[l];
    if (!tree.is_internal(k)) break;
    const Tensor& th = tree.nodes[static_cast<size_t>(k)].theta;
    real d = 0.0;
    for (int64_t i = 0; i < tree.dim_proj; ++i) d += th[i] * xhat[i];
    if (counter) counter->macs += tree.dim_proj;
    k = d >= 0.0 ? 2 * k + 1 : 2 * k + 2;
  }
  return out;
}

inline Tensor tree_predict(const BonsaiTree& tree, const Tensor& x, PredictMode mode,
                           OpCounter* counter = nullptr) {
  tree.validate();
  Tensor xhat = project(tree, x, counter);
  return tree_predict_xhat(tree, xhat, mode, counter);
}

}  // namespace thn
