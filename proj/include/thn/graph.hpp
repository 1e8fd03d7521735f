#pragma once

#include <memory>

#include "thn/bonsai.hpp"

namespace thn {

// ---------------------------------------------------------------------------
// Layers. A depthwise-separable block appears as two consecutive conv layers
// (depthwise then pointwise); each half carries its own weights and, when
// strassenified, its own SPN.

struct DenseConvLayer {
  StrassenKind kind = StrassenKind::conv_standard;  // which conv flavor (never matmul)
  ConvGeometry geom;
  Tensor W;     // [c_out, c_in_per_group, kh, kw]
  Tensor bias;  // [c_out] or empty
  std::optional<BatchNorm> bn;  // over output channels
  bool relu = true;

  void validate() const {
    geom.validate();
    if (W.rank() != 4 || W.dim(0) != geom.out_channels ||
        W.dim(1) != geom.in_channels_per_group() || W.dim(2) != geom.kernel_h ||
        W.dim(3) != geom.kernel_w)
      throw ShapeError("dense conv weight shape " + shape_str(W.shape()));
    if (!bias.empty() && bias.size() != geom.out_channels)
      throw ShapeError("dense conv bias length");
    if (bn && bn->channels() != geom.out_channels) throw ShapeError("dense conv bn channels");
  }
};

struct StrassenConvLayer {
  StrassenLayer spn;  // conv kind; bias and r-space BN live inside
  bool relu = true;
};

struct AvgPoolLayer {
  int64_t kernel_h = 0, kernel_w = 0;
  int64_t stride_h = 0, stride_w = 0;  // 0 means same as kernel
  int64_t sh() const { return stride_h > 0 ? stride_h : kernel_h; }
  int64_t sw() const { return stride_w > 0 ? stride_w : kernel_w; }
};

struct FlattenLayer {};

using Layer = std::variant<DenseConvLayer, StrassenConvLayer, AvgPoolLayer, FlattenLayer>;

struct DenseHead {
  Tensor W;     // [L, D]
  Tensor bias;  // [L] or empty
};

struct BonsaiHead {
  BonsaiTree tree;
};

using Head = std::variant<DenseHead, BonsaiHead>;

struct ModelQuant;  // fixed-point weights + formats; defined with the quantizer

struct HybridModel {
  std::string name = "model";
  std::vector<int64_t> input_shape;  // [C, H, W]
  int64_t num_classes = 0;
  std::vector<Layer> layers;
  Head head;
  std::shared_ptr<ModelQuant> quant;  // null for float models
};

// ---------------------------------------------------------------------------
// Shape chaining. Conv layers consume [C,H,W]; flatten moves to [D].

inline std::vector<int64_t> layer_output_shape(const Layer& layer,
                                               const std::vector<int64_t>& in) {
  if (const auto* d = std::get_if<DenseConvLayer>(&layer)) {
    if (in.size() != 3) throw ShapeError("conv layer needs [C,H,W] input");
    if (in[0] != d->geom.in_channels) throw ShapeError("conv layer channel mismatch");
    return {d->geom.out_channels, d->geom.out_h(in[1]), d->geom.out_w(in[2])};
  }
  if (const auto* s = std::get_if<StrassenConvLayer>(&layer)) {
    if (in.size() != 3) throw ShapeError("conv layer needs [C,H,W] input");
    if (in[0] != s->spn.geom.in_channels) throw ShapeError("conv layer channel mismatch");
    return {s->spn.geom.out_channels, s->spn.geom.out_h(in[1]), s->spn.geom.out_w(in[2])};
  }
  if (const auto* p = std::get_if<AvgPoolLayer>(&layer)) {
    if (in.size() != 3) throw ShapeError("pool layer needs [C,H,W] input");
    if (p->kernel_h <= 0 || p->kernel_w <= 0) throw ShapeError("pool kernel unset");
    if (in[1] < p->kernel_h || in[2] < p->kernel_w) throw ShapeError("pool kernel exceeds input");
    return {in[0], (in[1] - p->kernel_h) / p->sh() + 1, (in[2] - p->kernel_w) / p->sw() + 1};
  }
  // flatten
  return {numel(in)};
}

inline std::vector<std::vector<int64_t>> layer_shapes(const HybridModel& m) {
  std::vector<std::vector<int64_t>> shapes;
  shapes.push_back(m.input_shape);
  for (const Layer& l : m.layers) shapes.push_back(layer_output_shape(l, shapes.back()));
  return shapes;
}

inline int64_t head_input_dim(const HybridModel& m) {
  std::vector<int64_t> last = layer_shapes(m).back();
  return numel(last);
}

inline void validate_model(const HybridModel& m) {
  if (m.input_shape.size() != 3) throw ShapeError("model input shape must be [C,H,W]");
  if (m.num_classes <= 0) throw ShapeError("model needs a positive class count");
  for (const Layer& l : m.layers) {
    if (const auto* d = std::get_if<DenseConvLayer>(&l)) d->validate();
    if (const auto* s = std::get_if<StrassenConvLayer>(&l)) s->spn.validate();
  }
  int64_t D = head_input_dim(m);
  if (const auto* dh = std::get_if<DenseHead>(&m.head)) {
    if (dh->W.rank() != 2 || dh->W.dim(0) != m.num_classes || dh->W.dim(1) != D)
      throw ShapeError("dense head weight shape " + shape_str(dh->W.shape()));
  } else {
    const BonsaiTree& t = std::get<BonsaiHead>(m.head).tree;
    t.validate();
    if (t.dim_in != D) throw ShapeError("bonsai head D does not match flattened features");
    if (t.num_classes != m.num_classes) throw ShapeError("bonsai head class count");
  }
}

// ---------------------------------------------------------------------------
// Float forward for one sample [C,H,W] -> class scores [L]. With a counter
// attached the call also reports the op totals actually executed; this is the
// instrumented side of the analyzer cross-check. Counting strassen layers
// requires their inference form.

namespace detail {

inline void apply_relu(Tensor& t) {
  for (int64_t i = 0; i < t.size(); ++i)
    if (t[i] < 0) t[i] = 0;
}

inline Tensor dense_conv_eval(const DenseConvLayer& L, const Tensor& x, OpCounter* counter) {
  Tensor y = conv2d_ref(x, L.W, L.geom, counter);
  if (!L.bias.empty())
    for (int64_t c = 0; c < y.dim(0); ++c)
      for (int64_t i = 0; i < y.dim(1); ++i)
        for (int64_t j = 0; j < y.dim(2); ++j) y.at3(c, i, j) += L.bias[c];
  if (L.bn)
    for (int64_t c = 0; c < y.dim(0); ++c) {
      real s = L.bn->scale(c), t = L.bn->shift(c);
      for (int64_t i = 0; i < y.dim(1); ++i)
        for (int64_t j = 0; j < y.dim(2); ++j) y.at3(c, i, j) = s * y.at3(c, i, j) + t;
    }
  if (L.relu) apply_relu(y);
  return y;
}

inline Tensor strassen_conv_eval(const StrassenConvLayer& L, const Tensor& x, OpCounter* counter) {
  Tensor y;
  if (L.spn.inference_ready()) {
    y = spn_conv_forward(L.spn, x, counter);
  } else {
    if (counter) throw StateError("op counting requires inference-form strassen weights");
    Tensor cols = im2col(x, L.spn.geom);
    y = spn_shadow_apply_cols(L.spn, cols)
            .reshaped({L.spn.geom.out_channels, L.spn.geom.out_h(x.dim(1)),
                       L.spn.geom.out_w(x.dim(2))});
  }
  if (L.relu) apply_relu(y);
  return y;
}

inline Tensor avg_pool_eval(const AvgPoolLayer& L, const Tensor& x) {
  int64_t C = x.dim(0);
  int64_t OH = (x.dim(1) - L.kernel_h) / L.sh() + 1;
  int64_t OW = (x.dim(2) - L.kernel_w) / L.sw() + 1;
  Tensor y({C, OH, OW});
  real inv = 1.0 / static_cast<real>(L.kernel_h * L.kernel_w);
  for (int64_t c = 0; c < C; ++c)
    for (int64_t oy = 0; oy < OH; ++oy)
      for (int64_t ox = 0; ox < OW; ++ox) {
        real acc = 0.0;
        for (int64_t ky = 0; ky < L.kernel_h; ++ky)
          for (int64_t kx = 0; kx < L.kernel_w; ++kx)
            acc += x.at3(c, oy * L.sh() + ky, ox * L.sw() + kx);
        y.at3(c, oy, ox) = acc * inv;
      }
  return y;
}

}  // namespace detail

inline Tensor apply_head(const HybridModel& m, const Tensor& features, OpCounter* counter = nullptr,
                         PredictMode tree_mode = PredictMode::soft) {
  Tensor x = features.rank() == 1 ? features : features.reshaped({features.size()});
  if (const auto* dh = std::get_if<DenseHead>(&m.head)) {
    if (dh->W.dim(1) != x.size()) throw ShapeError("head input length");
    Tensor out({m.num_classes});
    for (int64_t l = 0; l < m.num_classes; ++l) {
      real acc = 0.0;
      for (int64_t d = 0; d < x.size(); ++d) acc += dh->W.at2(l, d) * x[d];
      out[l] = acc + (dh->bias.empty() ? 0.0 : dh->bias[l]);
    }
    if (counter) counter->macs += m.num_classes * x.size();
    return out;
  }
  return tree_predict(std::get<BonsaiHead>(m.head).tree, x, tree_mode, counter);
}

// Run layers [start, end) and the head on an intermediate activation; the
// quantizer uses this as the float continuation past its resolved prefix.
inline Tensor forward_from(const HybridModel& m, size_t start_layer, Tensor x,
                           OpCounter* counter = nullptr,
                           PredictMode tree_mode = PredictMode::soft) {
  for (size_t i = start_layer; i < m.layers.size(); ++i) {
    const Layer& l = m.layers[i];
    if (const auto* d = std::get_if<DenseConvLayer>(&l))
      x = detail::dense_conv_eval(*d, x, counter);
    else if (const auto* s = std::get_if<StrassenConvLayer>(&l))
      x = detail::strassen_conv_eval(*s, x, counter);
    else if (const auto* p = std::get_if<AvgPoolLayer>(&l))
      x = detail::avg_pool_eval(*p, x);
    else
      x = x.reshaped({x.size()});
  }
  return apply_head(m, x, counter, tree_mode);
}

inline Tensor forward(const HybridModel& m, const Tensor& input, OpCounter* counter = nullptr,
                      PredictMode tree_mode = PredictMode::soft) {
  if (input.shape() != m.input_shape)
    throw ShapeError("forward: input " + shape_str(input.shape()) + " vs model " +
                     shape_str(m.input_shape));
  return forward_from(m, 0, input, counter, tree_mode);
}

inline int64_t argmax(const Tensor& scores) {
  int64_t best = 0;
  for (int64_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;
  return best;
}

// ---------------------------------------------------------------------------
// Activation buffer chain, in execution order. Strassenified conv layers
// expose their r-channel intermediate as its own buffer; the memory footprint
// is the largest sum of two consecutive buffers.

enum class BufKind { input, strassen_mid, conv_out, pool_out, features, projected, scores };

struct BufferInfo {
  std::string name;
  BufKind kind = BufKind::conv_out;
  int64_t elements = 0;
  int layer_index = -1;                           // -1: input or head
  StrassenKind conv_kind = StrassenKind::matmul;  // for strassen_mid buffers
};

inline std::vector<BufferInfo> activation_chain(const HybridModel& m) {
  std::vector<BufferInfo> chain;
  std::vector<std::vector<int64_t>> shapes = layer_shapes(m);
  chain.push_back({"input", BufKind::input, numel(m.input_shape), -1, StrassenKind::matmul});
  for (size_t i = 0; i < m.layers.size(); ++i) {
    const Layer& l = m.layers[i];
    const std::vector<int64_t>& out = shapes[i + 1];
    std::string tag = "layer" + std::to_string(i);
    if (const auto* s = std::get_if<StrassenConvLayer>(&l)) {
      int64_t mid = s->spn.r * out[1] * out[2];
      chain.push_back({tag + ".mid", BufKind::strassen_mid, mid, static_cast<int>(i), s->spn.kind});
      chain.push_back({tag + ".out", BufKind::conv_out, numel(out), static_cast<int>(i),
                       s->spn.kind});
    } else if (std::holds_alternative<DenseConvLayer>(l)) {
      chain.push_back({tag + ".out", BufKind::conv_out, numel(out), static_cast<int>(i),
                       std::get<DenseConvLayer>(l).kind});
    } else if (std::holds_alternative<AvgPoolLayer>(l)) {
      chain.push_back({tag + ".out", BufKind::pool_out, numel(out), static_cast<int>(i),
                       StrassenKind::matmul});
    }
    // flatten is a view, not a buffer
  }
  if (std::holds_alternative<BonsaiHead>(m.head)) {
    const BonsaiTree& t = std::get<BonsaiHead>(m.head).tree;
    if (matrix_is_strassen(t.Z)) {
      const StrassenLayer& Z = std::get<StrassenLayer>(t.Z);
      chain.push_back({"head.z_mid", BufKind::strassen_mid, Z.r, -1, StrassenKind::matmul});
    }
    chain.push_back({"head.xhat", BufKind::projected, t.dim_proj, -1, StrassenKind::matmul});
  }
  chain.push_back({"scores", BufKind::scores, m.num_classes, -1, StrassenKind::matmul});
  return chain;
}

}  // namespace thn
