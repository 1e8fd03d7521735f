#pragma once

#include <algorithm>
#include <cfenv>
#include <cmath>
#include <cstring>
#include <numeric>
#include <optional>
#include <sstream>

#include "thn/common.hpp"

namespace thn {

inline int64_t numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

// Row-major dense tensor of doubles. Value semantics throughout; at desk
// scale copies are cheap and keep ownership questions out of the picture.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int64_t> shape)
      : shape_(std::move(shape)), data_(static_cast<size_t>(check_shape(shape_)), 0.0) {}

  Tensor(std::vector<int64_t> shape, std::vector<real> data) : shape_(std::move(shape)) {
    if (check_shape(shape_) != static_cast<int64_t>(data.size()))
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape_));
    data_ = std::move(data);
  }

  static Tensor scalar(real v) { return Tensor({1}, {v}); }

  bool empty() const { return data_.empty(); }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }

  real* data() { return data_.data(); }
  const real* data() const { return data_.data(); }
  std::vector<real>& vec() { return data_; }
  const std::vector<real>& vec() const { return data_; }

  real& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  real operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  real& at2(int64_t i, int64_t j) { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  real at2(int64_t i, int64_t j) const { return data_[static_cast<size_t>(i * shape_[1] + j)]; }

  real& at3(int64_t c, int64_t i, int64_t j) {
    return data_[static_cast<size_t>((c * shape_[1] + i) * shape_[2] + j)];
  }
  real at3(int64_t c, int64_t i, int64_t j) const {
    return data_[static_cast<size_t>((c * shape_[1] + i) * shape_[2] + j)];
  }

  real& at4(int64_t n, int64_t c, int64_t i, int64_t j) {
    return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + i) * shape_[3] + j)];
  }
  real at4(int64_t n, int64_t c, int64_t i, int64_t j) const {
    return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + i) * shape_[3] + j)];
  }

  Tensor reshaped(std::vector<int64_t> new_shape) const {
    if (numel(new_shape) != size())
      throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(new_shape));
    return Tensor(std::move(new_shape), data_);
  }

  void fill(real v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

 private:
  static int64_t check_shape(const std::vector<int64_t>& s) {
    for (int64_t d : s)
      if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(s));
    return numel(s);
  }

  std::vector<int64_t> shape_;
  std::vector<real> data_;
};

// Snap every element to the nearest float32; containers store float32 and
// keeping in-memory weights on that grid makes save/load round trips exact.
inline void snap_f32(Tensor& t) {
  for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<real>(static_cast<float>(t[i]));
}

inline real snap_f32(real v) { return static_cast<real>(static_cast<float>(v)); }

// ---------------------------------------------------------------------------
// Fixed point. Symmetric two's-complement with a power-of-two scale:
// real value = code * 2^-frac_bits, code in [-2^(bits-1), 2^(bits-1)-1].

struct QFormat {
  int total_bits = 8;
  int frac_bits = 0;

  void validate() const {
    if (total_bits != 8 && total_bits != 16 && total_bits != 32)
      throw ConfigError("unsupported fixed-point width " + std::to_string(total_bits));
    if (frac_bits < 0 || frac_bits >= total_bits)
      throw ConfigError("frac_bits " + std::to_string(frac_bits) + " out of range for " +
                        std::to_string(total_bits) + "-bit format");
  }

  int32_t qmin() const { return total_bits == 32 ? INT32_MIN : -(1 << (total_bits - 1)); }
  int32_t qmax() const {
    return total_bits == 32 ? INT32_MAX : (1 << (total_bits - 1)) - 1;
  }
  real step() const { return std::ldexp(1.0, -frac_bits); }

  bool operator==(const QFormat& o) const {
    return total_bits == o.total_bits && frac_bits == o.frac_bits;
  }
};

struct QTensor {
  QFormat fmt;
  std::vector<int64_t> shape;
  std::vector<int32_t> code;

  int64_t size() const { return static_cast<int64_t>(code.size()); }
};

inline int32_t saturate32(int64_t v) {
  if (v > INT32_MAX) return INT32_MAX;
  if (v < INT32_MIN) return INT32_MIN;
  return static_cast<int32_t>(v);
}

inline int32_t saturate(int64_t v, const QFormat& q) {
  if (v > q.qmax()) return q.qmax();
  if (v < q.qmin()) return q.qmin();
  return static_cast<int32_t>(v);
}

// Round to nearest, ties to even, then saturate.
inline int32_t fx_quantize_value(real x, const QFormat& q) {
  real scaled = std::ldexp(x, q.frac_bits);
  real r = std::nearbyint(scaled);  // FE_TONEAREST default: ties to even
  if (r > static_cast<real>(q.qmax())) return q.qmax();
  if (r < static_cast<real>(q.qmin())) return q.qmin();
  return static_cast<int32_t>(r);
}

inline QTensor fx_quantize(const Tensor& t, QFormat q) {
  q.validate();
  QTensor out;
  out.fmt = q;
  out.shape = t.shape();
  out.code.resize(static_cast<size_t>(t.size()));
  for (int64_t i = 0; i < t.size(); ++i) out.code[static_cast<size_t>(i)] = fx_quantize_value(t[i], q);
  return out;
}

inline Tensor fx_dequantize(const QTensor& t) {
  Tensor out(t.shape);
  real s = t.fmt.step();
  for (int64_t i = 0; i < out.size(); ++i) out[i] = s * static_cast<real>(t.code[static_cast<size_t>(i)]);
  return out;
}

// Shift a code from frac f_from to frac f_to with round-to-nearest-even on
// right shifts. Used by the fixed-point executor when aligning scales.
inline int64_t rescale_code(int64_t v, int f_from, int f_to) {
  if (f_to >= f_from) return v << (f_to - f_from);
  int sh = f_from - f_to;
  int64_t unit = int64_t{1} << sh;
  int64_t half = unit >> 1;
  int64_t q = v >> sh;       // floor
  int64_t rem = v - (q << sh);
  if (rem > half || (rem == half && (q & 1))) ++q;
  return q;
}

// ---------------------------------------------------------------------------
// Convolution geometry. Output size uses the floor convention:
// out = floor((in + 2*pad - kernel) / stride) + 1.

struct ConvGeometry {
  int64_t kernel_h = 1, kernel_w = 1;
  int64_t stride_h = 1, stride_w = 1;
  int64_t pad_h = 0, pad_w = 0;
  int64_t in_channels = 0, out_channels = 0;
  bool depthwise = false;

  void validate() const {
    if (kernel_h <= 0 || kernel_w <= 0 || stride_h <= 0 || stride_w <= 0)
      throw ShapeError("conv geometry: kernel and stride must be positive");
    if (pad_h < 0 || pad_w < 0) throw ShapeError("conv geometry: negative padding");
    if (in_channels <= 0 || out_channels <= 0)
      throw ShapeError("conv geometry: channel counts must be positive");
    if (depthwise && out_channels % in_channels != 0)
      throw ShapeError("depthwise conv: out_channels must be a multiple of in_channels");
  }

  int64_t multiplier() const { return depthwise ? out_channels / in_channels : 1; }
  int64_t in_channels_per_group() const { return depthwise ? 1 : in_channels; }

  int64_t out_h(int64_t in_h) const {
    int64_t v = (in_h + 2 * pad_h - kernel_h) / stride_h + 1;
    if (in_h + 2 * pad_h < kernel_h) throw ShapeError("conv kernel taller than padded input");
    return v;
  }
  int64_t out_w(int64_t in_w) const {
    int64_t v = (in_w + 2 * pad_w - kernel_w) / stride_w + 1;
    if (in_w + 2 * pad_w < kernel_w) throw ShapeError("conv kernel wider than padded input");
    return v;
  }

  // Patch length seen by an SPN replacing this layer: the full receptive
  // field, independent of grouping.
  int64_t patch_len() const { return in_channels * kernel_h * kernel_w; }
};

// ---------------------------------------------------------------------------
// Reference kernels. These are the semantic ground truth for everything else
// in the library; instrumented counts are incremented inside the loops so the
// reported figures are what actually executed.

// C[n,m] = sum_k A[n,k] B[k,m]
inline Tensor matmul_ref(const Tensor& A, const Tensor& B, OpCounter* counter = nullptr) {
  if (A.rank() != 2 || B.rank() != 2) throw ShapeError("matmul_ref expects rank-2 operands");
  if (A.dim(1) != B.dim(0))
    throw ShapeError("matmul_ref inner dims " + shape_str(A.shape()) + " vs " + shape_str(B.shape()));
  int64_t n = A.dim(0), k = A.dim(1), m = B.dim(1);
  Tensor C({n, m});
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t p = 0; p < k; ++p) {
      real a = A.at2(i, p);
      for (int64_t j = 0; j < m; ++j) C.at2(i, j) += a * B.at2(p, j);
    }
  }
  if (counter) counter->macs += n * k * m;
  return C;
}

// input [C,H,W], filters [C_out, C_in_per_group, kh, kw] -> [C_out, OH, OW].
// Padding taps read zero and still count: the MAC total is the analytic
// positions * kernel * channels figure.
inline Tensor conv2d_ref(const Tensor& input, const Tensor& filters, const ConvGeometry& g,
                         OpCounter* counter = nullptr) {
  g.validate();
  if (input.rank() != 3) throw ShapeError("conv2d_ref expects input [C,H,W]");
  if (input.dim(0) != g.in_channels)
    throw ShapeError("conv2d_ref: input channels " + std::to_string(input.dim(0)) +
                     " != geometry in_channels " + std::to_string(g.in_channels));
  if (filters.rank() != 4 || filters.dim(0) != g.out_channels ||
      filters.dim(1) != g.in_channels_per_group() || filters.dim(2) != g.kernel_h ||
      filters.dim(3) != g.kernel_w)
    throw ShapeError("conv2d_ref: filter shape " + shape_str(filters.shape()) +
                     " does not match geometry");

  int64_t H = input.dim(1), W = input.dim(2);
  int64_t OH = g.out_h(H), OW = g.out_w(W);
  int64_t mult = g.multiplier();
  Tensor out({g.out_channels, OH, OW});
  long long macs = 0;
  for (int64_t oc = 0; oc < g.out_channels; ++oc) {
    int64_t ic0 = g.depthwise ? oc / mult : 0;
    int64_t ic1 = g.depthwise ? ic0 + 1 : g.in_channels;
    for (int64_t oy = 0; oy < OH; ++oy) {
      for (int64_t ox = 0; ox < OW; ++ox) {
        real acc = 0.0;
        for (int64_t ic = ic0; ic < ic1; ++ic) {
          for (int64_t ky = 0; ky < g.kernel_h; ++ky) {
            int64_t iy = oy * g.stride_h - g.pad_h + ky;
            for (int64_t kx = 0; kx < g.kernel_w; ++kx) {
              int64_t ix = ox * g.stride_w - g.pad_w + kx;
              real v = 0.0;
              if (iy >= 0 && iy < H && ix >= 0 && ix < W) v = input.at3(ic, iy, ix);
              acc += v * filters.at4(oc, ic - ic0, ky, kx);
              ++macs;
            }
          }
        }
        out.at3(oc, oy, ox) = acc;
      }
    }
  }
  if (counter) counter->macs += macs;
  return out;
}

// Patch matrix [C*kh*kw, OH*OW]; row index is (c*kh + ky)*kw + kx, columns in
// row-major output order. This layout is the contract between strassen W_b
// matrices and their reshaped conv-filter form.
inline Tensor im2col(const Tensor& input, const ConvGeometry& g) {
  if (input.rank() != 3) throw ShapeError("im2col expects input [C,H,W]");
  if (input.dim(0) != g.in_channels) throw ShapeError("im2col: channel mismatch");
  int64_t H = input.dim(1), W = input.dim(2);
  int64_t OH = g.out_h(H), OW = g.out_w(W);
  int64_t rows = g.patch_len(), cols = OH * OW;
  Tensor out({rows, cols});
  for (int64_t c = 0; c < g.in_channels; ++c) {
    for (int64_t ky = 0; ky < g.kernel_h; ++ky) {
      for (int64_t kx = 0; kx < g.kernel_w; ++kx) {
        int64_t r = (c * g.kernel_h + ky) * g.kernel_w + kx;
        for (int64_t oy = 0; oy < OH; ++oy) {
          int64_t iy = oy * g.stride_h - g.pad_h + ky;
          for (int64_t ox = 0; ox < OW; ++ox) {
            int64_t ix = ox * g.stride_w - g.pad_w + kx;
            real v = 0.0;
            if (iy >= 0 && iy < H && ix >= 0 && ix < W) v = input.at3(c, iy, ix);
            out.at2(r, oy * OW + ox) = v;
          }
        }
      }
    }
  }
  return out;
}

// Batch-norm parameter bundle; `apply` is the inference transform.
struct BatchNorm {
  Tensor gamma, beta, mean, var;
  real eps = 1e-5;

  int64_t channels() const { return gamma.size(); }

  void validate() const {
    if (gamma.size() != beta.size() || gamma.size() != mean.size() || gamma.size() != var.size())
      throw ShapeError("batch norm parameter lengths disagree");
  }

  real scale(int64_t c) const { return gamma[c] / std::sqrt(var[c] + eps); }
  real shift(int64_t c) const { return beta[c] - mean[c] * scale(c); }
};

}  // namespace thn
