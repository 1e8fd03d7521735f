#pragma once

#include <optional>

#include "thn/tensor.hpp"

namespace thn {

// Matrix over {-1, 0, +1}, bit-packed two bits per entry in one row-major
// stream: code 00 = 0, 01 = +1, 10 = -1, 11 = invalid (detectable
// corruption). Entry i lives at bits (2i mod 8) of byte floor(2i/8); the
// stream is padded to a byte boundary, so the packed length is
// ceil(rows*cols/4) bytes.
class TernaryMatrix {
 public:
  TernaryMatrix() = default;

  TernaryMatrix(int64_t rows, int64_t cols) : rows_(rows), cols_(cols) {
    if (rows <= 0 || cols <= 0) throw ShapeError("ternary matrix dims must be positive");
    packed_.assign(static_cast<size_t>(packed_size(rows, cols)), 0);
  }

  static int64_t packed_size(int64_t rows, int64_t cols) { return (rows * cols * 2 + 7) / 8; }

  template <typename SeqT>
  static TernaryMatrix from_values(int64_t rows, int64_t cols, const SeqT& values) {
    TernaryMatrix m(rows, cols);
    if (static_cast<int64_t>(values.size()) != rows * cols)
      throw ShapeError("ternary value count does not match dims");
    for (int64_t i = 0; i < rows * cols; ++i) {
      real v = static_cast<real>(values[static_cast<size_t>(i)]);
      if (v != -1.0 && v != 0.0 && v != 1.0)
        throw ShapeError("ternary matrix entry not in {-1,0,+1}");
      m.set_linear(i, static_cast<int>(v));
    }
    return m;
  }

  // base_offset feeds error reporting when the bytes come from a file.
  static TernaryMatrix from_packed(int64_t rows, int64_t cols, std::vector<uint8_t> bytes,
                                   long long base_offset = -1) {
    TernaryMatrix m(rows, cols);
    if (static_cast<int64_t>(bytes.size()) != packed_size(rows, cols))
      throw FormatError("packed ternary length " + std::to_string(bytes.size()) +
                            " does not match dims " + std::to_string(rows) + "x" +
                            std::to_string(cols),
                        base_offset);
    m.packed_ = std::move(bytes);
    int64_t n = rows * cols;
    for (int64_t i = 0; i < n; ++i) {
      int code = (m.packed_[static_cast<size_t>(i >> 2)] >> (2 * (i & 3))) & 3;
      if (code == 3)
        throw FormatError("invalid ternary code 0b11 at entry " + std::to_string(i),
                          base_offset < 0 ? -1 : base_offset + (i >> 2));
    }
    // trailing pad bits must be zero
    int64_t used = n * 2;
    if (used % 8 != 0) {
      uint8_t last = m.packed_.back();
      if ((last >> (used % 8)) != 0)
        throw FormatError("nonzero padding bits in packed ternary stream",
                          base_offset < 0 ? -1 : base_offset + static_cast<long long>(m.packed_.size()) - 1);
    }
    return m;
  }

  int64_t rows() const { return rows_; }
  int64_t cols() const { return cols_; }
  int64_t entries() const { return rows_ * cols_; }
  const std::vector<uint8_t>& packed() const { return packed_; }

  const std::optional<real>& scale() const { return scale_; }
  void set_scale(std::optional<real> s) { scale_ = s; }

  int get(int64_t r, int64_t c) const { return get_linear(r * cols_ + c); }

  int get_linear(int64_t i) const {
    int code = (packed_[static_cast<size_t>(i >> 2)] >> (2 * (i & 3))) & 3;
    return code == 2 ? -1 : code;
  }

  void set(int64_t r, int64_t c, int v) { set_linear(r * cols_ + c, v); }

  void set_linear(int64_t i, int v) {
    int code;
    if (v == 0)
      code = 0;
    else if (v == 1)
      code = 1;
    else if (v == -1)
      code = 2;
    else
      throw ShapeError("ternary entry must be -1, 0, or +1");
    size_t byte = static_cast<size_t>(i >> 2);
    int shift = 2 * (i & 3);
    packed_[byte] = static_cast<uint8_t>((packed_[byte] & ~(3 << shift)) | (code << shift));
  }

  int64_t nnz() const {
    int64_t n = 0;
    for (int64_t i = 0; i < entries(); ++i)
      if (get_linear(i) != 0) ++n;
    return n;
  }

  // y[r] = sum_c M[r,c] * x[c * x_stride]; adds are counted per coefficient
  // touched (all of them under dense_estimate). The optional scale multiplies
  // the result.
  void matvec(const real* x, int64_t x_stride, real* y, int64_t y_stride,
              OpCounter* counter = nullptr) const {
    for (int64_t r = 0; r < rows_; ++r) {
      real acc = 0.0;
      int64_t base = r * cols_;
      for (int64_t c = 0; c < cols_; ++c) {
        int t = get_linear(base + c);
        if (t == 1) {
          acc += x[c * x_stride];
          if (counter) ++counter->adds;
        } else if (t == -1) {
          acc -= x[c * x_stride];
          if (counter) ++counter->adds;
        } else if (counter && counter->mode == CountMode::dense_estimate) {
          ++counter->adds;
        }
      }
      if (scale_) acc *= *scale_;
      y[r * y_stride] = acc;
    }
  }

  // Y = M X for X [cols, n]; column-by-column matvec.
  Tensor matmat(const Tensor& X, OpCounter* counter = nullptr) const {
    if (X.rank() != 2 || X.dim(0) != cols_)
      throw ShapeError("ternary matmat: operand " + shape_str(X.shape()) + " vs cols " +
                       std::to_string(cols_));
    int64_t n = X.dim(1);
    Tensor Y({rows_, n});
    for (int64_t j = 0; j < n; ++j)
      matvec(X.data() + j, n, Y.data() + j, n, counter);
    return Y;
  }

  // Dense {-1,0,+1} pattern; the scale is not applied.
  Tensor dense() const {
    Tensor out({rows_, cols_});
    for (int64_t i = 0; i < entries(); ++i) out[i] = static_cast<real>(get_linear(i));
    return out;
  }

 private:
  int64_t rows_ = 0, cols_ = 0;
  std::vector<uint8_t> packed_;
  std::optional<real> scale_;
};

// Threshold ternarization: delta = 0.7 * mean|w|, entries with |w| > delta
// keep their sign, the scale is the mean magnitude of the surviving entries.
// If nothing survives the pattern is all zeros with scale 1.
inline void ternarize_values(const real* w, int64_t n, real* pattern_out, real& alpha_out) {
  if (n <= 0) throw ShapeError("ternarize: empty input");
  real mean_abs = 0.0;
  bool all_zero = true;
  for (int64_t i = 0; i < n; ++i) {
    mean_abs += std::abs(w[i]);
    if (w[i] != 0.0) all_zero = false;
  }
  if (all_zero) {
    for (int64_t i = 0; i < n; ++i) pattern_out[i] = 0.0;
    alpha_out = 1.0;
    return;
  }
  mean_abs /= static_cast<real>(n);
  real delta = 0.7 * mean_abs;
  real sum = 0.0;
  int64_t kept = 0;
  for (int64_t i = 0; i < n; ++i) {
    if (std::abs(w[i]) > delta) {
      pattern_out[i] = w[i] > 0 ? 1.0 : -1.0;
      sum += std::abs(w[i]);
      ++kept;
    } else {
      pattern_out[i] = 0.0;
    }
  }
  alpha_out = kept > 0 ? sum / static_cast<real>(kept) : 1.0;
}

// Tensor of any rank is treated as rows = dim(0), cols = rest.
inline TernaryMatrix ternarize(const Tensor& W) {
  if (W.rank() < 1 || W.size() == 0) throw ShapeError("ternarize: empty tensor");
  int64_t rows = W.rank() >= 2 ? W.dim(0) : 1;
  int64_t cols = W.size() / std::max<int64_t>(rows, 1);
  std::vector<real> pattern(static_cast<size_t>(W.size()));
  real alpha = 1.0;
  ternarize_values(W.data(), W.size(), pattern.data(), alpha);
  TernaryMatrix m = TernaryMatrix::from_values(rows, cols, pattern);
  m.set_scale(alpha);
  return m;
}

}  // namespace thn
