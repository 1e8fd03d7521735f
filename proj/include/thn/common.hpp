#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace thn {

// All in-memory arithmetic runs in double; tensors are snapped to the
// float32 grid at every serialization boundary so containers stay bit-stable.
using real = double;

// ---------------------------------------------------------------------------
// Error taxonomy. The CLI maps these onto exit codes (config 2, format 3,
// numeric 4); library code throws and never exits.

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct StateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct PolicyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Carries the byte offset of the defect when known (offset < 0 means unknown).
struct FormatError : std::runtime_error {
  long long offset = -1;
  explicit FormatError(const std::string& msg, long long off = -1)
      : std::runtime_error(off >= 0 ? msg + " (offset " + std::to_string(off) + ")" : msg),
        offset(off) {}
};

// ---------------------------------------------------------------------------
// Operation accounting.
//
// Convention: dense layers count fused multiply-accumulates (macs); ternary
// matrices count one add per coefficient touched (accumulators start at zero)
// and the elementwise products of an SPN count as muls. dense_estimate treats
// every ternary coefficient as nonzero, which is the pre-training planning
// figure; inference_nnz counts the trained sparsity.

enum class CountMode { inference_nnz, dense_estimate };

struct OpCounter {
  long long muls = 0;
  long long adds = 0;
  long long macs = 0;
  CountMode mode = CountMode::inference_nnz;

  long long ops() const { return muls + adds + macs; }
  void reset() { muls = adds = macs = 0; }
};

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 has a standard-mandated stream; the gaussian
// uses our own Box-Muller so results do not depend on the stdlib's
// distribution implementations.

class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // inclusive range
  int64_t uniform_int(int64_t lo, int64_t hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(gen_() % span);
  }

  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 1e-300) u1 = uniform();
    double u2 = uniform();
    double mag = std::sqrt(-2.0 * std::log(u1));
    double two_pi = 6.283185307179586476925286766559;
    spare_ = mag * std::sin(two_pi * u2);
    have_spare_ = true;
    return mag * std::cos(two_pi * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      int64_t j = uniform_int(0, i);
      std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
    }
  }

  uint64_t raw() { return gen_(); }

 private:
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace thn
