#pragma once

#include <cstring>
#include <fstream>
#include <sstream>

#include "thn/tensor.hpp"

namespace thn {

// Labeled 2-D feature maps (one channel), e.g. speech feature frames.
struct FeatureDataset {
  int64_t height = 0, width = 0;
  int64_t num_classes = 0;
  std::vector<Tensor> samples;  // each [1, H, W]
  std::vector<int> labels;

  int64_t size() const { return static_cast<int64_t>(samples.size()); }

  void validate() const {
    if (samples.size() != labels.size()) throw ShapeError("dataset sample/label count mismatch");
    for (const Tensor& s : samples)
      if (s.rank() != 3 || s.dim(0) != 1 || s.dim(1) != height || s.dim(2) != width)
        throw ShapeError("dataset sample shape " + shape_str(s.shape()));
    for (int l : labels)
      if (l < 0 || l >= num_classes) throw ShapeError("dataset label out of range");
  }
};

// ---------------------------------------------------------------------------
// Binary feature file. Little-endian layout:
//   magic "KWSF", version u16, N u32, H u16, W u16, L u16,
//   then N records of H*W float32 (row-major) followed by one label byte.

namespace io {

inline void put_u16(std::string& s, uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>(v >> 8));
}

inline void put_u32(std::string& s, uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& s, uint64_t v) {
  for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& s, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(s, bits);
}

// Cursor over a loaded file that reports the offset of any defect.
struct Reader {
  const uint8_t* p = nullptr;
  size_t len = 0;
  size_t pos = 0;

  void need(size_t n, const char* what) const {
    if (pos + n > len)
      throw FormatError(std::string("truncated ") + what, static_cast<long long>(pos));
  }
  uint8_t u8(const char* what) {
    need(1, what);
    return p[pos++];
  }
  uint16_t u16(const char* what) {
    need(2, what);
    uint16_t v = static_cast<uint16_t>(p[pos] | (p[pos + 1] << 8));
    pos += 2;
    return v;
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64(const char* what) {
    need(8, what);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  float f32(const char* what) {
    uint32_t bits = u32(what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::vector<uint8_t> bytes(size_t n, const char* what) {
    need(n, what);
    std::vector<uint8_t> out(p + pos, p + pos + n);
    pos += n;
    return out;
  }
};

inline std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return data;
}

inline void spit(const std::string& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path);
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw FormatError("short write to " + path);
}

}  // namespace io

inline void save_features(const FeatureDataset& d, const std::string& path) {
  d.validate();
  if (d.num_classes > 255) throw FormatError("feature file labels are one byte");
  std::string s;
  s += "KWSF";
  io::put_u16(s, 1);
  io::put_u32(s, static_cast<uint32_t>(d.size()));
  io::put_u16(s, static_cast<uint16_t>(d.height));
  io::put_u16(s, static_cast<uint16_t>(d.width));
  io::put_u16(s, static_cast<uint16_t>(d.num_classes));
  for (int64_t i = 0; i < d.size(); ++i) {
    const Tensor& t = d.samples[static_cast<size_t>(i)];
    for (int64_t j = 0; j < t.size(); ++j) io::put_f32(s, static_cast<float>(t[j]));
    s.push_back(static_cast<char>(d.labels[static_cast<size_t>(i)]));
  }
  io::spit(path, s);
}

inline FeatureDataset load_features(const std::string& path) {
  std::string data = io::slurp(path);
  io::Reader r{reinterpret_cast<const uint8_t*>(data.data()), data.size(), 0};
  r.need(4, "header");
  if (std::memcmp(r.p, "KWSF", 4) != 0) throw FormatError("bad feature file magic", 0);
  r.pos = 4;
  uint16_t version = r.u16("header");
  if (version != 1)
    throw FormatError("unsupported feature file version " + std::to_string(version), 4);
  FeatureDataset d;
  uint32_t n = r.u32("header");
  d.height = r.u16("header");
  d.width = r.u16("header");
  d.num_classes = r.u16("header");
  if (d.height == 0 || d.width == 0 || d.num_classes == 0)
    throw FormatError("zero dimension in feature file header", 10);
  d.samples.reserve(n);
  d.labels.reserve(n);
  for (uint32_t i = 0; i < n; ++i) {
    Tensor t({1, d.height, d.width});
    for (int64_t j = 0; j < t.size(); ++j) t[j] = static_cast<real>(r.f32("sample"));
    uint8_t lab = r.u8("label");
    if (lab >= d.num_classes)
      throw FormatError("label " + std::to_string(lab) + " out of range",
                        static_cast<long long>(r.pos) - 1);
    d.samples.push_back(std::move(t));
    d.labels.push_back(lab);
  }
  if (r.pos != r.len) throw FormatError("trailing bytes", static_cast<long long>(r.pos));
  return d;
}

// CSV import: one sample per row, "label,v0,v1,...,v(H*W-1)".
inline FeatureDataset import_csv(const std::string& path, int64_t H, int64_t W,
                                 int64_t num_classes) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path);
  FeatureDataset d;
  d.height = H;
  d.width = W;
  d.num_classes = num_classes;
  std::string line;
  int64_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    if (!std::getline(ls, cell, ',')) continue;
    int label = 0;
    try {
      label = std::stoi(cell);
    } catch (const std::exception&) {
      throw FormatError("row " + std::to_string(row) + ": bad label '" + cell + "'");
    }
    if (label < 0 || label >= num_classes)
      throw FormatError("row " + std::to_string(row) + ": label out of range");
    Tensor t({1, H, W});
    for (int64_t j = 0; j < H * W; ++j) {
      if (!std::getline(ls, cell, ','))
        throw FormatError("row " + std::to_string(row) + ": expected " + std::to_string(H * W) +
                          " values");
      try {
        t[j] = snap_f32(static_cast<real>(std::stod(cell)));
      } catch (const std::exception&) {
        throw FormatError("row " + std::to_string(row) + ": bad value '" + cell + "'");
      }
    }
    if (std::getline(ls, cell, ','))
      throw FormatError("row " + std::to_string(row) + ": too many values");
    d.samples.push_back(std::move(t));
    d.labels.push_back(label);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Synthetic task: each class is a smooth prototype pattern (a handful of
// low-frequency cosine modes, RMS-normalized) plus per-pixel gaussian noise
// scaled by `difficulty`. Same seed, same bytes.

struct GenConfig {
  int64_t classes = 12;
  int64_t per_class = 150;
  int64_t height = 49, width = 10;
  real difficulty = 1.0;
  uint64_t seed = 7;
};

inline std::vector<Tensor> class_prototypes(const GenConfig& cfg, Rng& rng) {
  std::vector<Tensor> protos;
  for (int64_t c = 0; c < cfg.classes; ++c) {
    Tensor p({1, cfg.height, cfg.width});
    const int modes = 6;
    for (int m = 0; m < modes; ++m) {
      real amp = rng.uniform(0.5, 1.0);
      int64_t fh = rng.uniform_int(0, 3);
      int64_t fw = rng.uniform_int(0, 3);
      if (fh == 0 && fw == 0) fh = 1;
      real phase = rng.uniform(0.0, 6.283185307179586);
      for (int64_t i = 0; i < cfg.height; ++i)
        for (int64_t j = 0; j < cfg.width; ++j)
          p.at3(0, i, j) += amp * std::cos(6.283185307179586 *
                                               (static_cast<real>(fh * i) / cfg.height +
                                                static_cast<real>(fw * j) / cfg.width) +
                                           phase);
    }
    real rms = 0.0;
    for (int64_t i = 0; i < p.size(); ++i) rms += p[i] * p[i];
    rms = std::sqrt(rms / static_cast<real>(p.size()));
    if (rms > 0)
      for (int64_t i = 0; i < p.size(); ++i) p[i] /= rms;
    protos.push_back(std::move(p));
  }
  return protos;
}

struct GeneratedData {
  FeatureDataset train, val, test;
  std::vector<Tensor> prototypes;
};

// Splits 80/10/10 per class, in generation order.
inline GeneratedData gen_data(const GenConfig& cfg) {
  if (cfg.classes < 2 || cfg.classes > 255) throw ConfigError("class count out of range");
  if (cfg.per_class < 10) throw ConfigError("need at least 10 samples per class");
  Rng rng(cfg.seed);
  GeneratedData out;
  out.prototypes = class_prototypes(cfg, rng);
  for (FeatureDataset* d : {&out.train, &out.val, &out.test}) {
    d->height = cfg.height;
    d->width = cfg.width;
    d->num_classes = cfg.classes;
  }
  int64_t n_val = cfg.per_class / 10;
  int64_t n_test = cfg.per_class / 10;
  int64_t n_train = cfg.per_class - n_val - n_test;
  for (int64_t c = 0; c < cfg.classes; ++c) {
    for (int64_t i = 0; i < cfg.per_class; ++i) {
      Tensor s({1, cfg.height, cfg.width});
      const Tensor& p = out.prototypes[static_cast<size_t>(c)];
      for (int64_t j = 0; j < s.size(); ++j)
        s[j] = snap_f32(p[j] + cfg.difficulty * rng.gaussian());
      FeatureDataset* d = i < n_train ? &out.train : (i < n_train + n_val ? &out.val : &out.test);
      d->samples.push_back(std::move(s));
      d->labels.push_back(static_cast<int>(c));
    }
  }
  return out;
}

}  // namespace thn
