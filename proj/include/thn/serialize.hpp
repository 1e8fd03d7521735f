#pragma once

// Model container. One file holds three sections:
//
//   magic "THNT" | version u16 | section count u16
//   table: per section, tag char[4] | offset u64 | size u64
//
//   ARCH  the architecture text (see arch.hpp), reparsed on load
//   TENS  named tensor blobs: every float tensor, packed ternary matrix,
//         and training shadow the model carries
//   QSPC  fixed-point policy, per-slot formats, and integer weight codes
//         (present only for quantized models)
//
// Tensor blob: name (u16 length + bytes) | elem kind u8 | rank u8 |
// dims u32 x rank | payload. Kinds: 0 = f32, 1 = packed ternary,
// 2/3/4 = fixed-point 8/16/32. Everything is little-endian. Ternary
// payloads carry an optional scale so pre-collapse matrices round-trip.
//
// A load reconstructs the skeleton from ARCH, then fills every tensor from
// TENS by name; missing, extra, or misshapen tensors are format errors with
// the failing file offset.

#include <map>
#include <set>
#include <string>
#include <vector>

#include "thn/arch.hpp"
#include "thn/dataset.hpp"
#include "thn/quantize.hpp"

namespace thn {

// ---------------------------------------------------------------------------
// Structural spec of an existing model (inverse of materialize, minus the
// random numbers). Serialization rebuilds layers from this text.

inline ArchSpec arch_of(const HybridModel& m) {
  validate_model(m);
  ArchSpec a;
  a.name = m.name;
  a.input_shape = m.input_shape;
  a.num_classes = m.num_classes;
  for (const Layer& l : m.layers) {
    if (const auto* d = std::get_if<DenseConvLayer>(&l)) {
      ConvSpec s;
      s.kind = d->kind;
      const ConvGeometry& g = d->geom;
      s.out_channels = g.depthwise ? g.multiplier() : g.out_channels;
      s.kernel_h = g.kernel_h;
      s.kernel_w = g.kernel_w;
      s.stride_h = g.stride_h;
      s.stride_w = g.stride_w;
      s.pad_h = g.pad_h;
      s.pad_w = g.pad_w;
      s.bn = d->bn.has_value();
      s.relu = d->relu;
      s.bias = !d->bias.empty();
      // a strided or padded 1x1 is not expressible as pw_conv; relabel
      if (s.kind == StrassenKind::conv_pointwise &&
          (s.kernel_h != 1 || s.kernel_w != 1 || s.stride_h != 1 || s.stride_w != 1 ||
           s.pad_h != 0 || s.pad_w != 0))
        s.kind = StrassenKind::conv_standard;
      a.layers.emplace_back(s);
    } else if (const auto* sc = std::get_if<StrassenConvLayer>(&l)) {
      ConvSpec s;
      s.kind = sc->spn.kind;
      const ConvGeometry& g = sc->spn.geom;
      s.out_channels = g.depthwise ? g.multiplier() : g.out_channels;
      s.kernel_h = g.kernel_h;
      s.kernel_w = g.kernel_w;
      s.stride_h = g.stride_h;
      s.stride_w = g.stride_w;
      s.pad_h = g.pad_h;
      s.pad_w = g.pad_w;
      s.spn = true;
      s.r = sc->spn.r;
      s.bn = sc->spn.bn.has_value();
      s.relu = sc->relu;
      s.bias = !sc->spn.bias.empty();
      if (s.kind == StrassenKind::conv_pointwise &&
          (s.kernel_h != 1 || s.kernel_w != 1 || s.stride_h != 1 || s.stride_w != 1 ||
           s.pad_h != 0 || s.pad_w != 0))
        s.kind = StrassenKind::conv_standard;
      a.layers.emplace_back(s);
    } else if (const auto* p = std::get_if<AvgPoolLayer>(&l)) {
      PoolSpec s;
      s.kernel_h = p->kernel_h;
      s.kernel_w = p->kernel_w;
      s.stride_h = p->stride_h;
      s.stride_w = p->stride_w;
      a.layers.emplace_back(s);
    } else {
      a.layers.emplace_back(FlattenSpec{});
    }
  }
  if (const auto* dh = std::get_if<DenseHead>(&m.head)) {
    a.head.bonsai = false;
    a.head.bias = !dh->bias.empty();
  } else {
    const BonsaiTree& t = std::get<BonsaiHead>(m.head).tree;
    a.head.bonsai = true;
    a.head.depth = t.depth;
    a.head.proj = t.dim_proj;
    a.head.sigma = t.sigma;
    a.head.sigma_i = t.sigma_i;
    bool z_spn = matrix_is_strassen(t.Z);
    for (const BonsaiNode& n : t.nodes)
      if (matrix_is_strassen(n.W) != z_spn || matrix_is_strassen(n.V) != z_spn)
        throw ConfigError("tree mixes dense and strassen matrices; not serializable");
    a.head.spn = z_spn;
    if (z_spn) a.head.r = std::get<StrassenLayer>(t.Z).r;
  }
  return a;
}

// ---------------------------------------------------------------------------
// Blob codec.

namespace tens {

enum Kind : uint8_t { f32 = 0, ternary = 1, fx8 = 2, fx16 = 3, fx32 = 4 };

inline void put_name(std::string& out, const std::string& name) {
  if (name.size() > 0xffff) throw FormatError("tensor name too long");
  io::put_u16(out, static_cast<uint16_t>(name.size()));
  out += name;
}

inline std::string read_name(io::Reader& r) {
  uint16_t n = r.u16("tensor name length");
  std::vector<uint8_t> b = r.bytes(n, "tensor name");
  return std::string(b.begin(), b.end());
}

inline void put_dims(std::string& out, const std::vector<int64_t>& dims) {
  if (dims.size() > 0xff) throw FormatError("tensor rank too large");
  out.push_back(static_cast<char>(dims.size()));
  for (int64_t d : dims) {
    if (d <= 0 || d > 0xffffffffLL) throw FormatError("tensor dim out of range");
    io::put_u32(out, static_cast<uint32_t>(d));
  }
}

inline std::vector<int64_t> read_dims(io::Reader& r) {
  uint8_t rank = r.u8("tensor rank");
  std::vector<int64_t> dims;
  for (int i = 0; i < rank; ++i) {
    uint32_t d = r.u32("tensor dim");
    if (d == 0) throw FormatError("zero tensor dim", static_cast<long long>(r.pos) - 4);
    dims.push_back(d);
  }
  return dims;
}

inline void put_float_tensor(std::string& out, const std::string& name, const Tensor& t) {
  put_name(out, name);
  out.push_back(static_cast<char>(f32));
  put_dims(out, t.shape());
  for (int64_t i = 0; i < t.size(); ++i) io::put_f32(out, static_cast<float>(t[i]));
}

inline void put_ternary(std::string& out, const std::string& name, const TernaryMatrix& t) {
  put_name(out, name);
  out.push_back(static_cast<char>(ternary));
  put_dims(out, {t.rows(), t.cols()});
  out.push_back(t.scale() ? 1 : 0);
  if (t.scale()) io::put_f32(out, static_cast<float>(*t.scale()));
  out.append(reinterpret_cast<const char*>(t.packed().data()), t.packed().size());
}

}  // namespace tens

// ---------------------------------------------------------------------------
// Save.

namespace detail {

// Walks every tensor the model owns in one canonical order. The same order
// produces the TENS section and drives the load-side fill.
template <typename FloatFn, typename TernFn>
void visit_tensors(const HybridModel& m, FloatFn on_float, TernFn on_tern) {
  auto strassen = [&](const std::string& p, const StrassenLayer& S) {
    if (S.Wb) on_tern(p + ".Wb", *S.Wb);
    if (S.Wc) on_tern(p + ".Wc", *S.Wc);
    if (S.a_hat) on_float(p + ".a_hat", *S.a_hat);
    if (!S.bias.empty()) on_float(p + ".bias", S.bias);
    if (S.bn) {
      on_float(p + ".bn.gamma", S.bn->gamma);
      on_float(p + ".bn.beta", S.bn->beta);
      on_float(p + ".bn.mean", S.bn->mean);
      on_float(p + ".bn.var", S.bn->var);
    }
    if (S.shadow) {
      on_float(p + ".shadow.Wa", S.shadow->Wa);
      on_float(p + ".shadow.vecA", S.shadow->vecA);
      on_float(p + ".shadow.Wb", S.shadow->Wb);
      on_float(p + ".shadow.Wc", S.shadow->Wc);
    }
  };
  for (size_t i = 0; i < m.layers.size(); ++i) {
    std::string lp = qslot::layer_prefix(i);
    if (const auto* d = std::get_if<DenseConvLayer>(&m.layers[i])) {
      on_float(lp + ".W", d->W);
      if (!d->bias.empty()) on_float(lp + ".bias", d->bias);
      if (d->bn) {
        on_float(lp + ".bn.gamma", d->bn->gamma);
        on_float(lp + ".bn.beta", d->bn->beta);
        on_float(lp + ".bn.mean", d->bn->mean);
        on_float(lp + ".bn.var", d->bn->var);
      }
    } else if (const auto* s = std::get_if<StrassenConvLayer>(&m.layers[i])) {
      strassen(lp, s->spn);
    }
  }
  if (const auto* dh = std::get_if<DenseHead>(&m.head)) {
    on_float("head.W", dh->W);
    if (!dh->bias.empty()) on_float("head.bias", dh->bias);
  } else {
    const BonsaiTree& t = std::get<BonsaiHead>(m.head).tree;
    auto matrix = [&](const std::string& name, const BonsaiMatrix& bm) {
      if (const Tensor* W = std::get_if<Tensor>(&bm))
        on_float(name, *W);
      else
        strassen(name, std::get<StrassenLayer>(bm));
    };
    matrix("head.Z", t.Z);
    for (int64_t k = 0; k < t.node_count(); ++k) {
      std::string np = qslot::node_prefix(k);
      const BonsaiNode& n = t.nodes[static_cast<size_t>(k)];
      matrix(np + ".W", n.W);
      matrix(np + ".V", n.V);
      if (t.is_internal(k)) on_float(np + ".theta", n.theta);
    }
  }
}

}  // namespace detail

inline std::string model_to_bytes(const HybridModel& m) {
  std::string arch = serialize_arch(arch_of(m));

  std::string tens_body;
  uint32_t tens_count = 0;
  std::string entries;
  detail::visit_tensors(
      m,
      [&](const std::string& name, const Tensor& t) {
        tens::put_float_tensor(entries, name, t);
        ++tens_count;
      },
      [&](const std::string& name, const TernaryMatrix& t) {
        tens::put_ternary(entries, name, t);
        ++tens_count;
      });
  io::put_u32(tens_body, tens_count);
  tens_body += entries;

  std::string qspc;
  if (m.quant) {
    m.quant->policy.validate();
    tens::put_name(qspc, m.quant->policy.name);
    for (int b : {m.quant->policy.weight_bits, m.quant->policy.a_hat_bits,
                  m.quant->policy.act_bits, m.quant->policy.mid_bits, m.quant->policy.bias_bits})
      qspc.push_back(static_cast<char>(b));
    io::put_u32(qspc, static_cast<uint32_t>(m.quant->fmts.size()));
    for (const auto& [name, fmt] : m.quant->fmts) {
      tens::put_name(qspc, name);
      qspc.push_back(static_cast<char>(fmt.total_bits));
      qspc.push_back(static_cast<char>(fmt.frac_bits));
    }
    io::put_u32(qspc, static_cast<uint32_t>(m.quant->codes.size()));
    for (const auto& [name, qt] : m.quant->codes) {
      tens::put_name(qspc, name);
      qspc.push_back(static_cast<char>(qt.fmt.frac_bits));
      qspc.push_back(static_cast<char>(qt.fmt.total_bits == 8    ? tens::fx8
                                       : qt.fmt.total_bits == 16 ? tens::fx16
                                                                 : tens::fx32));
      tens::put_dims(qspc, qt.shape);
      int bytes = qt.fmt.total_bits / 8;
      for (int32_t code : qt.code)
        for (int b = 0; b < bytes; ++b)
          qspc.push_back(static_cast<char>((static_cast<uint32_t>(code) >> (8 * b)) & 0xff));
    }
  }

  std::vector<std::pair<const char*, const std::string*>> sections = {{"ARCH", &arch},
                                                                      {"TENS", &tens_body}};
  if (m.quant) sections.push_back({"QSPC", &qspc});

  std::string out = "THNT";
  io::put_u16(out, 1);  // container version
  io::put_u16(out, static_cast<uint16_t>(sections.size()));
  size_t table_at = out.size();
  for (size_t i = 0; i < sections.size(); ++i) {
    out += sections[i].first;
    io::put_u64(out, 0);  // offset patched below
    io::put_u64(out, sections[i].second->size());
  }
  for (size_t i = 0; i < sections.size(); ++i) {
    uint64_t off = out.size();
    for (int b = 0; b < 8; ++b)
      out[table_at + i * 20 + 4 + b] = static_cast<char>((off >> (8 * b)) & 0xff);
    out += *sections[i].second;
  }
  return out;
}

inline void save_model(const HybridModel& m, const std::string& path) {
  io::spit(path, model_to_bytes(m));
}

// ---------------------------------------------------------------------------
// Load.

namespace detail {

struct TensEntry {
  uint8_t kind = 0;
  std::vector<int64_t> dims;
  Tensor value;                // kind f32
  TernaryMatrix tern;          // kind ternary
  long long offset = -1;       // payload start, for error reporting
  bool used = false;
};

inline std::map<std::string, TensEntry> read_tens(io::Reader& r, size_t section_end) {
  std::map<std::string, TensEntry> out;
  uint32_t count = r.u32("tensor count");
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = tens::read_name(r);
    if (out.count(name))
      throw FormatError("duplicate tensor '" + name + "'", static_cast<long long>(r.pos));
    TensEntry e;
    e.kind = r.u8("tensor elem kind");
    e.dims = tens::read_dims(r);
    e.offset = static_cast<long long>(r.pos);
    int64_t n = 1;
    for (int64_t d : e.dims) n *= d;
    if (e.kind == tens::f32) {
      e.value = Tensor(e.dims);
      for (int64_t j = 0; j < n; ++j) e.value[j] = r.f32("tensor payload");
    } else if (e.kind == tens::ternary) {
      if (e.dims.size() != 2)
        throw FormatError("ternary tensor '" + name + "' must be rank 2", e.offset);
      bool has_scale = r.u8("ternary scale flag") != 0;
      std::optional<real> scale;
      if (has_scale) scale = r.f32("ternary scale");
      long long payload_at = static_cast<long long>(r.pos);
      std::vector<uint8_t> packed =
          r.bytes(static_cast<size_t>(TernaryMatrix::packed_size(e.dims[0], e.dims[1])),
                  "ternary payload");
      e.tern = TernaryMatrix::from_packed(e.dims[0], e.dims[1], std::move(packed), payload_at);
      e.tern.set_scale(scale);
    } else {
      throw FormatError("weight section holds kind " + std::to_string(e.kind) +
                            " for '" + name + "'; only f32 and ternary belong here",
                        e.offset);
    }
    out.emplace(std::move(name), std::move(e));
  }
  if (r.pos != section_end)
    throw FormatError("weight section has trailing bytes", static_cast<long long>(r.pos));
  return out;
}

struct TensFill {
  std::map<std::string, TensEntry> entries;

  TensEntry& take(const std::string& name, uint8_t kind) {
    auto it = entries.find(name);
    if (it == entries.end()) throw FormatError("model is missing tensor '" + name + "'");
    if (it->second.used) throw FormatError("tensor '" + name + "' consumed twice");
    if (it->second.kind != kind)
      throw FormatError("tensor '" + name + "' has the wrong element kind", it->second.offset);
    it->second.used = true;
    return it->second;
  }

  void fill_float(const std::string& name, Tensor& dst) {
    TensEntry& e = take(name, tens::f32);
    if (e.dims != dst.shape())
      throw FormatError("tensor '" + name + "' shape " + shape_str(e.dims) +
                            " does not match the architecture's " + shape_str(dst.shape()),
                        e.offset);
    dst = std::move(e.value);
  }

  void fill_tern(const std::string& name, TernaryMatrix& dst, int64_t rows, int64_t cols) {
    TensEntry& e = take(name, tens::ternary);
    if (e.dims[0] != rows || e.dims[1] != cols)
      throw FormatError("tensor '" + name + "' shape " + shape_str(e.dims) +
                            " does not match the architecture's [" + std::to_string(rows) + "," +
                            std::to_string(cols) + "]",
                        e.offset);
    dst = std::move(e.tern);
  }

  bool has(const std::string& name) const { return entries.count(name) != 0; }

  void finish() const {
    for (const auto& [name, e] : entries)
      if (!e.used) throw FormatError("unexpected tensor '" + name + "'", e.offset);
  }
};

// One strassen map: shadow form when the file carries shadows, inference
// form when it carries the ternary pair.
inline void fill_strassen(TensFill& f, const std::string& p, StrassenLayer& S) {
  bool inference = f.has(p + ".Wb");
  bool shadow = f.has(p + ".shadow.Wa");
  if (inference && shadow)
    throw FormatError("'" + p + "' carries both collapsed weights and training shadows");
  if (!inference && !shadow)
    throw FormatError("'" + p + "' has neither collapsed weights nor training shadows");
  if (inference) {
    TernaryMatrix wb, wc;
    f.fill_tern(p + ".Wb", wb, S.r, S.fan_in);
    f.fill_tern(p + ".Wc", wc, S.fan_out, S.r);
    S.Wb = std::move(wb);
    S.Wc = std::move(wc);
    Tensor a({S.r});
    f.fill_float(p + ".a_hat", a);
    S.a_hat = std::move(a);
    S.shadow.reset();
  } else {
    f.fill_float(p + ".shadow.Wa", S.shadow->Wa);
    f.fill_float(p + ".shadow.vecA", S.shadow->vecA);
    f.fill_float(p + ".shadow.Wb", S.shadow->Wb);
    f.fill_float(p + ".shadow.Wc", S.shadow->Wc);
    S.Wb.reset();
    S.Wc.reset();
    S.a_hat.reset();
  }
  if (!S.bias.empty()) f.fill_float(p + ".bias", S.bias);
  if (S.bn) {
    f.fill_float(p + ".bn.gamma", S.bn->gamma);
    f.fill_float(p + ".bn.beta", S.bn->beta);
    f.fill_float(p + ".bn.mean", S.bn->mean);
    f.fill_float(p + ".bn.var", S.bn->var);
  }
}

}  // namespace detail

inline HybridModel model_from_bytes(const std::string& data) {
  io::Reader r{reinterpret_cast<const uint8_t*>(data.data()), data.size(), 0};
  std::vector<uint8_t> magic = r.bytes(4, "container magic");
  if (std::string(magic.begin(), magic.end()) != "THNT")
    throw FormatError("not a model container (bad magic)", 0);
  uint16_t version = r.u16("container version");
  if (version != 1)
    throw FormatError("unsupported container version " + std::to_string(version), 4);
  uint16_t count = r.u16("section count");
  struct Section {
    uint64_t offset = 0, size = 0;
    bool present = false;
  };
  std::map<std::string, Section> sections;
  for (uint16_t i = 0; i < count; ++i) {
    std::vector<uint8_t> tag = r.bytes(4, "section tag");
    std::string name(tag.begin(), tag.end());
    uint64_t off = r.u64("section offset");
    uint64_t size = r.u64("section size");
    if (sections.count(name))
      throw FormatError("duplicate section '" + name + "'", static_cast<long long>(r.pos) - 20);
    if (off + size > data.size())
      throw FormatError("section '" + name + "' runs past the end of the file",
                        static_cast<long long>(r.pos) - 16);
    sections[name] = {off, size, true};
  }
  for (const char* need : {"ARCH", "TENS"})
    if (!sections.count(need)) throw FormatError(std::string("missing section ") + need);
  for (const auto& [name, s] : sections)
    if (name != "ARCH" && name != "TENS" && name != "QSPC")
      throw FormatError("unknown section '" + name + "'");

  const Section& sa = sections["ARCH"];
  ArchSpec spec;
  try {
    spec = parse_arch(data.substr(sa.offset, sa.size));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("architecture section: ") + e.what(),
                      static_cast<long long>(sa.offset));
  }
  HybridModel m = materialize(spec, 0);

  const Section& st = sections["TENS"];
  io::Reader tr{reinterpret_cast<const uint8_t*>(data.data()), data.size(), st.offset};
  detail::TensFill fill{detail::read_tens(tr, st.offset + st.size)};

  for (size_t i = 0; i < m.layers.size(); ++i) {
    std::string lp = qslot::layer_prefix(i);
    if (auto* d = std::get_if<DenseConvLayer>(&m.layers[i])) {
      fill.fill_float(lp + ".W", d->W);
      if (!d->bias.empty()) fill.fill_float(lp + ".bias", d->bias);
      if (d->bn) {
        fill.fill_float(lp + ".bn.gamma", d->bn->gamma);
        fill.fill_float(lp + ".bn.beta", d->bn->beta);
        fill.fill_float(lp + ".bn.mean", d->bn->mean);
        fill.fill_float(lp + ".bn.var", d->bn->var);
      }
    } else if (auto* s = std::get_if<StrassenConvLayer>(&m.layers[i])) {
      detail::fill_strassen(fill, lp, s->spn);
    }
  }
  if (auto* dh = std::get_if<DenseHead>(&m.head)) {
    fill.fill_float("head.W", dh->W);
    if (!dh->bias.empty()) fill.fill_float("head.bias", dh->bias);
  } else {
    BonsaiTree& t = std::get<BonsaiHead>(m.head).tree;
    auto matrix = [&](const std::string& name, BonsaiMatrix& bm) {
      if (Tensor* W = std::get_if<Tensor>(&bm))
        fill.fill_float(name, *W);
      else
        detail::fill_strassen(fill, name, std::get<StrassenLayer>(bm));
    };
    matrix("head.Z", t.Z);
    for (int64_t k = 0; k < t.node_count(); ++k) {
      std::string np = qslot::node_prefix(k);
      BonsaiNode& n = t.nodes[static_cast<size_t>(k)];
      matrix(np + ".W", n.W);
      matrix(np + ".V", n.V);
      if (t.is_internal(k)) fill.fill_float(np + ".theta", n.theta);
    }
  }
  fill.finish();

  if (sections.count("QSPC")) {
    const Section& sq = sections["QSPC"];
    io::Reader qr{reinterpret_cast<const uint8_t*>(data.data()), data.size(), sq.offset};
    auto quant = std::make_shared<ModelQuant>();
    quant->policy.name = tens::read_name(qr);
    quant->policy.weight_bits = qr.u8("weight bits");
    quant->policy.a_hat_bits = qr.u8("a_hat bits");
    quant->policy.act_bits = qr.u8("activation bits");
    quant->policy.mid_bits = qr.u8("intermediate bits");
    quant->policy.bias_bits = qr.u8("bias bits");
    quant->policy.validate();
    uint32_t nf = qr.u32("format count");
    for (uint32_t i = 0; i < nf; ++i) {
      std::string name = tens::read_name(qr);
      QFormat f;
      f.total_bits = qr.u8("format width");
      f.frac_bits = qr.u8("format frac bits");
      long long at = static_cast<long long>(qr.pos) - 2;
      try {
        f.validate();
      } catch (const ConfigError& e) {
        throw FormatError(std::string("format '") + name + "': " + e.what(), at);
      }
      if (!quant->fmts.emplace(name, f).second)
        throw FormatError("duplicate format '" + name + "'", at);
    }
    uint32_t nc = qr.u32("code count");
    for (uint32_t i = 0; i < nc; ++i) {
      std::string name = tens::read_name(qr);
      QTensor qt;
      qt.fmt.frac_bits = qr.u8("code frac bits");
      uint8_t kind = qr.u8("code elem kind");
      if (kind != tens::fx8 && kind != tens::fx16 && kind != tens::fx32)
        throw FormatError("code '" + name + "' has non-fixed-point kind",
                          static_cast<long long>(qr.pos) - 1);
      qt.fmt.total_bits = kind == tens::fx8 ? 8 : kind == tens::fx16 ? 16 : 32;
      long long at = static_cast<long long>(qr.pos);
      try {
        qt.fmt.validate();
      } catch (const ConfigError& e) {
        throw FormatError(std::string("code '") + name + "': " + e.what(), at);
      }
      qt.shape = tens::read_dims(qr);
      int64_t n = 1;
      for (int64_t d : qt.shape) n *= d;
      int bytes = qt.fmt.total_bits / 8;
      qt.code.reserve(static_cast<size_t>(n));
      for (int64_t j = 0; j < n; ++j) {
        uint32_t raw = 0;
        for (int b = 0; b < bytes; ++b)
          raw |= static_cast<uint32_t>(qr.u8("code payload")) << (8 * b);
        int shift = 32 - 8 * bytes;
        qt.code.push_back(static_cast<int32_t>(raw << shift) >> shift);  // sign extend
      }
      if (!quant->codes.emplace(std::move(name), std::move(qt)).second)
        throw FormatError("duplicate code entry", at);
    }
    if (qr.pos != sq.offset + sq.size)
      throw FormatError("quantization section has trailing bytes",
                        static_cast<long long>(qr.pos));
    m.quant = std::move(quant);
  }

  validate_model(m);
  return m;
}

inline HybridModel load_model(const std::string& path) {
  std::string data = io::slurp(path);
  try {
    return model_from_bytes(data);
  } catch (const FormatError& e) {
    FormatError named(path + ": " + e.what());  // message already names the offset
    named.offset = e.offset;
    throw named;
  }
}

}  // namespace thn
