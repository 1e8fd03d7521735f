#pragma once

// Text architecture descriptions and model initialization.
//
// One declaration per line, '#' starts a comment. The header lines name,
// input, and classes come first, in that order; layer lines follow in
// execution order; the head line comes last.
//
//   name kws_hybrid
//   input 1 49 10
//   classes 12
//   conv 24 k 10x4 s 2x2 p 5x1 spn r 18
//   dw_conv k 3x3 s 2x2 p 1x1 spn
//   pw_conv 32 spn
//   ds_conv 48 k 3x3 p 1x1 spn          # sugar: dw_conv + pw_conv
//   avg_pool 13x3
//   flatten
//   head bonsai depth 2 proj 24 spn r 18 sigma 1 sigma_i 1
//
// Conv options: spn (strassenify), r N (hidden width, spn only), r_ratio F
// (r = round(F * out_channels) when r is not given), no_bn, no_relu,
// no_bias. dw_conv takes an optional "mult N" channel multiplier. Heads are
// "bonsai ..." or "dense [no_bias]". ds_conv expands at parse time, so a
// parsed spec contains only primitive layers.

#include <cmath>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "thn/graph.hpp"

namespace thn {

struct ConvSpec {
  StrassenKind kind = StrassenKind::conv_standard;
  int64_t out_channels = 0;  // conv_depthwise: channel multiplier instead
  int64_t kernel_h = 1, kernel_w = 1;
  int64_t stride_h = 1, stride_w = 1;
  int64_t pad_h = 0, pad_w = 0;
  bool spn = false;
  int64_t r = 0;          // 0 resolves to round(r_ratio * out channels)
  double r_ratio = 0.75;
  bool bn = true, relu = true, bias = true;
};

struct PoolSpec {
  int64_t kernel_h = 0, kernel_w = 0;
  int64_t stride_h = 0, stride_w = 0;  // 0 means same as kernel
};

struct FlattenSpec {};

using LayerSpec = std::variant<ConvSpec, PoolSpec, FlattenSpec>;

struct HeadSpec {
  bool bonsai = false;
  int depth = 2;
  int64_t proj = 0;  // projected dimension
  bool spn = false;  // strassenify projection and node matrices
  int64_t r = 0;     // projection hidden width; 0 resolves via r_ratio
  double r_ratio = 0.75;
  double sigma = 1.0, sigma_i = 1.0;
  bool bias = true;  // dense head only
};

struct ArchSpec {
  std::string name = "model";
  std::vector<int64_t> input_shape;  // [C, H, W]
  int64_t num_classes = 0;
  std::vector<LayerSpec> layers;
  HeadSpec head;
};

namespace archio {

inline std::vector<std::string> tokenize(const std::string& line) {
  std::vector<std::string> toks;
  std::istringstream is(line.substr(0, line.find('#')));
  std::string t;
  while (is >> t) toks.push_back(t);
  return toks;
}

struct LineCursor {
  const std::vector<std::string>& toks;
  int line_no;
  size_t pos = 1;  // token 0 is the keyword

  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError("arch line " + std::to_string(line_no) + ": " + what);
  }
  bool done() const { return pos >= toks.size(); }
  const std::string& next(const char* what) {
    if (done()) fail(std::string("missing ") + what);
    return toks[pos++];
  }
  const std::string& peek() const { return toks[pos]; }

  int64_t integer(const char* what) {
    const std::string& t = next(what);
    size_t used = 0;
    int64_t v = 0;
    try {
      v = std::stoll(t, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != t.size()) fail(std::string(what) + " must be an integer, got '" + t + "'");
    return v;
  }
  double number(const char* what) {
    const std::string& t = next(what);
    size_t used = 0;
    double v = 0;
    try {
      v = std::stod(t, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != t.size()) fail(std::string(what) + " must be a number, got '" + t + "'");
    return v;
  }
  // "AxB" pairs, as in k 3x4
  std::pair<int64_t, int64_t> dims(const char* what) {
    const std::string& t = next(what);
    size_t x = t.find('x');
    if (x == std::string::npos || x == 0 || x + 1 >= t.size())
      fail(std::string(what) + " must look like HxW, got '" + t + "'");
    std::pair<int64_t, int64_t> v;
    size_t u1 = 0, u2 = 0;
    try {
      v.first = std::stoll(t.substr(0, x), &u1);
      v.second = std::stoll(t.substr(x + 1), &u2);
    } catch (const std::exception&) {
      u1 = 0;
    }
    if (u1 != x || u2 != t.size() - x - 1)
      fail(std::string(what) + " must look like HxW, got '" + t + "'");
    return v;
  }
};

// shared tail options for conv-family lines
inline bool conv_option(LineCursor& c, ConvSpec& s, bool allow_r) {
  const std::string& t = c.peek();
  if (t == "k") {
    ++c.pos;
    std::tie(s.kernel_h, s.kernel_w) = c.dims("kernel");
  } else if (t == "s") {
    ++c.pos;
    std::tie(s.stride_h, s.stride_w) = c.dims("stride");
  } else if (t == "p") {
    ++c.pos;
    std::tie(s.pad_h, s.pad_w) = c.dims("padding");
  } else if (t == "spn") {
    ++c.pos;
    s.spn = true;
  } else if (t == "r") {
    ++c.pos;
    if (!allow_r) c.fail("r applies per layer; use r_ratio on ds_conv or split it");
    s.r = c.integer("r");
  } else if (t == "r_ratio") {
    ++c.pos;
    s.r_ratio = c.number("r_ratio");
  } else if (t == "no_bn") {
    ++c.pos;
    s.bn = false;
  } else if (t == "no_relu") {
    ++c.pos;
    s.relu = false;
  } else if (t == "no_bias") {
    ++c.pos;
    s.bias = false;
  } else {
    return false;
  }
  return true;
}

}  // namespace archio

inline ArchSpec parse_arch(const std::string& text) {
  ArchSpec a;
  enum { want_name, want_input, want_classes, want_layers, done } stage = want_name;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    std::vector<std::string> toks = archio::tokenize(line);
    if (toks.empty()) continue;
    archio::LineCursor c{toks, line_no};
    const std::string& kw = toks[0];

    if (stage == want_name) {
      if (kw != "name") c.fail("expected 'name', got '" + kw + "'");
      a.name = c.next("model name");
      for (char ch : a.name)
        if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '_' && ch != '-' && ch != '.')
          c.fail("model name must use letters, digits, '_', '-', '.'");
      stage = want_input;
    } else if (stage == want_input) {
      if (kw != "input") c.fail("expected 'input C H W', got '" + kw + "'");
      a.input_shape = {c.integer("channels"), c.integer("height"), c.integer("width")};
      for (int64_t d : a.input_shape)
        if (d <= 0) c.fail("input dimensions must be positive");
      stage = want_classes;
    } else if (stage == want_classes) {
      if (kw != "classes") c.fail("expected 'classes N', got '" + kw + "'");
      a.num_classes = c.integer("class count");
      if (a.num_classes <= 0) c.fail("class count must be positive");
      stage = want_layers;
    } else if (stage == done) {
      c.fail("nothing may follow the head line");
    } else if (kw == "conv" || kw == "pw_conv") {
      ConvSpec s;
      s.kind = kw == "conv" ? StrassenKind::conv_standard : StrassenKind::conv_pointwise;
      s.out_channels = c.integer("output channels");
      if (s.out_channels <= 0) c.fail("output channels must be positive");
      while (!c.done())
        if (!archio::conv_option(c, s, true)) c.fail("unknown option '" + c.peek() + "'");
      if (s.kind == StrassenKind::conv_pointwise &&
          (s.kernel_h != 1 || s.kernel_w != 1 || s.stride_h != 1 || s.stride_w != 1 ||
           s.pad_h != 0 || s.pad_w != 0))
        c.fail("pw_conv is fixed at k 1x1 s 1x1 p 0x0; use conv for anything else");
      a.layers.emplace_back(s);
    } else if (kw == "dw_conv") {
      ConvSpec s;
      s.kind = StrassenKind::conv_depthwise;
      s.out_channels = 1;  // channel multiplier
      while (!c.done()) {
        if (c.peek() == "mult") {
          ++c.pos;
          s.out_channels = c.integer("mult");
          if (s.out_channels <= 0) c.fail("mult must be positive");
        } else if (!archio::conv_option(c, s, true)) {
          c.fail("unknown option '" + c.peek() + "'");
        }
      }
      a.layers.emplace_back(s);
    } else if (kw == "ds_conv") {
      ConvSpec dw;
      dw.kind = StrassenKind::conv_depthwise;
      dw.out_channels = 1;
      int64_t out = c.integer("output channels");
      if (out <= 0) c.fail("output channels must be positive");
      while (!c.done())
        if (!archio::conv_option(c, dw, false)) c.fail("unknown option '" + c.peek() + "'");
      ConvSpec pw = dw;  // spn/bn/relu/bias/r_ratio carry over to both halves
      pw.kind = StrassenKind::conv_pointwise;
      pw.out_channels = out;
      pw.kernel_h = pw.kernel_w = pw.stride_h = pw.stride_w = 1;
      pw.pad_h = pw.pad_w = 0;
      a.layers.emplace_back(dw);
      a.layers.emplace_back(pw);
    } else if (kw == "avg_pool") {
      PoolSpec s;
      std::tie(s.kernel_h, s.kernel_w) = c.dims("kernel");
      if (s.kernel_h <= 0 || s.kernel_w <= 0) c.fail("pool kernel must be positive");
      while (!c.done()) {
        if (c.peek() == "s") {
          ++c.pos;
          std::tie(s.stride_h, s.stride_w) = c.dims("stride");
        } else {
          c.fail("unknown option '" + c.peek() + "'");
        }
      }
      a.layers.emplace_back(s);
    } else if (kw == "flatten") {
      if (!c.done()) c.fail("flatten takes no options");
      a.layers.emplace_back(FlattenSpec{});
    } else if (kw == "head") {
      const std::string& which = c.next("head kind");
      if (which == "bonsai") {
        a.head.bonsai = true;
        while (!c.done()) {
          const std::string& t = c.peek();
          if (t == "depth") {
            ++c.pos;
            int64_t d = c.integer("depth");
            if (d < 0 || d > 20) c.fail("depth out of range");
            a.head.depth = static_cast<int>(d);
          } else if (t == "proj") {
            ++c.pos;
            a.head.proj = c.integer("proj");
            if (a.head.proj <= 0) c.fail("proj must be positive");
          } else if (t == "spn") {
            ++c.pos;
            a.head.spn = true;
          } else if (t == "r") {
            ++c.pos;
            a.head.r = c.integer("r");
          } else if (t == "r_ratio") {
            ++c.pos;
            a.head.r_ratio = c.number("r_ratio");
          } else if (t == "sigma") {
            ++c.pos;
            a.head.sigma = c.number("sigma");
            if (a.head.sigma <= 0) c.fail("sigma must be positive");
          } else if (t == "sigma_i") {
            ++c.pos;
            a.head.sigma_i = c.number("sigma_i");
            if (a.head.sigma_i <= 0) c.fail("sigma_i must be positive");
          } else {
            c.fail("unknown option '" + t + "'");
          }
        }
        if (a.head.proj <= 0) c.fail("bonsai head needs proj");
      } else if (which == "dense") {
        a.head.bonsai = false;
        while (!c.done()) {
          if (c.peek() == "no_bias") {
            ++c.pos;
            a.head.bias = false;
          } else {
            c.fail("unknown option '" + c.peek() + "'");
          }
        }
      } else {
        c.fail("head kind must be bonsai or dense, got '" + which + "'");
      }
      stage = done;
    } else {
      c.fail("unknown layer '" + kw + "'");
    }
  }
  if (stage != done) throw ConfigError("arch text ends before the head line");
  return a;
}

namespace archio {

inline std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// output channels of each layer spec, walking the chain from the input
inline std::vector<int64_t> spec_channels(const ArchSpec& a) {
  std::vector<int64_t> out;
  if (a.input_shape.size() != 3) throw ConfigError("arch input shape must be [C,H,W]");
  int64_t ch = a.input_shape[0];
  for (const LayerSpec& l : a.layers) {
    if (const ConvSpec* cs = std::get_if<ConvSpec>(&l))
      ch = cs->kind == StrassenKind::conv_depthwise ? ch * cs->out_channels : cs->out_channels;
    out.push_back(ch);
  }
  return out;
}

inline int64_t resolve_r(const ConvSpec& s, int64_t c_out) {
  int64_t r = s.r > 0 ? s.r : static_cast<int64_t>(std::llround(s.r_ratio * c_out));
  if (r <= 0) throw ConfigError("strassen width r resolves to " + std::to_string(r) +
                                " for a " + std::to_string(c_out) + "-channel conv");
  return r;
}

inline int64_t resolve_head_r(const HeadSpec& h) {
  int64_t r = h.r > 0 ? h.r : std::max<int64_t>(1, std::llround(h.r_ratio * h.proj));
  return r;
}

}  // namespace archio

inline std::string serialize_arch(const ArchSpec& a) {
  std::ostringstream os;
  os << "name " << a.name << "\n";
  os << "input " << a.input_shape.at(0) << " " << a.input_shape.at(1) << " "
     << a.input_shape.at(2) << "\n";
  os << "classes " << a.num_classes << "\n";
  std::vector<int64_t> chans = archio::spec_channels(a);
  for (size_t i = 0; i < a.layers.size(); ++i) {
    const LayerSpec& l = a.layers[i];
    if (const ConvSpec* s = std::get_if<ConvSpec>(&l)) {
      if (s->kind == StrassenKind::conv_depthwise) {
        os << "dw_conv";
        if (s->out_channels != 1) os << " mult " << s->out_channels;
      } else {
        os << (s->kind == StrassenKind::conv_pointwise ? "pw_conv " : "conv ") << s->out_channels;
      }
      if (s->kind != StrassenKind::conv_pointwise) {
        os << " k " << s->kernel_h << "x" << s->kernel_w;
        if (s->stride_h != 1 || s->stride_w != 1) os << " s " << s->stride_h << "x" << s->stride_w;
        if (s->pad_h != 0 || s->pad_w != 0) os << " p " << s->pad_h << "x" << s->pad_w;
      }
      if (s->spn) os << " spn r " << archio::resolve_r(*s, chans[i]);
      if (!s->bn) os << " no_bn";
      if (!s->relu) os << " no_relu";
      if (!s->bias) os << " no_bias";
      os << "\n";
    } else if (const PoolSpec* p = std::get_if<PoolSpec>(&l)) {
      os << "avg_pool " << p->kernel_h << "x" << p->kernel_w;
      if (p->stride_h > 0 || p->stride_w > 0) os << " s " << p->stride_h << "x" << p->stride_w;
      os << "\n";
    } else {
      os << "flatten\n";
    }
  }
  if (a.head.bonsai) {
    os << "head bonsai depth " << a.head.depth << " proj " << a.head.proj;
    if (a.head.spn) os << " spn r " << archio::resolve_head_r(a.head);
    os << " sigma " << archio::fmt_real(a.head.sigma) << " sigma_i "
       << archio::fmt_real(a.head.sigma_i) << "\n";
  } else {
    os << "head dense";
    if (!a.head.bias) os << " no_bias";
    os << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Initialization. Strassenified maps start as full-precision shadow factors
// (the phase-1 training form); dense layers start as ordinary float tensors.

namespace archio {

inline Tensor gauss(Rng& rng, std::vector<int64_t> shape, double stdev) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.gaussian() * stdev;
  return t;
}

inline Tensor unif(Rng& rng, std::vector<int64_t> shape, double lo, double hi) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

inline BatchNorm identity_bn(int64_t channels) {
  BatchNorm bn;
  bn.gamma = Tensor({channels});
  bn.beta = Tensor({channels});
  bn.mean = Tensor({channels});
  bn.var = Tensor({channels});
  for (int64_t c = 0; c < channels; ++c) {
    bn.gamma[c] = 1.0;
    bn.var[c] = 1.0;
  }
  return bn;
}

inline StrassenLayer init_spn(Rng& rng, StrassenKind kind, int64_t fan_in, int64_t fan_out,
                              int64_t r) {
  StrassenLayer S;
  S.kind = kind;
  S.r = r;
  S.fan_in = fan_in;
  S.fan_out = fan_out;
  SpnShadow sh;
  sh.Wa = unif(rng, {r, fan_in * fan_out}, -1.0, 1.0);
  sh.vecA = gauss(rng, {fan_in * fan_out}, 1.0 / std::sqrt(double(fan_in) * double(fan_out)));
  sh.Wb = gauss(rng, {r, fan_in}, std::sqrt(2.0 / double(fan_in)));
  sh.Wc = gauss(rng, {fan_out, r}, std::sqrt(2.0 / double(r)));
  S.shadow = std::move(sh);
  return S;
}

}  // namespace archio

inline HybridModel materialize(const ArchSpec& a, uint64_t seed) {
  if (a.input_shape.size() != 3) throw ConfigError("arch input shape must be [C,H,W]");
  Rng rng(seed);
  HybridModel m;
  m.name = a.name;
  m.input_shape = a.input_shape;
  m.num_classes = a.num_classes;

  int64_t ch = a.input_shape[0];
  for (const LayerSpec& l : a.layers) {
    if (const ConvSpec* s = std::get_if<ConvSpec>(&l)) {
      ConvGeometry g;
      g.kernel_h = s->kernel_h;
      g.kernel_w = s->kernel_w;
      g.stride_h = s->stride_h;
      g.stride_w = s->stride_w;
      g.pad_h = s->pad_h;
      g.pad_w = s->pad_w;
      g.in_channels = ch;
      g.depthwise = s->kind == StrassenKind::conv_depthwise;
      g.out_channels = g.depthwise ? ch * s->out_channels : s->out_channels;
      if (s->spn) {
        StrassenConvLayer L;
        L.spn = archio::init_spn(rng, s->kind, g.patch_len(), g.out_channels,
                                 archio::resolve_r(*s, g.out_channels));
        L.spn.geom = g;
        if (s->bias) L.spn.bias = Tensor({g.out_channels});
        if (s->bn) L.spn.bn = archio::identity_bn(L.spn.r);
        L.relu = s->relu;
        m.layers.emplace_back(std::move(L));
      } else {
        DenseConvLayer L;
        L.kind = s->kind;
        L.geom = g;
        int64_t patch = g.in_channels_per_group() * g.kernel_h * g.kernel_w;
        L.W = archio::gauss(rng, {g.out_channels, g.in_channels_per_group(), g.kernel_h,
                                  g.kernel_w},
                            std::sqrt(2.0 / double(patch)));
        if (s->bias) L.bias = Tensor({g.out_channels});
        if (s->bn) L.bn = archio::identity_bn(g.out_channels);
        L.relu = s->relu;
        m.layers.emplace_back(std::move(L));
      }
      ch = g.out_channels;
    } else if (const PoolSpec* p = std::get_if<PoolSpec>(&l)) {
      AvgPoolLayer L;
      L.kernel_h = p->kernel_h;
      L.kernel_w = p->kernel_w;
      L.stride_h = p->stride_h;
      L.stride_w = p->stride_w;
      m.layers.emplace_back(L);
    } else {
      m.layers.emplace_back(FlattenLayer{});
    }
  }

  int64_t D = head_input_dim(m);
  int64_t L = m.num_classes;
  if (a.head.bonsai) {
    BonsaiTree t;
    t.depth = a.head.depth;
    t.dim_in = D;
    t.dim_proj = a.head.proj;
    t.num_classes = L;
    t.sigma = a.head.sigma;
    t.sigma_i = a.head.sigma_i;
    if (a.head.spn)
      t.Z = archio::init_spn(rng, StrassenKind::matmul, D, t.dim_proj,
                             archio::resolve_head_r(a.head));
    else
      t.Z = archio::gauss(rng, {t.dim_proj, D}, std::sqrt(1.0 / double(D)));
    t.nodes.resize(static_cast<size_t>(t.node_count()));
    for (int64_t k = 0; k < t.node_count(); ++k) {
      BonsaiNode& n = t.nodes[static_cast<size_t>(k)];
      if (a.head.spn) {
        n.W = archio::init_spn(rng, StrassenKind::matmul, t.dim_proj, L, L);
        n.V = archio::init_spn(rng, StrassenKind::matmul, t.dim_proj, L, L);
      } else {
        n.W = archio::gauss(rng, {t.dim_proj, L}, std::sqrt(1.0 / double(t.dim_proj)));
        n.V = archio::gauss(rng, {t.dim_proj, L}, std::sqrt(1.0 / double(t.dim_proj)));
      }
      if (t.is_internal(k)) n.theta = archio::unif(rng, {t.dim_proj}, -0.1, 0.1);
    }
    m.head = BonsaiHead{std::move(t)};
  } else {
    DenseHead h;
    h.W = archio::gauss(rng, {L, D}, std::sqrt(1.0 / double(D)));
    if (a.head.bias) h.bias = Tensor({L});
    m.head = std::move(h);
  }
  validate_model(m);
  return m;
}

}  // namespace thn
