#pragma once

#include <iomanip>
#include <sstream>

#include "thn/quantize.hpp"

namespace thn {

// ---------------------------------------------------------------------------
// Operation counts, computed from shapes and ternary patterns alone. The
// same conventions as the instrumented forward pass: dense layers report
// MACs, ternary matrices one add per coefficient touched, SPN layers r muls
// per output position. Bias adds, nonlinearities, pooling and the tree's
// scalar probability arithmetic are not counted. dense_estimate prices every
// ternary coefficient as if it were nonzero.

struct OpRow {
  std::string name;
  std::string kind;
  long long muls = 0, adds = 0, macs = 0;
};

struct OpReport {
  CountMode mode = CountMode::inference_nnz;
  PredictMode tree_mode = PredictMode::soft;
  std::vector<OpRow> rows;
  long long muls = 0, adds = 0, macs = 0;

  // a MAC is one multiplication and one addition
  long long mul_count() const { return muls + macs; }
  long long add_count() const { return adds + macs; }
};

inline OpReport count_ops(const HybridModel& m, CountMode mode = CountMode::inference_nnz,
                          PredictMode tree_mode = PredictMode::soft) {
  validate_model(m);
  OpReport rep;
  rep.mode = mode;
  rep.tree_mode = tree_mode;
  std::vector<std::vector<int64_t>> shapes = layer_shapes(m);
  auto tern = [mode](const TernaryMatrix& M) -> long long {
    return mode == CountMode::dense_estimate ? M.rows() * M.cols() : M.nnz();
  };

  for (size_t i = 0; i < m.layers.size(); ++i) {
    const std::vector<int64_t>& out = shapes[i + 1];
    OpRow row;
    row.name = "layer" + std::to_string(i);
    if (const auto* d = std::get_if<DenseConvLayer>(&m.layers[i])) {
      int64_t P = out[1] * out[2];
      row.kind = std::string("dense ") + kind_name(d->kind);
      row.macs = P * d->geom.out_channels * d->geom.in_channels_per_group() * d->geom.kernel_h *
                 d->geom.kernel_w;
    } else if (const auto* s = std::get_if<StrassenConvLayer>(&m.layers[i])) {
      const StrassenLayer& S = s->spn;
      if (!S.inference_ready())
        throw StateError("op counting requires inference-form strassen weights");
      int64_t P = out[1] * out[2];
      row.kind = std::string("spn ") + kind_name(S.kind) + " r=" + std::to_string(S.r);
      row.adds = (tern(*S.Wb) + tern(*S.Wc)) * P;
      row.muls = S.r * P;
    } else {
      continue;  // pooling and flatten are free by convention
    }
    rep.rows.push_back(row);
  }

  OpRow hrow;
  hrow.name = "head";
  if (const auto* dh = std::get_if<DenseHead>(&m.head)) {
    hrow.kind = "dense";
    hrow.macs = dh->W.dim(0) * dh->W.dim(1);
  } else {
    const BonsaiTree& t = std::get<BonsaiHead>(m.head).tree;
    hrow.kind = tree_mode == PredictMode::soft ? "bonsai soft" : "bonsai hard";
    auto count_matrix = [&](const BonsaiMatrix& bm) {
      if (const Tensor* W = std::get_if<Tensor>(&bm)) {
        hrow.macs += W->dim(0) * W->dim(1);
        return;
      }
      const StrassenLayer& S = std::get<StrassenLayer>(bm);
      if (!S.inference_ready())
        throw StateError("op counting requires inference-form strassen weights");
      hrow.adds += tern(*S.Wb) + tern(*S.Wc);
      hrow.muls += S.r;
    };
    count_matrix(t.Z);
    // Nodes are priced individually: ternary node matrices need not share a
    // density. Soft mode touches every node; hard mode is priced along the
    // leftmost root-to-leaf path, the one a tied branching margin follows,
    // so actual per-input adds can differ when densities do.
    std::vector<int64_t> visited;
    if (tree_mode == PredictMode::soft) {
      for (int64_t k = 0; k < t.node_count(); ++k) visited.push_back(k);
    } else {
      for (int64_t k = 0; k < t.node_count(); k = 2 * k + 1) visited.push_back(k);
    }
    for (int64_t k : visited) {
      const BonsaiNode& n = t.nodes[static_cast<size_t>(k)];
      count_matrix(n.W);
      count_matrix(n.V);
      hrow.muls += t.num_classes;  // elementwise score products
    }
    int64_t branched = tree_mode == PredictMode::soft ? t.internal_count() : t.depth;
    hrow.macs += branched * t.dim_proj;  // branching dot products
  }
  rep.rows.push_back(hrow);

  for (const OpRow& r : rep.rows) {
    rep.muls += r.muls;
    rep.adds += r.adds;
    rep.macs += r.macs;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Model size: every parameter tensor, byte-rounded per tensor. Ternary
// matrices cost 2 bits per entry; float tensors 4 bytes per element unless
// the model carries fixed-point formats, in which case each named slot uses
// its format's width. BN vectors (4 per channel set) always count; the
// sharpness scalars and shape metadata do not.

struct SizeItem {
  std::string name;
  std::string what;
  int64_t bytes = 0;
};

struct SizeReport {
  std::vector<SizeItem> items;
  int64_t total_bytes = 0;
  double kib() const { return static_cast<double>(total_bytes) / 1024.0; }

  int64_t ternary_bytes() const {
    int64_t n = 0;
    for (const auto& it : items)
      if (it.what == "ternary") n += it.bytes;
    return n;
  }
  int64_t other_bytes() const { return total_bytes - ternary_bytes(); }
};

namespace detail {

inline std::pair<int64_t, std::string> slot_width(const HybridModel& m, const std::string& slot) {
  if (m.quant) {
    auto it = m.quant->fmts.find(slot);
    if (it != m.quant->fmts.end())
      return {it->second.total_bits / 8, "q" + std::to_string(it->second.total_bits)};
  }
  return {4, "f32"};
}

}  // namespace detail

inline SizeReport model_size(const HybridModel& m, int ternary_bits = 2) {
  validate_model(m);
  if (ternary_bits < 1 || ternary_bits > 8) throw ConfigError("ternary_bits must be in [1,8]");
  SizeReport rep;
  auto add = [&rep](std::string name, std::string what, int64_t bytes) {
    rep.total_bytes += bytes;
    rep.items.push_back({std::move(name), std::move(what), bytes});
  };
  auto add_float_slot = [&](const std::string& slot, const Tensor& t) {
    auto [w, tag] = detail::slot_width(m, slot);
    add(slot, tag, t.size() * w);
  };
  auto tern_bytes = [ternary_bits](int64_t rows, int64_t cols) {
    return (rows * cols * ternary_bits + 7) / 8;
  };
  auto add_strassen = [&](const std::string& nm, const StrassenLayer& S) {
    if (S.Wb) add(nm + ".Wb", "ternary", tern_bytes(S.Wb->rows(), S.Wb->cols()));
    if (S.Wc) add(nm + ".Wc", "ternary", tern_bytes(S.Wc->rows(), S.Wc->cols()));
    if (S.a_hat) add_float_slot(nm + ".a_hat", *S.a_hat);
    if (!S.bias.empty()) add_float_slot(nm + ".bias", S.bias);
    if (S.bn) add(nm + ".bn", "f32", 4 * S.bn->channels() * 4);
    if (S.shadow)
      add(nm + ".shadow", "f32",
          (S.shadow->Wa.size() + S.shadow->vecA.size() + S.shadow->Wb.size() +
           S.shadow->Wc.size()) *
              4);
  };

  for (size_t i = 0; i < m.layers.size(); ++i) {
    std::string lp = qslot::layer_prefix(i);
    if (const auto* d = std::get_if<DenseConvLayer>(&m.layers[i])) {
      add_float_slot(lp + ".W", d->W);
      if (!d->bias.empty()) add_float_slot(lp + ".bias", d->bias);
      if (d->bn) add(lp + ".bn", "f32", 4 * d->bn->channels() * 4);
    } else if (const auto* s = std::get_if<StrassenConvLayer>(&m.layers[i])) {
      add_strassen(lp, s->spn);
    }
  }

  if (const auto* dh = std::get_if<DenseHead>(&m.head)) {
    add_float_slot("head.W", dh->W);
    if (!dh->bias.empty()) add_float_slot("head.bias", dh->bias);
  } else {
    const BonsaiTree& t = std::get<BonsaiHead>(m.head).tree;
    auto add_matrix = [&](const std::string& name, const BonsaiMatrix& bm) {
      if (const Tensor* W = std::get_if<Tensor>(&bm))
        add_float_slot(name, *W);
      else
        add_strassen(name, std::get<StrassenLayer>(bm));
    };
    add_matrix("head.Z", t.Z);
    for (int64_t k = 0; k < t.node_count(); ++k) {
      std::string np = qslot::node_prefix(k);
      const BonsaiNode& n = t.nodes[static_cast<size_t>(k)];
      add_matrix(np + ".W", n.W);
      add_matrix(np + ".V", n.V);
      if (t.is_internal(k)) add_float_slot(np + ".theta", n.theta);
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Working memory: the model plus the largest pair of consecutive activation
// buffers (one being written while the other is read). Buffer widths follow
// the activation formats when the model is quantized; pooling reuses its
// input's format.

struct BufferBytes {
  BufferInfo info;
  int64_t bytes = 0;
};

struct MemoryReport {
  int64_t model_bytes = 0;
  std::vector<BufferBytes> buffers;
  int64_t peak_pair_bytes = 0;
  std::string peak_pair;

  int64_t total_bytes() const { return model_bytes + peak_pair_bytes; }
  double kib() const { return static_cast<double>(total_bytes()) / 1024.0; }
};

inline MemoryReport memory_footprint(const HybridModel& m) {
  MemoryReport rep;
  rep.model_bytes = model_size(m).total_bytes;
  int64_t prev_w = 4;
  for (const BufferInfo& b : activation_chain(m)) {
    std::string slot = b.name == "input"    ? "act.input"
                       : b.name == "scores" ? "act.head.scores"
                                            : "act." + b.name;
    int64_t w = 4;
    if (m.quant) {
      auto it = m.quant->fmts.find(slot);
      w = it != m.quant->fmts.end() ? it->second.total_bits / 8 : prev_w;
    }
    prev_w = w;
    rep.buffers.push_back({b, b.elements * w});
  }
  for (size_t i = 0; i + 1 < rep.buffers.size(); ++i) {
    int64_t pair = rep.buffers[i].bytes + rep.buffers[i + 1].bytes;
    if (pair > rep.peak_pair_bytes) {
      rep.peak_pair_bytes = pair;
      rep.peak_pair = rep.buffers[i].info.name + " + " + rep.buffers[i + 1].info.name;
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Report rendering.

inline std::string format_kib(int64_t bytes) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << static_cast<double>(bytes) / 1024.0 << " KB";
  return os.str();
}

inline std::string op_report_text(const OpReport& r) {
  std::ostringstream os;
  os << "ops (" << (r.mode == CountMode::dense_estimate ? "dense estimate" : "nonzero counts")
     << ")\n";
  os << std::left << std::setw(10) << "name" << std::setw(24) << "kind" << std::right
     << std::setw(12) << "muls" << std::setw(14) << "adds" << std::setw(14) << "macs" << "\n";
  for (const OpRow& row : r.rows)
    os << std::left << std::setw(10) << row.name << std::setw(24) << row.kind << std::right
       << std::setw(12) << row.muls << std::setw(14) << row.adds << std::setw(14) << row.macs
       << "\n";
  os << std::left << std::setw(34) << "total" << std::right << std::setw(12) << r.muls
     << std::setw(14) << r.adds << std::setw(14) << r.macs << "\n";
  os << "multiplications (macs included): " << r.mul_count() << "\n";
  os << "additions (macs included): " << r.add_count() << "\n";
  return os.str();
}

inline std::string op_report_csv(const OpReport& r) {
  std::ostringstream os;
  os << "name,kind,muls,adds,macs\n";
  for (const OpRow& row : r.rows)
    os << row.name << "," << row.kind << "," << row.muls << "," << row.adds << "," << row.macs
       << "\n";
  os << "total,," << r.muls << "," << r.adds << "," << r.macs << "\n";
  return os.str();
}

inline std::string size_report_text(const SizeReport& r) {
  std::ostringstream os;
  os << "model size\n";
  for (const SizeItem& it : r.items)
    os << "  " << std::left << std::setw(28) << it.name << std::setw(9) << it.what << std::right
       << std::setw(10) << it.bytes << " B\n";
  os << "total: " << r.total_bytes << " B (" << format_kib(r.total_bytes) << ")\n";
  return os.str();
}

inline std::string size_report_csv(const SizeReport& r) {
  std::ostringstream os;
  os << "tensor,kind,bytes\n";
  for (const SizeItem& it : r.items) os << it.name << "," << it.what << "," << it.bytes << "\n";
  os << "total,," << r.total_bytes << "\n";
  return os.str();
}

inline std::string memory_report_text(const MemoryReport& r) {
  std::ostringstream os;
  os << "working memory\n";
  os << "  model bytes: " << r.model_bytes << "\n";
  for (const BufferBytes& b : r.buffers)
    os << "  buffer " << std::left << std::setw(20) << b.info.name << std::right << std::setw(8)
       << b.info.elements << " elems " << std::setw(10) << b.bytes << " B\n";
  os << "  peak buffer pair: " << r.peak_pair << " = " << r.peak_pair_bytes << " B\n";
  os << "total: " << r.total_bytes() << " B (" << format_kib(r.total_bytes()) << ")\n";
  return os.str();
}

}  // namespace thn
