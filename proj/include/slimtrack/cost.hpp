#pragma once

#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "slimtrack/graph.hpp"

namespace slimtrack {

// Parameter and forward-FLOP accounting. Conventions (stated in every report
// header): 1 multiply-accumulate = 2 FLOPs; elementwise ops cost 1 FLOP per
// output element; normalizations (BN, LN, softmax) cost 5 per element;
// "params MB" assumes 4-byte weight storage.
struct CostReport {
  struct Row {
    std::string id;
    std::string kind;
    int64_t params = 0;
    int64_t flops = 0;
  };
  std::vector<Row> rows;
  int64_t total_params = 0;
  int64_t stats_params = 0;  // BN running statistics, not learnable
  int64_t total_flops = 0;
  std::map<std::string, int64_t> flops_by_kind;

  double params_mb() const { return double(total_params) * 4.0 / 1e6; }
  int64_t param_bytes() const { return total_params * 4; }

  void write_csv(const std::string& path) const {
    std::ofstream os(path);
    os << "# conventions: 1 MAC = 2 FLOPs; elementwise 1/elem; normalization 5/elem; "
          "params MB at 4 bytes/param\n";
    os << "layer_id,kind,params,flops\n";
    for (auto& r : rows) os << r.id << "," << r.kind << "," << r.params << "," << r.flops << "\n";
    os << "total,," << total_params << "," << total_flops << "\n";
  }
};

// Activation shapes for every node given an input shape.
inline std::map<std::string, Shape> infer_shapes(const ModelGraph& m, const Shape& input) {
  std::map<std::string, Shape> shapes;
  for (auto& n : m.nodes) {
    auto in = [&](size_t i = 0) -> const Shape& { return shapes.at(n.inputs.at(i)); };
    switch (n.kind) {
      case LayerKind::Input:
        shapes[n.id] = input;
        break;
      case LayerKind::Conv: {
        const Shape& x = in();
        const Tensor& w = n.params.at("w");
        if (x[1] != w.shape[1])
          throw ShapeError("conv '" + n.id + "': input channel axis " + std::to_string(x[1]) +
                           " != weight axis " + std::to_string(w.shape[1]));
        int64_t k = w.shape[2], s = n.attr("stride"), p = n.attr("pad");
        shapes[n.id] = {x[0], w.shape[0], (x[2] + 2 * p - k) / s + 1, (x[3] + 2 * p - k) / s + 1};
        break;
      }
      case LayerKind::BatchNorm:
      case LayerKind::Relu:
      case LayerKind::Gelu:
        shapes[n.id] = in();
        break;
      case LayerKind::MaxPool: {
        const Shape& x = in();
        int64_t k = n.attr_or("k", 2), s = n.attr_or("stride", 2);
        shapes[n.id] = {x[0], x[1], (x[2] - k) / s + 1, (x[3] - k) / s + 1};
        break;
      }
      case LayerKind::Linear: {
        Shape o = in();
        o.back() = n.params.at("w").shape[0];
        shapes[n.id] = o;
        break;
      }
      case LayerKind::LayerNorm:
      case LayerKind::Mhsa:
      case LayerKind::TokenBias:
        shapes[n.id] = in();
        break;
      case LayerKind::Mlp:
        shapes[n.id] = in();
        break;
      case LayerKind::ResidualAdd: {
        if (in(0) != in(1))
          throw ShapeError("residual_add '" + n.id + "': operand shapes disagree");
        shapes[n.id] = in(0);
        break;
      }
      case LayerKind::PatchEmbed: {
        const Shape& x = in();
        int64_t p = n.attr("patch");
        int64_t side = x[2] / p;
        shapes[n.id] = {side * (x[3] / p), n.params.at("w").shape[0]};
        break;
      }
      case LayerKind::SpatialReshape: {
        const Shape& x = in();
        auto side = int64_t(std::llround(std::sqrt(double(x[0]))));
        shapes[n.id] = {1, x[1], side, side};
        break;
      }
    }
  }
  return shapes;
}

inline CostReport count_params(const ModelGraph& m) {
  CostReport rep;
  for (auto& n : m.nodes) {
    CostReport::Row row;
    row.id = n.id;
    row.kind = kind_name(n.kind);
    for (auto& [name, t] : n.params) row.params += t.numel();
    if (!n.gate_id.empty()) row.params += m.gates.at(n.gate_id).values.numel();
    for (auto& [name, t] : n.buffers) rep.stats_params += t.numel();
    rep.total_params += row.params;
    rep.rows.push_back(row);
  }
  return rep;
}

inline CostReport count_flops(const ModelGraph& m, const Shape& input) {
  auto shapes = infer_shapes(m, input);
  CostReport rep = count_params(m);
  for (auto& row : rep.rows) {
    const LayerSpec& n = m.node(row.id);
    const Shape& out = shapes.at(n.id);
    int64_t out_elems = shape_numel(out);
    int64_t f = 0;
    switch (n.kind) {
      case LayerKind::Input:
        break;
      case LayerKind::Conv:
      case LayerKind::PatchEmbed: {
        const Tensor& w = n.params.at("w");
        // 2 * H' * W' * Cout * Cin * k^2 (per sample)
        int64_t spatial = n.kind == LayerKind::Conv ? out[2] * out[3] * out[0] : out[0];
        f = 2 * spatial * w.shape[0] * w.shape[1] * w.shape[2] * w.shape[3];
        break;
      }
      case LayerKind::BatchNorm:
      case LayerKind::LayerNorm:
        f = 5 * out_elems;
        break;
      case LayerKind::Relu:
      case LayerKind::Gelu:
      case LayerKind::ResidualAdd:
      case LayerKind::MaxPool:
      case LayerKind::TokenBias:
        f = out_elems;
        break;
      case LayerKind::Linear: {
        const Tensor& w = n.params.at("w");
        f = 2 * (shape_numel(out) / w.shape[0]) * w.shape[0] * w.shape[1];
        break;
      }
      case LayerKind::Mhsa: {
        int64_t tokens = shapes.at(n.inputs.at(0))[0];
        int64_t kv_tokens = n.inputs.size() > 1 ? shapes.at(n.inputs.at(1))[0] : tokens;
        int64_t dim = out.back();
        int64_t hd = n.params.at("wq").shape[0];  // active head dims
        // q/k/v and combining projections as linears
        f = 2 * tokens * hd * dim + 2 * 2 * kv_tokens * hd * dim;  // q on tokens, k/v on kv
        f += 2 * tokens * dim * hd;                                // output projection
        // score and value mixing: 2 * 2 * T^2 * d
        f += 2 * 2 * tokens * kv_tokens * hd;
        // softmax over scores
        int64_t heads = n.attr("heads");
        f += 5 * heads * tokens * kv_tokens;
        break;
      }
      case LayerKind::Mlp: {
        int64_t tokens = shape_numel(out) / out.back();
        int64_t dim = out.back();
        int64_t hidden = n.params.at("b1").numel();
        f = 2 * tokens * hidden * dim;  // w1
        f += tokens * hidden;           // activation
        if (!n.gate_id.empty()) f += tokens * hidden;  // unit mask
        f += 2 * tokens * dim * hidden;  // w2
        break;
      }
      case LayerKind::SpatialReshape:
        break;
    }
    row.flops = f;
    rep.total_flops += f;
    rep.flops_by_kind[row.kind] += f;
  }
  return rep;
}

// Per-gate active fraction, for sparsity-pattern reports.
inline std::map<std::string, double> active_fraction(const ModelGraph& original,
                                                     const ModelGraph& pruned) {
  std::map<std::string, double> out;
  for (auto& [gid, g] : original.gates) {
    auto it = pruned.gates.find(gid);
    int64_t active = it == pruned.gates.end() ? 0 : it->second.size();
    out[gid] = double(active) / double(g.size());
  }
  return out;
}

}  // namespace slimtrack
