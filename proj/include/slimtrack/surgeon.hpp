#pragma once

#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "slimtrack/planner.hpp"
#include "slimtrack/zoo.hpp"

namespace slimtrack {

struct SurgeryReport {
  struct LayerEntry {
    std::string gate_id;
    std::string layer_id;
    int64_t removed = 0;
    int64_t kept = 0;
  };
  std::vector<LayerEntry> layers;
  int64_t params_before = 0;
  int64_t params_after = 0;
  double equivalence_residual = -1.0;  // max abs output diff on probe inputs
  std::vector<std::string> removed_modules;  // attention modules dropped outright

  void write_csv(const std::string& path) const {
    std::ofstream os(path);
    os << "gate_id,layer_id,removed,kept\n";
    for (auto& l : layers)
      os << l.gate_id << "," << l.layer_id << "," << l.removed << "," << l.kept << "\n";
    os << "total,params_before=" << params_before << ",params_after=" << params_after
       << ",equivalence_residual=" << equivalence_residual << "\n";
  }
};

namespace detail {

inline void check_plan(const ModelGraph& model, const PruningPlan& plan) {
  for (auto& [gid, mask] : plan.keep) {
    auto it = model.gates.find(gid);
    if (it == model.gates.end())
      throw ConfigError("plan references unknown gate '" + gid + "'");
    if (int64_t(mask.size()) != it->second.size())
      throw ConfigError("plan mask for '" + gid + "' has length " +
                        std::to_string(mask.size()) + ", gate has " +
                        std::to_string(it->second.size()));
  }
}

inline std::vector<int64_t> kept_indices(const std::vector<uint8_t>& mask) {
  std::vector<int64_t> idx;
  for (size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) idx.push_back(int64_t(i));
  return idx;
}

// Slice a tensor along one axis, keeping the given indices.
inline Tensor take_axis(const Tensor& t, size_t axis, const std::vector<int64_t>& keep) {
  Shape oshape = t.shape;
  oshape[axis] = int64_t(keep.size());
  Tensor out = Tensor::zeros(oshape);
  int64_t outer = 1, inner = 1;
  for (size_t i = 0; i < axis; ++i) outer *= t.shape[i];
  for (size_t i = axis + 1; i < t.shape.size(); ++i) inner *= t.shape[i];
  int64_t in_axis = t.shape[axis];
  for (int64_t o = 0; o < outer; ++o)
    for (size_t ki = 0; ki < keep.size(); ++ki)
      for (int64_t j = 0; j < inner; ++j)
        out.data[size_t((o * int64_t(keep.size()) + int64_t(ki)) * inner + j)] =
            t.data[size_t((o * in_axis + keep[ki]) * inner + j)];
  return out;
}

inline int64_t count_learnable(const ModelGraph& m) {
  int64_t n = 0;
  for (auto& node : m.nodes)
    for (auto& [name, t] : node.params) n += t.numel();
  for (auto& [gid, g] : m.gates) n += g.values.numel();
  return n;
}

// Walk forward from a BN whose channels shrink, slicing the input axis of
// every conv/linear consumer. Relu/pool layers pass channel deletions
// through untouched; hitting a residual join means a trunk axis was gated,
// which the zoo never produces.
inline void propagate_channel_cut(ModelGraph& m, const std::string& from,
                                  const std::vector<int64_t>& keep,
                                  const std::map<std::string, std::vector<std::string>>& cons) {
  std::vector<std::string> frontier = {from};
  while (!frontier.empty()) {
    std::string cur = frontier.back();
    frontier.pop_back();
    auto it = cons.find(cur);
    if (it == cons.end()) {
      if (cur != m.output_id && from == cur)
        throw ConfigError("gated layer '" + from + "' has no consumer");
      continue;
    }
    for (auto& cid : it->second) {
      LayerSpec& c = m.node(cid);
      switch (c.kind) {
        case LayerKind::Conv:
          c.params["w"] = take_axis(c.params["w"], 1, keep);
          break;
        case LayerKind::Linear:
          c.params["w"] = take_axis(c.params["w"], 1, keep);
          break;
        case LayerKind::Relu:
        case LayerKind::Gelu:
        case LayerKind::MaxPool:
          frontier.push_back(cid);
          break;
        case LayerKind::ResidualAdd:
          throw ConfigError("attempted channel removal on ungated residual trunk at '" + cid +
                            "'");
        default:
          throw ConfigError("channel cut reached unsupported consumer '" + cid + "'");
      }
    }
  }
}

}  // namespace detail

// Sets gamma = 0 (and the paired beta, for BN) or mask entry = 0 for every
// dropped entry; shapes are unchanged. Idempotent.
inline ModelGraph zero_pruned(const ModelGraph& model, const PruningPlan& plan) {
  detail::check_plan(model, plan);
  ModelGraph out = model;
  for (auto& [gid, mask] : plan.keep) {
    GateVector& g = out.gates.at(gid);
    LayerSpec& owner = out.node(g.layer_id);
    for (size_t i = 0; i < mask.size(); ++i) {
      if (mask[i]) continue;
      g.values[int64_t(i)] = 0.0;
      if (owner.kind == LayerKind::BatchNorm) owner.params.at("beta")[int64_t(i)] = 0.0;
    }
  }
  return out;
}

// Physically removes dropped channels/heads/units, shrinking the producer and
// consumer weight tensors. Operates on eval-mode statistics; the result is
// functionally identical to zero_pruned on the same plan.
inline ModelGraph rewrite(const ModelGraph& model, const PruningPlan& plan,
                          SurgeryReport* report = nullptr) {
  detail::check_plan(model, plan);
  ModelGraph out = model;
  SurgeryReport rep;
  rep.params_before = detail::count_learnable(model);
  auto cons = out.consumers();
  for (auto& [gid, mask] : plan.keep) {
    GateVector& g = out.gates.at(gid);
    auto keep = detail::kept_indices(mask);
    LayerSpec& owner = out.node(g.layer_id);
    switch (g.granularity) {
      case GateVector::Granularity::Channel: {
        if (owner.kind != LayerKind::BatchNorm)
          throw ConfigError("channel gate '" + gid + "' not owned by a BN layer");
        LayerSpec& producer = out.node(owner.inputs.at(0));
        if (producer.kind != LayerKind::Conv)
          throw ConfigError("channel gate '" + gid + "' producer is not a conv");
        producer.params["w"] = detail::take_axis(producer.params["w"], 0, keep);
        if (producer.has_param("b"))
          producer.params["b"] = detail::take_axis(producer.params["b"], 0, keep);
        owner.params["beta"] = detail::take_axis(owner.params["beta"], 0, keep);
        owner.buffers["running_mean"] = detail::take_axis(owner.buffers["running_mean"], 0, keep);
        owner.buffers["running_var"] = detail::take_axis(owner.buffers["running_var"], 0, keep);
        detail::propagate_channel_cut(out, owner.id, keep, cons);
        break;
      }
      case GateVector::Granularity::Head: {
        if (owner.kind != LayerKind::Mhsa)
          throw ConfigError("head gate '" + gid + "' not owned by an attention layer");
        int64_t heads = owner.attr("heads");
        int64_t dh = owner.params["wq"].shape[0] / heads;
        std::vector<int64_t> rows;
        for (int64_t h : keep)
          for (int64_t r = 0; r < dh; ++r) rows.push_back(h * dh + r);
        for (const char* p : {"wq", "wk", "wv"})
          owner.params[p] = detail::take_axis(owner.params[p], 0, rows);
        for (const char* p : {"bq", "bk", "bv"})
          owner.params[p] = detail::take_axis(owner.params[p], 0, rows);
        owner.params["wo"] = detail::take_axis(owner.params["wo"], 1, rows);
        owner.iattrs["heads"] = int64_t(keep.size());
        break;
      }
      case GateVector::Granularity::HiddenUnit: {
        if (owner.kind != LayerKind::Mlp)
          throw ConfigError("unit gate '" + gid + "' not owned by an MLP layer");
        owner.params["w1"] = detail::take_axis(owner.params["w1"], 0, keep);
        owner.params["b1"] = detail::take_axis(owner.params["b1"], 0, keep);
        owner.params["w2"] = detail::take_axis(owner.params["w2"], 1, keep);
        break;
      }
    }
    g.values = detail::take_axis(g.values, 0, keep);
    rep.layers.push_back({gid, g.layer_id, int64_t(mask.size()) - int64_t(keep.size()),
                          int64_t(keep.size())});
  }
  out.validate();
  rep.params_after = detail::count_learnable(out);
  if (report) *report = rep;
  return out;
}

// Replaces attention modules whose head count reached zero. A headless
// module contributes only its combining-projection bias, so it collapses to
// a constant per-token bias on the residual branch; layers left without
// consumers are dropped.
inline ModelGraph remove_dead_attention(const ModelGraph& model,
                                        std::vector<std::string>* removed = nullptr) {
  ModelGraph out = model;
  std::vector<std::string> dropped;
  for (auto& n : out.nodes) {
    if (n.kind != LayerKind::Mhsa || n.attr("heads") != 0) continue;
    dropped.push_back(n.id);
    LayerSpec bias;
    bias.id = n.id;
    bias.kind = LayerKind::TokenBias;
    // wire to the residual source so the pre-norm that fed only this module
    // becomes dead
    const LayerSpec& prev = out.node(n.inputs.at(0));
    bias.inputs = {prev.kind == LayerKind::LayerNorm ? prev.inputs.at(0) : n.inputs.at(0)};
    bias.params["b"] = n.params.at("bo");
    if (!n.gate_id.empty()) out.gates.erase(n.gate_id);
    n = bias;
  }
  // drop nodes no longer reachable from the output
  std::set<std::string> live;
  std::vector<std::string> stack = {out.output_id};
  while (!stack.empty()) {
    std::string id = stack.back();
    stack.pop_back();
    if (!live.insert(id).second) continue;
    for (auto& in : out.node(id).inputs) stack.push_back(in);
  }
  std::vector<LayerSpec> kept_nodes;
  for (auto& n : out.nodes)
    if (live.count(n.id)) kept_nodes.push_back(n);
  out.nodes = std::move(kept_nodes);
  out.validate();
  if (removed) *removed = dropped;
  return out;
}

// Paired-forward check: rewrite vs zero_pruned on random probe inputs.
inline double equivalence_residual(const ModelGraph& original, const PruningPlan& plan,
                                   int probes = 5, uint64_t seed = 0) {
  ModelGraph zeroed = zero_pruned(original, plan);
  ModelGraph cut = rewrite(original, plan);
  Rng rng(seed + 0x5eed);
  double worst = 0.0;
  for (int p = 0; p < probes; ++p) {
    Tensor x = Tensor::zeros(original.input_shape);
    for (auto& v : x.data) v = rng.uniform();
    Tensor a = forward_eval(zeroed, x);
    Tensor b = forward_eval(cut, x);
    worst = std::max(worst, max_abs_diff(a, b));
  }
  return worst;
}

}  // namespace slimtrack
