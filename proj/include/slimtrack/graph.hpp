#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "slimtrack/autodiff.hpp"

namespace slimtrack {

enum class LayerKind {
  Input,
  Conv,
  BatchNorm,
  Relu,
  Gelu,
  MaxPool,
  Linear,
  LayerNorm,
  Mhsa,
  Mlp,
  ResidualAdd,
  PatchEmbed,
  SpatialReshape,
  TokenBias,
};

inline const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Input: return "input";
    case LayerKind::Conv: return "conv";
    case LayerKind::BatchNorm: return "bn";
    case LayerKind::Relu: return "relu";
    case LayerKind::Gelu: return "gelu";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::Linear: return "linear";
    case LayerKind::LayerNorm: return "layernorm";
    case LayerKind::Mhsa: return "mhsa";
    case LayerKind::Mlp: return "mlp";
    case LayerKind::ResidualAdd: return "residual_add";
    case LayerKind::PatchEmbed: return "patch_embed";
    case LayerKind::SpatialReshape: return "spatial_reshape";
    case LayerKind::TokenBias: return "token_bias";
  }
  return "?";
}

inline LayerKind kind_from_name(const std::string& s) {
  static const std::map<std::string, LayerKind> m = {
      {"input", LayerKind::Input},
      {"conv", LayerKind::Conv},
      {"bn", LayerKind::BatchNorm},
      {"relu", LayerKind::Relu},
      {"gelu", LayerKind::Gelu},
      {"maxpool", LayerKind::MaxPool},
      {"linear", LayerKind::Linear},
      {"layernorm", LayerKind::LayerNorm},
      {"mhsa", LayerKind::Mhsa},
      {"mlp", LayerKind::Mlp},
      {"residual_add", LayerKind::ResidualAdd},
      {"patch_embed", LayerKind::PatchEmbed},
      {"spatial_reshape", LayerKind::SpatialReshape},
      {"token_bias", LayerKind::TokenBias},
  };
  auto it = m.find(s);
  if (it == m.end()) throw ConfigError("unknown layer kind '" + s + "'");
  return it->second;
}

// Named vector of learnable scaling factors attached to one prunable axis.
struct GateVector {
  std::string id;
  Tensor values;  // 1-d, length = governed axis extent
  enum class Granularity { Channel, Head, HiddenUnit } granularity = Granularity::Channel;
  std::string layer_id;
  std::string block_id;  // set for residual-block internals
  std::string tag;       // "encoder"/"decoder" for decoupled planning

  int64_t size() const { return values.numel(); }
};

inline const char* granularity_name(GateVector::Granularity g) {
  switch (g) {
    case GateVector::Granularity::Channel: return "channel";
    case GateVector::Granularity::Head: return "head";
    case GateVector::Granularity::HiddenUnit: return "hidden_unit";
  }
  return "?";
}

inline GateVector::Granularity granularity_from_name(const std::string& s) {
  if (s == "channel") return GateVector::Granularity::Channel;
  if (s == "head") return GateVector::Granularity::Head;
  if (s == "hidden_unit") return GateVector::Granularity::HiddenUnit;
  throw ConfigError("unknown gate granularity '" + s + "'");
}

struct LayerSpec {
  std::string id;
  LayerKind kind = LayerKind::Input;
  std::vector<std::string> inputs;
  std::map<std::string, Tensor> params;       // learnable weights (ordered by name)
  std::map<std::string, Tensor> buffers;      // non-learnable state (BN running stats)
  std::map<std::string, int64_t> iattrs;      // stride, pad, heads, ...
  std::string gate_id;                        // empty when the layer has no gate
  bool prunable = false;

  int64_t attr(const std::string& k) const {
    auto it = iattrs.find(k);
    if (it == iattrs.end()) throw ConfigError("layer '" + id + "' missing attribute '" + k + "'");
    return it->second;
  }
  int64_t attr_or(const std::string& k, int64_t dflt) const {
    auto it = iattrs.find(k);
    return it == iattrs.end() ? dflt : it->second;
  }
  bool has_param(const std::string& k) const { return params.count(k) != 0; }
};

// Directed acyclic computation graph; nodes are stored in topological order.
struct ModelGraph {
  std::string arch;
  std::vector<LayerSpec> nodes;
  std::map<std::string, GateVector> gates;
  std::string input_id;
  std::string output_id;
  Shape input_shape;  // nominal single-sample input, e.g. [1,3,64,64]

  LayerSpec& node(const std::string& id) {
    for (auto& n : nodes)
      if (n.id == id) return n;
    throw ConfigError("no node '" + id + "' in graph");
  }
  const LayerSpec& node(const std::string& id) const {
    return const_cast<ModelGraph*>(this)->node(id);
  }
  bool has_node(const std::string& id) const {
    for (auto& n : nodes)
      if (n.id == id) return true;
    return false;
  }

  // ids of nodes consuming each node's output
  std::map<std::string, std::vector<std::string>> consumers() const {
    std::map<std::string, std::vector<std::string>> c;
    for (auto& n : nodes)
      for (auto& in : n.inputs) c[in].push_back(n.id);
    return c;
  }

  // Structural checks: known inputs, topological order, gates wired to
  // exactly one prunable axis with matching extents.
  void validate() const {
    std::set<std::string> seen;
    std::map<std::string, int> gate_refs;
    for (auto& n : nodes) {
      for (auto& in : n.inputs)
        if (!seen.count(in))
          throw ConfigError("node '" + n.id + "' consumes '" + in + "' before it is produced");
      if (seen.count(n.id)) throw ConfigError("duplicate node id '" + n.id + "'");
      seen.insert(n.id);
      if (!n.gate_id.empty()) gate_refs[n.gate_id]++;
    }
    if (!seen.count(output_id)) throw ConfigError("output node '" + output_id + "' missing");
    for (auto& [gid, g] : gates) {
      auto it = gate_refs.find(gid);
      if (it == gate_refs.end() || it->second != 1)
        throw ConfigError("gate '" + gid + "' must be referenced by exactly one layer");
      const LayerSpec& owner = [&]() -> const LayerSpec& {
        for (auto& n : nodes)
          if (n.gate_id == gid) return n;
        throw ConfigError("gate owner missing");
      }();
      int64_t extent = 0;
      switch (owner.kind) {
        case LayerKind::BatchNorm: extent = owner.params.at("beta").numel(); break;
        case LayerKind::Mhsa: extent = owner.attr("heads"); break;
        case LayerKind::Mlp: extent = owner.params.at("b1").numel(); break;
        default:
          throw ConfigError("gate '" + gid + "' attached to ungateable layer kind");
      }
      if (g.size() != extent)
        throw ConfigError("gate '" + gid + "' length " + std::to_string(g.size()) +
                          " != governed axis " + std::to_string(extent));
    }
  }
};

// Sinusoidal 2-d positional encoding for a square token grid, [T, dim].
inline Tensor positional_encoding(int64_t side, int64_t dim) {
  Tensor pe = Tensor::zeros({side * side, dim});
  int64_t half = dim / 2;
  for (int64_t y = 0; y < side; ++y)
    for (int64_t x = 0; x < side; ++x) {
      int64_t tok = y * side + x;
      for (int64_t i = 0; i < half; ++i) {
        double freq = std::pow(10000.0, -2.0 * double(i / 2) / double(half));
        double pos = (i % 2 == 0) ? double(x) : double(y);
        double v = (i % 2 == 0) ? std::sin(pos * freq) : std::cos(pos * freq);
        pe.data[size_t(tok * dim + i)] = v;
        // mirror the pattern in the second half against the other axis
        double pos2 = (i % 2 == 0) ? double(y) : double(x);
        double v2 = (i % 2 == 0) ? std::sin(pos2 * freq) : std::cos(pos2 * freq);
        if (half + i < dim) pe.data[size_t(tok * dim + half + i)] = v2;
      }
    }
  return pe;
}

// Binds a graph's parameters and gates to a tape once, then executes forward
// passes. Multiple run() calls share the same parameter leaves so gradients
// accumulate across calls (siamese pairs, gradient accumulation).
class GraphRunner {
 public:
  GraphRunner(ModelGraph& model, Tape& tape, bool training, bool with_grad = true)
      : model_(model), tape_(tape), training_(training) {
    for (auto& n : model_.nodes)
      for (auto& [name, tensor] : n.params)
        params_[n.id + "/" + name] = tape_.leaf(tensor, with_grad);
    for (auto& [gid, g] : model_.gates) gate_values_[gid] = tape_.leaf(g.values, with_grad);
  }

  Value param(const std::string& node_id, const std::string& name) const {
    return params_.at(node_id + "/" + name);
  }
  Value gate(const std::string& gid) const { return gate_values_.at(gid); }
  const std::map<std::string, Value>& all_params() const { return params_; }
  const std::map<std::string, Value>& all_gates() const { return gate_values_; }

  // Activation of a node from the most recent run().
  Value activation(const std::string& node_id) const { return acts_.at(node_id); }

  Value run(const Tensor& input) {
    acts_.clear();
    for (auto& n : model_.nodes) acts_[n.id] = eval_node(n, input);
    return acts_.at(model_.output_id);
  }

 private:
  Value in(const LayerSpec& n, size_t i = 0) { return acts_.at(n.inputs.at(i)); }

  Value eval_node(LayerSpec& n, const Tensor& input) {
    switch (n.kind) {
      case LayerKind::Input:
        return tape_.leaf(input, false);
      case LayerKind::Conv: {
        Value b = n.has_param("b") ? param(n.id, "b") : nullptr;
        return conv2d(tape_, in(n), param(n.id, "w"), b, n.attr("stride"), n.attr("pad"));
      }
      case LayerKind::BatchNorm: {
        Value gamma = n.gate_id.empty() ? param(n.id, "gamma") : gate(n.gate_id);
        return batchnorm(tape_, in(n), gamma, param(n.id, "beta"), n.buffers.at("running_mean"),
                         n.buffers.at("running_var"), 1e-5, 0.1, training_);
      }
      case LayerKind::Relu:
        return relu(tape_, in(n));
      case LayerKind::Gelu:
        return gelu(tape_, in(n));
      case LayerKind::MaxPool:
        return maxpool2d(tape_, in(n), n.attr_or("k", 2), n.attr_or("stride", 2));
      case LayerKind::Linear:
        return linear(tape_, in(n), param(n.id, "w"),
                      n.has_param("b") ? param(n.id, "b") : nullptr);
      case LayerKind::LayerNorm:
        return layer_norm(tape_, in(n), param(n.id, "gamma"), param(n.id, "beta"));
      case LayerKind::Mhsa:
        return eval_mhsa(n);
      case LayerKind::Mlp: {
        Value h = linear(tape_, in(n), param(n.id, "w1"), param(n.id, "b1"));
        h = gelu(tape_, h);
        if (!n.gate_id.empty()) h = mul_lastdim(tape_, h, gate(n.gate_id));
        return linear(tape_, h, param(n.id, "w2"), param(n.id, "b2"));
      }
      case LayerKind::ResidualAdd: {
        const Tensor& a = in(n, 0)->value;
        const Tensor& b = in(n, 1)->value;
        if (!a.same_shape(b))
          throw ShapeError("residual_add '" + n.id + "': channel axes disagree, " +
                           shape_str(a.shape) + " vs " + shape_str(b.shape));
        return add(tape_, in(n, 0), in(n, 1));
      }
      case LayerKind::PatchEmbed: {
        int64_t p = n.attr("patch");
        Value fm = conv2d(tape_, in(n), param(n.id, "w"), param(n.id, "b"), p, 0);
        Value tok = chw_to_tokens(tape_, fm);
        int64_t side = fm->value.shape[2];
        int64_t dim = fm->value.shape[1];
        return add_const(tape_, tok, positional_encoding(side, dim));
      }
      case LayerKind::SpatialReshape:
        return tokens_to_chw(tape_, in(n));
      case LayerKind::TokenBias:
        return token_bias(tape_, in(n), param(n.id, "b"));
    }
    throw ConfigError("unhandled layer kind");
  }

  // Per-head attention with an optional multiplicative head gate applied to
  // each head output before the combining projection. Cross-attention uses a
  // second input as key/value source.
  Value eval_mhsa(LayerSpec& n) {
    Value x = in(n, 0);
    Value kv = n.inputs.size() > 1 ? in(n, 1) : x;
    int64_t heads = n.attr("heads");
    if (heads == 0) return token_bias(tape_, x, param(n.id, "bo"));
    int64_t hd = param(n.id, "wq")->value.shape[0];
    if (hd % heads != 0)
      throw ShapeError("mhsa '" + n.id + "': head axis " + std::to_string(hd) +
                       " not divisible by " + std::to_string(heads) + " heads");
    int64_t dh = hd / heads;
    Value q = linear(tape_, x, param(n.id, "wq"), param(n.id, "bq"));
    Value k = linear(tape_, kv, param(n.id, "wk"), param(n.id, "bk"));
    Value v = linear(tape_, kv, param(n.id, "wv"), param(n.id, "bv"));
    double scale = 1.0 / std::sqrt(double(dh));
    std::vector<Value> outs;
    for (int64_t h = 0; h < heads; ++h) {
      Value qh = slice_lastdim(tape_, q, h * dh, dh);
      Value kh = slice_lastdim(tape_, k, h * dh, dh);
      Value vh = slice_lastdim(tape_, v, h * dh, dh);
      Value scores = scalar_mul(tape_, matmul_nt(tape_, qh, kh), scale);
      Value attn = softmax_lastdim(tape_, scores);
      Value oh = matmul(tape_, attn, vh);
      if (!n.gate_id.empty()) {
        Value g = slice_lastdim(tape_, gate(n.gate_id), h, 1);
        oh = scale_by(tape_, oh, g);
      }
      outs.push_back(oh);
    }
    Value cat = outs.size() == 1 ? outs[0] : concat_lastdim(tape_, outs);
    return linear(tape_, cat, param(n.id, "wo"), param(n.id, "bo"));
  }

  Value param(const std::string& nid, const std::string& name) {
    return params_.at(nid + "/" + name);
  }

  ModelGraph& model_;
  Tape& tape_;
  bool training_;
  std::map<std::string, Value> params_;
  std::map<std::string, Value> gate_values_;
  std::map<std::string, Value> acts_;
};

// Response map of a siamese pair: both crops run through the shared backbone,
// then the template features slide over the search features.
inline Value siamese_response(GraphRunner& runner, Tape& tape, const Tensor& templ,
                              const Tensor& search) {
  Value tf = runner.run(templ);
  Value sf = runner.run(search);
  Value resp = xcorr(tape, tf, sf);
  // normalize by the template-feature element count so logits stay O(1)
  return scalar_mul(tape, resp, 1.0 / double(tf->value.numel()));
}

// Convenience eval-mode forward (no gradients).
inline Tensor forward_eval(ModelGraph& model, const Tensor& input) {
  Tape tape;
  GraphRunner runner(model, tape, /*training=*/false, /*with_grad=*/false);
  return runner.run(input)->value;
}

inline Tensor siamese_forward(ModelGraph& model, const Tensor& templ, const Tensor& search) {
  Tape tape;
  GraphRunner runner(model, tape, false, false);
  return siamese_response(runner, tape, templ, search)->value;
}

}  // namespace slimtrack
