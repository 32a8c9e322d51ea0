#pragma once

#include <string>
#include <vector>

#include "slimtrack/graph.hpp"

namespace slimtrack {

namespace detail {

inline Tensor randn(Rng& rng, Shape s, double stddev) {
  Tensor t = Tensor::zeros(std::move(s));
  for (auto& v : t.data) v = rng.normal(0.0, stddev);
  return t;
}

inline LayerSpec conv_layer(const std::string& id, const std::string& input, Rng& rng, int64_t cin,
                            int64_t cout, int64_t k, int64_t stride, int64_t pad, bool bias) {
  LayerSpec n;
  n.id = id;
  n.kind = LayerKind::Conv;
  n.inputs = {input};
  n.params["w"] = randn(rng, {cout, cin, k, k}, std::sqrt(2.0 / double(cin * k * k)));
  if (bias) n.params["b"] = Tensor::zeros({cout});
  n.iattrs["stride"] = stride;
  n.iattrs["pad"] = pad;
  return n;
}

// Ungated BN: gamma lives in params. Gated BN: gamma is the gate vector,
// created by the caller.
inline LayerSpec bn_layer(const std::string& id, const std::string& input, int64_t c,
                          const std::string& gate_id) {
  LayerSpec n;
  n.id = id;
  n.kind = LayerKind::BatchNorm;
  n.inputs = {input};
  if (gate_id.empty()) n.params["gamma"] = Tensor::full({c}, 1.0);
  n.params["beta"] = Tensor::zeros({c});
  n.buffers["running_mean"] = Tensor::zeros({c});
  n.buffers["running_var"] = Tensor::full({c}, 1.0);
  n.gate_id = gate_id;
  n.prunable = !gate_id.empty();
  return n;
}

inline LayerSpec unary(const std::string& id, LayerKind kind, const std::string& input) {
  LayerSpec n;
  n.id = id;
  n.kind = kind;
  n.inputs = {input};
  return n;
}

inline LayerSpec mhsa_layer(const std::string& id, const std::string& input,
                            const std::string& kv_input, Rng& rng, int64_t dim, int64_t heads,
                            const std::string& gate_id) {
  LayerSpec n;
  n.id = id;
  n.kind = LayerKind::Mhsa;
  n.inputs = {input};
  if (!kv_input.empty()) n.inputs.push_back(kv_input);
  double s = std::sqrt(1.0 / double(dim));
  n.params["wq"] = randn(rng, {dim, dim}, s);
  n.params["wk"] = randn(rng, {dim, dim}, s);
  n.params["wv"] = randn(rng, {dim, dim}, s);
  n.params["wo"] = randn(rng, {dim, dim}, s);
  n.params["bq"] = Tensor::zeros({dim});
  n.params["bk"] = Tensor::zeros({dim});
  n.params["bv"] = Tensor::zeros({dim});
  n.params["bo"] = Tensor::zeros({dim});
  n.iattrs["heads"] = heads;
  n.gate_id = gate_id;
  n.prunable = !gate_id.empty();
  return n;
}

inline LayerSpec mlp_layer(const std::string& id, const std::string& input, Rng& rng, int64_t dim,
                           int64_t hidden, const std::string& gate_id) {
  LayerSpec n;
  n.id = id;
  n.kind = LayerKind::Mlp;
  n.inputs = {input};
  n.params["w1"] = randn(rng, {hidden, dim}, std::sqrt(1.0 / double(dim)));
  n.params["b1"] = Tensor::zeros({hidden});
  n.params["w2"] = randn(rng, {dim, hidden}, std::sqrt(1.0 / double(hidden)));
  n.params["b2"] = Tensor::zeros({dim});
  n.gate_id = gate_id;
  n.prunable = !gate_id.empty();
  return n;
}

inline LayerSpec ln_layer(const std::string& id, const std::string& input, int64_t dim) {
  LayerSpec n;
  n.id = id;
  n.kind = LayerKind::LayerNorm;
  n.inputs = {input};
  n.params["gamma"] = Tensor::full({dim}, 1.0);
  n.params["beta"] = Tensor::zeros({dim});
  return n;
}

inline void add_gate(ModelGraph& g, const std::string& gid, int64_t len,
                     GateVector::Granularity gran, const std::string& layer_id,
                     const std::string& block_id = "", const std::string& tag = "") {
  GateVector gv;
  gv.id = gid;
  gv.values = Tensor::full({len}, 0.5);
  gv.granularity = gran;
  gv.layer_id = layer_id;
  gv.block_id = block_id;
  gv.tag = tag;
  g.gates[gid] = gv;
}

}  // namespace detail

// Five conv blocks; the first four carry prunable BN gates, the last block is
// a plain conv without normalization.
inline ModelGraph build_mini_alex(const std::vector<int64_t>& widths, uint64_t seed) {
  if (widths.size() < 5) throw ConfigError("build_mini_alex: needs 5 channel widths, got " +
                                           std::to_string(widths.size()));
  for (auto w : widths)
    if (w < 1) throw ConfigError("build_mini_alex: widths must be positive");
  Rng rng(seed);
  ModelGraph g;
  g.arch = "mini_alex";
  g.input_shape = {1, 3, 64, 64};
  LayerSpec in;
  in.id = "in";
  g.nodes.push_back(in);
  int64_t prev = 3;
  std::string cur = "in";
  for (int i = 0; i < 5; ++i) {
    std::string b = "b" + std::to_string(i + 1);
    bool gated = i < 4;
    g.nodes.push_back(detail::conv_layer(b + "_conv", cur, rng, prev, widths[size_t(i)], 3, 1, 1,
                                         /*bias=*/!gated));
    cur = b + "_conv";
    if (gated) {
      std::string gid = "g_" + b;
      detail::add_gate(g, gid, widths[size_t(i)], GateVector::Granularity::Channel, b + "_bn");
      g.nodes.push_back(detail::bn_layer(b + "_bn", cur, widths[size_t(i)], gid));
      cur = b + "_bn";
      g.nodes.push_back(detail::unary(b + "_relu", LayerKind::Relu, cur));
      cur = b + "_relu";
    }
    if (i < 2) {
      g.nodes.push_back(detail::unary(b + "_pool", LayerKind::MaxPool, cur));
      cur = b + "_pool";
    }
    prev = widths[size_t(i)];
  }
  g.input_id = "in";
  g.output_id = cur;
  g.validate();
  return g;
}

// Bottleneck residual stages. Only the two internal BN gammas of each block
// are prunable; trunk channels carry no gates.
inline ModelGraph build_mini_resnet(int64_t stages, int64_t blocks_per_stage,
                                    const std::vector<int64_t>& trunk_widths, uint64_t seed) {
  if (int64_t(trunk_widths.size()) != stages)
    throw ConfigError("build_mini_resnet: need one trunk width per stage");
  for (auto w : trunk_widths)
    if (w % 4 != 0)
      throw ConfigError("build_mini_resnet: trunk width " + std::to_string(w) +
                        " not divisible by bottleneck factor 4");
  Rng rng(seed);
  ModelGraph g;
  g.arch = "mini_resnet";
  g.input_shape = {1, 3, 64, 64};
  LayerSpec in;
  in.id = "in";
  g.nodes.push_back(in);
  g.nodes.push_back(detail::conv_layer("stem_conv", "in", rng, 3, trunk_widths[0], 3, 1, 1, false));
  g.nodes.push_back(detail::bn_layer("stem_bn", "stem_conv", trunk_widths[0], ""));
  g.nodes.push_back(detail::unary("stem_relu", LayerKind::Relu, "stem_bn"));
  g.nodes.push_back(detail::unary("stem_pool", LayerKind::MaxPool, "stem_relu"));
  std::string cur = "stem_pool";
  int64_t prev = trunk_widths[0];
  for (int64_t s = 0; s < stages; ++s) {
    int64_t w = trunk_widths[size_t(s)];
    if (w != prev) {
      std::string t = "s" + std::to_string(s) + "_trans";
      g.nodes.push_back(detail::conv_layer(t + "_conv", cur, rng, prev, w, 1, 1, 0, false));
      g.nodes.push_back(detail::bn_layer(t + "_bn", t + "_conv", w, ""));
      g.nodes.push_back(detail::unary(t + "_relu", LayerKind::Relu, t + "_bn"));
      g.nodes.push_back(detail::unary(t + "_pool", LayerKind::MaxPool, t + "_relu"));
      cur = t + "_pool";
      prev = w;
    }
    int64_t mid = w / 4;
    for (int64_t b = 0; b < blocks_per_stage; ++b) {
      std::string blk = "s" + std::to_string(s) + "b" + std::to_string(b);
      std::string skip = cur;
      g.nodes.push_back(detail::conv_layer(blk + "_c1", cur, rng, w, mid, 1, 1, 0, false));
      detail::add_gate(g, "g_" + blk + "_1", mid, GateVector::Granularity::Channel, blk + "_bn1",
                       blk);
      g.nodes.push_back(detail::bn_layer(blk + "_bn1", blk + "_c1", mid, "g_" + blk + "_1"));
      g.nodes.push_back(detail::unary(blk + "_r1", LayerKind::Relu, blk + "_bn1"));
      g.nodes.push_back(detail::conv_layer(blk + "_c2", blk + "_r1", rng, mid, mid, 3, 1, 1, false));
      detail::add_gate(g, "g_" + blk + "_2", mid, GateVector::Granularity::Channel, blk + "_bn2",
                       blk);
      g.nodes.push_back(detail::bn_layer(blk + "_bn2", blk + "_c2", mid, "g_" + blk + "_2"));
      g.nodes.push_back(detail::unary(blk + "_r2", LayerKind::Relu, blk + "_bn2"));
      g.nodes.push_back(detail::conv_layer(blk + "_c3", blk + "_r2", rng, mid, w, 1, 1, 0, false));
      g.nodes.push_back(detail::bn_layer(blk + "_bn3", blk + "_c3", w, ""));
      LayerSpec addn;
      addn.id = blk + "_add";
      addn.kind = LayerKind::ResidualAdd;
      addn.inputs = {skip, blk + "_bn3"};
      g.nodes.push_back(addn);
      g.nodes.push_back(detail::unary(blk + "_out", LayerKind::Relu, blk + "_add"));
      cur = blk + "_out";
    }
  }
  g.input_id = "in";
  g.output_id = cur;
  g.validate();
  return g;
}

namespace detail {
// Pre-norm encoder layer: x + mhsa(ln(x)), then x + mlp(ln(x)).
inline std::string encoder_layer(ModelGraph& g, Rng& rng, const std::string& prefix,
                                 const std::string& input, int64_t dim, int64_t heads,
                                 int64_t hidden, const std::string& tag) {
  g.nodes.push_back(ln_layer(prefix + "_ln1", input, dim));
  add_gate(g, "g_" + prefix + "_attn", heads, GateVector::Granularity::Head, prefix + "_attn", "",
           tag);
  g.nodes.push_back(
      mhsa_layer(prefix + "_attn", prefix + "_ln1", "", rng, dim, heads, "g_" + prefix + "_attn"));
  LayerSpec a1;
  a1.id = prefix + "_add1";
  a1.kind = LayerKind::ResidualAdd;
  a1.inputs = {input, prefix + "_attn"};
  g.nodes.push_back(a1);
  g.nodes.push_back(ln_layer(prefix + "_ln2", prefix + "_add1", dim));
  add_gate(g, "g_" + prefix + "_mlp", hidden, GateVector::Granularity::HiddenUnit, prefix + "_mlp",
           "", tag);
  g.nodes.push_back(mlp_layer(prefix + "_mlp", prefix + "_ln2", rng, dim, hidden,
                              "g_" + prefix + "_mlp"));
  LayerSpec a2;
  a2.id = prefix + "_add2";
  a2.kind = LayerKind::ResidualAdd;
  a2.inputs = {prefix + "_add1", prefix + "_mlp"};
  g.nodes.push_back(a2);
  return prefix + "_add2";
}
}  // namespace detail

// Pre-norm encoder stack over patch tokens; per-head attention gates and
// per-hidden-unit MLP gates, embedding dimension ungated.
inline ModelGraph build_mini_vit(int64_t layers = 6, int64_t dim = 64, int64_t heads = 4,
                                 int64_t mlp_ratio = 4, int64_t patch = 8, uint64_t seed = 0) {
  if (dim % heads != 0)
    throw ConfigError("build_mini_vit: embed dim " + std::to_string(dim) +
                      " not divisible by heads " + std::to_string(heads));
  Rng rng(seed);
  ModelGraph g;
  g.arch = "mini_vit";
  g.input_shape = {1, 3, 64, 64};
  LayerSpec in;
  in.id = "in";
  g.nodes.push_back(in);
  LayerSpec pe;
  pe.id = "patch";
  pe.kind = LayerKind::PatchEmbed;
  pe.inputs = {"in"};
  pe.params["w"] = detail::randn(rng, {dim, 3, patch, patch}, std::sqrt(2.0 / double(3 * patch * patch)));
  pe.params["b"] = Tensor::zeros({dim});
  pe.iattrs["patch"] = patch;
  g.nodes.push_back(pe);
  std::string cur = "patch";
  for (int64_t l = 0; l < layers; ++l)
    cur = detail::encoder_layer(g, rng, "l" + std::to_string(l), cur, dim, heads, dim * mlp_ratio,
                                "");
  g.nodes.push_back(detail::ln_layer("final_ln", cur, dim));
  g.nodes.push_back(detail::unary("spatial", LayerKind::SpatialReshape, "final_ln"));
  g.input_id = "in";
  g.output_id = "spatial";
  g.validate();
  return g;
}

// Encoder stack feeding a decoder stack (self-attention, cross-attention and
// MLP per decoder layer); gates are tagged encoder/decoder for decoupled
// planning.
inline ModelGraph build_mini_encdec(int64_t stacks = 4, int64_t dim = 96, int64_t heads = 4,
                                    int64_t ffn = 768, uint64_t seed = 0) {
  if (dim % heads != 0)
    throw ConfigError("build_mini_encdec: dim " + std::to_string(dim) +
                      " not divisible by heads " + std::to_string(heads));
  Rng rng(seed);
  ModelGraph g;
  g.arch = "mini_encdec";
  g.input_shape = {1, 3, 64, 64};
  int64_t patch = 8;
  LayerSpec in;
  in.id = "in";
  g.nodes.push_back(in);
  LayerSpec pe;
  pe.id = "patch";
  pe.kind = LayerKind::PatchEmbed;
  pe.inputs = {"in"};
  pe.params["w"] = detail::randn(rng, {dim, 3, patch, patch}, std::sqrt(2.0 / double(3 * patch * patch)));
  pe.params["b"] = Tensor::zeros({dim});
  pe.iattrs["patch"] = patch;
  g.nodes.push_back(pe);
  std::string cur = "patch";
  for (int64_t l = 0; l < stacks; ++l)
    cur = detail::encoder_layer(g, rng, "enc" + std::to_string(l), cur, dim, heads, ffn, "encoder");
  g.nodes.push_back(detail::ln_layer("enc_ln", cur, dim));
  std::string memory = "enc_ln";
  cur = "patch";
  for (int64_t l = 0; l < stacks; ++l) {
    std::string p = "dec" + std::to_string(l);
    g.nodes.push_back(detail::ln_layer(p + "_ln1", cur, dim));
    detail::add_gate(g, "g_" + p + "_self", heads, GateVector::Granularity::Head, p + "_self", "",
                     "decoder");
    g.nodes.push_back(
        detail::mhsa_layer(p + "_self", p + "_ln1", "", rng, dim, heads, "g_" + p + "_self"));
    LayerSpec a1;
    a1.id = p + "_add1";
    a1.kind = LayerKind::ResidualAdd;
    a1.inputs = {cur, p + "_self"};
    g.nodes.push_back(a1);
    g.nodes.push_back(detail::ln_layer(p + "_ln2", p + "_add1", dim));
    detail::add_gate(g, "g_" + p + "_cross", heads, GateVector::Granularity::Head, p + "_cross", "",
                     "decoder");
    g.nodes.push_back(detail::mhsa_layer(p + "_cross", p + "_ln2", memory, rng, dim, heads,
                                         "g_" + p + "_cross"));
    LayerSpec a2;
    a2.id = p + "_add2";
    a2.kind = LayerKind::ResidualAdd;
    a2.inputs = {p + "_add1", p + "_cross"};
    g.nodes.push_back(a2);
    g.nodes.push_back(detail::ln_layer(p + "_ln3", p + "_add2", dim));
    detail::add_gate(g, "g_" + p + "_mlp", ffn, GateVector::Granularity::HiddenUnit, p + "_mlp", "",
                     "decoder");
    g.nodes.push_back(detail::mlp_layer(p + "_mlp", p + "_ln3", rng, dim, ffn, "g_" + p + "_mlp"));
    LayerSpec a3;
    a3.id = p + "_add3";
    a3.kind = LayerKind::ResidualAdd;
    a3.inputs = {p + "_add2", p + "_mlp"};
    g.nodes.push_back(a3);
    cur = p + "_add3";
  }
  g.nodes.push_back(detail::ln_layer("dec_ln", cur, dim));
  g.nodes.push_back(detail::unary("spatial", LayerKind::SpatialReshape, "dec_ln"));
  g.input_id = "in";
  g.output_id = "spatial";
  g.validate();
  return g;
}

inline ModelGraph build_model(const std::string& arch, uint64_t seed) {
  if (arch == "mini_alex") return build_mini_alex({32, 64, 96, 96, 64}, seed);
  if (arch == "mini_resnet") return build_mini_resnet(2, 2, {32, 64}, seed);
  if (arch == "mini_vit") return build_mini_vit(6, 64, 4, 4, 8, seed);
  if (arch == "mini_encdec") return build_mini_encdec(4, 96, 4, 768, seed);
  throw ConfigError("unknown architecture '" + arch + "'");
}

}  // namespace slimtrack
