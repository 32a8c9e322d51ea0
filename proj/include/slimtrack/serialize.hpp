#pragma once

#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "slimtrack/planner.hpp"
#include "slimtrack/zoo.hpp"

namespace slimtrack {

using ojson = nlohmann::ordered_json;

namespace detail {

inline const char* b64_alphabet() {
  return "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

inline std::string b64_encode(const unsigned char* data, size_t n) {
  const char* tab = b64_alphabet();
  std::string out;
  out.reserve((n + 2) / 3 * 4);
  for (size_t i = 0; i < n; i += 3) {
    uint32_t v = uint32_t(data[i]) << 16;
    if (i + 1 < n) v |= uint32_t(data[i + 1]) << 8;
    if (i + 2 < n) v |= uint32_t(data[i + 2]);
    out.push_back(tab[(v >> 18) & 63]);
    out.push_back(tab[(v >> 12) & 63]);
    out.push_back(i + 1 < n ? tab[(v >> 6) & 63] : '=');
    out.push_back(i + 2 < n ? tab[v & 63] : '=');
  }
  return out;
}

inline std::vector<unsigned char> b64_decode(const std::string& s) {
  int rev[256];
  std::memset(rev, -1, sizeof(rev));
  const char* tab = b64_alphabet();
  for (int i = 0; i < 64; ++i) rev[int((unsigned char)tab[i])] = i;
  std::vector<unsigned char> out;
  uint32_t buf = 0;
  int bits = 0;
  for (char c : s) {
    if (c == '=' || c == '\n') continue;
    int v = rev[int((unsigned char)c)];
    if (v < 0) throw ConfigError("invalid base64 payload");
    buf = (buf << 6) | uint32_t(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back((unsigned char)((buf >> bits) & 0xff));
    }
  }
  return out;
}

// Little-endian doubles, base64-encoded.
inline ojson tensor_to_json(const Tensor& t) {
  ojson j;
  j["shape"] = t.shape;
  static_assert(sizeof(double) == 8);
  j["data"] = b64_encode(reinterpret_cast<const unsigned char*>(t.data.data()),
                         t.data.size() * sizeof(double));
  return j;
}

inline Tensor tensor_from_json(const ojson& j) {
  Shape shape = j.at("shape").get<Shape>();
  auto bytes = b64_decode(j.at("data").get<std::string>());
  if (int64_t(bytes.size()) != shape_numel(shape) * 8)
    throw ConfigError("tensor payload length does not match shape");
  std::vector<double> data(size_t(shape_numel(shape)));
  std::memcpy(data.data(), bytes.data(), bytes.size());
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace detail

struct Provenance {
  uint64_t master_seed = 0;
  std::string parent_hash;  // hash of the artifact this one was derived from
};

inline ojson graph_to_json(const ModelGraph& m, const Provenance& prov) {
  ojson j;
  j["format"] = "slimtrack-graph";
  j["version"] = 1;
  j["arch"] = m.arch;
  j["input_id"] = m.input_id;
  j["output_id"] = m.output_id;
  j["input_shape"] = m.input_shape;
  j["provenance"] = {{"master_seed", prov.master_seed}, {"parent_hash", prov.parent_hash}};
  ojson nodes = ojson::array();
  for (auto& n : m.nodes) {
    ojson nj;
    nj["id"] = n.id;
    nj["kind"] = kind_name(n.kind);
    nj["inputs"] = n.inputs;
    ojson attrs = ojson::object();
    for (auto& [k, v] : n.iattrs) attrs[k] = v;
    nj["attrs"] = attrs;
    ojson params = ojson::object();
    for (auto& [k, v] : n.params) params[k] = detail::tensor_to_json(v);
    nj["params"] = params;
    ojson buffers = ojson::object();
    for (auto& [k, v] : n.buffers) buffers[k] = detail::tensor_to_json(v);
    nj["buffers"] = buffers;
    nj["gate_id"] = n.gate_id;
    nj["prunable"] = n.prunable;
    nodes.push_back(nj);
  }
  j["nodes"] = nodes;
  ojson gates = ojson::array();
  for (auto& [gid, g] : m.gates) {
    ojson gj;
    gj["id"] = g.id;
    gj["granularity"] = granularity_name(g.granularity);
    gj["layer_id"] = g.layer_id;
    gj["block_id"] = g.block_id;
    gj["tag"] = g.tag;
    gj["values"] = detail::tensor_to_json(g.values);
    gates.push_back(gj);
  }
  j["gates"] = gates;
  return j;
}

inline ModelGraph graph_from_json(const ojson& j, Provenance* prov = nullptr) {
  if (j.value("format", "") != std::string("slimtrack-graph"))
    throw ConfigError("not a graph file");
  if (j.value("version", 0) != 1) throw ConfigError("unsupported graph file version");
  ModelGraph m;
  m.arch = j.at("arch").get<std::string>();
  m.input_id = j.at("input_id").get<std::string>();
  m.output_id = j.at("output_id").get<std::string>();
  m.input_shape = j.at("input_shape").get<Shape>();
  if (prov) {
    prov->master_seed = j.at("provenance").at("master_seed").get<uint64_t>();
    prov->parent_hash = j.at("provenance").at("parent_hash").get<std::string>();
  }
  for (auto& nj : j.at("nodes")) {
    LayerSpec n;
    n.id = nj.at("id").get<std::string>();
    n.kind = kind_from_name(nj.at("kind").get<std::string>());
    n.inputs = nj.at("inputs").get<std::vector<std::string>>();
    for (auto& [k, v] : nj.at("attrs").items()) n.iattrs[k] = v.get<int64_t>();
    for (auto& [k, v] : nj.at("params").items()) n.params[k] = detail::tensor_from_json(v);
    for (auto& [k, v] : nj.at("buffers").items()) n.buffers[k] = detail::tensor_from_json(v);
    n.gate_id = nj.at("gate_id").get<std::string>();
    n.prunable = nj.at("prunable").get<bool>();
    m.nodes.push_back(std::move(n));
  }
  for (auto& gj : j.at("gates")) {
    GateVector g;
    g.id = gj.at("id").get<std::string>();
    g.granularity = granularity_from_name(gj.at("granularity").get<std::string>());
    g.layer_id = gj.at("layer_id").get<std::string>();
    g.block_id = gj.at("block_id").get<std::string>();
    g.tag = gj.at("tag").get<std::string>();
    g.values = detail::tensor_from_json(gj.at("values"));
    m.gates[g.id] = std::move(g);
  }
  m.validate();
  return m;
}

inline ojson plan_to_json(const PruningPlan& p, const Provenance& prov) {
  ojson j;
  j["format"] = "slimtrack-plan";
  j["version"] = 1;
  j["mode"] = budget_mode_name(p.spec.mode);
  j["fraction"] = p.spec.fraction;
  j["floor"] = p.spec.floor;
  j["encoder_fraction"] = p.spec.encoder_fraction;
  j["decoder_fraction"] = p.spec.decoder_fraction;
  j["snapshot_hash"] = p.snapshot_hash;
  j["provenance"] = {{"master_seed", prov.master_seed}, {"parent_hash", prov.parent_hash}};
  ojson masks = ojson::object();
  for (auto& [gid, mask] : p.keep) {
    std::string s(mask.size(), '0');
    for (size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) s[i] = '1';
    masks[gid] = s;
  }
  j["masks"] = masks;
  return j;
}

inline PruningPlan plan_from_json(const ojson& j, Provenance* prov = nullptr) {
  if (j.value("format", "") != std::string("slimtrack-plan"))
    throw ConfigError("not a plan file");
  if (j.value("version", 0) != 1) throw ConfigError("unsupported plan file version");
  PruningPlan p;
  p.spec.mode = budget_mode_from_name(j.at("mode").get<std::string>());
  p.spec.fraction = j.at("fraction").get<double>();
  p.spec.floor = j.at("floor").get<int64_t>();
  p.spec.encoder_fraction = j.at("encoder_fraction").get<double>();
  p.spec.decoder_fraction = j.at("decoder_fraction").get<double>();
  p.snapshot_hash = j.at("snapshot_hash").get<std::string>();
  if (prov) {
    prov->master_seed = j.at("provenance").at("master_seed").get<uint64_t>();
    prov->parent_hash = j.at("provenance").at("parent_hash").get<std::string>();
  }
  for (auto& [gid, s] : j.at("masks").items()) {
    std::string str = s.get<std::string>();
    std::vector<uint8_t> mask(str.size());
    for (size_t i = 0; i < str.size(); ++i) mask[i] = str[i] == '1' ? 1 : 0;
    p.keep[gid] = std::move(mask);
  }
  return p;
}

inline void write_json_file(const ojson& j, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write '" + path + "'");
  os << j.dump(2) << "\n";
}

inline ojson read_json_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read '" + path + "'");
  return ojson::parse(is);
}

inline std::string file_hash(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  std::string bytes = ss.str();
  return hash_hex(fnv1a(bytes.data(), bytes.size()));
}

inline void save_graph(const ModelGraph& m, const Provenance& prov, const std::string& path) {
  write_json_file(graph_to_json(m, prov), path);
}

inline ModelGraph load_graph(const std::string& path, Provenance* prov = nullptr) {
  return graph_from_json(read_json_file(path), prov);
}

}  // namespace slimtrack
