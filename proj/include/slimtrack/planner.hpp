#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "slimtrack/graph.hpp"

namespace slimtrack {

struct BudgetSpec {
  enum class Mode { Global, Layerwise, Blockwise, Decoupled } mode = Mode::Layerwise;
  double fraction = 1.0;          // kept fraction b in (0, 1]
  int64_t floor = 1;              // minimum kept entries per gate
  double encoder_fraction = -1;   // decoupled mode; defaults to `fraction`
  double decoder_fraction = -1;

  void validate() const {
    if (!(fraction > 0.0 && fraction <= 1.0))
      throw ConfigError("budget: fraction must be in (0,1]");
    if (floor < 1) throw ConfigError("budget: floor must be >= 1");
  }
};

inline const char* budget_mode_name(BudgetSpec::Mode m) {
  switch (m) {
    case BudgetSpec::Mode::Global: return "global";
    case BudgetSpec::Mode::Layerwise: return "layerwise";
    case BudgetSpec::Mode::Blockwise: return "blockwise";
    case BudgetSpec::Mode::Decoupled: return "decoupled";
  }
  return "?";
}

inline BudgetSpec::Mode budget_mode_from_name(const std::string& s) {
  if (s == "global") return BudgetSpec::Mode::Global;
  if (s == "layerwise") return BudgetSpec::Mode::Layerwise;
  if (s == "blockwise") return BudgetSpec::Mode::Blockwise;
  if (s == "decoupled") return BudgetSpec::Mode::Decoupled;
  throw ConfigError("unknown budget mode '" + s + "'");
}

struct PruningPlan {
  std::map<std::string, std::vector<uint8_t>> keep;  // gate id -> keep mask
  BudgetSpec spec;
  std::string snapshot_hash;  // hash of the gate values the plan was made from

  int64_t kept(const std::string& gid) const {
    int64_t k = 0;
    for (auto v : keep.at(gid)) k += v ? 1 : 0;
    return k;
  }
  int64_t total_kept() const {
    int64_t k = 0;
    for (auto& [gid, mask] : keep)
      for (auto v : mask) k += v ? 1 : 0;
    return k;
  }
};

inline std::string gate_snapshot_hash(const std::map<std::string, GateVector>& gates) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (auto& [gid, g] : gates) {
    h = fnv1a(gid.data(), gid.size(), h);
    h = fnv1a(g.values.data.data(), g.values.data.size() * sizeof(double), h);
  }
  return hash_hex(h);
}

namespace detail {

// Gate entries ordered by importance: larger |gamma| first, lower index
// breaking ties. Selection depends on this order only, so it is invariant to
// positive rescaling of the gate values.
inline std::vector<int64_t> importance_order(const Tensor& values) {
  std::vector<int64_t> idx(size_t(values.numel()));
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = int64_t(i);
  std::stable_sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
    double va = std::abs(values[a]), vb = std::abs(values[b]);
    if (va != vb) return va > vb;
    return a < b;
  });
  return idx;
}

inline int64_t layerwise_keep_count(int64_t len, const BudgetSpec& spec) {
  auto k = int64_t(std::ceil(spec.fraction * double(len) - 1e-12));
  return std::min(len, std::max(spec.floor, k));
}

// Top-K across a pool of gates with a per-gate floor: each gate's top-floor
// entries are always kept, remaining slots go to the globally largest
// entries. Total kept = max(K, sum of floors).
inline void pooled_topk(const std::vector<const GateVector*>& pool, double fraction, int64_t floor,
                        PruningPlan& plan) {
  int64_t total = 0;
  for (auto* g : pool) total += g->size();
  auto k = std::min(total, int64_t(std::ceil(fraction * double(total) - 1e-12)));
  struct Entry {
    double mag;
    size_t gate;
    int64_t idx;
  };
  std::vector<Entry> rest;
  int64_t kept = 0;
  for (size_t gi = 0; gi < pool.size(); ++gi) {
    const GateVector& g = *pool[gi];
    plan.keep[g.id].assign(size_t(g.size()), 0);
    auto order = importance_order(g.values);
    int64_t f = std::min(g.size(), floor);
    for (int64_t i = 0; i < f; ++i) {
      plan.keep[g.id][size_t(order[size_t(i)])] = 1;
      ++kept;
    }
    for (int64_t i = f; i < g.size(); ++i)
      rest.push_back({std::abs(g.values[order[size_t(i)]]), gi, order[size_t(i)]});
  }
  std::stable_sort(rest.begin(), rest.end(), [&](const Entry& a, const Entry& b) {
    if (a.mag != b.mag) return a.mag > b.mag;
    if (pool[a.gate]->id != pool[b.gate]->id) return pool[a.gate]->id < pool[b.gate]->id;
    return a.idx < b.idx;
  });
  for (auto& e : rest) {
    if (kept >= k) break;
    plan.keep[pool[e.gate]->id][size_t(e.idx)] = 1;
    ++kept;
  }
}

}  // namespace detail

// Per gate of length C keep max(floor, ceil(b*C)) entries with largest |gamma|.
inline PruningPlan plan_layerwise(const std::map<std::string, GateVector>& gates,
                                  const BudgetSpec& spec) {
  spec.validate();
  PruningPlan plan;
  plan.spec = spec;
  plan.snapshot_hash = gate_snapshot_hash(gates);
  for (auto& [gid, g] : gates) {
    int64_t k = detail::layerwise_keep_count(g.size(), spec);
    auto order = detail::importance_order(g.values);
    std::vector<uint8_t> mask(size_t(g.size()), 0);
    for (int64_t i = 0; i < k; ++i) mask[size_t(order[size_t(i)])] = 1;
    plan.keep[gid] = std::move(mask);
  }
  return plan;
}

// Single ranking across all gates, floor-repaired per gate.
inline PruningPlan plan_global(const std::map<std::string, GateVector>& gates,
                               const BudgetSpec& spec) {
  spec.validate();
  PruningPlan plan;
  plan.spec = spec;
  plan.snapshot_hash = gate_snapshot_hash(gates);
  std::vector<const GateVector*> pool;
  for (auto& [gid, g] : gates) pool.push_back(&g);
  detail::pooled_topk(pool, spec.fraction, spec.floor, plan);
  return plan;
}

// Pooled top-K within each residual block so the budget holds per block and
// hence globally.
inline PruningPlan plan_blockwise(const std::map<std::string, GateVector>& gates,
                                  const BudgetSpec& spec) {
  spec.validate();
  PruningPlan plan;
  plan.spec = spec;
  plan.snapshot_hash = gate_snapshot_hash(gates);
  std::map<std::string, std::vector<const GateVector*>> blocks;
  for (auto& [gid, g] : gates) {
    if (g.block_id.empty())
      throw ConfigError("blockwise plan: gate '" + gid + "' carries no block id");
    blocks[g.block_id].push_back(&g);
  }
  for (auto& [bid, pool] : blocks) detail::pooled_topk(pool, spec.fraction, spec.floor, plan);
  return plan;
}

// Layerwise planning applied independently to encoder-tagged and
// decoder-tagged gates, possibly with different fractions.
inline PruningPlan plan_decoupled(const std::map<std::string, GateVector>& gates,
                                  const BudgetSpec& spec) {
  spec.validate();
  double enc_b = spec.encoder_fraction > 0 ? spec.encoder_fraction : spec.fraction;
  double dec_b = spec.decoder_fraction > 0 ? spec.decoder_fraction : spec.fraction;
  PruningPlan plan;
  plan.spec = spec;
  plan.snapshot_hash = gate_snapshot_hash(gates);
  for (auto& [gid, g] : gates) {
    if (g.tag != "encoder" && g.tag != "decoder")
      throw ConfigError("decoupled plan: gate '" + gid + "' is untagged");
    BudgetSpec side = spec;
    side.mode = BudgetSpec::Mode::Layerwise;
    side.fraction = g.tag == "encoder" ? enc_b : dec_b;
    int64_t k = detail::layerwise_keep_count(g.size(), side);
    auto order = detail::importance_order(g.values);
    std::vector<uint8_t> mask(size_t(g.size()), 0);
    for (int64_t i = 0; i < k; ++i) mask[size_t(order[size_t(i)])] = 1;
    plan.keep[gid] = std::move(mask);
  }
  return plan;
}

inline PruningPlan make_plan(const std::map<std::string, GateVector>& gates,
                             const BudgetSpec& spec) {
  switch (spec.mode) {
    case BudgetSpec::Mode::Global: return plan_global(gates, spec);
    case BudgetSpec::Mode::Layerwise: return plan_layerwise(gates, spec);
    case BudgetSpec::Mode::Blockwise: return plan_blockwise(gates, spec);
    case BudgetSpec::Mode::Decoupled: return plan_decoupled(gates, spec);
  }
  throw ConfigError("unknown budget mode");
}

}  // namespace slimtrack
