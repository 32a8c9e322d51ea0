#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "slimtrack/config.hpp"
#include "slimtrack/cost.hpp"
#include "slimtrack/surgeon.hpp"
#include "slimtrack/tracking.hpp"
#include "slimtrack/train.hpp"

namespace slimtrack {

// One pipeline outcome per budget, plus the shared stage-1 baseline.
struct SweepReport {
  struct Row {
    double budget = 1.0;  // 1.0 row is the unpruned baseline
    TrackingMetrics metrics;
    int64_t flops = 0;
    int64_t params = 0;
  };
  Row baseline;
  std::vector<Row> rows;
  // gate id -> active fraction per budget, in `rows` order
  std::map<std::string, std::vector<double>> active_fractions;
  // attention layer id -> heads kept per budget (transformer archs only)
  std::map<std::string, std::vector<int64_t>> active_heads;
  std::vector<double> budgets;
};

inline PairStreamConfig stream_for(const PipelineConfig& cfg, int64_t pairs) {
  PairStreamConfig sc;
  sc.pairs_per_epoch = pairs;
  sc.frame_size = cfg.bench.frame_size;
  sc.obj_min = cfg.bench.obj_min;
  sc.obj_max = cfg.bench.obj_max;
  sc.motion = cfg.bench.motion;
  sc.complexity = cfg.bench.complexity;
  return sc;
}

// Stage 1: sparsity-regularized training from scratch.
inline ModelGraph run_stage1(const PipelineConfig& cfg, TrainHistory* hist = nullptr) {
  ModelGraph model = build_configured_model(cfg, cfg.master_seed);
  TrainConfig tc = cfg.stage1;
  tc.seed = cfg.master_seed;
  TrainHistory h = train(model, stream_for(cfg, cfg.stage1_pairs_per_epoch), tc);
  if (hist) *hist = h;
  return model;
}

// Stages 2+3 for one budget: plan on the trained gates, rewrite, drop dead
// attention modules, fine-tune without the penalty.
inline ModelGraph run_budget(const PipelineConfig& cfg, const ModelGraph& trained, double budget,
                             SurgeryReport* srep = nullptr,
                             std::vector<std::string>* removed = nullptr) {
  BudgetSpec spec = cfg.budget;
  spec.fraction = budget;
  PruningPlan plan = make_plan(trained.gates, spec);
  ModelGraph pruned = rewrite(trained, plan, srep);
  pruned = remove_dead_attention(pruned, removed);
  TrainConfig tc = cfg.stage3;
  tc.mode = TrainConfig::Mode::Finetune;
  tc.lambda = 0.0;
  // per-budget deterministic seed, decoupled from the stage-1 stream
  tc.seed = Rng(cfg.master_seed ^ uint64_t(std::llround(budget * 10000)) ^ 0xf17e5eedull).next_u64();
  finetune(pruned, stream_for(cfg, cfg.stage3_pairs_per_epoch), tc);
  return pruned;
}

inline SweepReport run_sweep(const PipelineConfig& cfg, const ModelGraph* pretrained = nullptr) {
  cfg.validate();
  SweepReport rep;
  rep.budgets = cfg.budgets;
  ModelGraph trained = pretrained ? *pretrained : run_stage1(cfg);

  auto base_cost = count_flops(trained, trained.input_shape);
  rep.baseline.budget = 1.0;
  rep.baseline.flops = base_cost.total_flops;
  rep.baseline.params = base_cost.total_params;
  rep.baseline.metrics = evaluate_model(trained, cfg.bench);

  for (auto& [gid, g] : trained.gates) rep.active_fractions[gid] = {};
  for (auto& n : trained.nodes)
    if (n.kind == LayerKind::Mhsa) rep.active_heads[n.id] = {};

  for (size_t bi = 0; bi < cfg.budgets.size(); ++bi) {
    double b = cfg.budgets[bi];
    ModelGraph pruned;
    try {
      pruned = run_budget(cfg, trained, b);
    } catch (const std::exception& e) {
      throw ConfigError("sweep failed at budget " + std::to_string(b) + ": " + e.what());
    }
    auto cost = count_flops(pruned, pruned.input_shape);
    SweepReport::Row row;
    row.budget = b;
    row.flops = cost.total_flops;
    row.params = cost.total_params;
    row.metrics = evaluate_model(pruned, cfg.bench);
    rep.rows.push_back(row);
    auto frac = active_fraction(trained, pruned);
    for (auto& [gid, f] : frac) rep.active_fractions[gid].push_back(f);
    for (auto& [nid, v] : rep.active_heads) {
      int64_t heads = 0;
      for (auto& n : pruned.nodes)
        if (n.id == nid && n.kind == LayerKind::Mhsa) heads = n.attr("heads");
      rep.active_heads[nid].push_back(heads);
    }
  }
  return rep;
}

// Table-1-shaped CSV: budget, AO, SR@0.5, SR@0.75, FLOPs, params.
inline void write_sweep_csv(const SweepReport& rep, const std::string& path) {
  std::ofstream os(path);
  os << "budget,ao,sr50,sr75,flops,params\n";
  auto put = [&](const SweepReport::Row& r) {
    os << r.budget << "," << r.metrics.ao << "," << r.metrics.sr50 << "," << r.metrics.sr75 << ","
       << r.flops << "," << r.params << "\n";
  };
  put(rep.baseline);
  for (auto& r : rep.rows) put(r);
}

// Per-gate active-dimension fractions per budget.
inline void write_active_dims_csv(const SweepReport& rep, const std::string& path) {
  std::ofstream os(path);
  os << "gate_id";
  for (double b : rep.budgets) os << ",b=" << b;
  os << "\n";
  for (auto& [gid, fr] : rep.active_fractions) {
    os << gid;
    for (double f : fr) os << "," << f;
    os << "\n";
  }
}

// Surviving head counts per attention module per budget.
inline void write_active_heads_csv(const SweepReport& rep, const std::string& path) {
  std::ofstream os(path);
  os << "attention_layer";
  for (double b : rep.budgets) os << ",b=" << b;
  os << "\n";
  for (auto& [nid, hs] : rep.active_heads) {
    os << nid;
    for (int64_t h : hs) os << "," << h;
    os << "\n";
  }
}

inline void write_metrics_csv(const TrackingMetrics& m, const std::string& path) {
  std::ofstream os(path);
  os << "metric,value\n";
  os << "ao," << m.ao << "\n";
  os << "sr50," << m.sr50 << "\n";
  os << "sr75," << m.sr75 << "\n";
  for (size_t i = 0; i < m.success_curve.size(); ++i)
    os << "success@" << double(i) * 0.05 << "," << m.success_curve[i] << "\n";
  for (size_t i = 0; i < m.precision_curve.size(); ++i)
    os << "precision@" << i << "," << m.precision_curve[i] << "\n";
}

}  // namespace slimtrack
