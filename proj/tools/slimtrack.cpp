// slimtrack — budget-aware structured pruning for siamese trackers.
//
// Subcommands: train, plan, prune, finetune, eval, cost, sweep.
// Exit codes: 0 success, 1 runtime failure, 2 configuration error.
//
// CSV column orders (fixed):
//   sweep report:   budget,ao,sr50,sr75,flops,params
//   active dims:    gate_id,b=<budget>...
//   active heads:   attention_layer,b=<budget>...
//   metrics:        metric,value
//   cost report:    layer_id,kind,params,flops
//   history:        epoch,task_loss,penalty,sparsity_fraction
//   surgery report: gate_id,layer_id,removed,kept

#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "slimtrack/pipeline.hpp"
#include "slimtrack/serialize.hpp"

namespace fs = std::filesystem;
using namespace slimtrack;

namespace {

struct Common {
  std::string config_path;
  uint64_t seed = 0;
  bool seed_set = false;
  std::string out_dir;
  std::string format = "csv";
};

PipelineConfig effective_config(const Common& c) {
  PipelineConfig cfg = load_config(c.config_path);
  if (c.seed_set) cfg.master_seed = c.seed;
  if (!c.out_dir.empty()) cfg.out_dir = c.out_dir;
  cfg.validate();
  fs::create_directories(cfg.out_dir);
  return cfg;
}

void check_snapshot(const ModelGraph& model, const PruningPlan& plan) {
  std::string now = gate_snapshot_hash(model.gates);
  if (now != plan.snapshot_hash)
    throw ConfigError("plan was made against different gate values (snapshot " +
                      plan.snapshot_hash + ", model has " + now + "); re-run `plan`");
}

int cmd_train(const Common& c) {
  PipelineConfig cfg = effective_config(c);
  TrainHistory hist;
  ModelGraph model = run_stage1(cfg, &hist);
  std::string cfg_hash = file_hash(c.config_path);
  save_graph(model, {cfg.master_seed, cfg_hash}, cfg.out_dir + "/trained.json");
  write_history_csv(hist, cfg.out_dir + "/train_history.csv");
  std::cout << "trained " << cfg.arch << " -> " << cfg.out_dir << "/trained.json\n";
  return 0;
}

int cmd_plan(const Common& c, const std::string& model_path, double fraction) {
  PipelineConfig cfg = effective_config(c);
  Provenance mprov;
  ModelGraph model = load_graph(model_path, &mprov);
  BudgetSpec spec = cfg.budget;
  spec.fraction = fraction;
  PruningPlan plan = make_plan(model.gates, spec);
  write_json_file(plan_to_json(plan, {cfg.master_seed, file_hash(model_path)}),
                  cfg.out_dir + "/plan.json");
  std::cout << "plan: kept " << plan.total_kept() << " entries -> " << cfg.out_dir
            << "/plan.json\n";
  return 0;
}

int cmd_prune(const Common& c, const std::string& model_path, const std::string& plan_path) {
  PipelineConfig cfg = effective_config(c);
  ModelGraph model = load_graph(model_path);
  PruningPlan plan = plan_from_json(read_json_file(plan_path));
  check_snapshot(model, plan);
  SurgeryReport srep;
  ModelGraph pruned = rewrite(model, plan, &srep);
  pruned = remove_dead_attention(pruned, &srep.removed_modules);
  srep.equivalence_residual = equivalence_residual(model, plan, 5, cfg.master_seed);
  save_graph(pruned, {cfg.master_seed, file_hash(plan_path)}, cfg.out_dir + "/pruned.json");
  srep.write_csv(cfg.out_dir + "/surgery_report.csv");
  std::cout << "pruned: params " << srep.params_before << " -> " << srep.params_after
            << ", equivalence residual " << srep.equivalence_residual << "\n";
  return 0;
}

int cmd_finetune(const Common& c, const std::string& model_path) {
  PipelineConfig cfg = effective_config(c);
  ModelGraph model = load_graph(model_path);
  TrainConfig tc = cfg.stage3;
  tc.seed = cfg.master_seed;
  TrainHistory hist = finetune(model, stream_for(cfg, cfg.stage3_pairs_per_epoch), tc);
  save_graph(model, {cfg.master_seed, file_hash(model_path)}, cfg.out_dir + "/finetuned.json");
  write_history_csv(hist, cfg.out_dir + "/finetune_history.csv");
  std::cout << "finetuned -> " << cfg.out_dir << "/finetuned.json\n";
  return 0;
}

int cmd_eval(const Common& c, const std::string& model_path) {
  PipelineConfig cfg = effective_config(c);
  ModelGraph model = load_graph(model_path);
  TrackingMetrics m = evaluate_model(model, cfg.bench);
  write_metrics_csv(m, cfg.out_dir + "/metrics.csv");
  std::cout << "ao=" << m.ao << " sr50=" << m.sr50 << " sr75=" << m.sr75 << " -> " << cfg.out_dir
            << "/metrics.csv\n";
  return 0;
}

int cmd_cost(const Common& c, const std::string& model_path) {
  PipelineConfig cfg = effective_config(c);
  ModelGraph model = load_graph(model_path);
  CostReport rep = count_flops(model, model.input_shape);
  rep.write_csv(cfg.out_dir + "/cost_report.csv");
  std::cout << "params=" << rep.total_params << " (" << rep.params_mb() << " MB) flops="
            << rep.total_flops << " -> " << cfg.out_dir << "/cost_report.csv\n";
  return 0;
}

int cmd_sweep(const Common& c) {
  PipelineConfig cfg = effective_config(c);
  TrainHistory hist;
  ModelGraph trained = run_stage1(cfg, &hist);
  std::string cfg_hash = file_hash(c.config_path);
  save_graph(trained, {cfg.master_seed, cfg_hash}, cfg.out_dir + "/trained.json");
  write_history_csv(hist, cfg.out_dir + "/train_history.csv");
  SweepReport rep = run_sweep(cfg, &trained);
  write_sweep_csv(rep, cfg.out_dir + "/sweep_report.csv");
  write_active_dims_csv(rep, cfg.out_dir + "/active_dims.csv");
  if (!rep.active_heads.empty())
    write_active_heads_csv(rep, cfg.out_dir + "/active_heads.csv");
  std::cout << "sweep over " << rep.rows.size() << " budgets -> " << cfg.out_dir
            << "/sweep_report.csv\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"budget-aware structured pruning pipeline for siamese trackers"};
  app.require_subcommand(1);
  Common c;
  app.add_option("--config", c.config_path, "pipeline config file (key = value lines)")
      ->required();
  auto* seed_opt = app.add_option("--seed", c.seed, "override the config's master seed");
  app.add_option("--out", c.out_dir, "override the config's output directory");
  app.add_option("--format", c.format, "report format (csv)")
      ->check(CLI::IsMember({"csv"}));

  auto* train = app.add_subcommand("train", "stage 1: sparsity-regularized training");
  auto* plan = app.add_subcommand("plan", "stage 2a: budgeted keep/drop plan from gate values");
  auto* prune = app.add_subcommand("prune", "stage 2b: physical graph surgery from a plan");
  auto* finetune = app.add_subcommand("finetune", "stage 3: penalty-free recovery training");
  auto* eval = app.add_subcommand("eval", "synthetic tracking benchmark (AO, SR@0.5, SR@0.75)");
  auto* cost = app.add_subcommand("cost", "parameter and FLOP accounting");
  auto* sweep = app.add_subcommand("sweep", "full pipeline across the configured budget list");

  std::string model_path, plan_path;
  double fraction = 0.5;
  plan->add_option("--model", model_path, "trained graph file")->required();
  plan->add_option("--fraction", fraction, "kept fraction b in (0,1]")->required();
  prune->add_option("--model", model_path, "trained graph file")->required();
  prune->add_option("--plan", plan_path, "plan file")->required();
  finetune->add_option("--model", model_path, "pruned graph file")->required();
  eval->add_option("--model", model_path, "graph file")->required();
  cost->add_option("--model", model_path, "graph file")->required();

  try {
    app.parse(argc, argv);
    c.seed_set = seed_opt->count() > 0;
    if (train->parsed()) return cmd_train(c);
    if (plan->parsed()) return cmd_plan(c, model_path, fraction);
    if (prune->parsed()) return cmd_prune(c, model_path, plan_path);
    if (finetune->parsed()) return cmd_finetune(c, model_path);
    if (eval->parsed()) return cmd_eval(c, model_path);
    if (cost->parsed()) return cmd_cost(c, model_path);
    if (sweep->parsed()) return cmd_sweep(c);
    return 2;
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
