#include <catch2/catch_amalgamated.hpp>

#include "slimtrack/cost.hpp"
#include "slimtrack/surgeon.hpp"

using namespace slimtrack;

namespace {

Tensor random_input(const Shape& s, uint64_t seed) {
  Rng rng(seed);
  Tensor t = Tensor::zeros(s);
  for (auto& v : t.data) v = rng.uniform();
  return t;
}

// spread the gate magnitudes so plans are unambiguous
void jitter_gates(ModelGraph& m, uint64_t seed) {
  Rng rng(seed);
  for (auto& [gid, g] : m.gates)
    for (int64_t i = 0; i < g.values.numel(); ++i) g.values[i] = 0.05 + rng.uniform();
}

}  // namespace

TEST_CASE("zero_pruned basics") {
  auto m = build_model("mini_alex", 1);
  jitter_gates(m, 2);
  BudgetSpec spec;
  spec.mode = BudgetSpec::Mode::Layerwise;
  spec.fraction = 1.0;
  auto full = make_plan(m.gates, spec);
  auto z = zero_pruned(m, full);
  Tensor x = random_input(m.input_shape, 5);
  CHECK(forward_eval(m, x).data == forward_eval(z, x).data);

  spec.fraction = 0.5;
  auto half = make_plan(m.gates, spec);
  auto z1 = zero_pruned(m, half);
  auto z2 = zero_pruned(z1, half);
  // idempotent
  CHECK(forward_eval(z1, x).data == forward_eval(z2, x).data);
}

TEST_CASE("zero_pruned silences the dropped channel") {
  auto m = build_model("mini_alex", 3);
  jitter_gates(m, 4);
  // drop exactly one channel of the first gate
  PruningPlan plan;
  plan.spec.fraction = 1.0;
  for (auto& [gid, g] : m.gates) plan.keep[gid].assign(size_t(g.size()), 1);
  auto first = plan.keep.begin();
  first->second[0] = 0;
  auto z = zero_pruned(m, plan);
  const GateVector& g = m.gates.at(first->first);
  Tape tape;
  GraphRunner runner(z, tape, false, false);
  runner.run(random_input(m.input_shape, 6));
  const Tensor& act = runner.activation(g.layer_id)->value;
  int64_t hw = act.shape[2] * act.shape[3];
  for (int64_t i = 0; i < hw; ++i) CHECK(act[0 * hw * act.shape[1] + 0 + i] == 0.0);
}

TEST_CASE("rewrite equals zero_pruned on probe inputs") {
  for (auto arch : {"mini_alex", "mini_resnet", "mini_vit", "mini_encdec"}) {
    auto m = build_model(arch, 11);
    jitter_gates(m, 12);
    BudgetSpec spec;
    spec.mode = BudgetSpec::Mode::Layerwise;
    spec.fraction = 0.5;
    auto plan = make_plan(m.gates, spec);
    CHECK(equivalence_residual(m, plan, 3, 7) < 1e-9);
  }
}

TEST_CASE("mini_alex b=0.5 shape arithmetic") {
  auto m = build_model("mini_alex", 21);
  jitter_gates(m, 22);
  BudgetSpec spec;
  spec.mode = BudgetSpec::Mode::Layerwise;
  spec.fraction = 0.5;
  auto plan = make_plan(m.gates, spec);
  SurgeryReport rep;
  auto cut = rewrite(m, plan, &rep);
  for (auto& [gid, g] : cut.gates) {
    int64_t orig = m.gates.at(gid).size();
    CHECK(g.size() == (orig + 1) / 2);
  }
  // producer convs shrank on the output axis, consumers on the input axis
  for (int b = 1; b <= 4; ++b) {
    int64_t kept = cut.gates.at("g_b" + std::to_string(b)).size();
    CHECK(cut.node("b" + std::to_string(b) + "_conv").params.at("w").shape[0] == kept);
    CHECK(cut.node("b" + std::to_string(b + 1) + "_conv").params.at("w").shape[1] == kept);
  }
  CHECK(rep.params_after < rep.params_before);
}

TEST_CASE("rewrite strictly reduces cost when anything is dropped") {
  auto m = build_model("mini_vit", 31);
  jitter_gates(m, 32);
  BudgetSpec spec;
  spec.mode = BudgetSpec::Mode::Layerwise;
  spec.fraction = 0.75;
  auto plan = make_plan(m.gates, spec);
  auto cut = rewrite(m, plan);
  auto before = count_flops(m, m.input_shape);
  auto after = count_flops(cut, cut.input_shape);
  CHECK(after.total_params < before.total_params);
  CHECK(after.total_flops < before.total_flops);
}

TEST_CASE("all-keep rewrite is an isomorphic no-op") {
  auto m = build_model("mini_encdec", 41);
  BudgetSpec spec;
  spec.mode = BudgetSpec::Mode::Layerwise;
  spec.fraction = 1.0;
  auto plan = make_plan(m.gates, spec);
  auto cut = rewrite(m, plan);
  Tensor x = random_input(m.input_shape, 42);
  CHECK(max_abs_diff(forward_eval(m, x), forward_eval(cut, x)) == 0.0);
  CHECK(cut.nodes.size() == m.nodes.size());
}

TEST_CASE("rewrite composes across successive plans") {
  auto m = build_model("mini_alex", 51);
  jitter_gates(m, 52);
  BudgetSpec s1;
  s1.mode = BudgetSpec::Mode::Layerwise;
  s1.fraction = 0.75;
  auto p1 = make_plan(m.gates, s1);
  auto once = rewrite(m, p1);
  BudgetSpec s2 = s1;
  s2.fraction = 0.5;
  auto p2 = make_plan(once.gates, s2);
  auto twice = rewrite(once, p2);
  // direct plan keeping the intersection
  PruningPlan direct;
  direct.spec = s2;
  for (auto& [gid, m1] : p1.keep) {
    std::vector<uint8_t> mask(m1.size(), 0);
    auto kept1 = detail::kept_indices(m1);
    const auto& m2 = p2.keep.at(gid);
    for (size_t i = 0; i < kept1.size(); ++i)
      if (m2[i]) mask[size_t(kept1[i])] = 1;
    direct.keep[gid] = mask;
  }
  auto fused = rewrite(m, direct);
  Tensor x = random_input(m.input_shape, 53);
  CHECK(max_abs_diff(forward_eval(twice, x), forward_eval(fused, x)) < 1e-9);
}

TEST_CASE("plan mismatch errors") {
  auto m = build_model("mini_alex", 61);
  PruningPlan plan;
  plan.keep["no_such_gate"] = {1, 0};
  CHECK_THROWS_AS(rewrite(m, plan), ConfigError);
  PruningPlan bad_len;
  bad_len.keep[m.gates.begin()->first] = {1};
  CHECK_THROWS_AS(rewrite(m, bad_len), ConfigError);
}

TEST_CASE("remove_dead_attention collapses headless modules") {
  auto m = build_model("mini_vit", 71);
  jitter_gates(m, 72);
  // force every head of the first attention layer out
  std::string gid0;
  for (auto& [gid, g] : m.gates)
    if (g.granularity == GateVector::Granularity::Head && gid0.empty()) gid0 = gid;
  PruningPlan plan;
  plan.spec.fraction = 1.0;
  for (auto& [gid, g] : m.gates)
    plan.keep[gid].assign(size_t(g.size()), gid == gid0 ? 0 : 1);
  auto zeroed = zero_pruned(m, plan);
  auto cut = rewrite(m, plan);
  std::vector<std::string> removed;
  auto collapsed = remove_dead_attention(cut, &removed);
  REQUIRE(removed.size() == 1);
  CHECK(collapsed.nodes.size() < cut.nodes.size());
  Tensor x = random_input(m.input_shape, 73);
  CHECK(max_abs_diff(forward_eval(zeroed, x), forward_eval(collapsed, x)) < 1e-9);
  // no-op when no module is empty
  std::vector<std::string> none;
  auto same = remove_dead_attention(m, &none);
  CHECK(none.empty());
  CHECK(same.nodes.size() == m.nodes.size());
}

TEST_CASE("shape soundness over random plans") {
  Rng rng(81);
  for (int trial = 0; trial < 50; ++trial) {
    const char* archs[] = {"mini_alex", "mini_resnet", "mini_vit", "mini_encdec"};
    auto m = build_model(archs[rng.uniform_int(4)], rng.next_u64());
    jitter_gates(m, rng.next_u64());
    PruningPlan plan;
    plan.spec.fraction = 0.5;
    for (auto& [gid, g] : m.gates) {
      std::vector<uint8_t> mask(size_t(g.size()), 0);
      int64_t keep_n = 1 + int64_t(rng.uniform_int(g.size()));
      auto order = detail::importance_order(g.values);
      for (int64_t i = 0; i < keep_n; ++i) mask[size_t(order[size_t(i)])] = 1;
      plan.keep[gid] = mask;
    }
    auto cut = rewrite(m, plan);
    cut.validate();
    Tensor y = forward_eval(cut, random_input(cut.input_shape, rng.next_u64()));
    CHECK(y.all_finite());
  }
}

TEST_CASE("surgery report CSV") {
  auto m = build_model("mini_alex", 91);
  jitter_gates(m, 92);
  BudgetSpec spec;
  spec.mode = BudgetSpec::Mode::Layerwise;
  spec.fraction = 0.5;
  auto plan = make_plan(m.gates, spec);
  SurgeryReport rep;
  rewrite(m, plan, &rep);
  rep.write_csv("surgeon_report_test.csv");
  std::ifstream is("surgeon_report_test.csv");
  std::string line;
  std::getline(is, line);
  CHECK(line == "gate_id,layer_id,removed,kept");
}
