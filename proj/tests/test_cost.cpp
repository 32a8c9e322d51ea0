#include <catch2/catch_amalgamated.hpp>

#include "slimtrack/cost.hpp"
#include "slimtrack/planner.hpp"
#include "slimtrack/surgeon.hpp"
#include "slimtrack/zoo.hpp"

using namespace slimtrack;

namespace {

// independent walk over every stored tensor element
int64_t enumerate_params(const ModelGraph& m) {
  int64_t n = 0;
  for (auto& node : m.nodes)
    for (auto& [name, t] : node.params)
      for (size_t i = 0; i < t.data.size(); ++i) ++n;
  for (auto& [gid, g] : m.gates)
    for (size_t i = 0; i < g.values.data.size(); ++i) ++n;
  return n;
}

}  // namespace

TEST_CASE("hand-counted small layers") {
  {
    // linear 3 -> 2 with bias: 8 learnable parameters
    ModelGraph m;
    LayerSpec in;
    in.id = "in";
    m.nodes.push_back(in);
    LayerSpec lin;
    lin.id = "fc";
    lin.kind = LayerKind::Linear;
    lin.inputs = {"in"};
    lin.params["w"] = Tensor::zeros({2, 3});
    lin.params["b"] = Tensor::zeros({2});
    m.nodes.push_back(lin);
    m.input_id = "in";
    m.output_id = "fc";
    m.input_shape = {1, 3};
    CHECK(count_params(m).total_params == 8);
    // 2*out*in = 12 FLOPs... plus MAC=2 convention on one token: 2*2*3
    CHECK(count_flops(m, {1, 3}).total_flops == 12);
  }
  {
    // conv Cin=3, Cout=2, k=3: 56 params; on a 4x4 output, 1728 FLOPs
    ModelGraph m;
    LayerSpec in;
    in.id = "in";
    m.nodes.push_back(in);
    LayerSpec conv;
    conv.id = "c";
    conv.kind = LayerKind::Conv;
    conv.inputs = {"in"};
    conv.params["w"] = Tensor::zeros({2, 3, 3, 3});
    conv.params["b"] = Tensor::zeros({2});
    conv.iattrs["stride"] = 1;
    conv.iattrs["pad"] = 1;
    m.nodes.push_back(conv);
    m.input_id = "in";
    m.output_id = "c";
    m.input_shape = {1, 3, 4, 4};
    auto rep = count_flops(m, {1, 3, 4, 4});
    CHECK(count_params(m).total_params == 56);
    CHECK(rep.total_flops == 1728);
  }
}

TEST_CASE("enumeration oracle over random zoo graphs") {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const char* archs[] = {"mini_alex", "mini_resnet", "mini_vit", "mini_encdec"};
    auto m = build_model(archs[rng.uniform_int(4)], rng.next_u64());
    CHECK(count_params(m).total_params == enumerate_params(m));
  }
}

TEST_CASE("report totals are additive") {
  auto m = build_model("mini_encdec", 3);
  auto rep = count_flops(m, m.input_shape);
  int64_t p = 0, f = 0;
  for (auto& r : rep.rows) {
    p += r.params;
    f += r.flops;
  }
  CHECK(p == rep.total_params);
  CHECK(f == rep.total_flops);
  int64_t by_kind = 0;
  for (auto& [kind, v] : rep.flops_by_kind) by_kind += v;
  CHECK(by_kind == rep.total_flops);
}

TEST_CASE("bn running statistics are tracked separately") {
  auto m = build_model("mini_alex", 5);
  auto rep = count_params(m);
  int64_t bn_channels = 32 + 64 + 96 + 96;
  CHECK(rep.stats_params == 2 * bn_channels);
}

TEST_CASE("params MB uses 4-byte storage") {
  auto m = build_model("mini_alex", 1);
  auto rep = count_params(m);
  CHECK(rep.params_mb() == Catch::Approx(double(rep.total_params) * 4.0 / 1e6));
  CHECK(rep.param_bytes() == rep.total_params * 4);
}

TEST_CASE("halving both axes of a conv chain quarters its FLOPs") {
  auto build_chain = [](int64_t c1, int64_t c2) {
    ModelGraph m;
    LayerSpec in;
    in.id = "in";
    m.nodes.push_back(in);
    LayerSpec a;
    a.id = "a";
    a.kind = LayerKind::Conv;
    a.inputs = {"in"};
    a.params["w"] = Tensor::zeros({c1, 3, 3, 3});
    a.iattrs["stride"] = 1;
    a.iattrs["pad"] = 1;
    m.nodes.push_back(a);
    LayerSpec b;
    b.id = "b";
    b.kind = LayerKind::Conv;
    b.inputs = {"a"};
    b.params["w"] = Tensor::zeros({c2, c1, 3, 3});
    b.iattrs["stride"] = 1;
    b.iattrs["pad"] = 1;
    m.nodes.push_back(b);
    m.input_id = "in";
    m.output_id = "b";
    m.input_shape = {1, 3, 8, 8};
    return m;
  };
  auto full = count_flops(build_chain(16, 16), {1, 3, 8, 8});
  auto half = count_flops(build_chain(8, 8), {1, 3, 8, 8});
  int64_t full_b = full.rows[2].flops, half_b = half.rows[2].flops;
  CHECK(half_b * 4 == full_b);  // second conv shrinks on both axes
}

TEST_CASE("budget monotonicity of rewritten cost") {
  auto m = build_model("mini_alex", 9);
  Rng rng(10);
  for (auto& [gid, g] : m.gates)
    for (int64_t i = 0; i < g.values.numel(); ++i) g.values[i] = 0.05 + rng.uniform();
  int64_t prev_f = -1, prev_p = -1;
  for (double b : {0.25, 0.5, 0.75, 1.0}) {
    BudgetSpec spec;
    spec.mode = BudgetSpec::Mode::Layerwise;
    spec.fraction = b;
    auto cut = rewrite(m, make_plan(m.gates, spec));
    auto rep = count_flops(cut, cut.input_shape);
    CHECK(rep.total_flops > prev_f);
    CHECK(rep.total_params > prev_p);
    prev_f = rep.total_flops;
    prev_p = rep.total_params;
  }
}

TEST_CASE("cost report CSV states its conventions") {
  auto m = build_model("mini_alex", 1);
  auto rep = count_flops(m, m.input_shape);
  rep.write_csv("cost_report_test.csv");
  std::ifstream is("cost_report_test.csv");
  std::string line;
  std::getline(is, line);
  CHECK(line.find("1 MAC = 2 FLOPs") != std::string::npos);
  std::getline(is, line);
  CHECK(line == "layer_id,kind,params,flops");
}

TEST_CASE("shape inference flags inconsistent graphs") {
  ModelGraph m;
  LayerSpec in;
  in.id = "in";
  m.nodes.push_back(in);
  LayerSpec conv;
  conv.id = "c";
  conv.kind = LayerKind::Conv;
  conv.inputs = {"in"};
  conv.params["w"] = Tensor::zeros({2, 5, 3, 3});  // expects 5 input channels
  conv.iattrs["stride"] = 1;
  conv.iattrs["pad"] = 0;
  m.nodes.push_back(conv);
  m.input_id = "in";
  m.output_id = "c";
  CHECK_THROWS_AS(infer_shapes(m, {1, 3, 8, 8}), ShapeError);
}
