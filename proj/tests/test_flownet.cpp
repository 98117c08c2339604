#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <random>
#include <sstream>

#include "gradcheck.hpp"
#include "gridflow/datagen.hpp"
#include "gridflow/flownet.hpp"

using namespace gridflow;
using namespace gridflow::ad;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

GridCase load_case39() {
  return parse_matpower(slurp(std::string(GRIDFLOW_SOURCE_DIR) + "/data/case39.m"), "case39");
}

// slack - pv - two pq buses on a ring
GridCase toy_case() {
  GridCase gc;
  gc.name = "toy4";
  gc.buses = {
      {0, BusType::Slack, 0.0, 0.0, 0.0, 0.0, 1.02, 0.0, 345.0},
      {1, BusType::PV, 0.1, 0.0, 0.0, 0.0, 1.01, 0.0, 345.0},
      {2, BusType::PQ, 0.4, 0.15, 0.0, 0.05, 1.0, 0.0, 345.0},
      {3, BusType::PQ, 0.3, 0.1, 0.0, 0.0, 1.0, 0.0, 345.0},
  };
  gc.branches = {
      {0, 1, 0.01, 0.1, 0.02, 1.0, 0.0, true},
      {1, 2, 0.02, 0.2, 0.04, 1.05, 0.03, true},
      {2, 3, 0.015, 0.15, 0.02, 1.0, 0.0, true},
      {3, 0, 0.01, 0.12, 0.03, 1.0, 0.0, true},
  };
  gc.generators = {{1, 0.5, 1.01}};
  gc.validate();
  return gc;
}

ModelInputs inputs_of(const GridCase& gc, const std::vector<char>& q_mask = {}) {
  const HeteroGraph graph = build_hetero_graph(gc);
  const YbusRows yrows(build_ybus(gc));
  const Injections inj = injections_of(gc);
  const PowerFlowState st = flat_start(gc);
  return build_model_inputs(gc, graph, inj, st, mismatch(st, yrows, inj, graph), q_mask);
}

// make the zero-initialized output layers (predictor heads and the VNA/SGF
// output projections) generic so gradients reach every block
void randomize_predictor(ParamStore& ps, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-0.3, 0.3);
  for (auto& [name, t] : ps.params) {
    const bool zero_out = name.ends_with(".W2") || name.ends_with(".b2") ||
                          name.ends_with("vna.W_o") || name.ends_with("sgf.W_o");
    if (!zero_out) continue;
    auto& v = t.value();
    for (int i = 0; i < v.size(); ++i) v[i] = dist(rng);
  }
}

Tensor contract_preds(const Predictions& p) {
  Tensor loss = gradcheck::contract(p.dvm_pq, 101);
  loss = add(loss, gradcheck::contract(p.dva_pq, 102));
  if (p.dva_pv.numel()) loss = add(loss, gradcheck::contract(p.dva_pv, 103));
  return loss;
}

}  // namespace

TEST_CASE("config JSON round-trips and rejects bad documents") {
  FlowNetConfig c;
  c.d = 16;
  c.k_blocks = 3;
  c.use_vna = false;
  const FlowNetConfig c2 = flownet_config_from_json(flownet_config_to_json(c));
  CHECK(c2.d == 16);
  CHECK(c2.k_blocks == 3);
  CHECK_FALSE(c2.use_vna);
  CHECK(c2.d_k() == 32);
  CHECK(c2.predictor_in() == 3 * 16);

  nlohmann::json bad = flownet_config_to_json(c);
  bad["schema"] = "flownet/2";
  CHECK_THROWS_AS(flownet_config_from_json(bad), SchemaMismatch);
  bad = flownet_config_to_json(c);
  bad["k_blocks"] = 0;
  CHECK_THROWS_AS(flownet_config_from_json(bad), InvariantViolation);
}

TEST_CASE("build_model_inputs lays out the documented feature slots") {
  const GridCase gc = toy_case();
  const ModelInputs in = inputs_of(gc);
  CHECK(in.n_pq == 2);
  CHECK(in.n_pv == 1);
  CHECK(in.n_slack == 1);
  CHECK(in.n_nodes == 4);
  CHECK(static_cast<int>(in.edge_src.size()) == 8);  // 4 branches, both directions

  const Injections inj = injections_of(gc);
  // PQ row 0 is bus 2: [P, Q, vm, va, dP, dQ, 1], powers input-normalized
  CHECK(in.raw_pq[0] == kPowerScale * inj.p[2]);
  CHECK(in.raw_pq[1] == kPowerScale * inj.q[2]);
  CHECK(in.raw_pq[2] == 1.0);  // flat-start magnitude
  CHECK(in.raw_pq[6] == 1.0);
  // PV row is bus 1: [P, vm_set, va, dP, 0, 0, 1]
  CHECK(in.raw_pv[0] == kPowerScale * inj.p[1]);
  CHECK(in.raw_pv[1] == 1.01);
  CHECK(in.raw_pv[6] == 1.0);
  // slack row: [vm_set, va_set, 0...0, 1]
  CHECK(in.raw_slack[0] == 1.02);
  CHECK(in.raw_slack[6] == 1.0);

  // masking clears Q, dQ and the presence flag of the masked bus only
  std::vector<char> qm(4, 0);
  qm[2] = 1;
  const ModelInputs masked = inputs_of(gc, qm);
  CHECK(masked.raw_pq[1] == 0.0);
  CHECK(masked.raw_pq[5] == 0.0);
  CHECK(masked.raw_pq[6] == 0.0);
  CHECK(masked.raw_pq[7 + 1] == in.raw_pq[7 + 1]);  // bus 3 untouched
  CHECK(masked.raw_pq[0] == in.raw_pq[0]);          // P stays visible
}

TEST_CASE("zero-initialized predictor is an exact residual identity") {
  const GridCase gc = load_case39();
  FlowNetConfig cfg;
  cfg.d = 16;
  cfg.k_blocks = 2;
  ParamStore ps = init_flownet_params(cfg, 5);
  const Predictions p = flownet_forward(inputs_of(gc), ps, cfg);
  CHECK(p.dvm_pq.numel() == 29);
  CHECK(p.dva_pv.numel() == 9);
  CHECK((p.dvm_pq.value() == 0.0).all());
  CHECK((p.dva_pq.value() == 0.0).all());
  CHECK((p.dva_pv.value() == 0.0).all());
}

TEST_CASE("parameter init is deterministic in the seed") {
  FlowNetConfig cfg;
  cfg.d = 8;
  ParamStore a = init_flownet_params(cfg, 9), b = init_flownet_params(cfg, 9);
  ParamStore c = init_flownet_params(cfg, 10);
  REQUIRE(a.size() == b.size());
  bool all_equal = true, any_diff = false;
  for (const auto& [name, t] : a.params) {
    all_equal = all_equal && (t.value() == b.at(name).value()).all();
    any_diff = any_diff || !(t.value() == c.at(name).value()).all();
  }
  CHECK(all_equal);
  CHECK(any_diff);
}

TEST_CASE("gradients reach every named parameter") {
  const GridCase gc = toy_case();
  FlowNetConfig cfg;
  cfg.d = 6;
  cfg.k_blocks = 2;
  ParamStore ps = init_flownet_params(cfg, 3);
  randomize_predictor(ps, 4);
  backward(contract_preds(flownet_forward(inputs_of(gc), ps, cfg)));
  for (auto& [name, t] : ps.params) {
    INFO("parameter ", name);
    REQUIRE(t.grad().size() == t.numel());
    CHECK(t.grad().abs().maxCoeff() > 0.0);
  }
}

TEST_CASE("batched forward equals per-sample forwards") {
  const GridCase base = load_case39();
  std::mt19937_64 rng(21);
  const GridCase a = perturb(base, rng);
  const GridCase b = toy_case();
  FlowNetConfig cfg;
  cfg.d = 8;
  cfg.k_blocks = 2;
  ParamStore ps = init_flownet_params(cfg, 7);
  randomize_predictor(ps, 8);

  const ModelInputs ia = inputs_of(a), ib = inputs_of(b);
  const Predictions pa = flownet_forward(ia, ps, cfg);
  const Predictions pb = flownet_forward(ib, ps, cfg);
  const Predictions pab = flownet_forward(merge_inputs({&ia, &ib}), ps, cfg);

  REQUIRE(pab.dvm_pq.numel() == pa.dvm_pq.numel() + pb.dvm_pq.numel());
  for (int k = 0; k < pa.dvm_pq.numel(); ++k) {
    CHECK(pab.dvm_pq.value()[k] == doctest::Approx(pa.dvm_pq.value()[k]).epsilon(1e-12));
    CHECK(pab.dva_pq.value()[k] == doctest::Approx(pa.dva_pq.value()[k]).epsilon(1e-12));
  }
  const int off = pa.dvm_pq.numel();
  for (int k = 0; k < pb.dvm_pq.numel(); ++k) {
    CHECK(pab.dvm_pq.value()[off + k] == doctest::Approx(pb.dvm_pq.value()[k]).epsilon(1e-12));
    CHECK(pab.dva_pq.value()[off + k] == doctest::Approx(pb.dva_pq.value()[k]).epsilon(1e-12));
  }
  for (int k = 0; k < pa.dva_pv.numel(); ++k)
    CHECK(pab.dva_pv.value()[k] == doctest::Approx(pa.dva_pv.value()[k]).epsilon(1e-12));
  for (int k = 0; k < pb.dva_pv.numel(); ++k)
    CHECK(pab.dva_pv.value()[pa.dva_pv.numel() + k] ==
          doctest::Approx(pb.dva_pv.value()[k]).epsilon(1e-12));
}

TEST_CASE("ablation flags change the forward pass") {
  const GridCase gc = toy_case();
  const ModelInputs in = inputs_of(gc);
  auto run = [&](bool fusion, bool vna, bool sgf) {
    FlowNetConfig cfg;
    cfg.d = 6;
    cfg.k_blocks = 2;
    cfg.use_fusion = fusion;
    cfg.use_vna = vna;
    cfg.use_sgf = sgf;
    ParamStore ps = init_flownet_params(cfg, 13);
    randomize_predictor(ps, 14);
    return flownet_forward(in, ps, cfg).dvm_pq.value();
  };
  const ArrayXd full = run(true, true, true);
  // dropping any module changes the prediction for the same init seed
  CHECK_FALSE((run(false, true, true) == full).all());
  CHECK_FALSE((run(true, false, true) == full).all());
  CHECK_FALSE((run(true, true, false) == full).all());
  // the gcn-only baseline has a smaller parameter set
  FlowNetConfig bare;
  bare.d = 6;
  bare.k_blocks = 2;
  bare.use_fusion = bare.use_vna = bare.use_sgf = false;
  FlowNetConfig fullc = bare;
  fullc.use_fusion = fullc.use_vna = fullc.use_sgf = true;
  CHECK(init_flownet_params(bare, 1).size() < init_flownet_params(fullc, 1).size());
}

TEST_CASE("full model gradcheck on the toy graph") {
  const GridCase gc = toy_case();
  FlowNetConfig cfg;
  cfg.d = 4;
  cfg.k_blocks = 2;
  cfg.gcn_layers_per_block = 1;
  ParamStore ps = init_flownet_params(cfg, 17);
  randomize_predictor(ps, 18);
  const ModelInputs in = inputs_of(gc);

  std::vector<Tensor> params;
  for (auto& [name, t] : ps.params) params.push_back(t);  // shares storage with ps
  const double err = gradcheck::max_rel_error(
      params, [&](std::vector<Tensor>&) { return contract_preds(flownet_forward(in, ps, cfg)); },
      1e-5);
  CHECK(err < 1e-3);
}

TEST_CASE("degenerate group handling") {
  // two-bus case with no PV bus
  GridCase gc;
  gc.name = "nopv";
  gc.buses = {{0, BusType::Slack, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 138.0},
              {1, BusType::PQ, 0.2, 0.05, 0.0, 0.0, 1.0, 0.0, 138.0}};
  gc.branches = {{0, 1, 0.01, 0.1, 0.0, 1.0, 0.0, true}};
  gc.validate();
  FlowNetConfig cfg;
  cfg.d = 4;
  cfg.k_blocks = 1;
  ParamStore ps = init_flownet_params(cfg, 2);
  const Predictions p = flownet_forward(inputs_of(gc), ps, cfg);
  CHECK(p.dvm_pq.numel() == 1);
  CHECK(p.dva_pv.numel() == 0);

  // SGF requires a slack row
  ModelInputs in = inputs_of(gc);
  in.slack.clear();
  in.n_slack = 0;
  in.raw_slack.resize(0);
  CHECK_THROWS_AS(flownet_forward(in, ps, cfg), MissingSlack);

  CHECK_THROWS_AS(merge_inputs({}), ShapeMismatch);
}
