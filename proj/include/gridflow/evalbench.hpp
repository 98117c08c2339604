#pragma once

// Evaluation: pooled RMSE reports with per-loop curves, ablation grid,
// loop sweeps, missing-Q masking, and the N-2 contingency harness.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "gridflow/datagen.hpp"
#include "gridflow/errors.hpp"
#include "gridflow/seiter.hpp"

namespace gridflow {

inline double rmse(const std::vector<double>& pred, const std::vector<double>& label) {
  if (pred.size() != label.size()) throw DimensionMismatch("rmse: size mismatch");
  if (pred.empty()) throw EmptyGroup("rmse over empty group");
  double se = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - label[i];
    se += e * e;
  }
  return std::sqrt(se / static_cast<double>(pred.size()));
}

struct EvalReport {
  double rmse_pq_vm = 0.0, rmse_pq_va = 0.0, rmse_pv_va = 0.0;
  int n_samples = 0;
  std::string config_fingerprint;
  // index ℓ holds the RMSE of the state after loop ℓ+1
  std::vector<double> loop_rmse_pq_vm, loop_rmse_pq_va, loop_rmse_pv_va;
};

inline nlohmann::json eval_report_to_json(const EvalReport& r) {
  return {{"schema", "evalreport/1"},
          {"rmse_pq_vm", r.rmse_pq_vm},
          {"rmse_pq_va", r.rmse_pq_va},
          {"rmse_pv_va", r.rmse_pv_va},
          {"n_samples", r.n_samples},
          {"config_fingerprint", r.config_fingerprint},
          {"loop_rmse_pq_vm", r.loop_rmse_pq_vm},
          {"loop_rmse_pq_va", r.loop_rmse_pq_va},
          {"loop_rmse_pv_va", r.loop_rmse_pv_va}};
}

// Full-test-set evaluation in one pass; per-sample test-time Q masks are
// optional (indexed like the sample list).
inline EvalReport evaluate(const std::vector<Sample>& samples, ParamStore& params,
                           const FlowNetConfig& fcfg, const SeIterConfig& cfg,
                           const std::vector<std::vector<char>>* q_masks = nullptr) {
  if (samples.empty()) throw EmptyGroup("evaluate over empty sample set");
  EvalReport rep;
  rep.n_samples = static_cast<int>(samples.size());
  rep.config_fingerprint =
      sha256_hex(flownet_config_to_json(fcfg).dump() + seiter_config_to_json(cfg).dump())
          .substr(0, 16);

  std::vector<std::vector<double>> pvm(cfg.loops), pva(cfg.loops), ppv(cfg.loops);
  std::vector<std::vector<double>> lvm(cfg.loops), lva(cfg.loops), lpv(cfg.loops);
  for (size_t si = 0; si < samples.size(); ++si) {
    const Sample& s = samples[si];
    const HeteroGraph graph = build_hetero_graph(s.gc);
    const std::vector<char> qm = q_masks ? (*q_masks)[si] : std::vector<char>{};
    const InferResult r = infer(s.gc, params, fcfg, cfg, qm);
    for (int l = 0; l < cfg.loops; ++l) {
      const PowerFlowState& st = r.trajectory[l];
      for (int b : graph.pq) {
        pvm[l].push_back(st.vm[b]);
        lvm[l].push_back(s.vm[b]);
        pva[l].push_back(st.va[b]);
        lva[l].push_back(s.va[b]);
      }
      for (int b : graph.pv) {
        ppv[l].push_back(st.va[b]);
        lpv[l].push_back(s.va[b]);
      }
    }
  }
  for (int l = 0; l < cfg.loops; ++l) {
    rep.loop_rmse_pq_vm.push_back(rmse(pvm[l], lvm[l]));
    rep.loop_rmse_pq_va.push_back(rmse(pva[l], lva[l]));
    rep.loop_rmse_pv_va.push_back(ppv[l].empty() ? 0.0 : rmse(ppv[l], lpv[l]));
  }
  rep.rmse_pq_vm = rep.loop_rmse_pq_vm.back();
  rep.rmse_pq_va = rep.loop_rmse_pq_va.back();
  rep.rmse_pv_va = rep.loop_rmse_pv_va.back();
  return rep;
}

// Fig. 4a: RMSE as a function of the inference loop count.
inline std::vector<std::pair<int, EvalReport>> loop_sweep(
    const std::vector<Sample>& samples, ParamStore& params, const FlowNetConfig& fcfg,
    const SeIterConfig& base_cfg, const std::vector<int>& loops_list) {
  std::vector<std::pair<int, EvalReport>> out;
  const int max_loops = *std::max_element(loops_list.begin(), loops_list.end());
  SeIterConfig cfg = base_cfg;
  cfg.loops = max_loops;
  const EvalReport full = evaluate(samples, params, fcfg, cfg);
  for (int loops : loops_list) {
    EvalReport r = full;
    r.loop_rmse_pq_vm.resize(loops);
    r.loop_rmse_pq_va.resize(loops);
    r.loop_rmse_pv_va.resize(loops);
    r.rmse_pq_vm = r.loop_rmse_pq_vm.back();
    r.rmse_pq_va = r.loop_rmse_pq_va.back();
    r.rmse_pv_va = r.loop_rmse_pv_va.back();
    out.emplace_back(loops, std::move(r));
  }
  return out;
}

// Fig. 4b: a random ρ-fraction of PQ buses has the Q input and presence
// flag cleared at test time.
inline EvalReport missing_q_eval(const std::vector<Sample>& samples, ParamStore& params,
                                 const FlowNetConfig& fcfg, const SeIterConfig& cfg,
                                 double rho, uint64_t seed) {
  if (rho < 0.0 || rho > 1.0) throw Error("rho must be in [0,1]");
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution drop(rho);
  std::vector<std::vector<char>> q_masks(samples.size());
  for (size_t i = 0; i < samples.size(); ++i) {
    q_masks[i].assign(samples[i].gc.n_buses(), 0);
    if (rho > 0.0) {
      const HeteroGraph graph = build_hetero_graph(samples[i].gc);
      for (int b : graph.pq) q_masks[i][b] = drop(rng) ? 1 : 0;
    }
  }
  return evaluate(samples, params, fcfg, cfg, &q_masks);
}

struct ContingencyResult {
  std::pair<int, int> dropped;
  bool converged = false;
  double solve_seconds = 0.0;
  double model_seconds = 0.0;
  double max_discrepancy = 0.0;  // max |vm or va difference|, NR vs model
};

struct ContingencySummary {
  std::vector<ContingencyResult> results;
  int n_pairs_total = 0;       // all unordered in-service pairs
  int n_pairs_connected = 0;   // pairs that leave the network connected
  int n_converged = 0;
  double total_solve_seconds = 0.0;
  double total_model_seconds = 0.0;
  double mean_solve_seconds = 0.0;
  double mean_model_seconds = 0.0;
};

inline nlohmann::json contingency_summary_to_json(const ContingencySummary& s) {
  nlohmann::json j = {{"schema", "contingency/1"},
                      {"n_pairs_total", s.n_pairs_total},
                      {"n_pairs_connected", s.n_pairs_connected},
                      {"n_converged", s.n_converged},
                      {"total_solve_seconds", s.total_solve_seconds},
                      {"total_model_seconds", s.total_model_seconds},
                      {"mean_solve_seconds", s.mean_solve_seconds},
                      {"mean_model_seconds", s.mean_model_seconds}};
  j["results"] = nlohmann::json::array();
  for (const auto& r : s.results)
    j["results"].push_back({{"dropped", {r.dropped.first, r.dropped.second}},
                            {"converged", r.converged},
                            {"solve_seconds", r.solve_seconds},
                            {"model_seconds", r.model_seconds},
                            {"max_discrepancy", r.max_discrepancy}});
  return j;
}

// Fig. 4c: exhaustive N-2 enumeration with solver-vs-model wall-clock around
// the numeric kernels only; median of `reps` repetitions per case.
inline ContingencySummary contingency_n2(const GridCase& base, ParamStore& params,
                                         const FlowNetConfig& fcfg, const SeIterConfig& cfg,
                                         int reps = 3) {
  base.validate();
  using clock = std::chrono::steady_clock;
  auto timed = [&](auto&& fn) {
    std::vector<double> ts;
    for (int r = 0; r < reps; ++r) {
      const auto t0 = clock::now();
      fn();
      ts.push_back(std::chrono::duration<double>(clock::now() - t0).count());
    }
    std::sort(ts.begin(), ts.end());
    return ts[ts.size() / 2];
  };

  std::vector<int> in_service;
  for (int k = 0; k < base.n_branches(); ++k)
    if (base.branches[k].status) in_service.push_back(k);

  ContingencySummary sum;
  for (size_t a = 0; a < in_service.size(); ++a) {
    for (size_t b = a + 1; b < in_service.size(); ++b) {
      ++sum.n_pairs_total;
      GridCase gc = base;
      gc.branches[in_service[a]].status = false;
      gc.branches[in_service[b]].status = false;
      if (!is_connected(gc)) continue;
      ++sum.n_pairs_connected;

      ContingencyResult res;
      res.dropped = {in_service[a], in_service[b]};
      NrResult nr;
      res.solve_seconds = timed([&] {
        try {
          nr = solve_nr(gc, flat_start(gc));
        } catch (const Error&) {
          nr.converged = false;
        }
      });
      res.converged = nr.converged;
      InferResult inf;
      res.model_seconds = timed([&] { inf = infer(gc, params, fcfg, cfg); });
      if (nr.converged) {
        ++sum.n_converged;
        res.max_discrepancy =
            std::max((nr.state.vm - inf.state.vm).cwiseAbs().maxCoeff(),
                     (nr.state.va - inf.state.va).cwiseAbs().maxCoeff());
      }
      sum.total_solve_seconds += res.solve_seconds;
      sum.total_model_seconds += res.model_seconds;
      sum.results.push_back(res);
    }
  }
  if (sum.n_pairs_connected) {
    sum.mean_solve_seconds = sum.total_solve_seconds / sum.n_pairs_connected;
    sum.mean_model_seconds = sum.total_model_seconds / sum.n_pairs_connected;
  }
  return sum;
}

// One row of the Table-3-style grid.
struct AblationRow {
  std::string name;
  FlowNetConfig fcfg;
  bool seiter = true;  // false -> loops=1, λ=0 (the "w/o SeIter" regime)
  EvalReport report;
};

// Trains each flag combination with an identical budget and evaluates on the
// shared test set.
inline std::vector<AblationRow> ablate(const std::vector<Sample>& train_set,
                                       const std::vector<Sample>& test_set,
                                       const FlowNetConfig& base_fcfg,
                                       const SeIterConfig& base_cfg,
                                       const std::vector<AblationRow>& rows_in,
                                       const std::string& out_dir = "") {
  std::vector<AblationRow> rows = rows_in;
  for (auto& row : rows) {
    SeIterConfig cfg = base_cfg;
    if (!row.seiter) {
      cfg.loops = 1;
      cfg.lambda_equ = 0.0;
    }
    const std::string dir =
        out_dir.empty() ? "" : out_dir + "/" + row.name;
    TrainResult tr = train(train_set, {}, row.fcfg, cfg, dir);
    SeIterConfig eval_cfg = cfg;
    row.report = evaluate(test_set, tr.teacher, row.fcfg, eval_cfg);
  }
  (void)base_fcfg;
  return rows;
}

// The five Table-3 rows over a base model width.
inline std::vector<AblationRow> default_ablation_rows(const FlowNetConfig& base,
                                                      bool seiter) {
  auto with = [&](bool fusion, bool vna, bool sgf) {
    FlowNetConfig c = base;
    c.use_fusion = fusion;
    c.use_vna = vna;
    c.use_sgf = sgf;
    return c;
  };
  const std::string tag = seiter ? "+seiter" : "-seiter";
  return {
      {"base" + tag, with(false, false, false), seiter, {}},
      {"base+fusion" + tag, with(true, false, false), seiter, {}},
      {"base+fusion+vna" + tag, with(true, true, false), seiter, {}},
      {"base+fusion+sgf" + tag, with(true, false, true), seiter, {}},
      {"base+fusion+vna+sgf" + tag, with(true, true, true), seiter, {}},
  };
}

}  // namespace gridflow
