#pragma once

// Self-ensembling iterative estimation: differentiable losses (Eq. 1-3),
// the EMA-teacher training loop with teacher-driven state propagation, and
// iterative inference. Training merges each mini-batch into one
// block-diagonal graph so the whole batch shares a single forward/backward.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "gridflow/acpf.hpp"
#include "gridflow/datagen.hpp"
#include "gridflow/errors.hpp"
#include "gridflow/flownet.hpp"
#include "gridflow/optim.hpp"
#include "gridflow/tensor.hpp"

namespace gridflow {

struct SeIterConfig {
  int loops = 8;
  // Physics-loss weight. Mismatch sensitivities scale with branch
  // susceptance (~100 p.u. on transmission cases), so a small weight keeps
  // the physics gradient commensurate with the label loss.
  double lambda_equ = 0.01;
  double alpha_ema = 0.99;
  int epochs = 20;
  int batch_size = 64;
  double lr_max = 1e-3;
  double lr_min = 1e-5;
  double q_mask_prob = 0.0;   // training-time Q-input dropout on PQ buses
  uint64_t seed = 0;
  double vm_clamp_lo = 0.5;   // teacher-propagated magnitudes kept physical
  double vm_clamp_hi = 1.5;

  void validate() const {
    if (loops < 1) throw Error("loops must be >= 1");
    if (alpha_ema < 0.0 || alpha_ema > 1.0) throw Error("alpha_ema must be in [0, 1]");
    if (lambda_equ < 0.0) throw Error("lambda_equ must be >= 0");
    if (epochs < 1 || batch_size < 1) throw Error("epochs/batch_size must be >= 1");
    if (q_mask_prob < 0.0 || q_mask_prob > 1.0) throw Error("q_mask_prob must be in [0,1]");
  }
};

inline nlohmann::json seiter_config_to_json(const SeIterConfig& c) {
  return {{"schema", "train/1"},   {"loops", c.loops},
          {"lambda_equ", c.lambda_equ}, {"alpha_ema", c.alpha_ema},
          {"epochs", c.epochs},    {"batch_size", c.batch_size},
          {"lr_max", c.lr_max},    {"lr_min", c.lr_min},
          {"q_mask_prob", c.q_mask_prob}, {"seed", c.seed},
          {"vm_clamp_lo", c.vm_clamp_lo}, {"vm_clamp_hi", c.vm_clamp_hi}};
}

inline SeIterConfig seiter_config_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("schema") || j["schema"] != "train/1")
    throw SchemaMismatch("expected schema train/1");
  SeIterConfig c;
  c.loops = j.value("loops", c.loops);
  c.lambda_equ = j.value("lambda_equ", c.lambda_equ);
  c.alpha_ema = j.value("alpha_ema", c.alpha_ema);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr_max = j.value("lr_max", c.lr_max);
  c.lr_min = j.value("lr_min", c.lr_min);
  c.q_mask_prob = j.value("q_mask_prob", c.q_mask_prob);
  c.seed = j.value("seed", c.seed);
  c.vm_clamp_lo = j.value("vm_clamp_lo", c.vm_clamp_lo);
  c.vm_clamp_hi = j.value("vm_clamp_hi", c.vm_clamp_hi);
  c.validate();
  return c;
}

// Flattened admittance entries and specified injections for the
// differentiable power-balance loss of one case (or a merged batch).
struct PhysicsContext {
  int n = 0;
  std::vector<int> yi, yj;
  ad::ArrayXd yg, yb;
  Eigen::VectorXd inj_p, inj_q;
};

inline PhysicsContext build_physics(const GridCase& gc) {
  PhysicsContext ctx;
  const AdmittanceMatrix y = build_ybus(gc);
  ctx.n = y.n;
  const int m = static_cast<int>(y.entries.size());
  ctx.yg.resize(m);
  ctx.yb.resize(m);
  int k = 0;
  for (const auto& [ij, v] : y.entries) {
    ctx.yi.push_back(ij.first);
    ctx.yj.push_back(ij.second);
    ctx.yg[k] = v.real();
    ctx.yb[k] = v.imag();
    ++k;
  }
  const Injections inj = injections_of(gc);
  ctx.inj_p = inj.p;
  ctx.inj_q = inj.q;
  return ctx;
}

// Full-bus differentiable voltage state assembled from model deltas and the
// (detached) loop state; PV magnitudes and the slack stay at setpoints.
struct StateTensors {
  ad::Tensor vm, va;  // [n]
};

namespace detail {

inline ad::Tensor const_gather(const Eigen::VectorXd& v, const std::vector<int>& idx) {
  ad::ArrayXd out(static_cast<int>(idx.size()));
  for (size_t k = 0; k < idx.size(); ++k) out[static_cast<int>(k)] = v[idx[k]];
  return ad::Tensor::from_array({static_cast<int>(idx.size())}, std::move(out));
}

// base_vm: setpoints at PV/slack, zero at PQ; base_va: slack angle only
inline void base_state_arrays(const GridCase& gc, Eigen::VectorXd& base_vm,
                              Eigen::VectorXd& base_va) {
  base_vm.setZero(gc.n_buses());
  base_va.setZero(gc.n_buses());
  for (const auto& b : gc.buses) {
    if (b.bus_type != BusType::PQ) base_vm[b.id] = b.vm_setpoint;
    if (b.bus_type == BusType::Slack) base_va[b.id] = b.va_setpoint;
  }
}

inline StateTensors predicted_state_arrays(const Predictions& pred,
                                           const Eigen::VectorXd& state_vm,
                                           const Eigen::VectorXd& state_va,
                                           const Eigen::VectorXd& base_vm,
                                           const Eigen::VectorXd& base_va,
                                           const std::vector<int>& pq,
                                           const std::vector<int>& pv, int n) {
  using namespace ad;
  StateTensors st;
  Tensor vm = Tensor::from_array({n}, base_vm.array());
  Tensor va = Tensor::from_array({n}, base_va.array());
  if (!pq.empty()) {
    vm = add(vm, scatter_add_rows(add(const_gather(state_vm, pq), pred.dvm_pq), pq, n));
    va = add(va, scatter_add_rows(add(const_gather(state_va, pq), pred.dva_pq), pq, n));
  }
  if (!pv.empty())
    va = add(va, scatter_add_rows(add(const_gather(state_va, pv), pred.dva_pv), pv, n));
  st.vm = vm;
  st.va = va;
  return st;
}

}  // namespace detail

inline StateTensors predicted_state(const Predictions& pred, const PowerFlowState& loop_state,
                                    const HeteroGraph& graph, const GridCase& gc) {
  Eigen::VectorXd base_vm, base_va;
  gridflow::detail::base_state_arrays(gc, base_vm, base_va);
  return gridflow::detail::predicted_state_arrays(pred, loop_state.vm, loop_state.va, base_vm,
                                        base_va, graph.pq, graph.pv, gc.n_buses());
}

// Eq. 3: mean over PQ of |v̂m − vm| + |v̂a − va|, plus mean over PV of |v̂a − va|.
inline ad::Tensor loss_gt(const StateTensors& pred, const Eigen::VectorXd& vm_label,
                          const Eigen::VectorXd& va_label, const std::vector<int>& pq,
                          const std::vector<int>& pv) {
  using namespace ad;
  if (vm_label.size() != pred.vm.numel() || va_label.size() != pred.va.numel())
    throw DimensionMismatch("loss_gt: label/state sizes disagree");
  Tensor loss = Tensor::scalar(0.0);
  if (!pq.empty()) {
    loss = add(loss, l1_loss(gather_rows(pred.vm, pq), gridflow::detail::const_gather(vm_label, pq)));
    loss = add(loss, l1_loss(gather_rows(pred.va, pq), gridflow::detail::const_gather(va_label, pq)));
  }
  if (!pv.empty())
    loss = add(loss, l1_loss(gather_rows(pred.va, pv), gridflow::detail::const_gather(va_label, pv)));
  return loss;
}

inline ad::Tensor loss_gt(const StateTensors& pred, const Eigen::VectorXd& vm_label,
                          const Eigen::VectorXd& va_label, const HeteroGraph& graph) {
  return loss_gt(pred, vm_label, va_label, graph.pq, graph.pv);
}

// Eq. 2 via Eq. 4-5: mean over PQ of |ΔP| + |ΔQ|, plus mean over PV of |ΔP|,
// evaluated at the differentiable predicted state.
inline ad::Tensor loss_equ(const StateTensors& pred, const PhysicsContext& ctx,
                           const std::vector<int>& pq, const std::vector<int>& pv) {
  using namespace ad;
  if (pred.vm.numel() != ctx.n || pred.va.numel() != ctx.n)
    throw DimensionMismatch("loss_equ: state size != ybus size");
  const int m = static_cast<int>(ctx.yi.size());
  Tensor vi = gather_rows(pred.vm, ctx.yi);
  Tensor vj = gather_rows(pred.vm, ctx.yj);
  Tensor th = sub(gather_rows(pred.va, ctx.yi), gather_rows(pred.va, ctx.yj));
  Tensor cth = cos(th), sth = sin(th);
  Tensor g = Tensor::from_array({m}, ctx.yg);
  Tensor b = Tensor::from_array({m}, ctx.yb);
  Tensor vv = mul(vi, vj);
  Tensor p_calc = scatter_add_rows(mul(vv, add(mul(g, cth), mul(b, sth))), ctx.yi, ctx.n);
  Tensor q_calc = scatter_add_rows(mul(vv, sub(mul(g, sth), mul(b, cth))), ctx.yi, ctx.n);

  Tensor loss = Tensor::scalar(0.0);
  if (!pq.empty()) {
    loss = add(loss, mean_all(abs(sub(gridflow::detail::const_gather(ctx.inj_p, pq),
                                      gather_rows(p_calc, pq)))));
    loss = add(loss, mean_all(abs(sub(gridflow::detail::const_gather(ctx.inj_q, pq),
                                      gather_rows(q_calc, pq)))));
  }
  if (!pv.empty())
    loss = add(loss, mean_all(abs(sub(gridflow::detail::const_gather(ctx.inj_p, pv),
                                      gather_rows(p_calc, pv)))));
  return loss;
}

inline ad::Tensor loss_equ(const StateTensors& pred, const PhysicsContext& ctx,
                           const HeteroGraph& graph) {
  return loss_equ(pred, ctx, graph.pq, graph.pv);
}

// Known-setpoint initialization for loop η=1: 1 p.u. magnitudes at PQ buses,
// setpoints elsewhere, slack angle everywhere.
inline PowerFlowState loop_init(const GridCase& gc) { return flat_start(gc); }

namespace detail {

// One teacher (or student) step of the state update: forward at the current
// state, apply the predicted deltas, clamp magnitudes.
inline PowerFlowState propagate_state(const GridCase& gc, const HeteroGraph& graph,
                                      const YbusRows& yrows, const Injections& inj,
                                      const PowerFlowState& state, ParamStore& params,
                                      const FlowNetConfig& fcfg, const SeIterConfig& cfg,
                                      const std::vector<char>& q_mask) {
  ad::NoGradGuard ng;
  const Mismatch m = mismatch(state, yrows, inj, graph);
  const ModelInputs in = build_model_inputs(gc, graph, inj, state, m, q_mask);
  const Predictions pred = flownet_forward(in, params, fcfg);
  PowerFlowState next = state;
  for (size_t k = 0; k < graph.pq.size(); ++k) {
    const int b = graph.pq[k];
    next.vm[b] = std::clamp(state.vm[b] + pred.dvm_pq.value()[static_cast<int>(k)],
                            cfg.vm_clamp_lo, cfg.vm_clamp_hi);
    next.va[b] = state.va[b] + pred.dva_pq.value()[static_cast<int>(k)];
  }
  for (size_t k = 0; k < graph.pv.size(); ++k) {
    const int b = graph.pv[k];
    next.va[b] = state.va[b] + pred.dva_pv.value()[static_cast<int>(k)];
  }
  return next;
}

}  // namespace detail

struct InferResult {
  PowerFlowState state;
  std::vector<PowerFlowState> trajectory;       // state after each loop
  std::vector<double> mismatch_norms;           // max-norm after each loop
};

// Iterative inference with the (teacher) parameters; gradients are never
// recorded.
inline InferResult infer(const GridCase& gc, ParamStore& params, const FlowNetConfig& fcfg,
                         const SeIterConfig& cfg, const std::vector<char>& q_mask = {}) {
  cfg.validate();
  const HeteroGraph graph = build_hetero_graph(gc);
  const YbusRows yrows(build_ybus(gc));
  const Injections inj = injections_of(gc);
  InferResult res;
  PowerFlowState state = loop_init(gc);
  for (int eta = 0; eta < cfg.loops; ++eta) {
    state = gridflow::detail::propagate_state(gc, graph, yrows, inj, state, params, fcfg, cfg, q_mask);
    res.trajectory.push_back(state);
    res.mismatch_norms.push_back(mismatch(state, yrows, inj, graph).max_norm());
  }
  res.state = state;
  return res;
}

struct TrainResult {
  ParamStore student;
  ParamStore teacher;
  std::vector<nlohmann::json> metrics;  // one record per epoch
};

// Per-sample immutable context shared across epochs.
struct TrainSampleCtx {
  const Sample* s = nullptr;
  HeteroGraph graph;
  YbusRows yrows;
  Injections inj;
  PhysicsContext phys;
  Eigen::VectorXd base_vm, base_va;

  explicit TrainSampleCtx(const Sample& sample)
      : s(&sample),
        graph(build_hetero_graph(sample.gc)),
        yrows(build_ybus(sample.gc)),
        inj(injections_of(sample.gc)),
        phys(build_physics(sample.gc)) {
    gridflow::detail::base_state_arrays(sample.gc, base_vm, base_va);
  }
};

inline void eval_rmse_over(const std::vector<TrainSampleCtx>& ctxs, ParamStore& params,
                           const FlowNetConfig& fcfg, const SeIterConfig& cfg,
                           double& rmse_pq_vm, double& rmse_pq_va, double& rmse_pv_va) {
  double se_vm = 0.0, se_va = 0.0, se_pv = 0.0;
  int64_t n_pq = 0, n_pv = 0;
  for (const auto& ctx : ctxs) {
    const InferResult r = infer(ctx.s->gc, params, fcfg, cfg);
    for (int b : ctx.graph.pq) {
      const double evm = r.state.vm[b] - ctx.s->vm[b];
      const double eva = r.state.va[b] - ctx.s->va[b];
      se_vm += evm * evm;
      se_va += eva * eva;
      ++n_pq;
    }
    for (int b : ctx.graph.pv) {
      const double eva = r.state.va[b] - ctx.s->va[b];
      se_pv += eva * eva;
      ++n_pv;
    }
  }
  rmse_pq_vm = n_pq ? std::sqrt(se_vm / n_pq) : 0.0;
  rmse_pq_va = n_pq ? std::sqrt(se_va / n_pq) : 0.0;
  rmse_pv_va = n_pv ? std::sqrt(se_pv / n_pv) : 0.0;
}

namespace detail {

// Concatenated per-batch labels, base state, physics, and loop state; node
// indices are global over the merged block-diagonal graph.
struct MergedBatch {
  int n = 0;                           // total bus count
  Eigen::VectorXd vm_label, va_label;
  Eigen::VectorXd base_vm, base_va;
  Eigen::VectorXd state_vm, state_va;  // current loop state, updated per loop
  PhysicsContext phys;
};

inline MergedBatch merge_batch(const std::vector<const TrainSampleCtx*>& ctxs) {
  MergedBatch mb;
  int total_entries = 0;
  for (const auto* c : ctxs) {
    mb.n += c->phys.n;
    total_entries += static_cast<int>(c->phys.yi.size());
  }
  mb.vm_label.resize(mb.n);
  mb.va_label.resize(mb.n);
  mb.base_vm.resize(mb.n);
  mb.base_va.resize(mb.n);
  mb.state_vm.resize(mb.n);
  mb.state_va.resize(mb.n);
  mb.phys.n = mb.n;
  mb.phys.yg.resize(total_entries);
  mb.phys.yb.resize(total_entries);
  mb.phys.inj_p.resize(mb.n);
  mb.phys.inj_q.resize(mb.n);
  int off = 0, eoff = 0;
  for (const auto* c : ctxs) {
    const int n = c->phys.n;
    mb.vm_label.segment(off, n) = c->s->vm;
    mb.va_label.segment(off, n) = c->s->va;
    mb.base_vm.segment(off, n) = c->base_vm;
    mb.base_va.segment(off, n) = c->base_va;
    mb.phys.inj_p.segment(off, n) = c->phys.inj_p;
    mb.phys.inj_q.segment(off, n) = c->phys.inj_q;
    const int m = static_cast<int>(c->phys.yi.size());
    for (int k = 0; k < m; ++k) {
      mb.phys.yi.push_back(off + c->phys.yi[k]);
      mb.phys.yj.push_back(off + c->phys.yj[k]);
    }
    mb.phys.yg.segment(eoff, m) = c->phys.yg;
    mb.phys.yb.segment(eoff, m) = c->phys.yb;
    off += n;
    eoff += m;
  }
  return mb;
}

}  // namespace detail

// The SeIter training loop. Per batch the loop states start at the known
// initialization; per loop the student takes one Adam step on the merged
// batch graph, the teacher is EMA-blended, and the teacher's forward (no
// gradients) produces the state entering the next loop.
inline TrainResult train(const std::vector<Sample>& train_set,
                         const std::vector<Sample>& val_set, const FlowNetConfig& fcfg,
                         const SeIterConfig& cfg, const std::string& out_dir = "") {
  cfg.validate();
  if (train_set.empty()) throw DataExhausted("empty training set");
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

  std::vector<TrainSampleCtx> tctx, vctx;
  tctx.reserve(train_set.size());
  for (const auto& s : train_set) tctx.emplace_back(s);
  vctx.reserve(val_set.size());
  for (const auto& s : val_set) vctx.emplace_back(s);

  TrainResult res{init_flownet_params(fcfg, cfg.seed), ParamStore{}, {}};
  res.teacher = res.student.clone();

  const int n = static_cast<int>(train_set.size());
  const int n_batches = (n + cfg.batch_size - 1) / cfg.batch_size;
  const int64_t total_steps = static_cast<int64_t>(cfg.epochs) * n_batches * cfg.loops;
  int64_t global_step = 0;

  AdamState adam;
  AdamConfig acfg;
  std::mt19937_64 rng(cfg.seed ^ 0x5e17e12ULL);
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;

  std::ofstream metrics_file;
  if (!out_dir.empty()) metrics_file.open(out_dir + "/metrics.jsonl", std::ios::binary);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    // per-epoch Q-input dropout masks, one per sample
    std::vector<std::vector<char>> q_masks(n);
    if (cfg.q_mask_prob > 0.0) {
      std::bernoulli_distribution drop(cfg.q_mask_prob);
      for (int i = 0; i < n; ++i) {
        q_masks[i].assign(train_set[i].gc.n_buses(), 0);
        for (int b : tctx[i].graph.pq) q_masks[i][b] = drop(rng) ? 1 : 0;
      }
    }

    double sum_lgt = 0.0, sum_leq = 0.0;
    int64_t n_terms = 0;
    double lr = acfg.lr;

    for (int batch = 0; batch < n_batches; ++batch) {
      const int lo = batch * cfg.batch_size;
      const int hi = std::min(n, lo + cfg.batch_size);
      const int bsz = hi - lo;
      std::vector<const TrainSampleCtx*> bctx(bsz);
      std::vector<PowerFlowState> states(bsz);
      for (int i = 0; i < bsz; ++i) {
        bctx[i] = &tctx[order[lo + i]];
        states[i] = loop_init(bctx[i]->s->gc);
      }
      gridflow::detail::MergedBatch mb = gridflow::detail::merge_batch(bctx);

      GradAccumulator acc;
      for (int eta = 0; eta < cfg.loops; ++eta) {
        // per-sample mismatch + inputs at the current (detached) loop state
        std::vector<ModelInputs> inputs(bsz);
        std::vector<const ModelInputs*> input_ptrs(bsz);
        int off = 0;
        for (int i = 0; i < bsz; ++i) {
          const TrainSampleCtx& ctx = *bctx[i];
          const Mismatch m = mismatch(states[i], ctx.yrows, ctx.inj, ctx.graph);
          inputs[i] = build_model_inputs(ctx.s->gc, ctx.graph, ctx.inj, states[i], m,
                                         q_masks[order[lo + i]]);
          input_ptrs[i] = &inputs[i];
          mb.state_vm.segment(off, ctx.phys.n) = states[i].vm;
          mb.state_va.segment(off, ctx.phys.n) = states[i].va;
          off += ctx.phys.n;
        }
        const BatchedInputs bin = merge_inputs(input_ptrs);

        const Predictions pred = flownet_forward(bin, res.student, fcfg);
        const StateTensors ps = gridflow::detail::predicted_state_arrays(
            pred, mb.state_vm, mb.state_va, mb.base_vm, mb.base_va, bin.pq, bin.pv, mb.n);
        ad::Tensor lgt = loss_gt(ps, mb.vm_label, mb.va_label, bin.pq, bin.pv);
        ad::Tensor leq = loss_equ(ps, mb.phys, bin.pq, bin.pv);
        ad::Tensor loss = ad::add(lgt, ad::scale(leq, cfg.lambda_equ));
        if (!std::isfinite(loss.item()))
          throw NonFiniteLoss("non-finite loss at epoch " + std::to_string(epoch) +
                              " loop " + std::to_string(eta));
        ad::backward(loss);
        acc.clear();
        acc.accumulate(res.student);
        acfg.lr = lr = cosine_lr(global_step, total_steps, cfg.lr_max, cfg.lr_min);
        adam_step(res.student, acc, adam, acfg);
        ema_update(res.teacher, res.student, cfg.alpha_ema);
        ++global_step;
        sum_lgt += lgt.item();
        sum_leq += leq.item();
        ++n_terms;

        if (eta + 1 < cfg.loops) {
          // teacher forward on the same merged inputs produces the next state
          ad::NoGradGuard ng;
          const Predictions tpred = flownet_forward(bin, res.teacher, fcfg);
          for (int i = 0; i < bsz; ++i) {
            const HeteroGraph& graph = bctx[i]->graph;
            for (int k = bin.pq_offset[i]; k < bin.pq_offset[i + 1]; ++k) {
              const int b = graph.pq[k - bin.pq_offset[i]];
              states[i].vm[b] = std::clamp(states[i].vm[b] + tpred.dvm_pq.value()[k],
                                           cfg.vm_clamp_lo, cfg.vm_clamp_hi);
              states[i].va[b] += tpred.dva_pq.value()[k];
            }
            for (int k = bin.pv_offset[i]; k < bin.pv_offset[i + 1]; ++k)
              states[i].va[graph.pv[k - bin.pv_offset[i]]] += tpred.dva_pv.value()[k];
          }
        }
      }
    }

    double rvm = 0.0, rva = 0.0, rpv = 0.0;
    if (!vctx.empty()) eval_rmse_over(vctx, res.teacher, fcfg, cfg, rvm, rva, rpv);
    nlohmann::json rec = {{"epoch", epoch},
                          {"loss_gt", sum_lgt / n_terms},
                          {"loss_equ", sum_leq / n_terms},
                          {"loss", (sum_lgt + cfg.lambda_equ * sum_leq) / n_terms},
                          {"lr", lr},
                          {"val_rmse_pq_vm", rvm},
                          {"val_rmse_pq_va", rva},
                          {"val_rmse_pv_va", rpv}};
    res.metrics.push_back(rec);
    if (metrics_file) metrics_file << rec.dump() << "\n" << std::flush;
    if (!out_dir.empty()) {
      save_checkpoint(res.student, out_dir + "/student.ckpt");
      save_checkpoint(res.teacher, out_dir + "/teacher.ckpt");
    }
  }
  return res;
}

}  // namespace gridflow
