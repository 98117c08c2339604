#pragma once

// FlowNet: per-type input embedding, K blocks of {graph convolution,
// Virtual Node Attention, Slack-Gated Feed-Forward}, and a residual
// predictor over the concatenated block outputs. The forward pass runs on
// a merged batch (block-diagonal graph); a single sample is a batch of one.

#include <array>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "gridflow/acpf.hpp"
#include "gridflow/errors.hpp"
#include "gridflow/network.hpp"
#include "gridflow/optim.hpp"
#include "gridflow/tensor.hpp"

namespace gridflow {

struct FlowNetConfig {
  int d = 64;                   // embedding width
  int k_blocks = 4;
  int gcn_layers_per_block = 2;
  bool use_fusion = true;       // predictor reads all blocks, not just the last
  bool use_vna = true;
  bool use_sgf = true;

  int d_k() const { return 2 * d; }  // key/value width: pooled concat
  int predictor_in() const { return use_fusion ? k_blocks * d : d; }
};

inline nlohmann::json flownet_config_to_json(const FlowNetConfig& c) {
  return {{"schema", "flownet/1"},
          {"d", c.d},
          {"k_blocks", c.k_blocks},
          {"gcn_layers_per_block", c.gcn_layers_per_block},
          {"use_fusion", c.use_fusion},
          {"use_vna", c.use_vna},
          {"use_sgf", c.use_sgf}};
}

inline FlowNetConfig flownet_config_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("schema") || j["schema"] != "flownet/1")
    throw SchemaMismatch("expected schema flownet/1");
  FlowNetConfig c;
  c.d = j.value("d", c.d);
  c.k_blocks = j.value("k_blocks", c.k_blocks);
  c.gcn_layers_per_block = j.value("gcn_layers_per_block", c.gcn_layers_per_block);
  c.use_fusion = j.value("use_fusion", c.use_fusion);
  c.use_vna = j.value("use_vna", c.use_vna);
  c.use_sgf = j.value("use_sgf", c.use_sgf);
  if (c.k_blocks < 1 || c.d < 1) throw InvariantViolation("flownet config out of range");
  return c;
}

constexpr int kRawFeatureWidth = 7;

// Fixed input normalization: injections/mismatches reach ~10 p.u. and branch
// admittances ~100 p.u. on the transmission cases; scaling them near unit
// magnitude keeps the Xavier-initialized layers in their useful range.
constexpr double kPowerScale = 0.1;
constexpr std::array<double, 5> kEdgeScale{0.01, 0.01, 1.0, 1.0, 1.0};

// Raw node features and graph arrays for one sample's forward pass.
struct ModelInputs {
  // raw per-type features, width kRawFeatureWidth
  ad::ArrayXd raw_pq, raw_pv, raw_slack;
  int n_pq = 0, n_pv = 0, n_slack = 0;
  std::vector<int> pq, pv, slack;        // bus indices per group
  std::vector<int> edge_src, edge_dst;
  ad::ArrayXd edge_feat;                 // [n_edges x 5] flattened
  int n_nodes = 0;
};

// Assembles the loop inputs: known injections/setpoints, the current loop
// state vm(η)/va(η) and the mismatch ΔP/ΔQ computed from it. q_mask marks
// PQ buses whose reactive power is hidden from the model.
inline ModelInputs build_model_inputs(const GridCase& gc, const HeteroGraph& graph,
                                      const Injections& inj, const PowerFlowState& state,
                                      const Mismatch& mis,
                                      const std::vector<char>& q_mask = {}) {
  ModelInputs in;
  in.pq = graph.pq;
  in.pv = graph.pv;
  in.slack = graph.slack;
  in.n_pq = static_cast<int>(graph.pq.size());
  in.n_pv = static_cast<int>(graph.pv.size());
  in.n_slack = static_cast<int>(graph.slack.size());
  in.n_nodes = graph.n_nodes();
  in.edge_src = graph.edge_src;
  in.edge_dst = graph.edge_dst;
  in.edge_feat.resize(graph.n_edges() * 5);
  for (int e = 0; e < graph.n_edges(); ++e)
    for (int k = 0; k < 5; ++k)
      in.edge_feat[e * 5 + k] = graph.edge_feat[e][k] * kEdgeScale[k];

  std::vector<int> dp_pos(in.n_nodes, -1), dq_pos(in.n_nodes, -1);
  for (size_t k = 0; k < mis.dp_buses.size(); ++k) dp_pos[mis.dp_buses[k]] = static_cast<int>(k);
  for (size_t k = 0; k < mis.dq_buses.size(); ++k) dq_pos[mis.dq_buses[k]] = static_cast<int>(k);

  in.raw_pq = ad::ArrayXd::Zero(in.n_pq * kRawFeatureWidth);
  for (int r = 0; r < in.n_pq; ++r) {
    const int b = graph.pq[r];
    const bool masked = !q_mask.empty() && q_mask[b];
    double* f = in.raw_pq.data() + r * kRawFeatureWidth;
    f[0] = kPowerScale * inj.p[b];
    f[1] = masked ? 0.0 : kPowerScale * inj.q[b];
    f[2] = state.vm[b];
    f[3] = state.va[b];
    f[4] = dp_pos[b] >= 0 ? kPowerScale * mis.dp[dp_pos[b]] : 0.0;
    f[5] = masked ? 0.0 : (dq_pos[b] >= 0 ? kPowerScale * mis.dq[dq_pos[b]] : 0.0);
    f[6] = masked ? 0.0 : 1.0;  // q_present flag
  }
  in.raw_pv = ad::ArrayXd::Zero(in.n_pv * kRawFeatureWidth);
  for (int r = 0; r < in.n_pv; ++r) {
    const int b = graph.pv[r];
    double* f = in.raw_pv.data() + r * kRawFeatureWidth;
    f[0] = kPowerScale * inj.p[b];
    f[1] = gc.buses[b].vm_setpoint;
    f[2] = state.va[b];
    f[3] = dp_pos[b] >= 0 ? kPowerScale * mis.dp[dp_pos[b]] : 0.0;
    f[6] = 1.0;
  }
  in.raw_slack = ad::ArrayXd::Zero(in.n_slack * kRawFeatureWidth);
  for (int r = 0; r < in.n_slack; ++r) {
    const int b = graph.slack[r];
    double* f = in.raw_slack.data() + r * kRawFeatureWidth;
    f[0] = gc.buses[b].vm_setpoint;
    f[1] = gc.buses[b].va_setpoint;
    f[6] = 1.0;
  }
  return in;
}

// Several samples merged into one block-diagonal graph. Group rows stay
// sample-major, so sample s's PQ rows are pq_offset[s] .. pq_offset[s+1].
struct BatchedInputs {
  int batch = 0;
  int n_nodes = 0;
  ad::ArrayXd raw_pq, raw_pv, raw_slack;
  int n_pq = 0, n_pv = 0, n_slack = 0;
  std::vector<int> pq, pv, slack;              // global node ids
  std::vector<int> pq_seg, pv_seg, slack_seg;  // sample id per group row
  std::vector<int> pq_offset, pv_offset;       // size batch+1
  std::vector<int> edge_src, edge_dst;
  ad::ArrayXd edge_feat;
  std::vector<int> node_offset;                // size batch+1
};

inline BatchedInputs merge_inputs(const std::vector<const ModelInputs*>& ins) {
  if (ins.empty()) throw ShapeMismatch("merge_inputs: empty batch");
  BatchedInputs b;
  b.batch = static_cast<int>(ins.size());
  b.pq_offset.push_back(0);
  b.pv_offset.push_back(0);
  b.node_offset.push_back(0);
  int raw_pq_sz = 0, raw_pv_sz = 0, raw_slack_sz = 0, edge_sz = 0;
  for (const auto* in : ins) {
    raw_pq_sz += static_cast<int>(in->raw_pq.size());
    raw_pv_sz += static_cast<int>(in->raw_pv.size());
    raw_slack_sz += static_cast<int>(in->raw_slack.size());
    edge_sz += static_cast<int>(in->edge_feat.size());
  }
  b.raw_pq.resize(raw_pq_sz);
  b.raw_pv.resize(raw_pv_sz);
  b.raw_slack.resize(raw_slack_sz);
  b.edge_feat.resize(edge_sz);
  int pq_off = 0, pv_off = 0, slack_off = 0, edge_off = 0;
  for (int s = 0; s < b.batch; ++s) {
    const ModelInputs& in = *ins[s];
    const int base = b.n_nodes;
    for (int id : in.pq) {
      b.pq.push_back(base + id);
      b.pq_seg.push_back(s);
    }
    for (int id : in.pv) {
      b.pv.push_back(base + id);
      b.pv_seg.push_back(s);
    }
    for (int id : in.slack) {
      b.slack.push_back(base + id);
      b.slack_seg.push_back(s);
    }
    for (size_t e = 0; e < in.edge_src.size(); ++e) {
      b.edge_src.push_back(base + in.edge_src[e]);
      b.edge_dst.push_back(base + in.edge_dst[e]);
    }
    b.raw_pq.segment(pq_off, in.raw_pq.size()) = in.raw_pq;
    b.raw_pv.segment(pv_off, in.raw_pv.size()) = in.raw_pv;
    b.raw_slack.segment(slack_off, in.raw_slack.size()) = in.raw_slack;
    b.edge_feat.segment(edge_off, in.edge_feat.size()) = in.edge_feat;
    pq_off += static_cast<int>(in.raw_pq.size());
    pv_off += static_cast<int>(in.raw_pv.size());
    slack_off += static_cast<int>(in.raw_slack.size());
    edge_off += static_cast<int>(in.edge_feat.size());
    b.n_nodes += in.n_nodes;
    b.n_pq += in.n_pq;
    b.n_pv += in.n_pv;
    b.n_slack += in.n_slack;
    b.pq_offset.push_back(b.n_pq);
    b.pv_offset.push_back(b.n_pv);
    b.node_offset.push_back(b.n_nodes);
  }
  return b;
}

namespace detail {

inline ad::Tensor xavier(std::vector<int> shape, std::mt19937_64& rng) {
  int fan_in = shape.size() == 2 ? shape[0] : 1;
  int fan_out = shape.size() == 2 ? shape[1] : shape[0];
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  int sz = 1;
  for (int d : shape) sz *= d;
  ad::ArrayXd data(sz);
  for (int i = 0; i < sz; ++i) data[i] = dist(rng);
  return ad::Tensor::from_array(std::move(shape), std::move(data));
}

inline ad::Tensor zeros(std::vector<int> shape) { return ad::Tensor::zeros(std::move(shape)); }
inline ad::Tensor ones(std::vector<int> shape) {
  int sz = 1;
  for (int d : shape) sz *= d;
  return ad::Tensor::from_array(std::move(shape), ad::ArrayXd::Ones(sz));
}

}  // namespace detail

// Deterministic parameter initialization; the final predictor layers are
// zero so the untrained model is an exact residual identity.
inline ParamStore init_flownet_params(const FlowNetConfig& cfg, uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamStore ps;
  const int d = cfg.d;
  using gridflow::detail::xavier;
  for (const char* type : {"pq", "pv", "slack"}) {
    ps.add(std::string("embed.") + type + ".W", xavier({kRawFeatureWidth, d}, rng));
    ps.add(std::string("embed.") + type + ".b", gridflow::detail::zeros({d}));
  }
  for (int k = 0; k < cfg.k_blocks; ++k) {
    const std::string bk = "block" + std::to_string(k) + ".";
    for (int l = 0; l < cfg.gcn_layers_per_block; ++l) {
      const std::string gl = bk + "gcn" + std::to_string(l) + ".";
      ps.add(gl + "W_self", xavier({d, d}, rng));
      ps.add(gl + "W_nbr", xavier({d, d}, rng));
      ps.add(gl + "W_edge", xavier({5, d}, rng));
    }
    if (cfg.use_vna) {
      ps.add(bk + "vna.W_fuse", xavier({d, d}, rng));
      ps.add(bk + "vna.b_fuse", gridflow::detail::zeros({d}));
      ps.add(bk + "vna.W_q", xavier({d, 2 * d}, rng));
      ps.add(bk + "vna.b_q", gridflow::detail::zeros({2 * d}));
      // module output projections start at zero: each block begins as a plain
      // graph convolution and the modules fade in as W_o trains
      ps.add(bk + "vna.W_o", gridflow::detail::zeros({2 * d, d}));
      ps.add(bk + "vna.b_o", gridflow::detail::zeros({d}));
      ps.add(bk + "vna.ln_g", gridflow::detail::ones({d}));
      ps.add(bk + "vna.ln_b", gridflow::detail::zeros({d}));
    }
    if (cfg.use_sgf) {
      ps.add(bk + "sgf.W_a", xavier({2 * d, d}, rng));
      ps.add(bk + "sgf.b_a", gridflow::detail::zeros({d}));
      ps.add(bk + "sgf.W_g", xavier({2 * d, d}, rng));
      ps.add(bk + "sgf.b_g", gridflow::detail::zeros({d}));
      ps.add(bk + "sgf.W_o", gridflow::detail::zeros({d, d}));
      ps.add(bk + "sgf.b_o", gridflow::detail::zeros({d}));
      ps.add(bk + "sgf.ln_g", gridflow::detail::ones({d}));
      ps.add(bk + "sgf.ln_b", gridflow::detail::zeros({d}));
    }
  }
  const int pin = cfg.predictor_in();
  for (const char* head : {"pq", "pv"}) {
    const std::string h = std::string("pred.") + head + ".";
    const int out_w = head == std::string("pq") ? 2 : 1;
    ps.add(h + "W1", xavier({pin, d}, rng));
    ps.add(h + "b1", gridflow::detail::zeros({d}));
    ps.add(h + "W2", gridflow::detail::zeros({d, out_w}));
    ps.add(h + "b2", gridflow::detail::zeros({out_w}));
  }
  return ps;
}

// Predicted per-loop increments; rows are sample-major group rows of the
// batch (a single sample is just batch 1).
struct Predictions {
  ad::Tensor dvm_pq;  // [n_pq]
  ad::Tensor dva_pq;  // [n_pq]
  ad::Tensor dva_pv;  // [n_pv]
};

namespace detail {

inline ad::Tensor linear(const ad::Tensor& x, ad::Tensor& W, ad::Tensor& b) {
  return ad::add_rowvec(ad::matmul(x, W), b);
}

}  // namespace detail

inline Predictions flownet_forward(const BatchedInputs& in, ParamStore& ps,
                                   const FlowNetConfig& cfg) {
  using namespace ad;
  const int d = cfg.d;
  const int B = in.batch;

  Tensor f_pq = gridflow::detail::linear(Tensor::from_array({in.n_pq, kRawFeatureWidth}, in.raw_pq),
                               ps.at("embed.pq.W"), ps.at("embed.pq.b"));
  Tensor f_pv = gridflow::detail::linear(Tensor::from_array({in.n_pv, kRawFeatureWidth}, in.raw_pv),
                               ps.at("embed.pv.W"), ps.at("embed.pv.b"));
  Tensor f_slack =
      gridflow::detail::linear(Tensor::from_array({in.n_slack, kRawFeatureWidth}, in.raw_slack),
                     ps.at("embed.slack.W"), ps.at("embed.slack.b"));

  const int n_edges = static_cast<int>(in.edge_src.size());
  Tensor edge_feats = Tensor::from_array({n_edges, 5}, in.edge_feat);
  Eigen::VectorXd inv_deg = Eigen::VectorXd::Zero(in.n_nodes);
  for (int dst : in.edge_dst) inv_deg[dst] += 1.0;
  for (int i = 0; i < in.n_nodes; ++i)
    inv_deg[i] = inv_deg[i] > 0.0 ? 1.0 / inv_deg[i] : 0.0;

  // concatenated (pq, pv, slack) row -> sample id, for pooled summaries
  std::vector<int> all_seg;
  all_seg.reserve(in.n_nodes);
  all_seg.insert(all_seg.end(), in.pq_seg.begin(), in.pq_seg.end());
  all_seg.insert(all_seg.end(), in.pv_seg.begin(), in.pv_seg.end());
  all_seg.insert(all_seg.end(), in.slack_seg.begin(), in.slack_seg.end());

  std::vector<Tensor> outs_pq, outs_pv;
  for (int k = 0; k < cfg.k_blocks; ++k) {
    const std::string bk = "block" + std::to_string(k) + ".";

    // graph convolution over the block-diagonal edge list
    std::vector<Tensor> parts;
    std::vector<int> perm;
    auto push = [&](const Tensor& t, const std::vector<int>& idx) {
      if (!idx.empty()) {
        parts.push_back(t);
        perm.insert(perm.end(), idx.begin(), idx.end());
      }
    };
    push(f_pq, in.pq);
    push(f_pv, in.pv);
    push(f_slack, in.slack);
    Tensor h = scatter_add_rows(concat_rows(parts), perm, in.n_nodes);
    for (int l = 0; l < cfg.gcn_layers_per_block; ++l) {
      const std::string gl = bk + "gcn" + std::to_string(l) + ".";
      Tensor msg = add(gather_rows(h, in.edge_src), matmul(edge_feats, ps.at(gl + "W_edge")));
      Tensor agg = scale_rows(scatter_add_rows(msg, in.edge_dst, in.n_nodes), inv_deg);
      h = relu(add(matmul(h, ps.at(gl + "W_self")), matmul(agg, ps.at(gl + "W_nbr"))));
    }
    if (in.n_pq) f_pq = gather_rows(h, in.pq);
    if (in.n_pv) f_pv = gather_rows(h, in.pv);
    if (in.n_slack) f_slack = gather_rows(h, in.slack);

    if (cfg.use_vna) {
      // per-sample virtual node: pooled summary of the fused node features
      std::vector<Tensor> all;
      if (in.n_pq) all.push_back(f_pq);
      if (in.n_pv) all.push_back(f_pv);
      if (in.n_slack) all.push_back(f_slack);
      Tensor fused = gridflow::detail::linear(concat_rows(all), ps.at(bk + "vna.W_fuse"),
                                    ps.at(bk + "vna.b_fuse"));
      Tensor vnode = concat_cols({segment_reduce_rows(fused, all_seg, B, Reduce::Mean),
                                  segment_reduce_rows(fused, all_seg, B, Reduce::Max)});
      const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(cfg.d_k()));
      auto attend = [&](Tensor& ft, const std::vector<int>& seg) {
        if (seg.empty()) return;
        Tensor q = gridflow::detail::linear(ft, ps.at(bk + "vna.W_q"), ps.at(bk + "vna.b_q"));
        Tensor vt = gather_rows(vnode, seg);                       // [n,2d]
        Tensor scores = scale(sum_cols(mul(q, vt)), inv_sqrt_dk);  // [n]
        Tensor w = sigmoid(scores);  // per-node gate on the global summary
        Tensor attended = mul_colvec(vt, w);
        Tensor out = gridflow::detail::linear(attended, ps.at(bk + "vna.W_o"), ps.at(bk + "vna.b_o"));
        ft = layer_norm(add(ft, out), ps.at(bk + "vna.ln_g"), ps.at(bk + "vna.ln_b"));
      };
      attend(f_pq, in.pq_seg);
      attend(f_pv, in.pv_seg);
      attend(f_slack, in.slack_seg);
    }

    if (cfg.use_sgf) {
      if (!in.n_slack) throw MissingSlack("SGF requires a slack row");
      auto gate = [&](Tensor& ft, const std::vector<int>& seg) {
        if (seg.empty()) return;
        Tensor bcast = gather_rows(f_slack, seg);  // own sample's slack row
        Tensor c = concat_cols({ft, bcast});
        Tensor sfuse = mul(gridflow::detail::linear(c, ps.at(bk + "sgf.W_a"), ps.at(bk + "sgf.b_a")),
                           sigmoid(gridflow::detail::linear(c, ps.at(bk + "sgf.W_g"), ps.at(bk + "sgf.b_g"))));
        Tensor out = gridflow::detail::linear(sfuse, ps.at(bk + "sgf.W_o"), ps.at(bk + "sgf.b_o"));
        ft = layer_norm(add(ft, out), ps.at(bk + "sgf.ln_g"), ps.at(bk + "sgf.ln_b"));
      };
      // the slack rows themselves pass through unchanged
      gate(f_pq, in.pq_seg);
      gate(f_pv, in.pv_seg);
    }

    outs_pq.push_back(f_pq);
    outs_pv.push_back(f_pv);
  }

  Tensor x_pq = cfg.use_fusion && in.n_pq ? concat_cols(outs_pq) : outs_pq.back();
  Tensor x_pv = cfg.use_fusion && in.n_pv ? concat_cols(outs_pv) : outs_pv.back();

  Predictions pred;
  if (in.n_pq) {
    Tensor hdn = relu(gridflow::detail::linear(x_pq, ps.at("pred.pq.W1"), ps.at("pred.pq.b1")));
    Tensor out = gridflow::detail::linear(hdn, ps.at("pred.pq.W2"), ps.at("pred.pq.b2"));  // [n,2]
    pred.dvm_pq = reshape(slice_cols(out, 0, 1), {in.n_pq});
    pred.dva_pq = reshape(slice_cols(out, 1, 1), {in.n_pq});
  } else {
    pred.dvm_pq = Tensor::zeros({0});
    pred.dva_pq = Tensor::zeros({0});
  }
  if (in.n_pv) {
    Tensor hdn = relu(gridflow::detail::linear(x_pv, ps.at("pred.pv.W1"), ps.at("pred.pv.b1")));
    pred.dva_pv = reshape(gridflow::detail::linear(hdn, ps.at("pred.pv.W2"), ps.at("pred.pv.b2")),
                          {in.n_pv});
  } else {
    pred.dva_pv = Tensor::zeros({0});
  }
  return pred;
}

inline Predictions flownet_forward(const ModelInputs& in, ParamStore& ps,
                                   const FlowNetConfig& cfg) {
  return flownet_forward(merge_inputs({&in}), ps, cfg);
}

}  // namespace gridflow
