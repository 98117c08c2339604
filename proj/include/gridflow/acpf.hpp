#pragma once

// Power-balance mismatch evaluation and the Newton-Raphson solver.

#include <cmath>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "gridflow/case_io.hpp"
#include "gridflow/errors.hpp"
#include "gridflow/network.hpp"

namespace gridflow {

struct PowerFlowState {
  Eigen::VectorXd vm;  // p.u.
  Eigen::VectorXd va;  // rad
};

// dp over PQ∪PV buses, dq over PQ buses, both in ascending bus order.
struct Mismatch {
  std::vector<int> dp_buses;
  std::vector<int> dq_buses;
  Eigen::VectorXd dp;
  Eigen::VectorXd dq;

  double max_norm() const {
    double m = 0.0;
    if (dp.size()) m = std::max(m, dp.cwiseAbs().maxCoeff());
    if (dq.size()) m = std::max(m, dq.cwiseAbs().maxCoeff());
    return m;
  }
};

struct Injections {
  Eigen::VectorXd p;  // net injection, all buses
  Eigen::VectorXd q;  // net injection, meaningful at PQ buses
};

inline Injections injections_of(const GridCase& gc) {
  const int n = gc.n_buses();
  Injections inj{Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n)};
  for (const auto& b : gc.buses) {
    inj.p[b.id] -= b.p_load;
    inj.q[b.id] -= b.q_load;
  }
  for (const auto& g : gc.generators) inj.p[g.bus] += g.p_gen;
  return inj;
}

// Row-compressed view of the admittance matrix for fast sweeps.
struct YbusRows {
  int n = 0;
  std::vector<std::vector<std::tuple<int, double, double>>> rows;  // (j, G, B)

  explicit YbusRows(const AdmittanceMatrix& y) : n(y.n), rows(y.n) {
    for (const auto& [ij, v] : y.entries)
      rows[ij.first].emplace_back(ij.second, v.real(), v.imag());
  }
};

// Calculated complex power injection implied by the voltage state.
inline void calc_pq(const PowerFlowState& st, const YbusRows& y,
                    Eigen::VectorXd& p_calc, Eigen::VectorXd& q_calc) {
  const int n = y.n;
  p_calc.setZero(n);
  q_calc.setZero(n);
  for (int i = 0; i < n; ++i) {
    double pi = 0.0, qi = 0.0;
    for (const auto& [j, g, b] : y.rows[i]) {
      const double th = st.va[i] - st.va[j];
      const double c = std::cos(th), s = std::sin(th);
      const double vv = st.vm[i] * st.vm[j];
      pi += vv * (g * c + b * s);
      qi += vv * (g * s - b * c);
    }
    p_calc[i] = pi;
    q_calc[i] = qi;
  }
}

inline Mismatch mismatch(const PowerFlowState& st, const YbusRows& y,
                         const Injections& inj, const HeteroGraph& graph) {
  if (st.vm.size() != y.n || st.va.size() != y.n || inj.p.size() != y.n)
    throw DimensionMismatch("state/ybus/injection sizes disagree");
  Eigen::VectorXd p_calc, q_calc;
  calc_pq(st, y, p_calc, q_calc);

  Mismatch m;
  m.dp_buses.reserve(graph.pq.size() + graph.pv.size());
  for (int b : graph.pq) m.dp_buses.push_back(b);
  for (int b : graph.pv) m.dp_buses.push_back(b);
  std::sort(m.dp_buses.begin(), m.dp_buses.end());
  m.dq_buses = graph.pq;

  m.dp.resize(m.dp_buses.size());
  for (size_t k = 0; k < m.dp_buses.size(); ++k)
    m.dp[k] = inj.p[m.dp_buses[k]] - p_calc[m.dp_buses[k]];
  m.dq.resize(m.dq_buses.size());
  for (size_t k = 0; k < m.dq_buses.size(); ++k)
    m.dq[k] = inj.q[m.dq_buses[k]] - q_calc[m.dq_buses[k]];
  return m;
}

inline Mismatch mismatch(const PowerFlowState& st, const AdmittanceMatrix& y,
                         const Injections& inj, const HeteroGraph& graph) {
  return mismatch(st, YbusRows(y), inj, graph);
}

// Analytic Jacobian of [p_calc; q_calc] w.r.t. x = [va(PQ∪PV); vm(PQ)].
// Row order matches Mismatch (dp rows then dq rows).
inline Eigen::MatrixXd power_flow_jacobian(const PowerFlowState& st, const YbusRows& y,
                                           const std::vector<int>& dp_buses,
                                           const std::vector<int>& dq_buses) {
  const int n = y.n;
  Eigen::VectorXd p_calc, q_calc;
  calc_pq(st, y, p_calc, q_calc);

  std::vector<int> va_col(n, -1), vm_col(n, -1);
  const int nva = static_cast<int>(dp_buses.size());
  const int nvm = static_cast<int>(dq_buses.size());
  for (int k = 0; k < nva; ++k) va_col[dp_buses[k]] = k;
  for (int k = 0; k < nvm; ++k) vm_col[dq_buses[k]] = nva + k;

  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(nva + nvm, nva + nvm);
  auto fill_row = [&](int row, int i, bool is_q) {
    // diagonal B/G of the bus itself
    double gii = 0.0, bii = 0.0;
    for (const auto& [j, g, b] : y.rows[i])
      if (j == i) { gii = g; bii = b; }
    for (const auto& [j, g, b] : y.rows[i]) {
      const double th = st.va[i] - st.va[j];
      const double c = std::cos(th), s = std::sin(th);
      const double vv = st.vm[i] * st.vm[j];
      if (j != i) {
        if (!is_q) {
          if (va_col[j] >= 0) jac(row, va_col[j]) = vv * (g * s - b * c);
          if (vm_col[j] >= 0) jac(row, vm_col[j]) = st.vm[i] * (g * c + b * s);
        } else {
          if (va_col[j] >= 0) jac(row, va_col[j]) = -vv * (g * c + b * s);
          if (vm_col[j] >= 0) jac(row, vm_col[j]) = st.vm[i] * (g * s - b * c);
        }
      }
    }
    if (!is_q) {
      if (va_col[i] >= 0) jac(row, va_col[i]) = -q_calc[i] - bii * st.vm[i] * st.vm[i];
      if (vm_col[i] >= 0) jac(row, vm_col[i]) = p_calc[i] / st.vm[i] + gii * st.vm[i];
    } else {
      if (va_col[i] >= 0) jac(row, va_col[i]) = p_calc[i] - gii * st.vm[i] * st.vm[i];
      if (vm_col[i] >= 0) jac(row, vm_col[i]) = q_calc[i] / st.vm[i] - bii * st.vm[i];
    }
  };
  for (int k = 0; k < nva; ++k) fill_row(k, dp_buses[k], false);
  for (int k = 0; k < nvm; ++k) fill_row(nva + k, dq_buses[k], true);
  return jac;
}

inline PowerFlowState flat_start(const GridCase& gc) {
  const int n = gc.n_buses();
  PowerFlowState st{Eigen::VectorXd::Ones(n), Eigen::VectorXd::Zero(n)};
  const double slack_va = gc.buses[gc.slack_bus()].va_setpoint;
  for (const auto& b : gc.buses) {
    st.va[b.id] = slack_va;
    if (b.bus_type != BusType::PQ) st.vm[b.id] = b.vm_setpoint;
  }
  return st;
}

struct NrResult {
  PowerFlowState state;
  int iterations = 0;
  bool converged = false;
  double final_mismatch = 0.0;
};

inline NrResult solve_nr(const GridCase& gc, const PowerFlowState& init,
                         double tol = 1e-8, int max_iter = 20) {
  if (tol <= 0.0) throw Error("tol must be > 0");
  const YbusRows y(build_ybus(gc));
  const HeteroGraph graph = build_hetero_graph(gc);
  const Injections inj = injections_of(gc);

  NrResult res{init, 0, false, 0.0};
  Mismatch m = mismatch(res.state, y, inj, graph);
  res.final_mismatch = m.max_norm();
  if (res.final_mismatch < tol) {
    res.converged = true;
    return res;
  }
  const int nva = static_cast<int>(m.dp_buses.size());
  const int nvm = static_cast<int>(m.dq_buses.size());
  if (nva + nvm == 0) {
    res.converged = true;
    return res;
  }

  for (int it = 1; it <= max_iter; ++it) {
    Eigen::MatrixXd jac = power_flow_jacobian(res.state, y, m.dp_buses, m.dq_buses);
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(jac);
    if (lu.matrixLU().diagonal().cwiseAbs().minCoeff() < 1e-12)
      throw SingularJacobian("LU pivot below 1e-12 at iteration " + std::to_string(it));
    Eigen::VectorXd rhs(nva + nvm);
    rhs.head(nva) = m.dp;
    rhs.tail(nvm) = m.dq;
    // J is d(calc)/dx and rhs is spec - calc, so x moves by +J^{-1} rhs
    const Eigen::VectorXd dx = lu.solve(rhs);
    for (int k = 0; k < nva; ++k) res.state.va[m.dp_buses[k]] += dx[k];
    for (int k = 0; k < nvm; ++k) res.state.vm[m.dq_buses[k]] += dx[nva + k];
    res.iterations = it;

    m = mismatch(res.state, y, inj, graph);
    res.final_mismatch = m.max_norm();
    if (!std::isfinite(res.final_mismatch) || res.final_mismatch > 1e6)
      throw Diverged("mismatch norm " + std::to_string(res.final_mismatch) +
                     " at iteration " + std::to_string(it));
    if (res.final_mismatch < tol) {
      res.converged = true;
      return res;
    }
  }
  return res;
}

// Central finite-difference check of the analytic Jacobian; returns the max
// relative error over entries whose FD magnitude exceeds 1e-8.
inline double jacobian_fd_check(const GridCase& gc, const PowerFlowState& st, double eps) {
  if (eps <= 0.0) throw Error("eps must be > 0");
  const YbusRows y(build_ybus(gc));
  const HeteroGraph graph = build_hetero_graph(gc);
  const Injections inj = injections_of(gc);
  Mismatch m0 = mismatch(st, y, inj, graph);
  const int nva = static_cast<int>(m0.dp_buses.size());
  const int nvm = static_cast<int>(m0.dq_buses.size());
  const int nx = nva + nvm;
  if (nx == 0) return 0.0;

  const Eigen::MatrixXd jac = power_flow_jacobian(st, y, m0.dp_buses, m0.dq_buses);
  auto eval = [&](const PowerFlowState& s) {
    Mismatch m = mismatch(s, y, inj, graph);
    Eigen::VectorXd v(nx);
    v.head(nva) = m.dp;
    v.tail(nvm) = m.dq;
    return v;
  };
  double max_rel = 0.0;
  for (int k = 0; k < nx; ++k) {
    PowerFlowState sp = st, sm = st;
    if (k < nva) {
      sp.va[m0.dp_buses[k]] += eps;
      sm.va[m0.dp_buses[k]] -= eps;
    } else {
      sp.vm[m0.dq_buses[k - nva]] += eps;
      sm.vm[m0.dq_buses[k - nva]] -= eps;
    }
    // mismatch = spec - calc, so d(mismatch)/dx = -jac column
    const Eigen::VectorXd fd = (eval(sp) - eval(sm)) / (2.0 * eps);
    for (int r = 0; r < nx; ++r) {
      const double a = -jac(r, k), f = fd[r];
      if (std::abs(f) > 1e-8)
        max_rel = std::max(max_rel, std::abs(a - f) / std::abs(f));
    }
  }
  return max_rel;
}

}  // namespace gridflow
