#pragma once

// Nodal admittance construction and the typed graph view used by the model.

#include <array>
#include <cmath>
#include <complex>
#include <map>
#include <utility>
#include <vector>

#include "gridflow/case_io.hpp"
#include "gridflow/errors.hpp"

namespace gridflow {

struct AdmittanceMatrix {
  int n = 0;
  // (i, j) -> G + jB; structurally symmetric pattern
  std::map<std::pair<int, int>, std::complex<double>> entries;

  void add(int i, int j, std::complex<double> y) {
    auto [it, inserted] = entries.try_emplace({i, j}, y);
    if (!inserted) it->second += y;
  }

  std::complex<double> at(int i, int j) const {
    auto it = entries.find({i, j});
    return it == entries.end() ? std::complex<double>(0.0, 0.0) : it->second;
  }
};

inline AdmittanceMatrix build_ybus(const GridCase& gc) {
  AdmittanceMatrix y;
  y.n = gc.n_buses();
  for (size_t k = 0; k < gc.branches.size(); ++k) {
    const Branch& br = gc.branches[k];
    if (!br.status) continue;
    if (br.r == 0.0 && br.x == 0.0)
      throw ZeroImpedanceBranch("branch " + std::to_string(k) + " has r = x = 0");
    const std::complex<double> ys = 1.0 / std::complex<double>(br.r, br.x);
    const std::complex<double> bc(0.0, br.b_charging / 2.0);
    const double tau = br.tap;
    const std::complex<double> shift = std::polar(1.0, br.shift);
    const int f = br.from_bus, t = br.to_bus;
    y.add(f, f, (ys + bc) / (tau * tau));
    y.add(t, t, ys + bc);
    y.add(f, t, -ys / (tau * std::conj(shift)));
    y.add(t, f, -ys / (tau * shift));
  }
  for (const auto& b : gc.buses) {
    if (b.gs != 0.0 || b.bs != 0.0) y.add(b.id, b.id, {b.gs, b.bs});
  }
  // keep the pattern structurally symmetric even when a transformer makes
  // values asymmetric
  for (const auto& [ij, v] : std::map(y.entries)) {
    (void)v;
    y.entries.try_emplace({ij.second, ij.first}, 0.0);
  }
  return y;
}

// Directed edge list plus per-type node groups; one entry per in-service
// branch per direction.
struct HeteroGraph {
  std::vector<int> pq, pv, slack;          // node groups, ascending bus index
  std::vector<int> edge_src, edge_dst;
  std::vector<std::array<double, 5>> edge_feat;  // [g, b, b_charging/2, tap, shift]

  int n_nodes() const { return static_cast<int>(pq.size() + pv.size() + slack.size()); }
  int n_edges() const { return static_cast<int>(edge_src.size()); }
};

inline HeteroGraph build_hetero_graph(const GridCase& gc) {
  HeteroGraph g;
  for (const auto& b : gc.buses) {
    switch (b.bus_type) {
      case BusType::PQ: g.pq.push_back(b.id); break;
      case BusType::PV: g.pv.push_back(b.id); break;
      case BusType::Slack: g.slack.push_back(b.id); break;
    }
  }
  for (const auto& br : gc.branches) {
    if (!br.status) continue;
    const std::complex<double> ys = 1.0 / std::complex<double>(br.r, br.x);
    const std::array<double, 5> feat{ys.real(), ys.imag(), br.b_charging / 2.0, br.tap, br.shift};
    g.edge_src.push_back(br.from_bus);
    g.edge_dst.push_back(br.to_bus);
    g.edge_feat.push_back(feat);
    g.edge_src.push_back(br.to_bus);
    g.edge_dst.push_back(br.from_bus);
    g.edge_feat.push_back(feat);
  }
  return g;
}

// True when every bus is reachable over in-service branches.
inline bool is_connected(const GridCase& gc) {
  const int n = gc.n_buses();
  if (n == 0) return true;
  std::vector<std::vector<int>> adj(n);
  for (const auto& br : gc.branches) {
    if (!br.status) continue;
    adj[br.from_bus].push_back(br.to_bus);
    adj[br.to_bus].push_back(br.from_bus);
  }
  std::vector<char> seen(n, 0);
  std::vector<int> stack{0};
  seen[0] = 1;
  int count = 1;
  while (!stack.empty()) {
    int u = stack.back();
    stack.pop_back();
    for (int v : adj[u])
      if (!seen[v]) {
        seen[v] = 1;
        ++count;
        stack.push_back(v);
      }
  }
  return count == n;
}

}  // namespace gridflow
