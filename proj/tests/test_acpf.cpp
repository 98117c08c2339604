#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "gridflow/acpf.hpp"

using namespace gridflow;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

const std::string kData = std::string(GRIDFLOW_SOURCE_DIR) + "/data";
const std::string kRef = std::string(GRIDFLOW_SOURCE_DIR) + "/tests/data";

GridCase load_case(const std::string& name) {
  return parse_matpower(slurp(kData + "/" + name + ".m"), name);
}

void check_against_reference(const std::string& name, double tol) {
  const GridCase gc = load_case(name);
  const auto ref = nlohmann::json::parse(slurp(kRef + "/" + name + "_ref.json"));
  const auto t0 = std::chrono::steady_clock::now();
  const NrResult res = solve_nr(gc, flat_start(gc));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(res.converged);
  CHECK(res.iterations <= 10);
  CHECK(res.final_mismatch < 1e-8);
  CHECK(secs < 1.0);
  const auto vm = ref.at("vm").get<std::vector<double>>();
  const auto va = ref.at("va").get<std::vector<double>>();
  REQUIRE(static_cast<int>(vm.size()) == gc.n_buses());
  for (int i = 0; i < gc.n_buses(); ++i) {
    CHECK(std::abs(res.state.vm[i] - vm[i]) < tol);
    CHECK(std::abs(res.state.va[i] - va[i]) < tol);
  }
}

}  // namespace

TEST_CASE("case39 matches the independent reference solve to 1e-6") {
  check_against_reference("case39", 1e-6);
}

TEST_CASE("case118 matches the independent reference solve to 1e-6") {
  check_against_reference("case118", 1e-6);
}

TEST_CASE("mismatch is ~zero at the solved state, large at flat start") {
  const GridCase gc = load_case("case39");
  const YbusRows y(build_ybus(gc));
  const HeteroGraph graph = build_hetero_graph(gc);
  const Injections inj = injections_of(gc);

  const PowerFlowState flat = flat_start(gc);
  CHECK(mismatch(flat, y, inj, graph).max_norm() > 1.0);

  const NrResult res = solve_nr(gc, flat);
  CHECK(mismatch(res.state, y, inj, graph).max_norm() < 1e-8);
}

TEST_CASE("mismatch dimension bookkeeping") {
  const GridCase gc = load_case("case39");
  const HeteroGraph graph = build_hetero_graph(gc);
  const Mismatch m = mismatch(flat_start(gc), build_ybus(gc), injections_of(gc), graph);
  CHECK(m.dp_buses.size() == 38);  // PQ + PV
  CHECK(m.dq_buses.size() == 29);  // PQ only
  CHECK(std::is_sorted(m.dp_buses.begin(), m.dp_buses.end()));
}

TEST_CASE("analytic jacobian agrees with central differences") {
  const GridCase gc = load_case("case39");
  SUBCASE("at flat start") {
    CHECK(jacobian_fd_check(gc, flat_start(gc), 1e-6) < 1e-5);
  }
  SUBCASE("at the solution") {
    const NrResult res = solve_nr(gc, flat_start(gc));
    CHECK(jacobian_fd_check(gc, res.state, 1e-6) < 1e-5);
  }
}

TEST_CASE("jacobian FD check on case118") {
  const GridCase gc = load_case("case118");
  CHECK(jacobian_fd_check(gc, flat_start(gc), 1e-6) < 1e-5);
}

TEST_CASE("injections: generation minus load in per-unit") {
  const GridCase gc = load_case("case39");
  const Injections inj = injections_of(gc);
  // bus 39 (index 38): load 1104 MW, gen 1000 MW -> net -1.04 p.u.
  CHECK(inj.p[38] == doctest::Approx(-1.04));
  CHECK(inj.q[38] == doctest::Approx(-2.50));
  // bus 30 (index 29): pure generator, 250 MW
  CHECK(inj.p[29] == doctest::Approx(2.50));
}

TEST_CASE("divergence on absurd loading") {
  GridCase gc = load_case("case39");
  for (auto& b : gc.buses) {
    b.p_load *= 50.0;
    b.q_load *= 50.0;
  }
  bool diverged_or_failed = false;
  try {
    diverged_or_failed = !solve_nr(gc, flat_start(gc)).converged;
  } catch (const Diverged&) {
    diverged_or_failed = true;
  } catch (const SingularJacobian&) {
    diverged_or_failed = true;
  }
  CHECK(diverged_or_failed);
}

TEST_CASE("solve_nr input validation") {
  const GridCase gc = load_case("case39");
  CHECK_THROWS_AS(solve_nr(gc, flat_start(gc), 0.0), Error);
  PowerFlowState bad;
  bad.vm = Eigen::VectorXd::Ones(3);
  bad.va = Eigen::VectorXd::Zero(3);
  CHECK_THROWS_AS(solve_nr(gc, bad), DimensionMismatch);
}

TEST_CASE("flat start: unit magnitudes at PQ, setpoints elsewhere") {
  const GridCase gc = load_case("case39");
  const PowerFlowState st = flat_start(gc);
  for (const auto& b : gc.buses) {
    if (b.bus_type == BusType::PQ)
      CHECK(st.vm[b.id] == 1.0);
    else
      CHECK(st.vm[b.id] == b.vm_setpoint);
    CHECK(st.va[b.id] == gc.buses[gc.slack_bus()].va_setpoint);
  }
}
