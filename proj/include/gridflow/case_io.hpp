#pragma once

// MATPOWER-style case parsing and the canonical gridcase/1 JSON format.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "gridflow/errors.hpp"

namespace gridflow {

enum class BusType { PQ, PV, Slack };

inline const char* to_string(BusType t) {
  switch (t) {
    case BusType::PQ: return "PQ";
    case BusType::PV: return "PV";
    case BusType::Slack: return "Slack";
  }
  return "?";
}

struct Bus {
  int id = 0;                 // internal index, 0..N-1
  BusType bus_type = BusType::PQ;
  double p_load = 0.0;        // p.u.
  double q_load = 0.0;        // p.u.
  double gs = 0.0;            // shunt conductance, p.u.
  double bs = 0.0;            // shunt susceptance, p.u.
  double vm_setpoint = 1.0;   // p.u., meaningful for PV/Slack
  double va_setpoint = 0.0;   // rad, meaningful for Slack
  double base_kv = 0.0;

  bool operator==(const Bus&) const = default;
};

struct Branch {
  int from_bus = 0;
  int to_bus = 0;
  double r = 0.0;
  double x = 0.0;
  double b_charging = 0.0;    // total line charging, p.u.
  double tap = 1.0;
  double shift = 0.0;         // rad
  bool status = true;

  bool operator==(const Branch&) const = default;
};

struct Generator {
  int bus = 0;
  double p_gen = 0.0;         // p.u.
  double vm_set = 1.0;        // p.u.

  bool operator==(const Generator&) const = default;
};

struct GridCase {
  std::string name;
  double base_mva = 100.0;
  std::vector<Bus> buses;
  std::vector<Branch> branches;
  std::vector<Generator> generators;
  std::vector<int> external_ids;  // internal index -> original bus number

  bool operator==(const GridCase&) const = default;

  int n_buses() const { return static_cast<int>(buses.size()); }
  int n_branches() const { return static_cast<int>(branches.size()); }

  int slack_bus() const {
    for (const auto& b : buses)
      if (b.bus_type == BusType::Slack) return b.id;
    throw InvariantViolation("grid case has no slack bus");
  }

  void validate() const {
    const int n = n_buses();
    int n_slack = 0, n_pq = 0;
    for (int i = 0; i < n; ++i) {
      const Bus& b = buses[i];
      if (b.id != i)
        throw InvariantViolation("bus ids must be contiguous 0..N-1, got " +
                                 std::to_string(b.id) + " at position " + std::to_string(i));
      if (b.bus_type == BusType::Slack) ++n_slack;
      if (b.bus_type == BusType::PQ) ++n_pq;
      if (b.bus_type != BusType::PQ && !(b.vm_setpoint > 0.0))
        throw InvariantViolation("vm_setpoint must be > 0 for PV/Slack bus " + std::to_string(i));
    }
    if (n_slack > 1) throw MultipleSlack("case has " + std::to_string(n_slack) + " slack buses");
    if (n_slack == 0) throw InvariantViolation("case has no slack bus");
    if (n > 1 && n_pq == 0) throw InvariantViolation("case has no PQ bus");
    for (size_t k = 0; k < branches.size(); ++k) {
      const Branch& br = branches[k];
      if (br.from_bus < 0 || br.from_bus >= n || br.to_bus < 0 || br.to_bus >= n)
        throw DanglingBranch("branch " + std::to_string(k) + " references a missing bus");
      if (!(br.tap > 0.0))
        throw InvariantViolation("branch " + std::to_string(k) + " has non-positive tap");
      if (br.r == 0.0 && br.x == 0.0)
        throw InvariantViolation("branch " + std::to_string(k) + " has zero series impedance");
    }
    for (const auto& g : generators)
      if (g.bus < 0 || g.bus >= n)
        throw InvariantViolation("generator references a missing bus");
    if (!external_ids.empty() && static_cast<int>(external_ids.size()) != n)
      throw InvariantViolation("external id map size mismatch");
  }
};

namespace detail {

inline std::string strip_comments(const std::string& text) {
  std::string out;
  out.reserve(text.size());
  bool in_comment = false;
  for (char c : text) {
    if (c == '%') in_comment = true;
    if (c == '\n') in_comment = false;
    out.push_back(in_comment ? ' ' : c);
  }
  return out;
}

inline double parse_number(const std::string& tok) {
  size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(tok, &pos);
  } catch (const std::exception&) {
    throw MalformedNumber("cannot parse numeric token '" + tok + "'");
  }
  if (pos != tok.size())
    throw MalformedNumber("trailing junk in numeric token '" + tok + "'");
  return v;
}

// Reads the bracketed matrix assigned to `mpc.<section>`; rows are separated
// by ';' or newlines.
inline std::vector<std::vector<double>> parse_matrix(const std::string& text,
                                                     const std::string& section) {
  const std::string key = "mpc." + section;
  size_t pos = text.find(key);
  while (pos != std::string::npos) {
    // require the next non-space char after the key to be '='
    size_t p = pos + key.size();
    while (p < text.size() && std::isspace(static_cast<unsigned char>(text[p]))) ++p;
    if (p < text.size() && text[p] == '=') break;
    pos = text.find(key, pos + 1);
  }
  if (pos == std::string::npos) throw MissingSection("missing section " + key);
  size_t open = text.find('[', pos);
  if (open == std::string::npos) throw MissingSection("missing '[' for " + key);
  size_t close = text.find(']', open);
  if (close == std::string::npos) throw MissingSection("missing ']' for " + key);

  std::vector<std::vector<double>> rows;
  std::vector<double> row;
  std::string tok;
  auto flush_tok = [&] {
    if (!tok.empty()) {
      row.push_back(parse_number(tok));
      tok.clear();
    }
  };
  auto flush_row = [&] {
    flush_tok();
    if (!row.empty()) {
      rows.push_back(row);
      row.clear();
    }
  };
  for (size_t i = open + 1; i < close; ++i) {
    char c = text[i];
    if (c == ';' || c == '\n') {
      flush_row();
    } else if (std::isspace(static_cast<unsigned char>(c)) || c == ',') {
      flush_tok();
    } else {
      tok.push_back(c);
    }
  }
  flush_row();
  return rows;
}

inline double parse_base_mva(const std::string& text) {
  const std::string key = "mpc.baseMVA";
  size_t pos = text.find(key);
  if (pos == std::string::npos) throw MissingSection("missing section " + key);
  size_t eq = text.find('=', pos);
  if (eq == std::string::npos) throw MissingSection("missing '=' for " + key);
  size_t end = text.find(';', eq);
  std::string tok = text.substr(eq + 1, end == std::string::npos ? std::string::npos : end - eq - 1);
  tok.erase(std::remove_if(tok.begin(), tok.end(),
                           [](unsigned char c) { return std::isspace(c); }),
            tok.end());
  return parse_number(tok);
}

}  // namespace detail

// Parses the MATPOWER m-file subset: baseMVA plus the bus/gen/branch matrices.
// Powers are converted to per-unit, angles to radians, and bus numbers
// re-indexed to 0..N-1 (original numbers kept in external_ids).
inline GridCase parse_matpower(const std::string& raw_text, const std::string& name = "case") {
  const std::string text = detail::strip_comments(raw_text);
  GridCase gc;
  gc.name = name;
  gc.base_mva = detail::parse_base_mva(text);
  const double base = gc.base_mva;
  const double deg = std::numbers::pi / 180.0;

  auto bus_rows = detail::parse_matrix(text, "bus");
  auto gen_rows = detail::parse_matrix(text, "gen");
  auto branch_rows = detail::parse_matrix(text, "branch");

  std::map<int, int> ext_to_int;
  int n_slack = 0;
  for (const auto& row : bus_rows) {
    if (row.size() < 10)
      throw MalformedNumber("bus row has fewer than 10 columns");
    Bus b;
    const int ext = static_cast<int>(row[0]);
    if (ext_to_int.count(ext))
      throw InvariantViolation("duplicate bus number " + std::to_string(ext));
    b.id = static_cast<int>(gc.buses.size());
    ext_to_int[ext] = b.id;
    const int type = static_cast<int>(row[1]);
    switch (type) {
      case 1: b.bus_type = BusType::PQ; break;
      case 2: b.bus_type = BusType::PV; break;
      case 3: b.bus_type = BusType::Slack; ++n_slack; break;
      default:
        throw InvariantViolation("unsupported bus type " + std::to_string(type));
    }
    b.p_load = row[2] / base;
    b.q_load = row[3] / base;
    b.gs = row[4] / base;
    b.bs = row[5] / base;
    b.vm_setpoint = row[7];
    b.va_setpoint = row[8] * deg;
    b.base_kv = row[9];
    gc.buses.push_back(b);
    gc.external_ids.push_back(ext);
  }
  if (n_slack > 1) throw MultipleSlack("case has " + std::to_string(n_slack) + " type-3 buses");

  for (const auto& row : gen_rows) {
    if (row.size() < 8)
      throw MalformedNumber("gen row has fewer than 8 columns");
    if (row[7] <= 0.0) continue;  // out-of-service generator
    auto it = ext_to_int.find(static_cast<int>(row[0]));
    if (it == ext_to_int.end())
      throw DanglingBranch("generator references unknown bus " + std::to_string(static_cast<int>(row[0])));
    Generator g;
    g.bus = it->second;
    g.p_gen = row[1] / base;
    g.vm_set = row[5];
    gc.generators.push_back(g);
    // the generator voltage setpoint overrides the bus-table Vm
    Bus& b = gc.buses[g.bus];
    if (b.bus_type != BusType::PQ) b.vm_setpoint = g.vm_set;
  }

  for (const auto& row : branch_rows) {
    if (row.size() < 11)
      throw MalformedNumber("branch row has fewer than 11 columns");
    Branch br;
    auto fit = ext_to_int.find(static_cast<int>(row[0]));
    auto tit = ext_to_int.find(static_cast<int>(row[1]));
    if (fit == ext_to_int.end() || tit == ext_to_int.end())
      throw DanglingBranch("branch endpoint not in bus table: " +
                           std::to_string(static_cast<int>(row[0])) + "-" +
                           std::to_string(static_cast<int>(row[1])));
    br.from_bus = fit->second;
    br.to_bus = tit->second;
    br.r = row[2];
    br.x = row[3];
    br.b_charging = row[4];
    br.tap = row[8] == 0.0 ? 1.0 : row[8];
    br.shift = row[9] * deg;
    br.status = row[10] != 0.0;
    gc.branches.push_back(br);
  }

  gc.validate();
  return gc;
}

namespace detail {

inline nlohmann::json bus_to_json(const Bus& b) {
  return {{"id", b.id},          {"type", to_string(b.bus_type)},
          {"p_load", b.p_load},  {"q_load", b.q_load},
          {"gs", b.gs},          {"bs", b.bs},
          {"vm_setpoint", b.vm_setpoint}, {"va_setpoint", b.va_setpoint},
          {"base_kv", b.base_kv}};
}

inline nlohmann::json branch_to_json(const Branch& br) {
  return {{"from", br.from_bus}, {"to", br.to_bus},
          {"r", br.r},           {"x", br.x},
          {"b_charging", br.b_charging},
          {"tap", br.tap},       {"shift", br.shift},
          {"status", br.status}};
}

inline BusType bus_type_from_string(const std::string& s) {
  if (s == "PQ") return BusType::PQ;
  if (s == "PV") return BusType::PV;
  if (s == "Slack") return BusType::Slack;
  throw SchemaMismatch("unknown bus type '" + s + "'");
}

}  // namespace detail

inline nlohmann::json case_to_json_obj(const GridCase& gc) {
  nlohmann::json j;
  j["schema"] = "gridcase/1";
  j["name"] = gc.name;
  j["base_mva"] = gc.base_mva;
  j["buses"] = nlohmann::json::array();
  for (const auto& b : gc.buses) j["buses"].push_back(detail::bus_to_json(b));
  j["branches"] = nlohmann::json::array();
  for (const auto& br : gc.branches) j["branches"].push_back(detail::branch_to_json(br));
  j["generators"] = nlohmann::json::array();
  for (const auto& g : gc.generators)
    j["generators"].push_back({{"bus", g.bus}, {"p_gen", g.p_gen}, {"vm_set", g.vm_set}});
  j["external_ids"] = gc.external_ids;
  return j;
}

// nlohmann::json keeps object keys sorted, so dump() is canonical and
// serialize->parse->serialize is a byte fixed point.
inline std::string to_json(const GridCase& gc) { return case_to_json_obj(gc).dump(); }

inline GridCase case_from_json_obj(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("schema") || j["schema"] != "gridcase/1")
    throw SchemaMismatch("expected schema gridcase/1");
  GridCase gc;
  try {
    gc.name = j.at("name").get<std::string>();
    gc.base_mva = j.at("base_mva").get<double>();
    for (const auto& bj : j.at("buses")) {
      Bus b;
      b.id = bj.at("id").get<int>();
      b.bus_type = detail::bus_type_from_string(bj.at("type").get<std::string>());
      b.p_load = bj.at("p_load").get<double>();
      b.q_load = bj.at("q_load").get<double>();
      b.gs = bj.at("gs").get<double>();
      b.bs = bj.at("bs").get<double>();
      b.vm_setpoint = bj.at("vm_setpoint").get<double>();
      b.va_setpoint = bj.at("va_setpoint").get<double>();
      b.base_kv = bj.at("base_kv").get<double>();
      gc.buses.push_back(b);
    }
    for (const auto& rj : j.at("branches")) {
      Branch br;
      br.from_bus = rj.at("from").get<int>();
      br.to_bus = rj.at("to").get<int>();
      br.r = rj.at("r").get<double>();
      br.x = rj.at("x").get<double>();
      br.b_charging = rj.at("b_charging").get<double>();
      br.tap = rj.at("tap").get<double>();
      br.shift = rj.at("shift").get<double>();
      br.status = rj.at("status").get<bool>();
      gc.branches.push_back(br);
    }
    for (const auto& gj : j.at("generators")) {
      Generator g;
      g.bus = gj.at("bus").get<int>();
      g.p_gen = gj.at("p_gen").get<double>();
      g.vm_set = gj.at("vm_set").get<double>();
      gc.generators.push_back(g);
    }
    gc.external_ids = j.at("external_ids").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaMismatch(std::string("malformed gridcase/1 document: ") + e.what());
  }
  try {
    gc.validate();
  } catch (const MultipleSlack&) {
    throw;
  } catch (const Error& e) {
    throw InvariantViolation(e.what());
  }
  return gc;
}

inline GridCase from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaMismatch(std::string("not valid JSON: ") + e.what());
  }
  return case_from_json_obj(j);
}

}  // namespace gridflow
