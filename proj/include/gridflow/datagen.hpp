#pragma once

// Sample generation: load/branch perturbation, line drops, NR labeling,
// JSONL shards and the dataset/1 manifest with a topology-disjoint split.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "gridflow/acpf.hpp"
#include "gridflow/case_io.hpp"
#include "gridflow/errors.hpp"
#include "gridflow/network.hpp"
#include "gridflow/sha256.hpp"

namespace gridflow {

struct Sample {
  int id = 0;
  GridCase gc;                 // perturbed case (dropped lines have status=false)
  Eigen::VectorXd vm, va;      // converged NR labels, all buses
  std::vector<int> dropped;    // branch indices set out of service
};

inline nlohmann::json sample_to_json_obj(const Sample& s) {
  nlohmann::json j;
  j["schema"] = "sample/1";
  j["id"] = s.id;
  j["case"] = case_to_json_obj(s.gc);
  j["vm"] = std::vector<double>(s.vm.data(), s.vm.data() + s.vm.size());
  j["va"] = std::vector<double>(s.va.data(), s.va.data() + s.va.size());
  j["dropped"] = s.dropped;
  return j;
}

inline Sample sample_from_json_obj(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("schema") || j["schema"] != "sample/1")
    throw SchemaMismatch("expected schema sample/1");
  Sample s;
  s.id = j.at("id").get<int>();
  s.gc = case_from_json_obj(j.at("case"));
  const auto vm = j.at("vm").get<std::vector<double>>();
  const auto va = j.at("va").get<std::vector<double>>();
  s.vm = Eigen::Map<const Eigen::VectorXd>(vm.data(), static_cast<int>(vm.size()));
  s.va = Eigen::Map<const Eigen::VectorXd>(va.data(), static_cast<int>(va.size()));
  s.dropped = j.at("dropped").get<std::vector<int>>();
  if (s.dropped.empty() || s.dropped.size() > 2)
    throw InvariantViolation("dropped line count must be 1 or 2");
  return s;
}

// Load scaling U(0.5,1.5) at PQ buses, branch r/x/b scaling U(0.9,1.1), and
// 1-2 in-service lines dropped; resamples the drop set until connected.
inline GridCase perturb(const GridCase& base, std::mt19937_64& rng,
                        std::vector<int>* dropped_out = nullptr) {
  GridCase gc = base;
  std::uniform_real_distribution<double> load_mult(0.5, 1.5);
  std::uniform_real_distribution<double> branch_mult(0.9, 1.1);
  for (auto& b : gc.buses) {
    if (b.bus_type != BusType::PQ) continue;
    b.p_load *= load_mult(rng);
    b.q_load *= load_mult(rng);
  }
  for (auto& br : gc.branches) {
    br.r *= branch_mult(rng);
    br.x *= branch_mult(rng);
    br.b_charging *= branch_mult(rng);
  }

  std::vector<int> in_service;
  for (int k = 0; k < gc.n_branches(); ++k)
    if (gc.branches[k].status) in_service.push_back(k);
  std::uniform_int_distribution<int> count_dist(1, 2);
  std::uniform_int_distribution<size_t> pick(0, in_service.size() - 1);
  for (int attempt = 0; attempt < 100; ++attempt) {
    const int count = count_dist(rng);
    std::set<int> drop;
    while (static_cast<int>(drop.size()) < count) drop.insert(in_service[pick(rng)]);
    GridCase trial = gc;
    for (int k : drop) trial.branches[k].status = false;
    if (!is_connected(trial)) continue;
    if (dropped_out) dropped_out->assign(drop.begin(), drop.end());
    return trial;
  }
  throw ExhaustedResampling("no connected topology after 100 drop attempts");
}

struct ShardFile {
  std::string path;
  std::string sha256;
  int n_samples = 0;
  std::string split;  // "train" or "test"
};

struct DatasetManifest {
  std::string base_case;
  int n_requested = 0;
  int n_train = 0;
  int n_test = 0;
  int n_discarded = 0;
  uint64_t seed = 0;
  std::string split_rule;
  int shard_size = 0;
  std::vector<ShardFile> files;
  std::vector<std::vector<int>> train_topologies, test_topologies;
};

inline nlohmann::json manifest_to_json_obj(const DatasetManifest& m) {
  nlohmann::json j;
  j["schema"] = "dataset/1";
  j["base_case"] = m.base_case;
  j["n_requested"] = m.n_requested;
  j["n_train"] = m.n_train;
  j["n_test"] = m.n_test;
  j["n_discarded"] = m.n_discarded;
  j["seed"] = m.seed;
  j["split_rule"] = m.split_rule;
  j["shard_size"] = m.shard_size;
  j["files"] = nlohmann::json::array();
  for (const auto& f : m.files)
    j["files"].push_back({{"path", f.path},
                          {"sha256", f.sha256},
                          {"n_samples", f.n_samples},
                          {"split", f.split}});
  j["train_topologies"] = m.train_topologies;
  j["test_topologies"] = m.test_topologies;
  return j;
}

inline DatasetManifest manifest_from_json_obj(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("schema") || j["schema"] != "dataset/1")
    throw SchemaMismatch("expected schema dataset/1");
  DatasetManifest m;
  m.base_case = j.at("base_case").get<std::string>();
  m.n_requested = j.at("n_requested").get<int>();
  m.n_train = j.at("n_train").get<int>();
  m.n_test = j.at("n_test").get<int>();
  m.n_discarded = j.at("n_discarded").get<int>();
  m.seed = j.at("seed").get<uint64_t>();
  m.split_rule = j.at("split_rule").get<std::string>();
  m.shard_size = j.at("shard_size").get<int>();
  for (const auto& fj : j.at("files"))
    m.files.push_back({fj.at("path").get<std::string>(), fj.at("sha256").get<std::string>(),
                       fj.at("n_samples").get<int>(), fj.at("split").get<std::string>()});
  m.train_topologies = j.at("train_topologies").get<std::vector<std::vector<int>>>();
  m.test_topologies = j.at("test_topologies").get<std::vector<std::vector<int>>>();
  return m;
}

namespace detail {

inline std::string topo_key(const std::vector<int>& dropped) {
  std::string key;
  for (int k : dropped) key += std::to_string(k) + ",";
  return key;
}

// ~20% of topologies routed to test by the first hash byte; deterministic
// in (seed, topology) so the split is checkable from the manifest alone.
inline bool topo_is_test(const std::vector<int>& dropped, uint64_t seed) {
  const std::string h = sha256_hex(topo_key(dropped) + ":" + std::to_string(seed));
  const int byte = std::stoi(h.substr(0, 2), nullptr, 16);
  return byte < 51;  // 51/256 ~ 19.9%
}

}  // namespace detail

// Draws n labeled samples from per-sample RNG substreams, writes JSONL
// shards under out_dir, and returns the manifest (also written there).
inline DatasetManifest generate(const GridCase& base, int n, uint64_t seed,
                                const std::string& out_dir, int shard_size = 1000) {
  if (n < 10) throw Error("generate: n must be >= 10");
  base.validate();
  std::filesystem::create_directories(out_dir);

  DatasetManifest m;
  m.base_case = base.name;
  m.n_requested = n;
  m.seed = seed;
  m.split_rule = "sha256(topology:seed) first byte < 51 -> test (~20%)";
  m.shard_size = shard_size;

  std::set<std::string> train_topos, test_topos;
  std::vector<std::string> train_lines, test_lines;
  int attempts = 0;
  for (int produced = 0; produced < n; ++attempts) {
    std::seed_seq sseq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32),
                       static_cast<uint32_t>(attempts)};
    std::mt19937_64 rng(sseq);
    std::vector<int> dropped;
    GridCase gc = perturb(base, rng, &dropped);
    NrResult nr;
    try {
      nr = solve_nr(gc, flat_start(gc));
    } catch (const Diverged&) {
      ++m.n_discarded;
      continue;
    } catch (const SingularJacobian&) {
      ++m.n_discarded;
      continue;
    }
    if (!nr.converged) {
      ++m.n_discarded;
      continue;
    }
    Sample s;
    s.id = produced;
    s.gc = std::move(gc);
    s.vm = nr.state.vm;
    s.va = nr.state.va;
    s.dropped = dropped;
    const bool test = gridflow::detail::topo_is_test(dropped, seed);
    (test ? test_topos : train_topos).insert(gridflow::detail::topo_key(dropped));
    (test ? test_lines : train_lines).push_back(sample_to_json_obj(s).dump());
    ++produced;
  }
  if (m.n_discarded * 20 > attempts)
    throw ExcessiveDivergence(std::to_string(m.n_discarded) + " of " +
                              std::to_string(attempts) + " solves failed to converge");
  m.n_train = static_cast<int>(train_lines.size());
  m.n_test = static_cast<int>(test_lines.size());

  auto write_shards = [&](const std::vector<std::string>& lines, const std::string& split) {
    for (size_t off = 0, shard = 0; off < lines.size(); off += shard_size, ++shard) {
      char fname[64];
      std::snprintf(fname, sizeof(fname), "%s_%04zu.jsonl", split.c_str(), shard);
      const std::string path = out_dir + "/" + fname;
      std::ofstream f(path, std::ios::binary);
      if (!f) throw Error("cannot open " + path + " for writing");
      const size_t end = std::min(lines.size(), off + shard_size);
      for (size_t i = off; i < end; ++i) f << lines[i] << "\n";
      f.close();
      m.files.push_back({fname, sha256_file(path), static_cast<int>(end - off), split});
    }
  };
  write_shards(train_lines, "train");
  write_shards(test_lines, "test");

  auto topo_list = [](const std::set<std::string>& topos) {
    std::vector<std::vector<int>> out;
    for (const auto& key : topos) {
      std::vector<int> t;
      size_t pos = 0;
      while (pos < key.size()) {
        size_t comma = key.find(',', pos);
        t.push_back(std::stoi(key.substr(pos, comma - pos)));
        pos = comma + 1;
      }
      out.push_back(std::move(t));
    }
    return out;
  };
  m.train_topologies = topo_list(train_topos);
  m.test_topologies = topo_list(test_topos);

  std::ofstream mf(out_dir + "/manifest.json", std::ios::binary);
  mf << manifest_to_json_obj(m).dump(2) << "\n";
  return m;
}

// Reads all shards of one split back, verifying content hashes.
inline std::vector<Sample> load_split(const std::string& dir, const DatasetManifest& m,
                                      const std::string& split) {
  std::vector<Sample> out;
  for (const auto& f : m.files) {
    if (f.split != split) continue;
    const std::string path = dir + "/" + f.path;
    if (sha256_file(path) != f.sha256)
      throw SchemaMismatch("content hash mismatch for shard " + f.path);
    std::ifstream in(path, std::ios::binary);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      out.push_back(sample_from_json_obj(nlohmann::json::parse(line)));
    }
  }
  return out;
}

inline DatasetManifest load_manifest(const std::string& dir) {
  std::ifstream f(dir + "/manifest.json", std::ios::binary);
  if (!f) throw Error("cannot open " + dir + "/manifest.json");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaMismatch(std::string("manifest is not valid JSON: ") + e.what());
  }
  return manifest_from_json_obj(j);
}

}  // namespace gridflow
