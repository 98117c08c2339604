// gridflow: command-line front end for the power-flow stack.

#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gridflow/acpf.hpp"
#include "gridflow/case_io.hpp"
#include "gridflow/datagen.hpp"
#include "gridflow/evalbench.hpp"
#include "gridflow/flownet.hpp"
#include "gridflow/network.hpp"
#include "gridflow/seiter.hpp"

namespace {

using namespace gridflow;

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// .m or gridcase/1 .json, by extension
GridCase load_case(const std::string& path) {
  const std::string text = read_file(path);
  if (path.size() > 2 && path.substr(path.size() - 2) == ".m") {
    std::string name = std::filesystem::path(path).stem().string();
    return parse_matpower(text, name);
  }
  return from_json(text);
}

FlowNetConfig load_fcfg(const std::string& path) {
  if (path.empty()) return FlowNetConfig{};
  return flownet_config_from_json(nlohmann::json::parse(read_file(path)));
}

SeIterConfig load_tcfg(const std::string& path) {
  if (path.empty()) return SeIterConfig{};
  return seiter_config_from_json(nlohmann::json::parse(read_file(path)));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gridflow: AC power flow, dataset generation, and FlowNet training"};
  app.require_subcommand(1);

  std::string case_path, out_path, data_dir, ckpt_path, fcfg_path, tcfg_path, flags_path;
  int n = 10000, loops = 8;
  uint64_t seed = 7;
  double rho = 0.1;

  auto* cmd_parse = app.add_subcommand("parse", "parse a case file and emit gridcase/1 JSON");
  cmd_parse->add_option("--case", case_path)->required();
  cmd_parse->add_option("--out", out_path);

  auto* cmd_solve = app.add_subcommand("solve", "Newton-Raphson power flow from flat start");
  cmd_solve->add_option("--case", case_path)->required();

  auto* cmd_gen = app.add_subcommand("generate", "generate a labeled dataset");
  cmd_gen->add_option("--case", case_path)->required();
  cmd_gen->add_option("--n", n);
  cmd_gen->add_option("--seed", seed);
  cmd_gen->add_option("--out", data_dir)->required();

  auto* cmd_train = app.add_subcommand("train", "SeIter training");
  cmd_train->add_option("--data", data_dir)->required();
  cmd_train->add_option("--config", tcfg_path);
  cmd_train->add_option("--model-config", fcfg_path);
  cmd_train->add_option("--out", out_path)->required();

  auto* cmd_infer = app.add_subcommand("infer", "iterative inference on one case");
  cmd_infer->add_option("--ckpt", ckpt_path)->required();
  cmd_infer->add_option("--case", case_path)->required();
  cmd_infer->add_option("--loops", loops);
  cmd_infer->add_option("--model-config", fcfg_path);

  auto* cmd_eval = app.add_subcommand("eval", "RMSE report on the test split");
  cmd_eval->add_option("--ckpt", ckpt_path)->required();
  cmd_eval->add_option("--data", data_dir)->required();
  cmd_eval->add_option("--config", tcfg_path);
  cmd_eval->add_option("--model-config", fcfg_path);

  auto* cmd_cont = app.add_subcommand("contingency", "N-2 contingency harness");
  cmd_cont->add_option("--case", case_path)->required();
  cmd_cont->add_option("--ckpt", ckpt_path)->required();
  cmd_cont->add_option("--config", tcfg_path);
  cmd_cont->add_option("--model-config", fcfg_path);
  cmd_cont->add_option("--out", out_path);

  auto* cmd_ablate = app.add_subcommand("ablate", "Table-3-style ablation grid");
  cmd_ablate->add_option("--data", data_dir)->required();
  cmd_ablate->add_option("--config", tcfg_path);
  cmd_ablate->add_option("--model-config", fcfg_path);
  cmd_ablate->add_option("--out", out_path)->required();

  auto* cmd_missq = app.add_subcommand("missing-q", "missing-Q robustness evaluation");
  cmd_missq->add_option("--ckpt", ckpt_path)->required();
  cmd_missq->add_option("--data", data_dir)->required();
  cmd_missq->add_option("--rho", rho);
  cmd_missq->add_option("--seed", seed);
  cmd_missq->add_option("--config", tcfg_path);
  cmd_missq->add_option("--model-config", fcfg_path);

  CLI11_PARSE(app, argc, argv);

  try {
    if (cmd_parse->parsed()) {
      const GridCase gc = load_case(case_path);
      const std::string json = to_json(gc);
      if (out_path.empty()) {
        std::cout << json << "\n";
      } else {
        std::ofstream f(out_path, std::ios::binary);
        f << json << "\n";
      }
      std::cerr << gc.name << ": " << gc.n_buses() << " buses, " << gc.n_branches()
                << " branches, " << gc.generators.size() << " generators\n";
    } else if (cmd_solve->parsed()) {
      const GridCase gc = load_case(case_path);
      const NrResult res = solve_nr(gc, flat_start(gc));
      nlohmann::json j = {{"converged", res.converged},
                          {"iterations", res.iterations},
                          {"final_mismatch", res.final_mismatch},
                          {"vm", std::vector<double>(res.state.vm.data(),
                                                     res.state.vm.data() + res.state.vm.size())},
                          {"va", std::vector<double>(res.state.va.data(),
                                                     res.state.va.data() + res.state.va.size())}};
      std::cout << j.dump(2) << "\n";
    } else if (cmd_gen->parsed()) {
      const GridCase gc = load_case(case_path);
      const DatasetManifest m = generate(gc, n, seed, data_dir);
      std::cerr << "wrote " << m.n_train << " train / " << m.n_test << " test samples ("
                << m.n_discarded << " discarded) to " << data_dir << "\n";
    } else if (cmd_train->parsed()) {
      const SeIterConfig cfg = load_tcfg(tcfg_path);
      const FlowNetConfig fcfg = load_fcfg(fcfg_path);
      const DatasetManifest m = load_manifest(data_dir);
      const auto train_set = load_split(data_dir, m, "train");
      const auto test_set = load_split(data_dir, m, "test");
      const TrainResult res = train(train_set, test_set, fcfg, cfg, out_path);
      std::ofstream(out_path + "/model_config.json") << flownet_config_to_json(fcfg).dump(2) << "\n";
      std::ofstream(out_path + "/train_config.json") << seiter_config_to_json(cfg).dump(2) << "\n";
      std::cerr << "final metrics: " << res.metrics.back().dump() << "\n";
    } else if (cmd_infer->parsed()) {
      const GridCase gc = load_case(case_path);
      ParamStore params = load_checkpoint(ckpt_path);
      const FlowNetConfig fcfg = load_fcfg(fcfg_path);
      SeIterConfig cfg;
      cfg.loops = loops;
      const InferResult res = infer(gc, params, fcfg, cfg);
      nlohmann::json j = {{"mismatch_norms", res.mismatch_norms},
                          {"vm", std::vector<double>(res.state.vm.data(),
                                                     res.state.vm.data() + res.state.vm.size())},
                          {"va", std::vector<double>(res.state.va.data(),
                                                     res.state.va.data() + res.state.va.size())}};
      std::cout << j.dump(2) << "\n";
    } else if (cmd_eval->parsed()) {
      ParamStore params = load_checkpoint(ckpt_path);
      const FlowNetConfig fcfg = load_fcfg(fcfg_path);
      const SeIterConfig cfg = load_tcfg(tcfg_path);
      const DatasetManifest m = load_manifest(data_dir);
      const auto test_set = load_split(data_dir, m, "test");
      const EvalReport rep = evaluate(test_set, params, fcfg, cfg);
      std::cout << eval_report_to_json(rep).dump(2) << "\n";
    } else if (cmd_cont->parsed()) {
      const GridCase gc = load_case(case_path);
      ParamStore params = load_checkpoint(ckpt_path);
      const FlowNetConfig fcfg = load_fcfg(fcfg_path);
      const SeIterConfig cfg = load_tcfg(tcfg_path);
      const ContingencySummary sum = contingency_n2(gc, params, fcfg, cfg);
      const nlohmann::json j = contingency_summary_to_json(sum);
      if (out_path.empty()) {
        std::cout << j.dump(2) << "\n";
      } else {
        std::ofstream(out_path) << j.dump(2) << "\n";
        std::cerr << "NR total " << sum.total_solve_seconds << " s, model total "
                  << sum.total_model_seconds << " s over " << sum.n_pairs_connected
                  << " connected pairs\n";
      }
    } else if (cmd_ablate->parsed()) {
      const FlowNetConfig fcfg = load_fcfg(fcfg_path);
      const SeIterConfig cfg = load_tcfg(tcfg_path);
      const DatasetManifest m = load_manifest(data_dir);
      const auto train_set = load_split(data_dir, m, "train");
      const auto test_set = load_split(data_dir, m, "test");
      std::vector<AblationRow> rows;
      for (bool seiter : {false, true})
        for (auto& r : default_ablation_rows(fcfg, seiter)) rows.push_back(r);
      rows = ablate(train_set, test_set, fcfg, cfg, rows, out_path);
      nlohmann::json j = nlohmann::json::array();
      for (const auto& r : rows)
        j.push_back({{"name", r.name}, {"report", eval_report_to_json(r.report)}});
      std::ofstream(out_path + "/ablation.json") << j.dump(2) << "\n";
      std::cout << j.dump(2) << "\n";
    } else if (cmd_missq->parsed()) {
      ParamStore params = load_checkpoint(ckpt_path);
      const FlowNetConfig fcfg = load_fcfg(fcfg_path);
      const SeIterConfig cfg = load_tcfg(tcfg_path);
      const DatasetManifest m = load_manifest(data_dir);
      const auto test_set = load_split(data_dir, m, "test");
      const EvalReport rep = missing_q_eval(test_set, params, fcfg, cfg, rho, seed);
      std::cout << eval_report_to_json(rep).dump(2) << "\n";
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
