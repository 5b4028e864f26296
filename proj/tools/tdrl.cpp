// Command-line front end: train, eval, ablate, gradcheck, export, gen-data.
//
// Exit codes: 0 success, 1 other error, 2 configuration error,
// 3 non-finite values during training, 4 gradcheck above tolerance.

#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tdrl/ablate.hpp"
#include "tdrl/checkpoint.hpp"
#include "tdrl/config.hpp"
#include "tdrl/export.hpp"
#include "tdrl/gradcheck_suite.hpp"
#include "tdrl/ops.hpp"
#include "tdrl/synthdata.hpp"
#include "tdrl/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tdrl;

namespace {

enum Exit { kOk = 0, kError = 1, kConfig = 2, kNumerical = 3, kGradcheck = 4 };

struct ConfigArgs {
  std::string path;
  std::vector<std::string> overrides;

  void attach(CLI::App* cmd) {
    cmd->add_option("-c,--config", path, "JSON config file (defaults apply when omitted)");
    cmd->add_option("-s,--set", overrides, "Override, e.g. --set td.lambda=3e-4 (repeatable)");
  }

  ExperimentConfig load() const {
    return path.empty() ? config_with_overrides(ExperimentConfig{}, overrides) : load_config(path, overrides);
  }
};

int cmd_train(const ConfigArgs& args, const std::string& out_dir) {
  ExperimentConfig cfg = args.load();
  if (!out_dir.empty()) cfg.run.output_dir = out_dir;
  const DataSplit data = make_data(cfg);
  const RunRecord rec = train(cfg, data, {[](const EpochRecord& e) { std::cout << to_json(e).dump() << std::endl; }});
  std::cerr << "config " << rec.config_hash << ": best val_acc " << rec.best_val_acc << " at epoch "
            << rec.best_epoch << " (" << rec.seconds << " s)\n";
  return kOk;
}

int cmd_eval(const ConfigArgs& args, const std::string& checkpoint) {
  const ExperimentConfig cfg = args.load();
  const NetworkParams<float> params = load_checkpoint(checkpoint, cfg.network);
  const DataSplit data = make_data(cfg);
  const EvalResult r = evaluate(cfg.network, params, data.val);
  json cos = json::object();
  for (const auto& [id, v] : r.mean_cosine_by_block) cos[std::to_string(id)] = v;
  std::cout << json{{"val_acc", r.accuracy}, {"val_loss", r.loss}, {"mean_cosine_by_block", cos}}.dump() << "\n";
  return kOk;
}

int cmd_ablate(const ConfigArgs& args, const std::vector<std::string>& tables, const std::vector<std::uint64_t>& seeds,
               std::size_t jobs, const std::string& summary_path) {
  const ExperimentConfig base = args.load();
  std::vector<AblationCell> cells;
  for (const auto& t : tables) {
    auto grid = ablation_grid(t, base);
    cells.insert(cells.end(), grid.begin(), grid.end());
  }
  AblationOptions opt;
  opt.seeds = seeds;
  opt.jobs = jobs;
  opt.log = [](const std::string& line) { std::cerr << line << "\n"; };
  const auto results = ablate(base, cells, opt);
  std::cout << summary_table(results);
  if (!summary_path.empty()) {
    json j = summary_json(results);
    j["base_config_hash"] = base.hash();
    std::ofstream(summary_path) << j.dump(2) << "\n";
  }
  return kOk;
}

int cmd_gradcheck(std::uint64_t seed) {
  bool ok = true;
  for (const auto& c : run_gradcheck_suite(seed)) {
    ok = ok && c.passed();
    std::cout << json{{"case", c.name},
                      {"max_rel_error", c.max_rel_error},
                      {"tolerance", c.tolerance},
                      {"coordinates", c.coordinates},
                      {"worst_leaf", c.worst_leaf},
                      {"passed", c.passed()}}
                     .dump()
              << "\n";
  }
  return ok ? kOk : kGradcheck;
}

int cmd_export(const ConfigArgs& args, const std::string& checkpoint, std::uint32_t seed, int label,
               const std::string& out_dir) {
  const ExperimentConfig cfg = args.load();
  const NetworkParams<float> params = load_checkpoint(checkpoint, cfg.network);
  const Tensor clip = generate_clip(seed, label, cfg.data.gen_spec(cfg.network));
  for (const auto& path : export_all(cfg.network, params, clip, out_dir)) std::cout << path.string() << "\n";
  return kOk;
}

int cmd_gen_data(const ConfigArgs& args, const std::string& out_dir) {
  const ExperimentConfig cfg = args.load();
  const DataSplit data = make_data(cfg);
  fs::create_directories(out_dir);
  save_clip_cache(fs::path(out_dir) / "train.clips", data.train);
  save_clip_cache(fs::path(out_dir) / "val.clips", data.val);
  std::cout << json{{"train", data.train.size()}, {"val", data.val.size()}, {"dir", out_dir}}.dump() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Progressive enhancement and temporal diversity video classifier"};
  app.require_subcommand(1);

  ConfigArgs train_cfg, eval_cfg, ablate_cfg, export_cfg, data_cfg;
  std::string train_out, checkpoint, summary, export_out, data_out = "data";
  std::vector<std::string> tables{"table4"};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t jobs = 1;
  std::uint64_t gc_seed = 7;
  std::uint32_t clip_seed = 1;
  int clip_label = 0;

  auto* train_cmd = app.add_subcommand("train", "Train one model; prints one JSON object per epoch");
  train_cfg.attach(train_cmd);
  train_cmd->add_option("-o,--out", train_out, "Output directory (overrides run.output_dir)");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the validation split");
  eval_cfg.attach(eval_cmd);
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();

  auto* ablate_cmd = app.add_subcommand("ablate", "Run ablation grids over several seeds");
  ablate_cfg.attach(ablate_cmd);
  ablate_cmd->add_option("-t,--table", tables, "table4, table5, table6, table7 (repeatable)")
      ->check(CLI::IsMember({"table4", "table5", "table6", "table7"}));
  ablate_cmd->add_option("--seeds", seeds, "Seeds per cell")->delimiter(',');
  ablate_cmd->add_option("-j,--jobs", jobs, "Runs in parallel")->check(CLI::PositiveNumber);
  ablate_cmd->add_option("--summary", summary, "Write the summary JSON here");

  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every operator and the composed block");
  gc_cmd->add_option("--seed", gc_seed, "Seed for random inputs");

  auto* export_cmd = app.add_subcommand("export", "Write enhancement and diversity CSVs for one clip");
  export_cfg.attach(export_cmd);
  export_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  export_cmd->add_option("--clip-seed", clip_seed, "Generator seed of the clip");
  export_cmd->add_option("--label", clip_label, "Class of the clip");
  export_cmd->add_option("-o,--out", export_out, "Output directory")->required();

  auto* data_cmd = app.add_subcommand("gen-data", "Generate the train/val split and write clip caches");
  data_cfg.attach(data_cmd);
  data_cmd->add_option("-o,--out", data_out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*train_cmd) return cmd_train(train_cfg, train_out);
    if (*eval_cmd) return cmd_eval(eval_cfg, checkpoint);
    if (*ablate_cmd) {
      if (seeds.empty()) throw ConfigError("--seeds must not be empty");
      return cmd_ablate(ablate_cfg, tables, seeds, jobs, summary);
    }
    if (*gc_cmd) return cmd_gradcheck(gc_seed);
    if (*export_cmd) return cmd_export(export_cfg, checkpoint, clip_seed, clip_label, export_out);
    if (*data_cmd) return cmd_gen_data(data_cfg, data_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const FormatError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kConfig;
  } catch (const TrainingDiverged& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return kNumerical;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kError;
  }
  return kOk;
}
