#pragma once

// Ablation grids: each cell is a set of config overrides run over several seeds.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tdrl/config.hpp"
#include "tdrl/train.hpp"

namespace tdrl {

struct AblationCell {
  std::string table;  // "table4", "table5", "table6", "table7"
  std::string row;
  std::vector<std::string> overrides;
};

// table4: baseline, +PEM, +TDLoss, +PEM+TDLoss
// table5: TD ratio 25/50/75/100 %
// table6: TM, PEM B./A. TM, TDLoss B./A. TM
// table7: lambda 1..4 x 1e-4
// TD rows use base.td.lambda, or 2e-4 when the base has lambda 0. Throws
// ConfigError for an unknown table or a base without TD-regularized blocks.
std::vector<AblationCell> ablation_grid(const std::string& table, const ExperimentConfig& base);

struct CellResult {
  AblationCell cell;
  std::string config_hash;  // of the cell config at the first seed
  std::vector<RunRecord> runs;
  double median_val_acc = 0.0;
  double median_best_val_acc = 0.0;
  double median_train_acc = 0.0;
  double median_mean_cosine = 0.0;  // final epoch, averaged over regularized blocks
};

struct AblationOptions {
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t jobs = 1;
  std::function<void(const std::string&)> log;
};

double median(std::vector<double> values);

// One RunRecord per (cell, seed). Results keep the cell order regardless of jobs.
std::vector<CellResult> ablate(const ExperimentConfig& base, const std::vector<AblationCell>& cells,
                               const AblationOptions& options = {});

nlohmann::json summary_json(const std::vector<CellResult>& results);
std::string summary_table(const std::vector<CellResult>& results);

}  // namespace tdrl
