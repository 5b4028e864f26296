#pragma once

// Training loop, evaluation and run records.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "tdrl/backbone.hpp"
#include "tdrl/config.hpp"
#include "tdrl/synthdata.hpp"

namespace tdrl {

// A non-finite value appeared during training. component is "cross_entropy",
// "td_loss" or "backward"; op names the operator that produced it.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t epoch, std::string component, std::string op);
  std::size_t epoch() const { return epoch_; }
  const std::string& component() const { return component_; }
  const std::string& op() const { return op_; }

 private:
  std::size_t epoch_;
  std::string component_;
  std::string op_;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;  // mean total loss over training batches
  double train_acc = 0.0;
  double ce = 0.0;          // mean cross-entropy over training batches
  double td_sum = 0.0;      // mean of sum_b L_b over training batches
  std::map<int, double> td_terms;
  double val_loss = 0.0;    // cross-entropy on the validation split
  double val_acc = 0.0;
  std::map<int, double> mean_cosine_by_block;  // on the validation split
  double seconds = 0.0;
};

struct RunRecord {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_acc = 0.0;
  double seconds = 0.0;

  const EpochRecord& final() const { return epochs.back(); }
};

nlohmann::json to_json(const EpochRecord& r, bool with_time = true);
nlohmann::json to_json(const RunRecord& r, bool with_time = true);

// True when the records agree bit for bit apart from wall-clock fields.
bool same_results(const RunRecord& a, const RunRecord& b);

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::map<int, double> mean_cosine_by_block;
};

EvalResult evaluate(const NetworkConfig& cfg, const NetworkParams<float>& params, const ClipBatch& data,
                    std::size_t batch_size = 50);

struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
};

// Trains from init_params(cfg.network) on the given split. When
// cfg.run.output_dir is set, writes config.json, metrics.jsonl, best.ckpt
// (best validation accuracy) and run.json there.
RunRecord train(const ExperimentConfig& cfg, const DataSplit& data, const TrainHooks& hooks = {},
                NetworkParams<float>* final_params = nullptr);

DataSplit make_data(const ExperimentConfig& cfg);

}  // namespace tdrl
