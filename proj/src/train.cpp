#include "tdrl/train.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "tdrl/ops.hpp"
#include "tdrl/optim.hpp"

namespace tdrl {

using nlohmann::json;

TrainingDiverged::TrainingDiverged(std::size_t epoch, std::string component, std::string op)
    : std::runtime_error("non-finite " + component + " at epoch " + std::to_string(epoch) + " (op " + op + ")"),
      epoch_(epoch),
      component_(std::move(component)),
      op_(std::move(op)) {}

namespace {

json int_map(const std::map<int, double>& m) {
  json j = json::object();
  for (const auto& [k, v] : m) j[std::to_string(k)] = v;
  return j;
}

std::size_t correct_count(const Tensor& logits, const std::vector<int>& labels, std::size_t offset = 0) {
  const std::size_t k = logits.dim(1);
  const auto d = logits.data();
  std::size_t hits = 0;
  for (std::size_t n = 0; n < logits.dim(0); ++n) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c) {
      if (d[n * k + c] > d[n * k + best]) best = c;
    }
    hits += static_cast<int>(best) == labels[offset + n];
  }
  return hits;
}

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ull + epoch * 0xD1B54A32D192ED03ull + 0x5348);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = rng() % i;
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

std::string component_of(const std::string& op) {
  if (op == "td_loss") return "td_loss";
  if (op == "softmax_cross_entropy") return "cross_entropy";
  return "forward";
}

bool grads_finite(const ParamList& params, std::string* bad) {
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (float g : p.grad()) {
      if (!std::isfinite(g)) {
        *bad = name;
        return false;
      }
    }
  }
  return true;
}

}  // namespace

json to_json(const EpochRecord& r, bool with_time) {
  json j = {{"epoch", r.epoch},
            {"lr", r.lr},
            {"train_loss", r.train_loss},
            {"train_acc", r.train_acc},
            {"val_loss", r.val_loss},
            {"val_acc", r.val_acc},
            {"ce", r.ce},
            {"td_sum", r.td_sum},
            {"td_terms", int_map(r.td_terms)},
            {"mean_cosine_by_block", int_map(r.mean_cosine_by_block)}};
  if (with_time) j["seconds"] = r.seconds;
  return j;
}

json to_json(const RunRecord& r, bool with_time) {
  json epochs = json::array();
  for (const auto& e : r.epochs) epochs.push_back(to_json(e, with_time));
  json j = {{"config_hash", r.config_hash},
            {"seed", r.seed},
            {"best_epoch", r.best_epoch},
            {"best_val_acc", r.best_val_acc},
            {"epochs", epochs}};
  if (with_time) j["seconds"] = r.seconds;
  return j;
}

bool same_results(const RunRecord& a, const RunRecord& b) {
  // json stores doubles exactly, so equality here is bitwise up to -0/+0.
  return to_json(a, false) == to_json(b, false);
}

EvalResult evaluate(const NetworkConfig& cfg, const NetworkParams<float>& params, const ClipBatch& data,
                    std::size_t batch_size) {
  NoGradGuard guard;
  EvalResult out;
  const std::size_t n = data.size();
  if (n == 0) return out;
  std::size_t hits = 0;
  long double loss = 0.0L;
  std::map<int, long double> cos_sum;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t len = std::min(batch_size, n - start);
    std::vector<std::size_t> rows(len);
    for (std::size_t i = 0; i < len; ++i) rows[i] = start + i;
    const ClipBatch batch = data.gather(rows);
    const NetworkOutput<float> fwd = network_forward(batch.clips, cfg, params);
    hits += correct_count(fwd.logits, batch.labels);
    loss += static_cast<long double>(softmax_cross_entropy(fwd.logits, batch.labels).item()) * len;
    for (const auto& [id, z] : fwd.z_by_block) {
      cos_sum[id] += static_cast<long double>(
                         mean_pairwise_cosine(z, cfg.td.regularized_channels(z.dim(2)), cfg.td.eps)) *
                     len;
    }
  }
  out.accuracy = static_cast<double>(hits) / static_cast<double>(n);
  out.loss = static_cast<double>(loss / n);
  for (const auto& [id, s] : cos_sum) out.mean_cosine_by_block[id] = static_cast<double>(s / n);
  return out;
}

DataSplit make_data(const ExperimentConfig& cfg) {
  return generate_split(cfg.data.n_train, cfg.data.n_val, cfg.data.seed, cfg.data.gen_spec(cfg.network));
}

RunRecord train(const ExperimentConfig& cfg, const DataSplit& data, const TrainHooks& hooks,
                NetworkParams<float>* final_params) {
#if defined(__GLIBC__)
  // Activations are large and short-lived; keep them on the heap instead of
  // paying an mmap/munmap pair for each one.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  using clock = std::chrono::steady_clock;
  const auto run_start = clock::now();
  const NetworkConfig& net = cfg.network;

  RunRecord record;
  record.config_hash = cfg.hash();
  record.seed = cfg.run.seed;

  std::filesystem::path dir;
  std::ofstream metrics;
  if (!cfg.run.output_dir.empty()) {
    dir = cfg.run.output_dir;
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "config.json") << cfg.to_json().dump(2) << "\n";
    metrics.open(dir / "metrics.jsonl");
  }

  NetworkParams<float> params = init_params(net);
  ParamList plist = params.named();
  for (auto& [name, p] : plist) p.set_requires_grad(true);
  OptimState opt;
  opt.momentum = cfg.optim.momentum;
  opt.weight_decay = cfg.optim.weight_decay;

  const std::size_t n = data.train.size();
  const std::size_t bs = cfg.optim.batch_size;
  for (std::size_t epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
    const auto epoch_start = clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = opt.lr = lr_schedule(epoch, cfg.optim.epochs, cfg.optim.base_lr);

    const std::vector<std::size_t> order = shuffled(n, cfg.run.seed, epoch);
    long double loss_sum = 0.0L, ce_sum = 0.0L;
    std::map<int, long double> td_sum;
    std::size_t hits = 0, batches = 0;
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t len = std::min(bs, n - start);
      const ClipBatch batch =
          data.train.gather(std::vector<std::size_t>(order.begin() + start, order.begin() + start + len));
      TotalLoss<float> loss;
      try {
        const NetworkOutput<float> fwd = network_forward(batch.clips, net, params);
        hits += correct_count(fwd.logits, batch.labels);
        loss = total_loss(fwd.logits, batch.labels, fwd.z_by_block, net.td);
        loss.loss.backward();
      } catch (const NumericalError& e) {
        throw TrainingDiverged(epoch, component_of(e.op()), e.op());
      }
      std::string bad;
      if (!grads_finite(plist, &bad)) throw TrainingDiverged(epoch, "backward", bad);
      if (cfg.optim.grad_clip > 0.0) clip_grad_norm(plist, cfg.optim.grad_clip);
      sgd_step(plist, opt);

      loss_sum += loss.breakdown.total;
      ce_sum += loss.breakdown.cross_entropy;
      for (const auto& [id, v] : loss.breakdown.td_terms) td_sum[id] += v;
      ++batches;
    }
    rec.train_loss = static_cast<double>(loss_sum / batches);
    rec.ce = static_cast<double>(ce_sum / batches);
    for (const auto& [id, v] : td_sum) {
      rec.td_terms[id] = static_cast<double>(v / batches);
      rec.td_sum += rec.td_terms[id];
    }
    rec.train_acc = static_cast<double>(hits) / static_cast<double>(n);

    const EvalResult val = evaluate(net, params, data.val);
    rec.val_acc = val.accuracy;
    rec.val_loss = val.loss;
    rec.mean_cosine_by_block = val.mean_cosine_by_block;
    rec.seconds = std::chrono::duration<double>(clock::now() - epoch_start).count();

    if (record.epochs.empty() || rec.val_acc > record.best_val_acc) {
      record.best_val_acc = rec.val_acc;
      record.best_epoch = epoch;
      if (!dir.empty()) save_checkpoint(dir / "best.ckpt", params);
    }
    record.epochs.push_back(rec);
    if (metrics.is_open()) metrics << to_json(rec).dump() << "\n" << std::flush;
    if (hooks.on_epoch) hooks.on_epoch(rec);
  }

  record.seconds = std::chrono::duration<double>(clock::now() - run_start).count();
  if (!dir.empty()) std::ofstream(dir / "run.json") << to_json(record).dump(2) << "\n";
  if (final_params) *final_params = params;
  return record;
}

}  // namespace tdrl
