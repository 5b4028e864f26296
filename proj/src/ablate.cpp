#include "tdrl/ablate.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstdio>
#include <exception>
#include <mutex>
#include <thread>

namespace tdrl {

using nlohmann::json;

namespace {

std::string fmt_lambda(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string slug(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      out += c;
    } else if (c == '%') {
      out += "pct";
    } else if (!out.empty() && out.back() != '_') {
      out += '_';
    }
  }
  while (!out.empty() && out.back() == '_') out.pop_back();
  return out.empty() ? "row" : out;
}

double final_mean_cosine(const RunRecord& r) {
  const auto& m = r.final().mean_cosine_by_block;
  if (m.empty()) return 0.0;
  double s = 0.0;
  for (const auto& [id, v] : m) s += v;
  return s / static_cast<double>(m.size());
}

}  // namespace

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

std::vector<AblationCell> ablation_grid(const std::string& table, const ExperimentConfig& base) {
  if (base.network.td.regularized_blocks.empty()) {
    throw ConfigError("ablation needs at least one td_regularized block in the base config");
  }
  const double lambda = base.network.td.lambda > 0.0 ? base.network.td.lambda : 2e-4;
  const std::string pem_off = "network.blocks.*.use_pem=false";
  const std::string pem_on = "network.blocks.*.use_pem=true";
  const std::string td_off = "td.lambda=0";
  const std::string td_on = "td.lambda=" + fmt_lambda(lambda);

  std::vector<AblationCell> cells;
  auto add = [&](std::string row, std::vector<std::string> ov) { cells.push_back({table, std::move(row), std::move(ov)}); };
  if (table == "table4") {
    add("baseline", {pem_off, td_off});
    add("+PEM", {pem_on, td_off});
    add("+TDLoss", {pem_off, td_on});
    add("+PEM+TDLoss", {pem_on, td_on});
  } else if (table == "table5") {
    for (int pct : {25, 50, 75, 100}) {
      add("+" + std::to_string(pct) + "% TDLoss", {pem_off, td_on, "td.ratio=" + fmt_lambda(pct / 100.0)});
    }
  } else if (table == "table6") {
    add("TM", {pem_off, td_off});
    add("PEM B. TM", {pem_on, "network.blocks.*.pem_position=before_tm", td_off});
    add("PEM A. TM", {pem_on, "network.blocks.*.pem_position=after_tm", td_off});
    add("TDLoss B. TM", {pem_off, td_on, "network.blocks.*.td_position=before_tm"});
    add("TDLoss A. TM", {pem_off, td_on, "network.blocks.*.td_position=after_tm"});
  } else if (table == "table7") {
    for (int k : {1, 2, 3, 4}) add(std::to_string(k) + "e-4", {pem_off, "td.lambda=" + fmt_lambda(k * 1e-4)});
  } else {
    throw ConfigError("unknown ablation table '" + table + "' (expected table4, table5, table6 or table7)");
  }
  return cells;
}

std::vector<CellResult> ablate(const ExperimentConfig& base, const std::vector<AblationCell>& cells,
                               const AblationOptions& options) {
  if (options.seeds.empty()) throw ConfigError("ablation needs at least one seed");

  struct Job {
    std::size_t cell;
    std::size_t seed_index;
    ExperimentConfig cfg;
  };
  std::vector<Job> jobs;
  std::vector<CellResult> results(cells.size());
  for (std::size_t c = 0; c < cells.size(); ++c) {
    results[c].cell = cells[c];
    results[c].runs.resize(options.seeds.size());
    for (std::size_t s = 0; s < options.seeds.size(); ++s) {
      std::vector<std::string> ov = cells[c].overrides;
      ov.push_back("run.seed=" + std::to_string(options.seeds[s]));
      if (!base.run.output_dir.empty()) {
        ov.push_back("run.output_dir=\"" + base.run.output_dir + "/" + cells[c].table + "/" + slug(cells[c].row) +
                     "/seed" + std::to_string(options.seeds[s]) + "\"");
      }
      ExperimentConfig cfg = config_with_overrides(base, ov);
      if (s == 0) results[c].config_hash = cfg.hash();
      jobs.push_back({c, s, std::move(cfg)});
    }
  }

  // The clip set depends only on the data section, which no cell overrides.
  const DataSplit data = make_data(base);

  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  std::exception_ptr failure;
  auto worker = [&] {
    for (std::size_t j; (j = next++) < jobs.size();) {
      const Job& job = jobs[j];
      try {
        RunRecord rec = train(job.cfg, data);
        if (options.log) {
          std::lock_guard lock(log_mutex);
          options.log(cells[job.cell].table + " | " + cells[job.cell].row + " | seed " +
                      std::to_string(options.seeds[job.seed_index]) + " | val_acc " +
                      std::to_string(rec.final().val_acc));
        }
        results[job.cell].runs[job.seed_index] = std::move(rec);
      } catch (...) {
        std::lock_guard lock(log_mutex);
        if (!failure) failure = std::current_exception();
        next = jobs.size();
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(options.jobs, 1, jobs.size());
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  for (auto& r : results) {
    std::vector<double> val, best, tr, cos;
    for (const auto& run : r.runs) {
      val.push_back(run.final().val_acc);
      best.push_back(run.best_val_acc);
      tr.push_back(run.final().train_acc);
      cos.push_back(final_mean_cosine(run));
    }
    r.median_val_acc = median(val);
    r.median_best_val_acc = median(best);
    r.median_train_acc = median(tr);
    r.median_mean_cosine = median(cos);
  }
  return results;
}

json summary_json(const std::vector<CellResult>& results) {
  json cells = json::array();
  for (const auto& r : results) {
    json seeds = json::array(), val = json::array(), train_acc = json::array(), hashes = json::array();
    for (const auto& run : r.runs) {
      seeds.push_back(run.seed);
      val.push_back(run.final().val_acc);
      train_acc.push_back(run.final().train_acc);
      hashes.push_back(run.config_hash);
    }
    cells.push_back({{"table", r.cell.table},
                     {"row", r.cell.row},
                     {"overrides", r.cell.overrides},
                     {"config_hash", r.config_hash},
                     {"run_config_hashes", hashes},
                     {"seeds", seeds},
                     {"val_acc", val},
                     {"train_acc", train_acc},
                     {"median_val_acc", r.median_val_acc},
                     {"median_best_val_acc", r.median_best_val_acc},
                     {"median_train_acc", r.median_train_acc},
                     {"median_mean_cosine", r.median_mean_cosine}});
  }
  return {{"cells", cells}};
}

std::string summary_table(const std::vector<CellResult>& results) {
  std::string out = "| table | row | seeds | val acc (median) | best val acc | train acc | mean cosine |\n"
                    "|---|---|---|---|---|---|---|\n";
  char buf[256];
  for (const auto& r : results) {
    std::snprintf(buf, sizeof buf, "| %s | %s | %zu | %.4f | %.4f | %.4f | %.4f |\n", r.cell.table.c_str(),
                  r.cell.row.c_str(), r.runs.size(), r.median_val_acc, r.median_best_val_acc, r.median_train_acc,
                  r.median_mean_cosine);
    out += buf;
  }
  return out;
}

}  // namespace tdrl
