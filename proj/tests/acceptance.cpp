// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance [--out DIR] [--only N ...]
//
// Criteria 4 and 5 train twelve models on the full 2000/500 split and take
// most of the runtime.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include <CLI11.hpp>

#include "oracles.hpp"
#include "tdrl/ablate.hpp"
#include "tdrl/gradcheck_suite.hpp"
#include "tdrl/ops.hpp"
#include "tdrl/pem.hpp"
#include "tdrl/tdloss.hpp"
#include "tdrl/train.hpp"

using namespace tdrl;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    if (!detail.empty()) detail += "; ";
    detail += (ok ? "" : "FAILED ") + what;
  }
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string fmt(const char* f, double a, double b) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

// ---------------------------------------------------------------------------

Verdict gradients() {
  Verdict v;
  const auto t0 = Clock::now();
  const auto cases = run_gradcheck_suite();
  const double secs = seconds_since(t0);
  double worst_quadratic = 0.0, worst_other = 0.0;
  std::string failing;
  bool has_block = false;
  for (const auto& c : cases) {
    (c.tolerance <= 1e-6 ? worst_quadratic : worst_other) =
        std::max(c.tolerance <= 1e-6 ? worst_quadratic : worst_other, c.max_rel_error);
    if (!c.passed()) failing += " " + c.name;
    has_block |= c.name.find("block") != std::string::npos;
  }
  v.require(failing.empty(), std::to_string(cases.size()) + " cases" + (failing.empty() ? "" : ", failing:" + failing));
  v.require(worst_quadratic < 1e-6, fmt("quadratic-only max rel err %.2e < 1e-6", worst_quadratic));
  v.require(worst_other < 1e-3, fmt("other max rel err %.2e < 1e-3", worst_other));
  v.require(has_block, "composed PEM->TM->ResConv block checked");
  v.require(secs < 120.0, fmt("%.1fs < 120s", secs));
  return v;
}

// ---------------------------------------------------------------------------

Tensor64 permute_frames(const Tensor64& z, const std::vector<std::size_t>& perm) {
  const std::size_t N = z.dim(0), T = z.dim(1), F = z.numel() / (N * T);
  Tensor64 out(z.shape());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t t = 0; t < T; ++t)
      std::copy_n(z.data().begin() + (n * T + perm[t]) * F, F, out.mutable_data().begin() + (n * T + t) * F);
  return out;
}

Verdict td_properties() {
  Verdict v;
  std::mt19937_64 rng(2024);
  TdConfig cfg;
  cfg.ratio = 0.5;

  double identical_err = 0.0, orthogonal_err = 0.0, bound_violation = 0.0, perm_err = 0.0, scale_err = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t N = 1 + trial % 3, T = 2 + trial % 7, C = 2 + trial % 15, H = 1 + trial % 4, W = 1 + trial % 3;
    const double cmu = static_cast<double>(cfg.regularized_channels(C));

    // identical nonzero frames
    const Tensor64 frame = Tensor64::randn({N, 1, C, H, W}, rng, 1.0);
    Tensor64 same({N, T, C, H, W});
    const std::size_t F = C * H * W;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t t = 0; t < T; ++t)
        std::copy_n(frame.data().begin() + n * F, F, same.mutable_data().begin() + (n * T + t) * F);
    identical_err = std::max(identical_err, std::abs(td_loss(same, cfg).item() - cmu));

    // two frames with disjoint supports (needs at least two pixels)
    Tensor64 ortho({N, 2, C, H, W + 1});
    const std::size_t P = H * (W + 1);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        ortho.mutable_data()[((n * 2 + 0) * C + c) * P + 0] = 1.0 + static_cast<double>(c);
        ortho.mutable_data()[((n * 2 + 1) * C + c) * P + P - 1] = -0.5 - static_cast<double>(n);
      }
    orthogonal_err = std::max(orthogonal_err, std::abs(td_loss(ortho, cfg).item()));

    Tensor64 z = Tensor64::randn({N, T, C, H, W}, rng, 1.0);
    if (trial % 2) z = relu(z);
    const double base = td_loss(z, cfg).item();
    bound_violation = std::max({bound_violation, base - cmu, -cmu - base});

    std::vector<std::size_t> perm(T);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    perm_err = std::max(perm_err, std::abs(td_loss(permute_frames(z, perm), cfg).item() - base));

    std::uniform_real_distribution<double> pos(1e-2, 1e2);
    std::vector<double> per_channel(C);
    for (double& s : per_channel) s = pos(rng);
    Tensor64 s({N, T, C});
    for (std::size_t i = 0; i < s.numel(); ++i) s.mutable_data()[i] = per_channel[i % C];
    scale_err = std::max(scale_err, std::abs(td_loss(channel_scale(z, s), cfg).item() - base));
  }
  v.require(identical_err <= 1e-5, fmt("identical frames |L - C_mu| %.1e <= 1e-5", identical_err));
  v.require(orthogonal_err <= 1e-5, fmt("orthogonal |L| %.1e <= 1e-5", orthogonal_err));
  v.require(bound_violation <= 0.0, fmt("within [-C_mu, C_mu] (excess %.1e)", std::max(0.0, bound_violation)));
  v.require(perm_err <= 1e-6, fmt("frame permutation %.1e <= 1e-6", perm_err));
  v.require(scale_err <= 1e-6, fmt("channel scaling %.1e <= 1e-6", scale_err));
  return v;
}

// ---------------------------------------------------------------------------

Verdict pem_recurrence() {
  Verdict v;
  using P64 = BasicPemParams<double>;
  std::mt19937_64 rng(99);

  double convex_excess = 0.0, gate_bad = 0.0, half_err = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t N = 1 + trial % 4, C = 1 + trial % 9;
    P64 p = P64::zeros(C, 1);
    p.gate = Tensor64::randn({1, 2 * C}, rng, 0.7);
    const Tensor64 m = Tensor64::randn({N, C}, rng, 2.0), d = Tensor64::randn({N, C}, rng, 2.0);
    const auto r = memory_step(m, d, p);
    const auto r0 = memory_step(m, d, P64::zeros(C, 1));
    for (std::size_t n = 0; n < N; ++n) {
      const double g = r.gamma.data()[n];
      if (!(g > 0.0 && g < 1.0)) gate_bad = 1.0;
      half_err = std::max(half_err, std::abs(r0.gamma.data()[n] - 0.5));
      for (std::size_t c = 0; c < C; ++c) {
        const double a = m.at({n, c}), b = d.at({n, c}), x = r.memory.at({n, c});
        convex_excess = std::max({convex_excess, std::min(a, b) - x, x - std::max(a, b),
                                  std::abs(x - ((1 - g) * a + g * b))});
        half_err = std::max(half_err, std::abs(r0.memory.at({n, c}) - 0.5 * (a + b)));
      }
    }
  }
  v.require(convex_excess <= 1e-12 && gate_bad == 0.0, fmt("convex combination, gate in (0,1) (%.1e)", convex_excess));
  v.require(half_err <= 1e-12, fmt("W_g = 0 gives gamma = 0.5 and the midpoint (%.1e)", half_err));

  // Hand transcript: C = 2, r = 1, T = 3, one pixel per frame, memory from the
  // last real frame difference.
  P64 p;
  p.channels = 2;
  p.reduction = 1;
  p.f1 = Tensor64({2, 2}, std::vector<double>{1, 0, 0.5, 1});
  p.f2 = Tensor64({2, 2}, std::vector<double>{0.5, -1, 1, 0.5});
  p.gate = Tensor64({1, 4}, std::vector<double>{0.5, -0.5, 1, 0.25});
  p.expand = Tensor64({2, 2}, std::vector<double>{1, -1, 0.5, 2});
  const Tensor64 x({1, 3, 2, 1, 1}, std::vector<double>{1, 2, 0.5, 3, 2, 1});
  const double gamma[3] = {0.2689414213699951, 0.33998680190278263, 0.78725126865011963};
  const double mem[3][2] = {{-0.63447071068499761, -0.68276464465750131},
                            {-0.588752443809611, -0.70562377809519461},
                            {0.66199493315048319, 0.63713070505005742}};
  const double enh[3][2] = {{0.51207113745407939, 0.15672973131995213},
                            {0.52918462195714655, 0.15373219378866629},
                            {0.5062157367989093, 0.83275210288513224}};
  const PemOutput<double> out = pem_forward(x, p, MemoryInit::last_difference);
  double err = std::max(std::abs(out.memories[0].data()[0] + 0.5), std::abs(out.memories[0].data()[1] + 0.75));
  for (std::size_t t = 0; t < 3; ++t) {
    err = std::max(err, std::abs(out.gammas[t].item() - gamma[t]));
    for (std::size_t c = 0; c < 2; ++c) {
      err = std::max(err, std::abs(out.memories[t + 1].data()[c] - mem[t][c]));
      err = std::max(err, std::abs(out.enhancement.at({0, t, c}) - enh[t][c]));
      err = std::max(err, std::abs(out.enhanced.at({0, t, c, 0, 0}) - x.at({0, t, c, 0, 0}) * enh[t][c]));
    }
  }
  v.require(err <= 1e-6, fmt("T=3 transcript max err %.1e <= 1e-6", err));
  return v;
}

// ---------------------------------------------------------------------------
// Training criteria. All runs share the data split; the seed drives
// initialization and shuffling.

struct Arm {
  std::string name;
  std::vector<std::string> overrides;
  std::vector<RunRecord> runs;

  double median_of(const std::function<double(const RunRecord&)>& f) const {
    std::vector<double> xs;
    for (const auto& r : runs) xs.push_back(f(r));
    return median(xs);
  }
  double best_val() const {
    return median_of([](const RunRecord& r) { return r.best_val_acc; });
  }
  double final_val() const {
    return median_of([](const RunRecord& r) { return r.final().val_acc; });
  }
  double final_train() const {
    return median_of([](const RunRecord& r) { return r.final().train_acc; });
  }
  double final_cosine() const {
    return median_of([](const RunRecord& r) {
      const auto& m = r.final().mean_cosine_by_block;
      double s = 0.0;
      for (const auto& [id, c] : m) s += c;
      return m.empty() ? 0.0 : s / static_cast<double>(m.size());
    });
  }
};

const std::vector<std::string> kBase{"network.stem_stride=2", "optim.base_lr=0.05", "optim.grad_clip=5"};

class Experiments {
 public:
  explicit Experiments(std::filesystem::path out) : out_(std::move(out)) {}

  Arm& arm(const std::string& name, const std::vector<std::string>& overrides) {
    auto it = arms_.find(name);
    if (it != arms_.end()) return it->second;
    Arm a{name, overrides, {}};
    std::vector<std::string> all = kBase;
    all.insert(all.end(), overrides.begin(), overrides.end());
    for (std::uint64_t seed : {0u, 1u, 2u}) {
      std::vector<std::string> o = all;
      o.push_back("run.seed=" + std::to_string(seed));
      ExperimentConfig cfg = config_with_overrides(ExperimentConfig{}, o);
      if (!out_.empty()) cfg.run.output_dir = (out_ / name / ("seed" + std::to_string(seed))).string();
      if (!data_) data_ = make_data(cfg);
      const auto t0 = Clock::now();
      a.runs.push_back(train(cfg, *data_));
      const RunRecord& r = a.runs.back();
      std::fprintf(stderr, "  %-10s seed %llu: best val %.3f, final val %.3f, train %.3f (%.0fs)\n", name.c_str(),
                   static_cast<unsigned long long>(seed), r.best_val_acc, r.final().val_acc, r.final().train_acc,
                   seconds_since(t0));
    }
    return arms_.emplace(name, std::move(a)).first->second;
  }

 private:
  std::filesystem::path out_;
  std::optional<DataSplit> data_;
  std::map<std::string, Arm> arms_;
};

// Neither PEM nor TD: blocks keep their TD flags so the diversity of the
// post-TM features is still measured, but lambda = 0 keeps it out of the loss.
const std::vector<std::string> kTm{"network.blocks.*.use_pem=false", "td.lambda=0"};
const std::vector<std::string> kNoTm{"network.blocks.*.use_pem=false", "network.blocks.*.td_regularized=false",
                                     "network.blocks.*.tm_kind=none", "td.lambda=0"};
const std::vector<std::string> kTd{"network.blocks.*.use_pem=false", "td.ratio=0.5", "td.lambda=2e-4"};
const std::vector<std::string> kPem{"td.lambda=0"};

Verdict separation(Experiments& ex) {
  Verdict v;
  const Arm& none = ex.arm("no_tm", kNoTm);
  const Arm& tm = ex.arm("tm", kTm);
  v.require(none.best_val() <= 0.35, fmt("TM-free baseline best val %.3f <= 0.35", none.best_val()));
  v.require(tm.best_val() >= 0.90, fmt("TM model best val %.3f >= 0.90", tm.best_val()));
  return v;
}

Verdict td_effect(Experiments& ex) {
  Verdict v;
  const Arm& tm = ex.arm("tm", kTm);
  const Arm& td = ex.arm("tm_td", kTd);
  const Arm& pem = ex.arm("tm_pem", kPem);
  v.require(td.final_cosine() <= tm.final_cosine() - 0.05,
            fmt("mean cosine %.3f vs %.3f without TD (need -0.05)", td.final_cosine(), tm.final_cosine()));
  v.require(td.final_train() <= tm.final_train(),
            fmt("final train acc %.3f <= %.3f", td.final_train(), tm.final_train()));
  v.require(pem.final_val() >= tm.final_val() - 0.01,
            fmt("+PEM val %.3f >= baseline %.3f - 0.01", pem.final_val(), tm.final_val()));
  v.require(td.final_val() >= tm.final_val() - 0.01,
            fmt("+TDLoss val %.3f >= baseline %.3f - 0.01", td.final_val(), tm.final_val()));
  return v;
}

// ---------------------------------------------------------------------------

Verdict ablation_grids() {
  Verdict v;
  // Tiny model so the grids run in seconds; the shape of the output and the
  // reproducibility do not depend on scale.
  const ExperimentConfig base = config_with_overrides(
      ExperimentConfig{},
      {"network.height=12", "network.width=12", "network.stem_channels=8", "network.stem_stride=2",
       "network.frames=4", "data.square=3", "data.speed=1", "data.n_train=16", "data.n_val=8", "optim.batch_size=8",
       "optim.epochs=1",
       R"(network.blocks=[{"channels_in":8,"channels_out":8,"mid_channels":4,"use_pem":true,"td_regularized":true},{"channels_in":8,"channels_out":8,"mid_channels":4,"use_pem":true,"td_regularized":true}])"});
  AblationOptions opt;
  opt.seeds = {0, 1, 2};

  const std::map<std::string, std::vector<std::string>> rows{
      {"table4", {"baseline", "+PEM", "+TDLoss", "+PEM+TDLoss"}},
      {"table5", {"+25% TDLoss", "+50% TDLoss", "+75% TDLoss", "+100% TDLoss"}},
      {"table7", {"1e-4", "2e-4", "3e-4", "4e-4"}}};
  bool shapes = true, recorded = true, identical = true;
  for (const auto& [table, names] : rows) {
    const auto cells = ablation_grid(table, base);
    std::vector<std::string> got;
    for (const auto& c : cells) got.push_back(c.row);
    shapes &= got == names;
    if (table == "table5") {
      const double ratios[] = {0.25, 0.5, 0.75, 1.0};
      for (std::size_t i = 0; i < cells.size() && i < 4; ++i)
        shapes &= config_with_overrides(base, cells[i].overrides).network.td.ratio == ratios[i];
    }
    if (table == "table7") {
      for (std::size_t i = 0; i < cells.size() && i < 4; ++i)
        shapes &= std::abs(config_with_overrides(base, cells[i].overrides).network.td.lambda - (i + 1) * 1e-4) < 1e-15;
    }
    const auto first = ablate(base, cells, opt);
    const auto second = ablate(base, cells, opt);
    const nlohmann::json summary = summary_json(first);
    for (std::size_t i = 0; i < first.size(); ++i) {
      const auto& js = summary["cells"][i];
      recorded &= js["seeds"] == nlohmann::json({0, 1, 2}) && js.contains("median_val_acc") &&
                  js["val_acc"].size() == 3;
      std::vector<double> acc;
      for (const auto& r : first[i].runs) acc.push_back(r.final().val_acc);
      recorded &= first[i].median_val_acc == median(acc);
      identical &= first[i].config_hash == second[i].config_hash;
      for (std::size_t s = 0; s < 3; ++s) identical &= same_results(first[i].runs[s], second[i].runs[s]);
    }
  }
  v.require(shapes, "tables 4/5/7 have 4 rows with the expected ratios and lambdas");
  v.require(recorded, "seeds and medians recorded");
  v.require(identical, "reruns with identical config hashes are bit-identical");
  return v;
}

// ---------------------------------------------------------------------------

Verdict op_oracles() {
  Verdict v;
  double worst32 = 0.0, worst64 = 0.0;
  std::string op32;
  for (const auto& [op, e] : oracle::sweep<float>(31, 100))
    if (e >= worst32) worst32 = e, op32 = op;
  for (const auto& [op, e] : oracle::sweep<double>(32, 100)) worst64 = std::max(worst64, e);
  v.require(worst32 < 1e-6, fmt("float32 worst %.1e < 1e-6", worst32) + " (" + op32 + ")");
  v.require(worst64 < 1e-6, fmt("float64 worst %.1e < 1e-6", worst64));
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance suite"};
  std::string out;
  std::vector<int> only;
  app.add_option("--out", out, "keep per-run metrics and checkpoints here");
  app.add_option("--only", only, "run only these criteria")->check(CLI::Range(1, 7));
  CLI11_PARSE(app, argc, argv);

  Experiments ex(out);
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"gradient correctness", gradients},
      {"td_loss properties", td_properties},
      {"PEM recurrence", pem_recurrence},
      {"temporal-reasoning separation", [&] { return separation(ex); }},
      {"TD effect", [&] { return td_effect(ex); }},
      {"ablation grids", ablation_grids},
      {"op oracles", op_oracles},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v.require(false, std::string("threw: ") + e.what());
    }
    failed += !v.pass;
    std::printf("[%s] %d %s: %s (%.1fs)\n", v.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(), v.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
