#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cvm/experiment.hpp"
#include "cvm/gradcheck.hpp"
#include "cvm/losses.hpp"
#include "cvm/metrics.hpp"
#include "cvm/replay.hpp"
#include "cvm/trainer.hpp"

namespace fs = std::filesystem;
using namespace cvm;

namespace {

// Pinned tolerances and budgets.
constexpr double kGradEpsilon = 1e-3;
constexpr double kGradTolerance = 1e-4;
constexpr int kGradTrials = 20;
constexpr double kGradBudgetSeconds = 10.0;
constexpr double kReductionBudgetSeconds = 60.0;
constexpr double kForgettingBudgetSeconds = 300.0;
constexpr double kMemoryBudgetSeconds = 600.0;
constexpr double kCvmOverErMargin = 0.03;
constexpr double kMemoryInversionLimit = 0.01;
constexpr double kBetaPlasticityGap = 0.02;
constexpr double kZeroShotMargin = 0.15;
constexpr std::size_t kZeroShotAfterTask = 3;
constexpr int kReplayOperations = 100000;

int failures = 0;

void report(const std::string& name, bool ok, const std::string& detail) {
  std::cout << (ok ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
  if (!ok) ++failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& tag) {
  auto p = fs::temp_directory_path() / ("cvm_acceptance_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ExperimentConfig bundled() {
  return load_config(std::string(CVM_CONFIG_DIR) + "/synthetic_classil.json");
}

// ---------------------------------------------------------------------------

struct TripletFn {
  std::vector<ClassId> labels;
  SeenClassView view;
  template <class T>
  BasicLossValue<T> operator()(const BasicTensor<T>& e) const {
    return triplet_mapping_loss(e, labels, view, TripletConfig{});
  }
};

struct RetentionFn {
  Tensor snapshot;
  SeenClassView prev;
  template <class T>
  BasicLossValue<T> operator()(const BasicTensor<T>& e) const {
    return retention_loss(e, BasicRetentionTerm<T>{snapshot.cast<T>(), prev, RetentionMetric::squared});
  }
};

struct TotalFn {
  std::vector<ClassId> labels;
  SeenClassView view;
  Tensor snapshot;
  SeenClassView prev;
  template <class T>
  BasicLossValue<T> operator()(const BasicTensor<T>& e) const {
    std::optional<BasicRetentionTerm<T>> term(BasicRetentionTerm<T>{snapshot.cast<T>(), prev, RetentionMetric::squared});
    return combined_loss(e, labels, view, TripletConfig{}, term, T(1));
  }
};

struct CeFn {
  std::vector<std::size_t> labels;
  template <class T>
  BasicLossValue<T> operator()(const BasicTensor<T>& e) const {
    return cross_entropy_loss(e, labels);
  }
};

Tensor random_tensor(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor t({rows, cols});
  for (auto& v : t.data()) v = static_cast<float>(rng.normal());
  return t;
}

void gradient_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  const GradCheckOptions opts{kGradEpsilon, kGradTolerance, 1e-4};
  std::map<std::string, double> worst;
  std::map<std::string, int> passed;
  constexpr std::size_t in = 8, emb = 8, k = 6, batch = 8;
  const std::vector<std::size_t> hidden{10, 10};
  for (int trial = 0; trial < kGradTrials; ++trial) {
    Rng rng = Rng::derive(1000, static_cast<std::uint64_t>(trial));
    const auto anchors = std::make_shared<const AnchorSet>(synth_anchors(k, emb, {}, rng.next_u64()));
    auto net = FeatureNet::mlp(in, hidden, emb, LayerKind::tanh, true, rng);
    auto old = FeatureNet::mlp(in, hidden, emb, LayerKind::tanh, true, rng);
    const auto x = random_tensor(batch, in, rng);
    std::vector<ClassId> labels(batch);
    for (auto& l : labels) l = static_cast<ClassId>(rng.uniform_index(k));
    const SeenClassView all(anchors, anchors->ids());
    const SeenClassView prev(anchors, std::vector<ClassId>{0, 1, 2});
    const auto snap = infer(old, x);

    auto record = [&](const std::string& name, const GradCheckReport& r) {
      worst[name] = std::max(worst[name], r.max_rel_error);
      passed[name] += r.passed ? 1 : 0;
    };
    record("L_m", finite_diff_check(net, TripletFn{labels, all}, x, opts));
    record("L_d", finite_diff_check(net, RetentionFn{snap, prev}, x, opts));
    record("L_t", finite_diff_check(net, TotalFn{labels, all, snap, prev}, x, opts));

    auto ce_net = FeatureNet::mlp(in, hidden, k, LayerKind::tanh, false, rng);
    std::vector<std::size_t> cols(batch);
    for (auto& c : cols) c = rng.uniform_index(k);
    record("CE", finite_diff_check(ce_net, CeFn{cols}, x, opts));
  }
  const double secs = seconds_since(t0);
  bool ok = secs < kGradBudgetSeconds;
  std::string detail;
  for (const auto& [name, n] : passed) {
    ok = ok && n == kGradTrials;
    detail += name + " " + std::to_string(n) + "/" + std::to_string(kGradTrials) + " max_rel " + fmt(worst[name]) + "; ";
  }
  report("gradient-correctness", ok, detail + fmt(secs) + " s");
}

// ---------------------------------------------------------------------------

void beta_zero_reduction() {
  const auto t0 = std::chrono::steady_clock::now();
  auto cfg = bundled();
  const auto inputs = prepare_inputs(cfg);
  bool ok = true;
  std::size_t compared = 0;
  for (auto seed : cfg.seeds) {
    const auto stream = build_stream(cfg, inputs.dataset, seed);
    auto cvm = make_strategy(cfg, "cvm");
    cvm.beta = 0.0;
    const auto er = make_strategy(cfg, "er-lm");
    std::vector<FeatureNet> ta, tb;
    RunOptions oa, ob;
    oa.on_task_end = [&](std::uint32_t, const RunState& s) { ta.push_back(s.net); };
    ob.on_task_end = [&](std::uint32_t, const RunState& s) { tb.push_back(s.net); };
    const auto a = run_stream(stream, cvm, make_net_config(cfg), make_train_hyper(cfg), inputs.anchors, seed, oa);
    const auto b = run_stream(stream, er, make_net_config(cfg), make_train_hyper(cfg), inputs.anchors, seed, ob);
    ok = ok && ta == tb && a.accuracy == b.accuracy && a.final_state.net == b.final_state.net;
    compared += ta.size();
  }
  const double secs = seconds_since(t0);
  ok = ok && secs < kReductionBudgetSeconds;
  report("beta-zero-reduction", ok,
         std::to_string(compared) + " task-end parameter sets and accuracy matrices identical; " + fmt(secs) + " s");
}

// ---------------------------------------------------------------------------

struct RunMeans {
  std::map<std::string, double> avg, forgetting, last;
};

RunMeans means_of(const std::vector<SeedSummary>& rows) {
  std::map<std::string, std::vector<double>> a, f, l;
  for (const auto& r : rows) {
    a[r.strategy].push_back(r.avg_accuracy);
    f[r.strategy].push_back(r.forgetting);
    l[r.strategy].push_back(r.last_task_accuracy);
  }
  RunMeans m;
  for (const auto& [s, v] : a) m.avg[s] = mean(v);
  for (const auto& [s, v] : f) m.forgetting[s] = mean(v);
  for (const auto& [s, v] : l) m.last[s] = mean(v);
  return m;
}

fs::path forgetting_direction() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto cfg = bundled();
  const auto dir = scratch("main") / "run";
  std::ostringstream log;
  const auto m = means_of(run_experiment(cfg, dir.string(), log));
  const double fn = m.forgetting.at("naive-ce"), fe = m.forgetting.at("er-ce"), fc = m.forgetting.at("cvm");
  const double ae = m.avg.at("er-ce"), ac = m.avg.at("cvm");
  const double secs = seconds_since(t0);
  const bool ok = fn > fe && fe > fc && ac >= ae + kCvmOverErMargin && secs < kForgettingBudgetSeconds;
  report("forgetting-direction", ok,
         "forgetting naive " + fmt(fn) + " > er " + fmt(fe) + " > cvm " + fmt(fc) + "; avg cvm " + fmt(ac) +
             " vs er " + fmt(ae) + " (need +" + fmt(kCvmOverErMargin) + "); " + fmt(secs) + " s");
  return dir;
}

// ---------------------------------------------------------------------------

void memory_monotonicity() {
  const auto t0 = std::chrono::steady_clock::now();
  auto cfg = bundled();
  cfg.strategies = {"cvm"};
  std::vector<double> avgs;
  std::string detail;
  for (std::size_t mem : {50, 100, 200}) {
    cfg.hyper.memory_size = mem;
    std::ostringstream log;
    const auto m = means_of(run_experiment(cfg, (scratch("memory") / "run").string(), log));
    avgs.push_back(m.avg.at("cvm"));
    detail += "|M|=" + std::to_string(mem) + " " + fmt(avgs.back()) + "; ";
  }
  int inversions = 0;
  bool small = true;
  for (std::size_t i = 1; i < avgs.size(); ++i) {
    if (avgs[i] < avgs[i - 1]) {
      ++inversions;
      small = small && avgs[i - 1] - avgs[i] <= kMemoryInversionLimit;
    }
  }
  const double secs = seconds_since(t0);
  const bool ok = inversions <= 1 && small && secs < kMemoryBudgetSeconds;
  report("memory-monotonicity", ok, detail + std::to_string(inversions) + " inversion(s); " + fmt(secs) + " s");
}

// ---------------------------------------------------------------------------

void beta_tradeoff() {
  auto cfg = bundled();
  cfg.strategies = {"cvm"};
  std::map<double, double> last;
  for (double beta : {0.0, 10.0}) {
    cfg.hyper.beta = beta;
    std::ostringstream log;
    last[beta] = means_of(run_experiment(cfg, (scratch("beta") / "run").string(), log)).last.at("cvm");
  }
  const bool ok = last[0.0] - last[10.0] >= kBetaPlasticityGap;
  report("beta-tradeoff", ok,
         "last-task accuracy beta=0 " + fmt(last[0.0]) + ", beta=10 " + fmt(last[10.0]) + " (need gap >= " +
             fmt(kBetaPlasticityGap) + ")");
}

// ---------------------------------------------------------------------------

void retention_null_case() {
  bool ok = true;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    const auto anchors = std::make_shared<const AnchorSet>(synth_anchors(6, 8, {}, seed));
    const auto net = FeatureNet::mlp(8, std::vector<std::size_t>{12, 12}, 8, LayerKind::relu, true, rng);
    const auto x = random_tensor(16, 8, rng);
    std::vector<ClassId> labels(16);
    for (auto& l : labels) l = static_cast<ClassId>(rng.uniform_index(6));
    const SeenClassView all(anchors, anchors->ids());
    const SeenClassView prev(anchors, std::vector<ClassId>{0, 1, 2, 3});

    const RetentionContext ctx{std::make_shared<const FeatureNet>(net), prev};
    const auto ld = retention_loss(x, net, ctx);
    ok = ok && ld.value == 0.0f;
    for (float g : ld.grad.data()) ok = ok && g == 0.0f;

    const auto emb = infer(net, x);
    const auto lm = triplet_mapping_loss(emb, labels, all, TripletConfig{});
    const std::optional<RetentionTerm> term(RetentionTerm{emb, prev, RetentionMetric::squared});
    for (float beta : {0.5f, 1.0f, 10.0f}) {
      const auto lt = combined_loss(emb, labels, all, TripletConfig{}, term, beta);
      ok = ok && lt.value == lm.value && lt.grad == lm.grad;
    }
  }
  report("retention-null-case", ok, "L_d == 0 and L_t == L_m bitwise for identical nets over 5 seeds, beta in {0.5, 1, 10}");
}

// ---------------------------------------------------------------------------

void zero_shot_and_fw(const fs::path& run_dir) {
  std::ostringstream log;
  const auto rows = probe_run_dir(run_dir.string(), log);
  std::map<std::string, std::vector<double>> fw, zs;
  bool ce_inapplicable = true;
  double chance = 0.0;
  for (const auto& r : rows) {
    fw[r.strategy].push_back(r.fw_score);
    const auto& z = r.zero_shot_accuracy.at(kZeroShotAfterTask - 1);
    if (r.strategy == "naive-ce" || r.strategy == "er-ce") {
      for (const auto& v : r.zero_shot_accuracy) ce_inapplicable = ce_inapplicable && !v.has_value();
    } else if (r.strategy == "cvm" && z) {
      zs["cvm"].push_back(*z);
      chance = r.zero_shot_chance.at(kZeroShotAfterTask - 1);
    }
  }
  const auto cfg = bundled();
  const bool have = zs["cvm"].size() == cfg.seeds.size();
  const double zc = have ? mean(zs["cvm"]) : 0.0;
  report("zero-shot-above-chance", have && chance == 0.25 && zc >= chance + kZeroShotMargin && ce_inapplicable,
         "cvm after task " + std::to_string(kZeroShotAfterTask) + " " + fmt(zc) + " vs chance " + fmt(chance) +
             " (need +" + fmt(kZeroShotMargin) + "); ce strategies " +
             (ce_inapplicable ? "inapplicable" : "reported a value"));
  const double fc = mean(fw.at("cvm")), fe = mean(fw.at("er-ce"));
  report("fw-score-direction", fc > fe, "cvm " + fmt(fc) + " > er-ce " + fmt(fe));
}

// ---------------------------------------------------------------------------

void metric_oracles() {
  const auto m = AccuracyMatrix::from_rows({{0.75, 0.0, 0.0}, {0.5, 0.875, 0.0}, {0.25, 0.5, 0.75}});
  const double fw[] = {0.5, 0.75};
  // avg: (0.25 + 0.5 + 0.75) / 3; forgetting: ((0.75 - 0.25) + (0.875 - 0.5)) / 2
  const bool avg_ok = avg_accuracy(m) == 0.5;
  const bool fgt_ok = forgetting(m) == 0.4375;
  const bool fw_ok = fw_score(fw, 3) == 0.625;
  const auto perfect = AccuracyMatrix::from_rows({{1, 0, 0}, {1, 1, 0}, {1, 1, 1}});
  const bool perfect_ok = avg_accuracy(perfect) == 1.0 && forgetting(perfect) == 0.0;
  report("metric-oracles", avg_ok && fgt_ok && fw_ok && perfect_ok,
         "avg " + fmt(avg_accuracy(m)) + " (0.5), forgetting " + fmt(forgetting(m)) + " (0.4375), fw " +
             fmt(fw_score(fw, 3)) + " (0.625)");
}

// ---------------------------------------------------------------------------

void determinism() {
  const std::string config = std::string(CVM_CONFIG_DIR) + "/synthetic_classil.json";
  std::vector<fs::path> outs;
  for (const char* tag : {"det_a", "det_b"}) {
    const auto root = scratch(tag);
    ::setenv(kOutputRootEnv, root.c_str(), 1);
    std::ostringstream out, err;
    if (cmd_run(config, std::nullopt, out, err) != 0) {
      report("determinism", false, "run failed: " + err.str());
      return;
    }
    outs.push_back(fs::path(resolve_output_dir(bundled())));
  }
  ::unsetenv(kOutputRootEnv);
  std::size_t files = 0;
  bool ok = true;
  for (const auto& entry : fs::recursive_directory_iterator(outs[0])) {
    if (entry.path().extension() != ".csv") continue;
    const auto rel = fs::relative(entry.path(), outs[0]);
    ok = ok && fs::exists(outs[1] / rel) && slurp(entry.path()) == slurp(outs[1] / rel);
    ++files;
  }
  report("determinism", ok && files > 0, std::to_string(files) + " metric CSVs byte-identical across two runs");
}

// ---------------------------------------------------------------------------

void replay_invariants() {
  bool ok = true;
  std::string detail;
  for (auto policy : {ReplayPolicy::class_balanced, ReplayPolicy::reservoir}) {
    Rng ops(77);
    Rng draw(78);
    ReplayBuffer buf(50, 4, policy, 79);
    std::size_t violations = 0;
    for (int step = 0; step < kReplayOperations; ++step) {
      if (ops.uniform01() < 0.7) {
        const auto c = static_cast<ClassId>(std::min(ops.uniform_index(10), ops.uniform_index(10)));
        buf.insert(std::vector<float>(4, static_cast<float>(step)), c, 1 + static_cast<std::uint32_t>(step / 20000));
      } else if (!buf.empty()) {
        const auto n = 1 + ops.uniform_index(64);
        const auto s = buf.sample_batch(n, draw);
        if (s.labels.size() != n) ++violations;
      }
      if (buf.size() > buf.capacity()) ++violations;
      if (policy == ReplayPolicy::class_balanced && !buf.balance_invariant_holds()) ++violations;
    }
    ok = ok && violations == 0;
    detail += std::string(policy == ReplayPolicy::class_balanced ? "class-balanced" : "reservoir") + " " +
              std::to_string(violations) + " violations; ";
  }
  report("replay-invariants", ok, detail + std::to_string(kReplayOperations) + " operations each");
}

void guarded(const std::string& name, const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    report(name, false, std::string("exception: ") + e.what());
  }
}

}  // namespace

int main() {
  guarded("gradient-correctness", gradient_correctness);
  guarded("beta-zero-reduction", beta_zero_reduction);
  fs::path run_dir;
  guarded("forgetting-direction", [&] { run_dir = forgetting_direction(); });
  guarded("memory-monotonicity", memory_monotonicity);
  guarded("beta-tradeoff", beta_tradeoff);
  guarded("retention-null-case", retention_null_case);
  guarded("zero-shot-and-fw", [&] { zero_shot_and_fw(run_dir); });
  guarded("metric-oracles", metric_oracles);
  guarded("determinism", determinism);
  guarded("replay-invariants", replay_invariants);
  std::cout << (failures == 0 ? "ALL PASS" : std::to_string(failures) + " FAILED") << std::endl;
  return failures == 0 ? 0 : 1;
}
