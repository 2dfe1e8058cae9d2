// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "robustkd/pipeline.hpp"

using namespace robustkd;
using namespace rkd_test;
namespace fs = std::filesystem;

namespace {

constexpr int kTrials = 100;
constexpr double kFdTolerance = 1e-4;
constexpr double kOracleTolerance = 1e-10;
constexpr std::uint64_t kSeeds[] = {1, 2, 3};

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, a);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Shipped experiment configs: default.ini for data poisoning, <kind>.ini otherwise.
ExperimentConfig config_for(AttackKind kind, std::uint64_t seed) {
  const std::string name = kind == AttackKind::data_poison ? "default" : to_string(kind);
  ExperimentConfig c = load_config((fs::path(ROBUSTKD_CONFIG_DIR) / (name + ".ini")).string());
  if (c.attack.attack.kind != kind) throw ValidationError(name + ".ini does not configure " + to_string(kind));
  set_seed(c, seed);
  return c;
}

// Pipeline runs are shared between criteria.
std::map<std::pair<AttackKind, std::uint64_t>, PipelineResult> g_runs;
double g_first_run_seconds = 0.0;

const PipelineResult& pipeline(AttackKind kind, std::uint64_t seed) {
  const auto key = std::make_pair(kind, seed);
  if (auto it = g_runs.find(key); it != g_runs.end()) return it->second;
  const auto t0 = std::chrono::steady_clock::now();
  auto r = run_pipeline(config_for(kind, seed), false);
  const double secs = seconds_since(t0);
  std::printf("  [run] %s seed %lu: %.1fs teacher %.4f/%.4f baseline %.4f/%.4f defended %.4f/%.4f m=%s\n",
              to_string(kind).c_str(), static_cast<unsigned long>(seed), secs, r.report.teacher_acc,
              r.report.teacher_asr, r.report.baseline_student_acc, r.report.baseline_student_asr,
              r.report.defended_student_acc, r.report.defended_student_asr, r.report.extras["selected_m"].c_str());
  std::fflush(stdout);
  if (kind == AttackKind::data_poison && seed == 1) g_first_run_seconds = secs;
  return g_runs.emplace(key, std::move(r)).first->second;
}

// ---- criterion 8: gradients against central differences ----

struct FdStats {
  double worst = 0.0;
  void add(const Tensor& analytic, const Tensor& numeric) { worst = std::max(worst, relative_error(analytic, numeric)); }
};

Verdict gradient_checks() {
  Rng rng(8);
  std::map<std::string, FdStats> stats;
  for (int trial = 0; trial < kTrials; ++trial) {
    const std::size_t b = 2 + trial % 3, n = 3 + trial % 4;
    Tensor t = random_tensor({b, n}, rng, -3, 3), s = random_tensor({b, n}, rng, -3, 3);
    const auto labels = random_labels(b, n, rng);
    const double T = 0.5 + trial % 5;

    stats["soft"].add(soft_loss(t, s, T).grad, numeric_gradient([&] { return soft_loss(t, s, T).value; }, s));
    stats["hard"].add(hard_loss(s, labels).grad, numeric_gradient([&] { return hard_loss(s, labels).value; }, s));
    DistillConfig dc;
    dc.temperature = T;
    dc.alpha = 0.3 + 0.1 * (trial % 7);
    stats["kd"].add(kd_loss(t, s, labels, dc).grad,
                    numeric_gradient([&] { return kd_loss(t, s, labels, dc).value; }, s));

    // Feature loss: one identity pair and one projected pair.
    std::map<std::string, Tensor> tt{{"a", random_tensor({b, 4}, rng)}, {"b", random_tensor({b, 5}, rng)}};
    std::map<std::string, Tensor> st{{"a", random_tensor({b, 4}, rng)}, {"b", random_tensor({b, 3}, rng)}};
    const std::vector<TapPair> pairs{{"a", "a", 0.7}, {"b", "b", 1.3}};
    std::vector<PairTransform> tr(2);
    tr[1].student = {TransformKind::linear_projection, random_tensor({5, 3}, rng)};
    const auto fl = feature_distill_loss(tt, st, tr, pairs);
    for (const char* tap : {"a", "b"})
      stats["feature"].add(fl.student_tap_grads.at(tap),
                           numeric_gradient([&] { return feature_distill_loss(tt, st, tr, pairs).value; }, st.at(tap)));
    stats["feature_projection"].add(
        fl.projection_grads[1],
        numeric_gradient([&] { return feature_distill_loss(tt, st, tr, pairs).value; }, tr[1].student.weight));

    Tensor f = random_tensor({b, 6}, rng, -2, 2);
    stats["variance"].add(loss_f(f).grad, numeric_gradient([&] { return loss_f(f).value; }, f));

    const auto teacher = small_mlp({1, 3, 3}, 5, 4, 3, 100 + trial);
    const auto head = classifier_head(teacher);
    Tensor h = random_tensor({b, 4}, rng, -1, 1);
    const auto hl = random_labels(b, 3, rng);
    stats["detox_ce"].add(loss_ce_detox(h, hl, head).grad,
                          numeric_gradient([&] { return loss_ce_detox(h, hl, head).value; }, h));

    DetoxMask mask;
    mask.m = 0.05 + 0.9 * (trial % 10) / 10.0;
    mask.variant = trial % 2 ? MaskVariant::convex : MaskVariant::additive;
    mask.per_tap_p["h1"] = random_tensor({5}, rng);
    mask.per_tap_p["h2"] = random_tensor({4}, rng);
    const Tensor x = random_tensor({b, 1, 3, 3}, rng, 0, 1);
    const auto obj = mask_objective(teacher, mask, x, hl);
    for (const char* tap : {"h1", "h2"})
      stats["total_wrt_p"].add(obj.p_grads.at(tap), numeric_gradient(
                                                         [&] { return mask_objective(teacher, mask, x, hl).total; },
                                                         mask.per_tap_p.at(tap)));
  }
  Verdict v{true, ""};
  for (const auto& [name, s] : stats) {
    v.pass = v.pass && s.worst < kFdTolerance;
    v.detail += name + " " + fmt("%.1e", s.worst) + "  ";
  }
  v.detail = std::to_string(kTrials) + " trials each, worst relative error: " + v.detail;
  return v;
}

// ---- criterion 9: closed-form quantities against brute force ----

double brute_variance(const double* x, std::size_t n) {
  long double mean = 0.0L;
  for (std::size_t j = 0; j < n; ++j) mean += x[j];
  mean /= n;
  long double var = 0.0L;
  for (std::size_t j = 0; j < n; ++j) var += (x[j] - mean) * (x[j] - mean);
  return static_cast<double>(var / n);
}

std::size_t brute_argmax(const Network& net, const Tensor& image) {
  Shape shape{1};
  for (auto d : image.shape()) shape.push_back(d);
  const Tensor logits = forward(net, image.reshaped(shape)).logits;
  std::size_t best = 0;
  for (std::size_t j = 1; j < logits.size(); ++j)
    if (logits[j] > logits[best]) best = j;
  return best;
}

Tensor brute_patch(Tensor image, const TriggerSpec& t) {
  const std::size_t h = image.dim(1), w = image.dim(2);
  for (std::size_t c = 0; c < t.pattern.dim(0); ++c)
    for (std::size_t r = 0; r < t.pattern.dim(1); ++r)
      for (std::size_t q = 0; q < t.pattern.dim(2); ++q) {
        double& px = image[(c * h + t.row + r) * w + t.col + q];
        px = (1.0 - t.blend) * px + t.blend * t.pattern[(c * t.pattern.dim(1) + r) * t.pattern.dim(2) + q];
      }
  return image;
}

Verdict oracle_checks() {
  Rng rng(9);
  double worst = 0.0;
  bool counts_ok = true;
  auto track = [&](double a, double b) { worst = std::max(worst, std::abs(a - b)); };
  for (int trial = 0; trial < kTrials; ++trial) {
    const std::size_t b = 1 + trial % 4, n = 2 + trial % 9;
    const Tensor z = random_tensor({b, n}, rng, -5, 5);
    const double T = 0.25 + 0.5 * (trial % 12);
    const Tensor p = softmax_T(z, T);
    for (std::size_t r = 0; r < b; ++r) {
      long double denom = 0.0L;
      for (std::size_t j = 0; j < n; ++j) denom += std::exp(static_cast<long double>(z[r * n + j]) / T);
      for (std::size_t j = 0; j < n; ++j)
        track(p[r * n + j], static_cast<double>(std::exp(static_cast<long double>(z[r * n + j]) / T) / denom));
    }

    const Tensor f = random_tensor({b, n}, rng, -4, 4);
    const auto v = per_example_variance(f);
    double batch = 0.0;
    for (std::size_t r = 0; r < b; ++r) {
      const double bv = brute_variance(f.data().data() + r * n, n);
      track(v[r], bv);
      batch += bv / static_cast<double>(b);
    }
    track(loss_f(f).value, batch);

    const Tensor mp = random_tensor({n}, rng, -4, 4);
    const double m = (trial % 11) / 10.0;
    const Tensor add = detox_features(f, mp, m, MaskVariant::additive);
    const Tensor cvx = detox_features(f, mp, m, MaskVariant::convex);
    for (std::size_t r = 0; r < b; ++r)
      for (std::size_t j = 0; j < n; ++j) {
        track(add[r * n + j], f[r * n + j] + mp[j] * m);
        track(cvx[r * n + j], (1.0 - m) * f[r * n + j] + mp[j] * m);
      }
  }

  // ACC and ASR over random networks and data.
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t classes = 2 + trial % 4;
    const auto net = small_mlp({1, 6, 6}, 8, 5, classes, 200 + trial);
    Dataset d;
    d.images = random_tensor({40, 1, 6, 6}, rng, 0, 1);
    d.labels = random_labels(40, classes, rng);
    d.num_classes = classes;
    d.split = Split::test;
    TriggerSpec trig = corner_trigger({1, 6, 6}, 1 + trial % 3, trial % classes);
    trig.blend = 0.25 + 0.25 * (trial % 4);
    std::size_t correct = 0, hits = 0, eligible = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      const Tensor img = d.image(i);
      correct += brute_argmax(net, img) == d.labels[i];
      if (d.labels[i] == trig.target_label) continue;
      ++eligible;
      hits += brute_argmax(net, brute_patch(img, trig)) == trig.target_label;
    }
    if (eligible == 0) continue;
    track(accuracy(net, d), static_cast<double>(correct) / 40.0);
    track(attack_success_rate(net, d, trig), static_cast<double>(hits) / static_cast<double>(eligible));
    counts_ok = counts_ok && correct <= 40;
  }
  return {worst <= kOracleTolerance && counts_ok,
          "softmax_T, variance, detox_features (both variants), ACC, ASR; worst abs deviation " + fmt("%.1e", worst)};
}

// ---- experiment criteria ----

Verdict backdoor_transfer() {
  const auto& r = pipeline(AttackKind::data_poison, 1).report;
  const bool ok = r.teacher_asr >= 0.9 && r.baseline_student_asr >= 0.5 && g_first_run_seconds <= 300.0;
  return {ok, "teacher ASR " + fmt("%.4f", r.teacher_asr) + " (>= 0.9), baseline student ASR " +
                  fmt("%.4f", r.baseline_student_asr) + " (>= 0.5), runtime " + fmt("%.1f", g_first_run_seconds) +
                  "s (<= 300s)"};
}

Verdict defense_efficacy() {
  Verdict v{true, ""};
  for (auto kind : {AttackKind::data_poison, AttackKind::neuron_assimilation})
    for (auto seed : kSeeds) {
      const double asr = pipeline(kind, seed).report.defended_student_asr;
      v.pass = v.pass && asr <= 0.15;
      v.detail += to_string(kind) + "/" + std::to_string(seed) + " " + fmt("%.4f", asr) + "  ";
    }
  v.detail = "defended ASR (<= 0.15): " + v.detail;
  return v;
}

Verdict utility_retention() {
  Verdict v{true, ""};
  double worst = 0.0;
  for (auto kind : {AttackKind::data_poison, AttackKind::neuron_assimilation})
    for (auto seed : kSeeds) {
      const auto& r = pipeline(kind, seed).report;
      worst = std::max(worst, r.baseline_student_acc - r.defended_student_acc);
    }
  const auto& d = pipeline(AttackKind::data_poison, 1).report;
  const double default_gap = d.baseline_student_acc - d.defended_student_acc;
  v.pass = worst <= 0.10 && default_gap <= 0.05;
  v.detail = "largest ACC drop baseline -> defended " + fmt("%.4f", worst) + " (<= 0.10); default config " +
             fmt("%.4f", default_gap) + " (<= 0.05)";
  return v;
}

Verdict variance_gap() {
  const auto& poison = pipeline(AttackKind::data_poison, 1).report;
  const auto& assim = pipeline(AttackKind::neuron_assimilation, 1).report;
  const std::string last = "h2";
  const double clean = poison.variance_profile.at("clean_teacher").at(last);
  std::map<std::string, double> ratios;
  ratios["data_poison"] = poison.variance_profile.at("teacher").at(last) / clean;
  ratios["neuron_assimilation"] = assim.variance_profile.at("teacher").at(last) / clean;
  {
    const auto cfg = config_for(AttackKind::feature_coupling, 1);
    const DataSplits data = make_data(cfg);
    const auto out = train_attacked_teacher(cfg, data);
    ratios["feature_coupling"] =
        variance_profile(out.teacher, data.test, kVarianceSamples, cfg.seed).at(last) / clean;
  }
  Verdict v{true, ""};
  for (const auto& [kind, ratio] : ratios) {
    v.pass = v.pass && ratio > 1.0;
    v.detail += kind + " " + fmt("%.3f", ratio) + "  ";
  }
  v.detail = "last-tap variance ratio backdoored/clean over 100 clean test examples (> 1): " + v.detail;
  return v;
}

Verdict threshold_sensitivity() {
  const auto ab = run_ablation(config_for(AttackKind::data_poison, 1), AblationAxis::m_threshold, false);
  double at_01 = -1.0, at_06 = -1.0;
  std::string trace;
  for (const auto& p : ab.points) {
    trace += p.label + ":" + fmt("%.4f", p.report.defended_student_asr) + " ";
    if (p.label == "m=0.1") at_01 = p.report.defended_student_asr;
    if (p.label == "m=0.6") at_06 = p.report.defended_student_asr;
  }
  const double selected = pipeline(AttackKind::data_poison, 1).defense.converged_m;
  const bool ok = at_01 >= 0.0 && at_06 >= at_01 && selected <= 0.2;
  return {ok, "defended ASR per fixed m: " + trace + "| ASR(0.6) >= ASR(0.1): " + (at_06 >= at_01 ? "yes" : "no") +
                  "; selected m " + format_shortest(selected) + " (<= 0.2)"};
}

Verdict layer_ablation() {
  const auto ab = run_ablation(config_for(AttackKind::data_poison, 1), AblationAxis::tap_subsets, false);
  double all = -1.0, last = -1.0;
  std::string trace;
  for (const auto& p : ab.points) {
    trace += p.label + ":" + fmt("%.4f", p.report.defended_student_asr) + " ";
    if (p.label == "all") all = p.report.defended_student_asr;
    if (p.label == "h2") last = p.report.defended_student_asr;
  }
  return {all >= 0.0 && all < last, "defended ASR per masked tap set: " + trace + "(all < h2 required)"};
}

Verdict adaptive_attack() {
  const auto& r = pipeline(AttackKind::adaptive_low_variance, 1).report;
  const bool ok = r.defended_student_asr <= 0.30 && r.defended_student_asr < r.baseline_student_asr;
  return {ok, "teacher ASR " + fmt("%.4f", r.teacher_asr) + ", undefended student ASR " +
                  fmt("%.4f", r.baseline_student_asr) + ", defended " + fmt("%.4f", r.defended_student_asr) +
                  " (<= 0.30 and strictly below undefended)"};
}

std::string run_and_read_report(const ExperimentConfig& cfg) {
  run_pipeline(cfg, true);
  std::ifstream f(fs::path(cfg.output_dir) / kReportFile, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

Verdict determinism() {
  auto cfg = config_for(AttackKind::data_poison, 1);
  cfg.output_dir = (fs::temp_directory_path() / "robustkd_acceptance_determinism").string();
  fs::remove_all(cfg.output_dir);
  const std::string a = run_and_read_report(cfg);
  const std::string b = run_and_read_report(cfg);
  fs::remove_all(cfg.output_dir);
  return {!a.empty() && a == b, "two seeded runs, report.txt of " + std::to_string(a.size()) + " bytes, " +
                                    (a == b ? "byte-identical" : "differs")};
}

}  // namespace

int main() {
  const std::vector<std::pair<int, std::function<Verdict()>>> criteria{
      {8, gradient_checks},      {9, oracle_checks},          {1, backdoor_transfer}, {2, defense_efficacy},
      {3, utility_retention},    {4, variance_gap},           {5, threshold_sensitivity},
      {6, layer_ablation},       {7, adaptive_attack},        {10, determinism}};
  const char* names[] = {"",
                         "backdoor transfer",
                         "defense efficacy",
                         "utility retention",
                         "variance gap",
                         "threshold sensitivity",
                         "layer ablation",
                         "adaptive attack",
                         "numerical integrity",
                         "exact-formula oracles",
                         "determinism"};
  std::map<int, Verdict> results;
  const auto t0 = std::chrono::steady_clock::now();
  for (const auto& [id, check] : criteria) {
    Verdict v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    std::printf("criterion %2d %-22s %s  %s\n", id, names[id], v.pass ? "PASS" : "FAIL", v.detail.c_str());
    std::fflush(stdout);
    results[id] = v;
  }
  int failed = 0;
  std::printf("\nsummary (%.0fs):\n", seconds_since(t0));
  for (const auto& [id, v] : results) {
    std::printf("criterion %2d %-22s %s\n", id, names[id], v.pass ? "PASS" : "FAIL");
    failed += !v.pass;
  }
  return failed == 0 ? 0 : 1;
}
