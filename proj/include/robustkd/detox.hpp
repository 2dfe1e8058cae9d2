#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "robustkd/data.hpp"
#include "robustkd/distill.hpp"
#include "robustkd/network.hpp"
#include "robustkd/train.hpp"

namespace robustkd {

/// How the mask combines with the teacher feature F:
///   additive: F' = F + p*m
///   convex:   F' = (1 - m)*F + p*m
enum class MaskVariant { additive, convex };

std::string to_string(MaskVariant v);
MaskVariant mask_variant_from_string(const std::string& s);

/// Which terms drive the mask optimisation.
enum class DetoxLossTerms { ce_and_variance, ce_only, variance_only };

std::string to_string(DetoxLossTerms t);
DetoxLossTerms detox_loss_terms_from_string(const std::string& s);

/// One broadcast tensor p per tap (tap shape without the batch axis) and a
/// shared threshold m in [0, 1].
struct DetoxMask {
  std::map<std::string, Tensor> per_tap_p;
  double m = 0.1;
  MaskVariant variant = MaskVariant::additive;

  void validate(const Network& teacher) const;
};

/// Element-wise detoxified features. `features` is either p-shaped or a batch
/// whose trailing shape equals p's (p broadcast over the batch).
Tensor detox_features(const Tensor& features, const Tensor& p, double m, MaskVariant variant);

/// Batch mean of the per-example population variance over all elements.
LossAndGrad loss_f(const Tensor& features);

/// The teacher's layers after its last tap, as a standalone network.
Network classifier_head(const Network& teacher);

/// Cross-entropy of softmax(head(features)); gradient is w.r.t. the features.
LossAndGrad loss_ce_detox(const Tensor& features, std::span<const std::size_t> labels, const Network& head);

/// Unweighted sum.
double loss_total(double loss_ce, double loss_f);

/// Mean teacher feature per tap over `sample_count` seeded-random examples.
DetoxMask init_masks(const Network& teacher, const Dataset& clean_examples, std::size_t sample_count,
                     double initial_m, std::uint64_t seed, MaskVariant variant = MaskVariant::additive);

/// Forward-pass hook applying the mask at every tap it covers.
TapOverride mask_override(const DetoxMask& mask);

/// Teacher outputs with the mask applied at its taps (for distillation).
TeacherProvider detoxified_teacher(const Network& teacher, const DetoxMask& mask);

struct MaskObjective {
  double loss_ce = 0.0;
  double loss_f = 0.0;
  double total = 0.0;
  std::map<std::string, Tensor> p_grads;
};

/// L_t on one batch with gradients for every p. L_ce and L_f act on the last
/// tap; other masked taps add their own variance term. Teacher is read-only.
MaskObjective mask_objective(const Network& teacher, const DetoxMask& mask, const Tensor& inputs,
                             std::span<const std::size_t> labels,
                             DetoxLossTerms terms = DetoxLossTerms::ce_and_variance);

struct MaskOptimOptions {
  std::size_t iterations = 40;  // passes over the clean data
  double learning_rate = 1.0;
  std::size_t batch_size = 32;
  DetoxLossTerms terms = DetoxLossTerms::ce_and_variance;
  std::uint64_t seed = 0;
};

struct MaskTracePoint {
  double loss_ce = 0.0;
  double loss_f = 0.0;
};

/// Minibatch gradient descent on every p with m and the teacher fixed. One
/// iteration is one pass over `clean_data`; the trace holds the mean losses of
/// each pass.
DetoxMask optimize_masks(const Network& teacher, DetoxMask mask, const Dataset& clean_data,
                         const MaskOptimOptions& options, std::vector<MaskTracePoint>* trace = nullptr);

struct DefenseConfig {
  std::vector<double> m_schedule{0.05, 0.1, 0.2, 0.4, 0.6};
  double epsilon = 1e-6;
  std::size_t init_samples = 100;
  MaskOptimOptions optim;
  MaskVariant variant = MaskVariant::additive;
  /// Teacher taps carrying a mask; empty means every tap.
  std::vector<std::string> masked_taps;
  /// Fraction of the full distillation budget spent per candidate threshold.
  double search_budget = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SearchPoint {
  double m = 0.0;
  double acc = 0.0;
  double asr = 0.0;
  double loss_f = 0.0;
  double loss_ce = 0.0;
};

struct DetoxResult {
  DetoxMask mask;
  Network student;
  std::vector<PairTransform> transforms;
  std::vector<SearchPoint> history;
  double converged_m = 0.0;
  double acc_ori = 0.0;
  double asr_ori = 0.0;
  /// True when no candidate threshold brought the ASR below the teacher's.
  bool defense_ineffective = false;
  /// True when two consecutive candidates agreed within epsilon and the sweep stopped.
  bool converged_early = false;
};

/// Threshold search over `config.m_schedule`. Every candidate gets freshly
/// initialised and optimised masks and a short-budget student; acc/ASR are
/// measured on `clean_data` with `trigger` as the evaluation oracle. The m
/// maximising acc - asr wins (ties to the smaller m) and the returned student is
/// distilled at the full budget with it. A single-value schedule skips the
/// short-budget round and scores the full-budget student directly.
DetoxResult search_threshold(const Network& teacher, const Network& student_init, const Dataset& clean_data,
                             const TriggerSpec& trigger, const DistillConfig& distill, const DefenseConfig& config);

/// Full pipeline: mask initialisation, optimisation, threshold search and the
/// final distillation against detoxified features.
DetoxResult robustkd_distill(const Network& teacher, const Network& student_init, const Dataset& clean_data,
                             const TriggerSpec& trigger, const DistillConfig& distill, const DefenseConfig& config);

}  // namespace robustkd
