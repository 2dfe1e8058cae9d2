#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "robustkd/data.hpp"
#include "robustkd/network.hpp"
#include "robustkd/train.hpp"

namespace robustkd {

/// Softmax of logits / T, row-wise. Throws for T <= 0.
Tensor softmax_T(const Tensor& logits, double temperature);

/// Soft-target cross-entropy -sum_j p_j^T log q_j^T, averaged over the batch;
/// gradient is w.r.t. the student logits.
LossAndGrad soft_loss(const Tensor& teacher_logits, const Tensor& student_logits, double temperature);

/// Cross-entropy at temperature 1.
LossAndGrad hard_loss(const Tensor& student_logits, std::span<const std::size_t> labels);

struct TapPair {
  std::string teacher_tap;
  std::string student_tap;
  double weight = 1.0;  // beta for this pair
};

struct DistillConfig {
  double temperature = 4.0;
  double alpha = 1.0;
  std::vector<TapPair> tap_pairs;
  std::size_t epochs = 60;
  double learning_rate = 0.05;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;

  void validate() const;
};

/// hard + alpha * soft, gradient w.r.t. student logits.
LossAndGrad kd_loss(const Tensor& teacher_logits, const Tensor& student_logits, std::span<const std::size_t> labels,
                    const DistillConfig& config);

enum class TransformKind { identity, linear_projection, spatial_avg };
std::string to_string(TransformKind kind);
TransformKind transform_kind_from_string(const std::string& s);

/// Maps a feature map into the space it is compared in. linear_projection is a
/// bias-free matrix on flat features and a 1x1 channel mix on (c,h,w) maps.
struct FeatureTransform {
  TransformKind kind = TransformKind::identity;
  Tensor weight;  // (out, in) for linear_projection

  Tensor apply(const Tensor& features) const;
  /// Gradient w.r.t. the input given the gradient w.r.t. the output. Accumulates
  /// into weight_grad when non-null.
  Tensor backprop(const Tensor& features, const Tensor& out_grad, Tensor* weight_grad) const;
};

/// Teacher-side and student-side transform for one tap pair.
struct PairTransform {
  FeatureTransform teacher;
  FeatureTransform student;
};

/// Picks transforms that bring each pair to a common shape: identity when shapes
/// agree, a learned student-side projection to the teacher width otherwise.
std::vector<PairTransform> build_transforms(const Network& teacher, const Network& student,
                                            const std::vector<TapPair>& pairs, std::uint64_t seed);

struct FeatureLoss {
  double value = 0.0;
  std::map<std::string, Tensor> student_tap_grads;
  std::vector<Tensor> projection_grads;  // one per pair; empty tensor when none
};

/// Sum over pairs of weight * mean squared distance between transformed features.
FeatureLoss feature_distill_loss(const std::map<std::string, Tensor>& teacher_taps,
                                 const std::map<std::string, Tensor>& student_taps,
                                 const std::vector<PairTransform>& transforms, const std::vector<TapPair>& pairs);

/// What the student sees of the teacher for a batch of inputs.
struct TeacherOutputs {
  Tensor logits;
  std::map<std::string, Tensor> taps;
};

using TeacherProvider = std::function<TeacherOutputs(const Tensor& inputs)>;

/// Plain forward pass of the teacher.
TeacherProvider plain_teacher(const Network& teacher);

struct DistillOutcome {
  Network student;
  std::vector<PairTransform> transforms;
  TrainHistory history;
};

/// Trains the student on hard + alpha * soft + sum_k beta_k * feature loss.
/// When `teacher_override` is set it replaces the teacher's logits and taps.
DistillOutcome distill_student(const Network& teacher, const Network& student_init, const Dataset& dataset,
                               const DistillConfig& config,
                               const std::optional<TeacherProvider>& teacher_override = std::nullopt);

}  // namespace robustkd
