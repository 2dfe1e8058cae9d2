#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "robustkd/data.hpp"
#include "robustkd/network.hpp"
#include "robustkd/train.hpp"

namespace robustkd {

enum class AttackKind { data_poison, feature_coupling, neuron_assimilation, adaptive_low_variance };

std::string to_string(AttackKind kind);
AttackKind attack_kind_from_string(const std::string& s);

struct NeuronRef {
  std::string tap;
  std::size_t index = 0;
  friend bool operator==(const NeuronRef&, const NeuronRef&) = default;
};

struct AttackConfig {
  AttackKind kind = AttackKind::data_poison;
  TriggerSpec trigger;
  double poison_fraction = 0.1;
  /// Weight on the attack-specific loss term.
  double strength = 1.0;
  /// Neurons driven to fixed_value on triggered inputs. Empty selects
  /// `auto_neuron_count` neurons of `assimilation_tap` automatically.
  std::vector<NeuronRef> target_neurons;
  double fixed_value = 3.0;
  std::size_t auto_neuron_count = 4;
  std::string assimilation_tap;  // empty: last tap
  std::string coupling_tap;      // empty: first tap

  void validate(const Network& net) const;
};

/// Mutable per-run state of the attack objective: running target-class centroid.
struct AttackState {
  Tensor centroid;
  bool has_centroid = false;
};

struct AttackBatchMeta {
  std::vector<std::size_t> labels;
  std::vector<bool> triggered;
};

/// Attack objective for one batch. All kinds include the cross-entropy on the
/// (possibly relabelled) batch; the extra terms act on triggered examples.
ObjectiveTerms attack_loss(AttackKind kind, const Tensor& logits, const std::map<std::string, Tensor>& taps,
                           const AttackBatchMeta& meta, const AttackConfig& config, AttackState& state);

/// The `count` neurons of `tap` with the largest mean activation on `examples`.
std::vector<NeuronRef> select_target_neurons(const Network& net, const Dataset& examples, const std::string& tap,
                                             std::size_t count);

struct AttackOutcome {
  Network teacher;
  std::vector<NeuronRef> target_neurons;
  TrainHistory history;
  double holdout_asr = -1.0;  // -1 when no holdout given
  double holdout_acc = -1.0;
  /// "ok", or "asr_below_target" when the holdout ASR stayed under 0.9.
  std::string status = "ok";
};

AttackOutcome train_backdoored_teacher(const Network& net, const Dataset& clean_train, const AttackConfig& attack,
                                       const TrainOptions& opts, const Dataset* holdout = nullptr);

}  // namespace robustkd
