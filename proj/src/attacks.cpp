#include "robustkd/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "robustkd/metrics.hpp"

namespace robustkd {

namespace {

constexpr double kTargetAsr = 0.9;

std::string resolve(const std::string& name, const std::string& fallback) { return name.empty() ? fallback : name; }

void add_tap_grad(ObjectiveTerms& t, const std::string& tap, Tensor g) {
  if (auto it = t.tap_grads.find(tap); it != t.tap_grads.end())
    it->second += g;
  else
    t.tap_grads.emplace(tap, std::move(g));
}

// strength * mean over (triggered examples x target neurons) of (a - v)^2.
void assimilation_term(ObjectiveTerms& t, const std::map<std::string, Tensor>& taps, const AttackBatchMeta& meta,
                       const AttackConfig& cfg) {
  const auto n_trig = static_cast<std::size_t>(std::count(meta.triggered.begin(), meta.triggered.end(), true));
  if (n_trig == 0 || cfg.target_neurons.empty()) return;
  const double inv = 1.0 / static_cast<double>(n_trig * cfg.target_neurons.size());
  std::map<std::string, Tensor> grads;
  for (const auto& nr : cfg.target_neurons) {
    const auto it = taps.find(nr.tap);
    if (it == taps.end()) throw ValidationError("attack: missing tap '" + nr.tap + "'");
    const Tensor& f = it->second;
    const std::size_t rs = f.row_size();
    if (nr.index >= rs) throw ValidationError("attack: neuron index out of range for tap '" + nr.tap + "'");
    auto [g, inserted] = grads.try_emplace(nr.tap, f.shape());
    for (std::size_t b = 0; b < meta.triggered.size(); ++b) {
      if (!meta.triggered[b]) continue;
      const double d = f[b * rs + nr.index] - cfg.fixed_value;
      t.loss += cfg.strength * d * d * inv;
      g->second[b * rs + nr.index] += cfg.strength * 2.0 * d * inv;
    }
  }
  for (auto& [tap, g] : grads) add_tap_grad(t, tap, std::move(g));
}

// strength * batch-mean of per-example population variance.
void variance_term(ObjectiveTerms& t, const std::string& tap, const Tensor& f, double strength) {
  const std::size_t b = f.dim(0), n = f.row_size();
  Tensor g(f.shape());
  for (std::size_t i = 0; i < b; ++i) {
    const double* x = f.data().data() + i * n;
    const double mean = std::accumulate(x, x + n, 0.0) / static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (x[j] - mean) * (x[j] - mean);
    t.loss += strength * var / static_cast<double>(n * b);
    for (std::size_t j = 0; j < n; ++j) g[i * n + j] = strength * 2.0 * (x[j] - mean) / static_cast<double>(n * b);
  }
  add_tap_grad(t, tap, std::move(g));
}

void coupling_term(ObjectiveTerms& t, const std::map<std::string, Tensor>& taps, const AttackBatchMeta& meta,
                   const AttackConfig& cfg, AttackState& state) {
  const auto it = taps.find(cfg.coupling_tap);
  if (it == taps.end()) throw ValidationError("attack: missing coupling tap '" + cfg.coupling_tap + "'");
  const Tensor& f = it->second;
  const std::size_t rs = f.row_size();
  // Centroid of clean target-class members in this batch, else the running average.
  std::vector<double> batch_centroid(rs, 0.0);
  std::size_t members = 0;
  for (std::size_t b = 0; b < meta.labels.size(); ++b)
    if (!meta.triggered[b] && meta.labels[b] == cfg.trigger.target_label) {
      for (std::size_t j = 0; j < rs; ++j) batch_centroid[j] += f[b * rs + j];
      ++members;
    }
  if (members > 0) {
    for (auto& v : batch_centroid) v /= static_cast<double>(members);
    if (!state.has_centroid) {
      state.centroid = Tensor({rs}, batch_centroid);
      state.has_centroid = true;
    } else {
      for (std::size_t j = 0; j < rs; ++j) state.centroid[j] = 0.9 * state.centroid[j] + 0.1 * batch_centroid[j];
    }
  } else if (!state.has_centroid) {
    return;
  } else {
    batch_centroid = state.centroid.values();
  }
  const auto n_trig = static_cast<std::size_t>(std::count(meta.triggered.begin(), meta.triggered.end(), true));
  if (n_trig == 0) return;
  const double inv = 1.0 / static_cast<double>(n_trig * rs);
  Tensor g(f.shape());
  for (std::size_t b = 0; b < meta.triggered.size(); ++b) {
    if (!meta.triggered[b]) continue;
    for (std::size_t j = 0; j < rs; ++j) {
      const double d = f[b * rs + j] - batch_centroid[j];
      t.loss += cfg.strength * d * d * inv;
      g[b * rs + j] = cfg.strength * 2.0 * d * inv;
    }
  }
  add_tap_grad(t, cfg.coupling_tap, std::move(g));
}

}  // namespace

std::string to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::data_poison:
      return "data_poison";
    case AttackKind::feature_coupling:
      return "feature_coupling";
    case AttackKind::neuron_assimilation:
      return "neuron_assimilation";
    case AttackKind::adaptive_low_variance:
      return "adaptive_low_variance";
  }
  return "?";
}

AttackKind attack_kind_from_string(const std::string& s) {
  for (auto k : {AttackKind::data_poison, AttackKind::feature_coupling, AttackKind::neuron_assimilation,
                 AttackKind::adaptive_low_variance})
    if (to_string(k) == s) return k;
  throw ValidationError("unknown attack kind '" + s + "'");
}

void AttackConfig::validate(const Network& net) const {
  if (!(strength >= 0.0)) throw ValidationError("attack strength must be >= 0");
  if (!(poison_fraction >= 0.0 && poison_fraction <= 1.0)) throw ValidationError("poison_fraction must lie in [0,1]");
  trigger.validate(net.input_shape(), net.num_classes());
  const auto shapes = net.layer_output_shapes();
  for (const auto& nr : target_neurons)
    if (nr.index >= shape_size(shapes[net.tap_layer(nr.tap)]))
      throw ValidationError("target neuron " + std::to_string(nr.index) + " exceeds width of tap '" + nr.tap + "'");
  if (!assimilation_tap.empty()) net.tap_layer(assimilation_tap);
  if (!coupling_tap.empty()) net.tap_layer(coupling_tap);
  if (kind != AttackKind::data_poison && net.tap_order().empty())
    throw ValidationError("attack " + to_string(kind) + " needs a network with taps");
}

ObjectiveTerms attack_loss(AttackKind kind, const Tensor& logits, const std::map<std::string, Tensor>& taps,
                           const AttackBatchMeta& meta, const AttackConfig& config, AttackState& state) {
  if (meta.triggered.size() != meta.labels.size()) throw ValidationError("attack: batch metadata size mismatch");
  auto ce = cross_entropy(logits, meta.labels);
  ObjectiveTerms t{ce.value, std::move(ce.grad), {}};
  if (config.strength == 0.0) return t;
  switch (kind) {
    case AttackKind::data_poison:
      break;
    case AttackKind::feature_coupling: {
      AttackConfig c = config;
      if (c.coupling_tap.empty()) {
        if (taps.empty()) throw ValidationError("attack: feature_coupling needs taps");
        c.coupling_tap = taps.begin()->first;
      }
      coupling_term(t, taps, meta, c, state);
      break;
    }
    case AttackKind::neuron_assimilation:
      assimilation_term(t, taps, meta, config);
      break;
    case AttackKind::adaptive_low_variance: {
      assimilation_term(t, taps, meta, config);
      // The variance term acts on the assimilation tap (the last tap unless configured).
      const std::string tap =
          resolve(config.assimilation_tap, config.target_neurons.empty() ? "" : config.target_neurons.front().tap);
      if (tap.empty()) throw ValidationError("attack: adaptive_low_variance needs an assimilation tap");
      const auto it = taps.find(tap);
      if (it == taps.end()) throw ValidationError("attack: missing tap '" + tap + "'");
      variance_term(t, tap, it->second, config.strength);
      break;
    }
  }
  return t;
}

std::vector<NeuronRef> select_target_neurons(const Network& net, const Dataset& examples, const std::string& tap,
                                             std::size_t count) {
  const auto fr = forward(net, examples.head(256).images);
  const Tensor& f = fr.taps.at(tap);
  const std::size_t b = f.dim(0), rs = f.row_size();
  std::vector<double> mean(rs, 0.0);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < rs; ++j) mean[j] += f[i * rs + j] / static_cast<double>(b);
  std::vector<std::size_t> order(rs);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t c) { return mean[a] > mean[c]; });
  order.resize(std::min(count, rs));
  std::vector<NeuronRef> out;
  for (auto i : order) out.push_back({tap, i});
  return out;
}

AttackOutcome train_backdoored_teacher(const Network& net, const Dataset& clean_train, const AttackConfig& attack,
                                       const TrainOptions& opts, const Dataset* holdout) {
  attack.validate(net);
  clean_train.validate();
  if (!clean_train.poisoned.empty()) throw ValidationError("train_backdoored_teacher expects clean data");

  AttackConfig cfg = attack;
  if (cfg.kind != AttackKind::data_poison || !net.tap_order().empty()) {
    const auto taps = net.tap_order();
    if (cfg.assimilation_tap.empty() && !taps.empty()) cfg.assimilation_tap = taps.back();
    if (cfg.coupling_tap.empty() && !taps.empty()) cfg.coupling_tap = taps.front();
  }
  const bool uses_neurons =
      cfg.kind == AttackKind::neuron_assimilation || cfg.kind == AttackKind::adaptive_low_variance;
  if (uses_neurons && cfg.target_neurons.empty())
    cfg.target_neurons = select_target_neurons(net, clean_train, cfg.assimilation_tap, cfg.auto_neuron_count);

  const Dataset data = cfg.poison_fraction > 0.0
                           ? poison_dataset(clean_train, cfg.trigger, cfg.poison_fraction, opts.seed ^ 0x9e37)
                           : clean_train;
  AttackState state;
  AttackOutcome out;
  const BatchObjective objective = [&](const ForwardResult& fr, const MiniBatch& mb) {
    AttackBatchMeta meta;
    meta.labels = mb.labels;
    for (auto i : mb.indices) meta.triggered.push_back(std::binary_search(data.poisoned.begin(), data.poisoned.end(), i));
    return attack_loss(cfg.kind, fr.logits, fr.taps, meta, cfg, state);
  };
  out.teacher = train_with_objective(net, data, opts, objective, &out.history);
  out.target_neurons = cfg.target_neurons;
  if (holdout) {
    out.holdout_acc = accuracy(out.teacher, *holdout);
    out.holdout_asr = attack_success_rate(out.teacher, *holdout, cfg.trigger);
    if (out.holdout_asr < kTargetAsr) out.status = "asr_below_target";
  }
  return out;
}

}  // namespace robustkd
