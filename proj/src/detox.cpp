#include "robustkd/detox.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "robustkd/metrics.hpp"

namespace robustkd {

std::string to_string(MaskVariant v) { return v == MaskVariant::additive ? "additive" : "convex"; }

MaskVariant mask_variant_from_string(const std::string& s) {
  if (s == "additive") return MaskVariant::additive;
  if (s == "convex") return MaskVariant::convex;
  throw ValidationError("unknown mask variant '" + s + "'");
}

std::string to_string(DetoxLossTerms t) {
  switch (t) {
    case DetoxLossTerms::ce_and_variance:
      return "ce_and_variance";
    case DetoxLossTerms::ce_only:
      return "ce_only";
    case DetoxLossTerms::variance_only:
      return "variance_only";
  }
  return "?";
}

DetoxLossTerms detox_loss_terms_from_string(const std::string& s) {
  for (auto t : {DetoxLossTerms::ce_and_variance, DetoxLossTerms::ce_only, DetoxLossTerms::variance_only})
    if (to_string(t) == s) return t;
  throw ValidationError("unknown detox loss terms '" + s + "'");
}

void DetoxMask::validate(const Network& teacher) const {
  if (!(m >= 0.0 && m <= 1.0)) throw ValidationError("mask threshold m must lie in [0,1]");
  const auto shapes = teacher.layer_output_shapes();
  for (const auto& [tap, p] : per_tap_p)
    if (p.shape() != shapes[teacher.tap_layer(tap)])
      throw ValidationError("mask for tap '" + tap + "' has shape " + shape_str(p.shape()) + ", tap is " +
                            shape_str(shapes[teacher.tap_layer(tap)]));
}

Tensor detox_features(const Tensor& features, const Tensor& p, double m, MaskVariant variant) {
  if (!(m >= 0.0 && m <= 1.0)) throw ValidationError("detox_features: m must lie in [0,1]");
  const bool same = features.shape() == p.shape();
  const bool broadcast =
      features.rank() == p.rank() + 1 && Shape(features.shape().begin() + 1, features.shape().end()) == p.shape();
  if (!same && !broadcast)
    throw ValidationError("detox_features: features " + shape_str(features.shape()) + " vs mask " +
                          shape_str(p.shape()));
  const double keep = variant == MaskVariant::additive ? 1.0 : 1.0 - m;
  Tensor out(features.shape());
  const std::size_t n = p.size();
  for (std::size_t i = 0; i < features.size(); ++i) out[i] = keep * features[i] + p[i % n] * m;
  return out;
}

LossAndGrad loss_f(const Tensor& features) {
  if (features.empty()) throw ValidationError("loss_f: empty features");
  const Tensor f = features.rank() == 1 ? features.reshaped({1, features.size()}) : features;
  const std::size_t b = f.dim(0), n = f.row_size();
  LossAndGrad r;
  r.grad = Tensor(f.shape());
  const double inv_b = 1.0 / static_cast<double>(b), inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < b; ++i) {
    const double* x = f.data().data() + i * n;
    const double mean = std::accumulate(x, x + n, 0.0) * inv_n;
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (x[j] - mean) * (x[j] - mean);
    r.value += var * inv_n * inv_b;
    for (std::size_t j = 0; j < n; ++j) r.grad[i * n + j] = 2.0 * (x[j] - mean) * inv_n * inv_b;
  }
  r.grad = r.grad.reshaped(features.shape());
  return r;
}

Network classifier_head(const Network& teacher) {
  const auto last = teacher.tap_layer(teacher.last_tap());
  const auto shapes = teacher.layer_output_shapes();
  std::vector<Layer> head(teacher.layers().begin() + static_cast<std::ptrdiff_t>(last + 1), teacher.layers().end());
  return Network(shapes[last], teacher.num_classes(), std::move(head));
}

LossAndGrad loss_ce_detox(const Tensor& features, std::span<const std::size_t> labels, const Network& head) {
  const auto fr = forward(head, features);
  auto ce = cross_entropy(fr.logits, labels);
  const auto br = backward(head, fr.cache, ce.grad, {}, nullptr, false);
  return {ce.value, br.input};
}

double loss_total(double loss_ce, double loss_f) { return loss_ce + loss_f; }

DetoxMask init_masks(const Network& teacher, const Dataset& clean_examples, std::size_t sample_count,
                     double initial_m, std::uint64_t seed, MaskVariant variant) {
  if (teacher.tap_order().empty()) throw ValidationError("init_masks: teacher has no taps");
  if (sample_count < 1) throw ValidationError("init_masks: need at least one sample");
  clean_examples.validate();
  std::vector<std::size_t> idx(clean_examples.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(sample_count, idx.size()));
  const auto fr = forward(teacher, clean_examples.images.gather_rows(idx));
  DetoxMask mask;
  mask.m = initial_m;
  mask.variant = variant;
  for (const auto& [tap, f] : fr.taps) {
    Tensor p(Shape(f.shape().begin() + 1, f.shape().end()));
    const std::size_t n = p.size(), b = f.dim(0);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < n; ++j) p[j] += f[i * n + j];
    p *= 1.0 / static_cast<double>(b);
    mask.per_tap_p.emplace(tap, std::move(p));
  }
  mask.validate(teacher);
  return mask;
}

TapOverride mask_override(const DetoxMask& mask) {
  TapOverride ov;
  ov.apply = [&mask](const std::string& tap, const Tensor& f) {
    const auto it = mask.per_tap_p.find(tap);
    return it == mask.per_tap_p.end() ? f : detox_features(f, it->second, mask.m, mask.variant);
  };
  ov.backprop = [&mask](const std::string& tap, const Tensor& g) {
    if (mask.variant == MaskVariant::additive || !mask.per_tap_p.count(tap)) return g;
    Tensor out = g;
    out *= 1.0 - mask.m;
    return out;
  };
  return ov;
}

TeacherProvider detoxified_teacher(const Network& teacher, const DetoxMask& mask) {
  mask.validate(teacher);
  return [&teacher, mask](const Tensor& inputs) {
    const auto ov = mask_override(mask);
    auto fr = forward(teacher, inputs, &ov);
    return TeacherOutputs{std::move(fr.logits), std::move(fr.taps)};
  };
}

namespace {

// Layer at which masked evaluation starts; everything before it is mask-independent.
std::size_t first_masked_layer(const Network& teacher, const DetoxMask& mask) {
  std::size_t first = teacher.tap_layer(teacher.last_tap());
  for (const auto& [tap, p] : mask.per_tap_p) first = std::min(first, teacher.tap_layer(tap));
  return first;
}

MaskObjective objective_from(const Network& teacher, const DetoxMask& mask, const Tensor& layer_input,
                             std::size_t first_layer, std::span<const std::size_t> labels, DetoxLossTerms terms) {
  const auto ov = mask_override(mask);
  const auto fr = forward(teacher, layer_input, &ov, first_layer);
  const std::string last = teacher.last_tap();
  const bool use_ce = terms != DetoxLossTerms::variance_only;
  const bool use_var = terms != DetoxLossTerms::ce_only;

  MaskObjective obj;
  auto ce = cross_entropy(fr.logits, labels);
  auto lf = loss_f(fr.taps.at(last));
  obj.loss_ce = ce.value;
  obj.loss_f = lf.value;
  std::map<std::string, Tensor> tap_grads;
  Tensor logits_grad = use_ce ? std::move(ce.grad) : Tensor(fr.logits.shape());
  if (use_ce) obj.total += ce.value;
  if (use_var) {
    obj.total += lf.value;
    tap_grads.emplace(last, std::move(lf.grad));
    for (const auto& [tap, p] : mask.per_tap_p) {
      if (tap == last) continue;
      auto lk = loss_f(fr.taps.at(tap));
      obj.total += lk.value;
      tap_grads.emplace(tap, std::move(lk.grad));
    }
  }
  const auto br = backward(teacher, fr.cache, logits_grad, tap_grads, &ov, false);
  for (const auto& [tap, p] : mask.per_tap_p) {
    const Tensor& g = br.taps.at(tap);
    Tensor pg(p.shape());
    const std::size_t n = p.size(), b = g.dim(0);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < n; ++j) pg[j] += g[i * n + j];
    pg *= mask.m;
    obj.p_grads.emplace(tap, std::move(pg));
  }
  return obj;
}

}  // namespace

MaskObjective mask_objective(const Network& teacher, const DetoxMask& mask, const Tensor& inputs,
                             std::span<const std::size_t> labels, DetoxLossTerms terms) {
  mask.validate(teacher);
  return objective_from(teacher, mask, inputs, 0, labels, terms);
}

DetoxMask optimize_masks(const Network& teacher, DetoxMask mask, const Dataset& clean_data,
                         const MaskOptimOptions& options, std::vector<MaskTracePoint>* trace) {
  mask.validate(teacher);
  clean_data.validate();
  if (mask.per_tap_p.empty()) throw ValidationError("optimize_masks: mask covers no taps");
  if (!(options.learning_rate >= 0.0)) throw ValidationError("optimize_masks: learning rate must be >= 0");
  if (options.batch_size == 0) throw ValidationError("optimize_masks: batch size must be positive");

  const std::size_t first = first_masked_layer(teacher, mask);
  const Tensor pre = forward_range(teacher, 0, first, clean_data.images);
  std::vector<std::size_t> order(clean_data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(options.seed);
  for (std::size_t it = 0; it < options.iterations; ++it) {
    std::shuffle(order.begin(), order.end(), rng);
    double ce_sum = 0.0, f_sum = 0.0;
    for (std::size_t s = 0; s < order.size(); s += options.batch_size) {
      const std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(s),
                                          order.begin() + static_cast<std::ptrdiff_t>(
                                                              std::min(order.size(), s + options.batch_size)));
      std::vector<std::size_t> labels;
      for (auto r : rows) labels.push_back(clean_data.labels[r]);
      const auto obj = objective_from(teacher, mask, pre.gather_rows(rows), first, labels, options.terms);
      if (!std::isfinite(obj.total))
        throw RuntimeFailure("mask optimisation produced a non-finite loss at iteration " + std::to_string(it));
      for (auto& [tap, p] : mask.per_tap_p) {
        const Tensor& g = obj.p_grads.at(tap);
        for (std::size_t j = 0; j < p.size(); ++j) p[j] -= options.learning_rate * g[j];
      }
      ce_sum += obj.loss_ce * static_cast<double>(rows.size());
      f_sum += obj.loss_f * static_cast<double>(rows.size());
    }
    if (trace)
      trace->push_back({ce_sum / static_cast<double>(order.size()), f_sum / static_cast<double>(order.size())});
  }
  return mask;
}

void DefenseConfig::validate() const {
  if (m_schedule.empty()) throw ValidationError("defense: m schedule is empty");
  for (double m : m_schedule)
    if (!(m >= 0.0 && m <= 1.0)) throw ValidationError("defense: schedule values must lie in [0,1]");
  if (!(epsilon > 0.0)) throw ValidationError("defense: epsilon must be positive");
  if (init_samples < 1) throw ValidationError("defense: init_samples must be >= 1");
  if (!(search_budget > 0.0 && search_budget <= 1.0)) throw ValidationError("defense: search_budget must lie in (0,1]");
}

namespace {

DetoxMask build_mask(const Network& teacher, const Dataset& clean, const DefenseConfig& cfg, double m,
                     std::vector<MaskTracePoint>* trace) {
  DetoxMask mask = init_masks(teacher, clean, cfg.init_samples, m, cfg.seed, cfg.variant);
  if (!cfg.masked_taps.empty()) {
    for (const auto& tap : cfg.masked_taps) teacher.tap_layer(tap);
    std::erase_if(mask.per_tap_p, [&](const auto& kv) {
      return std::find(cfg.masked_taps.begin(), cfg.masked_taps.end(), kv.first) == cfg.masked_taps.end();
    });
  }
  MaskOptimOptions opts = cfg.optim;
  opts.seed = cfg.seed ^ 0x6d61736b;
  return optimize_masks(teacher, std::move(mask), clean, opts, trace);
}

}  // namespace

DetoxResult search_threshold(const Network& teacher, const Network& student_init, const Dataset& clean_data,
                             const TriggerSpec& trigger, const DistillConfig& distill, const DefenseConfig& config) {
  config.validate();
  distill.validate();
  if (teacher.tap_order().empty()) throw ValidationError("defense: teacher has no taps");

  DetoxResult result;
  result.acc_ori = accuracy(teacher, clean_data);
  result.asr_ori = attack_success_rate(teacher, clean_data, trigger);

  const bool single = config.m_schedule.size() == 1;
  DistillConfig short_cfg = distill;
  short_cfg.epochs = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(config.search_budget * static_cast<double>(distill.epochs))));

  std::vector<DetoxMask> masks;
  std::optional<DistillOutcome> single_outcome;
  for (std::size_t i = 0; i < config.m_schedule.size(); ++i) {
    const double m = config.m_schedule[i];
    std::vector<MaskTracePoint> trace;
    masks.push_back(build_mask(teacher, clean_data, config, m, &trace));
    auto outcome = distill_student(teacher, student_init, clean_data, single ? distill : short_cfg,
                                   detoxified_teacher(teacher, masks.back()));
    SearchPoint pt;
    pt.m = m;
    pt.acc = accuracy(outcome.student, clean_data);
    pt.asr = attack_success_rate(outcome.student, clean_data, trigger);
    if (!trace.empty()) {
      pt.loss_ce = trace.back().loss_ce;
      pt.loss_f = trace.back().loss_f;
    }
    if (single) single_outcome = std::move(outcome);
    const bool settled = !result.history.empty() && std::abs(pt.acc - result.history.back().acc) <= config.epsilon &&
                         std::abs(pt.asr - result.history.back().asr) <= config.epsilon;
    result.history.push_back(pt);
    if (settled) {
      result.converged_early = true;
      break;
    }
  }

  std::size_t best = 0;
  for (std::size_t i = 1; i < result.history.size(); ++i) {
    const auto& a = result.history[i];
    const auto& b = result.history[best];
    const double sa = a.acc - a.asr, sb = b.acc - b.asr;
    if (sa > sb || (sa == sb && a.m < b.m)) best = i;
  }
  result.converged_m = result.history[best].m;
  result.mask = masks[best];
  result.defense_ineffective = std::none_of(result.history.begin(), result.history.end(),
                                            [&](const SearchPoint& p) { return p.asr < result.asr_ori; });

  DistillOutcome final_outcome =
      single ? std::move(*single_outcome)
             : distill_student(teacher, student_init, clean_data, distill, detoxified_teacher(teacher, result.mask));
  result.student = std::move(final_outcome.student);
  result.transforms = std::move(final_outcome.transforms);
  return result;
}

DetoxResult robustkd_distill(const Network& teacher, const Network& student_init, const Dataset& clean_data,
                             const TriggerSpec& trigger, const DistillConfig& distill, const DefenseConfig& config) {
  if (distill.tap_pairs.empty()) throw ValidationError("robustkd: no tap pairs to distil through");
  return search_threshold(teacher, student_init, clean_data, trigger, distill, config);
}

}  // namespace robustkd
