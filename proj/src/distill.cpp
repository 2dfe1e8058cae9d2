#include "robustkd/distill.hpp"

#include <cmath>

namespace robustkd {

Tensor softmax_T(const Tensor& logits, double temperature) {
  if (!(temperature > 0.0)) throw ValidationError("softmax_T: temperature must be positive");
  return softmax_rows(logits, temperature);
}

LossAndGrad soft_loss(const Tensor& teacher_logits, const Tensor& student_logits, double temperature) {
  if (teacher_logits.shape() != student_logits.shape())
    throw ValidationError("soft_loss: teacher " + shape_str(teacher_logits.shape()) + " vs student " +
                          shape_str(student_logits.shape()));
  const Tensor p = softmax_T(teacher_logits, temperature);
  const Tensor q = softmax_T(student_logits, temperature);
  const std::size_t b = p.dim(0), n = p.dim(1);
  const double inv_b = 1.0 / static_cast<double>(b);
  LossAndGrad r;
  r.grad = Tensor(p.shape());
  for (std::size_t i = 0; i < b; ++i) {
    // log q via log-sum-exp for stability.
    const double* z = student_logits.data().data() + i * n;
    double zmax = z[0] / temperature;
    for (std::size_t j = 1; j < n; ++j) zmax = std::max(zmax, z[j] / temperature);
    double lse = 0.0;
    for (std::size_t j = 0; j < n; ++j) lse += std::exp(z[j] / temperature - zmax);
    const double log_norm = zmax + std::log(lse);
    for (std::size_t j = 0; j < n; ++j) {
      const double pj = p[i * n + j];
      r.value -= pj * (z[j] / temperature - log_norm) * inv_b;
      r.grad[i * n + j] = (q[i * n + j] - pj) * inv_b / temperature;
    }
  }
  return r;
}

LossAndGrad hard_loss(const Tensor& student_logits, std::span<const std::size_t> labels) {
  return cross_entropy(student_logits, labels);
}

void DistillConfig::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ValidationError("distill: temperature must be > 0");
  if (!(alpha >= 0.0)) throw ValidationError("distill: alpha must be >= 0");
  if (!(learning_rate >= 0.0)) throw ValidationError("distill: learning rate must be >= 0");
  if (batch_size == 0) throw ValidationError("distill: batch size must be positive");
  for (const auto& p : tap_pairs)
    if (!(p.weight >= 0.0)) throw ValidationError("distill: feature weight must be >= 0");
}

LossAndGrad kd_loss(const Tensor& teacher_logits, const Tensor& student_logits, std::span<const std::size_t> labels,
                    const DistillConfig& config) {
  config.validate();
  auto hard = hard_loss(student_logits, labels);
  if (config.alpha == 0.0) return hard;
  auto soft = soft_loss(teacher_logits, student_logits, config.temperature);
  hard.value += config.alpha * soft.value;
  for (std::size_t i = 0; i < hard.grad.size(); ++i) hard.grad[i] += config.alpha * soft.grad[i];
  return hard;
}

std::string to_string(TransformKind kind) {
  switch (kind) {
    case TransformKind::identity:
      return "identity";
    case TransformKind::linear_projection:
      return "linear_projection";
    case TransformKind::spatial_avg:
      return "spatial_avg";
  }
  return "?";
}

TransformKind transform_kind_from_string(const std::string& s) {
  for (auto k : {TransformKind::identity, TransformKind::linear_projection, TransformKind::spatial_avg})
    if (to_string(k) == s) return k;
  throw ValidationError("unknown feature transform '" + s + "'");
}

Tensor FeatureTransform::apply(const Tensor& x) const {
  switch (kind) {
    case TransformKind::identity:
      return x;
    case TransformKind::spatial_avg: {
      if (x.rank() != 4) return x;
      const std::size_t b = x.dim(0), c = x.dim(1), s = x.dim(2) * x.dim(3);
      Tensor y({b, c});
      for (std::size_t i = 0; i < b * c; ++i) {
        double acc = 0.0;
        for (std::size_t k = 0; k < s; ++k) acc += x[i * s + k];
        y[i] = acc / static_cast<double>(s);
      }
      return y;
    }
    case TransformKind::linear_projection: {
      const std::size_t out = weight.dim(0), in = weight.dim(1), b = x.dim(0);
      if (x.rank() < 2 || x.dim(1) != in)
        throw ValidationError("projection " + shape_str(weight.shape()) + " cannot take " + shape_str(x.shape()));
      const std::size_t s = x.row_size() / in;  // spatial positions (1 for flat features)
      Shape ys = x.shape();
      ys[1] = out;
      Tensor y(ys);
      for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t o = 0; o < out; ++o)
          for (std::size_t c = 0; c < in; ++c) {
            const double w = weight[o * in + c];
            const double* xs = x.data().data() + (bi * in + c) * s;
            double* yo = y.data().data() + (bi * out + o) * s;
            for (std::size_t k = 0; k < s; ++k) yo[k] += w * xs[k];
          }
      return y;
    }
  }
  throw ValidationError("unknown transform");
}

Tensor FeatureTransform::backprop(const Tensor& x, const Tensor& g, Tensor* weight_grad) const {
  switch (kind) {
    case TransformKind::identity:
      return g;
    case TransformKind::spatial_avg: {
      if (x.rank() != 4) return g;
      const std::size_t b = x.dim(0), c = x.dim(1), s = x.dim(2) * x.dim(3);
      Tensor dx(x.shape());
      for (std::size_t i = 0; i < b * c; ++i)
        for (std::size_t k = 0; k < s; ++k) dx[i * s + k] = g[i] / static_cast<double>(s);
      return dx;
    }
    case TransformKind::linear_projection: {
      const std::size_t out = weight.dim(0), in = weight.dim(1), b = x.dim(0);
      const std::size_t s = x.row_size() / in;
      Tensor dx(x.shape());
      for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t o = 0; o < out; ++o) {
          const double* go = g.data().data() + (bi * out + o) * s;
          for (std::size_t c = 0; c < in; ++c) {
            const double w = weight[o * in + c];
            const double* xs = x.data().data() + (bi * in + c) * s;
            double* dxs = dx.data().data() + (bi * in + c) * s;
            double acc = 0.0;
            for (std::size_t k = 0; k < s; ++k) {
              dxs[k] += w * go[k];
              acc += go[k] * xs[k];
            }
            if (weight_grad) (*weight_grad)[o * in + c] += acc;
          }
        }
      return dx;
    }
  }
  throw ValidationError("unknown transform");
}

std::vector<PairTransform> build_transforms(const Network& teacher, const Network& student,
                                            const std::vector<TapPair>& pairs, std::uint64_t seed) {
  const auto tshapes = teacher.layer_output_shapes();
  const auto sshapes = student.layer_output_shapes();
  Rng rng(seed);
  std::vector<PairTransform> out;
  for (const auto& p : pairs) {
    const Shape& ts = tshapes[teacher.tap_layer(p.teacher_tap)];
    const Shape& ss = sshapes[student.tap_layer(p.student_tap)];
    PairTransform pt;
    if (ts != ss) {
      const bool same_spatial = ts.size() == ss.size() && std::equal(ts.begin() + 1, ts.end(), ss.begin() + 1);
      if (!same_spatial)
        throw ValidationError("tap pair " + p.teacher_tap + "->" + p.student_tap + ": cannot match teacher " +
                              shape_str(ts) + " with student " + shape_str(ss));
      pt.student.kind = TransformKind::linear_projection;
      pt.student.weight = Tensor({ts[0], ss[0]});
      const double bound = std::sqrt(6.0 / static_cast<double>(ts[0] + ss[0]));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (auto& w : pt.student.weight.data()) w = dist(rng);
    }
    out.push_back(std::move(pt));
  }
  return out;
}

FeatureLoss feature_distill_loss(const std::map<std::string, Tensor>& teacher_taps,
                                 const std::map<std::string, Tensor>& student_taps,
                                 const std::vector<PairTransform>& transforms, const std::vector<TapPair>& pairs) {
  if (transforms.size() != pairs.size()) throw ValidationError("feature loss: one transform per pair required");
  FeatureLoss r;
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto& p = pairs[k];
    const auto ti = teacher_taps.find(p.teacher_tap);
    const auto si = student_taps.find(p.student_tap);
    const std::string name = p.teacher_tap + "->" + p.student_tap;
    if (ti == teacher_taps.end() || si == student_taps.end())
      throw ValidationError("tap pair " + name + ": missing features");
    const Tensor t = transforms[k].teacher.apply(ti->second);
    const Tensor s = transforms[k].student.apply(si->second);
    if (t.shape() != s.shape())
      throw ValidationError("tap pair " + name + ": transformed shapes " + shape_str(t.shape()) + " vs " +
                            shape_str(s.shape()));
    const double inv_n = 1.0 / static_cast<double>(t.size());
    Tensor gs(s.shape());
    double sq = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double d = s[i] - t[i];
      sq += d * d;
      gs[i] = 2.0 * p.weight * d * inv_n;
    }
    r.value += p.weight * sq * inv_n;
    Tensor pg;
    if (transforms[k].student.kind == TransformKind::linear_projection)
      pg = Tensor(transforms[k].student.weight.shape());
    Tensor gx = transforms[k].student.backprop(si->second, gs, pg.empty() ? nullptr : &pg);
    if (auto it = r.student_tap_grads.find(p.student_tap); it != r.student_tap_grads.end())
      it->second += gx;
    else
      r.student_tap_grads.emplace(p.student_tap, std::move(gx));
    r.projection_grads.push_back(std::move(pg));
  }
  return r;
}

TeacherProvider plain_teacher(const Network& teacher) {
  return [&teacher](const Tensor& inputs) {
    auto fr = forward(teacher, inputs);
    return TeacherOutputs{std::move(fr.logits), std::move(fr.taps)};
  };
}

namespace {

TeacherOutputs precompute(const TeacherProvider& provider, const Tensor& images, const std::vector<TapPair>& pairs) {
  const std::size_t n = images.dim(0), chunk = 256;
  std::vector<TeacherOutputs> parts;
  for (std::size_t s = 0; s < n; s += chunk) parts.push_back(provider(images.slice_rows(s, std::min(n, s + chunk))));
  auto concat = [&](auto getter) {
    std::vector<double> data;
    Shape shape = getter(parts[0]).shape();
    for (auto& part : parts) {
      const Tensor& t = getter(part);
      data.insert(data.end(), t.values().begin(), t.values().end());
    }
    shape[0] = n;
    return Tensor(std::move(shape), std::move(data));
  };
  TeacherOutputs all;
  all.logits = concat([](const TeacherOutputs& o) -> const Tensor& { return o.logits; });
  for (const auto& p : pairs) {
    if (all.taps.count(p.teacher_tap)) continue;
    if (!parts[0].taps.count(p.teacher_tap)) throw ValidationError("teacher provides no tap '" + p.teacher_tap + "'");
    all.taps[p.teacher_tap] =
        concat([&](const TeacherOutputs& o) -> const Tensor& { return o.taps.at(p.teacher_tap); });
  }
  return all;
}

}  // namespace

DistillOutcome distill_student(const Network& teacher, const Network& student_init, const Dataset& dataset,
                               const DistillConfig& config, const std::optional<TeacherProvider>& teacher_override) {
  config.validate();
  dataset.validate();
  if (teacher.num_classes() != student_init.num_classes() || dataset.num_classes != teacher.num_classes())
    throw ValidationError("distill: teacher, student and dataset disagree on class count");
  DistillOutcome out{student_init, build_transforms(teacher, student_init, config.tap_pairs, config.seed ^ 0x7a7a), {}};
  if (config.epochs == 0) return out;

  const TeacherOutputs cached =
      precompute(teacher_override ? *teacher_override : plain_teacher(teacher), dataset.images, config.tap_pairs);

  Network& student = out.student;
  Rng rng(config.seed);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double total = 0.0;
    for (const auto& mb : make_batches(dataset, config.batch_size, rng)) {
      const Tensor t_logits = cached.logits.gather_rows(mb.indices);
      std::map<std::string, Tensor> t_taps;
      for (const auto& [name, feats] : cached.taps) t_taps.emplace(name, feats.gather_rows(mb.indices));

      const auto fr = forward(student, mb.inputs);
      auto kd = kd_loss(t_logits, fr.logits, mb.labels, config);
      auto feat = feature_distill_loss(t_taps, fr.taps, out.transforms, config.tap_pairs);
      const double loss = kd.value + feat.value;
      if (!std::isfinite(loss))
        throw RuntimeFailure("distillation diverged at epoch " + std::to_string(epoch) + " (non-finite loss)");
      const auto br = backward(student, fr.cache, kd.grad, feat.student_tap_grads);
      sgd_step(student, br.params, config.learning_rate);
      for (std::size_t k = 0; k < out.transforms.size(); ++k) {
        auto& w = out.transforms[k].student.weight;
        const auto& g = feat.projection_grads[k];
        for (std::size_t i = 0; i < g.size(); ++i) w[i] -= config.learning_rate * g[i];
      }
      total += loss * static_cast<double>(mb.labels.size());
    }
    out.history.epoch_loss.push_back(total / static_cast<double>(dataset.size()));
  }
  return out;
}

}  // namespace robustkd
