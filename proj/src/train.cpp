#include "robustkd/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace robustkd {

Tensor softmax_rows(const Tensor& logits, double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature))
    throw ValidationError("temperature must be positive and finite");
  if (logits.rank() != 2) throw ValidationError("softmax expects (batch, classes) logits");
  const std::size_t b = logits.dim(0), n = logits.dim(1);
  Tensor out(logits.shape());
  for (std::size_t i = 0; i < b; ++i) {
    const double* z = logits.data().data() + i * n;
    double* p = out.data().data() + i * n;
    const double zmax = *std::max_element(z, z + n) / temperature;
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      p[j] = std::exp(z[j] / temperature - zmax);
      sum += p[j];
    }
    for (std::size_t j = 0; j < n; ++j) p[j] /= sum;
  }
  return out;
}

LossAndGrad cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw ValidationError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                          std::to_string(labels.size()) + " labels");
  const std::size_t b = logits.dim(0), n = logits.dim(1);
  LossAndGrad r;
  r.grad = softmax_rows(logits);
  const double inv_b = 1.0 / static_cast<double>(b);
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] >= n) throw ValidationError("cross_entropy: label out of range");
    const double* z = logits.data().data() + i * n;
    const double zmax = *std::max_element(z, z + n);
    double lse = 0.0;
    for (std::size_t j = 0; j < n; ++j) lse += std::exp(z[j] - zmax);
    r.value += (std::log(lse) + zmax - z[labels[i]]) * inv_b;
    double* g = r.grad.data().data() + i * n;
    g[labels[i]] -= 1.0;
    for (std::size_t j = 0; j < n; ++j) g[j] *= inv_b;
  }
  return r;
}

std::vector<MiniBatch> make_batches(const Dataset& data, std::size_t batch_size, Rng& rng) {
  if (batch_size == 0) throw ValidationError("batch size must be positive");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<MiniBatch> out;
  for (std::size_t s = 0; s < order.size(); s += batch_size) {
    MiniBatch mb;
    mb.indices.assign(order.begin() + static_cast<std::ptrdiff_t>(s),
                      order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), s + batch_size)));
    mb.inputs = data.images.gather_rows(mb.indices);
    for (auto i : mb.indices) mb.labels.push_back(data.labels[i]);
    out.push_back(std::move(mb));
  }
  return out;
}

Network train_with_objective(Network net, const Dataset& data, const TrainOptions& opts,
                             const BatchObjective& objective, TrainHistory* history) {
  if (opts.epochs < 1) throw ValidationError("epochs must be at least 1");
  data.validate();
  if (data.num_classes != net.num_classes()) throw ValidationError("dataset and network disagree on class count");
  Rng rng(opts.seed);
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    double total = 0.0;
    std::size_t seen = 0;
    for (const auto& mb : make_batches(data, opts.batch_size, rng)) {
      const auto fr = forward(net, mb.inputs);
      const auto terms = objective(fr, mb);
      if (!std::isfinite(terms.loss))
        throw RuntimeFailure("training diverged at epoch " + std::to_string(epoch) + " (non-finite loss)");
      const auto br = backward(net, fr.cache, terms.logits_grad, terms.tap_grads);
      sgd_step(net, br.params, opts.learning_rate);
      total += terms.loss * static_cast<double>(mb.labels.size());
      seen += mb.labels.size();
    }
    const double mean = total / static_cast<double>(seen);
    if (history) history->epoch_loss.push_back(mean);
  }
  for (const auto* p : net.parameters())
    if (!p->all_finite()) throw RuntimeFailure("training produced non-finite parameters");
  return net;
}

Network train_classifier(Network net, const Dataset& data, const TrainOptions& opts, TrainHistory* history) {
  return train_with_objective(
      std::move(net), data, opts,
      [](const ForwardResult& fr, const MiniBatch& mb) {
        auto ce = cross_entropy(fr.logits, mb.labels);
        return ObjectiveTerms{ce.value, std::move(ce.grad), {}};
      },
      history);
}

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ValidationError("argmax_rows expects a matrix");
  const std::size_t b = logits.dim(0), n = logits.dim(1);
  std::vector<std::size_t> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    const double* z = logits.data().data() + i * n;
    out[i] = static_cast<std::size_t>(std::max_element(z, z + n) - z);
  }
  return out;
}

Tensor predict_logits(const Network& net, const Tensor& images, std::size_t chunk) {
  const std::size_t n = images.dim(0);
  std::vector<double> out;
  out.reserve(n * net.num_classes());
  for (std::size_t s = 0; s < n; s += chunk) {
    const auto fr = forward(net, images.slice_rows(s, std::min(n, s + chunk)));
    out.insert(out.end(), fr.logits.values().begin(), fr.logits.values().end());
  }
  return Tensor({n, net.num_classes()}, std::move(out));
}

}  // namespace robustkd
