#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "robustkd/data.hpp"
#include "robustkd/network.hpp"

namespace robustkd {

struct LossAndGrad {
  double value = 0.0;
  Tensor grad;
};

/// Mean softmax cross-entropy over the batch, with its gradient w.r.t. logits.
LossAndGrad cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

/// Row-wise softmax of logits / temperature.
Tensor softmax_rows(const Tensor& logits, double temperature = 1.0);

struct TrainOptions {
  std::size_t epochs = 30;
  double learning_rate = 0.05;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

struct TrainHistory {
  std::vector<double> epoch_loss;
};

struct MiniBatch {
  Tensor inputs;
  std::vector<std::size_t> labels;
  std::vector<std::size_t> indices;  // positions in the source dataset
};

/// Loss contribution of one minibatch: value plus gradients to inject at the
/// logits and at named taps.
struct ObjectiveTerms {
  double loss = 0.0;
  Tensor logits_grad;
  std::map<std::string, Tensor> tap_grads;
};

using BatchObjective = std::function<ObjectiveTerms(const ForwardResult&, const MiniBatch&)>;

/// Seeded shuffled minibatches covering the dataset once.
std::vector<MiniBatch> make_batches(const Dataset& data, std::size_t batch_size, Rng& rng);

/// Minibatch SGD on an arbitrary objective. Throws RuntimeFailure carrying the
/// epoch index if the loss stops being finite.
Network train_with_objective(Network net, const Dataset& data, const TrainOptions& opts,
                             const BatchObjective& objective, TrainHistory* history = nullptr);

/// Plain cross-entropy training.
Network train_classifier(Network net, const Dataset& data, const TrainOptions& opts,
                         TrainHistory* history = nullptr);

/// Argmax class per row of an (n, N) logits tensor.
std::vector<std::size_t> argmax_rows(const Tensor& logits);

/// Logits for a whole image stack, evaluated in chunks.
Tensor predict_logits(const Network& net, const Tensor& images, std::size_t chunk = 256);

}  // namespace robustkd
