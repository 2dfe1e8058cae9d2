#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "robustkd/tensor.hpp"

namespace robustkd {

enum class LayerKind { dense, conv2d, relu, flatten, avgpool };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& s);

/// One stage of a feed-forward network. Dense weights are (out, in); conv2d
/// weights are (out_ch, in_ch, kh, kw). A non-empty tap marks the output as a
/// named feature map.
struct Layer {
  LayerKind kind = LayerKind::relu;
  Tensor weight;
  Tensor bias;
  std::string tap;
  std::size_t padding = 0;  // conv2d
  std::size_t pool = 2;     // avgpool window and stride

  bool has_params() const { return kind == LayerKind::dense || kind == LayerKind::conv2d; }
};

class Network {
 public:
  Network() = default;
  Network(Shape input_shape, std::size_t num_classes, std::vector<Layer> layers);

  const Shape& input_shape() const { return input_shape_; }
  std::size_t num_classes() const { return num_classes_; }
  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& mutable_layers() {
    ++version_;
    return layers_;
  }

  /// Tap names in forward order.
  std::vector<std::string> tap_order() const;
  /// Index of the layer producing the given tap.
  std::size_t tap_layer(const std::string& tap) const;
  std::string last_tap() const;

  /// Pointers to every parameter tensor, weight before bias, layer order.
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  std::size_t parameter_count() const;

  /// Bumped whenever parameters may have changed; forward caches are tied to it.
  std::uint64_t version() const { return version_; }
  void touch() { ++version_; }

  /// Output shape (excluding batch axis) of each layer.
  std::vector<Shape> layer_output_shapes() const;

  friend bool operator==(const Network& a, const Network& b);

 private:
  Shape input_shape_;
  std::size_t num_classes_ = 0;
  std::vector<Layer> layers_;
  std::uint64_t version_ = 0;
};

/// Rewrites tap outputs during the forward pass and maps gradients back through
/// the rewrite. Both callbacks receive the tap name.
struct TapOverride {
  std::function<Tensor(const std::string&, const Tensor&)> apply;
  std::function<Tensor(const std::string&, const Tensor&)> backprop;
};

struct ForwardCache {
  const Network* net = nullptr;
  std::uint64_t version = 0;
  std::size_t first_layer = 0;
  std::vector<Tensor> inputs;  // input of every layer from first_layer on
  Tensor output;
  bool valid() const { return net != nullptr && !inputs.empty(); }
};

struct ForwardResult {
  Tensor logits;
  std::map<std::string, Tensor> taps;
  ForwardCache cache;
};

/// Per-parameter gradients, aligned with Network::parameters().
using Gradients = std::vector<Tensor>;

struct BackwardResult {
  Gradients params;
  /// dL/d(tap output as seen downstream), i.e. after any override.
  std::map<std::string, Tensor> taps;
  Tensor input;
};

/// Runs the network on `inputs`. With first_layer > 0, `inputs` is the input of
/// that layer and only taps from there on are reported.
ForwardResult forward(const Network& net, const Tensor& inputs, const TapOverride* override = nullptr,
                      std::size_t first_layer = 0);

/// Runs layers [first, last) on `inputs` with no taps or caching.
Tensor forward_range(const Network& net, std::size_t first, std::size_t last, const Tensor& inputs);

/// Backpropagates `logits_grad` plus any extra gradients injected at taps, down
/// to the cache's first layer. Parameter gradients stay zero when
/// `param_grads` is false.
BackwardResult backward(const Network& net, const ForwardCache& cache, const Tensor& logits_grad,
                        const std::map<std::string, Tensor>& tap_grads = {},
                        const TapOverride* override = nullptr, bool param_grads = true);

Gradients zero_gradients(const Network& net);

void sgd_step(Network& net, const Gradients& grads, double learning_rate);

/// Uniform Glorot initialisation in [-s, s], s = sqrt(6 / (fan_in + fan_out)); biases zero.
void init_parameters(Network& net, std::uint64_t seed);

/// dense-relu-dense-relu-dense with taps h1, h2 on the hidden pre-activations.
Network make_mlp(const Shape& input_shape, std::size_t hidden1, std::size_t hidden2, std::size_t num_classes,
                 std::uint64_t seed);

/// conv-relu-pool-conv-relu-flatten-dense with taps c1, c2 on the conv outputs.
Network make_cnn(const Shape& input_shape, std::size_t channels1, std::size_t channels2, std::size_t num_classes,
                 std::uint64_t seed);

// Checkpoints: versioned little-endian binary container.
std::string serialize_network(const Network& net);
Network deserialize_network(const std::string& bytes);
void save_network(const Network& net, const std::string& path);
Network load_network(const std::string& path);

}  // namespace robustkd
