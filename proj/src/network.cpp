#include "robustkd/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace robustkd {

namespace {

std::string layer_label(std::size_t index, LayerKind kind) {
  return "layer " + std::to_string(index) + " (" + to_string(kind) + ")";
}

Shape output_shape(std::size_t index, const Layer& layer, const Shape& in) {
  switch (layer.kind) {
    case LayerKind::dense: {
      if (in.size() != 1)
        throw ValidationError(layer_label(index, layer.kind) + ": expects flat input, got " + shape_str(in));
      if (layer.weight.rank() != 2 || layer.weight.dim(1) != in[0])
        throw ValidationError(layer_label(index, layer.kind) + ": weight " + shape_str(layer.weight.shape()) +
                              " does not accept input width " + std::to_string(in[0]));
      if (layer.bias.shape() != Shape{layer.weight.dim(0)})
        throw ValidationError(layer_label(index, layer.kind) + ": bias shape " + shape_str(layer.bias.shape()));
      return {layer.weight.dim(0)};
    }
    case LayerKind::conv2d: {
      if (in.size() != 3)
        throw ValidationError(layer_label(index, layer.kind) + ": expects (c,h,w) input, got " + shape_str(in));
      const auto& w = layer.weight.shape();
      if (w.size() != 4 || w[1] != in[0])
        throw ValidationError(layer_label(index, layer.kind) + ": weight " + shape_str(w) +
                              " does not accept input " + shape_str(in));
      if (layer.bias.shape() != Shape{w[0]})
        throw ValidationError(layer_label(index, layer.kind) + ": bias shape " + shape_str(layer.bias.shape()));
      const std::size_t h = in[1] + 2 * layer.padding, wd = in[2] + 2 * layer.padding;
      if (h < w[2] || wd < w[3])
        throw ValidationError(layer_label(index, layer.kind) + ": kernel larger than input " + shape_str(in));
      return {w[0], h - w[2] + 1, wd - w[3] + 1};
    }
    case LayerKind::relu:
      return in;
    case LayerKind::flatten:
      return {shape_size(in)};
    case LayerKind::avgpool: {
      if (in.size() != 3 || layer.pool == 0 || in[1] % layer.pool || in[2] % layer.pool)
        throw ValidationError(layer_label(index, layer.kind) + ": input " + shape_str(in) +
                              " not divisible by pool " + std::to_string(layer.pool));
      return {in[0], in[1] / layer.pool, in[2] / layer.pool};
    }
  }
  throw ValidationError("unknown layer kind");
}

Tensor dense_forward(const Layer& l, const Tensor& x) {
  const std::size_t batch = x.dim(0), in = l.weight.dim(1), out = l.weight.dim(0);
  Tensor y({batch, out});
  const double* W = l.weight.data().data();
  const double* bias = l.bias.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const double* xb = x.data().data() + b * in;
    double* yb = y.data().data() + b * out;
    for (std::size_t o = 0; o < out; ++o) {
      const double* wo = W + o * in;
      double acc = bias[o];
      for (std::size_t i = 0; i < in; ++i) acc += wo[i] * xb[i];
      yb[o] = acc;
    }
  }
  return y;
}

void dense_backward(const Layer& l, const Tensor& x, const Tensor& g, Tensor* dW, Tensor* db, Tensor* dx) {
  const std::size_t batch = x.dim(0), in = l.weight.dim(1), out = l.weight.dim(0);
  const double* W = l.weight.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const double* xb = x.data().data() + b * in;
    const double* gb = g.data().data() + b * out;
    double* dxb = dx ? dx->data().data() + b * in : nullptr;
    for (std::size_t o = 0; o < out; ++o) {
      const double go = gb[o];
      if (go == 0.0) continue;
      if (dW) {
        double* dwo = dW->data().data() + o * in;
        for (std::size_t i = 0; i < in; ++i) dwo[i] += go * xb[i];
      }
      if (db) (*db)[o] += go;
      if (dxb) {
        const double* wo = W + o * in;
        for (std::size_t i = 0; i < in; ++i) dxb[i] += go * wo[i];
      }
    }
  }
}

Tensor conv_forward(const Layer& l, const Tensor& x) {
  const auto& ws = l.weight.shape();
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), Wd = x.dim(3);
  const std::size_t O = ws[0], KH = ws[2], KW = ws[3], P = l.padding;
  const std::size_t OH = H + 2 * P - KH + 1, OW = Wd + 2 * P - KW + 1;
  Tensor y({B, O, OH, OW});
  const double* in = x.data().data();
  const double* w = l.weight.data().data();
  double* out = y.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < O; ++o) {
      double* yo = out + ((b * O + o) * OH) * OW;
      for (std::size_t i = 0; i < OH * OW; ++i) yo[i] = l.bias[o];
      for (std::size_t c = 0; c < C; ++c) {
        const double* xc = in + ((b * C + c) * H) * Wd;
        for (std::size_t ky = 0; ky < KH; ++ky)
          for (std::size_t kx = 0; kx < KW; ++kx) {
            const double wv = w[((o * C + c) * KH + ky) * KW + kx];
            for (std::size_t oy = 0; oy < OH; ++oy) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(P);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
              for (std::size_t ox = 0; ox < OW; ++ox) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(P);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(Wd)) continue;
                yo[oy * OW + ox] += wv * xc[static_cast<std::size_t>(iy) * Wd + static_cast<std::size_t>(ix)];
              }
            }
          }
      }
    }
  return y;
}

void conv_backward(const Layer& l, const Tensor& x, const Tensor& g, Tensor* dW, Tensor* db, Tensor* dx) {
  const auto& ws = l.weight.shape();
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), Wd = x.dim(3);
  const std::size_t O = ws[0], KH = ws[2], KW = ws[3], P = l.padding;
  const std::size_t OH = H + 2 * P - KH + 1, OW = Wd + 2 * P - KW + 1;
  const double* in = x.data().data();
  const double* w = l.weight.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < O; ++o) {
      const double* go = g.data().data() + ((b * O + o) * OH) * OW;
      if (db)
        for (std::size_t i = 0; i < OH * OW; ++i) (*db)[o] += go[i];
      for (std::size_t c = 0; c < C; ++c) {
        const double* xc = in + ((b * C + c) * H) * Wd;
        double* dxc = dx ? dx->data().data() + ((b * C + c) * H) * Wd : nullptr;
        for (std::size_t ky = 0; ky < KH; ++ky)
          for (std::size_t kx = 0; kx < KW; ++kx) {
            const std::size_t widx = ((o * C + c) * KH + ky) * KW + kx;
            const double wv = w[widx];
            double acc = 0.0;
            for (std::size_t oy = 0; oy < OH; ++oy) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(P);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
              for (std::size_t ox = 0; ox < OW; ++ox) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(P);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(Wd)) continue;
                const std::size_t xi = static_cast<std::size_t>(iy) * Wd + static_cast<std::size_t>(ix);
                const double gv = go[oy * OW + ox];
                acc += gv * xc[xi];
                if (dxc) dxc[xi] += gv * wv;
              }
            }
            if (dW) (*dW)[widx] += acc;
          }
      }
    }
}

Tensor avgpool_forward(const Layer& l, const Tensor& x) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), k = l.pool;
  const std::size_t OH = H / k, OW = W / k;
  Tensor y({B, C, OH, OW});
  const double scale = 1.0 / static_cast<double>(k * k);
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const double* xc = x.data().data() + bc * H * W;
    double* yc = y.data().data() + bc * OH * OW;
    for (std::size_t oy = 0; oy < OH; ++oy)
      for (std::size_t ox = 0; ox < OW; ++ox) {
        double acc = 0.0;
        for (std::size_t dy = 0; dy < k; ++dy)
          for (std::size_t dx = 0; dx < k; ++dx) acc += xc[(oy * k + dy) * W + ox * k + dx];
        yc[oy * OW + ox] = acc * scale;
      }
  }
  return y;
}

Tensor avgpool_backward(const Layer& l, const Tensor& x, const Tensor& g) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), k = l.pool;
  const std::size_t OH = H / k, OW = W / k;
  Tensor dx(x.shape());
  const double scale = 1.0 / static_cast<double>(k * k);
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const double* gc = g.data().data() + bc * OH * OW;
    double* dxc = dx.data().data() + bc * H * W;
    for (std::size_t oy = 0; oy < OH; ++oy)
      for (std::size_t ox = 0; ox < OW; ++ox)
        for (std::size_t dy = 0; dy < k; ++dy)
          for (std::size_t ddx = 0; ddx < k; ++ddx) dxc[(oy * k + dy) * W + ox * k + ddx] = gc[oy * OW + ox] * scale;
  }
  return dx;
}

Tensor layer_forward(std::size_t index, const Layer& l, const Tensor& x, const Shape& expected_in) {
  if (Shape(x.shape().begin() + 1, x.shape().end()) != expected_in)
    throw ValidationError(layer_label(index, l.kind) + ": expected input " + shape_str(expected_in) + ", got " +
                          shape_str(Shape(x.shape().begin() + 1, x.shape().end())));
  switch (l.kind) {
    case LayerKind::dense:
      return dense_forward(l, x);
    case LayerKind::conv2d:
      return conv_forward(l, x);
    case LayerKind::relu: {
      Tensor y = x;
      for (auto& v : y.data()) v = v > 0.0 ? v : 0.0;
      return y;
    }
    case LayerKind::flatten:
      return x.reshaped({x.dim(0), x.row_size()});
    case LayerKind::avgpool:
      return avgpool_forward(l, x);
  }
  throw ValidationError("unknown layer kind");
}

// Wire helpers for checkpoints.
void put_u64(std::string& out, std::uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}
void put_str(std::string& out, const std::string& s) {
  put_u64(out, s.size());
  out += s;
}
void put_tensor(std::string& out, const Tensor& t) {
  put_u64(out, t.rank());
  for (auto d : t.shape()) put_u64(out, d);
  out.append(reinterpret_cast<const char*>(t.data().data()), t.size() * sizeof(double));
}

struct Reader {
  const std::string& bytes;
  std::size_t pos = 0;
  void need(std::size_t n) {
    if (pos + n > bytes.size()) throw ValidationError("checkpoint truncated at byte " + std::to_string(pos));
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v;
    std::memcpy(&v, bytes.data() + pos, 8);
    pos += 8;
    return v;
  }
  std::string str() {
    const auto n = u64();
    need(n);
    std::string s = bytes.substr(pos, n);
    pos += n;
    return s;
  }
  Tensor tensor() {
    const auto rank = u64();
    if (rank > 8) throw ValidationError("checkpoint tensor rank too large");
    Shape s(rank);
    for (auto& d : s) d = u64();
    const auto n = shape_size(s);
    need(n * sizeof(double));
    std::vector<double> data(n);
    std::memcpy(data.data(), bytes.data() + pos, n * sizeof(double));
    pos += n * sizeof(double);
    return Tensor(std::move(s), std::move(data));
  }
};

constexpr char kMagic[] = "RKDNET";
constexpr std::uint64_t kFormatVersion = 1;

}  // namespace

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense:
      return "dense";
    case LayerKind::conv2d:
      return "conv2d";
    case LayerKind::relu:
      return "relu";
    case LayerKind::flatten:
      return "flatten";
    case LayerKind::avgpool:
      return "avgpool";
  }
  return "?";
}

LayerKind layer_kind_from_string(const std::string& s) {
  for (auto k : {LayerKind::dense, LayerKind::conv2d, LayerKind::relu, LayerKind::flatten, LayerKind::avgpool})
    if (to_string(k) == s) return k;
  throw ValidationError("unknown layer kind '" + s + "'");
}

Network::Network(Shape input_shape, std::size_t num_classes, std::vector<Layer> layers)
    : input_shape_(std::move(input_shape)), num_classes_(num_classes), layers_(std::move(layers)) {
  if (num_classes_ < 1) throw ValidationError("network needs at least one class");
  if (layers_.empty()) throw ValidationError("network has no layers");
  std::set<std::string> seen;
  for (const auto& l : layers_)
    if (!l.tap.empty() && !seen.insert(l.tap).second) throw ValidationError("duplicate tap name '" + l.tap + "'");
  const auto shapes = layer_output_shapes();
  if (shapes.back() != Shape{num_classes_})
    throw ValidationError("network output " + shape_str(shapes.back()) + " does not match " +
                          std::to_string(num_classes_) + " classes");
  if (!seen.empty()) {
    const auto last = tap_layer(last_tap());
    bool head_has_dense = false;
    for (std::size_t i = last + 1; i < layers_.size(); ++i) {
      if (layers_[i].kind == LayerKind::dense) head_has_dense = true;
      if (layers_[i].kind == LayerKind::conv2d || layers_[i].kind == LayerKind::avgpool)
        throw ValidationError("layers after the last tap must form the classifier (flatten/relu/dense only)");
    }
    if (!head_has_dense) throw ValidationError("last tap must feed a fully connected classifier");
  }
}

std::vector<std::string> Network::tap_order() const {
  std::vector<std::string> out;
  for (const auto& l : layers_)
    if (!l.tap.empty()) out.push_back(l.tap);
  return out;
}

std::size_t Network::tap_layer(const std::string& tap) const {
  for (std::size_t i = 0; i < layers_.size(); ++i)
    if (layers_[i].tap == tap) return i;
  throw ValidationError("network has no tap '" + tap + "'");
}

std::string Network::last_tap() const {
  const auto taps = tap_order();
  if (taps.empty()) throw ValidationError("network has no taps");
  return taps.back();
}

std::vector<Tensor*> Network::parameters() {
  std::vector<Tensor*> out;
  for (auto& l : layers_)
    if (l.has_params()) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
  return out;
}

std::vector<const Tensor*> Network::parameters() const {
  std::vector<const Tensor*> out;
  for (const auto& l : layers_)
    if (l.has_params()) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
  return out;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += p->size();
  return n;
}

std::vector<Shape> Network::layer_output_shapes() const {
  std::vector<Shape> out;
  Shape cur = input_shape_;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    cur = output_shape(i, layers_[i], cur);
    out.push_back(cur);
  }
  return out;
}

bool operator==(const Network& a, const Network& b) {
  if (a.input_shape_ != b.input_shape_ || a.num_classes_ != b.num_classes_ || a.layers_.size() != b.layers_.size())
    return false;
  for (std::size_t i = 0; i < a.layers_.size(); ++i) {
    const auto &x = a.layers_[i], &y = b.layers_[i];
    if (x.kind != y.kind || x.tap != y.tap || x.padding != y.padding || x.pool != y.pool || x.weight != y.weight ||
        x.bias != y.bias)
      return false;
  }
  return true;
}

ForwardResult forward(const Network& net, const Tensor& inputs, const TapOverride* override,
                      std::size_t first_layer) {
  const auto& layers = net.layers();
  if (first_layer >= layers.size()) throw ValidationError("forward: first layer out of range");
  Shape expected = first_layer == 0 ? net.input_shape() : net.layer_output_shapes()[first_layer - 1];
  if (inputs.rank() != expected.size() + 1 || Shape(inputs.shape().begin() + 1, inputs.shape().end()) != expected)
    throw ValidationError("input " + shape_str(inputs.shape()) + " does not match " +
                          layer_label(first_layer, layers[first_layer].kind) + " input " +
                          shape_str(expected));
  ForwardResult r;
  r.cache.net = &net;
  r.cache.version = net.version();
  r.cache.first_layer = first_layer;
  r.cache.inputs.reserve(layers.size() - first_layer);
  Tensor cur = inputs;
  for (std::size_t i = first_layer; i < layers.size(); ++i) {
    const auto& l = layers[i];
    Tensor next = layer_forward(i, l, cur, expected);
    expected = output_shape(i, l, expected);
    r.cache.inputs.push_back(std::move(cur));
    if (!l.tap.empty()) {
      if (override && override->apply) {
        next = override->apply(l.tap, next);
        if (Shape(next.shape().begin() + 1, next.shape().end()) != expected)
          throw ValidationError("tap override changed the shape of '" + l.tap + "'");
      }
      r.taps.emplace(l.tap, next);
    }
    cur = std::move(next);
  }
  r.cache.output = cur;
  r.logits = std::move(cur);
  return r;
}

Tensor forward_range(const Network& net, std::size_t first, std::size_t last, const Tensor& inputs) {
  if (first > last || last > net.layers().size()) throw ValidationError("forward_range: bad layer range");
  const auto shapes = net.layer_output_shapes();
  Shape expected = first == 0 ? net.input_shape() : shapes[first - 1];
  Tensor cur = inputs;
  for (std::size_t i = first; i < last; ++i) {
    cur = layer_forward(i, net.layers()[i], cur, expected);
    expected = shapes[i];
  }
  return cur;
}

Gradients zero_gradients(const Network& net) {
  Gradients g;
  for (const auto* p : net.parameters()) g.emplace_back(p->shape());
  return g;
}

BackwardResult backward(const Network& net, const ForwardCache& cache, const Tensor& logits_grad,
                        const std::map<std::string, Tensor>& tap_grads, const TapOverride* override,
                        bool param_grads) {
  if (!cache.valid()) throw ValidationError("backward: missing forward cache");
  if (cache.net != &net || cache.version != net.version())
    throw ValidationError("backward: stale forward cache (network changed since forward)");
  if (logits_grad.shape() != cache.output.shape())
    throw ValidationError("backward: gradient " + shape_str(logits_grad.shape()) + " does not match output " +
                          shape_str(cache.output.shape()));
  for (const auto& [name, g] : tap_grads)
    if (net.tap_layer(name) < cache.first_layer)
      throw ValidationError("backward: tap '" + name + "' precedes the cached range");

  BackwardResult r;
  r.params = zero_gradients(net);
  const auto& layers = net.layers();
  std::size_t pidx = r.params.size();
  Tensor g = logits_grad;
  for (std::size_t i = layers.size(); i-- > cache.first_layer;) {
    const auto& l = layers[i];
    const Tensor& x = cache.inputs[i - cache.first_layer];
    if (!l.tap.empty()) {
      if (auto it = tap_grads.find(l.tap); it != tap_grads.end()) {
        if (it->second.shape() != g.shape())
          throw ValidationError("backward: injected gradient for tap '" + l.tap + "' has shape " +
                                shape_str(it->second.shape()) + ", expected " + shape_str(g.shape()));
        g += it->second;
      }
      r.taps[l.tap] = g;
      if (override && override->backprop) g = override->backprop(l.tap, g);
    }
    switch (l.kind) {
      case LayerKind::dense: {
        pidx -= 2;
        Tensor dx(x.shape());
        if (param_grads)
          dense_backward(l, x, g, &r.params[pidx], &r.params[pidx + 1], &dx);
        else
          dense_backward(l, x, g, nullptr, nullptr, &dx);
        g = std::move(dx);
        break;
      }
      case LayerKind::conv2d: {
        pidx -= 2;
        Tensor dx(x.shape());
        if (param_grads)
          conv_backward(l, x, g, &r.params[pidx], &r.params[pidx + 1], &dx);
        else
          conv_backward(l, x, g, nullptr, nullptr, &dx);
        g = std::move(dx);
        break;
      }
      case LayerKind::relu:
        for (std::size_t k = 0; k < g.size(); ++k)
          if (!(x[k] > 0.0)) g[k] = 0.0;
        break;
      case LayerKind::flatten:
        g = g.reshaped(x.shape());
        break;
      case LayerKind::avgpool:
        g = avgpool_backward(l, x, g);
        break;
    }
  }
  r.input = std::move(g);
  return r;
}

void sgd_step(Network& net, const Gradients& grads, double learning_rate) {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
    throw ValidationError("learning rate must be finite and non-negative");
  auto params = net.parameters();
  if (grads.size() != params.size()) throw ValidationError("sgd_step: gradient count mismatch");
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (grads[p].shape() != params[p]->shape()) throw ValidationError("sgd_step: gradient shape mismatch");
    auto w = params[p]->data();
    auto gd = grads[p].data();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= learning_rate * gd[i];
  }
  net.touch();
}

void init_parameters(Network& net, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& l : net.mutable_layers()) {
    if (!l.has_params()) continue;
    const auto& s = l.weight.shape();
    std::size_t fan_in = 0, fan_out = 0;
    if (l.kind == LayerKind::dense) {
      fan_in = s[1];
      fan_out = s[0];
    } else {
      fan_in = s[1] * s[2] * s[3];
      fan_out = s[0] * s[2] * s[3];
    }
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& w : l.weight.data()) w = dist(rng);
    l.bias.fill(0.0);
  }
}

Network make_mlp(const Shape& input_shape, std::size_t hidden1, std::size_t hidden2, std::size_t num_classes,
                 std::uint64_t seed) {
  const std::size_t in = shape_size(input_shape);
  std::vector<Layer> layers;
  layers.push_back({LayerKind::flatten, {}, {}, ""});
  layers.push_back({LayerKind::dense, Tensor({hidden1, in}), Tensor({hidden1}), "h1"});
  layers.push_back({LayerKind::relu, {}, {}, ""});
  layers.push_back({LayerKind::dense, Tensor({hidden2, hidden1}), Tensor({hidden2}), "h2"});
  layers.push_back({LayerKind::relu, {}, {}, ""});
  layers.push_back({LayerKind::dense, Tensor({num_classes, hidden2}), Tensor({num_classes}), ""});
  Network net(input_shape, num_classes, std::move(layers));
  init_parameters(net, seed);
  return net;
}

Network make_cnn(const Shape& input_shape, std::size_t channels1, std::size_t channels2, std::size_t num_classes,
                 std::uint64_t seed) {
  if (input_shape.size() != 3) throw ValidationError("cnn expects (c,h,w) input");
  const std::size_t c = input_shape[0], h = input_shape[1], w = input_shape[2];
  if (h % 2 || w % 2) throw ValidationError("cnn expects even spatial dims");
  std::vector<Layer> layers;
  Layer conv1{LayerKind::conv2d, Tensor({channels1, c, 3, 3}), Tensor({channels1}), "c1"};
  conv1.padding = 1;
  layers.push_back(conv1);
  layers.push_back({LayerKind::relu, {}, {}, ""});
  layers.push_back({LayerKind::avgpool, {}, {}, ""});
  Layer conv2{LayerKind::conv2d, Tensor({channels2, channels1, 3, 3}), Tensor({channels2}), "c2"};
  conv2.padding = 1;
  layers.push_back(conv2);
  layers.push_back({LayerKind::relu, {}, {}, ""});
  layers.push_back({LayerKind::flatten, {}, {}, ""});
  layers.push_back(
      {LayerKind::dense, Tensor({num_classes, channels2 * (h / 2) * (w / 2)}), Tensor({num_classes}), ""});
  Network net(input_shape, num_classes, std::move(layers));
  init_parameters(net, seed);
  return net;
}

std::string serialize_network(const Network& net) {
  std::string out(kMagic, sizeof(kMagic) - 1);
  put_u64(out, kFormatVersion);
  put_u64(out, net.num_classes());
  put_u64(out, net.input_shape().size());
  for (auto d : net.input_shape()) put_u64(out, d);
  put_u64(out, net.layers().size());
  for (const auto& l : net.layers()) {
    put_str(out, to_string(l.kind));
    put_str(out, l.tap);
    put_u64(out, l.padding);
    put_u64(out, l.pool);
    if (l.has_params()) {
      put_tensor(out, l.weight);
      put_tensor(out, l.bias);
    }
  }
  return out;
}

Network deserialize_network(const std::string& bytes) {
  const std::size_t mlen = sizeof(kMagic) - 1;
  if (bytes.size() < mlen || bytes.compare(0, mlen, kMagic) != 0)
    throw ValidationError("not a network checkpoint (bad magic)");
  Reader rd{bytes, mlen};
  if (const auto v = rd.u64(); v != kFormatVersion)
    throw ValidationError("unsupported checkpoint version " + std::to_string(v));
  const auto classes = rd.u64();
  Shape in(rd.u64());
  for (auto& d : in) d = rd.u64();
  const auto nlayers = rd.u64();
  std::vector<Layer> layers;
  for (std::uint64_t i = 0; i < nlayers; ++i) {
    Layer l;
    l.kind = layer_kind_from_string(rd.str());
    l.tap = rd.str();
    l.padding = rd.u64();
    l.pool = rd.u64();
    if (l.has_params()) {
      l.weight = rd.tensor();
      l.bias = rd.tensor();
    }
    layers.push_back(std::move(l));
  }
  if (rd.pos != bytes.size()) throw ValidationError("trailing bytes in checkpoint");
  return Network(std::move(in), classes, std::move(layers));
}

void save_network(const Network& net, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw RuntimeFailure("cannot open '" + path + "' for writing");
  const auto bytes = serialize_network(net);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw RuntimeFailure("failed writing '" + path + "'");
}

Network load_network(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize_network(ss.str());
}

}  // namespace robustkd
