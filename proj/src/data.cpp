#include "robustkd/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace robustkd {

namespace {

constexpr std::size_t kCell = 4;
constexpr std::uint64_t kPatternSeed = 0x5eed'ba5e;

std::vector<Tensor> class_patterns(std::size_t num_classes, const Shape& shape) {
  const std::size_t c = shape[0], h = shape[1], w = shape[2];
  const std::size_t gh = h / kCell, gw = w / kCell, cells = gh * gw;
  if (cells < num_classes)
    throw ValidationError("image " + shape_str(shape) + " has " + std::to_string(cells) + " cells, too few for " +
                          std::to_string(num_classes) + " distinct class patterns");
  Rng rng(kPatternSeed);
  std::vector<std::size_t> order(cells);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::uniform_int_distribution<std::size_t> pick(0, cells - 1);

  std::vector<Tensor> out;
  for (std::size_t k = 0; k < num_classes; ++k) {
    Tensor p(shape);
    auto paint = [&](std::size_t cell, double v) {
      const std::size_t r0 = (cell / gw) * kCell, c0 = (cell % gw) * kCell;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = r0; y < r0 + kCell; ++y)
          for (std::size_t x = c0; x < c0 + kCell; ++x) {
            double& px = p[(ch * h + y) * w + x];
            px = std::max(px, v);
          }
    };
    paint(order[k], 0.9);
    for (int s = 0; s < 2; ++s) paint(pick(rng), 0.45);
    out.push_back(std::move(p));
  }
  return out;
}

Dataset sample_split(const std::vector<Tensor>& patterns, std::size_t per_class, double noise_std, Split split,
                     Rng& rng) {
  const std::size_t n = patterns.size() * per_class;
  const Shape img = patterns[0].shape();
  const std::size_t sz = shape_size(img);
  Shape s{n};
  s.insert(s.end(), img.begin(), img.end());
  Dataset d;
  d.images = Tensor(s);
  d.num_classes = patterns.size();
  d.split = split;
  std::normal_distribution<double> noise(0.0, 1.0);
  std::size_t i = 0;
  // Interleave classes so that any prefix is roughly class-balanced.
  for (std::size_t rep = 0; rep < per_class; ++rep)
    for (std::size_t k = 0; k < patterns.size(); ++k, ++i) {
      double* dst = d.images.data().data() + i * sz;
      for (std::size_t j = 0; j < sz; ++j) {
        const double v = patterns[k][j] + (noise_std > 0.0 ? noise_std * noise(rng) : 0.0);
        dst[j] = std::clamp(v, 0.0, 1.0);
      }
      d.labels.push_back(k);
    }
  return d;
}

}  // namespace

Tensor Dataset::image(std::size_t i) const {
  if (i >= size()) throw ValidationError("dataset index out of range");
  return images.slice_rows(i, i + 1).reshaped(image_shape());
}

void Dataset::validate() const {
  if (labels.empty()) throw ValidationError("dataset is empty");
  if (images.rank() < 2 || images.dim(0) != labels.size())
    throw ValidationError("dataset images " + shape_str(images.shape()) + " do not match " +
                          std::to_string(labels.size()) + " labels");
  for (auto l : labels)
    if (l >= num_classes)
      throw ValidationError("label " + std::to_string(l) + " out of range for " + std::to_string(num_classes) +
                            " classes");
}

Dataset Dataset::head(std::size_t count) const {
  count = std::min(count, size());
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), 0);
  return subset(idx);
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  Dataset d;
  d.images = images.gather_rows(indices);
  d.num_classes = num_classes;
  d.split = split;
  for (std::size_t j = 0; j < indices.size(); ++j) {
    d.labels.push_back(labels.at(indices[j]));
    if (std::binary_search(poisoned.begin(), poisoned.end(), indices[j])) d.poisoned.push_back(j);
  }
  return d;
}

DataSplits generate_blobs(const BlobParams& p) {
  if (p.num_classes < 2) throw ValidationError("need at least 2 classes");
  if (p.train_per_class < 1 || p.test_per_class < 1) throw ValidationError("per_class must be at least 1");
  if (p.image_shape.size() != 3) throw ValidationError("image shape must be (c,h,w)");
  if (!(p.noise_std >= 0.0)) throw ValidationError("noise_std must be non-negative");
  const auto patterns = class_patterns(p.num_classes, p.image_shape);
  Rng rng(p.seed);
  DataSplits out;
  out.train = sample_split(patterns, p.train_per_class, p.noise_std, Split::train, rng);
  out.test = sample_split(patterns, p.test_per_class, p.noise_std, Split::test, rng);
  return out;
}

void TriggerSpec::validate(const Shape& image_shape, std::size_t num_classes) const {
  if (pattern.rank() != 3 || image_shape.size() != 3 || pattern.dim(0) != image_shape[0])
    throw ValidationError("trigger pattern " + shape_str(pattern.shape()) + " incompatible with image " +
                          shape_str(image_shape));
  if (row + pattern.dim(1) > image_shape[1] || col + pattern.dim(2) > image_shape[2])
    throw ValidationError("trigger patch at (" + std::to_string(row) + "," + std::to_string(col) +
                          ") does not fit image " + shape_str(image_shape));
  if (target_label >= num_classes) throw ValidationError("trigger target label out of range");
  if (!(blend >= 0.0 && blend <= 1.0)) throw ValidationError("trigger blend must lie in [0,1]");
}

TriggerSpec corner_trigger(const Shape& image_shape, std::size_t size, std::size_t target_label) {
  if (image_shape.size() != 3 || size > image_shape[1] || size > image_shape[2])
    throw ValidationError("trigger larger than image");
  TriggerSpec t;
  t.pattern = Tensor({image_shape[0], size, size}, 1.0);
  t.row = image_shape[1] - size;
  t.col = image_shape[2] - size;
  t.target_label = target_label;
  t.blend = 1.0;
  return t;
}

Tensor apply_trigger(const Tensor& image, const TriggerSpec& spec) {
  if (image.rank() != 3) throw ValidationError("apply_trigger expects a (c,h,w) image");
  Tensor batch = image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
  return apply_trigger_batch(batch, spec).reshaped(image.shape());
}

Tensor apply_trigger_batch(const Tensor& images, const TriggerSpec& spec) {
  if (images.rank() != 4) throw ValidationError("apply_trigger_batch expects (n,c,h,w)");
  const Shape img(images.shape().begin() + 1, images.shape().end());
  spec.validate(img, spec.target_label + 1);
  const std::size_t n = images.dim(0), c = img[0], h = img[1], w = img[2];
  const std::size_t th = spec.pattern.dim(1), tw = spec.pattern.dim(2);
  Tensor out = images;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < th; ++y)
        for (std::size_t x = 0; x < tw; ++x) {
          double& px = out[((i * c + ch) * h + spec.row + y) * w + spec.col + x];
          px = (1.0 - spec.blend) * px + spec.blend * spec.pattern[(ch * th + y) * tw + x];
        }
  return out;
}

Dataset poison_dataset(const Dataset& dataset, const TriggerSpec& spec, double poison_fraction, std::uint64_t seed) {
  if (dataset.size() == 0) throw ValidationError("cannot poison an empty dataset");
  if (dataset.split == Split::test) throw ValidationError("refusing to poison a test split");
  if (!(poison_fraction > 0.0 && poison_fraction <= 1.0)) throw ValidationError("poison_fraction must lie in (0,1]");
  spec.validate(dataset.image_shape(), dataset.num_classes);

  const auto n = dataset.size();
  const auto k = static_cast<std::size_t>(std::llround(poison_fraction * static_cast<double>(n)));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());

  Dataset out = dataset;
  if (idx.empty()) return out;
  const Tensor patched = apply_trigger_batch(dataset.images.gather_rows(idx), spec);
  const auto rs = dataset.images.row_size();
  for (std::size_t j = 0; j < idx.size(); ++j) {
    std::copy_n(patched.data().begin() + static_cast<std::ptrdiff_t>(j * rs), rs,
                out.images.data().begin() + static_cast<std::ptrdiff_t>(idx[j] * rs));
    out.labels[idx[j]] = spec.target_label;
  }
  out.poisoned = std::move(idx);
  return out;
}

void save_dataset_text(const Dataset& d, const std::string& path) {
  d.validate();
  std::ofstream f(path);
  if (!f) throw RuntimeFailure("cannot open '" + path + "' for writing");
  const auto s = d.image_shape();
  f << "classes=" << d.num_classes << " shape=";
  for (std::size_t i = 0; i < s.size(); ++i) f << (i ? "," : "") << s[i];
  f << '\n' << std::setprecision(17);
  const auto rs = d.images.row_size();
  for (std::size_t i = 0; i < d.size(); ++i) {
    f << d.labels[i];
    for (std::size_t j = 0; j < rs; ++j) f << ' ' << d.images[i * rs + j];
    f << '\n';
  }
  if (!f) throw RuntimeFailure("failed writing '" + path + "'");
}

Dataset load_dataset_text(const std::string& path, Split split) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open dataset '" + path + "'");
  std::string header;
  std::getline(f, header);
  std::size_t classes = 0;
  Shape shape;
  {
    std::istringstream hs(header);
    std::string tok;
    while (hs >> tok) {
      if (tok.rfind("classes=", 0) == 0) {
        classes = std::stoul(tok.substr(8));
      } else if (tok.rfind("shape=", 0) == 0) {
        std::istringstream ss(tok.substr(6));
        std::string dim;
        while (std::getline(ss, dim, ',')) shape.push_back(std::stoul(dim));
      }
    }
  }
  if (classes < 2 || shape.size() != 3) throw ValidationError("bad dataset header in '" + path + "': " + header);
  const auto rs = shape_size(shape);
  std::vector<double> pixels;
  Dataset d;
  d.num_classes = classes;
  d.split = split;
  std::string line;
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    long long label;
    if (!(ls >> label)) continue;
    if (label < 0 || static_cast<std::size_t>(label) >= classes)
      throw ValidationError(path + ":" + std::to_string(lineno) + ": label out of range");
    std::size_t count = 0;
    double v;
    while (ls >> v) {
      if (!(v >= 0.0 && v <= 1.0)) throw ValidationError(path + ":" + std::to_string(lineno) + ": pixel outside [0,1]");
      pixels.push_back(v);
      ++count;
    }
    if (count != rs)
      throw ValidationError(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(rs) + " pixels, got " +
                            std::to_string(count));
    d.labels.push_back(static_cast<std::size_t>(label));
  }
  if (d.labels.empty()) throw ValidationError("dataset '" + path + "' has no examples");
  Shape s{d.labels.size()};
  s.insert(s.end(), shape.begin(), shape.end());
  d.images = Tensor(std::move(s), std::move(pixels));
  return d;
}

}  // namespace robustkd
