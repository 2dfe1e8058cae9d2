#include "robustkd/config.hpp"
#include "robustkd/metrics.hpp"

#include <openssl/evp.h>

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

namespace robustkd {

namespace pt = boost::property_tree;

namespace {

constexpr std::uint64_t kStudentSeedOffset = 100;

std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  if (boost::algorithm::trim_copy(s).empty()) return out;
  boost::algorithm::split(out, s, [sep](char c) { return c == sep; });
  for (auto& t : out) boost::algorithm::trim(t);
  return out;
}

double to_double(const std::string& s, const std::string& key) {
  double v = 0.0;
  const auto t = boost::algorithm::trim_copy(s);
  const auto r = std::from_chars(t.data(), t.data() + t.size(), v);
  if (r.ec != std::errc() || r.ptr != t.data() + t.size()) throw ValidationError("config: '" + key + "' is not a number");
  return v;
}

std::uint64_t to_uint(const std::string& s, const std::string& key) {
  std::uint64_t v = 0;
  const auto t = boost::algorithm::trim_copy(s);
  const auto r = std::from_chars(t.data(), t.data() + t.size(), v);
  if (r.ec != std::errc() || r.ptr != t.data() + t.size())
    throw ValidationError("config: '" + key + "' is not a non-negative integer");
  return v;
}

// Reads keys out of a parsed ini tree and remembers which ones were used.
class Reader {
 public:
  explicit Reader(const pt::ptree& tree) : tree_(tree) {}

  template <class F>
  void read(const std::string& section, const std::string& key, F&& assign) {
    const std::string path = section + "." + key;
    used_.insert(path);
    if (auto v = tree_.get_optional<std::string>(pt::ptree::path_type(path, '.'))) assign(*v, path);
  }

  void reject_unknown() const {
    for (const auto& [section, body] : tree_) {
      if (body.empty() && !body.data().empty())
        throw ValidationError("config: key '" + section + "' outside any section");
      for (const auto& [key, value] : body)
        if (!used_.count(section + "." + key)) throw ValidationError("config: unknown key '" + section + "." + key + "'");
    }
  }

 private:
  const pt::ptree& tree_;
  std::set<std::string> used_;
};

std::string join_doubles(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + format_shortest(v[i]);
  return out;
}

std::string join_strings(const std::vector<std::string>& v) { return boost::algorithm::join(v, ", "); }

std::string shape_text(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out;
}

}  // namespace

Network ArchSpec::build(const Shape& input_shape, std::size_t num_classes, std::uint64_t seed) const {
  if (kind == "mlp") return make_mlp(input_shape, width1, width2, num_classes, seed);
  if (kind == "cnn") return make_cnn(input_shape, width1, width2, num_classes, seed);
  throw ValidationError("unknown architecture '" + kind + "' (expected mlp or cnn)");
}

TriggerSpec AttackSection::trigger(const Shape& image_shape) const {
  TriggerSpec t = corner_trigger(image_shape, trigger_size, target_label);
  t.blend = blend;
  return t;
}

std::uint64_t student_init_seed(const ExperimentConfig& c) { return c.seed + kStudentSeedOffset; }

DataSplits make_data(const ExperimentConfig& c) {
  if (c.data.train_path.empty() != c.data.test_path.empty())
    throw ValidationError("config: data.train_path and data.test_path must be set together");
  if (!c.data.train_path.empty()) {
    DataSplits d{load_dataset_text(c.data.train_path, Split::train), load_dataset_text(c.data.test_path, Split::test)};
    if (d.train.image_shape() != d.test.image_shape() || d.train.num_classes != d.test.num_classes)
      throw ValidationError("config: train and test datasets disagree on shape or class count");
    return d;
  }
  return generate_blobs(c.data.blobs);
}

void set_seed(ExperimentConfig& c, std::uint64_t seed) {
  c.seed = seed;
  c.data.blobs.seed = seed;
  c.teacher_training.seed = seed;
  c.distill.seed = seed;
  c.defense.seed = seed;
  c.defense.optim.seed = seed;
}

ExperimentConfig default_config() {
  ExperimentConfig c;
  c.distill.tap_pairs = {{"h1", "h1", 1.0}, {"h2", "h2", 1.0}};
  set_seed(c, c.seed);
  return c;
}

ExperimentConfig parse_config(const std::string& text) {
  pt::ptree tree;
  std::istringstream is(text);
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ValidationError(std::string("config: ") + e.message() + " at line " + std::to_string(e.line()));
  }
  ExperimentConfig c = default_config();
  Reader r(tree);
  auto u = [](std::size_t& dst) { return [&dst](const std::string& v, const std::string& k) { dst = to_uint(v, k); }; };
  auto d = [](double& dst) { return [&dst](const std::string& v, const std::string& k) { dst = to_double(v, k); }; };
  auto s = [](std::string& dst) { return [&dst](const std::string& v, const std::string&) { dst = v; }; };

  std::uint64_t seed = c.seed;
  r.read("experiment", "seed", [&](const std::string& v, const std::string& k) { seed = to_uint(v, k); });
  r.read("experiment", "output_dir", s(c.output_dir));

  r.read("data", "train_path", s(c.data.train_path));
  r.read("data", "test_path", s(c.data.test_path));
  r.read("data", "num_classes", u(c.data.blobs.num_classes));
  r.read("data", "train_per_class", u(c.data.blobs.train_per_class));
  r.read("data", "test_per_class", u(c.data.blobs.test_per_class));
  r.read("data", "image_shape", [&](const std::string& v, const std::string& k) {
    Shape shape;
    for (const auto& t : split_list(v)) shape.push_back(to_uint(t, k));
    c.data.blobs.image_shape = shape;
  });
  r.read("data", "noise_std", d(c.data.blobs.noise_std));

  for (auto [name, arch] : {std::pair{"teacher", &c.teacher}, std::pair{"student", &c.student}}) {
    r.read(name, "arch", s(arch->kind));
    r.read(name, "width1", u(arch->width1));
    r.read(name, "width2", u(arch->width2));
  }
  r.read("teacher", "epochs", u(c.teacher_training.epochs));
  r.read("teacher", "learning_rate", d(c.teacher_training.learning_rate));
  r.read("teacher", "batch_size", u(c.teacher_training.batch_size));

  AttackConfig& a = c.attack.attack;
  r.read("attack", "kind", [&](const std::string& v, const std::string&) { a.kind = attack_kind_from_string(v); });
  r.read("attack", "trigger_size", u(c.attack.trigger_size));
  r.read("attack", "target_label", u(c.attack.target_label));
  r.read("attack", "blend", d(c.attack.blend));
  r.read("attack", "poison_fraction", d(a.poison_fraction));
  r.read("attack", "strength", d(a.strength));
  r.read("attack", "fixed_value", d(a.fixed_value));
  r.read("attack", "auto_neuron_count", u(a.auto_neuron_count));
  r.read("attack", "assimilation_tap", s(a.assimilation_tap));
  r.read("attack", "coupling_tap", s(a.coupling_tap));
  r.read("attack", "target_neurons", [&](const std::string& v, const std::string& k) {
    a.target_neurons.clear();
    for (const auto& t : split_list(v)) {
      const auto parts = split_list(t, ':');
      if (parts.size() != 2) throw ValidationError("config: '" + k + "' entries must be tap:index");
      a.target_neurons.push_back({parts[0], to_uint(parts[1], k)});
    }
  });

  DistillConfig& dc = c.distill;
  r.read("distill", "temperature", d(dc.temperature));
  r.read("distill", "alpha", d(dc.alpha));
  r.read("distill", "epochs", u(dc.epochs));
  r.read("distill", "learning_rate", d(dc.learning_rate));
  r.read("distill", "batch_size", u(dc.batch_size));
  r.read("distill", "tap_pairs", [&](const std::string& v, const std::string& k) {
    dc.tap_pairs.clear();
    for (const auto& t : split_list(v)) {
      const auto parts = split_list(t, ':');
      if (parts.size() != 3) throw ValidationError("config: '" + k + "' entries must be teacher_tap:student_tap:weight");
      dc.tap_pairs.push_back({parts[0], parts[1], to_double(parts[2], k)});
    }
  });

  DefenseConfig& df = c.defense;
  r.read("defense", "m_schedule", [&](const std::string& v, const std::string& k) {
    df.m_schedule.clear();
    for (const auto& t : split_list(v)) df.m_schedule.push_back(to_double(t, k));
  });
  r.read("defense", "epsilon", d(df.epsilon));
  r.read("defense", "init_samples", u(df.init_samples));
  r.read("defense", "iterations", u(df.optim.iterations));
  r.read("defense", "learning_rate", d(df.optim.learning_rate));
  r.read("defense", "batch_size", u(df.optim.batch_size));
  r.read("defense", "loss_terms",
         [&](const std::string& v, const std::string&) { df.optim.terms = detox_loss_terms_from_string(v); });
  r.read("defense", "variant", [&](const std::string& v, const std::string&) { df.variant = mask_variant_from_string(v); });
  r.read("defense", "masked_taps",
         [&](const std::string& v, const std::string&) { df.masked_taps = split_list(v); });
  r.read("defense", "search_budget", d(df.search_budget));

  r.reject_unknown();
  set_seed(c, seed);
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot open config '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

std::string render_config(const ExperimentConfig& c) {
  std::ostringstream os;
  const AttackConfig& a = c.attack.attack;
  os << "[experiment]\n"
     << "seed = " << c.seed << '\n'
     << "output_dir = " << c.output_dir << "\n\n";
  os << "[data]\n"
     << "train_path = " << c.data.train_path << '\n'
     << "test_path = " << c.data.test_path << '\n'
     << "num_classes = " << c.data.blobs.num_classes << '\n'
     << "train_per_class = " << c.data.blobs.train_per_class << '\n'
     << "test_per_class = " << c.data.blobs.test_per_class << '\n'
     << "image_shape = " << shape_text(c.data.blobs.image_shape) << '\n'
     << "noise_std = " << format_shortest(c.data.blobs.noise_std) << "\n\n";
  os << "[teacher]\n"
     << "arch = " << c.teacher.kind << '\n'
     << "width1 = " << c.teacher.width1 << '\n'
     << "width2 = " << c.teacher.width2 << '\n'
     << "epochs = " << c.teacher_training.epochs << '\n'
     << "learning_rate = " << format_shortest(c.teacher_training.learning_rate) << '\n'
     << "batch_size = " << c.teacher_training.batch_size << "\n\n";
  os << "[student]\n"
     << "arch = " << c.student.kind << '\n'
     << "width1 = " << c.student.width1 << '\n'
     << "width2 = " << c.student.width2 << "\n\n";
  std::vector<std::string> neurons;
  for (const auto& n : a.target_neurons) neurons.push_back(n.tap + ":" + std::to_string(n.index));
  os << "[attack]\n"
     << "kind = " << to_string(a.kind) << '\n'
     << "trigger_size = " << c.attack.trigger_size << '\n'
     << "target_label = " << c.attack.target_label << '\n'
     << "blend = " << format_shortest(c.attack.blend) << '\n'
     << "poison_fraction = " << format_shortest(a.poison_fraction) << '\n'
     << "strength = " << format_shortest(a.strength) << '\n'
     << "fixed_value = " << format_shortest(a.fixed_value) << '\n'
     << "auto_neuron_count = " << a.auto_neuron_count << '\n'
     << "target_neurons = " << join_strings(neurons) << '\n'
     << "assimilation_tap = " << a.assimilation_tap << '\n'
     << "coupling_tap = " << a.coupling_tap << "\n\n";
  std::vector<std::string> pairs;
  for (const auto& p : c.distill.tap_pairs) pairs.push_back(p.teacher_tap + ":" + p.student_tap + ":" + format_shortest(p.weight));
  os << "[distill]\n"
     << "temperature = " << format_shortest(c.distill.temperature) << '\n'
     << "alpha = " << format_shortest(c.distill.alpha) << '\n'
     << "tap_pairs = " << join_strings(pairs) << '\n'
     << "epochs = " << c.distill.epochs << '\n'
     << "learning_rate = " << format_shortest(c.distill.learning_rate) << '\n'
     << "batch_size = " << c.distill.batch_size << "\n\n";
  const DefenseConfig& df = c.defense;
  os << "[defense]\n"
     << "m_schedule = " << join_doubles(df.m_schedule) << '\n'
     << "epsilon = " << format_shortest(df.epsilon) << '\n'
     << "init_samples = " << df.init_samples << '\n'
     << "iterations = " << df.optim.iterations << '\n'
     << "learning_rate = " << format_shortest(df.optim.learning_rate) << '\n'
     << "batch_size = " << df.optim.batch_size << '\n'
     << "loss_terms = " << to_string(df.optim.terms) << '\n'
     << "variant = " << to_string(df.variant) << '\n'
     << "masked_taps = " << join_strings(df.masked_taps) << '\n'
     << "search_budget = " << format_shortest(df.search_budget) << '\n';
  return os.str();
}

std::string config_digest(const ExperimentConfig& config) {
  const std::string text = render_config(config);
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw RuntimeFailure("config digest: SHA-256 failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < 8; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 0xf];
  }
  return out;
}

void validate_config(const ExperimentConfig& c) {
  if (c.data.train_path.empty()) {
    const auto& b = c.data.blobs;
    if (b.num_classes < 2) throw ValidationError("config: data.num_classes must be >= 2");
    if (b.train_per_class == 0 || b.test_per_class == 0) throw ValidationError("config: empty data split");
    if (b.image_shape.size() != 3) throw ValidationError("config: data.image_shape must be c,h,w");
    if (!(b.noise_std >= 0.0)) throw ValidationError("config: data.noise_std must be >= 0");
  }
  if (c.teacher_training.epochs < 1) throw ValidationError("config: teacher.epochs must be >= 1");
  if (!(c.teacher_training.learning_rate > 0.0)) throw ValidationError("config: teacher.learning_rate must be > 0");
  if (c.teacher_training.batch_size < 1) throw ValidationError("config: teacher.batch_size must be >= 1");
  if (c.output_dir.empty()) throw ValidationError("config: experiment.output_dir is empty");

  const DataSplits data = make_data(c);
  const Shape shape = data.train.image_shape();
  const std::size_t classes = data.train.num_classes;
  const Network teacher = c.teacher.build(shape, classes, c.seed);
  const Network student = c.student.build(shape, classes, student_init_seed(c));

  AttackConfig a = c.attack.attack;
  a.trigger = c.attack.trigger(shape);
  a.validate(teacher);

  c.distill.validate();
  if (c.distill.tap_pairs.empty()) throw ValidationError("config: distill.tap_pairs is empty");
  build_transforms(teacher, student, c.distill.tap_pairs, c.seed);

  c.defense.validate();
  for (const auto& tap : c.defense.masked_taps) teacher.tap_layer(tap);
}

}  // namespace robustkd
