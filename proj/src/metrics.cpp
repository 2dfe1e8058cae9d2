#include "robustkd/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "robustkd/train.hpp"

namespace robustkd {

namespace {

double parse_double(const std::string& s, const std::string& key) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ValidationError("report: bad number for '" + key + "': " + s);
  return v;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

constexpr const char* kRateKeys[] = {"teacher_acc",          "teacher_asr",          "baseline_student_acc",
                                     "baseline_student_asr", "defended_student_acc", "defended_student_asr"};

double* rate_field(ExperimentReport& r, std::size_t i) {
  double* fields[] = {&r.teacher_acc,          &r.teacher_asr,          &r.baseline_student_acc,
                      &r.baseline_student_asr, &r.defended_student_acc, &r.defended_student_asr};
  return fields[i];
}

}  // namespace

double accuracy(const Network& net, const Dataset& data) {
  data.validate();
  const auto pred = argmax_rows(predict_logits(net, data.images));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.labels[i];
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

double attack_success_rate(const Network& net, const Dataset& clean_test, const TriggerSpec& trigger) {
  clean_test.validate();
  trigger.validate(clean_test.image_shape(), clean_test.num_classes);
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < clean_test.size(); ++i)
    if (clean_test.labels[i] != trigger.target_label) rows.push_back(i);
  if (rows.empty()) throw ValidationError("attack_success_rate: no non-target examples to patch");
  const Tensor patched = apply_trigger_batch(clean_test.images.gather_rows(rows), trigger);
  const auto pred = argmax_rows(predict_logits(net, patched));
  const auto hits = std::count(pred.begin(), pred.end(), trigger.target_label);
  return static_cast<double>(hits) / static_cast<double>(rows.size());
}

std::vector<double> per_example_variance(const Tensor& features) {
  if (features.rank() < 2) throw ValidationError("per_example_variance expects a batch");
  const std::size_t b = features.dim(0), n = features.row_size();
  std::vector<double> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    const double* x = features.data().data() + i * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += x[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (x[j] - mean) * (x[j] - mean);
    out[i] = var / static_cast<double>(n);
  }
  return out;
}

std::map<std::string, double> variance_profile(const Network& net, const Dataset& examples, std::size_t sample_count,
                                               std::uint64_t seed, const TapOverride* override) {
  if (sample_count < 1) throw ValidationError("variance_profile needs at least one sample");
  examples.validate();
  std::vector<std::size_t> idx(examples.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(sample_count, idx.size()));
  const auto fr = forward(net, examples.images.gather_rows(idx), override);
  std::map<std::string, double> out;
  for (const auto& [tap, feats] : fr.taps) {
    const auto v = per_example_variance(feats);
    out[tap] = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  }
  return out;
}

std::string format_shortest(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string format_rate(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

void ExperimentReport::validate() const {
  ExperimentReport copy = *this;
  for (std::size_t i = 0; i < 6; ++i) {
    const double v = *rate_field(copy, i);
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError(std::string("report rate ") + kRateKeys[i] + " outside [0,1]");
  }
  for (const auto& [k, v] : extras)
    if (v.find('\n') != std::string::npos || k.find('=') != std::string::npos)
      throw ValidationError("report extra '" + k + "' is not single-line key/value");
}

ExperimentReport quantize_rates(ExperimentReport report) {
  for (std::size_t i = 0; i < 6; ++i) {
    double* f = rate_field(report, i);
    *f = std::stod(format_rate(*f));
  }
  return report;
}

std::string render_report(const ExperimentReport& r) {
  r.validate();
  std::ostringstream os;
  os << "# robustkd experiment report\n";
  os << "seed = " << r.seed << '\n';
  os << "config_digest = " << r.config_digest << '\n';
  ExperimentReport copy = r;
  for (std::size_t i = 0; i < 6; ++i) os << kRateKeys[i] << " = " << format_rate(*rate_field(copy, i)) << '\n';
  for (const auto& [model, taps] : r.variance_profile) {
    os << "\n[variance." << model << "]\n";
    for (const auto& [tap, v] : taps) os << tap << " = " << format_shortest(v) << '\n';
  }
  if (!r.extras.empty()) {
    os << "\n[extras]\n";
    for (const auto& [k, v] : r.extras) os << k << " = " << v << '\n';
  }
  return os.str();
}

ExperimentReport parse_report(const std::string& text) {
  ExperimentReport r;
  std::istringstream is(text);
  std::string line, section;
  std::size_t rates_seen = 0;
  while (std::getline(is, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    if (line.front() == '[' && line.back() == ']') {
      section = line.substr(1, line.size() - 2);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError("report: malformed line '" + line + "'");
    const auto key = trim(line.substr(0, eq));
    const auto val = trim(line.substr(eq + 1));
    if (section.empty()) {
      if (key == "seed") {
        r.seed = std::stoull(val);
      } else if (key == "config_digest") {
        r.config_digest = val;
      } else {
        bool found = false;
        for (std::size_t i = 0; i < 6; ++i)
          if (key == kRateKeys[i]) {
            *rate_field(r, i) = parse_double(val, key);
            found = true;
            ++rates_seen;
          }
        if (!found) throw ValidationError("report: unknown key '" + key + "'");
      }
    } else if (section.rfind("variance.", 0) == 0) {
      r.variance_profile[section.substr(9)][key] = parse_double(val, key);
    } else if (section == "extras") {
      r.extras[key] = val;
    } else {
      throw ValidationError("report: unknown section '" + section + "'");
    }
  }
  if (rates_seen != 6) throw ValidationError("report: missing rate fields");
  r.validate();
  return r;
}

std::string render_rows_csv(const std::vector<ModelRow>& rows) {
  std::ostringstream os;
  os << "tag,acc,asr,last_tap_variance\n";
  for (const auto& row : rows)
    os << row.tag << ',' << format_rate(row.acc) << ',' << format_rate(row.asr) << ','
       << format_shortest(row.last_tap_variance) << '\n';
  return os.str();
}

void emit_report(const ExperimentReport& report, const std::string& path, ReportFormat format,
                 const std::vector<ModelRow>& rows) {
  const std::string text = format == ReportFormat::key_value ? render_report(report) : render_rows_csv(rows);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw RuntimeFailure("cannot open '" + path + "' for writing");
  f << text;
  if (!f) throw RuntimeFailure("failed writing report '" + path + "'");
}

ExperimentReport read_report(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot open report '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_report(ss.str());
}

}  // namespace robustkd
