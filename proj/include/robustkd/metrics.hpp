#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "robustkd/data.hpp"
#include "robustkd/network.hpp"

namespace robustkd {

/// Fraction of examples whose argmax prediction equals the label.
double accuracy(const Network& net, const Dataset& data);

/// Fraction of trigger-patched, non-target-class examples predicted as the
/// target. Target-class examples are excluded from the denominator.
double attack_success_rate(const Network& net, const Dataset& clean_test, const TriggerSpec& trigger);

/// Population variance over all elements of each row of a (b, ...) tensor.
std::vector<double> per_example_variance(const Tensor& features);

/// Per tap: mean per-example feature variance over `sample_count` examples drawn
/// without replacement with the given seed. With an override the taps are
/// measured after it is applied.
std::map<std::string, double> variance_profile(const Network& net, const Dataset& examples, std::size_t sample_count,
                                               std::uint64_t seed, const TapOverride* override = nullptr);

enum class ReportFormat { key_value, csv };

struct ModelRow {
  std::string tag;
  double acc = 0.0;
  double asr = 0.0;
  double last_tap_variance = 0.0;
};

struct ExperimentReport {
  double teacher_acc = 0.0;
  double teacher_asr = 0.0;
  double baseline_student_acc = 0.0;
  double baseline_student_asr = 0.0;
  double defended_student_acc = 0.0;
  double defended_student_asr = 0.0;
  /// model tag -> tap -> mean variance.
  std::map<std::string, std::map<std::string, double>> variance_profile;
  std::map<std::string, std::string> extras;
  std::string config_digest;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const ExperimentReport&, const ExperimentReport&) = default;
};

/// Renders rates with four decimals and variances in shortest round-trip form.
std::string render_report(const ExperimentReport& report);
ExperimentReport parse_report(const std::string& text);

/// Rates rounded to the four decimals the text form carries.
ExperimentReport quantize_rates(ExperimentReport report);

std::string render_rows_csv(const std::vector<ModelRow>& rows);

void emit_report(const ExperimentReport& report, const std::string& path, ReportFormat format = ReportFormat::key_value,
                 const std::vector<ModelRow>& rows = {});
ExperimentReport read_report(const std::string& path);

std::string format_rate(double v);
/// Shortest text that parses back to exactly v.
std::string format_shortest(double v);

}  // namespace robustkd
