#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "robustkd/config.hpp"
#include "robustkd/metrics.hpp"

namespace robustkd {

/// A pipeline stage failed; `stage` names it.
class StageError : public RuntimeFailure {
 public:
  StageError(std::string stage, const std::string& what)
      : RuntimeFailure("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

// Checkpoint and report names inside the output directory.
inline constexpr const char* kCleanTeacherFile = "clean_teacher.rkdnet";
inline constexpr const char* kTeacherFile = "teacher.rkdnet";
inline constexpr const char* kBaselineStudentFile = "baseline_student.rkdnet";
inline constexpr const char* kDefendedStudentFile = "defended_student.rkdnet";
inline constexpr const char* kReportFile = "report.txt";
inline constexpr const char* kModelsFile = "models.csv";
inline constexpr const char* kSearchFile = "search.csv";
inline constexpr const char* kConfigFile = "config.ini";

/// Number of held-out examples behind every variance figure.
inline constexpr std::size_t kVarianceSamples = 100;

// Individual stages, shared by the pipeline and the CLI subcommands.
Network train_clean_teacher(const ExperimentConfig& config, const DataSplits& data);
AttackOutcome train_attacked_teacher(const ExperimentConfig& config, const DataSplits& data);
DistillOutcome distill_baseline(const ExperimentConfig& config, const Network& teacher, const DataSplits& data);
DetoxResult defend_teacher(const ExperimentConfig& config, const Network& teacher, const DataSplits& data);

/// ACC and ASR on the test split and the mean last-tap variance.
ModelRow evaluate_model(const std::string& tag, const Network& net, const ExperimentConfig& config,
                        const DataSplits& data);

/// m, acc, asr, loss_f, loss_ce per evaluated candidate.
std::string render_search_csv(const std::vector<SearchPoint>& history);

struct PipelineResult {
  ExperimentReport report;
  std::vector<ModelRow> rows;
  DetoxResult defense;
};

/// Clean control, backdoored teacher, baseline student and defended student.
/// With write_artifacts the checkpoints, report, model table and search trace
/// land in config.output_dir as each stage completes.
PipelineResult run_pipeline(const ExperimentConfig& config, bool write_artifacts = true);

enum class AblationAxis { m_threshold, loss_terms, tap_subsets, mask_variant };
std::string to_string(AblationAxis axis);
AblationAxis ablation_axis_from_string(const std::string& s);

struct AblationPoint {
  std::string label;
  ExperimentReport report;
};

struct AblationResult {
  AblationAxis axis = AblationAxis::m_threshold;
  std::vector<AblationPoint> points;
  /// tag,acc,asr,last_tap_variance rows of the defended students.
  std::string table;
  /// Named pass/fail observations for the axis (trend checks).
  std::map<std::string, bool> checks;
};

/// One defended student per ablation point; teacher and baseline are shared.
/// Points: each m of the schedule (fixed, no search); each loss-term set; all
/// taps then every single tap; both mask variants.
AblationResult run_ablation(const ExperimentConfig& config, AblationAxis axis, bool write_artifacts = true);

}  // namespace robustkd
