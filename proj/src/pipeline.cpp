#include "robustkd/pipeline.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

namespace robustkd {

namespace fs = std::filesystem;

namespace {

template <class F>
auto stage(const std::string& name, F&& body) {
  try {
    return body();
  } catch (const ValidationError& e) {
    throw ValidationError("stage '" + name + "': " + e.what());
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw RuntimeFailure("cannot open '" + path.string() + "' for writing");
  f << text;
  if (!f) throw RuntimeFailure("failed writing '" + path.string() + "'");
}

fs::path prepare_output(const ExperimentConfig& config) {
  const fs::path dir(config.output_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw RuntimeFailure("cannot create output directory '" + dir.string() + "': " + ec.message());
  write_text(dir / kConfigFile, render_config(config));
  return dir;
}

TriggerSpec trigger_for(const ExperimentConfig& config, const DataSplits& data) {
  return config.attack.trigger(data.train.image_shape());
}

std::map<std::string, double> profile(const Network& net, const ExperimentConfig& config, const DataSplits& data,
                                      const TapOverride* override = nullptr) {
  return variance_profile(net, data.test, kVarianceSamples, config.seed, override);
}

std::string search_summary(const std::vector<SearchPoint>& history) {
  std::string out;
  for (const auto& p : history) {
    if (!out.empty()) out += "; ";
    out += format_shortest(p.m) + ":" + format_rate(p.acc) + "/" + format_rate(p.asr);
  }
  return out;
}

// Teacher-side figures shared by every report of a run.
struct TeacherStage {
  AttackOutcome attack;
  ModelRow row;
  std::map<std::string, double> profile;
};

struct BaselineStage {
  Network student;
  ModelRow row;
  std::map<std::string, double> profile;
};

void fill_defense(ExperimentReport& report, std::vector<ModelRow>& rows, const DetoxResult& defense,
                  const Network& teacher, const ExperimentConfig& config, const DataSplits& data) {
  const ModelRow row = evaluate_model("defended_student", defense.student, config, data);
  report.defended_student_acc = row.acc;
  report.defended_student_asr = row.asr;
  report.variance_profile["defended_student"] = profile(defense.student, config, data);
  const TapOverride masked = mask_override(defense.mask);
  report.variance_profile["detoxified_teacher"] = profile(teacher, config, data, &masked);
  report.extras["selected_m"] = format_shortest(defense.converged_m);
  report.extras["defense_ineffective"] = defense.defense_ineffective ? "true" : "false";
  report.extras["search_converged_early"] = defense.converged_early ? "true" : "false";
  report.extras["search"] = search_summary(defense.history);
  rows.push_back(row);
}

}  // namespace

Network train_clean_teacher(const ExperimentConfig& config, const DataSplits& data) {
  const Network init = config.teacher.build(data.train.image_shape(), data.train.num_classes, config.seed);
  return train_classifier(init, data.train, config.teacher_training);
}

AttackOutcome train_attacked_teacher(const ExperimentConfig& config, const DataSplits& data) {
  const Network init = config.teacher.build(data.train.image_shape(), data.train.num_classes, config.seed);
  AttackConfig attack = config.attack.attack;
  attack.trigger = trigger_for(config, data);
  return train_backdoored_teacher(init, data.train, attack, config.teacher_training, &data.test);
}

DistillOutcome distill_baseline(const ExperimentConfig& config, const Network& teacher, const DataSplits& data) {
  const Network init =
      config.student.build(data.train.image_shape(), data.train.num_classes, student_init_seed(config));
  return distill_student(teacher, init, data.train, config.distill);
}

DetoxResult defend_teacher(const ExperimentConfig& config, const Network& teacher, const DataSplits& data) {
  if (teacher.tap_order().empty()) throw ValidationError("defend: teacher has no taps to detoxify");
  const Network init =
      config.student.build(data.train.image_shape(), data.train.num_classes, student_init_seed(config));
  return robustkd_distill(teacher, init, data.train, trigger_for(config, data), config.distill, config.defense);
}

ModelRow evaluate_model(const std::string& tag, const Network& net, const ExperimentConfig& config,
                        const DataSplits& data) {
  ModelRow row;
  row.tag = tag;
  row.acc = accuracy(net, data.test);
  row.asr = attack_success_rate(net, data.test, trigger_for(config, data));
  const auto taps = net.tap_order();
  if (!taps.empty()) row.last_tap_variance = profile(net, config, data).at(taps.back());
  return row;
}

std::string render_search_csv(const std::vector<SearchPoint>& history) {
  std::ostringstream os;
  os << "m,acc,asr,loss_f,loss_ce\n";
  for (const auto& p : history)
    os << format_shortest(p.m) << ',' << format_rate(p.acc) << ',' << format_rate(p.asr) << ','
       << format_shortest(p.loss_f) << ',' << format_shortest(p.loss_ce) << '\n';
  return os.str();
}

namespace {

TeacherStage run_teacher_stage(const ExperimentConfig& config, const DataSplits& data, const fs::path* dir) {
  TeacherStage t;
  t.attack = stage("attack", [&] { return train_attacked_teacher(config, data); });
  if (dir) save_network(t.attack.teacher, (*dir / kTeacherFile).string());
  t.row = evaluate_model("teacher", t.attack.teacher, config, data);
  t.profile = profile(t.attack.teacher, config, data);
  return t;
}

BaselineStage run_baseline_stage(const ExperimentConfig& config, const DataSplits& data, const Network& teacher,
                                 const fs::path* dir) {
  BaselineStage b;
  b.student = stage("distill", [&] { return distill_baseline(config, teacher, data).student; });
  if (dir) save_network(b.student, (*dir / kBaselineStudentFile).string());
  b.row = evaluate_model("baseline_student", b.student, config, data);
  b.profile = profile(b.student, config, data);
  return b;
}

ExperimentReport base_report(const ExperimentConfig& config, const TeacherStage& t, const BaselineStage& b) {
  ExperimentReport r;
  r.seed = config.seed;
  r.config_digest = config_digest(config);
  r.teacher_acc = t.row.acc;
  r.teacher_asr = t.row.asr;
  r.baseline_student_acc = b.row.acc;
  r.baseline_student_asr = b.row.asr;
  r.variance_profile["teacher"] = t.profile;
  r.variance_profile["baseline_student"] = b.profile;
  r.extras["attack_kind"] = to_string(config.attack.attack.kind);
  r.extras["teacher_status"] = t.attack.status;
  return r;
}

}  // namespace

PipelineResult run_pipeline(const ExperimentConfig& config, bool write_artifacts) {
  stage("validate", [&] {
    validate_config(config);
    return 0;
  });
  const fs::path dir = write_artifacts ? prepare_output(config) : fs::path();
  const fs::path* out = write_artifacts ? &dir : nullptr;
  const DataSplits data = stage("data", [&] { return make_data(config); });

  PipelineResult result;
  const Network clean = stage("train-teacher", [&] { return train_clean_teacher(config, data); });
  if (out) save_network(clean, (dir / kCleanTeacherFile).string());
  const ModelRow clean_row = evaluate_model("clean_teacher", clean, config, data);
  const auto clean_profile = profile(clean, config, data);

  const TeacherStage t = run_teacher_stage(config, data, out);
  const BaselineStage b = run_baseline_stage(config, data, t.attack.teacher, out);
  result.defense = stage("defend", [&] { return defend_teacher(config, t.attack.teacher, data); });
  if (out) {
    save_network(result.defense.student, (dir / kDefendedStudentFile).string());
    write_text(dir / kSearchFile, render_search_csv(result.defense.history));
  }

  ExperimentReport& r = result.report;
  r = base_report(config, t, b);
  r.variance_profile["clean_teacher"] = clean_profile;
  r.extras["clean_teacher_acc"] = format_rate(clean_row.acc);
  r.extras["clean_teacher_asr"] = format_rate(clean_row.asr);
  const std::string last = t.attack.teacher.last_tap();
  r.extras["variance_ratio"] = format_shortest(t.profile.at(last) / clean_profile.at(last));
  result.rows = {clean_row, t.row, b.row};
  fill_defense(r, result.rows, result.defense, t.attack.teacher, config, data);
  r = quantize_rates(r);

  if (out) {
    emit_report(r, (dir / kReportFile).string());
    emit_report(r, (dir / kModelsFile).string(), ReportFormat::csv, result.rows);
  }
  return result;
}

std::string to_string(AblationAxis axis) {
  switch (axis) {
    case AblationAxis::m_threshold:
      return "m_threshold";
    case AblationAxis::loss_terms:
      return "loss_terms";
    case AblationAxis::tap_subsets:
      return "tap_subsets";
    case AblationAxis::mask_variant:
      return "mask_variant";
  }
  return "?";
}

AblationAxis ablation_axis_from_string(const std::string& s) {
  for (auto a : {AblationAxis::m_threshold, AblationAxis::loss_terms, AblationAxis::tap_subsets,
                 AblationAxis::mask_variant})
    if (to_string(a) == s) return a;
  throw ValidationError("unknown ablation axis '" + s +
                        "' (expected m_threshold, loss_terms, tap_subsets or mask_variant)");
}

AblationResult run_ablation(const ExperimentConfig& config, AblationAxis axis, bool write_artifacts) {
  stage("validate", [&] {
    validate_config(config);
    return 0;
  });
  const fs::path dir = write_artifacts ? prepare_output(config) : fs::path();
  const fs::path* out = write_artifacts ? &dir : nullptr;
  const DataSplits data = stage("data", [&] { return make_data(config); });
  const TeacherStage t = run_teacher_stage(config, data, out);
  const BaselineStage b = run_baseline_stage(config, data, t.attack.teacher, out);

  std::vector<std::pair<std::string, ExperimentConfig>> points;
  switch (axis) {
    case AblationAxis::m_threshold:
      for (double m : config.defense.m_schedule) {
        ExperimentConfig c = config;
        c.defense.m_schedule = {m};
        points.emplace_back("m=" + format_shortest(m), c);
      }
      break;
    case AblationAxis::loss_terms:
      for (auto terms : {DetoxLossTerms::ce_and_variance, DetoxLossTerms::ce_only, DetoxLossTerms::variance_only}) {
        ExperimentConfig c = config;
        c.defense.optim.terms = terms;
        points.emplace_back(to_string(terms), c);
      }
      break;
    case AblationAxis::tap_subsets: {
      ExperimentConfig all = config;
      all.defense.masked_taps.clear();
      points.emplace_back("all", all);
      for (const auto& tap : t.attack.teacher.tap_order()) {
        ExperimentConfig c = config;
        c.defense.masked_taps = {tap};
        points.emplace_back(tap, c);
      }
      break;
    }
    case AblationAxis::mask_variant:
      for (auto v : {MaskVariant::additive, MaskVariant::convex}) {
        ExperimentConfig c = config;
        c.defense.variant = v;
        points.emplace_back(to_string(v), c);
      }
      break;
  }

  AblationResult result;
  result.axis = axis;
  std::vector<ModelRow> table;
  for (const auto& [label, c] : points) {
    const DetoxResult defense = stage("defend " + label, [&] { return defend_teacher(c, t.attack.teacher, data); });
    AblationPoint p;
    p.label = label;
    p.report = base_report(c, t, b);
    std::vector<ModelRow> rows;
    fill_defense(p.report, rows, defense, t.attack.teacher, c, data);
    p.report.extras["ablation"] = to_string(axis) + " " + label;
    p.report = quantize_rates(p.report);
    rows.back().tag = label;
    table.push_back(rows.back());
    if (out) {
      std::string file = "ablation_" + to_string(axis) + "_" + label + ".txt";
      for (auto& ch : file)
        if (ch == '=') ch = '_';
      emit_report(p.report, (dir / file).string());
    }
    result.points.push_back(std::move(p));
  }
  result.table = render_rows_csv(table);

  const auto asr = [&](std::size_t i) { return result.points[i].report.defended_student_asr; };
  const auto acc_drop = [&](std::size_t i) {
    return result.points[i].report.baseline_student_acc - result.points[i].report.defended_student_acc;
  };
  switch (axis) {
    case AblationAxis::m_threshold: {
      bool nondecreasing = true;
      for (std::size_t i = 1; i < result.points.size(); ++i) nondecreasing = nondecreasing && asr(i) >= asr(i - 1);
      result.checks["asr_nondecreasing_in_m"] = nondecreasing;
      break;
    }
    case AblationAxis::loss_terms:
      result.checks["variance_only_acc_drop_at_least_combined"] = acc_drop(2) >= acc_drop(0);
      break;
    case AblationAxis::tap_subsets:
      result.checks["all_taps_asr_below_last_tap"] = asr(0) < asr(result.points.size() - 1);
      break;
    case AblationAxis::mask_variant:
      result.checks["additive_asr_not_above_convex"] = asr(0) <= asr(1);
      break;
  }
  if (out) {
    write_text(dir / ("ablation_" + to_string(axis) + ".csv"), result.table);
    std::string checks;
    for (const auto& [name, ok] : result.checks) checks += name + " = " + (ok ? "true" : "false") + '\n';
    write_text(dir / ("ablation_" + to_string(axis) + "_checks.txt"), checks);
  }
  return result;
}

}  // namespace robustkd
