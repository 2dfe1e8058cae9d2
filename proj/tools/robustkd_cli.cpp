#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>

#include "robustkd/pipeline.hpp"

namespace fs = std::filesystem;
using namespace robustkd;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "experiment config (INI)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "overrides experiment.seed");
  cmd->add_option("--out", c.out, "overrides experiment.output_dir");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config_path.empty() ? default_config() : load_config(c.config_path);
  if (c.seed) set_seed(cfg, *c.seed);
  if (!c.out.empty()) cfg.output_dir = c.out;
  validate_config(cfg);
  return cfg;
}

fs::path output_dir(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.output_dir);
  return cfg.output_dir;
}

std::string in_out(const std::string& given, const ExperimentConfig& cfg, const char* fallback) {
  return given.empty() ? (fs::path(cfg.output_dir) / fallback).string() : given;
}

void print_row(const ModelRow& row) {
  std::cout << render_rows_csv({row});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Backdoor-robust knowledge distillation toolkit"};
  app.require_subcommand(1);

  Common common;
  std::string teacher_path, model_path, tag = "model", axis = "m_threshold";

  auto* run = app.add_subcommand("run", "full pipeline: control, attack, baseline, defense, report");
  auto* train = app.add_subcommand("train-teacher", "train the clean control teacher");
  auto* attack = app.add_subcommand("attack", "train the backdoored teacher");
  auto* distill = app.add_subcommand("distill", "baseline feature distillation from a teacher checkpoint");
  auto* defend = app.add_subcommand("defend", "detoxified distillation from a teacher checkpoint");
  auto* evaluate = app.add_subcommand("evaluate", "ACC, ASR and last-tap variance of a checkpoint");
  auto* ablate = app.add_subcommand("ablate", "defense ablation along one axis");
  auto* show = app.add_subcommand("show-config", "print the fully populated config after overrides");
  for (auto* cmd : {run, train, attack, distill, defend, evaluate, ablate, show}) add_common(cmd, common);
  for (auto* cmd : {distill, defend})
    cmd->add_option("--teacher", teacher_path, "teacher checkpoint (default <out>/teacher.rkdnet)");
  evaluate->add_option("--model", model_path, "checkpoint to evaluate")->required();
  evaluate->add_option("--tag", tag, "row label");
  ablate->add_option("--axis", axis, "m_threshold, loss_terms, tap_subsets or mask_variant");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    const ExperimentConfig cfg = resolve(common);
    if (show->parsed()) {
      std::cout << render_config(cfg);
    } else if (run->parsed()) {
      const auto result = run_pipeline(cfg);
      std::cout << render_report(result.report);
    } else if (train->parsed()) {
      const DataSplits data = make_data(cfg);
      const Network net = train_clean_teacher(cfg, data);
      save_network(net, (output_dir(cfg) / kCleanTeacherFile).string());
      print_row(evaluate_model("clean_teacher", net, cfg, data));
    } else if (attack->parsed()) {
      const DataSplits data = make_data(cfg);
      const AttackOutcome out = train_attacked_teacher(cfg, data);
      save_network(out.teacher, (output_dir(cfg) / kTeacherFile).string());
      print_row(evaluate_model("teacher", out.teacher, cfg, data));
      if (out.status != "ok") std::cerr << "warning: attack status " << out.status << '\n';
    } else if (distill->parsed()) {
      const Network teacher = load_network(in_out(teacher_path, cfg, kTeacherFile));
      const DataSplits data = make_data(cfg);
      const DistillOutcome out = distill_baseline(cfg, teacher, data);
      save_network(out.student, (output_dir(cfg) / kBaselineStudentFile).string());
      print_row(evaluate_model("baseline_student", out.student, cfg, data));
    } else if (defend->parsed()) {
      const Network teacher = load_network(in_out(teacher_path, cfg, kTeacherFile));
      const DataSplits data = make_data(cfg);
      const DetoxResult out = defend_teacher(cfg, teacher, data);
      const fs::path dir = output_dir(cfg);
      save_network(out.student, (dir / kDefendedStudentFile).string());
      const std::string search = render_search_csv(out.history);
      std::FILE* f = std::fopen((dir / kSearchFile).c_str(), "wb");
      if (!f) throw RuntimeFailure("cannot write search trace");
      std::fputs(search.c_str(), f);
      std::fclose(f);
      std::cout << search;
      print_row(evaluate_model("defended_student", out.student, cfg, data));
      if (out.defense_ineffective) std::cerr << "warning: no threshold lowered the ASR below the teacher's\n";
    } else if (evaluate->parsed()) {
      const Network net = load_network(model_path);
      const DataSplits data = make_data(cfg);
      print_row(evaluate_model(tag, net, cfg, data));
    } else if (ablate->parsed()) {
      const auto result = run_ablation(cfg, ablation_axis_from_string(axis));
      std::cout << result.table;
      for (const auto& [name, ok] : result.checks) std::cout << name << " = " << (ok ? "true" : "false") << '\n';
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
