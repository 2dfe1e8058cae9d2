#pragma once

#include <cstdint>
#include <string>

#include "robustkd/attacks.hpp"
#include "robustkd/data.hpp"
#include "robustkd/detox.hpp"
#include "robustkd/distill.hpp"
#include "robustkd/network.hpp"
#include "robustkd/train.hpp"

namespace robustkd {

/// Architecture selector. For "mlp" the widths are hidden units, for "cnn"
/// they are channel counts.
struct ArchSpec {
  std::string kind = "mlp";
  std::size_t width1 = 128;
  std::size_t width2 = 64;

  Network build(const Shape& input_shape, std::size_t num_classes, std::uint64_t seed) const;
};

struct DataSection {
  /// When both paths are set the datasets are loaded instead of generated.
  std::string train_path;
  std::string test_path;
  BlobParams blobs;
};

struct AttackSection {
  AttackConfig attack;
  std::size_t trigger_size = 3;
  std::size_t target_label = 0;
  double blend = 1.0;

  TriggerSpec trigger(const Shape& image_shape) const;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string output_dir = "robustkd_out";
  DataSection data;
  ArchSpec teacher;
  ArchSpec student{"mlp", 64, 32};
  TrainOptions teacher_training;
  AttackSection attack;
  DistillConfig distill;
  DefenseConfig defense;
};

/// Defaults with the seed propagated and the standard tap pairs filled in.
ExperimentConfig default_config();

/// INI text with sections experiment, data, teacher, student, attack, distill
/// and defense. Missing keys keep their defaults; unknown keys are rejected.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);

/// Fully populated INI rendering; parse_config(render_config(c)) reproduces c.
std::string render_config(const ExperimentConfig& config);

/// First 16 hex digits of the SHA-256 of render_config.
std::string config_digest(const ExperimentConfig& config);

/// Loaded datasets when both paths are set, generated blobs otherwise.
DataSplits make_data(const ExperimentConfig& config);

/// Teachers (clean control included) are initialised from the seed itself,
/// students from this offset seed.
std::uint64_t student_init_seed(const ExperimentConfig& config);

/// Overrides the top-level seed and every seed derived from it.
void set_seed(ExperimentConfig& config, std::uint64_t seed);

/// Checks every cross-reference (tap names, shapes, trigger placement, ranges)
/// by building the networks. Throws ValidationError.
void validate_config(const ExperimentConfig& config);

}  // namespace robustkd
