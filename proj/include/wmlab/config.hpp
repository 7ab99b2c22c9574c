#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "wmlab/attacks.hpp"
#include "wmlab/embedders.hpp"
#include "wmlab/landscape.hpp"
#include "wmlab/watermark.hpp"

namespace wmlab {

inline constexpr int kConfigSchemaVersion = 1;

enum class DatasetSource { Builtin, Idx, ImageDir };

struct DatasetConfig {
  DatasetSource source = DatasetSource::Builtin;
  // builtin
  std::size_t samples = 20000;  // owner + attacker pool
  std::size_t test_samples = 1000;
  std::size_t image_size = 16;
  std::size_t num_classes = 10;
  double noise = 0.1;
  // idx
  std::string train_images, train_labels, test_images, test_labels;
  // image_dir
  std::string train_dir, test_dir;
};

struct LandscapeConfig {
  GridSpec grid;
  FinetuneDirectionOptions ft;
};

struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;
  std::uint64_t seed = 0;
  std::string output_dir = "run";
  DatasetConfig dataset;
  double owner_fraction = 0.8;
  double attacker_fraction = 0.2;
  std::string architecture = "tinycnn";
  WatermarkSpec watermark;
  double watermark_fraction = 0.01;
  TrainPlan train;
  std::vector<AttackPlan> attacks;
  LandscapeConfig landscape;

  /// Re-derives every stage seed from `seed`.
  void apply_seed(std::uint64_t s);
  void validate() const;
};

/// Stage seed derived from the global seed and a stage tag.
std::uint64_t derive_seed(std::uint64_t global, const std::string& tag);

/// Parses a config document. Missing fields take defaults; unknown fields and
/// invalid values raise ConfigError naming the field path (e.g. `train.alpha`).
ExperimentConfig parse_config(const nlohmann::json& doc);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Canonical serialization (every field, resolved defaults, derived seeds).
nlohmann::json to_json(const ExperimentConfig& cfg);

}  // namespace wmlab
