#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "wmlab/attacks.hpp"
#include "wmlab/config.hpp"
#include "wmlab/embedders.hpp"
#include "wmlab/landscape.hpp"
#include "wmlab/watermark.hpp"

namespace wmlab {

inline constexpr const char* kSoftwareVersion = "0.1.0";

/// Every dataset an experiment touches, derived from the config and its seed.
struct PreparedData {
  LabeledDataset holdout;  // AttackerHoldout
  LabeledDataset test;     // Test
  WatermarkedSplit wm;     // owner data: clean_part + watermarked wm_part
  LabeledDataset wm_test;  // watermarked test images, original labels
  // Row ids of each split in the source pool (builtin) or the source files
  // (owner/holdout index the training file, test the test file).
  std::vector<std::size_t> owner_ids, holdout_ids, test_ids;
  bool shared_pool = false;  // all three index one generated pool
};

PreparedData prepare_data(const ExperimentConfig& cfg);

struct Artifact {
  std::string path;  // relative to the manifest directory
  std::string sha256;
};

struct StageRecord {
  std::string stage;
  std::string started;
  std::string finished;
  std::vector<Artifact> artifacts;
  nlohmann::json results = nlohmann::json::object();
};

struct RunManifest {
  std::string config_hash;
  std::string software_version = kSoftwareVersion;
  std::vector<StageRecord> stages;

  const StageRecord* find(const std::string& stage) const;
  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
};

/// sha256 of the canonical config serialization.
std::string config_hash(const ExperimentConfig& cfg);

/// Reads `dir`/manifest.json when its config hash matches, else starts fresh.
RunManifest open_manifest(const std::filesystem::path& dir, const ExperimentConfig& cfg);
/// Replaces (or appends) the record for `rec.stage` and rewrites the file.
void record_stage(const std::filesystem::path& dir, RunManifest& manifest, StageRecord rec);
/// IntegrityError unless every listed artifact exists with its checksum.
void verify_manifest(const std::filesystem::path& dir, const RunManifest& manifest);

struct TrainOutcome {
  ModelState model;
  TrainReport report;
  double wsr = 0.0;
  double ba = 0.0;
  std::filesystem::path checkpoint;
};

/// Trains the configured embedder; writes model.wmck (+ sidecar),
/// train_report.csv, config.json and the manifest entry.
TrainOutcome cmd_train(const ExperimentConfig& cfg, const std::filesystem::path& out);

struct AttackOutcome {
  AttackPlan plan;
  AttackReport report;
  std::filesystem::path checkpoint;
  std::filesystem::path csv;
};

/// Runs every configured attack on a fresh copy of the verified checkpoint.
std::vector<AttackOutcome> cmd_attack(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
                                      const std::filesystem::path& out);

/// Eval-mode metrics of a checkpoint on the configured test data; writes
/// metrics.json and returns its content.
nlohmann::json cmd_evaluate(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
                            const std::filesystem::path& out);

/// Vicinity scan of a checkpoint; writes landscape.csv, landscape.json and
/// embeddings.csv. NumericError when the origin cell deviates from the
/// directly measured WSR or BA by more than `origin_tolerance`.
LandscapeGrid cmd_landscape(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
                            const std::filesystem::path& out, double origin_tolerance = 0.005);

struct ReportRow {
  std::string embedder;
  std::string attack;  // empty when the run has no attacks
  double wsr_before = 0.0;
  double wsr_after = 0.0;
  double ba_before = 0.0;
  double ba_after = 0.0;
  double avg_drop = 0.0;  // mean over the run's attacks of (before - after)
};

/// Summary rows from one or more run manifests.
std::vector<ReportRow> summarize(const std::vector<std::filesystem::path>& manifests);
/// CSV `embedder,attack,wsr_before,wsr_after,ba_before,ba_after,avg_drop`;
/// after/drop columns stay empty for runs without attacks.
std::string report_csv(const std::vector<ReportRow>& rows);
/// summarize + report_csv, written to `out`/summary.csv.
std::string cmd_report(const std::vector<std::filesystem::path>& manifests, const std::filesystem::path& out);

/// 0 success, 2 config error, 3 numeric/training failure, 4 integrity failure, 1 anything else.
int exit_code_for(const std::exception& e);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace wmlab
