#include "wmlab/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "wmlab/checkpoint.hpp"
#include "wmlab/checksum.hpp"
#include "wmlab/errors.hpp"

namespace wmlab {

namespace fs = std::filesystem;
using nlohmann::json;

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw ConfigError("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IntegrityError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

namespace {

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::vector<std::size_t> pick(const std::vector<std::size_t>& pool, const std::vector<std::size_t>& positions) {
  std::vector<std::size_t> out;
  out.reserve(positions.size());
  for (auto p : positions) out.push_back(pool[p]);
  return out;
}

std::size_t infer_classes(const std::vector<int>& a, const std::vector<int>& b) {
  int mx = -1;
  for (int v : a) mx = std::max(mx, v);
  for (int v : b) mx = std::max(mx, v);
  if (mx < 1) throw ConfigError("dataset: labels must cover at least two classes");
  return static_cast<std::size_t>(mx) + 1;
}

LabeledDataset labeled(Tensor images, std::vector<int> labels, std::size_t k, DatasetRole role, const std::string& what) {
  if (images.dim(0) != labels.size())
    throw ConfigError("dataset: " + what + " has " + std::to_string(images.dim(0)) + " images but " +
                      std::to_string(labels.size()) + " labels");
  for (int l : labels)
    if (l < 0) throw ConfigError("dataset: " + what + " contains unlabeled images");
  LabeledDataset d{std::move(images), std::move(labels), role, k};
  d.validate();
  return d;
}

Artifact artifact(const fs::path& dir, const fs::path& file) {
  return {fs::relative(file, dir).generic_string(), sha256_file(file)};
}

}  // namespace

PreparedData prepare_data(const ExperimentConfig& cfg) {
  PreparedData out;
  const auto& d = cfg.dataset;
  LabeledDataset train_src, test_src;
  std::size_t k = 0;
  switch (d.source) {
    case DatasetSource::Builtin: {
      ShapesConfig sc;
      sc.num_classes = d.num_classes;
      sc.image_size = d.image_size;
      sc.samples = d.samples + d.test_samples;
      sc.noise = d.noise;
      sc.seed = derive_seed(cfg.seed, "dataset");
      const auto pool = make_shapes_dataset(sc);
      const auto tt = split_indices(pool.size(), static_cast<double>(d.test_samples) / static_cast<double>(pool.size()),
                                    derive_seed(cfg.seed, "test-split"));
      out.test_ids = tt.first;
      const auto oh = split_indices(tt.second.size(), cfg.owner_fraction, derive_seed(cfg.seed, "split"));
      out.owner_ids = pick(tt.second, oh.first);
      out.holdout_ids = pick(tt.second, oh.second);
      out.shared_pool = true;
      k = d.num_classes;
      train_src = pool;
      test_src = pool;
      break;
    }
    case DatasetSource::Idx: {
      auto tr_l = read_idx_labels(d.train_labels);
      auto te_l = read_idx_labels(d.test_labels);
      k = infer_classes(tr_l, te_l);
      train_src = labeled(read_idx_images(d.train_images), std::move(tr_l), k, DatasetRole::OwnerTrain, "train");
      test_src = labeled(read_idx_images(d.test_images), std::move(te_l), k, DatasetRole::Test, "test");
      break;
    }
    case DatasetSource::ImageDir: {
      auto tr = read_image_dir(d.train_dir);
      auto te = read_image_dir(d.test_dir);
      k = infer_classes(tr.labels, te.labels);
      train_src = labeled(std::move(tr.images), std::move(tr.labels), k, DatasetRole::OwnerTrain, "train_dir");
      test_src = labeled(std::move(te.images), std::move(te.labels), k, DatasetRole::Test, "test_dir");
      break;
    }
  }
  if (!out.shared_pool) {
    const auto oh = split_indices(train_src.size(), cfg.owner_fraction, derive_seed(cfg.seed, "split"));
    out.owner_ids = oh.first;
    out.holdout_ids = oh.second;
    out.test_ids.resize(test_src.size());
    std::iota(out.test_ids.begin(), out.test_ids.end(), std::size_t{0});
  }
  if (out.owner_ids.empty() || out.holdout_ids.empty() || out.test_ids.empty())
    throw ConfigError("split: every split needs at least one sample");
  if (cfg.watermark.target_label < 0 || static_cast<std::size_t>(cfg.watermark.target_label) >= k)
    throw ConfigError("watermark.target_label: outside [0, " + std::to_string(k) + ")");

  auto owner = train_src.subset(out.owner_ids);
  owner.role = DatasetRole::OwnerTrain;
  out.holdout = train_src.subset(out.holdout_ids);
  out.holdout.role = DatasetRole::AttackerHoldout;
  out.test = test_src.subset(out.test_ids);
  out.test.role = DatasetRole::Test;
  owner.num_classes = out.holdout.num_classes = out.test.num_classes = k;
  out.wm = build_watermarked_trainset(owner, cfg.watermark, cfg.watermark_fraction);
  out.wm_test = make_watermark_testset(out.test, cfg.watermark);
  return out;
}

// ------------------------------------------------------------------ manifest

const StageRecord* RunManifest::find(const std::string& stage) const {
  for (const auto& s : stages)
    if (s.stage == stage) return &s;
  return nullptr;
}

json RunManifest::to_json() const {
  json st = json::array();
  for (const auto& s : stages) {
    json arts = json::array();
    for (const auto& a : s.artifacts) arts.push_back({{"path", a.path}, {"sha256", a.sha256}});
    st.push_back({{"stage", s.stage},
                  {"started", s.started},
                  {"finished", s.finished},
                  {"artifacts", arts},
                  {"results", s.results}});
  }
  return {{"config_hash", config_hash}, {"software_version", software_version}, {"stages", st}};
}

RunManifest RunManifest::from_json(const json& j) {
  try {
    RunManifest m;
    m.config_hash = j.at("config_hash").get<std::string>();
    m.software_version = j.at("software_version").get<std::string>();
    for (const auto& s : j.at("stages")) {
      StageRecord r;
      r.stage = s.at("stage").get<std::string>();
      r.started = s.value("started", "");
      r.finished = s.value("finished", "");
      for (const auto& a : s.at("artifacts")) r.artifacts.push_back({a.at("path"), a.at("sha256")});
      r.results = s.value("results", json::object());
      m.stages.push_back(std::move(r));
    }
    return m;
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("malformed manifest: ") + e.what());
  }
}

std::string config_hash(const ExperimentConfig& cfg) { return sha256_hex(to_json(cfg).dump()); }

RunManifest open_manifest(const fs::path& dir, const ExperimentConfig& cfg) {
  const auto path = dir / "manifest.json";
  const auto hash = config_hash(cfg);
  if (fs::exists(path)) {
    json j;
    try {
      j = json::parse(read_text(path));
    } catch (const json::parse_error& e) {
      throw IntegrityError("manifest " + path.string() + " is not valid JSON");
    }
    auto m = RunManifest::from_json(j);
    if (m.config_hash == hash) return m;
  }
  RunManifest m;
  m.config_hash = hash;
  return m;
}

void record_stage(const fs::path& dir, RunManifest& manifest, StageRecord rec) {
  auto it = std::find_if(manifest.stages.begin(), manifest.stages.end(),
                         [&](const StageRecord& s) { return s.stage == rec.stage; });
  if (it != manifest.stages.end())
    *it = std::move(rec);
  else
    manifest.stages.push_back(std::move(rec));
  write_text(dir / "manifest.json", manifest.to_json().dump(2) + "\n");
}

void verify_manifest(const fs::path& dir, const RunManifest& manifest) {
  for (const auto& s : manifest.stages)
    for (const auto& a : s.artifacts) {
      const auto p = dir / a.path;
      if (!fs::exists(p)) throw IntegrityError("manifest artifact missing: " + p.string());
      if (sha256_file(p) != a.sha256) throw IntegrityError("manifest checksum mismatch: " + p.string());
    }
}

// ------------------------------------------------------------------ commands

TrainOutcome cmd_train(const ExperimentConfig& cfg, const fs::path& out) {
  cfg.validate();
  const auto started = utc_now();
  fs::create_directories(out);
  const auto data = prepare_data(cfg);
  const auto init = make_architecture(cfg.architecture, data.test.sample_shape(), data.test.num_classes,
                                      derive_seed(cfg.seed, "init"));
  const EvalSets eval{&data.test, &data.wm_test, cfg.watermark.target_label};
  auto res = train_embedder(cfg.train, init, data.wm.clean_part, data.wm.wm_part, eval);

  TrainOutcome o;
  o.model = std::move(res.model);
  o.report = std::move(res.report);
  o.wsr = wsr(o.model, data.wm_test, cfg.watermark.target_label);
  o.ba = benign_accuracy(o.model, data.test);
  o.checkpoint = out / "model.wmck";
  const auto hash = config_hash(cfg);
  save_checkpoint(o.model, o.checkpoint,
                  {{"stage", "train"}, {"embedder", to_string(cfg.train.embedder)}, {"config_hash", hash}});
  write_text(out / "train_report.csv", o.report.to_csv());
  write_text(out / "config.json", to_json(cfg).dump(2) + "\n");

  auto manifest = open_manifest(out, cfg);
  StageRecord rec{"train", started, utc_now(), {}, {}};
  for (const auto& f : {o.checkpoint, sidecar_path(o.checkpoint), out / "train_report.csv", out / "config.json"})
    rec.artifacts.push_back(artifact(out, f));
  rec.results = {{"embedder", to_string(cfg.train.embedder)},
                 {"wsr", o.wsr},
                 {"ba", o.ba},
                 {"skipped_perturbations", o.report.skipped_perturbations},
                 {"wall_seconds", o.report.wall_seconds}};
  record_stage(out, manifest, std::move(rec));
  return o;
}

std::vector<AttackOutcome> cmd_attack(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& out) {
  cfg.validate();
  const auto started = utc_now();
  const auto loaded = load_checkpoint(checkpoint, true);
  fs::create_directories(out);
  std::vector<AttackOutcome> outcomes;
  json results = json::array();
  std::vector<Artifact> arts;
  if (!cfg.attacks.empty()) {
    const auto data = prepare_data(cfg);
    const EvalSets eval{&data.test, &data.wm_test, cfg.watermark.target_label};
    const auto src_sha = loaded.sidecar.value("sha256", std::string());
    const auto embedder = loaded.sidecar.contains("metadata") ? loaded.sidecar["metadata"].value("embedder", "") : "";
    for (std::size_t i = 0; i < cfg.attacks.size(); ++i) {
      const auto& plan = cfg.attacks[i];
      auto res = run_attack(loaded.model, data.holdout, plan, eval);
      const std::string stem = "attack_" + std::to_string(i) + "_" + res.report.attack;
      AttackOutcome o{plan, std::move(res.report), out / (stem + ".wmck"), out / (stem + ".csv")};
      json pruned = json::array();
      for (const auto& p : o.report.pruned) pruned.push_back({{"layer", p.layer}, {"channel", p.channel}});
      json plan_json = to_json(cfg)["attacks"][i];
      save_checkpoint(res.model, o.checkpoint,
                      {{"stage", "attack"},
                       {"embedder", embedder},
                       {"attack", {{"name", o.report.attack}, {"plan", plan_json}, {"pruned", pruned},
                                   {"source_checkpoint_sha256", src_sha}}}});
      write_text(o.csv, o.report.to_csv());
      for (const auto& f : {o.checkpoint, sidecar_path(o.checkpoint), o.csv}) arts.push_back(artifact(out, f));
      results.push_back({{"attack", o.report.attack},
                         {"wsr_before", o.report.wsr_before},
                         {"wsr_after", o.report.wsr_after()},
                         {"ba_before", o.report.ba_before},
                         {"ba_after", o.report.ba_after()},
                         {"csv", fs::relative(o.csv, out).generic_string()}});
      outcomes.push_back(std::move(o));
    }
  }
  auto manifest = open_manifest(out, cfg);
  StageRecord rec{"attack", started, utc_now(), std::move(arts), {{"attacks", results}}};
  if (loaded.sidecar.contains("metadata")) rec.results["embedder"] = loaded.sidecar["metadata"].value("embedder", "");
  record_stage(out, manifest, std::move(rec));
  return outcomes;
}

json cmd_evaluate(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& out) {
  cfg.validate();
  const auto started = utc_now();
  const auto loaded = load_checkpoint(checkpoint, true);
  const auto data = prepare_data(cfg);
  if (loaded.model.num_classes() != data.test.num_classes)
    throw ConfigError("dataset: model has " + std::to_string(loaded.model.num_classes()) + " classes, data has " +
                      std::to_string(data.test.num_classes));
  const json metrics{{"ba", benign_accuracy(loaded.model, data.test)},
                     {"wsr", wsr(loaded.model, data.wm_test, cfg.watermark.target_label)},
                     {"per_class_accuracy", per_class_accuracy(loaded.model, data.test)},
                     {"model_checksum", model_checksum(loaded.model)}};
  fs::create_directories(out);
  write_text(out / "metrics.json", metrics.dump(2) + "\n");
  auto manifest = open_manifest(out, cfg);
  record_stage(out, manifest, {"evaluate", started, utc_now(), {artifact(out, out / "metrics.json")}, metrics});
  return metrics;
}

LandscapeGrid cmd_landscape(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& out,
                            double origin_tolerance) {
  cfg.validate();
  const auto started = utc_now();
  const auto loaded = load_checkpoint(checkpoint, true);
  const auto data = prepare_data(cfg);
  const auto& model = loaded.model;
  const int target = cfg.watermark.target_label;
  const auto pair = make_direction_pair(adversarial_direction(model, data.wm.wm_part),
                                        finetune_direction(model, data.holdout, cfg.landscape.ft));
  const ScanData sd{&data.wm.clean_part, &data.test, &data.wm_test, target};
  auto grid = scan(model, pair, cfg.landscape.grid, sd);

  const double direct_wsr = wsr(model, data.wm_test, target);
  const double direct_ba = benign_accuracy(model, data.test);
  const auto& o = grid.origin();
  if (std::abs(o.wsr - direct_wsr) > origin_tolerance || std::abs(o.ba - direct_ba) > origin_tolerance) {
    char buf[200];
    std::snprintf(buf, sizeof buf,
                  "landscape origin cell (wsr %.4f, ba %.4f) deviates from the model (wsr %.4f, ba %.4f) by more "
                  "than %.4f; check BatchNorm re-estimation",
                  o.wsr, o.ba, direct_wsr, direct_ba, origin_tolerance);
    throw NumericError(buf, 0);
  }
  fs::create_directories(out);
  json meta = grid.metadata();
  meta["origin_check"] = {{"direct_wsr", direct_wsr}, {"direct_ba", direct_ba}, {"tolerance", origin_tolerance}};
  meta["erase_radius"] = std::isfinite(grid.erase_radius()) ? json(grid.erase_radius()) : json(nullptr);
  meta["ft_relative_distance"] = pair.ft_norm / grid.theta_norm;
  write_text(out / "landscape.csv", grid.to_csv());
  write_text(out / "landscape.json", meta.dump(2) + "\n");
  write_text(out / "embeddings.csv", export_embeddings(model, data.test, data.wm_test));
  auto manifest = open_manifest(out, cfg);
  StageRecord rec{"landscape", started, utc_now(), {}, meta};
  for (const auto* f : {"landscape.csv", "landscape.json", "embeddings.csv"}) rec.artifacts.push_back(artifact(out, out / f));
  record_stage(out, manifest, std::move(rec));
  return grid;
}

// -------------------------------------------------------------------- report

std::vector<ReportRow> summarize(const std::vector<fs::path>& manifests) {
  if (manifests.empty()) throw ConfigError("report: at least one manifest is required");
  std::vector<ReportRow> rows;
  for (const auto& mp : manifests) {
    if (!fs::exists(mp)) throw IntegrityError("report: manifest not found: " + mp.string());
    json j;
    try {
      j = json::parse(read_text(mp));
    } catch (const json::parse_error&) {
      throw IntegrityError("report: manifest is not valid JSON: " + mp.string());
    }
    const auto m = RunManifest::from_json(j);
    const auto dir = mp.parent_path();
    verify_manifest(dir, m);
    const auto* train = m.find("train");
    const auto* attack = m.find("attack");
    ReportRow base;
    const json* before = train ? &train->results : nullptr;
    if (!before && attack) before = &attack->results;
    if (!before) throw IntegrityError("report: manifest " + mp.string() + " has neither train nor attack results");
    base.embedder = before->value("embedder", "");
    base.wsr_before = train ? train->results.value("wsr", std::nan("")) : std::nan("");
    base.ba_before = train ? train->results.value("ba", std::nan("")) : std::nan("");
    const json attacks = attack ? attack->results.value("attacks", json::array()) : json::array();
    if (attacks.empty()) {
      base.wsr_after = base.ba_after = base.avg_drop = std::nan("");
      rows.push_back(base);
      continue;
    }
    double drop = 0.0;
    std::vector<ReportRow> run;
    for (const auto& a : attacks) {
      ReportRow r = base;
      r.attack = a.at("attack").get<std::string>();
      r.wsr_before = a.at("wsr_before").get<double>();
      r.ba_before = a.at("ba_before").get<double>();
      r.wsr_after = a.at("wsr_after").get<double>();
      r.ba_after = a.at("ba_after").get<double>();
      drop += r.wsr_before - r.wsr_after;
      run.push_back(r);
    }
    for (auto& r : run) {
      r.avg_drop = drop / static_cast<double>(run.size());
      rows.push_back(r);
    }
  }
  return rows;
}

std::string report_csv(const std::vector<ReportRow>& rows) {
  std::string out = "embedder,attack,wsr_before,wsr_after,ba_before,ba_after,avg_drop\n";
  auto num = [](double v) {
    if (std::isnan(v)) return std::string();
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return std::string(buf);
  };
  for (const auto& r : rows)
    out += r.embedder + "," + r.attack + "," + num(r.wsr_before) + "," + num(r.wsr_after) + "," + num(r.ba_before) +
           "," + num(r.ba_after) + "," + num(r.avg_drop) + "\n";
  return out;
}

std::string cmd_report(const std::vector<fs::path>& manifests, const fs::path& out) {
  const auto csv = report_csv(summarize(manifests));
  write_text(out / "summary.csv", csv);
  return csv;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const IntegrityError*>(&e)) return 4;
  if (dynamic_cast<const NumericError*>(&e) || dynamic_cast<const TrainingError*>(&e)) return 3;
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ArgumentError*>(&e)) return 2;
  return 1;
}

}  // namespace wmlab
