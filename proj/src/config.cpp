#include "wmlab/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <set>

#include "wmlab/errors.hpp"

namespace wmlab {

using nlohmann::json;

std::uint64_t derive_seed(std::uint64_t global, const std::string& tag) {
  // FNV-1a over the tag, mixed with the global seed by splitmix64.
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : tag) h = (h ^ c) * 1099511628211ULL;
  std::uint64_t z = global + 0x9e3779b97f4a7c15ULL * (h | 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

void ExperimentConfig::apply_seed(std::uint64_t s) {
  seed = s;
  watermark.seed = derive_seed(s, "watermark");
  train.seed = derive_seed(s, "train");
  for (std::size_t i = 0; i < attacks.size(); ++i) attacks[i].seed = derive_seed(s, "attack" + std::to_string(i));
  landscape.ft.seed = derive_seed(s, "landscape");
}

void ExperimentConfig::validate() const {
  if (schema_version != kConfigSchemaVersion)
    throw ConfigError("schema_version: unsupported version " + std::to_string(schema_version));
  if (owner_fraction <= 0.0 || attacker_fraction <= 0.0 || std::abs(owner_fraction + attacker_fraction - 1.0) > 1e-9)
    throw ConfigError("split: owner and attacker fractions must be positive and sum to 1");
  if (watermark_fraction <= 0.0 || watermark_fraction >= 1.0)
    throw ConfigError("watermark.fraction: must lie in (0,1)");
  if (output_dir.empty()) throw ConfigError("output_dir: must not be empty");
  if (dataset.source == DatasetSource::Builtin) {
    if (dataset.samples < 10 || dataset.test_samples < 1) throw ConfigError("dataset.samples: too few samples");
    if (dataset.num_classes < 2 || dataset.num_classes > 10) throw ConfigError("dataset.num_classes: must lie in [2,10]");
    if (dataset.image_size < 8) throw ConfigError("dataset.image_size: must be >= 8");
    if (dataset.noise < 0.0) throw ConfigError("dataset.noise: must be >= 0");
    watermark.validate(dataset.num_classes);
  }
  const auto ids = architecture_ids();
  if (std::find(ids.begin(), ids.end(), architecture) == ids.end())
    throw ConfigError("architecture: unknown id '" + architecture + "'");
  train.validate();
  for (const auto& a : attacks) a.validate();
  landscape.grid.validate();
}

namespace {

// Field reader that reports `path.key` in every error and rejects unknown keys.
class Obj {
 public:
  Obj(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }
  ~Obj() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError(sub(k) + ": unknown field");
  }
  bool has(const std::string& k) {
    seen_.insert(k);
    return j_.contains(k) && !j_.at(k).is_null();
  }
  template <class T>
  void get(const std::string& k, T& out) {
    if (!has(k)) return;
    try {
      out = j_.at(k).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(sub(k) + ": wrong type");
    }
  }
  void get_size(const std::string& k, std::size_t& out) {
    if (!has(k)) return;
    const auto& v = j_.at(k);
    if (!v.is_number_integer() || v.get<long long>() < 0) throw ConfigError(sub(k) + ": expected a non-negative integer");
    out = v.get<std::size_t>();
  }
  void get_opt(const std::string& k, std::optional<std::uint64_t>& out) {
    if (!has(k)) return;
    std::uint64_t v = 0;
    get(k, v);
    out = v;
  }
  const json& raw(const std::string& k) {
    seen_.insert(k);
    return j_.at(k);
  }
  std::string sub(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }
  std::string where() const { return path_.empty() ? "<root>" : path_; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class F>
auto field(const std::string& path, F&& f) {
  try {
    return f();
  } catch (const std::exception& e) {
    const std::string what = e.what();
    if (dynamic_cast<const ConfigError*>(&e) && what.starts_with(path)) throw;
    throw ConfigError(path + ": " + what);
  }
}

void parse_axis(Obj& o, const std::string& k, double& lo, double& hi, double& step) {
  if (!o.has(k)) return;
  const auto& v = o.raw(k);
  if (!v.is_array() || v.size() != 3) throw ConfigError(o.sub(k) + ": expected [min, max, step]");
  try {
    lo = v[0].get<double>(), hi = v[1].get<double>(), step = v[2].get<double>();
  } catch (const json::exception&) {
    throw ConfigError(o.sub(k) + ": expected numbers");
  }
}

AttackPlan parse_attack(const json& j, const std::string& path, std::optional<std::uint64_t>& explicit_seed) {
  Obj o(j, path);
  AttackPlan a;
  std::string kind = "ft";
  o.get("attack", kind);
  a.attack = field(o.sub("attack"), [&] { return attack_kind_from_string(kind); });
  o.get("epochs", a.epochs);
  o.get("lr", a.lr.initial);
  o.get("lr_step_every", a.lr.step_every);
  o.get("lr_factor", a.lr.factor);
  o.get("lr_milestones", a.lr.milestones);
  o.get("momentum", a.momentum);
  o.get("weight_decay", a.weight_decay);
  o.get_size("batch_size", a.batch_size);
  if (o.has("prune_fraction")) {
    double f = 0.0;
    o.get("prune_fraction", f);
    a.prune_fraction = f;
  }
  o.get("anp_epsilon", a.anp_epsilon);
  o.get_opt("seed", explicit_seed);
  field(path, [&] { a.validate(); return 0; });
  return a;
}

}  // namespace

ExperimentConfig parse_config(const json& doc) {
  ExperimentConfig c;
  // Stage seeds default to values derived from the global seed; explicit
  // entries (as written by to_json) take precedence.
  std::optional<std::uint64_t> wm_seed, train_seed, ft_seed;
  std::vector<std::optional<std::uint64_t>> attack_seeds;
  {
    Obj root(doc, "");
    if (!root.has("schema_version")) throw ConfigError("schema_version: required");
    root.get("schema_version", c.schema_version);
    if (c.schema_version != kConfigSchemaVersion)
      throw ConfigError("schema_version: unsupported version " + std::to_string(c.schema_version));
    std::uint64_t seed = 0;
    root.get("seed", seed);
    root.get("output_dir", c.output_dir);
    root.get("architecture", c.architecture);

    if (root.has("dataset")) {
      Obj d(root.raw("dataset"), "dataset");
      std::string src = "builtin";
      d.get("source", src);
      if (src == "builtin")
        c.dataset.source = DatasetSource::Builtin;
      else if (src == "idx")
        c.dataset.source = DatasetSource::Idx;
      else if (src == "image_dir")
        c.dataset.source = DatasetSource::ImageDir;
      else
        throw ConfigError("dataset.source: expected builtin, idx or image_dir");
      d.get_size("samples", c.dataset.samples);
      d.get_size("test_samples", c.dataset.test_samples);
      d.get_size("image_size", c.dataset.image_size);
      d.get_size("num_classes", c.dataset.num_classes);
      d.get("noise", c.dataset.noise);
      d.get("train_images", c.dataset.train_images);
      d.get("train_labels", c.dataset.train_labels);
      d.get("test_images", c.dataset.test_images);
      d.get("test_labels", c.dataset.test_labels);
      d.get("train_dir", c.dataset.train_dir);
      d.get("test_dir", c.dataset.test_dir);
      if (c.dataset.source == DatasetSource::Idx &&
          (c.dataset.train_images.empty() || c.dataset.train_labels.empty() || c.dataset.test_images.empty() ||
           c.dataset.test_labels.empty()))
        throw ConfigError("dataset: idx source needs train_images, train_labels, test_images, test_labels");
      if (c.dataset.source == DatasetSource::ImageDir && (c.dataset.train_dir.empty() || c.dataset.test_dir.empty()))
        throw ConfigError("dataset: image_dir source needs train_dir and test_dir");
    }

    if (root.has("split")) {
      Obj s(root.raw("split"), "split");
      s.get("owner", c.owner_fraction);
      s.get("attacker", c.attacker_fraction);
    }

    if (root.has("watermark")) {
      Obj w(root.raw("watermark"), "watermark");
      std::string kind = "content";
      w.get("kind", kind);
      c.watermark.kind = field("watermark.kind", [&] { return watermark_kind_from_string(kind); });
      w.get("target_label", c.watermark.target_label);
      w.get("fraction", c.watermark_fraction);
      w.get("transparency", c.watermark.transparency);
      w.get("scale", c.watermark.scale);
      w.get("amplitude", c.watermark.amplitude);
      w.get("source", c.watermark.source);
      w.get_size("source_count", c.watermark.source_count);
      w.get_opt("seed", wm_seed);
      if (w.has("row")) {
        std::size_t r = 0;
        w.get_size("row", r);
        c.watermark.row = r;
      }
      if (w.has("col")) {
        std::size_t col = 0;
        w.get_size("col", col);
        c.watermark.col = col;
      }
      if (w.has("patch")) {
        std::vector<std::vector<double>> rows;
        w.get("patch", rows);
        if (rows.empty() || rows[0].empty()) throw ConfigError("watermark.patch: expected a non-empty 2-D array");
        std::vector<double> flat;
        for (const auto& r : rows) {
          if (r.size() != rows[0].size()) throw ConfigError("watermark.patch: rows differ in length");
          flat.insert(flat.end(), r.begin(), r.end());
        }
        c.watermark.patch = Tensor({rows.size(), rows[0].size()}, std::move(flat));
      }
    }

    if (root.has("train")) {
      Obj t(root.raw("train"), "train");
      auto& p = c.train;
      std::string emb = to_string(p.embedder);
      t.get("embedder", emb);
      p.embedder = field("train.embedder", [&] { return embedder_from_string(emb); });
      t.get("epochs", p.epochs);
      t.get_size("batch_clean", p.batch_clean);
      t.get_size("batch_wm", p.batch_wm);
      t.get("lr", p.lr.initial);
      t.get("lr_milestones", p.lr.milestones);
      t.get("lr_step_every", p.lr.step_every);
      t.get("lr_factor", p.lr.factor);
      t.get("momentum", p.momentum);
      t.get("weight_decay", p.weight_decay);
      t.get("decay_bn_affine", p.decay_bn_affine);
      t.get("alpha", p.alpha);
      t.get("epsilon", p.epsilon);
      t.get("clean_bn", p.clean_bn);
      t.get("ew_temperature", p.ew_temperature);
      t.get("pretrain_epochs", p.pretrain_epochs);
      t.get("cw_levels", p.cw_levels);
      t.get("cw_sigma", p.cw_sigma);
      t.get("cw_samples", p.cw_samples);
      t.get("finalize_bn", p.finalize_bn);
      t.get_opt("seed", train_seed);
      field("train", [&] { p.validate(); return 0; });
    }

    if (root.has("attacks")) {
      const auto& arr = root.raw("attacks");
      if (!arr.is_array()) throw ConfigError("attacks: expected an array");
      for (std::size_t i = 0; i < arr.size(); ++i) {
        std::optional<std::uint64_t> s;
        c.attacks.push_back(parse_attack(arr[i], "attacks[" + std::to_string(i) + "]", s));
        attack_seeds.push_back(s);
      }
    }

    if (root.has("landscape")) {
      Obj l(root.raw("landscape"), "landscape");
      auto& g = c.landscape.grid;
      parse_axis(l, "alpha", g.alpha_min, g.alpha_max, g.alpha_step);
      parse_axis(l, "beta", g.beta_min, g.beta_max, g.beta_step);
      l.get_size("bn_samples", g.bn_samples);
      l.get("bn_passes", g.bn_passes);
      l.get("ft_iterations", c.landscape.ft.iterations);
      l.get("ft_lr", c.landscape.ft.lr);
      l.get("ft_momentum", c.landscape.ft.momentum);
      l.get_size("ft_batch_size", c.landscape.ft.batch_size);
      l.get_opt("ft_seed", ft_seed);
    }
    c.apply_seed(seed);
    if (wm_seed) c.watermark.seed = *wm_seed;
    if (train_seed) c.train.seed = *train_seed;
    if (ft_seed) c.landscape.ft.seed = *ft_seed;
    for (std::size_t i = 0; i < attack_seeds.size(); ++i)
      if (attack_seeds[i]) c.attacks[i].seed = *attack_seeds[i];
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(doc);
}

json to_json(const ExperimentConfig& c) {
  json ds{{"source", c.dataset.source == DatasetSource::Builtin ? "builtin"
                     : c.dataset.source == DatasetSource::Idx   ? "idx"
                                                                : "image_dir"}};
  if (c.dataset.source == DatasetSource::Builtin) {
    ds["samples"] = c.dataset.samples;
    ds["test_samples"] = c.dataset.test_samples;
    ds["image_size"] = c.dataset.image_size;
    ds["num_classes"] = c.dataset.num_classes;
    ds["noise"] = c.dataset.noise;
  } else if (c.dataset.source == DatasetSource::Idx) {
    ds["train_images"] = c.dataset.train_images;
    ds["train_labels"] = c.dataset.train_labels;
    ds["test_images"] = c.dataset.test_images;
    ds["test_labels"] = c.dataset.test_labels;
  } else {
    ds["train_dir"] = c.dataset.train_dir;
    ds["test_dir"] = c.dataset.test_dir;
  }
  const auto& w = c.watermark;
  json wm{{"kind", to_string(w.kind)},     {"target_label", w.target_label}, {"fraction", c.watermark_fraction},
          {"transparency", w.transparency}, {"scale", w.scale},               {"amplitude", w.amplitude},
          {"source", w.source},             {"source_count", w.source_count}, {"seed", w.seed}};
  if (w.row) wm["row"] = *w.row;
  if (w.col) wm["col"] = *w.col;
  if (w.patch) {
    json rows = json::array();
    for (std::size_t r = 0; r < w.patch->dim(0); ++r) {
      json row = json::array();
      for (std::size_t k = 0; k < w.patch->dim(1); ++k) row.push_back((*w.patch)[r * w.patch->dim(1) + k]);
      rows.push_back(row);
    }
    wm["patch"] = rows;
  }
  const auto& p = c.train;
  json train{{"embedder", to_string(p.embedder)},
             {"epochs", p.epochs},
             {"batch_clean", p.batch_clean},
             {"batch_wm", p.batch_wm},
             {"lr", p.lr.initial},
             {"lr_milestones", p.lr.milestones},
             {"lr_step_every", p.lr.step_every},
             {"lr_factor", p.lr.factor},
             {"momentum", p.momentum},
             {"weight_decay", p.weight_decay},
             {"decay_bn_affine", p.decay_bn_affine},
             {"alpha", p.alpha},
             {"epsilon", p.epsilon},
             {"clean_bn", p.clean_bn},
             {"ew_temperature", p.ew_temperature},
             {"pretrain_epochs", p.pretrain_epochs},
             {"cw_levels", p.cw_levels},
             {"cw_sigma", p.cw_sigma},
             {"cw_samples", p.cw_samples},
             {"finalize_bn", p.finalize_bn},
             {"seed", p.seed}};
  json attacks = json::array();
  for (const auto& a : c.attacks) {
    json j{{"attack", to_string(a.attack)},
           {"epochs", a.epochs},
           {"lr", a.lr.initial},
           {"lr_milestones", a.lr.milestones},
           {"lr_step_every", a.lr.step_every},
           {"lr_factor", a.lr.factor},
           {"momentum", a.momentum},
           {"weight_decay", a.weight_decay},
           {"batch_size", a.batch_size},
           {"prune_fraction", a.resolved_prune_fraction()},
           {"anp_epsilon", a.anp_epsilon},
           {"seed", a.seed}};
    attacks.push_back(j);
  }
  const auto& g = c.landscape.grid;
  json land{{"alpha", {g.alpha_min, g.alpha_max, g.alpha_step}},
            {"beta", {g.beta_min, g.beta_max, g.beta_step}},
            {"bn_samples", g.bn_samples},
            {"bn_passes", g.bn_passes},
            {"ft_iterations", c.landscape.ft.iterations},
            {"ft_lr", c.landscape.ft.lr},
            {"ft_momentum", c.landscape.ft.momentum},
            {"ft_batch_size", c.landscape.ft.batch_size},
            {"ft_seed", c.landscape.ft.seed}};
  return {{"schema_version", c.schema_version},
          {"seed", c.seed},
          {"output_dir", c.output_dir},
          {"dataset", ds},
          {"split", {{"owner", c.owner_fraction}, {"attacker", c.attacker_fraction}}},
          {"architecture", c.architecture},
          {"watermark", wm},
          {"train", train},
          {"attacks", attacks},
          {"landscape", land}};
}

}  // namespace wmlab
