#include "wmlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "wmlab/errors.hpp"

namespace wmlab {

std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::Relu: return "relu";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::Flatten: return "flatten";
  }
  return "?";
}

LayerKind layer_kind_from_string(const std::string& s) {
  for (auto k : {LayerKind::Dense, LayerKind::Conv2d, LayerKind::Relu, LayerKind::MaxPool, LayerKind::BatchNorm,
                 LayerKind::Flatten})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown layer type '" + s + "'");
}

// ---------------------------------------------------------------- ParamSet

void ParamSet::add(std::string name, Tensor value) {
  if (find(name)) throw ArgumentError("duplicate parameter name " + name);
  names_.push_back(std::move(name));
  tensors_.push_back(std::move(value));
}

std::optional<std::size_t> ParamSet::find(const std::string& name) const {
  auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - names_.begin());
}

const Tensor& ParamSet::at(const std::string& name) const {
  auto i = find(name);
  if (!i) throw ArgumentError("no parameter named " + name);
  return tensors_[*i];
}

Tensor& ParamSet::at(const std::string& name) {
  auto i = find(name);
  if (!i) throw ArgumentError("no parameter named " + name);
  return tensors_[*i];
}

std::size_t ParamSet::total_size() const noexcept {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.size();
  return n;
}

std::vector<double> ParamSet::flatten() const {
  std::vector<double> flat;
  flat.reserve(total_size());
  for (const auto& t : tensors_) flat.insert(flat.end(), t.storage().begin(), t.storage().end());
  return flat;
}

void ParamSet::unflatten(std::span<const double> flat) {
  if (flat.size() != total_size())
    throw ArgumentError("unflatten: expected " + std::to_string(total_size()) + " values, got " +
                        std::to_string(flat.size()));
  std::size_t off = 0;
  for (auto& t : tensors_) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), t.size(), t.data());
    off += t.size();
  }
}

ParamSet ParamSet::zeros_like() const {
  ParamSet z;
  for (std::size_t i = 0; i < count(); ++i) z.add(names_[i], Tensor(tensors_[i].shape(), 0.0));
  return z;
}

bool ParamSet::same_layout(const ParamSet& other) const noexcept {
  if (names_ != other.names_) return false;
  for (std::size_t i = 0; i < count(); ++i)
    if (tensors_[i].shape() != other.tensors_[i].shape()) return false;
  return true;
}

void ParamSet::require_same_layout(const ParamSet& other, const char* what) const {
  if (!same_layout(other)) throw ArgumentError(std::string(what) + ": parameter layout mismatch");
}

// -------------------------------------------------------------- ModelState

std::size_t ModelState::num_classes() const {
  if (layers.empty() || layers.back().kind != LayerKind::Dense)
    throw ConfigError("model must end with a dense layer");
  return layers.back().out;
}

std::size_t ModelState::param_slot(std::size_t layer) const {
  std::size_t slot = 0;
  for (std::size_t i = 0; i < layer; ++i)
    if (layers.at(i).has_params()) slot += 2;
  if (!layers.at(layer).has_params()) throw ArgumentError("layer " + std::to_string(layer) + " has no params");
  return slot;
}

std::size_t ModelState::last_feature_layer() const {
  std::optional<std::size_t> found;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].kind == LayerKind::Flatten) break;
    if (layers[i].kind == LayerKind::Relu) found = i;
  }
  if (!found) throw ConfigError("model has no convolutional feature layer before flatten");
  return *found;
}

std::vector<Shape> ModelState::layer_output_shapes() const {
  std::vector<Shape> out;
  Shape cur = input_shape;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    auto fail = [&](const std::string& why) {
      return ConfigError("layer " + std::to_string(i) + " (" + to_string(l.kind) + "): " + why + ", input " +
                         shape_str(cur));
    };
    switch (l.kind) {
      case LayerKind::Dense:
        if (cur.size() != 1 || cur[0] != l.in) throw fail("expects " + std::to_string(l.in) + " features");
        cur = {l.out};
        break;
      case LayerKind::Conv2d: {
        if (cur.size() != 3 || cur[0] != l.in) throw fail("expects " + std::to_string(l.in) + " channels");
        const auto h = cur[1] + 2 * l.padding, w = cur[2] + 2 * l.padding;
        if (h < l.kernel || w < l.kernel || l.stride == 0) throw fail("kernel larger than input");
        cur = {l.out, (h - l.kernel) / l.stride + 1, (w - l.kernel) / l.stride + 1};
        break;
      }
      case LayerKind::MaxPool:
        if (cur.size() != 3 || cur[1] < l.kernel || cur[2] < l.kernel || l.kernel == 0) throw fail("bad pool");
        cur = {cur[0], (cur[1] - l.kernel) / l.stride + 1, (cur[2] - l.kernel) / l.stride + 1};
        break;
      case LayerKind::BatchNorm:
        if ((cur.size() != 1 && cur.size() != 3) || cur[0] != l.channels) throw fail("channel mismatch");
        break;
      case LayerKind::Relu: break;
      case LayerKind::Flatten: cur = {shape_size(cur)}; break;
    }
    out.push_back(cur);
  }
  return out;
}

void ModelState::validate() const {
  const auto shapes = layer_output_shapes();
  if (shapes.empty() || shapes.back().size() != 1) throw ConfigError("model must produce (batch, K) logits");
  std::size_t slot = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.kind == LayerKind::BatchNorm) {
      auto it = bn_stats.find(i);
      if (it == bn_stats.end()) throw ConfigError("batchnorm layer " + std::to_string(i) + " has no bn_stats");
      if (it->second.running_mean.size() != l.channels || it->second.running_var.size() != l.channels)
        throw ConfigError("bn_stats of layer " + std::to_string(i) + " have wrong channel count");
      for (double v : it->second.running_var)
        if (!(v > 0)) throw ConfigError("running_var must be positive in layer " + std::to_string(i));
    }
    if (!l.has_params()) continue;
    if (slot + 1 >= params.count()) throw ConfigError("missing parameters for layer " + std::to_string(i));
    Shape w, b;
    if (l.kind == LayerKind::Dense) w = {l.out, l.in}, b = {l.out};
    if (l.kind == LayerKind::Conv2d) w = {l.out, l.in, l.kernel, l.kernel}, b = {l.out};
    if (l.kind == LayerKind::BatchNorm) w = {l.channels}, b = {l.channels};
    if (params[slot].shape() != w || params[slot + 1].shape() != b)
      throw ConfigError("parameter shapes of layer " + std::to_string(i) + " do not match descriptor");
    slot += 2;
  }
  if (slot != params.count()) throw ConfigError("unexpected extra parameters");
  for (const auto& [idx, mask] : channel_masks) {
    if (idx >= shapes.size() || shapes[idx].empty() || mask.size() != shapes[idx][0])
      throw ConfigError("channel mask of layer " + std::to_string(idx) + " does not match its output");
  }
  if (bn_stats.size() != static_cast<std::size_t>(std::count_if(layers.begin(), layers.end(), [](auto& l) {
        return l.kind == LayerKind::BatchNorm;
      })))
    throw ConfigError("bn_stats entries without a batchnorm layer");
}

// ------------------------------------------------------------ ModelBuilder

ModelBuilder::ModelBuilder(Shape input_shape, std::uint64_t seed) : rng_state_(seed) {
  model_.input_shape = std::move(input_shape);
  model_.seed = seed;
}

Shape ModelBuilder::current() const { return shapes_.empty() ? model_.input_shape : shapes_.back(); }

namespace {

// He-normal initialization; reproducible from the builder seed.
Tensor he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

}  // namespace

ModelBuilder& ModelBuilder::conv(std::size_t out_channels, std::size_t kernel, std::size_t padding,
                                 std::size_t stride) {
  const auto in = current();
  if (in.size() != 3) throw ConfigError("conv2d needs a (C,H,W) input");
  LayerSpec l{.kind = LayerKind::Conv2d, .in = in[0], .out = out_channels, .kernel = kernel, .stride = stride,
              .padding = padding};
  std::mt19937_64 rng(rng_state_ + model_.layers.size() * 7919);
  const auto idx = std::to_string(model_.layers.size());
  model_.params.add(idx + ".weight", he_normal({out_channels, in[0], kernel, kernel}, in[0] * kernel * kernel, rng));
  model_.params.add(idx + ".bias", Tensor({out_channels}, 0.0));
  model_.layers.push_back(l);
  shapes_ = model_.layer_output_shapes();
  return *this;
}

ModelBuilder& ModelBuilder::dense(std::size_t out_features) {
  const auto in = current();
  if (in.size() != 1) throw ConfigError("dense needs a flat input");
  LayerSpec l{.kind = LayerKind::Dense, .in = in[0], .out = out_features};
  std::mt19937_64 rng(rng_state_ + model_.layers.size() * 7919);
  const auto idx = std::to_string(model_.layers.size());
  model_.params.add(idx + ".weight", he_normal({out_features, in[0]}, in[0], rng));
  model_.params.add(idx + ".bias", Tensor({out_features}, 0.0));
  model_.layers.push_back(l);
  shapes_ = model_.layer_output_shapes();
  return *this;
}

ModelBuilder& ModelBuilder::batchnorm() {
  const auto c = current().at(0);
  const auto i = model_.layers.size();
  model_.layers.push_back({.kind = LayerKind::BatchNorm, .channels = c});
  model_.params.add(std::to_string(i) + ".gamma", Tensor({c}, 1.0));
  model_.params.add(std::to_string(i) + ".beta", Tensor({c}, 0.0));
  model_.bn_stats[i] = BnStats{std::vector<double>(c, 0.0), std::vector<double>(c, 1.0), 0.1, 1e-5};
  shapes_ = model_.layer_output_shapes();
  return *this;
}

ModelBuilder& ModelBuilder::relu() {
  model_.layers.push_back({.kind = LayerKind::Relu});
  shapes_ = model_.layer_output_shapes();
  return *this;
}

ModelBuilder& ModelBuilder::maxpool(std::size_t window) {
  model_.layers.push_back({.kind = LayerKind::MaxPool, .kernel = window, .stride = window});
  shapes_ = model_.layer_output_shapes();
  return *this;
}

ModelBuilder& ModelBuilder::flatten() {
  model_.layers.push_back({.kind = LayerKind::Flatten});
  shapes_ = model_.layer_output_shapes();
  return *this;
}

ModelState ModelBuilder::build() {
  model_.validate();
  return model_;
}

// ---------------------------------------------------------------- registry

ModelState make_architecture(const std::string& id, const Shape& input_shape, std::size_t num_classes,
                             std::uint64_t seed) {
  if (id == "tinycnn") {
    return ModelBuilder(input_shape, seed)
        .conv(8, 3, 1).batchnorm().relu().maxpool(2)
        .conv(16, 3, 1).batchnorm().relu().maxpool(2)
        .flatten().dense(num_classes)
        .build();
  }
  if (id == "minicnn") {
    return ModelBuilder(input_shape, seed)
        .conv(8, 3, 1).batchnorm().relu()
        .conv(8, 3, 1).batchnorm().relu().maxpool(2)
        .conv(16, 3, 1).batchnorm().relu()
        .conv(16, 3, 1).batchnorm().relu().maxpool(2)
        .flatten().dense(num_classes)
        .build();
  }
  if (id == "mlp") {
    return ModelBuilder(input_shape, seed).flatten().dense(32).batchnorm().relu().dense(num_classes).build();
  }
  throw ConfigError("unknown architecture '" + id + "'");
}

std::vector<std::string> architecture_ids() { return {"tinycnn", "minicnn", "mlp"}; }

}  // namespace wmlab
