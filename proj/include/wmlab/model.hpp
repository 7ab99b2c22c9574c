#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wmlab/tensor.hpp"

namespace wmlab {

enum class LayerKind { Dense, Conv2d, Relu, MaxPool, BatchNorm, Flatten };

std::string to_string(LayerKind k);
LayerKind layer_kind_from_string(const std::string& s);

/// One entry of the architecture descriptor list. Unused fields stay zero.
struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  std::size_t in = 0;        // dense/conv input features or channels
  std::size_t out = 0;       // dense/conv output features or channels
  std::size_t kernel = 0;    // conv kernel, maxpool window
  std::size_t stride = 1;    // conv / maxpool stride
  std::size_t padding = 0;   // conv zero padding
  std::size_t channels = 0;  // batchnorm channel count

  bool has_params() const noexcept {
    return kind == LayerKind::Dense || kind == LayerKind::Conv2d || kind == LayerKind::BatchNorm;
  }
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Ordered map of named tensors. Doubles as the gradient container: a
/// GradientSet shares key order and shapes with the params it differentiates.
class ParamSet {
 public:
  void add(std::string name, Tensor value);

  std::size_t count() const noexcept { return tensors_.size(); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  Tensor& operator[](std::size_t i) { return tensors_.at(i); }
  const Tensor& operator[](std::size_t i) const { return tensors_.at(i); }
  std::optional<std::size_t> find(const std::string& name) const;
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);

  /// Total element count P across all tensors.
  std::size_t total_size() const noexcept;
  std::vector<double> flatten() const;
  void unflatten(std::span<const double> flat);

  ParamSet zeros_like() const;
  bool same_layout(const ParamSet& other) const noexcept;
  void require_same_layout(const ParamSet& other, const char* what) const;

  friend bool operator==(const ParamSet&, const ParamSet&) = default;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
};

using GradientSet = ParamSet;

struct BnStats {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;
  friend bool operator==(const BnStats&, const BnStats&) = default;
};

struct ModelState {
  Shape input_shape;  // per-sample shape, e.g. {C, H, W}
  std::vector<LayerSpec> layers;
  ParamSet params;
  std::map<std::size_t, BnStats> bn_stats;  // keyed by layer index
  // Pruning masks applied to a layer's output channels (1 keep, 0 pruned).
  std::map<std::size_t, std::vector<std::uint8_t>> channel_masks;
  std::uint64_t seed = 0;

  std::size_t num_classes() const;
  /// Index into params of the first tensor owned by `layer` (weight/gamma).
  std::size_t param_slot(std::size_t layer) const;
  /// Index of the final ReLU before the flatten: the last feature layer.
  std::size_t last_feature_layer() const;
  /// Per-sample output shape of every layer, validated end to end.
  std::vector<Shape> layer_output_shapes() const;
  void validate() const;

  friend bool operator==(const ModelState&, const ModelState&) = default;
};

/// Sequential builder: infers in/out sizes and initializes parameters.
class ModelBuilder {
 public:
  ModelBuilder(Shape input_shape, std::uint64_t seed);
  ModelBuilder& conv(std::size_t out_channels, std::size_t kernel, std::size_t padding = 0,
                     std::size_t stride = 1);
  ModelBuilder& dense(std::size_t out_features);
  ModelBuilder& batchnorm();
  ModelBuilder& relu();
  ModelBuilder& maxpool(std::size_t window = 2);
  ModelBuilder& flatten();
  ModelState build();

 private:
  Shape current() const;
  ModelState model_;
  std::vector<Shape> shapes_;
  std::uint64_t rng_state_;
};

/// Desk architecture registry: "tinycnn", "minicnn", "mlp".
ModelState make_architecture(const std::string& id, const Shape& input_shape, std::size_t num_classes,
                             std::uint64_t seed);
std::vector<std::string> architecture_ids();

}  // namespace wmlab
