#pragma once

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pianet/model/config.hpp"
#include "pianet/nn/layers.hpp"
#include "pianet/tensor.hpp"

namespace pianet::model {

/// One probed layer output, for construction-time shape verification.
struct ShapeProbe {
  std::string layer;
  Tensor5::Shape shape;
};
using ShapeLog = std::vector<ShapeProbe>;

/// Network output: per-scale head maps plus the flattened per-anchor view.
/// Flattened row order equals the anchor enumeration order (scale-major,
/// then z, y, x, then anchor-size index).
struct RawPrediction {
  std::vector<Tensor5> box_maps;    // (1, 4A, S, S, S) per scale
  std::vector<Tensor5> score_maps;  // (1, 2A, S, S, S) per scale
  std::vector<std::array<double, 4>> offsets;  // total_anchors x 4
  std::vector<std::array<double, 2>> logits;   // total_anchors x (non-GGO, GGO)
};

/// Contracting pyramid of successively average-pooled copies of the input,
/// sides L/2, L/4, L/8, L/16.
std::vector<Tensor5> source_pyramid(const Tensor5& cube, std::size_t expected_side);

/// The contracting + expanding pathways (the transferable feature module).
class FeatureExtractor {
 public:
  FeatureExtractor(const PiaNetConfig& config, Rng& rng);

  /// Returns the three prediction-scale feature maps, ordered like
  /// config.prediction_scales: sides L/4, L/8, L/16.
  std::array<Tensor5, 3> forward(const Tensor5& cube, nn::Mode mode, bool cache,
                                 ShapeLog* log = nullptr);
  /// Gradient w.r.t. the input cube, given feature-map gradients.
  Tensor5 backward(std::array<Tensor5, 3> grads);

  std::vector<nn::ParamRef> params(const std::string& prefix);
  std::vector<nn::ParamRef> state(const std::string& prefix);
  void zero_grad();

  const PiaNetConfig& config() const { return cfg_; }

 private:
  struct ConvBlock {
    nn::Conv3dLayer conv;
    nn::BatchNorm3dLayer bn;
    nn::ReluLayer relu;
    nn::MaxPool3dLayer pool;
    bool pooled = true;
  };
  struct DecovBlock {
    nn::Deconv3dLayer deconv;
    nn::BatchNorm3dLayer bn;
    nn::ReluLayer relu;
    nn::Conv3dLayer fuse;
    nn::BatchNorm3dLayer fuse_bn;
    nn::ReluLayer fuse_relu;
    std::size_t skip_channels = 0;
    std::size_t deconv_in = 0;
  };

  PiaNetConfig cfg_;
  std::array<ConvBlock, 5> blocks_;
  nn::Conv3dLayer neck_;  // the 1x1x1 convolution at the deepest scale
  nn::BatchNorm3dLayer neck_bn_;
  nn::ReluLayer neck_relu_;
  std::array<DecovBlock, 2> decovs_;
};

class PiaNet {
 public:
  PiaNet(const PiaNetConfig& config, std::uint64_t seed);

  RawPrediction forward(const Tensor5& cube, nn::Mode mode, bool cache = false,
                        ShapeLog* log = nullptr);
  /// Backpropagates flattened per-anchor gradients (d/d offsets, d/d logits).
  Tensor5 backward(const std::vector<std::array<double, 4>>& grad_offsets,
                   const std::vector<std::array<double, 2>>& grad_logits);

  std::vector<nn::ParamRef> params();
  std::vector<nn::ParamRef> state();
  void zero_grad();

  const PiaNetConfig& config() const { return cfg_; }
  FeatureExtractor& features() { return fe_; }

 private:
  PiaNetConfig cfg_;
  Rng init_rng_;
  FeatureExtractor fe_;
  std::array<nn::Conv3dLayer, 3> box_heads_;
  std::array<nn::Conv3dLayer, 3> cls_heads_;
};

/// Builds the detector and verifies every probed layer shape against the
/// configuration; mismatches raise ConfigError naming the layer.
PiaNet build_pianet(const PiaNetConfig& config, std::uint64_t seed);

/// Probe run on a zero cube; returns the per-layer output shapes.
ShapeLog probe_shapes(PiaNet& net);

/// Patch classifier for stage-1 pretraining: the feature extractor, global
/// average pooling over the finest expanded map, and a 2-class softmax.
/// Accepts patches of side input_cube_side / 2.
class Stage1Classifier {
 public:
  Stage1Classifier(const PiaNetConfig& config, std::uint64_t seed);

  /// Class probabilities, shape (B, 2). Batch forward.
  std::vector<std::array<double, 2>> forward(const Tensor5& patches, nn::Mode mode,
                                             bool cache = false);
  /// Softmax cross-entropy against labels (0 = non-GGO, 1 = GGO); fills
  /// parameter gradients and returns the summed loss.
  double loss_and_backward(const std::vector<int>& labels);

  std::vector<nn::ParamRef> params();
  std::vector<nn::ParamRef> state();
  void zero_grad();
  std::size_t patch_side() const { return cfg_.input_cube_side / 2; }
  const PiaNetConfig& config() const { return cfg_; }

 private:
  PiaNetConfig cfg_;
  Rng init_rng_;
  FeatureExtractor fe_;
  nn::Conv3dLayer head_;  // 1x1x1 conv on the pooled vector = linear layer
  std::array<Tensor5::Shape, 3> feat_shapes_{};
  std::vector<std::array<double, 2>> probs_;
};

}  // namespace pianet::model
