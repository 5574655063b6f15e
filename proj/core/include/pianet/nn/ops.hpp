#pragma once

#include <cstddef>
#include <vector>

#include "pianet/rng.hpp"
#include "pianet/tensor.hpp"

namespace pianet::nn {

/// Convolution / deconvolution parameters. Weights are laid out
/// (out_channel, in_channel, kd, kh, kw); for deconv3d the first axis is the
/// *input* channel count (the kernel of the associated forward convolution).
struct ConvParams {
  Tensor5 weights;
  std::vector<double> bias;
};

struct ConvGrads {
  Tensor5 dx;
  Tensor5 dw;
  std::vector<double> db;
};

/// Batch normalization state. Running variance stays strictly positive.
struct BatchNormParams {
  std::vector<double> scale;     // gamma
  std::vector<double> shift;     // beta
  std::vector<double> run_mean;
  std::vector<double> run_var;
  double eps = 1e-5;
  double momentum = 0.1;  // EMA weight of the current batch statistics
};

struct BatchNormCache {
  std::vector<double> mean;
  std::vector<double> inv_std;
};

struct BatchNormGrads {
  Tensor5 dx;
  std::vector<double> dscale;
  std::vector<double> dshift;
};

/// Argmax positions of a max pool, as flat indices into the pool's input.
struct PoolIndices {
  Tensor5::Shape shape{0, 0, 0, 0, 0};  // shape of the pooled output
  std::vector<std::size_t> flat;        // one input index per output element
};

enum class Mode { kTrain, kInfer };

// -- convolution ------------------------------------------------------------

Tensor5 conv3d(const Tensor5& x, const ConvParams& p, int stride, int pad);
ConvGrads conv3d_backward(const Tensor5& x, const ConvParams& p, int stride,
                          int pad, const Tensor5& gy);
/// Gradient w.r.t. the convolution input alone (also the deconv forward map).
Tensor5 conv3d_input_grad(const Tensor5& weights, int stride, int pad,
                          const Tensor5& gy, const Tensor5::Shape& x_shape);

// -- transposed convolution ---------------------------------------------------

Tensor5 deconv3d(const Tensor5& x, const ConvParams& p, int stride, int pad);
ConvGrads deconv3d_backward(const Tensor5& x, const ConvParams& p, int stride,
                            int pad, const Tensor5& gy);

// -- batch norm ---------------------------------------------------------------

Tensor5 batchnorm3d(const Tensor5& x, BatchNormParams& p, Mode mode,
                    BatchNormCache* cache = nullptr);
BatchNormGrads batchnorm3d_backward(const Tensor5& x, const BatchNormParams& p,
                                    const BatchNormCache& cache, const Tensor5& gy);

// -- activations ---------------------------------------------------------------

Tensor5 relu(const Tensor5& x);
/// Gradient passes where x > 0; defined as 0 at exactly 0.
Tensor5 relu_backward(const Tensor5& x, const Tensor5& gy);

// -- pooling -------------------------------------------------------------------

std::pair<Tensor5, PoolIndices> maxpool3d(const Tensor5& x, int window = 2,
                                          int stride = 2);
Tensor5 maxpool3d_backward(const Tensor5::Shape& x_shape, const PoolIndices& idx,
                           const Tensor5& gy);
Tensor5 avgpool3d(const Tensor5& x, int window, int stride);
Tensor5 avgpool3d_backward(const Tensor5::Shape& x_shape, int window, int stride,
                           const Tensor5& gy);
/// Mean over the spatial axes, result (B, C, 1, 1, 1).
Tensor5 global_avgpool3d(const Tensor5& x);
Tensor5 global_avgpool3d_backward(const Tensor5::Shape& x_shape, const Tensor5& gy);
Tensor5 max_unpool3d(const Tensor5& x, const PoolIndices& idx,
                     const Tensor5::Shape& out_shape);
Tensor5 max_unpool3d_backward(const PoolIndices& idx, const Tensor5& gy);

// -- channel concat --------------------------------------------------------------

Tensor5 concat_channels(const Tensor5& a, const Tensor5& b);
std::pair<Tensor5, Tensor5> concat_channels_backward(std::size_t channels_a,
                                                     const Tensor5& gy);

// -- initialization ---------------------------------------------------------------

/// Uniform Xavier/Glorot weights in +-sqrt(6/(fan_in+fan_out)), zero bias.
ConvParams xavier_init(const Tensor5::Shape& weight_shape, Rng& rng);

}  // namespace pianet::nn
