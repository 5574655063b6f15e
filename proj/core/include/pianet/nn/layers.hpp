#pragma once

#include <string>
#include <utility>
#include <vector>

#include "pianet/nn/ops.hpp"
#include "pianet/tensor.hpp"

namespace pianet::nn {

/// Named view of one parameter array and its gradient accumulator. Layers own
/// the storage; optimizers and checkpoints work through these views.
struct ParamRef {
  std::string name;
  std::vector<double>* value = nullptr;
  std::vector<double>* grad = nullptr;
  Tensor5::Shape shape{0, 0, 0, 0, 0};  // ({n},1,1,1,1) for vectors
};

class Conv3dLayer {
 public:
  Conv3dLayer() = default;
  Conv3dLayer(std::size_t in_ch, std::size_t out_ch, int kernel, int stride,
              int pad, Rng& rng)
      : stride_(stride), pad_(pad) {
    p_ = xavier_init({out_ch, in_ch, (std::size_t)kernel, (std::size_t)kernel,
                      (std::size_t)kernel},
                     rng);
    zero_grad();
  }

  Tensor5 forward(const Tensor5& x, bool cache) {
    if (cache) x_ = x;
    return conv3d(x, p_, stride_, pad_);
  }

  Tensor5 backward(const Tensor5& gy) {
    ConvGrads g = conv3d_backward(x_, p_, stride_, pad_, gy);
    accumulate(g);
    return std::move(g.dx);
  }

  void zero_grad() {
    dw_ = Tensor5(p_.weights.shape());
    db_.assign(p_.bias.size(), 0.0);
  }

  std::vector<ParamRef> params(const std::string& prefix) {
    return {{prefix + ".w", &p_.weights.vec(), &dw_.vec(), p_.weights.shape()},
            {prefix + ".b", &p_.bias, &db_, {p_.bias.size(), 1, 1, 1, 1}}};
  }

  const ConvParams& raw() const { return p_; }
  void drop_cache() { x_ = Tensor5(); }

 protected:
  void accumulate(const ConvGrads& g) {
    for (std::size_t i = 0; i < dw_.size(); ++i) dw_[i] += g.dw[i];
    for (std::size_t i = 0; i < db_.size(); ++i) db_[i] += g.db[i];
  }

  ConvParams p_;
  Tensor5 dw_;
  std::vector<double> db_;
  Tensor5 x_;
  int stride_ = 1, pad_ = 0;
};

class Deconv3dLayer {
 public:
  Deconv3dLayer() = default;
  Deconv3dLayer(std::size_t in_ch, std::size_t out_ch, int kernel, int stride,
                int pad, Rng& rng)
      : stride_(stride), pad_(pad) {
    // Kernel axis order matches the associated forward convolution.
    p_ = xavier_init({in_ch, out_ch, (std::size_t)kernel, (std::size_t)kernel,
                      (std::size_t)kernel},
                     rng);
    p_.bias.assign(out_ch, 0.0);
    zero_grad();
  }

  Tensor5 forward(const Tensor5& x, bool cache) {
    if (cache) x_ = x;
    return deconv3d(x, p_, stride_, pad_);
  }

  Tensor5 backward(const Tensor5& gy) {
    ConvGrads g = deconv3d_backward(x_, p_, stride_, pad_, gy);
    for (std::size_t i = 0; i < dw_.size(); ++i) dw_[i] += g.dw[i];
    for (std::size_t i = 0; i < db_.size(); ++i) db_[i] += g.db[i];
    return std::move(g.dx);
  }

  void zero_grad() {
    dw_ = Tensor5(p_.weights.shape());
    db_.assign(p_.bias.size(), 0.0);
  }

  std::vector<ParamRef> params(const std::string& prefix) {
    return {{prefix + ".w", &p_.weights.vec(), &dw_.vec(), p_.weights.shape()},
            {prefix + ".b", &p_.bias, &db_, {p_.bias.size(), 1, 1, 1, 1}}};
  }

  void drop_cache() { x_ = Tensor5(); }

 private:
  ConvParams p_;
  Tensor5 dw_;
  std::vector<double> db_;
  Tensor5 x_;
  int stride_ = 1, pad_ = 0;
};

class BatchNorm3dLayer {
 public:
  BatchNorm3dLayer() = default;
  explicit BatchNorm3dLayer(std::size_t channels) {
    p_.scale.assign(channels, 1.0);
    p_.shift.assign(channels, 0.0);
    p_.run_mean.assign(channels, 0.0);
    p_.run_var.assign(channels, 1.0);
    zero_grad();
  }

  Tensor5 forward(const Tensor5& x, Mode mode, bool cache) {
    if (cache) {
      x_ = x;
      return batchnorm3d(x, p_, mode, &cache_);
    }
    return batchnorm3d(x, p_, mode, nullptr);
  }

  Tensor5 backward(const Tensor5& gy) {
    BatchNormGrads g = batchnorm3d_backward(x_, p_, cache_, gy);
    for (std::size_t i = 0; i < dscale_.size(); ++i) {
      dscale_[i] += g.dscale[i];
      dshift_[i] += g.dshift[i];
    }
    return std::move(g.dx);
  }

  void zero_grad() {
    dscale_.assign(p_.scale.size(), 0.0);
    dshift_.assign(p_.shift.size(), 0.0);
  }

  std::vector<ParamRef> params(const std::string& prefix) {
    const std::size_t c = p_.scale.size();
    return {{prefix + ".scale", &p_.scale, &dscale_, {c, 1, 1, 1, 1}},
            {prefix + ".shift", &p_.shift, &dshift_, {c, 1, 1, 1, 1}}};
  }

  // Running statistics travel with checkpoints but take no gradient.
  std::vector<ParamRef> state(const std::string& prefix) {
    const std::size_t c = p_.scale.size();
    return {{prefix + ".run_mean", &p_.run_mean, nullptr, {c, 1, 1, 1, 1}},
            {prefix + ".run_var", &p_.run_var, nullptr, {c, 1, 1, 1, 1}}};
  }

  void drop_cache() { x_ = Tensor5(); }

 private:
  BatchNormParams p_;
  BatchNormCache cache_;
  std::vector<double> dscale_, dshift_;
  Tensor5 x_;
};

class ReluLayer {
 public:
  Tensor5 forward(const Tensor5& x, bool cache) {
    if (cache) x_ = x;
    return relu(x);
  }
  Tensor5 backward(const Tensor5& gy) { return relu_backward(x_, gy); }
  void drop_cache() { x_ = Tensor5(); }

 private:
  Tensor5 x_;
};

class MaxPool3dLayer {
 public:
  Tensor5 forward(const Tensor5& x) {
    auto [y, idx] = maxpool3d(x, 2, 2);
    idx_ = std::move(idx);
    x_shape_ = x.shape();
    return std::move(y);
  }
  Tensor5 backward(const Tensor5& gy) {
    return maxpool3d_backward(x_shape_, idx_, gy);
  }
  const PoolIndices& indices() const { return idx_; }
  const Tensor5::Shape& input_shape() const { return x_shape_; }

 private:
  PoolIndices idx_;
  Tensor5::Shape x_shape_{0, 0, 0, 0, 0};
};

}  // namespace pianet::nn
