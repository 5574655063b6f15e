#pragma once

#include <map>
#include <string>
#include <vector>

#include "pianet/errors.hpp"
#include "pianet/nn/layers.hpp"

namespace pianet::nn {

/// SGD with momentum and decoupled-from-nothing classic weight decay:
///   v <- momentum * v - lr * (g + wd * p);  p <- p + v
class Sgd {
 public:
  explicit Sgd(double lr, double momentum = 0.9, double weight_decay = 1e-4)
      : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {}

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  double momentum() const { return momentum_; }
  double weight_decay() const { return weight_decay_; }

  void step(const std::vector<ParamRef>& params) {
    for (const auto& pr : params) {
      if (!pr.grad) continue;
      auto& p = *pr.value;
      auto& g = *pr.grad;
      if (p.size() != g.size())
        throw ConfigError("sgd: gradient size mismatch for " + pr.name);
      auto& v = velocity_[pr.name];
      if (v.size() != p.size()) v.assign(p.size(), 0.0);
      for (std::size_t i = 0; i < p.size(); ++i) {
        v[i] = momentum_ * v[i] - lr_ * (g[i] + weight_decay_ * p[i]);
        p[i] += v[i];
      }
    }
  }

  std::map<std::string, std::vector<double>>& velocity() { return velocity_; }
  const std::map<std::string, std::vector<double>>& velocity() const {
    return velocity_;
  }

 private:
  double lr_, momentum_, weight_decay_;
  std::map<std::string, std::vector<double>> velocity_;
};

}  // namespace pianet::nn
