#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "pianet/boxes/anchors.hpp"

namespace pianet::loss {

struct LossConfig {
  double alpha = 1.0;  // weight of the localization term
  double beta = 0.6;   // center-vs-size split inside the localization term

  void validate() const {
    if (alpha < 0.0) throw ConfigError("LossConfig: alpha must be >= 0");
    if (beta < 0.0 || beta > 1.0) throw ConfigError("LossConfig: beta in [0,1]");
  }
};

struct LossBreakdown {
  double total = 0.0;
  double confidence_term = 0.0;
  double localization_term = 0.0;
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

/// 0.5 x^2 inside |x| < 1, |x| - 0.5 outside.
double smooth_l1(double x);
double smooth_l1_deriv(double x);

/// Probabilities are clamped to [kProbClamp, 1 - kProbClamp] before the log.
inline constexpr double kProbClamp = 1e-7;

/// Unnormalized binary cross-entropy over positives and the selected
/// negatives: -sum_pos log(c) - sum_neg log(1-c). A null `selected_negatives`
/// means mining is off and every negative-labeled anchor participates; an
/// empty list means no negatives at all. The gradient (w.r.t. the
/// probabilities) is accumulated into `grad_scores` when non-null.
double confidence_loss(const boxes::MatchAssignment& assignment,
                       const std::vector<double>& scores,
                       const std::vector<std::size_t>* selected_negatives = nullptr,
                       std::vector<double>* grad_scores = nullptr);

/// Smooth-L1 offset loss over positive anchors, beta-weighted centers plus
/// (1-beta)-weighted size. Offsets/targets are rows of 4 per anchor; only
/// positive rows are read. Gradient w.r.t. predicted offsets accumulates
/// into `grad_offsets` when non-null.
double localization_loss(const boxes::MatchAssignment& assignment,
                         const std::vector<std::array<double, 4>>& predicted,
                         const std::vector<std::array<double, 4>>& targets,
                         double beta,
                         std::vector<std::array<double, 4>>* grad_offsets = nullptr);

LossBreakdown multitask_loss(
    const boxes::MatchAssignment& assignment, const std::vector<double>& scores,
    const std::vector<std::array<double, 4>>& predicted,
    const std::vector<std::array<double, 4>>& targets,
    const std::vector<std::size_t>* selected_negatives, const LossConfig& config,
    std::vector<double>* grad_scores = nullptr,
    std::vector<std::array<double, 4>>* grad_offsets = nullptr);

}  // namespace pianet::loss
