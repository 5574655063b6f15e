#include "pianet/loss/loss.hpp"

#include <algorithm>
#include <cmath>

namespace pianet::loss {

double smooth_l1(double x) {
  const double a = std::abs(x);
  return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

double smooth_l1_deriv(double x) {
  const double a = std::abs(x);
  return a < 1.0 ? x : (x > 0.0 ? 1.0 : -1.0);
}

namespace {
double clamp_prob(double c) {
  return std::min(1.0 - kProbClamp, std::max(kProbClamp, c));
}
}  // namespace

double confidence_loss(const boxes::MatchAssignment& assignment,
                       const std::vector<double>& scores,
                       const std::vector<std::size_t>* selected_negatives,
                       std::vector<double>* grad_scores) {
  if (scores.size() != assignment.labels.size())
    throw ConfigError("confidence_loss: scores size " +
                      std::to_string(scores.size()) + " vs " +
                      std::to_string(assignment.labels.size()) + " anchors");
  if (grad_scores && grad_scores->size() != scores.size())
    grad_scores->assign(scores.size(), 0.0);

  double total = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (assignment.labels[i] != boxes::AnchorLabel::kPositive) continue;
    const double c = clamp_prob(scores[i]);
    total -= std::log(c);
    if (grad_scores && scores[i] > kProbClamp && scores[i] < 1.0 - kProbClamp)
      (*grad_scores)[i] += -1.0 / c;
  }

  auto add_negative = [&](std::size_t i) {
    const double c = clamp_prob(scores[i]);
    total -= std::log(1.0 - c);
    if (grad_scores && scores[i] > kProbClamp && scores[i] < 1.0 - kProbClamp)
      (*grad_scores)[i] += 1.0 / (1.0 - c);
  };
  if (!selected_negatives) {
    for (std::size_t i = 0; i < scores.size(); ++i)
      if (assignment.labels[i] == boxes::AnchorLabel::kNegative) add_negative(i);
  } else {
    for (std::size_t i : *selected_negatives) add_negative(i);
  }
  return total;
}

double localization_loss(const boxes::MatchAssignment& assignment,
                         const std::vector<std::array<double, 4>>& predicted,
                         const std::vector<std::array<double, 4>>& targets,
                         double beta,
                         std::vector<std::array<double, 4>>* grad_offsets) {
  if (predicted.size() != assignment.labels.size() ||
      targets.size() != assignment.labels.size())
    throw ConfigError("localization_loss: row count does not match anchors");
  if (grad_offsets && grad_offsets->size() != predicted.size())
    grad_offsets->assign(predicted.size(), {0.0, 0.0, 0.0, 0.0});

  double total = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (assignment.labels[i] != boxes::AnchorLabel::kPositive) continue;
    for (int k = 0; k < 3; ++k) {
      const double d = targets[i][k] - predicted[i][k];
      total += beta * smooth_l1(d);
      if (grad_offsets) (*grad_offsets)[i][k] += -beta * smooth_l1_deriv(d);
    }
    const double dr = targets[i][3] - predicted[i][3];
    total += (1.0 - beta) * smooth_l1(dr);
    if (grad_offsets) (*grad_offsets)[i][3] += -(1.0 - beta) * smooth_l1_deriv(dr);
  }
  return total;
}

LossBreakdown multitask_loss(
    const boxes::MatchAssignment& assignment, const std::vector<double>& scores,
    const std::vector<std::array<double, 4>>& predicted,
    const std::vector<std::array<double, 4>>& targets,
    const std::vector<std::size_t>* selected_negatives, const LossConfig& config,
    std::vector<double>* grad_scores,
    std::vector<std::array<double, 4>>* grad_offsets) {
  config.validate();
  LossBreakdown b;
  b.confidence_term =
      confidence_loss(assignment, scores, selected_negatives, grad_scores);
  b.localization_term = localization_loss(assignment, predicted, targets,
                                          config.beta, grad_offsets);
  if (grad_offsets && config.alpha != 1.0)
    for (auto& row : *grad_offsets)
      for (double& v : row) v *= config.alpha;
  b.total = b.confidence_term + config.alpha * b.localization_term;
  b.positives = assignment.positive_count();
  b.negatives = selected_negatives
                    ? selected_negatives->size()
                    : static_cast<std::size_t>(std::count(
                          assignment.labels.begin(), assignment.labels.end(),
                          boxes::AnchorLabel::kNegative));
  return b;
}

}  // namespace pianet::loss
