#include "pianet/train/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <sstream>

#include "pianet/errors.hpp"

namespace pianet::train {

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("train: learning rate must be positive");
  if (!(decay_factor > 0.0 && decay_factor <= 1.0))
    throw ConfigError("train: decay factor must be in (0, 1]");
  if (!(decay_at[0] <= decay_at[1]))
    throw ConfigError("train: decay points must be ordered");
  if (batch < 1 || cubes_per_step < 1)
    throw ConfigError("train: batch sizes must be >= 1");
  if (k_floor < 1) throw ConfigError("train: hard-negative floor must be >= 1");
  if (k_per_positive < 0.0) throw ConfigError("train: k_per_positive < 0");
  if (pool_factor < 1) throw ConfigError("train: pool_factor must be >= 1");
  if (background_cube_rate < 0.0 || background_cube_rate > 1.0)
    throw ConfigError("train: background_cube_rate in [0, 1]");
  loss.validate();
}

double TrainConfig::lr_at(std::size_t unit, std::size_t total) const {
  if (total == 0) return lr;
  const double f = static_cast<double>(unit) / static_cast<double>(total);
  if (f >= decay_at[1]) return lr * decay_factor * decay_factor;
  if (f >= decay_at[0]) return lr * decay_factor;
  return lr;
}

std::vector<std::size_t> mine_hard_negatives(const std::vector<double>& scores,
                                             std::size_t pool_size,
                                             std::size_t k, Rng& rng) {
  const std::size_t n = scores.size();
  if (k > pool_size) throw ConfigError("mining: K must not exceed pool_size");
  if (n <= k) {
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    return all;
  }
  // uniform random pool via partial Fisher-Yates
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  const std::size_t take = std::min(pool_size, n);
  for (std::size_t i = 0; i < take; ++i)
    std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(take);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  idx.resize(std::min(k, idx.size()));
  std::sort(idx.begin(), idx.end());
  return idx;
}

CubeSampler::CubeSampler(std::vector<TrainScan> scans, std::size_t cube_side,
                         double background_rate, AugmentConfig augment)
    : scans_(std::move(scans)),
      side_(cube_side),
      background_rate_(background_rate),
      augment_(augment) {
  if (scans_.empty()) throw ConfigError("sampler: no training scans");
  if (side_ == 0) throw ConfigError("sampler: zero cube side");
  for (std::size_t i = 0; i < scans_.size(); ++i) {
    scans_[i].volume.validate("sampler scan " + std::to_string(i));
    if (!scans_[i].truths.empty()) with_truths_.push_back(i);
  }
  augment_.validate();
}

CubeSample CubeSampler::sample(Rng& rng) const {
  const bool background =
      with_truths_.empty() || rng.uniform() < background_rate_;
  const std::size_t scan_idx =
      background ? rng.below(scans_.size())
                 : with_truths_[rng.below(with_truths_.size())];
  const TrainScan& scan = scans_[scan_idx];
  const auto& e = scan.volume.extents;
  auto clamp_origin = [&](long o, std::size_t extent) {
    const long max_o = extent > side_ ? static_cast<long>(extent - side_) : 0;
    return static_cast<std::size_t>(std::clamp<long>(o, 0, max_o));
  };

  CubeSample s;
  if (background) {
    for (int a = 0; a < 3; ++a)
      s.origin[a] = e[a] > side_ ? rng.below(e[a] - side_ + 1) : 0;
  } else {
    const BoxCube& n = scan.truths[rng.below(scan.truths.size())];
    const long jit = static_cast<long>(side_ / 8);
    const double c[3] = {n.z, n.y, n.x};
    for (int a = 0; a < 3; ++a)
      s.origin[a] = clamp_origin(
          std::llround(c[a]) - static_cast<long>(side_) / 2 +
              rng.uniform_int(-jit, jit),
          e[a]);
  }
  s.cube = cut_cube(scan.volume, s.origin, side_);
  const double sd = static_cast<double>(side_);
  for (const BoxCube& t : scan.truths) {
    const double lz = t.z - static_cast<double>(s.origin[0]);
    const double ly = t.y - static_cast<double>(s.origin[1]);
    const double lx = t.x - static_cast<double>(s.origin[2]);
    if (lz >= 0.0 && lz < sd && ly >= 0.0 && ly < sd && lx >= 0.0 && lx < sd)
      s.truths.push_back({lx, ly, lz, t.r});
  }
  return augment(s, augment_, rng);
}

namespace {

std::string rng_to_string(Rng& rng) {
  std::ostringstream oss;
  oss << rng.engine();
  return oss.str();
}

void rng_from_string(Rng& rng, const std::string& s) {
  std::istringstream iss(s);
  iss >> rng.engine();
  if (!iss) throw DataError("checkpoint: unparsable rng state");
}

double ggo_probability(const std::array<double, 2>& logits) {
  const double m = std::max(logits[0], logits[1]);
  const double e0 = std::exp(logits[0] - m);
  const double e1 = std::exp(logits[1] - m);
  return e1 / (e0 + e1);
}

}  // namespace

Stage1Trainer::Stage1Trainer(model::Stage1Classifier& net,
                             std::vector<PatchSample> patches,
                             const TrainConfig& cfg)
    : net_(net),
      patches_(std::move(patches)),
      cfg_(cfg),
      rng_(cfg.seed),
      opt_(cfg.lr, cfg.momentum, cfg.weight_decay) {
  cfg_.validate();
  if (patches_.empty()) throw ConfigError("stage 1: empty patch set");
  bool has_pos = false, has_neg = false;
  const std::size_t side = net_.patch_side();
  for (const auto& p : patches_) {
    (p.label == 1 ? has_pos : has_neg) = true;
    const auto& sh = p.patch.shape();
    if (sh[0] != 1 || sh[1] != 1 || sh[2] != side || sh[3] != side ||
        sh[4] != side)
      throw ConfigError("stage 1: patch shape " + p.patch.shape_str() +
                        " does not match patch side " + std::to_string(side));
  }
  if (!has_pos || !has_neg)
    throw ConfigError("stage 1: patch set must contain both classes");
}

void Stage1Trainer::run_epochs(std::size_t epochs, std::ostream* log) {
  const std::size_t side = net_.patch_side();
  std::vector<std::size_t> order(patches_.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t e = 0; e < epochs; ++e) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng_.below(i)]);
    opt_.set_lr(cfg_.lr_at(epoch_, cfg_.epochs));
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg_.batch) {
      const std::size_t b = std::min(cfg_.batch, order.size() - start);
      Tensor5 batch(Tensor5::Shape{b, 1, side, side, side});
      std::vector<int> labels(b);
      const std::size_t stride = side * side * side;
      for (std::size_t j = 0; j < b; ++j) {
        const PatchSample& p = patches_[order[start + j]];
        std::copy(p.patch.vec().begin(), p.patch.vec().end(),
                  batch.data() + j * stride);
        labels[j] = p.label;
      }
      const auto probs = net_.forward(batch, nn::Mode::kTrain, true);
      for (std::size_t j = 0; j < b; ++j)
        if ((probs[j][1] > probs[j][0] ? 1 : 0) == labels[j]) ++correct;
      net_.zero_grad();
      loss_sum += net_.loss_and_backward(labels);
      opt_.step(net_.params());
    }
    loss_history_.push_back(loss_sum / static_cast<double>(patches_.size()));
    acc_history_.push_back(static_cast<double>(correct) /
                           static_cast<double>(patches_.size()));
    ++epoch_;
    if (log)
      *log << "{\"stage\":1,\"epoch\":" << epoch_
           << ",\"loss\":" << loss_history_.back()
           << ",\"accuracy\":" << acc_history_.back()
           << ",\"lr\":" << opt_.lr() << "}\n";
  }
}

Checkpoint Stage1Trainer::checkpoint() const {
  Checkpoint ck;
  ck.stage = 1;
  ck.epoch = epoch_;
  ck.model = net_.config();
  ck.rng_state = rng_to_string(const_cast<Rng&>(rng_));
  // history rows reused as (mean loss, mean loss, accuracy)
  for (std::size_t i = 0; i < loss_history_.size(); ++i)
    ck.history.push_back(
        {loss_history_[i], loss_history_[i], acc_history_[i], 0, 0});
  capture_params(ck, const_cast<Stage1Trainer*>(this)->net_.params());
  capture_params(ck, const_cast<Stage1Trainer*>(this)->net_.state());
  capture_optimizer(ck, opt_);
  return ck;
}

void Stage1Trainer::restore(const Checkpoint& ck) {
  if (ck.stage != 1) throw DataError("checkpoint: not a stage-1 checkpoint");
  restore_params(ck, net_.params());
  restore_params(ck, net_.state());
  restore_optimizer(ck, opt_);
  rng_from_string(rng_, ck.rng_state);
  epoch_ = ck.epoch;
  loss_history_.clear();
  acc_history_.clear();
  for (const auto& h : ck.history) {
    loss_history_.push_back(h.total);
    acc_history_.push_back(h.localization_term);
  }
}

Stage2Trainer::Stage2Trainer(model::PiaNet& net, const CubeSampler& data,
                             const TrainConfig& cfg)
    : net_(net),
      data_(data),
      cfg_(cfg),
      anchors_(boxes::generate_anchors(net.config())),
      rng_(cfg.seed),
      opt_(cfg.lr, cfg.momentum, cfg.weight_decay) {
  cfg_.validate();
}

loss::LossBreakdown Stage2Trainer::train_one_cube(const CubeSample& cube) {
  const auto pred = net_.forward(cube.cube, nn::Mode::kTrain, true);
  const std::size_t n = pred.logits.size();
  std::vector<double> scores(n);
  for (std::size_t i = 0; i < n; ++i) scores[i] = ggo_probability(pred.logits[i]);

  const auto assignment = boxes::match_anchors(anchors_, cube.truths,
                                               cfg_.neg_iou_max);
  std::vector<std::array<double, 4>> targets(n, {0, 0, 0, 0});
  for (std::size_t g = 0; g < cube.truths.size(); ++g) {
    const std::size_t a = assignment.anchor_of_gt[g];
    targets[a] = encode_box(cube.truths[g], anchors_.cubes[a]);
  }

  std::vector<std::size_t> mined;
  const std::vector<std::size_t>* selected = nullptr;
  if (cfg_.mining) {
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < n; ++i)
      if (assignment.labels[i] == boxes::AnchorLabel::kNegative)
        candidates.push_back(i);
    std::vector<double> cand_scores(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i)
      cand_scores[i] = scores[candidates[i]];
    const std::size_t k = std::max<std::size_t>(
        cfg_.k_floor,
        static_cast<std::size_t>(std::llround(
            cfg_.k_per_positive *
            static_cast<double>(assignment.positive_count()))));
    const auto picked =
        mine_hard_negatives(cand_scores, cfg_.pool_factor * k, k, rng_);
    mined.reserve(picked.size());
    for (std::size_t p : picked) mined.push_back(candidates[p]);
    selected = &mined;
  }

  std::vector<double> grad_scores(n, 0.0);
  std::vector<std::array<double, 4>> grad_offsets(n, {0, 0, 0, 0});
  const auto breakdown =
      loss::multitask_loss(assignment, scores, pred.offsets, targets, selected,
                           cfg_.loss, &grad_scores, &grad_offsets);

  std::vector<std::array<double, 2>> grad_logits(n, {0.0, 0.0});
  for (std::size_t i = 0; i < n; ++i) {
    if (grad_scores[i] == 0.0) continue;
    const double p = scores[i];
    const double d = grad_scores[i] * p * (1.0 - p);
    grad_logits[i] = {-d, d};
  }
  net_.backward(grad_offsets, grad_logits);
  return breakdown;
}

void Stage2Trainer::run_steps(std::size_t steps, std::ostream* log) {
  for (std::size_t s = 0; s < steps; ++s) {
    opt_.set_lr(cfg_.lr_at(step_, cfg_.steps));
    net_.zero_grad();
    loss::LossBreakdown acc;
    for (std::size_t c = 0; c < cfg_.cubes_per_step; ++c) {
      loss::LossBreakdown b;
      try {
        b = train_one_cube(data_.sample(rng_));
      } catch (const NumericError& e) {
        throw NumericError("stage 2 step " + std::to_string(step_) + ": " +
                           e.what());
      }
      acc.total += b.total;
      acc.confidence_term += b.confidence_term;
      acc.localization_term += b.localization_term;
      acc.positives += b.positives;
      acc.negatives += b.negatives;
    }
    opt_.step(net_.params());
    history_.push_back(acc);
    ++step_;
    if (log)
      *log << "{\"stage\":2,\"step\":" << step_ << ",\"loss\":" << acc.total
           << ",\"conf\":" << acc.confidence_term
           << ",\"loc\":" << acc.localization_term
           << ",\"positives\":" << acc.positives
           << ",\"negatives\":" << acc.negatives << ",\"lr\":" << opt_.lr()
           << "}\n";
  }
}

Checkpoint Stage2Trainer::checkpoint() const {
  Checkpoint ck;
  ck.stage = 2;
  ck.step = step_;
  ck.model = net_.config();
  ck.rng_state = rng_to_string(const_cast<Rng&>(rng_));
  ck.history = history_;
  capture_params(ck, const_cast<Stage2Trainer*>(this)->net_.params());
  capture_params(ck, const_cast<Stage2Trainer*>(this)->net_.state());
  capture_optimizer(ck, opt_);
  return ck;
}

void Stage2Trainer::restore(const Checkpoint& ck) {
  if (ck.stage != 2) throw DataError("checkpoint: not a stage-2 checkpoint");
  restore_params(ck, net_.params());
  restore_params(ck, net_.state());
  restore_optimizer(ck, opt_);
  rng_from_string(rng_, ck.rng_state);
  step_ = ck.step;
  history_ = ck.history;
}

std::vector<Detection> detect_cube(model::PiaNet& net,
                                   const boxes::AnchorSet& anchors,
                                   const Tensor5& cube, double score_min,
                                   double nms_iou) {
  const auto pred = net.forward(cube, nn::Mode::kInfer, false);
  std::vector<Detection> raw;
  for (std::size_t i = 0; i < pred.logits.size(); ++i) {
    const double p = ggo_probability(pred.logits[i]);
    if (p < score_min) continue;
    const BoxCube b = decode_box(pred.offsets[i], anchors.cubes[i]);
    if (!std::isfinite(b.x) || !std::isfinite(b.y) || !std::isfinite(b.z) ||
        !std::isfinite(b.r))
      continue;
    raw.push_back({b, p});
  }
  return boxes::nms(raw, nms_iou);
}

}  // namespace pianet::train
