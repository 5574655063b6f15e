#pragma once

#include <iosfwd>
#include <optional>

#include "pianet/data/augment.hpp"
#include "pianet/data/cubes.hpp"
#include "pianet/model/pianet.hpp"
#include "pianet/train/checkpoint.hpp"

namespace pianet::train {

struct TrainConfig {
  double lr = 0.01;
  double decay_factor = 0.1;
  std::array<double, 2> decay_at{0.6, 0.85};  // fractions of the schedule
  double momentum = 0.9;
  double weight_decay = 1e-4;

  std::size_t batch = 8;           // stage-1 patches per update
  std::size_t epochs = 20;         // stage-1 schedule length
  std::size_t cubes_per_step = 2;  // stage-2 cubes per update
  std::size_t steps = 400;         // stage-2 schedule length
  std::uint64_t seed = 0;

  loss::LossConfig loss;
  bool mining = true;
  std::size_t k_floor = 8;       // hard-negative count floor
  double k_per_positive = 2.0;   // K = max(floor, this * positives)
  std::size_t pool_factor = 16;  // random pool = factor * K
  double neg_iou_max = 0.02;
  double background_cube_rate = 0.2;

  void validate() const;
  double lr_at(std::size_t unit, std::size_t total) const;
};

// Scores all negative candidates were computed by the caller; this picks a
// uniform random pool of pool_size candidates and keeps the top-K by score
// (ties by lower index). Fewer candidates than K: everything is returned.
std::vector<std::size_t> mine_hard_negatives(const std::vector<double>& scores,
                                             std::size_t pool_size,
                                             std::size_t k, Rng& rng);

// Draws training cubes from preprocessed scans: mostly nodule-centred crops
// with jitter, a configurable share of pure background, flip/resize
// augmentation on top.
struct TrainScan {
  Volume volume;               // normalized, isotropic
  std::vector<BoxCube> truths;  // voxel coordinates
};

class CubeSampler {
 public:
  CubeSampler(std::vector<TrainScan> scans, std::size_t cube_side,
              double background_rate, AugmentConfig augment);
  CubeSample sample(Rng& rng) const;
  std::size_t scan_count() const { return scans_.size(); }

 private:
  std::vector<TrainScan> scans_;
  std::vector<std::size_t> with_truths_;
  std::size_t side_;
  double background_rate_;
  AugmentConfig augment_;
};

// Stage-1: classifier pretraining on labeled patches with softmax
// cross-entropy. Single-class patch sets are rejected.
class Stage1Trainer {
 public:
  Stage1Trainer(model::Stage1Classifier& net, std::vector<PatchSample> patches,
                const TrainConfig& cfg);

  void run_epochs(std::size_t epochs, std::ostream* log = nullptr);
  Checkpoint checkpoint() const;
  void restore(const Checkpoint& ck);

  std::size_t epoch() const { return epoch_; }
  // Per-epoch mean loss / training accuracy.
  const std::vector<double>& loss_history() const { return loss_history_; }
  const std::vector<double>& accuracy_history() const { return acc_history_; }

 private:
  model::Stage1Classifier& net_;
  std::vector<PatchSample> patches_;
  TrainConfig cfg_;
  Rng rng_;
  nn::Sgd opt_;
  std::size_t epoch_ = 0;
  std::vector<double> loss_history_;
  std::vector<double> acc_history_;
};

// Stage-2: multi-task fine-tuning of the detector with hard negative mining.
class Stage2Trainer {
 public:
  Stage2Trainer(model::PiaNet& net, const CubeSampler& data,
                const TrainConfig& cfg);

  void run_steps(std::size_t steps, std::ostream* log = nullptr);
  Checkpoint checkpoint() const;
  void restore(const Checkpoint& ck);

  std::size_t step() const { return step_; }
  const std::vector<loss::LossBreakdown>& history() const { return history_; }

 private:
  loss::LossBreakdown train_one_cube(const CubeSample& cube);

  model::PiaNet& net_;
  const CubeSampler& data_;
  TrainConfig cfg_;
  boxes::AnchorSet anchors_;
  Rng rng_;
  nn::Sgd opt_;
  std::size_t step_ = 0;
  std::vector<loss::LossBreakdown> history_;
};

// Forward + decode + NMS on one cube; scores are GGO softmax probabilities,
// kept above score_min before NMS.
std::vector<Detection> detect_cube(model::PiaNet& net,
                                   const boxes::AnchorSet& anchors,
                                   const Tensor5& cube, double score_min = 0.1,
                                   double nms_iou = 0.1);

}  // namespace pianet::train
