#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pianet/loss/loss.hpp"
#include "pianet/model/config.hpp"
#include "pianet/nn/layers.hpp"
#include "pianet/nn/sgd.hpp"

namespace pianet::train {

struct NamedTensor {
  Tensor5::Shape shape{};
  std::vector<double> data;
};

// Full training snapshot: named f64 tensors (parameters, batch-norm running
// stats, optimizer velocities under "opt."), schedule position, rng stream
// state, loss history, and the model configuration needed to rebuild the
// network. On disk: "PIANETCK" magic, version, a JSON manifest, then the
// tensor payloads little-endian in manifest order.
struct Checkpoint {
  std::uint32_t version = 1;
  int stage = 0;  // 1 = classifier pretraining, 2 = detector fine-tuning
  std::uint64_t epoch = 0;
  std::uint64_t step = 0;
  std::string rng_state;
  model::PiaNetConfig model;
  std::vector<loss::LossBreakdown> history;
  std::map<std::string, NamedTensor> tensors;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

// Copies live values into / out of the checkpoint by parameter name.
void capture_params(Checkpoint& ck, const std::vector<nn::ParamRef>& refs);
void capture_optimizer(Checkpoint& ck, const nn::Sgd& opt);
// Restores every ref from the checkpoint; missing name or shape mismatch
// raises DataError before anything is written.
void restore_params(const Checkpoint& ck, const std::vector<nn::ParamRef>& refs);
void restore_optimizer(const Checkpoint& ck, nn::Sgd& opt);

// Loads only the feature-extraction tensors ("fe." prefix) into a detector
// or classifier; the prediction heads keep their fresh initialization.
// Returns the number of tensors copied.
std::size_t transfer_features(const Checkpoint& ck,
                              const std::vector<nn::ParamRef>& refs);

}  // namespace pianet::train
