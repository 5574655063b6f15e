#include "pianet/model/pianet.hpp"

#include <algorithm>
#include <cmath>

#include "pianet/errors.hpp"
#include "pianet/nn/ops.hpp"

namespace pianet::model {

namespace {

void check_finite(const Tensor5& t, const std::string& layer) {
  if (!t.all_finite())
    throw NumericError("non-finite activation in layer " + layer);
}

void log_shape(ShapeLog* log, const std::string& name, const Tensor5& t) {
  if (log) log->push_back({name, t.shape()});
}

}  // namespace

std::vector<Tensor5> source_pyramid(const Tensor5& cube, std::size_t expected_side) {
  if (cube.depth() != expected_side || cube.height() != expected_side ||
      cube.width() != expected_side)
    throw ConfigError("source_pyramid: cube " + cube.shape_str() +
                      " does not have the configured side " +
                      std::to_string(expected_side));
  std::vector<Tensor5> pyramid;
  Tensor5 cur = nn::avgpool3d(cube, 2, 2);
  for (int level = 0; level < 4; ++level) {
    Tensor5 next;
    if (level < 3) next = nn::avgpool3d(cur, 2, 2);
    pyramid.push_back(std::move(cur));
    cur = std::move(next);
  }
  return pyramid;
}

FeatureExtractor::FeatureExtractor(const PiaNetConfig& config, Rng& rng)
    : cfg_(config) {
  cfg_.validate();
  const auto& cw = cfg_.contracting_widths;
  const auto& ew = cfg_.expanding_widths;
  if (ew[0] != cw[3] || ew[1] != cw[2])
    throw ConfigError(
        "FeatureExtractor: unpooling requires expanding widths to match the "
        "contracting widths at the same scale (expanding[0] == contracting[3], "
        "expanding[1] == contracting[2])");

  for (int b = 0; b < 5; ++b) {
    const std::size_t in_ch = b == 0 ? 1 : cw[b - 1] + 1;  // +1: source channel
    blocks_[b].conv = nn::Conv3dLayer(in_ch, cw[b], 3, 1, 1, rng);
    blocks_[b].bn = nn::BatchNorm3dLayer(cw[b]);
    blocks_[b].pooled = b < 4;
  }
  neck_ = nn::Conv3dLayer(cw[4], ew[0], 1, 1, 0, rng);
  neck_bn_ = nn::BatchNorm3dLayer(ew[0]);

  // Decov blocks: unpool, deconv, BN, ReLU, skip concat, 1x1x1 fusion.
  const std::size_t skip[2] = {cw[2], cw[1]};
  const std::size_t din[2] = {ew[0], ew[1]};
  const std::size_t dout[2] = {ew[1], ew[2]};
  for (int d = 0; d < 2; ++d) {
    decovs_[d].deconv = nn::Deconv3dLayer(din[d], dout[d], 3, 1, 1, rng);
    decovs_[d].bn = nn::BatchNorm3dLayer(dout[d]);
    decovs_[d].fuse = nn::Conv3dLayer(dout[d] + skip[d], dout[d], 1, 1, 0, rng);
    decovs_[d].fuse_bn = nn::BatchNorm3dLayer(dout[d]);
    decovs_[d].skip_channels = skip[d];
    decovs_[d].deconv_in = din[d];
  }
}

std::array<Tensor5, 3> FeatureExtractor::forward(const Tensor5& cube,
                                                 nn::Mode mode, bool cache,
                                                 ShapeLog* log) {
  const std::size_t side = cube.depth();
  if (cube.channels() != 1 || cube.height() != side || cube.width() != side ||
      side % 16 != 0)
    throw ConfigError("FeatureExtractor: expected a single-channel cube with "
                      "side divisible by 16, got " + cube.shape_str());
  log_shape(log, "input", cube);

  std::vector<Tensor5> pyramid;
  {
    Tensor5 cur = cube;
    for (int level = 0; level < 4; ++level) {
      cur = nn::avgpool3d(cur, 2, 2);
      pyramid.push_back(cur);
    }
  }

  // Contracting pathway with source connections.
  Tensor5 x = cube;
  std::array<Tensor5, 4> block_out;  // pooled outputs of blocks 1..4
  for (int b = 0; b < 5; ++b) {
    Tensor5 t = blocks_[b].conv.forward(x, cache);
    t = blocks_[b].bn.forward(t, mode, cache);
    t = blocks_[b].relu.forward(t, cache);
    if (blocks_[b].pooled) t = blocks_[b].pool.forward(t);
    check_finite(t, "conv_block_" + std::to_string(b + 1));
    log_shape(log, "conv_block_" + std::to_string(b + 1), t);
    if (b < 4) {
      block_out[b] = t;
      x = nn::concat_channels(t, pyramid[b]);
      log_shape(log, "concat_" + std::to_string(b + 1), x);
    } else {
      x = std::move(t);
    }
  }
  // Expanding pathway.
  Tensor5 f8 = neck_.forward(x, cache);
  f8 = neck_bn_.forward(f8, mode, cache);
  f8 = neck_relu_.forward(f8, cache);
  check_finite(f8, "conv1x1");
  log_shape(log, "conv1x1", f8);

  const Tensor5* skip_src[2] = {&block_out[2], &block_out[1]};
  const nn::MaxPool3dLayer* unpools[2] = {&blocks_[3].pool, &blocks_[2].pool};
  Tensor5 cur = f8;
  std::array<Tensor5, 3> features;
  features[2] = f8;
  for (int d = 0; d < 2; ++d) {
    Tensor5 up = nn::max_unpool3d(cur, unpools[d]->indices(),
                                  unpools[d]->input_shape());
    up = decovs_[d].deconv.forward(up, cache);
    up = decovs_[d].bn.forward(up, mode, cache);
    up = decovs_[d].relu.forward(up, cache);
    Tensor5 cat = nn::concat_channels(up, *skip_src[d]);
    Tensor5 fused = decovs_[d].fuse.forward(cat, cache);
    fused = decovs_[d].fuse_bn.forward(fused, mode, cache);
    fused = decovs_[d].fuse_relu.forward(fused, cache);
    check_finite(fused, "decov_" + std::to_string(d + 1));
    log_shape(log, "decov_" + std::to_string(d + 1), fused);
    features[1 - d] = fused;
    cur = fused;
  }
  return features;
}

Tensor5 FeatureExtractor::backward(std::array<Tensor5, 3> grads) {
  // grads arrive ordered [L/4, L/8, L/16] like forward's return.
  Tensor5 g_f16 = std::move(grads[1]);
  Tensor5 g_f8 = std::move(grads[2]);
  std::array<Tensor5, 2> g_skip;  // into block_out[2] and block_out[1]

  const nn::MaxPool3dLayer* unpools[2] = {&blocks_[3].pool, &blocks_[2].pool};
  Tensor5 g = std::move(grads[0]);
  for (int d = 1; d >= 0; --d) {
    g = decovs_[d].fuse_relu.backward(g);
    g = decovs_[d].fuse_bn.backward(g);
    g = decovs_[d].fuse.backward(g);
    auto [g_up, g_sk] = nn::concat_channels_backward(
        g.channels() - decovs_[d].skip_channels, g);
    g_skip[d] = std::move(g_sk);
    g_up = decovs_[d].relu.backward(g_up);
    g_up = decovs_[d].bn.backward(g_up);
    g_up = decovs_[d].deconv.backward(g_up);
    Tensor5 g_down = nn::max_unpool3d_backward(unpools[d]->indices(), g_up);
    Tensor5& target = d == 1 ? g_f16 : g_f8;
    for (std::size_t i = 0; i < target.size(); ++i) target[i] += g_down[i];
    if (d == 1) g = g_f16;
  }

  // Neck and block 5.
  Tensor5 gb = neck_relu_.backward(g_f8);
  gb = neck_bn_.backward(gb);
  gb = neck_.backward(gb);
  gb = blocks_[4].bn.backward(blocks_[4].relu.backward(gb));
  gb = blocks_[4].conv.backward(gb);

  // Contracting pathway in reverse; pyramid branches feed the input gradient.
  Tensor5 g_input;
  std::vector<Tensor5> pyr_grads(4);
  for (int b = 3; b >= 0; --b) {
    auto [g_block, g_pyr] =
        nn::concat_channels_backward(gb.channels() - 1, gb);
    pyr_grads[b] = std::move(g_pyr);
    if (b == 2)
      for (std::size_t i = 0; i < g_block.size(); ++i) g_block[i] += g_skip[0][i];
    if (b == 1)
      for (std::size_t i = 0; i < g_block.size(); ++i) g_block[i] += g_skip[1][i];
    Tensor5 t = blocks_[b].pool.backward(g_block);
    t = blocks_[b].relu.backward(t);
    t = blocks_[b].bn.backward(t);
    gb = blocks_[b].conv.backward(t);
  }
  g_input = std::move(gb);

  // Source-connection gradients: undo the average-pool cascade level by level.
  for (int level = 3; level >= 0; --level) {
    Tensor5 gp = std::move(pyr_grads[level]);
    for (int k = level; k >= 0; --k) {
      Tensor5::Shape up_shape = gp.shape();
      for (int a = 2; a < 5; ++a) up_shape[a] *= 2;
      gp = nn::avgpool3d_backward(up_shape, 2, 2, gp);
    }
    for (std::size_t i = 0; i < g_input.size(); ++i) g_input[i] += gp[i];
  }
  return g_input;
}

std::vector<nn::ParamRef> FeatureExtractor::params(const std::string& prefix) {
  std::vector<nn::ParamRef> out;
  auto add = [&out](std::vector<nn::ParamRef> v) {
    out.insert(out.end(), v.begin(), v.end());
  };
  for (int b = 0; b < 5; ++b) {
    add(blocks_[b].conv.params(prefix + ".block" + std::to_string(b + 1) + ".conv"));
    add(blocks_[b].bn.params(prefix + ".block" + std::to_string(b + 1) + ".bn"));
  }
  add(neck_.params(prefix + ".neck.conv"));
  add(neck_bn_.params(prefix + ".neck.bn"));
  for (int d = 0; d < 2; ++d) {
    const std::string p = prefix + ".decov" + std::to_string(d + 1);
    add(decovs_[d].deconv.params(p + ".deconv"));
    add(decovs_[d].bn.params(p + ".bn"));
    add(decovs_[d].fuse.params(p + ".fuse"));
    add(decovs_[d].fuse_bn.params(p + ".fuse_bn"));
  }
  return out;
}

std::vector<nn::ParamRef> FeatureExtractor::state(const std::string& prefix) {
  std::vector<nn::ParamRef> out;
  auto add = [&out](std::vector<nn::ParamRef> v) {
    out.insert(out.end(), v.begin(), v.end());
  };
  for (int b = 0; b < 5; ++b)
    add(blocks_[b].bn.state(prefix + ".block" + std::to_string(b + 1) + ".bn"));
  add(neck_bn_.state(prefix + ".neck.bn"));
  for (int d = 0; d < 2; ++d) {
    const std::string p = prefix + ".decov" + std::to_string(d + 1);
    add(decovs_[d].bn.state(p + ".bn"));
    add(decovs_[d].fuse_bn.state(p + ".fuse_bn"));
  }
  return out;
}

void FeatureExtractor::zero_grad() {
  for (auto& b : blocks_) {
    b.conv.zero_grad();
    b.bn.zero_grad();
  }
  neck_.zero_grad();
  neck_bn_.zero_grad();
  for (auto& d : decovs_) {
    d.deconv.zero_grad();
    d.bn.zero_grad();
    d.fuse.zero_grad();
    d.fuse_bn.zero_grad();
  }
}

PiaNet::PiaNet(const PiaNetConfig& config, std::uint64_t seed)
    : cfg_(config), init_rng_(seed), fe_(cfg_, init_rng_) {
  const auto& ew = cfg_.expanding_widths;
  const std::size_t feat_ch[3] = {ew[2], ew[1], ew[0]};
  for (int s = 0; s < 3; ++s) {
    const std::size_t a = cfg_.prediction_scales[s].second;
    box_heads_[s] = nn::Conv3dLayer(feat_ch[s], 4 * a, 3, 1, 1, init_rng_);
    cls_heads_[s] = nn::Conv3dLayer(feat_ch[s], 2 * a, 3, 1, 1, init_rng_);
  }
}

RawPrediction PiaNet::forward(const Tensor5& cube, nn::Mode mode, bool cache,
                              ShapeLog* log) {
  if (cube.depth() != cfg_.input_cube_side)
    throw ConfigError("PiaNet::forward: cube " + cube.shape_str() +
                      " does not match configured side " +
                      std::to_string(cfg_.input_cube_side));
  auto features = fe_.forward(cube, mode, cache, log);

  RawPrediction pred;
  pred.box_maps.resize(3);
  pred.score_maps.resize(3);
  const std::size_t total = cfg_.total_anchors();
  pred.offsets.resize(total);
  pred.logits.resize(total);

  std::size_t row = 0;
  for (int s = 0; s < 3; ++s) {
    pred.box_maps[s] = box_heads_[s].forward(features[s], cache);
    pred.score_maps[s] = cls_heads_[s].forward(features[s], cache);
    check_finite(pred.box_maps[s], "box_head_" + std::to_string(s + 1));
    check_finite(pred.score_maps[s], "cls_head_" + std::to_string(s + 1));
    if (log) {
      log->push_back({"head_" + std::to_string(s + 1) + "_box",
                      pred.box_maps[s].shape()});
      log->push_back({"head_" + std::to_string(s + 1) + "_cls",
                      pred.score_maps[s].shape()});
    }
    const auto [side, n_anchor] = cfg_.prediction_scales[s];
    const Tensor5& bm = pred.box_maps[s];
    const Tensor5& sm = pred.score_maps[s];
    for (std::size_t z = 0; z < side; ++z)
      for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x)
          for (std::size_t a = 0; a < n_anchor; ++a, ++row) {
            for (std::size_t k = 0; k < 4; ++k)
              pred.offsets[row][k] = bm.at(0, a * 4 + k, z, y, x);
            pred.logits[row][0] = sm.at(0, a * 2 + 0, z, y, x);
            pred.logits[row][1] = sm.at(0, a * 2 + 1, z, y, x);
          }
  }
  if (log) {
    log->push_back({"output_box_flat", {total, 4, 1, 1, 1}});
    log->push_back({"output_cls_flat", {total, 2, 1, 1, 1}});
  }
  return pred;
}

Tensor5 PiaNet::backward(const std::vector<std::array<double, 4>>& grad_offsets,
                         const std::vector<std::array<double, 2>>& grad_logits) {
  const std::size_t total = cfg_.total_anchors();
  if (grad_offsets.size() != total || grad_logits.size() != total)
    throw ConfigError("PiaNet::backward: flattened gradient row count mismatch");

  std::array<Tensor5, 3> feat_grads;
  std::size_t row = 0;
  for (int s = 0; s < 3; ++s) {
    const auto [side, n_anchor] = cfg_.prediction_scales[s];
    Tensor5 gbox(1, 4 * n_anchor, side, side, side);
    Tensor5 gcls(1, 2 * n_anchor, side, side, side);
    for (std::size_t z = 0; z < side; ++z)
      for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x)
          for (std::size_t a = 0; a < n_anchor; ++a, ++row) {
            for (std::size_t k = 0; k < 4; ++k)
              gbox.at(0, a * 4 + k, z, y, x) = grad_offsets[row][k];
            gcls.at(0, a * 2 + 0, z, y, x) = grad_logits[row][0];
            gcls.at(0, a * 2 + 1, z, y, x) = grad_logits[row][1];
          }
    Tensor5 gf = box_heads_[s].backward(gbox);
    Tensor5 gc = cls_heads_[s].backward(gcls);
    for (std::size_t i = 0; i < gf.size(); ++i) gf[i] += gc[i];
    feat_grads[s] = std::move(gf);
  }
  return fe_.backward(std::move(feat_grads));
}

std::vector<nn::ParamRef> PiaNet::params() {
  auto out = fe_.params("fe");
  for (int s = 0; s < 3; ++s) {
    auto b = box_heads_[s].params("head.box" + std::to_string(s + 1));
    out.insert(out.end(), b.begin(), b.end());
    auto c = cls_heads_[s].params("head.cls" + std::to_string(s + 1));
    out.insert(out.end(), c.begin(), c.end());
  }
  return out;
}

std::vector<nn::ParamRef> PiaNet::state() { return fe_.state("fe"); }

void PiaNet::zero_grad() {
  fe_.zero_grad();
  for (int s = 0; s < 3; ++s) {
    box_heads_[s].zero_grad();
    cls_heads_[s].zero_grad();
  }
}

ShapeLog probe_shapes(PiaNet& net) {
  ShapeLog log;
  const std::size_t side = net.config().input_cube_side;
  Tensor5 dummy(1, 1, side, side, side);
  net.forward(dummy, nn::Mode::kInfer, false, &log);
  return log;
}

PiaNet build_pianet(const PiaNetConfig& config, std::uint64_t seed) {
  PiaNet net(config, seed);
  const ShapeLog log = probe_shapes(net);

  const std::size_t L = config.input_cube_side;
  const auto& cw = config.contracting_widths;
  const auto& ew = config.expanding_widths;
  auto cube = [L](std::size_t c, std::size_t s) {
    return Tensor5::Shape{1, c, L / s, L / s, L / s};
  };
  std::vector<std::pair<std::string, Tensor5::Shape>> expected = {
      {"input", cube(1, 1)},
      {"conv_block_1", cube(cw[0], 2)},
      {"concat_1", cube(cw[0] + 1, 2)},
      {"conv_block_2", cube(cw[1], 4)},
      {"concat_2", cube(cw[1] + 1, 4)},
      {"conv_block_3", cube(cw[2], 8)},
      {"concat_3", cube(cw[2] + 1, 8)},
      {"conv_block_4", cube(cw[3], 16)},
      {"concat_4", cube(cw[3] + 1, 16)},
      {"conv_block_5", cube(cw[4], 16)},
      {"conv1x1", cube(ew[0], 16)},
      {"decov_1", cube(ew[1], 8)},
      {"decov_2", cube(ew[2], 4)},
  };
  for (int s = 0; s < 3; ++s) {
    const auto [side, a] = config.prediction_scales[s];
    const std::size_t div = L / side;
    expected.push_back({"head_" + std::to_string(s + 1) + "_box",
                        cube(4 * a, div)});
    expected.push_back({"head_" + std::to_string(s + 1) + "_cls",
                        cube(2 * a, div)});
  }

  expected.push_back({"output_box_flat", {config.total_anchors(), 4, 1, 1, 1}});
  expected.push_back({"output_cls_flat", {config.total_anchors(), 2, 1, 1, 1}});

  for (const auto& [name, shape] : expected) {
    auto it = std::find_if(log.begin(), log.end(),
                           [&](const ShapeProbe& p) { return p.layer == name; });
    if (it == log.end())
      throw ConfigError("build_pianet: probe missing layer " + name);
    if (it->shape != shape)
      throw ConfigError("build_pianet: layer " + name + " produced " +
                        Tensor5::shape_str(it->shape) + ", expected " +
                        Tensor5::shape_str(shape));
  }
  return net;
}

Stage1Classifier::Stage1Classifier(const PiaNetConfig& config, std::uint64_t seed)
    : cfg_(config), init_rng_(seed), fe_(cfg_, init_rng_) {
  head_ = nn::Conv3dLayer(cfg_.expanding_widths[2], 2, 1, 1, 0, init_rng_);
}

std::vector<std::array<double, 2>> Stage1Classifier::forward(
    const Tensor5& patches, nn::Mode mode, bool cache) {
  if (patches.depth() != patch_side())
    throw ConfigError("Stage1Classifier: patch " + patches.shape_str() +
                      " must have side " + std::to_string(patch_side()));
  auto features = fe_.forward(patches, mode, cache);
  for (int i = 0; i < 3; ++i) feat_shapes_[i] = features[i].shape();
  Tensor5 pooled = nn::global_avgpool3d(features[0]);
  Tensor5 logits = head_.forward(pooled, cache);

  const std::size_t B = patches.batch();
  probs_.assign(B, {0.0, 0.0});
  for (std::size_t b = 0; b < B; ++b) {
    const double z0 = logits.at(b, 0, 0, 0, 0), z1 = logits.at(b, 1, 0, 0, 0);
    const double m = std::max(z0, z1);
    const double e0 = std::exp(z0 - m), e1 = std::exp(z1 - m);
    probs_[b] = {e0 / (e0 + e1), e1 / (e0 + e1)};
  }
  return probs_;
}

double Stage1Classifier::loss_and_backward(const std::vector<int>& labels) {
  const std::size_t B = probs_.size();
  if (labels.size() != B)
    throw ConfigError("Stage1Classifier: label count does not match batch");
  double total = 0.0;
  Tensor5 glogits(B, 2, 1, 1, 1);
  for (std::size_t b = 0; b < B; ++b) {
    const int y = labels[b];
    if (y != 0 && y != 1) throw DataError("Stage1Classifier: label must be 0/1");
    const double p = std::max(probs_[b][y], 1e-300);
    total -= std::log(p);
    glogits.at(b, 0, 0, 0, 0) = probs_[b][0] - (y == 0 ? 1.0 : 0.0);
    glogits.at(b, 1, 0, 0, 0) = probs_[b][1] - (y == 1 ? 1.0 : 0.0);
  }
  Tensor5 gpooled = head_.backward(glogits);
  std::array<Tensor5, 3> grads;
  grads[0] = nn::global_avgpool3d_backward(feat_shapes_[0], gpooled);
  // The coarser maps do not feed the classifier head.
  grads[1] = Tensor5(feat_shapes_[1]);
  grads[2] = Tensor5(feat_shapes_[2]);
  fe_.backward(std::move(grads));
  return total;
}

std::vector<nn::ParamRef> Stage1Classifier::params() {
  auto out = fe_.params("fe");
  auto h = head_.params("cls.head");
  out.insert(out.end(), h.begin(), h.end());
  return out;
}

std::vector<nn::ParamRef> Stage1Classifier::state() { return fe_.state("fe"); }

void Stage1Classifier::zero_grad() {
  fe_.zero_grad();
  head_.zero_grad();
}

}  // namespace pianet::model
