#pragma once

#include <array>
#include <cstddef>
#include <utility>
#include <vector>

#include "pianet/errors.hpp"

namespace pianet::model {

/// Network configuration. The defaults reproduce the published layer table:
/// 128-cube input, contracting widths 24/32/64/64/64, expanding 64/64/128,
/// prediction at feature sides 32/16/8 with 1/3/5 anchor sizes, and 9 anchor
/// side lengths 4..32 mm (47,616 anchors in total).
struct PiaNetConfig {
  std::size_t input_cube_side = 128;
  std::array<std::size_t, 5> contracting_widths{24, 32, 64, 64, 64};
  std::array<std::size_t, 3> expanding_widths{64, 64, 128};
  /// (feature-map side, anchor-size count), coarsest-to-finest resolution;
  /// this order is also the flattened prediction/anchor enumeration order.
  std::vector<std::pair<std::size_t, std::size_t>> prediction_scales{
      {32, 1}, {16, 3}, {8, 5}};
  std::vector<double> anchor_sides_mm{4, 6, 8, 10, 12, 16, 20, 26, 32};

  /// Same topology scaled to a different cube side (for desk-scale runs).
  static PiaNetConfig with_side(std::size_t side) {
    PiaNetConfig c;
    c.input_cube_side = side;
    c.prediction_scales = {{side / 4, 1}, {side / 8, 3}, {side / 16, 5}};
    return c;
  }

  std::size_t total_anchors() const {
    std::size_t n = 0;
    for (const auto& [s, a] : prediction_scales) n += s * s * s * a;
    return n;
  }

  void validate() const {
    if (input_cube_side < 16 || input_cube_side % 16 != 0)
      throw ConfigError("PiaNetConfig: cube side must be a positive multiple of 16");
    if (prediction_scales.size() != 3)
      throw ConfigError("PiaNetConfig: exactly three prediction scales expected");
    const std::size_t sides[3] = {input_cube_side / 4, input_cube_side / 8,
                                  input_cube_side / 16};
    std::size_t total_sizes = 0;
    for (int i = 0; i < 3; ++i) {
      if (prediction_scales[i].first != sides[i])
        throw ConfigError("PiaNetConfig: prediction scale " + std::to_string(i) +
                          " side " + std::to_string(prediction_scales[i].first) +
                          " does not match cube side / " +
                          std::to_string(4 << i));
      if (prediction_scales[i].second == 0)
        throw ConfigError("PiaNetConfig: anchor-size count must be positive");
      total_sizes += prediction_scales[i].second;
    }
    if (anchor_sides_mm.size() != total_sizes)
      throw ConfigError("PiaNetConfig: " + std::to_string(anchor_sides_mm.size()) +
                        " anchor sides for " + std::to_string(total_sizes) +
                        " anchor-size slots");
    for (std::size_t i = 0; i < anchor_sides_mm.size(); ++i) {
      if (anchor_sides_mm[i] <= 0.0 ||
          (i > 0 && anchor_sides_mm[i] <= anchor_sides_mm[i - 1]))
        throw ConfigError("PiaNetConfig: anchor sides must be strictly increasing");
    }
    for (std::size_t w : contracting_widths)
      if (w == 0) throw ConfigError("PiaNetConfig: zero contracting width");
    for (std::size_t w : expanding_widths)
      if (w == 0) throw ConfigError("PiaNetConfig: zero expanding width");
  }
};

}  // namespace pianet::model
