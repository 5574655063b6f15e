#include "pianet/nn/ops.hpp"

#include <algorithm>
#include <cstdint>
#include <cmath>
#include <limits>
#include <string>

#include "pianet/errors.hpp"

namespace pianet::nn {

namespace {

// One flag per (batch, channel, z, y) row: true when any element is nonzero.
std::vector<std::uint8_t> nonzero_rows(const Tensor5& t) {
  const std::size_t rows = t.batch() * t.channels() * t.depth() * t.height();
  const std::size_t w = t.width();
  std::vector<std::uint8_t> live(rows, 0);
  const double* p = t.data();
  for (std::size_t r = 0; r < rows; ++r, p += w)
    for (std::size_t i = 0; i < w; ++i)
      if (p[i] != 0.0) {
        live[r] = 1;
        break;
      }
  return live;
}

std::size_t out_extent(std::size_t in, int k, int stride, int pad) {
  const long long n = static_cast<long long>(in) + 2 * pad - k;
  if (n < 0 || stride <= 0) return 0;
  return static_cast<std::size_t>(n / stride + 1);
}

void check_conv_shapes(const Tensor5& x, const ConvParams& p, int stride, int pad,
                       const char* op) {
  const auto& ws = p.weights.shape();
  if (x.channels() != ws[1])
    throw ConfigError(std::string(op) + ": input channels " + x.shape_str() +
                      " do not match kernel " + p.weights.shape_str());
  if (p.bias.size() != ws[0])
    throw ConfigError(std::string(op) + ": bias size " + std::to_string(p.bias.size()) +
                      " does not match out channels " + std::to_string(ws[0]));
  for (int a = 2; a < 5; ++a) {
    if (out_extent(x.shape()[a], static_cast<int>(ws[a]), stride, pad) == 0)
      throw ConfigError(std::string(op) + ": zero-extent output for input " +
                        x.shape_str() + " kernel " + p.weights.shape_str());
  }
}

}  // namespace

Tensor5 conv3d(const Tensor5& x, const ConvParams& p, int stride, int pad) {
  check_conv_shapes(x, p, stride, pad, "conv3d");
  const auto& ws = p.weights.shape();
  const std::size_t B = x.batch(), Ci = x.channels();
  const std::size_t Co = ws[0], kd = ws[2], kh = ws[3], kw = ws[4];
  const std::size_t D = x.depth(), H = x.height(), W = x.width();
  const std::size_t Do = out_extent(D, (int)kd, stride, pad);
  const std::size_t Ho = out_extent(H, (int)kh, stride, pad);
  const std::size_t Wo = out_extent(W, (int)kw, stride, pad);
  Tensor5 y(B, Co, Do, Ho, Wo);

  if (stride == 1) {
    // Row-buffered path: each output row accumulates in L1 across the whole
    // kernel and channel reduction instead of streaming the output plane
    // once per weight. All-zero input rows (masked-out lung background,
    // zero padding) are skipped outright.
    std::vector<double> acc(Wo);
    const std::vector<std::uint8_t> live = nonzero_rows(x);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t oc = 0; oc < Co; ++oc) {
        double* yp = y.data() + y.index(b, oc, 0, 0, 0);
        for (std::size_t oz = 0; oz < Do; ++oz)
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            std::fill(acc.begin(), acc.end(), p.bias[oc]);
            for (std::size_t ic = 0; ic < Ci; ++ic) {
              const double* xp = x.data() + x.index(b, ic, 0, 0, 0);
              const double* wk =
                  p.weights.data() + p.weights.index(oc, ic, 0, 0, 0);
              for (std::size_t kz = 0; kz < kd; ++kz) {
                const long long iz = (long long)(oz + kz) - pad;
                if (iz < 0 || iz >= (long long)D) continue;
                for (std::size_t ky = 0; ky < kh; ++ky) {
                  const long long iy = (long long)(oy + ky) - pad;
                  if (iy < 0 || iy >= (long long)H) continue;
                  if (!live[(b * Ci + ic) * D * H + (std::size_t)iz * H +
                            (std::size_t)iy])
                    continue;
                  const double* xrow =
                      xp + ((std::size_t)iz * H + (std::size_t)iy) * W;
                  const double* wrow = wk + (kz * kh + ky) * kw;
                  for (std::size_t kx = 0; kx < kw; ++kx) {
                    const double w = wrow[kx];
                    if (w == 0.0) continue;
                    const long long off = (long long)kx - pad;
                    const std::size_t x0 = (std::size_t)std::max(0LL, -off);
                    const std::size_t x1 =
                        (std::size_t)std::min((long long)Wo, (long long)W - off);
                    const double* __restrict xr = xrow + off;
                    double* __restrict a = acc.data();
                    for (std::size_t ox = x0; ox < x1; ++ox)
                      a[ox] += w * xr[ox];
                  }
                }
              }
            }
            std::copy(acc.begin(), acc.end(), yp + (oz * Ho + oy) * Wo);
          }
      }
    return y;
  }

  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t oc = 0; oc < Co; ++oc) {
      double* yp = y.data() + y.index(b, oc, 0, 0, 0);
      const double bias = p.bias[oc];
      for (std::size_t i = 0; i < Do * Ho * Wo; ++i) yp[i] = bias;
      for (std::size_t ic = 0; ic < Ci; ++ic) {
        const double* xp = x.data() + x.index(b, ic, 0, 0, 0);
        for (std::size_t kz = 0; kz < kd; ++kz)
          for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const double w = p.weights.at(oc, ic, kz, ky, kx);
              if (w == 0.0) continue;
              for (std::size_t oz = 0; oz < Do; ++oz) {
                const long long iz = (long long)oz * stride + (long long)kz - pad;
                if (iz < 0 || iz >= (long long)D) continue;
                for (std::size_t oy = 0; oy < Ho; ++oy) {
                  const long long iy = (long long)oy * stride + (long long)ky - pad;
                  if (iy < 0 || iy >= (long long)H) continue;
                  double* yrow = yp + (oz * Ho + oy) * Wo;
                  const double* xrow = xp + ((std::size_t)iz * H + (std::size_t)iy) * W;
                  if (stride == 1) {
                    const long long off = (long long)kx - pad;
                    const std::size_t x0 = (std::size_t)std::max(0LL, -off);
                    const std::size_t x1 =
                        (std::size_t)std::min((long long)Wo, (long long)W - off);
                    const double* xr = xrow + off;
                    for (std::size_t ox = x0; ox < x1; ++ox)
                      yrow[ox] += w * xr[ox];
                  } else {
                    for (std::size_t ox = 0; ox < Wo; ++ox) {
                      const long long ix = (long long)ox * stride + (long long)kx - pad;
                      if (ix < 0 || ix >= (long long)W) continue;
                      yrow[ox] += w * xrow[ix];
                    }
                  }
                }
              }
            }
      }
    }
  }
  return y;
}

Tensor5 conv3d_input_grad(const Tensor5& weights, int stride, int pad,
                          const Tensor5& gy, const Tensor5::Shape& x_shape) {
  const auto& ws = weights.shape();
  const std::size_t B = gy.batch(), Co = ws[0], Ci = ws[1];
  const std::size_t kd = ws[2], kh = ws[3], kw = ws[4];
  const std::size_t D = x_shape[2], H = x_shape[3], W = x_shape[4];
  const std::size_t Do = gy.depth(), Ho = gy.height(), Wo = gy.width();
  Tensor5 dx(x_shape);

  if (stride == 1) {
    // Gather form of the scatter below: dx(i) = sum_k w(k) gy(i - k + pad),
    // accumulated row by row in L1. All-zero gradient rows are skipped.
    std::vector<double> acc(W);
    const std::vector<std::uint8_t> live = nonzero_rows(gy);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t ic = 0; ic < Ci; ++ic) {
        double* dxp = dx.data() + dx.index(b, ic, 0, 0, 0);
        for (std::size_t iz = 0; iz < D; ++iz)
          for (std::size_t iy = 0; iy < H; ++iy) {
            std::fill(acc.begin(), acc.end(), 0.0);
            for (std::size_t oc = 0; oc < Co; ++oc) {
              const double* gp = gy.data() + gy.index(b, oc, 0, 0, 0);
              const double* wk =
                  weights.data() + weights.index(oc, ic, 0, 0, 0);
              for (std::size_t kz = 0; kz < kd; ++kz) {
                const long long oz = (long long)iz - (long long)kz + pad;
                if (oz < 0 || oz >= (long long)Do) continue;
                for (std::size_t ky = 0; ky < kh; ++ky) {
                  const long long oy = (long long)iy - (long long)ky + pad;
                  if (oy < 0 || oy >= (long long)Ho) continue;
                  if (!live[(b * Co + oc) * Do * Ho + (std::size_t)oz * Ho +
                            (std::size_t)oy])
                    continue;
                  const double* grow =
                      gp + ((std::size_t)oz * Ho + (std::size_t)oy) * Wo;
                  const double* wrow = wk + (kz * kh + ky) * kw;
                  for (std::size_t kx = 0; kx < kw; ++kx) {
                    const double w = wrow[kx];
                    if (w == 0.0) continue;
                    const long long off = pad - (long long)kx;  // ox = ix + off
                    const std::size_t x0 = (std::size_t)std::max(0LL, -off);
                    const std::size_t x1 =
                        (std::size_t)std::min((long long)W, (long long)Wo - off);
                    const double* __restrict gr = grow + off;
                    double* __restrict a = acc.data();
                    for (std::size_t ix = x0; ix < x1; ++ix)
                      a[ix] += w * gr[ix];
                  }
                }
              }
            }
            double* dxrow = dxp + (iz * H + iy) * W;
            for (std::size_t ix = 0; ix < W; ++ix) dxrow[ix] += acc[ix];
          }
      }
    return dx;
  }

  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t oc = 0; oc < Co; ++oc) {
      const double* gp = gy.data() + gy.index(b, oc, 0, 0, 0);
      for (std::size_t ic = 0; ic < Ci; ++ic) {
        double* dxp = dx.data() + dx.index(b, ic, 0, 0, 0);
        for (std::size_t kz = 0; kz < kd; ++kz)
          for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const double w = weights.at(oc, ic, kz, ky, kx);
              if (w == 0.0) continue;
              for (std::size_t oz = 0; oz < Do; ++oz) {
                const long long iz = (long long)oz * stride + (long long)kz - pad;
                if (iz < 0 || iz >= (long long)D) continue;
                for (std::size_t oy = 0; oy < Ho; ++oy) {
                  const long long iy = (long long)oy * stride + (long long)ky - pad;
                  if (iy < 0 || iy >= (long long)H) continue;
                  const double* grow = gp + (oz * Ho + oy) * Wo;
                  double* dxrow = dxp + ((std::size_t)iz * H + (std::size_t)iy) * W;
                  if (stride == 1) {
                    const long long off = (long long)kx - pad;
                    const std::size_t x0 = (std::size_t)std::max(0LL, -off);
                    const std::size_t x1 =
                        (std::size_t)std::min((long long)Wo, (long long)W - off);
                    double* dxr = dxrow + off;
                    for (std::size_t ox = x0; ox < x1; ++ox)
                      dxr[ox] += w * grow[ox];
                  } else {
                    for (std::size_t ox = 0; ox < Wo; ++ox) {
                      const long long ix = (long long)ox * stride + (long long)kx - pad;
                      if (ix < 0 || ix >= (long long)W) continue;
                      dxrow[ix] += w * grow[ox];
                    }
                  }
                }
              }
            }
      }
    }
  return dx;
}

namespace {

// dW and db of a convolution, given its input and output gradient.
void conv3d_param_grads(const Tensor5& x, const Tensor5::Shape& wshape, int stride,
                        int pad, const Tensor5& gy, Tensor5& dw,
                        std::vector<double>& db) {
  const std::size_t B = x.batch();
  const std::size_t Co = wshape[0], Ci = wshape[1];
  const std::size_t kd = wshape[2], kh = wshape[3], kw = wshape[4];
  const std::size_t D = x.depth(), H = x.height(), W = x.width();
  const std::size_t Do = gy.depth(), Ho = gy.height(), Wo = gy.width();
  dw = Tensor5(wshape);
  db.assign(Co, 0.0);

  if (stride == 1) {
    // Per-row dot products with the kernel accumulator resident in L1.
    std::vector<double> acc(kd * kh * kw);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t oc = 0; oc < Co; ++oc) {
        const double* gp = gy.data() + gy.index(b, oc, 0, 0, 0);
        double bsum = 0.0;
        for (std::size_t i = 0; i < Do * Ho * Wo; ++i) bsum += gp[i];
        db[oc] += bsum;
        for (std::size_t ic = 0; ic < Ci; ++ic) {
          const double* xp = x.data() + x.index(b, ic, 0, 0, 0);
          std::fill(acc.begin(), acc.end(), 0.0);
          for (std::size_t oz = 0; oz < Do; ++oz)
            for (std::size_t oy = 0; oy < Ho; ++oy) {
              const double* grow = gp + (oz * Ho + oy) * Wo;
              for (std::size_t kz = 0; kz < kd; ++kz) {
                const long long iz = (long long)(oz + kz) - pad;
                if (iz < 0 || iz >= (long long)D) continue;
                for (std::size_t ky = 0; ky < kh; ++ky) {
                  const long long iy = (long long)(oy + ky) - pad;
                  if (iy < 0 || iy >= (long long)H) continue;
                  const double* xrow =
                      xp + ((std::size_t)iz * H + (std::size_t)iy) * W;
                  double* arow = acc.data() + (kz * kh + ky) * kw;
                  for (std::size_t kx = 0; kx < kw; ++kx) {
                    const long long off = (long long)kx - pad;
                    const std::size_t x0 = (std::size_t)std::max(0LL, -off);
                    const std::size_t x1 =
                        (std::size_t)std::min((long long)Wo, (long long)W - off);
                    const double* __restrict xr = xrow + off;
                    const double* __restrict gr = grow;
                    double s = 0.0;
                    for (std::size_t ox = x0; ox < x1; ++ox)
                      s += gr[ox] * xr[ox];
                    arow[kx] += s;
                  }
                }
              }
            }
          double* dwk = dw.data() + dw.index(oc, ic, 0, 0, 0);
          for (std::size_t i = 0; i < acc.size(); ++i) dwk[i] += acc[i];
        }
      }
    return;
  }

  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t oc = 0; oc < Co; ++oc) {
      const double* gp = gy.data() + gy.index(b, oc, 0, 0, 0);
      double bsum = 0.0;
      for (std::size_t i = 0; i < Do * Ho * Wo; ++i) bsum += gp[i];
      db[oc] += bsum;
      for (std::size_t ic = 0; ic < Ci; ++ic) {
        const double* xp = x.data() + x.index(b, ic, 0, 0, 0);
        for (std::size_t kz = 0; kz < kd; ++kz)
          for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx) {
              double acc = 0.0;
              for (std::size_t oz = 0; oz < Do; ++oz) {
                const long long iz = (long long)oz * stride + (long long)kz - pad;
                if (iz < 0 || iz >= (long long)D) continue;
                for (std::size_t oy = 0; oy < Ho; ++oy) {
                  const long long iy = (long long)oy * stride + (long long)ky - pad;
                  if (iy < 0 || iy >= (long long)H) continue;
                  const double* grow = gp + (oz * Ho + oy) * Wo;
                  const double* xrow = xp + ((std::size_t)iz * H + (std::size_t)iy) * W;
                  if (stride == 1) {
                    const long long off = (long long)kx - pad;
                    const std::size_t x0 = (std::size_t)std::max(0LL, -off);
                    const std::size_t x1 =
                        (std::size_t)std::min((long long)Wo, (long long)W - off);
                    const double* xr = xrow + off;
                    for (std::size_t ox = x0; ox < x1; ++ox)
                      acc += grow[ox] * xr[ox];
                  } else {
                    for (std::size_t ox = 0; ox < Wo; ++ox) {
                      const long long ix = (long long)ox * stride + (long long)kx - pad;
                      if (ix < 0 || ix >= (long long)W) continue;
                      acc += grow[ox] * xrow[ix];
                    }
                  }
                }
              }
              dw.at(oc, ic, kz, ky, kx) += acc;
            }
      }
    }
}

}  // namespace

ConvGrads conv3d_backward(const Tensor5& x, const ConvParams& p, int stride,
                          int pad, const Tensor5& gy) {
  check_conv_shapes(x, p, stride, pad, "conv3d_backward");
  ConvGrads g;
  g.dx = conv3d_input_grad(p.weights, stride, pad, gy, x.shape());
  conv3d_param_grads(x, p.weights.shape(), stride, pad, gy, g.dw, g.db);
  return g;
}

Tensor5 deconv3d(const Tensor5& x, const ConvParams& p, int stride, int pad) {
  const auto& ws = p.weights.shape();  // (Cin, Cout, kd, kh, kw)
  if (x.channels() != ws[0])
    throw ConfigError("deconv3d: input channels " + x.shape_str() +
                      " do not match kernel " + p.weights.shape_str());
  if (p.bias.size() != ws[1])
    throw ConfigError("deconv3d: bias size does not match out channels");
  Tensor5::Shape out{x.batch(), ws[1], 0, 0, 0};
  for (int a = 2; a < 5; ++a) {
    const long long e =
        ((long long)x.shape()[a] - 1) * stride - 2 * pad + (long long)ws[a];
    if (e < 1)
      throw ConfigError("deconv3d: zero-extent output for input " + x.shape_str());
    out[a] = (std::size_t)e;
  }
  Tensor5 y = conv3d_input_grad(p.weights, stride, pad, x, out);
  for (std::size_t b = 0; b < y.batch(); ++b)
    for (std::size_t c = 0; c < y.channels(); ++c) {
      double* yp = y.data() + y.index(b, c, 0, 0, 0);
      const std::size_t n = y.depth() * y.height() * y.width();
      for (std::size_t i = 0; i < n; ++i) yp[i] += p.bias[c];
    }
  return y;
}

ConvGrads deconv3d_backward(const Tensor5& x, const ConvParams& p, int stride,
                            int pad, const Tensor5& gy) {
  ConvGrads g;
  // The map is the transpose of conv3d, so the roles of x and gy swap.
  ConvParams nobias{p.weights, std::vector<double>(p.weights.shape()[0], 0.0)};
  g.dx = conv3d(gy, nobias, stride, pad);
  conv3d_param_grads(gy, p.weights.shape(), stride, pad, x, g.dw, g.db);
  const std::size_t Co = p.weights.shape()[1];
  g.db.assign(Co, 0.0);
  for (std::size_t b = 0; b < gy.batch(); ++b)
    for (std::size_t c = 0; c < Co; ++c) {
      const double* gp = gy.data() + gy.index(b, c, 0, 0, 0);
      const std::size_t n = gy.depth() * gy.height() * gy.width();
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += gp[i];
      g.db[c] += s;
    }
  return g;
}

Tensor5 batchnorm3d(const Tensor5& x, BatchNormParams& p, Mode mode,
                    BatchNormCache* cache) {
  const std::size_t C = x.channels();
  if (p.scale.size() != C || p.shift.size() != C || p.run_mean.size() != C ||
      p.run_var.size() != C)
    throw ConfigError("batchnorm3d: parameter vectors sized " +
                      std::to_string(p.scale.size()) + " for input with " +
                      std::to_string(C) + " channels");
  if (p.eps <= 0.0) throw ConfigError("batchnorm3d: eps must be positive");

  const std::size_t B = x.batch();
  const std::size_t plane = x.depth() * x.height() * x.width();
  const double n = static_cast<double>(B * plane);
  Tensor5 y(x.shape());

  for (std::size_t c = 0; c < C; ++c) {
    double mean, var;
    if (mode == Mode::kTrain) {
      double s = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const double* xp = x.data() + x.index(b, c, 0, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) s += xp[i];
      }
      mean = s / n;
      double sv = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const double* xp = x.data() + x.index(b, c, 0, 0, 0);
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = xp[i] - mean;
          sv += d * d;
        }
      }
      var = sv / n;
      p.run_mean[c] = (1.0 - p.momentum) * p.run_mean[c] + p.momentum * mean;
      p.run_var[c] =
          (1.0 - p.momentum) * p.run_var[c] + p.momentum * std::max(var, 1e-300);
    } else {
      mean = p.run_mean[c];
      var = p.run_var[c];
    }
    const double inv_std = 1.0 / std::sqrt(var + p.eps);
    const double g = p.scale[c], sh = p.shift[c];
    for (std::size_t b = 0; b < B; ++b) {
      const double* xp = x.data() + x.index(b, c, 0, 0, 0);
      double* yp = y.data() + y.index(b, c, 0, 0, 0);
      for (std::size_t i = 0; i < plane; ++i)
        yp[i] = g * (xp[i] - mean) * inv_std + sh;
    }
    if (cache) {
      if (cache->mean.size() != C) {
        cache->mean.assign(C, 0.0);
        cache->inv_std.assign(C, 0.0);
      }
      cache->mean[c] = mean;
      cache->inv_std[c] = inv_std;
    }
  }
  return y;
}

BatchNormGrads batchnorm3d_backward(const Tensor5& x, const BatchNormParams& p,
                                    const BatchNormCache& cache, const Tensor5& gy) {
  require_same_shape(x, gy, "batchnorm3d_backward");
  const std::size_t B = x.batch(), C = x.channels();
  const std::size_t plane = x.depth() * x.height() * x.width();
  const double n = static_cast<double>(B * plane);

  BatchNormGrads g;
  g.dx = Tensor5(x.shape());
  g.dscale.assign(C, 0.0);
  g.dshift.assign(C, 0.0);

  for (std::size_t c = 0; c < C; ++c) {
    const double mean = cache.mean[c], inv_std = cache.inv_std[c];
    const double gamma = p.scale[c];
    double sum_gy = 0.0, sum_gy_xhat = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      const double* xp = x.data() + x.index(b, c, 0, 0, 0);
      const double* gp = gy.data() + gy.index(b, c, 0, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) {
        const double xhat = (xp[i] - mean) * inv_std;
        sum_gy += gp[i];
        sum_gy_xhat += gp[i] * xhat;
      }
    }
    g.dshift[c] = sum_gy;
    g.dscale[c] = sum_gy_xhat;
    // dx through the batch statistics.
    for (std::size_t b = 0; b < B; ++b) {
      const double* xp = x.data() + x.index(b, c, 0, 0, 0);
      const double* gp = gy.data() + gy.index(b, c, 0, 0, 0);
      double* dxp = g.dx.data() + g.dx.index(b, c, 0, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) {
        const double xhat = (xp[i] - mean) * inv_std;
        dxp[i] = gamma * inv_std *
                 (gp[i] - sum_gy / n - xhat * sum_gy_xhat / n);
      }
    }
  }
  return g;
}

Tensor5 relu(const Tensor5& x) {
  Tensor5 y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  return y;
}

Tensor5 relu_backward(const Tensor5& x, const Tensor5& gy) {
  require_same_shape(x, gy, "relu_backward");
  Tensor5 dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > 0.0 ? gy[i] : 0.0;
  return dx;
}

std::pair<Tensor5, PoolIndices> maxpool3d(const Tensor5& x, int window, int stride) {
  if (window != stride)
    throw ConfigError("maxpool3d: only window == stride pooling is supported");
  const std::size_t w = static_cast<std::size_t>(window);
  for (int a = 2; a < 5; ++a)
    if (x.shape()[a] % w != 0)
      throw ConfigError("maxpool3d: extent " + std::to_string(x.shape()[a]) +
                        " not divisible by window " + std::to_string(window));
  const std::size_t B = x.batch(), C = x.channels();
  const std::size_t Do = x.depth() / w, Ho = x.height() / w, Wo = x.width() / w;
  Tensor5 y(B, C, Do, Ho, Wo);
  PoolIndices idx;
  idx.shape = y.shape();
  idx.flat.resize(y.size());

  std::size_t o = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t oz = 0; oz < Do; ++oz)
        for (std::size_t oy = 0; oy < Ho; ++oy)
          for (std::size_t ox = 0; ox < Wo; ++ox, ++o) {
            double best = -std::numeric_limits<double>::infinity();
            std::size_t best_i = 0;
            for (std::size_t kz = 0; kz < w; ++kz)
              for (std::size_t ky = 0; ky < w; ++ky)
                for (std::size_t kx = 0; kx < w; ++kx) {
                  const std::size_t i =
                      x.index(b, c, oz * w + kz, oy * w + ky, ox * w + kx);
                  // First element in window order wins ties.
                  if (x[i] > best) {
                    best = x[i];
                    best_i = i;
                  }
                }
            y[o] = best;
            idx.flat[o] = best_i;
          }
  return {std::move(y), std::move(idx)};
}

Tensor5 maxpool3d_backward(const Tensor5::Shape& x_shape, const PoolIndices& idx,
                           const Tensor5& gy) {
  Tensor5 dx(x_shape);
  for (std::size_t i = 0; i < gy.size(); ++i) dx[idx.flat[i]] += gy[i];
  return dx;
}

Tensor5 avgpool3d(const Tensor5& x, int window, int stride) {
  if (window <= 0 || stride <= 0)
    throw ConfigError("avgpool3d: window and stride must be positive");
  const std::size_t B = x.batch(), C = x.channels();
  Tensor5::Shape os{B, C, 0, 0, 0};
  for (int a = 2; a < 5; ++a) {
    if (x.shape()[a] < static_cast<std::size_t>(window) ||
        (x.shape()[a] - window) % stride != 0)
      throw ConfigError("avgpool3d: extent " + std::to_string(x.shape()[a]) +
                        " incompatible with window " + std::to_string(window) +
                        " stride " + std::to_string(stride));
    os[a] = (x.shape()[a] - window) / stride + 1;
  }
  Tensor5 y(os);
  const double inv = 1.0 / (static_cast<double>(window) * window * window);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t oz = 0; oz < os[2]; ++oz)
        for (std::size_t oy = 0; oy < os[3]; ++oy)
          for (std::size_t ox = 0; ox < os[4]; ++ox) {
            double s = 0.0;
            for (int kz = 0; kz < window; ++kz)
              for (int ky = 0; ky < window; ++ky)
                for (int kx = 0; kx < window; ++kx)
                  s += x.at(b, c, oz * stride + kz, oy * stride + ky,
                            ox * stride + kx);
            y.at(b, c, oz, oy, ox) = s * inv;
          }
  return y;
}

Tensor5 avgpool3d_backward(const Tensor5::Shape& x_shape, int window, int stride,
                           const Tensor5& gy) {
  Tensor5 dx(x_shape);
  const double inv = 1.0 / (static_cast<double>(window) * window * window);
  for (std::size_t b = 0; b < gy.batch(); ++b)
    for (std::size_t c = 0; c < gy.channels(); ++c)
      for (std::size_t oz = 0; oz < gy.depth(); ++oz)
        for (std::size_t oy = 0; oy < gy.height(); ++oy)
          for (std::size_t ox = 0; ox < gy.width(); ++ox) {
            const double g = gy.at(b, c, oz, oy, ox) * inv;
            for (int kz = 0; kz < window; ++kz)
              for (int ky = 0; ky < window; ++ky)
                for (int kx = 0; kx < window; ++kx)
                  dx.at(b, c, oz * stride + kz, oy * stride + ky,
                        ox * stride + kx) += g;
          }
  return dx;
}

Tensor5 global_avgpool3d(const Tensor5& x) {
  Tensor5 y(x.batch(), x.channels(), 1, 1, 1);
  const std::size_t plane = x.depth() * x.height() * x.width();
  for (std::size_t b = 0; b < x.batch(); ++b)
    for (std::size_t c = 0; c < x.channels(); ++c) {
      const double* xp = x.data() + x.index(b, c, 0, 0, 0);
      double s = 0.0;
      for (std::size_t i = 0; i < plane; ++i) s += xp[i];
      y.at(b, c, 0, 0, 0) = s / static_cast<double>(plane);
    }
  return y;
}

Tensor5 global_avgpool3d_backward(const Tensor5::Shape& x_shape, const Tensor5& gy) {
  Tensor5 dx(x_shape);
  const std::size_t plane = x_shape[2] * x_shape[3] * x_shape[4];
  const double inv = 1.0 / static_cast<double>(plane);
  for (std::size_t b = 0; b < gy.batch(); ++b)
    for (std::size_t c = 0; c < gy.channels(); ++c) {
      const double g = gy.at(b, c, 0, 0, 0) * inv;
      double* dxp = dx.data() + dx.index(b, c, 0, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) dxp[i] = g;
    }
  return dx;
}

Tensor5 max_unpool3d(const Tensor5& x, const PoolIndices& idx,
                     const Tensor5::Shape& out_shape) {
  if (x.shape() != idx.shape)
    throw ConfigError("max_unpool3d: indices shape does not match input " +
                      x.shape_str());
  Tensor5 y(out_shape);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (idx.flat[i] >= y.size())
      throw DataError("max_unpool3d: index " + std::to_string(idx.flat[i]) +
                      " outside output of " + std::to_string(y.size()) +
                      " elements");
    y[idx.flat[i]] += x[i];
  }
  return y;
}

Tensor5 max_unpool3d_backward(const PoolIndices& idx, const Tensor5& gy) {
  Tensor5 dx(idx.shape);
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = gy[idx.flat[i]];
  return dx;
}

Tensor5 concat_channels(const Tensor5& a, const Tensor5& b) {
  for (int ax : {0, 2, 3, 4})
    if (a.shape()[ax] != b.shape()[ax])
      throw ConfigError("concat_channels: non-channel extents differ, " +
                        a.shape_str() + " vs " + b.shape_str());
  Tensor5 y(a.batch(), a.channels() + b.channels(), a.depth(), a.height(),
            a.width());
  const std::size_t plane = a.depth() * a.height() * a.width();
  for (std::size_t bt = 0; bt < a.batch(); ++bt) {
    for (std::size_t c = 0; c < a.channels(); ++c)
      std::copy_n(a.data() + a.index(bt, c, 0, 0, 0), plane,
                  y.data() + y.index(bt, c, 0, 0, 0));
    for (std::size_t c = 0; c < b.channels(); ++c)
      std::copy_n(b.data() + b.index(bt, c, 0, 0, 0), plane,
                  y.data() + y.index(bt, a.channels() + c, 0, 0, 0));
  }
  return y;
}

std::pair<Tensor5, Tensor5> concat_channels_backward(std::size_t channels_a,
                                                     const Tensor5& gy) {
  if (channels_a > gy.channels())
    throw ConfigError("concat_channels_backward: split point beyond channels");
  Tensor5 ga(gy.batch(), channels_a, gy.depth(), gy.height(), gy.width());
  Tensor5 gb(gy.batch(), gy.channels() - channels_a, gy.depth(), gy.height(),
             gy.width());
  const std::size_t plane = gy.depth() * gy.height() * gy.width();
  for (std::size_t b = 0; b < gy.batch(); ++b) {
    for (std::size_t c = 0; c < channels_a; ++c)
      std::copy_n(gy.data() + gy.index(b, c, 0, 0, 0), plane,
                  ga.data() + ga.index(b, c, 0, 0, 0));
    for (std::size_t c = 0; c < gb.channels(); ++c)
      std::copy_n(gy.data() + gy.index(b, channels_a + c, 0, 0, 0), plane,
                  gb.data() + gb.index(b, c, 0, 0, 0));
  }
  return {std::move(ga), std::move(gb)};
}

ConvParams xavier_init(const Tensor5::Shape& weight_shape, Rng& rng) {
  const std::size_t k = weight_shape[2] * weight_shape[3] * weight_shape[4];
  const double fan_in = static_cast<double>(weight_shape[1] * k);
  const double fan_out = static_cast<double>(weight_shape[0] * k);
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  ConvParams p;
  p.weights = Tensor5(weight_shape);
  for (std::size_t i = 0; i < p.weights.size(); ++i)
    p.weights[i] = rng.uniform(-limit, limit);
  p.bias.assign(weight_shape[0], 0.0);
  return p;
}

}  // namespace pianet::nn
