/*=========================================================================
 *
 *  Copyright ssmkit Contributors
 *
 *  Licensed under the Apache License, Version 2.0 (the "License");
 *  you may not use this file except in compliance with the License.
 *  You may obtain a copy of the License at
 *
 *         http://www.apache.org/licenses/LICENSE-2.0.txt
 *
 *  Unless required by applicable law or agreed to in writing, software
 *  distributed under the License is distributed on an "AS IS" BASIS,
 *  WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 *  See the License for the specific language governing permissions and
 *  limitations under the License.
 *
 *=========================================================================*/
#pragma once

// From-scratch differentiable layers in double precision: conv3d (3^3
// kernel, stride 1, zero-pad 1), relu, 2^3 max pooling, dense, sigmoid.
// Convolutions run as im2col + matrix products; backward passes are exact
// reverse-mode gradients validated against central finite differences.
//
// Tensors are flat vectors in channel-major, x-fastest order:
// index(c, z, y, x) = ((c*D + z)*H + y)*W + x.

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "ssmkit/errors.hpp"
#include "ssmkit/rng.hpp"
#include "ssmkit/volume.hpp"

#include <nlohmann/json.hpp>

namespace ssm {

namespace nn {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRowMat = Eigen::Map<RowMat>;
using ConstMapRowMat = Eigen::Map<const RowMat>;

// Parameter, gradient, and activation storage is kept at Eigen's maximal
// alignment so vectorized kernels follow the same code path (and produce
// bit-identical results) regardless of where the heap places a buffer.
using AlignedVector = std::vector<double, Eigen::aligned_allocator<double>>;

struct Conv3dLayer {
  int in_ch = 0, out_ch = 0;
  int d = 0, h = 0, w = 0;          // spatial dims (preserved by pad-1 conv)
  AlignedVector weights;            // [out][in][3][3][3]
  AlignedVector bias;               // [out]

  int voxels() const { return d * h * w; }
  int taps() const { return in_ch * 27; }
};

struct DenseLayer {
  int in_n = 0, out_n = 0;
  AlignedVector weights;  // [out][in]
  AlignedVector bias;     // [out]
};

struct PoolDims {
  int ch = 0, d = 0, h = 0, w = 0;  // input dims; output halves each axis
  int out_voxels() const { return (d / 2) * (h / 2) * (w / 2); }
};

namespace detail {

// im2col: col(row = i*27 + tap, column = voxel) with zero padding. The
// interior of each (z, y) scanline is a contiguous copy.
inline void im2col(const Conv3dLayer& conv, const double* in, double* col) {
  const int D = conv.d, H = conv.h, W = conv.w;
  const int V = D * H * W;
  for (int i = 0; i < conv.in_ch; ++i) {
    const double* chan = in + static_cast<std::size_t>(i) * V;
    for (int dz = -1; dz <= 1; ++dz) {
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int tap = ((dz + 1) * 3 + (dy + 1)) * 3 + (dx + 1);
          double* row = col + (static_cast<std::size_t>(i) * 27 + tap) * V;
          for (int z = 0; z < D; ++z) {
            const int sz = z + dz;
            for (int y = 0; y < H; ++y) {
              const int sy = y + dy;
              double* dst = row + (static_cast<std::size_t>(z) * H + y) * W;
              if (sz < 0 || sz >= D || sy < 0 || sy >= H) {
                std::memset(dst, 0, sizeof(double) * W);
                continue;
              }
              const double* src = chan + (static_cast<std::size_t>(sz) * H + sy) * W;
              const int x_lo = dx < 0 ? 1 : 0;        // first x with sx >= 0
              const int x_hi = dx > 0 ? W - 1 : W;    // one past last valid x
              if (x_lo > 0) dst[0] = 0.0;
              if (x_hi < W) dst[W - 1] = 0.0;
              std::memcpy(dst + x_lo, src + x_lo + dx, sizeof(double) * (x_hi - x_lo));
            }
          }
        }
      }
    }
  }
}

// Transpose of im2col: accumulates col rows back into the input layout.
inline void col2im_accumulate(const Conv3dLayer& conv, const double* col, double* in_grad) {
  const int D = conv.d, H = conv.h, W = conv.w;
  const int V = D * H * W;
  std::memset(in_grad, 0, sizeof(double) * static_cast<std::size_t>(conv.in_ch) * V);
  for (int i = 0; i < conv.in_ch; ++i) {
    double* chan = in_grad + static_cast<std::size_t>(i) * V;
    for (int dz = -1; dz <= 1; ++dz) {
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int tap = ((dz + 1) * 3 + (dy + 1)) * 3 + (dx + 1);
          const double* row = col + (static_cast<std::size_t>(i) * 27 + tap) * V;
          for (int z = 0; z < D; ++z) {
            const int sz = z + dz;
            if (sz < 0 || sz >= D) continue;
            for (int y = 0; y < H; ++y) {
              const int sy = y + dy;
              if (sy < 0 || sy >= H) continue;
              const double* src = row + (static_cast<std::size_t>(z) * H + y) * W;
              double* dst = chan + (static_cast<std::size_t>(sz) * H + sy) * W;
              const int x_lo = dx < 0 ? 1 : 0;
              const int x_hi = dx > 0 ? W - 1 : W;
              for (int x = x_lo; x < x_hi; ++x) dst[x + dx] += src[x];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

// out must hold out_ch * voxels; col must hold taps * voxels.
inline void conv3d_forward(const Conv3dLayer& conv, const double* in, double* out, double* col) {
  const int V = conv.voxels();
  detail::im2col(conv, in, col);
  ConstMapRowMat weight(conv.weights.data(), conv.out_ch, conv.taps());
  ConstMapRowMat col_mat(col, conv.taps(), V);
  MapRowMat out_mat(out, conv.out_ch, V);
  out_mat.noalias() = weight * col_mat;
  for (int o = 0; o < conv.out_ch; ++o) out_mat.row(o).array() += conv.bias[o];
}

// in: the forward input (needed for weight gradients); out_grad: upstream.
// col is scratch (taps * voxels); in_grad may be null to skip input grads.
inline void conv3d_backward(const Conv3dLayer& conv, const double* in, const double* out_grad,
                            double* weight_grad, double* bias_grad, double* in_grad, double* col) {
  const int V = conv.voxels();
  detail::im2col(conv, in, col);
  ConstMapRowMat col_mat(col, conv.taps(), V);
  ConstMapRowMat og(out_grad, conv.out_ch, V);
  MapRowMat wg(weight_grad, conv.out_ch, conv.taps());
  wg.noalias() = og * col_mat.transpose();
  for (int o = 0; o < conv.out_ch; ++o) bias_grad[o] = og.row(o).sum();
  if (in_grad != nullptr) {
    ConstMapRowMat weight(conv.weights.data(), conv.out_ch, conv.taps());
    MapRowMat col_grad(col, conv.taps(), V);  // reuse scratch
    col_grad.noalias() = weight.transpose() * og;
    detail::col2im_accumulate(conv, col, in_grad);
  }
}

inline void relu_forward_inplace(double* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] = x[i] > 0.0 ? x[i] : 0.0;
}

// activation: the post-relu values (positive iff pre-activation positive).
inline void relu_backward_inplace(const double* activation, double* grad, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    if (activation[i] <= 0.0) grad[i] = 0.0;
  }
}

// 2^3 max pooling with stride 2; dims must be even. argmax (first maximum
// in scan order) is cached for the backward pass.
inline void maxpool_forward(const PoolDims& dims, const double* in, double* out, int* argmax) {
  const int D = dims.d, H = dims.h, W = dims.w;
  const int OD = D / 2, OH = H / 2, OW = W / 2;
  for (int c = 0; c < dims.ch; ++c) {
    const double* chan = in + static_cast<std::size_t>(c) * D * H * W;
    const std::size_t out_base = static_cast<std::size_t>(c) * OD * OH * OW;
    for (int z = 0; z < OD; ++z) {
      for (int y = 0; y < OH; ++y) {
        for (int x = 0; x < OW; ++x) {
          double best = -std::numeric_limits<double>::infinity();
          int best_idx = 0;
          for (int dz = 0; dz < 2; ++dz) {
            for (int dy = 0; dy < 2; ++dy) {
              for (int dx = 0; dx < 2; ++dx) {
                const int idx =
                    ((2 * z + dz) * H + (2 * y + dy)) * W + (2 * x + dx);
                if (chan[idx] > best) {
                  best = chan[idx];
                  best_idx = idx;
                }
              }
            }
          }
          const std::size_t o = out_base + (static_cast<std::size_t>(z) * OH + y) * OW + x;
          out[o] = best;
          argmax[o] = best_idx;  // index within the channel
        }
      }
    }
  }
}

inline void maxpool_backward(const PoolDims& dims, const int* argmax, const double* out_grad,
                             double* in_grad) {
  const int in_voxels = dims.d * dims.h * dims.w;
  const int out_voxels = dims.out_voxels();
  std::memset(in_grad, 0, sizeof(double) * static_cast<std::size_t>(dims.ch) * in_voxels);
  for (int c = 0; c < dims.ch; ++c) {
    const std::size_t ob = static_cast<std::size_t>(c) * out_voxels;
    double* chan = in_grad + static_cast<std::size_t>(c) * in_voxels;
    for (int v = 0; v < out_voxels; ++v) chan[argmax[ob + v]] += out_grad[ob + v];
  }
}

inline void dense_forward(const DenseLayer& fc, const double* in, double* out) {
  ConstMapRowMat weight(fc.weights.data(), fc.out_n, fc.in_n);
  Eigen::Map<const Eigen::VectorXd> x(in, fc.in_n);
  Eigen::Map<Eigen::VectorXd> y(out, fc.out_n);
  y.noalias() = weight * x;
  y += Eigen::Map<const Eigen::VectorXd>(fc.bias.data(), fc.out_n);
}

inline void dense_backward(const DenseLayer& fc, const double* in, const double* out_grad,
                           double* weight_grad, double* bias_grad, double* in_grad) {
  ConstMapRowMat weight(fc.weights.data(), fc.out_n, fc.in_n);
  Eigen::Map<const Eigen::VectorXd> x(in, fc.in_n);
  Eigen::Map<const Eigen::VectorXd> dy(out_grad, fc.out_n);
  MapRowMat wg(weight_grad, fc.out_n, fc.in_n);
  wg.noalias() = dy * x.transpose();
  std::memcpy(bias_grad, out_grad, sizeof(double) * fc.out_n);
  if (in_grad != nullptr) {
    Eigen::Map<Eigen::VectorXd> dx(in_grad, fc.in_n);
    dx.noalias() = weight.transpose() * dy;
  }
}

}  // namespace nn

// --- models ------------------------------------------------------------------

// Volumetric regressor: three conv(3^3)-relu-maxpool(2^3) blocks with
// channels (8, 16, 32), then dense(128)-relu-dense(K). Input dims must be
// divisible by 8. input_scale premultiplies intensities; output_scale
// maps the raw (whitened) network output back to loading units.
struct RegressorModel {
  std::array<int, 3> input_dims{0, 0, 0};
  double input_scale = 1.0;
  nn::Conv3dLayer conv1, conv2, conv3;
  nn::DenseLayer fc1, fc2;
  Eigen::VectorXd output_scale;

  int loading_count() const { return fc2.out_n; }
};

// Recurrence classifier: dense(K -> hidden) - relu - dense(hidden -> 1) -
// sigmoid.
struct RecurrenceModel {
  nn::DenseLayer fc1, fc2;

  int loading_count() const { return fc1.in_n; }
};

namespace nn {

struct ParamGroup {
  std::string name;
  AlignedVector* values;
};

inline std::vector<ParamGroup> param_groups(RegressorModel& m) {
  return {{"conv1.weights", &m.conv1.weights}, {"conv1.bias", &m.conv1.bias},
          {"conv2.weights", &m.conv2.weights}, {"conv2.bias", &m.conv2.bias},
          {"conv3.weights", &m.conv3.weights}, {"conv3.bias", &m.conv3.bias},
          {"fc1.weights", &m.fc1.weights},     {"fc1.bias", &m.fc1.bias},
          {"fc2.weights", &m.fc2.weights},     {"fc2.bias", &m.fc2.bias}};
}

inline std::vector<ParamGroup> param_groups(RecurrenceModel& m) {
  return {{"fc1.weights", &m.fc1.weights},
          {"fc1.bias", &m.fc1.bias},
          {"fc2.weights", &m.fc2.weights},
          {"fc2.bias", &m.fc2.bias}};
}

inline void he_uniform_fill(AlignedVector& v, int fan_in, Rng& rng) {
  const double limit = std::sqrt(6.0 / fan_in);
  for (double& x : v) x = rng.uniform(-limit, limit);
}

inline void xavier_uniform_fill(AlignedVector& v, int fan_in, int fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  for (double& x : v) x = rng.uniform(-limit, limit);
}

}  // namespace nn

inline RegressorModel make_regressor(std::array<int, 3> input_dims, int loading_count,
                                     std::uint64_t seed) {
  if (loading_count < 1) throw ConfigError("make_regressor: loading_count must be >= 1");
  for (int a = 0; a < 3; ++a) {
    if (input_dims[a] < 8 || input_dims[a] % 8 != 0) {
      throw ConfigError("make_regressor: input dims must be positive multiples of 8");
    }
  }
  RegressorModel m;
  m.input_dims = input_dims;
  const int d = input_dims[2], h = input_dims[1], w = input_dims[0];
  auto conv = [](int in_ch, int out_ch, int cd, int ch_, int cw) {
    nn::Conv3dLayer layer;
    layer.in_ch = in_ch;
    layer.out_ch = out_ch;
    layer.d = cd;
    layer.h = ch_;
    layer.w = cw;
    layer.weights.assign(static_cast<std::size_t>(out_ch) * in_ch * 27, 0.0);
    layer.bias.assign(out_ch, 0.0);
    return layer;
  };
  m.conv1 = conv(1, 8, d, h, w);
  m.conv2 = conv(8, 16, d / 2, h / 2, w / 2);
  m.conv3 = conv(16, 32, d / 4, h / 4, w / 4);
  const int flat = 32 * (d / 8) * (h / 8) * (w / 8);
  m.fc1.in_n = flat;
  m.fc1.out_n = 128;
  m.fc1.weights.assign(static_cast<std::size_t>(128) * flat, 0.0);
  m.fc1.bias.assign(128, 0.0);
  m.fc2.in_n = 128;
  m.fc2.out_n = loading_count;
  m.fc2.weights.assign(static_cast<std::size_t>(loading_count) * 128, 0.0);
  m.fc2.bias.assign(loading_count, 0.0);
  m.output_scale = Eigen::VectorXd::Ones(loading_count);

  Rng rng(seed ^ 0x52454752ULL);
  nn::he_uniform_fill(m.conv1.weights, m.conv1.taps(), rng);
  nn::he_uniform_fill(m.conv2.weights, m.conv2.taps(), rng);
  nn::he_uniform_fill(m.conv3.weights, m.conv3.taps(), rng);
  nn::he_uniform_fill(m.fc1.weights, m.fc1.in_n, rng);
  nn::xavier_uniform_fill(m.fc2.weights, m.fc2.in_n, m.fc2.out_n, rng);
  return m;
}

inline RecurrenceModel make_recurrence(int loading_count, int hidden, std::uint64_t seed) {
  if (loading_count < 1 || hidden < 1) throw ConfigError("make_recurrence: invalid sizes");
  RecurrenceModel m;
  m.fc1.in_n = loading_count;
  m.fc1.out_n = hidden;
  m.fc1.weights.assign(static_cast<std::size_t>(hidden) * loading_count, 0.0);
  m.fc1.bias.assign(hidden, 0.0);
  m.fc2.in_n = hidden;
  m.fc2.out_n = 1;
  m.fc2.weights.assign(hidden, 0.0);
  m.fc2.bias.assign(1, 0.0);
  Rng rng(seed ^ 0x4d4c50ULL);
  nn::he_uniform_fill(m.fc1.weights, m.fc1.in_n, rng);
  nn::xavier_uniform_fill(m.fc2.weights, m.fc2.in_n, 1, rng);
  return m;
}

// --- regressor forward/backward ----------------------------------------------

struct RegressorWorkspace {
  nn::AlignedVector input;                      // scaled input volume
  nn::AlignedVector a1, p1, a2, p2, a3, p3;     // block activations
  std::vector<int> idx1, idx2, idx3;            // pooling argmax caches
  nn::AlignedVector f1;                         // fc1 activation
  Eigen::VectorXd raw_out;                      // pre-output_scale
  nn::AlignedVector col;                        // conv scratch
  // backward scratch
  nn::AlignedVector da1, dp1, da2, dp2, da3, dp3, df1;

  void resize_for(const RegressorModel& m) {
    const auto vox = [](const nn::Conv3dLayer& c) {
      return static_cast<std::size_t>(c.out_ch) * c.voxels();
    };
    input.resize(static_cast<std::size_t>(m.conv1.voxels()));
    a1.resize(vox(m.conv1));
    p1.resize(vox(m.conv1) / 8);
    a2.resize(vox(m.conv2));
    p2.resize(vox(m.conv2) / 8);
    a3.resize(vox(m.conv3));
    p3.resize(vox(m.conv3) / 8);
    idx1.resize(p1.size());
    idx2.resize(p2.size());
    idx3.resize(p3.size());
    f1.resize(m.fc1.out_n);
    raw_out.resize(m.fc2.out_n);
    const std::size_t col_size =
        std::max({static_cast<std::size_t>(m.conv1.taps()) * m.conv1.voxels(),
                  static_cast<std::size_t>(m.conv2.taps()) * m.conv2.voxels(),
                  static_cast<std::size_t>(m.conv3.taps()) * m.conv3.voxels()});
    col.resize(col_size);
    da1.resize(a1.size());
    dp1.resize(p1.size());
    da2.resize(a2.size());
    dp2.resize(p2.size());
    da3.resize(a3.size());
    dp3.resize(p3.size());
    df1.resize(f1.size());
  }
};

struct RegressorGrads {
  nn::AlignedVector conv1_w, conv1_b, conv2_w, conv2_b, conv3_w, conv3_b;
  nn::AlignedVector fc1_w, fc1_b, fc2_w, fc2_b;

  void resize_for(const RegressorModel& m) {
    conv1_w.resize(m.conv1.weights.size());
    conv1_b.resize(m.conv1.bias.size());
    conv2_w.resize(m.conv2.weights.size());
    conv2_b.resize(m.conv2.bias.size());
    conv3_w.resize(m.conv3.weights.size());
    conv3_b.resize(m.conv3.bias.size());
    fc1_w.resize(m.fc1.weights.size());
    fc1_b.resize(m.fc1.bias.size());
    fc2_w.resize(m.fc2.weights.size());
    fc2_b.resize(m.fc2.bias.size());
  }

  std::vector<nn::AlignedVector*> groups() {
    return {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &conv3_w,
            &conv3_b, &fc1_w,   &fc1_b,   &fc2_w,   &fc2_b};
  }
};

// Forward pass on raw intensities (converted to double and scaled by
// input_scale); fills the workspace caches and returns the raw output
// (before output_scale).
inline const Eigen::VectorXd& regressor_forward(const RegressorModel& m, const Volume& v,
                                                RegressorWorkspace& ws) {
  if (v.dims != m.input_dims) throw DataError("regressor: volume dims do not match model input");
  ws.resize_for(m);
  for (std::size_t i = 0; i < v.data.size(); ++i) {
    ws.input[i] = m.input_scale * static_cast<double>(v.data[i]);
  }
  nn::conv3d_forward(m.conv1, ws.input.data(), ws.a1.data(), ws.col.data());
  nn::relu_forward_inplace(ws.a1.data(), ws.a1.size());
  nn::PoolDims pd1{m.conv1.out_ch, m.conv1.d, m.conv1.h, m.conv1.w};
  nn::maxpool_forward(pd1, ws.a1.data(), ws.p1.data(), ws.idx1.data());

  nn::conv3d_forward(m.conv2, ws.p1.data(), ws.a2.data(), ws.col.data());
  nn::relu_forward_inplace(ws.a2.data(), ws.a2.size());
  nn::PoolDims pd2{m.conv2.out_ch, m.conv2.d, m.conv2.h, m.conv2.w};
  nn::maxpool_forward(pd2, ws.a2.data(), ws.p2.data(), ws.idx2.data());

  nn::conv3d_forward(m.conv3, ws.p2.data(), ws.a3.data(), ws.col.data());
  nn::relu_forward_inplace(ws.a3.data(), ws.a3.size());
  nn::PoolDims pd3{m.conv3.out_ch, m.conv3.d, m.conv3.h, m.conv3.w};
  nn::maxpool_forward(pd3, ws.a3.data(), ws.p3.data(), ws.idx3.data());

  nn::dense_forward(m.fc1, ws.p3.data(), ws.f1.data());
  nn::relu_forward_inplace(ws.f1.data(), ws.f1.size());
  nn::dense_forward(m.fc2, ws.f1.data(), ws.raw_out.data());
  return ws.raw_out;
}

// Reverse-mode gradients for all parameters given d(loss)/d(raw output).
// The workspace must hold the caches of a matching forward pass. Input
// gradients of conv1 are not propagated (nothing upstream needs them).
inline void regressor_backward(const RegressorModel& m, RegressorWorkspace& ws,
                               const Eigen::VectorXd& out_grad, RegressorGrads& grads) {
  if (out_grad.size() != m.fc2.out_n) throw DataError("regressor backward: bad upstream size");
  grads.resize_for(m);
  nn::dense_backward(m.fc2, ws.f1.data(), out_grad.data(), grads.fc2_w.data(),
                     grads.fc2_b.data(), ws.df1.data());
  nn::relu_backward_inplace(ws.f1.data(), ws.df1.data(), ws.f1.size());
  nn::dense_backward(m.fc1, ws.p3.data(), ws.df1.data(), grads.fc1_w.data(), grads.fc1_b.data(),
                     ws.dp3.data());

  nn::PoolDims pd3{m.conv3.out_ch, m.conv3.d, m.conv3.h, m.conv3.w};
  nn::maxpool_backward(pd3, ws.idx3.data(), ws.dp3.data(), ws.da3.data());
  nn::relu_backward_inplace(ws.a3.data(), ws.da3.data(), ws.a3.size());
  nn::conv3d_backward(m.conv3, ws.p2.data(), ws.da3.data(), grads.conv3_w.data(),
                      grads.conv3_b.data(), ws.dp2.data(), ws.col.data());

  nn::PoolDims pd2{m.conv2.out_ch, m.conv2.d, m.conv2.h, m.conv2.w};
  nn::maxpool_backward(pd2, ws.idx2.data(), ws.dp2.data(), ws.da2.data());
  nn::relu_backward_inplace(ws.a2.data(), ws.da2.data(), ws.a2.size());
  nn::conv3d_backward(m.conv2, ws.p1.data(), ws.da2.data(), grads.conv2_w.data(),
                      grads.conv2_b.data(), ws.dp1.data(), ws.col.data());

  nn::PoolDims pd1{m.conv1.out_ch, m.conv1.d, m.conv1.h, m.conv1.w};
  nn::maxpool_backward(pd1, ws.idx1.data(), ws.dp1.data(), ws.da1.data());
  nn::relu_backward_inplace(ws.a1.data(), ws.da1.data(), ws.a1.size());
  nn::conv3d_backward(m.conv1, ws.input.data(), ws.da1.data(), grads.conv1_w.data(),
                      grads.conv1_b.data(), nullptr, ws.col.data());
}

// Public inference path: raw forward followed by output_scale.
inline Eigen::VectorXd forward_regressor(const RegressorModel& m, const Volume& v) {
  RegressorWorkspace ws;
  const Eigen::VectorXd& raw = regressor_forward(m, v, ws);
  return raw.cwiseProduct(m.output_scale);
}

// --- recurrence model forward/backward ----------------------------------------

struct RecurrenceWorkspace {
  nn::AlignedVector h;   // post-relu hidden
  nn::AlignedVector dh;
  double logit = 0.0;

  void resize_for(const RecurrenceModel& m) {
    h.resize(m.fc1.out_n);
    dh.resize(m.fc1.out_n);
  }
};

inline double recurrence_forward(const RecurrenceModel& m, const Eigen::VectorXd& loadings,
                                 RecurrenceWorkspace& ws) {
  if (loadings.size() != m.fc1.in_n) throw DataError("recurrence: loading length mismatch");
  ws.resize_for(m);
  nn::dense_forward(m.fc1, loadings.data(), ws.h.data());
  nn::relu_forward_inplace(ws.h.data(), ws.h.size());
  double logit = 0.0;
  nn::dense_forward(m.fc2, ws.h.data(), &logit);
  ws.logit = logit;
  return 1.0 / (1.0 + std::exp(-logit));
}

struct RecurrenceGrads {
  nn::AlignedVector fc1_w, fc1_b, fc2_w, fc2_b;

  void resize_for(const RecurrenceModel& m) {
    fc1_w.resize(m.fc1.weights.size());
    fc1_b.resize(m.fc1.bias.size());
    fc2_w.resize(m.fc2.weights.size());
    fc2_b.resize(m.fc2.bias.size());
  }

  std::vector<nn::AlignedVector*> groups() { return {&fc1_w, &fc1_b, &fc2_w, &fc2_b}; }
};

// Backward from d(loss)/d(logit); the sigmoid derivative is folded into
// logit_grad by the caller.
inline void recurrence_backward(const RecurrenceModel& m, const Eigen::VectorXd& loadings,
                                RecurrenceWorkspace& ws, double logit_grad,
                                RecurrenceGrads& grads) {
  grads.resize_for(m);
  nn::dense_backward(m.fc2, ws.h.data(), &logit_grad, grads.fc2_w.data(), grads.fc2_b.data(),
                     ws.dh.data());
  nn::relu_backward_inplace(ws.h.data(), ws.dh.data(), ws.h.size());
  nn::dense_backward(m.fc1, loadings.data(), ws.dh.data(), grads.fc1_w.data(),
                     grads.fc1_b.data(), nullptr);
}

// Predicted recurrence probability, strictly inside (0, 1).
inline double predict_recurrence(const RecurrenceModel& m, const Eigen::VectorXd& loadings) {
  RecurrenceWorkspace ws;
  const double p = recurrence_forward(m, loadings, ws);
  return std::clamp(p, 1e-12, 1.0 - 1e-12);
}

// --- persistence -------------------------------------------------------------

namespace nn::detail {

inline nlohmann::ordered_json conv_to_json(const Conv3dLayer& c) {
  nlohmann::ordered_json j;
  j["type"] = "conv3d";
  j["in_channels"] = c.in_ch;
  j["out_channels"] = c.out_ch;
  j["kernel"] = 3;
  j["stride"] = 1;
  j["pad"] = 1;
  j["weights"] = std::vector<double>(c.weights.begin(), c.weights.end());
  j["bias"] = std::vector<double>(c.bias.begin(), c.bias.end());
  return j;
}

inline nlohmann::ordered_json dense_to_json(const DenseLayer& d) {
  nlohmann::ordered_json j;
  j["type"] = "dense";
  j["in"] = d.in_n;
  j["out"] = d.out_n;
  j["weights"] = std::vector<double>(d.weights.begin(), d.weights.end());
  j["bias"] = std::vector<double>(d.bias.begin(), d.bias.end());
  return j;
}

inline void conv_from_json(const nlohmann::json& j, Conv3dLayer& c) {
  if (j.at("type") != "conv3d") throw DataError("model: expected conv3d layer");
  if (j.at("in_channels").get<int>() != c.in_ch || j.at("out_channels").get<int>() != c.out_ch) {
    throw DataError("model: conv3d channel mismatch");
  }
  const auto weights = j.at("weights").get<std::vector<double>>();
  const auto bias = j.at("bias").get<std::vector<double>>();
  if (weights.size() != c.weights.size() || bias.size() != c.bias.size()) {
    throw DataError("model: conv3d parameter count mismatch");
  }
  c.weights.assign(weights.begin(), weights.end());
  c.bias.assign(bias.begin(), bias.end());
}

inline void dense_from_json(const nlohmann::json& j, DenseLayer& d) {
  if (j.at("type") != "dense") throw DataError("model: expected dense layer");
  if (j.at("in").get<int>() != d.in_n || j.at("out").get<int>() != d.out_n) {
    throw DataError("model: dense shape mismatch");
  }
  const auto weights = j.at("weights").get<std::vector<double>>();
  const auto bias = j.at("bias").get<std::vector<double>>();
  if (weights.size() != d.weights.size() || bias.size() != d.bias.size()) {
    throw DataError("model: dense parameter count mismatch");
  }
  d.weights.assign(weights.begin(), weights.end());
  d.bias.assign(bias.begin(), bias.end());
}

}  // namespace nn::detail

inline void save_regressor(const RegressorModel& m, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["format_version"] = 1;
  j["model"] = "volume_regressor";
  j["input_dims"] = m.input_dims;
  j["input_scale"] = m.input_scale;
  j["output_scale"] =
      std::vector<double>(m.output_scale.data(), m.output_scale.data() + m.output_scale.size());
  nlohmann::ordered_json layers = nlohmann::ordered_json::array();
  layers.push_back(nn::detail::conv_to_json(m.conv1));
  layers.push_back({{"type", "relu"}});
  layers.push_back({{"type", "maxpool3d"}, {"size", 2}});
  layers.push_back(nn::detail::conv_to_json(m.conv2));
  layers.push_back({{"type", "relu"}});
  layers.push_back({{"type", "maxpool3d"}, {"size", 2}});
  layers.push_back(nn::detail::conv_to_json(m.conv3));
  layers.push_back({{"type", "relu"}});
  layers.push_back({{"type", "maxpool3d"}, {"size", 2}});
  layers.push_back(nn::detail::dense_to_json(m.fc1));
  layers.push_back({{"type", "relu"}});
  layers.push_back(nn::detail::dense_to_json(m.fc2));
  j["layers"] = layers;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write model: " + path.string());
  out << j.dump() << "\n";
}

inline RegressorModel load_regressor(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open model: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("model parse error: " + std::string(e.what()));
  }
  if (j.value("format_version", 0) != 1) throw DataError("model: unsupported format_version");
  const auto dims = j.at("input_dims").get<std::array<int, 3>>();
  const auto& layers = j.at("layers");
  if (layers.size() != 12) throw DataError("model: unexpected layer count");
  const int K = layers.at(11).at("out").get<int>();
  RegressorModel m = make_regressor(dims, K, 0);
  m.input_scale = j.value("input_scale", 1.0);
  const auto scale = j.at("output_scale").get<std::vector<double>>();
  if (static_cast<int>(scale.size()) != K) throw DataError("model: output_scale length mismatch");
  m.output_scale = Eigen::Map<const Eigen::VectorXd>(scale.data(), K);
  nn::detail::conv_from_json(layers.at(0), m.conv1);
  nn::detail::conv_from_json(layers.at(3), m.conv2);
  nn::detail::conv_from_json(layers.at(6), m.conv3);
  nn::detail::dense_from_json(layers.at(9), m.fc1);
  nn::detail::dense_from_json(layers.at(11), m.fc2);
  return m;
}

inline void save_recurrence(const RecurrenceModel& m, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["format_version"] = 1;
  j["model"] = "recurrence_mlp";
  nlohmann::ordered_json layers = nlohmann::ordered_json::array();
  layers.push_back(nn::detail::dense_to_json(m.fc1));
  layers.push_back({{"type", "relu"}});
  layers.push_back(nn::detail::dense_to_json(m.fc2));
  layers.push_back({{"type", "sigmoid"}});
  j["layers"] = layers;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write model: " + path.string());
  out << j.dump() << "\n";
}

inline RecurrenceModel load_recurrence(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open model: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("model parse error: " + std::string(e.what()));
  }
  if (j.value("format_version", 0) != 1) throw DataError("model: unsupported format_version");
  const auto& layers = j.at("layers");
  if (layers.size() != 4) throw DataError("model: unexpected layer count");
  RecurrenceModel m = make_recurrence(layers.at(0).at("in").get<int>(),
                                      layers.at(0).at("out").get<int>(), 0);
  nn::detail::dense_from_json(layers.at(0), m.fc1);
  nn::detail::dense_from_json(layers.at(2), m.fc2);
  return m;
}

}  // namespace ssm
