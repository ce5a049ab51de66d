// SPDX-License-Identifier: Apache-2.0
#ifndef FOPA_OPS_HPP
#define FOPA_OPS_HPP

#include <cstddef>
#include <span>
#include <vector>

#include "fopa/tensor.hpp"

namespace fopa {

// Convolutions use cross-correlation (no kernel flip) with zero padding.
// `bias` may be an undefined Tensor for a bias-free layer.
Tensor conv2d(const Tensor &input, const Tensor &weight, const Tensor &bias,
              std::size_t stride, std::size_t padding);

// input N x d x H x W, kernels N x d x k x k. Each sample carries its own
// per-channel filters; output keeps H x W (padding k/2, stride 1).
Tensor dynamic_depthwise_conv2d(const Tensor &input, const Tensor &kernels);

// input N x F, weight G x F, bias G -> N x G.
Tensor linear(const Tensor &input, const Tensor &weight, const Tensor &bias);

Tensor relu(const Tensor &x);
Tensor sigmoid(const Tensor &x);
Tensor add(const Tensor &a, const Tensor &b);
Tensor sub(const Tensor &a, const Tensor &b);
Tensor mul(const Tensor &a, const Tensor &b);
Tensor scalar_mul(const Tensor &x, double s);
Tensor sum(const Tensor &x);

// Per-channel y = scale[c] * x + shift[c] over N x C x H x W.
Tensor channel_affine(const Tensor &x, const Tensor &scale, const Tensor &shift);

Tensor concat_channels(std::span<const Tensor> parts);
Tensor concat_features(std::span<const Tensor> parts);  // N x F_i -> N x sum F_i
Tensor global_avg_pool(const Tensor &x);                 // N x C x H x W -> N x C
Tensor upsample_nearest_2x(const Tensor &x);
Tensor max_pool_2x(const Tensor &x);
Tensor broadcast_spatial(const Tensor &v, std::size_t height, std::size_t width);
Tensor reshape(const Tensor &x, Shape shape);

struct PixelIndex {
  std::size_t n;
  std::size_t y;
  std::size_t x;
};

// N x C x H x W -> M x C, one row per requested pixel.
Tensor gather_pixels(const Tensor &x, std::span<const PixelIndex> pixels);

// -sum log p_c where p_1 = score, p_0 = 1 - score.
Tensor bce_sum(const Tensor &scores, std::span<const int> labels);
// Same quantity computed from logits through a stable softplus.
Tensor bce_with_logits_sum(const Tensor &logits, std::span<const int> labels);

}  // namespace fopa

#endif  // FOPA_OPS_HPP
