// ops.hpp
//
// Differentiable tensor operations. Layouts: images and feature maps are
// NCHW, token sequences are [batch, tokens, dim]. Anything passed as a plain
// std::vector / span is a constant (no gradient).

#pragma once

#include <span>
#include <vector>

#include "usis/tensor.hpp"

namespace usis::ops {

// Elementwise. `add`/`sub`/`mul` accept b with the shape of a trailing
// block of a (b.numel() divides a.numel()); b is then repeated.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// Shape.
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& axes);
/// Rows of x along axis 0.
Tensor index_rows(const Tensor& x, std::span<const std::int64_t> rows);
/// Concatenation along axis 0; trailing dims must agree.
Tensor concat_rows(const std::vector<Tensor>& parts);
/// [1, ...] -> [n, ...].
Tensor repeat_rows(const Tensor& x, std::int64_t n);

// Linear algebra.
/// x[..., in] * w[in, out] + bias[out] (bias may be undefined).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);
Tensor matmul(const Tensor& a, const Tensor& b);
/// a[B, M, K] * b[B, K, N], or b[B, N, K] transposed when transpose_b.
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);

Tensor softmax_lastdim(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);

// Convolution. Stride 1, symmetric zero padding `pad`.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int pad);
/// Transposed convolution with kernel == stride == factor; w: [Cin, Cout, f, f].
Tensor upsample_conv(const Tensor& x, const Tensor& w, const Tensor& bias, int factor);
/// [B, C, H, W] -> [B, (H/p)*(W/p), C*p*p].
Tensor patchify(const Tensor& x, int patch);
/// [B, T, D] with T = h*w -> [B, D, h, w], and back.
Tensor tokens_to_grid(const Tensor& tokens, int h, int w);
Tensor grid_to_tokens(const Tensor& grid);

// Channel-wise helpers on NCHW maps.
/// Global spatial average: [B, C, H, W] -> [B, C].
Tensor channel_mean(const Tensor& x);
/// x[b, c, :, :] * g[b, c].
Tensor channel_scale(const Tensor& x, const Tensor& g);
/// x[b, c, :, :] + g[b, c].
Tensor channel_add(const Tensor& x, const Tensor& g);

struct RoiBox {
    double x0, y0, x1, y1; // feature-grid continuous coordinates
};
/// Bilinear region pooling (one sample per bin center) on a single-image map
/// [1, C, H, W] -> [P, C, out, out].
Tensor roi_align(const Tensor& feature, std::span<const RoiBox> boxes, int out_size);

// Reductions.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// sum_i x_i * w_i with constant w.
Tensor weighted_sum(const Tensor& x, std::span<const double> w);
/// Mean over everything but axis 0: [P, ...] -> [P].
Tensor row_mean(const Tensor& x);

// Loss elements (unreduced).
/// Elementwise binary cross-entropy on logits against targets in [0, 1].
Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets);
/// Row-wise softmax cross-entropy: logits [P, K], targets in [0, K) -> [P].
Tensor cross_entropy_rows(const Tensor& logits, std::span<const int> targets);
/// Row-wise summed Smooth L1: pred [P, D] vs constant target -> [P].
Tensor smooth_l1_rows(const Tensor& pred, std::span<const double> target, double beta = 1.0);

} // namespace usis::ops
