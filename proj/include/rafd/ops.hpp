#pragma once

// Differentiable operations of the tensor engine. All ops take and return
// Tensor<T> by value (storage is shared), validate shapes up front and record
// a backward closure when any input requires gradients.
//
// Layout conventions: feature maps are C x H x W (or N x C x H x W for
// batched conv/batchnorm), token sequences are N x C matrices.

#include <cstdint>
#include <vector>

#include "rafd/tensor.hpp"

namespace rafd {

// Elementwise, same-shape operands only (no implicit broadcasting).
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T s);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T> Tensor<T> tanh(const Tensor<T>& a);
template <typename T> Tensor<T> exp(const Tensor<T>& a);

// Reductions to a rank-0 scalar.
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
/// Mean absolute difference over all entries.
template <typename T> Tensor<T> l1_loss(const Tensor<T>& a, const Tensor<T>& b);
/// Sum of a * w for a constant weight tensor w (used to scalarize outputs).
template <typename T> Tensor<T> weighted_sum(const Tensor<T>& a, const std::vector<T>& w);

// Shape plumbing.
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T> Tensor<T> transpose2d(const Tensor<T>& a);
/// Concatenate along axis 0; trailing dims must agree.
template <typename T> Tensor<T> concat0(const std::vector<Tensor<T>>& parts);
/// Rows [begin, end) along axis 0.
template <typename T> Tensor<T> slice0(const Tensor<T>& a, std::size_t begin, std::size_t end);
/// Columns [begin, end) of an N x C matrix.
template <typename T> Tensor<T> slice_cols(const Tensor<T>& a, std::size_t begin, std::size_t end);
/// out[r] = a[index[r]] for an N x C matrix.
template <typename T> Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<std::size_t>& index);

// Linear algebra.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// x (N x Cin) * weight^T (Cout x Cin) + bias (Cout); bias may be undefined.
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);
/// x + v broadcast over the rows of an N x C matrix.
template <typename T> Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v);
/// x + gamma * y with gamma scaling the last axis.
template <typename T> Tensor<T> layer_scale_add(const Tensor<T>& x, const Tensor<T>& y, const Tensor<T>& gamma);

// Normalization.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5));

enum class BatchNormMode { Train, Eval };

/// Per-channel normalization of N x C x H x W (or C x H x W) input. Train mode
/// uses batch statistics and updates the running buffers in place with the
/// given momentum; eval mode normalizes with the running buffers.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                      Tensor<T>& running_var, T eps, BatchNormMode mode, T momentum = T(0.1));

// Softmax over an arbitrary non-empty set of axes, max-subtracted.
template <typename T> Tensor<T> softmax(const Tensor<T>& x, const std::vector<std::size_t>& axes);

/// Entries where mask == 0 are replaced by a large negative constant
/// (gradient zero there). Mask has one byte per entry.
template <typename T> Tensor<T> mask_fill(const Tensor<T>& x, const std::vector<std::uint8_t>& mask);

/// softmax(q k^T / sqrt(d)) v for single-head attention. q: Nq x d, k: Nk x d,
/// v: Nk x dv. `mask` (optional, Nq*Nk bytes) blocks entries equal to 0.
template <typename T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               const std::vector<std::uint8_t>* mask = nullptr);

/// Cross-correlation. input C x H x W or N x C x H x W, weight Cout x Cin x kh x kw,
/// bias Cout (may be undefined).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding);

/// Bilinear sampling of a C x H x W map at 2 x M points (row 0 = x/column,
/// row 1 = y/row). Points outside [0, W-1] x [0, H-1] take `fill` (C x M, or
/// C x 1 broadcast over points). Differentiable w.r.t. input, points, fill.
template <typename T>
Tensor<T> grid_sample_bilinear(const Tensor<T>& input, const Tensor<T>& points, const Tensor<T>& fill);

/// out[c, n] = sum_p weights[n, p] * samples[c, n * P + p].
template <typename T> Tensor<T> group_weighted_sum(const Tensor<T>& samples, const Tensor<T>& weights);

/// Penalty-reduced focal loss of a probability map against a Gaussian-splatted
/// target (cells equal to 1 are positives). Probabilities are clamped to
/// [1e-4, 1 - 1e-4]; the sum is divided by max(1, number of positives).
template <typename T>
Tensor<T> focal_loss(const Tensor<T>& pred, const Tensor<T>& target, T alpha = T(2), T beta = T(4));

}  // namespace rafd
