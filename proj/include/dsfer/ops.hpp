#pragma once

#include "dsfer/tensor.hpp"

namespace dsfer {

enum class UpsampleMode { Bilinear, Nearest };
enum class BnMode { Train, Eval };

// --- convolution / pooling ---------------------------------------------

// input [c_in,h,w], kernel [c_out,c_in,k,k] (k odd), bias [c_out].
// h' = floor((h + 2*padding - k)/stride) + 1.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
              int padding);

// 2x2 windows, stride 2; gradient routes to the first (row-major) maximal
// element of each window.
Tensor maxpool2(const Tensor& input);

// --- activations --------------------------------------------------------

Tensor relu(const Tensor& input);
Tensor sigmoid(const Tensor& input);
// Row-wise softmax of a 2-D tensor, stabilized by row-max subtraction.
Tensor softmax_rows(const Tensor& input);

// Channel softmax of 2-channel logits reduced to the probability of
// channel 1: p = sigmoid(z1 - z0). Input [2,h,w] -> output [h,w].
Tensor channel_softmax_pair(const Tensor& logits);

// --- normalization -------------------------------------------------------

// Per-channel statistics over the spatial extent. Train mode normalizes
// by batch statistics and folds them into running_mean/running_var with
// `momentum`; eval mode normalizes by the running statistics.
Tensor batchnorm(const Tensor& input, const Tensor& gamma, const Tensor& beta_shift,
                 Tensor running_mean, Tensor running_var, BnMode mode, double momentum = 0.1,
                 double epsilon = 1e-5);

// --- linear algebra / layout --------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// [c,h,w] -> [h*w, c]; rows are spatial positions in row-major order.
Tensor reshape_matrix(const Tensor& input);
// Inverse of reshape_matrix: [h*w, d] -> [d,h,w].
Tensor matrix_to_chw(const Tensor& input, int h, int w);

Tensor concat_channels(const Tensor& a, const Tensor& b);

// Same-shape product, or [c,h,w] * [1,h,w] with the single-channel mask
// broadcast over channels.
Tensor elementwise_mul(const Tensor& a, const Tensor& b);

Tensor abs_diff(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul_scalar(const Tensor& a, double s);

Tensor upsample2x(const Tensor& input, UpsampleMode mode = UpsampleMode::Bilinear);

// [c,h,w] -> [1,h,w] mean over channels.
Tensor channel_mean(const Tensor& input);

// --- reductions -----------------------------------------------------------

Tensor sum_all(const Tensor& input);

}  // namespace dsfer
