// Forward/backward implementations of the operation set the network needs.
// Convolution, pooling, and normalization ops accept rank-3 (C,H,W) tensors
// or rank-4 (B,C,H,W) with a leading batch dimension.

#pragma once

#include "milscene/tensor.hpp"

namespace milscene {

enum class ConvAxis { Frequency, Time };
enum class PaddingMode { Same, Valid };
enum class NormMode { Train, Eval };
enum class ActKind { Sigmoid, Relu, SoftmaxRows };

// out[o,h,w] = sum_i w[o,i] * x[i,h,w].  x: (C_in,H,W), w: (C_out,C_in).
TensorPtr pointwise_conv(const TensorPtr& x, const TensorPtr& w);

// Per-channel 1-D convolution along one spatial axis. k: (C,K).
// Same padding zero-extends and preserves shape; valid padding shrinks the
// axis by K-1 (K equal to the axis extent collapses it to 1).
TensorPtr axis_depthwise_conv(const TensorPtr& x, const TensorPtr& k, ConvAxis axis,
                              PaddingMode pad);

// Non-overlapping 2x2 max pooling, stride 2; odd trailing rows/columns are
// dropped. Gradient routes to each window's argmax, first occurrence on ties.
TensorPtr maxpool2(const TensorPtr& x);

// Running statistics for one batchnorm layer; registered as ParamSet buffers.
struct BatchNormState {
  TensorPtr running_mean;
  TensorPtr running_var;
};

// Train mode normalizes with batch statistics per channel (eps 1e-5) and
// updates running stats with momentum 0.1; eval mode applies running stats.
TensorPtr batchnorm(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta,
                    BatchNormState& state, NormMode mode, double eps = 1e-5,
                    double momentum = 0.1);

// relu(batchnorm(x)) in one pass; bit-identical to the separate ops.
TensorPtr batchnorm_relu(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta,
                         BatchNormState& state, NormMode mode, double eps = 1e-5,
                         double momentum = 0.1);

// W x + b for a single vector: x (d), w (C,d), b (C) -> (C).
TensorPtr dense(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b);

// dense applied to every row: x (N,d), w (C,d), b (C) -> (N,C).
TensorPtr linear_rows(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b);

TensorPtr activate(const TensorPtr& x, ActKind kind);

// Per-column maximum over rows of a (N,C) matrix, with the selected row per
// column. Gradient flows only to the argmax row; ties pick the lowest index.
struct RowMaxResult {
  TensorPtr values;          // (C)
  std::vector<int> argmax;   // (C) row indices
};
RowMaxResult reduce_max_rows(const TensorPtr& x);

TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr add_n(const std::vector<TensorPtr>& terms);  // left-to-right sum
TensorPtr scale(const TensorPtr& x, double s);
TensorPtr reshape(const TensorPtr& x, Shape target);
TensorPtr transpose2d(const TensorPtr& x);

// Extract batch item b from a rank>=2 tensor (B, rest...) -> (rest...).
TensorPtr slice_batch(const TensorPtr& x, int b);

// v <- momentum*v + (grad + weight_decay*p); p <- p - lr*v; grads cleared.
// A parameter whose gradient was never produced raises an error naming it.
void sgd_step(ParamSet& params, double lr, double momentum, double weight_decay);

}  // namespace milscene
