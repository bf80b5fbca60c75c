#pragma once

#include <cstddef>

#include "atseg/tensor.hpp"

/// Differentiable primitives. Every op records its backward rule on the
/// given tape when recording is on and an input requires a gradient.
namespace atseg::ops {

/// Cross-correlation of input [N,C,H,W] with kernel [F,C,kH,kW] plus bias [F],
/// symmetric zero padding. kH and kW must be odd.
Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, const Tensor& bias,
              std::size_t padding);

/// 2x2 max pooling with stride 2. Ties go to the first element in
/// row-major window order; backward routes the gradient there only.
Tensor maxpool2(Tape& tape, const Tensor& input);

/// Nearest-neighbour 2x upsampling of [N,C,H,W].
Tensor upsample_nearest2(Tape& tape, const Tensor& input);

Tensor relu(Tape& tape, const Tensor& x);

/// Concatenates two [N,*,H,W] tensors along the channel axis.
Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& x, double factor);
Tensor add_scalar(Tape& tape, const Tensor& x, double offset);
Tensor log(Tape& tape, const Tensor& x);

/// Multiplies every [H,W] plane of an [N,C,H,W] tensor entrywise by `weights` [H,W].
Tensor mul_spatial(Tape& tape, const Tensor& x, const Tensor& weights);

/// Scalar sum and mean over all elements.
Tensor sum(Tape& tape, const Tensor& x);
Tensor mean(Tape& tape, const Tensor& x);

/// Softmax over the channel axis of [N,C,H,W], stabilized by max subtraction.
Tensor softmax_channels(Tape& tape, const Tensor& logits);

/// Mirror of an [N,C,H,W] tensor along the width axis. Not differentiable.
Tensor flip_horizontal(const Tensor& x);

}  // namespace atseg::ops
