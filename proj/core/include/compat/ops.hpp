#pragma once

#include <span>
#include <vector>

#include "compat/tensor.hpp"

namespace compat {

// Quarter-turn counterclockwise rotations; the enum value is the number of
// turns and doubles as the rotation-prediction class label.
enum class Rotation { Deg0 = 0, Deg90 = 1, Deg180 = 2, Deg270 = 3 };

inline Rotation rotation_from_index(int s) { return static_cast<Rotation>(s & 3); }
inline Rotation inverse_rotation(Rotation s) {
  return static_cast<Rotation>((4 - static_cast<int>(s)) & 3);
}

// x:[B,I] w:[I,O] b:[O] -> [B,O]
Tensor dense(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b);

// x:[B,C,H,W] k:[F,C,3,3], padding 1, stride in {1,2} -> [B,F,H',W']
Tensor conv3x3(Tape& tape, const Tensor& x, const Tensor& k, int stride);

// x:[B,C,H,W] k:[F,C,1,1], padding 0, stride in {1,2} -> [B,F,H',W']
Tensor conv1x1(Tape& tape, const Tensor& x, const Tensor& k, int stride = 1);

// x:[B,C,H,W] k:[C,1,3,3], padding 1, stride in {1,2} -> [B,C,H',W']
Tensor depthwise_conv3x3(Tape& tape, const Tensor& x, const Tensor& k,
                         int stride);

// x:[B,C,H,W] + bias[C]
Tensor bias_channels(Tape& tape, const Tensor& x, const Tensor& b);

Tensor relu(Tape& tape, const Tensor& x);
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& x, float c);

// [B,C,H,W] -> [B,C], mean over the spatial extent
Tensor global_avg_pool(Tape& tape, const Tensor& x);

// Lossless pixel permutation of square images; differentiable.
Tensor rotate90(Tape& tape, const Tensor& x, Rotation s);

// Stacks tensors along dim 0; shapes must agree on the remaining dims.
Tensor concat_batch(Tape& tape, std::span<const Tensor> parts);

// Per-example L2 normalization over all non-batch dims.
Tensor l2_normalize(Tape& tape, const Tensor& x);

// Mean NLL over the batch; gradient (softmax - onehot)/B.
Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits,
                             std::span<const int> labels);

// Weighted mean NLL: sum_i w_i*nll_i / sum_i w_i, and 0 when all weights
// vanish (no contributing example).
Tensor softmax_cross_entropy_weighted(Tape& tape, const Tensor& logits,
                                      std::span<const int> labels,
                                      std::span<const float> weights);

// Inference helpers (no tape).
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace compat
