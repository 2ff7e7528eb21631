#pragma once

#include <vector>

#include "vxda/tensor.hpp"

namespace vxda {

// Binary elementwise ops accept equal shapes, or one operand with a single
// element which is broadcast. Anything else is a ShapeError naming both shapes.
template <typename T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T> BasicTensor<T> neg(const BasicTensor<T>& a);
template <typename T> BasicTensor<T> relu(const BasicTensor<T>& a);
template <typename T> BasicTensor<T> elu(const BasicTensor<T>& a, double alpha = 1.0);
template <typename T> BasicTensor<T> sigmoid(const BasicTensor<T>& a);
template <typename T> BasicTensor<T> log(const BasicTensor<T>& a);
template <typename T> BasicTensor<T> exp(const BasicTensor<T>& a);
template <typename T> BasicTensor<T> scale(const BasicTensor<T>& a, double factor);
template <typename T> BasicTensor<T> add_scalar(const BasicTensor<T>& a, double offset);

enum class Elementwise { add, sub, mul, neg, relu, elu, sigmoid, log, exp };

/// Dispatches to the named op; `b` is required for add/sub/mul and ignored otherwise.
template <typename T>
BasicTensor<T> elementwise(Elementwise kind, const BasicTensor<T>& a, const BasicTensor<T>* b = nullptr);

// [n,k] x [k,m] -> [n,m]
template <typename T> BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> transpose(const BasicTensor<T>& a);
template <typename T> BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape);
// Explicit broadcast: same rank, each source extent equal to the target or 1.
template <typename T> BasicTensor<T> expand(const BasicTensor<T>& a, Shape shape);
template <typename T> BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis);
template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& a, std::size_t axis, std::int64_t begin, std::int64_t end);
template <typename T> BasicTensor<T> sum(const BasicTensor<T>& a);
template <typename T> BasicTensor<T> mean(const BasicTensor<T>& a);

// x [n,in] * w [in,out] + b [out]
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b);
// Adds b [C] along axis 1 of x [N,C,...].
template <typename T> BasicTensor<T> add_channel_bias(const BasicTensor<T>& x, const BasicTensor<T>& b);

// Cross-correlation, no kernel flip.
// input [N,C,H,W], kernel [F,C,kh,kw] -> [N,F,(H+2p-kh)/s+1,(W+2p-kw)/s+1]
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel, int stride, int pad);
// input [N,C,D,H,W], kernel [F,C,k,k,k]
template <typename T>
BasicTensor<T> conv3d(const BasicTensor<T>& input, const BasicTensor<T>& kernel, int stride, int pad);
// Adjoint of conv3d. input [N,C,D,H,W], kernel [C,F,k,k,k] -> [N,F,(D-1)s-2p+k,...]
template <typename T>
BasicTensor<T> conv_transpose3d(const BasicTensor<T>& input, const BasicTensor<T>& kernel, int stride, int pad);

enum class Mode { train, eval };

template <typename T>
struct BatchNormStats {
    BasicTensor<T> running_mean;  // [C]
    BasicTensor<T> running_var;   // [C]
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Per-channel normalization over every axis except 1. Train mode uses batch
/// statistics and updates `stats` (unbiased variance); eval mode reads them.
template <typename T>
BasicTensor<T> batchnorm(const BasicTensor<T>& input, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                         Mode mode, BatchNormStats<T>& stats);

}  // namespace vxda
