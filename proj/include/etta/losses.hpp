#pragma once

#include <cstdint>
#include <vector>

#include "etta/tensor.hpp"

namespace etta {

// 1 − mean over batch and foreground classes (1..C−1) of the smoothed
// overlap ratio (2·Σp·y + eps)/(Σp + Σy + eps). Gradient w.r.t. probs only;
// onehot is treated as a constant target.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& probs, const Tensor<T>& onehot, T eps = T(1e-5));

// Mean per-pixel negative log softmax probability of the true class,
// computed from logits via logsumexp. labels holds N*H*W class indices.
template <typename T>
Tensor<T> cross_entropy_loss(const Tensor<T>& logits, const std::vector<uint8_t>& labels);

// Mean elementwise binary cross-entropy on logits against targets in [0,1],
// max(g,0) − g·y + log(1+exp(−|g|)) per element.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const std::vector<T>& targets);

// Mean per-pixel Shannon entropy of the channel softmax of [N,C,H,W] logits.
template <typename T>
Tensor<T> softmax_entropy_mean(const Tensor<T>& logits);

#define ETTA_EXTERN_LOSSES(T)                                                             \
    extern template Tensor<T> dice_loss(const Tensor<T>&, const Tensor<T>&, T);          \
    extern template Tensor<T> cross_entropy_loss(const Tensor<T>&,                       \
                                                 const std::vector<uint8_t>&);           \
    extern template Tensor<T> bce_with_logits(const Tensor<T>&, const std::vector<T>&);  \
    extern template Tensor<T> softmax_entropy_mean(const Tensor<T>&);

ETTA_EXTERN_LOSSES(float)
ETTA_EXTERN_LOSSES(double)
#undef ETTA_EXTERN_LOSSES

}  // namespace etta
