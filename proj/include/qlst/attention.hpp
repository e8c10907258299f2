#pragma once

#include "qlst/ops.hpp"

namespace qlst {

template <class T>
struct AttentionWeights {
    BasicTensor<T> w_qkv;  // (D, 3D)
    BasicTensor<T> b_qkv;  // (3D)
    BasicTensor<T> w_out;  // (D, D)
    BasicTensor<T> b_out;  // (D)
};

// Scaled dot-product self-attention over x (B, T, D). Dropout with
// probability p_drop hits the post-softmax weights and the output projection.
// When `weights_out` is given it receives the (B, heads, T, T) attention
// weights before dropout.
template <class T>
BasicTensor<T> multi_head_attention(const BasicTensor<T>& x, const AttentionWeights<T>& w, int heads,
                                    double p_drop, Rng* rng, bool training,
                                    BasicTensor<T>* weights_out = nullptr);

}  // namespace qlst
