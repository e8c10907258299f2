#pragma once

#include <vector>

#include "qlst/rng.hpp"
#include "qlst/tape.hpp"
#include "qlst/tensor.hpp"

// Differentiable ops. Shape rules are strict: the only broadcast allowed is a
// right operand whose shape equals the trailing dimensions of the left operand
// (a bias or a per-feature scale repeated over leading batch dimensions).
namespace qlst::ops {

// a (..., m, k) x b (k, n) -> (..., m, n); or batched when b has the same
// leading dimensions as a: a (..., m, k) x b (..., k, n).
template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

// x (B, Cin, L), w (Cout, Cin, K), bias (Cout) or undefined.
// Output length (L + 2*pad - K) / stride + 1.
template <class T>
BasicTensor<T> conv1d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias,
                      int stride, int pad);

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <class T>
BasicTensor<T> scale(const BasicTensor<T>& x, T s);
template <class T>
BasicTensor<T> add_scalar(const BasicTensor<T>& x, T s);

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& x);
template <class T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x);
template <class T>
BasicTensor<T> exp(const BasicTensor<T>& x);
template <class T>
BasicTensor<T> log(const BasicTensor<T>& x);
// Gradient passes where lo <= x <= hi.
template <class T>
BasicTensor<T> clamp(const BasicTensor<T>& x, T lo, T hi);

// Over the last dimension.
template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& x);
template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          T eps = T(1e-5));

// Inverted dropout with keep probability `keep`. Outside training the input
// handle itself is returned.
template <class T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double keep, Rng& rng, bool training);

template <class T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& xs, int axis);
template <class T>
BasicTensor<T> slice(const BasicTensor<T>& x, int axis, int64_t start, int64_t stop);

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x);
template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x);
// Reduce one axis, which is removed from the shape.
template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x, int axis);
template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x, int axis);

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);
template <class T>
BasicTensor<T> transpose(const BasicTensor<T>& x, int a, int b);
// Repeats every element along the last axis `factor` times.
template <class T>
BasicTensor<T> upsample_nearest(const BasicTensor<T>& x, int factor);

// Mean over all entries of w[c] * BCE(sigmoid(logits), targets) for logits
// and targets of shape (B, C); w may be undefined (all ones).
template <class T>
BasicTensor<T> bce_with_logits(const BasicTensor<T>& logits, const BasicTensor<T>& targets,
                               const BasicTensor<T>& class_weights);

}  // namespace qlst::ops
