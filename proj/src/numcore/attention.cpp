#include "qlst/attention.hpp"

#include <cmath>

namespace qlst {

template <class T>
BasicTensor<T> multi_head_attention(const BasicTensor<T>& x, const AttentionWeights<T>& w, int heads, double p_drop,
                                    Rng* rng, bool training, BasicTensor<T>* weights_out) {
    if (!x.defined() || x.ndim() != 3)
        throw Error("shape_mismatch", "multi_head_attention: expected (B, T, D) input, got " +
                                          (x.defined() ? shape_str(x.shape()) : std::string("undefined")));
    const int64_t B = x.dim(0), L = x.dim(1), D = x.dim(2);
    if (heads < 1 || D % heads != 0)
        throw Error("indivisible_heads", "multi_head_attention: model dimension " + std::to_string(D) +
                                             " is not divisible by " + std::to_string(heads) + " heads");
    if (training && p_drop > 0.0 && rng == nullptr)
        throw Error("invalid_argument", "multi_head_attention: dropout in training mode needs an RNG stream");
    const int64_t dh = D / heads;
    const double keep = 1.0 - p_drop;

    auto qkv = ops::add(ops::matmul(x, w.w_qkv), w.b_qkv);  // (B, L, 3D)
    auto split = [&](int64_t k) {
        auto part = ops::slice(qkv, 2, k * D, (k + 1) * D);
        return ops::transpose(ops::reshape(part, Shape{B, L, heads, dh}), 1, 2);  // (B, H, L, dh)
    };
    auto q = split(0), k = split(1), v = split(2);
    auto scores = ops::scale(ops::matmul(q, ops::transpose(k, 2, 3)), T(1.0 / std::sqrt(double(dh))));
    auto att = ops::softmax(scores);
    if (weights_out) *weights_out = att;
    Rng dummy(0);
    Rng& r = rng ? *rng : dummy;
    att = ops::dropout(att, keep, r, training);
    auto ctx = ops::reshape(ops::transpose(ops::matmul(att, v), 1, 2), Shape{B, L, D});
    auto y = ops::add(ops::matmul(ctx, w.w_out), w.b_out);
    return ops::dropout(y, keep, r, training);
}

template BasicTensor<float> multi_head_attention(const BasicTensor<float>&, const AttentionWeights<float>&, int,
                                                 double, Rng*, bool, BasicTensor<float>*);
template BasicTensor<double> multi_head_attention(const BasicTensor<double>&, const AttentionWeights<double>&, int,
                                                  double, Rng*, bool, BasicTensor<double>*);

}  // namespace qlst
