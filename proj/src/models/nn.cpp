#include "qlst/nn.hpp"

#include <cmath>

namespace qlst::nn {

Tensor init_uniform(Rng& rng, Shape shape, int64_t fan_in) {
    Tensor t(std::move(shape));
    const double bound = 1.0 / std::sqrt(double(fan_in));
    for (auto& v : t.values()) v = float(rng.uniform(-bound, bound));
    t.set_requires_grad(true);
    return t;
}

Tensor init_normal(Rng& rng, Shape shape, double sd) {
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = float(sd * rng.normal());
    t.set_requires_grad(true);
    return t;
}

Linear::Linear(int64_t in, int64_t out, Rng& rng)
    : w(init_uniform(rng, {in, out}, in)), b(init_uniform(rng, {out}, in)) {}

Tensor Linear::forward(const Tensor& x) const { return ops::add(ops::matmul(x, w), b); }

void Linear::collect(NamedParams& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".w", w);
    out.emplace_back(prefix + ".b", b);
}

Conv1d::Conv1d(int64_t in, int64_t out, int kernel, int stride_, int pad_, Rng& rng)
    : w(init_uniform(rng, {out, in, kernel}, in * kernel)),
      b(init_uniform(rng, {out}, in * kernel)),
      stride(stride_),
      pad(pad_) {}

Tensor Conv1d::forward(const Tensor& x) const { return ops::conv1d(x, w, b, stride, pad); }

void Conv1d::collect(NamedParams& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".w", w);
    out.emplace_back(prefix + ".b", b);
}

ResBlock::ResBlock(int64_t in, int64_t out, int stride, int kernel, Rng& rng)
    : c1(in, out, kernel, stride, kernel / 2, rng), c2(out, out, kernel, 1, kernel / 2, rng) {
    for (auto& v : c2.w.values()) v *= 0.2f;
    if (in != out || stride != 1) skip.emplace(in, out, 1, stride, 0, rng);
}

Tensor ResBlock::forward(const Tensor& x) const {
    Tensor h = c2.forward(ops::relu(c1.forward(x)));
    return ops::relu(ops::add(h, skip ? skip->forward(x) : x));
}

void ResBlock::collect(NamedParams& out, const std::string& prefix) const {
    c1.collect(out, prefix + ".c1");
    c2.collect(out, prefix + ".c2");
    if (skip) skip->collect(out, prefix + ".skip");
}

LayerNorm::LayerNorm(int64_t dim) : gamma(Shape{dim}, 1.0f), beta(Shape{dim}, 0.0f) {
    gamma.set_requires_grad(true);
    beta.set_requires_grad(true);
}

Tensor LayerNorm::forward(const Tensor& x) const { return ops::layer_norm(x, gamma, beta); }

void LayerNorm::collect(NamedParams& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
}

MultiHeadAttention::MultiHeadAttention(int64_t dim, int heads_, double p_drop_, Rng& rng)
    : qkv(dim, 3 * dim, rng), out(dim, dim, rng), heads(heads_), p_drop(p_drop_) {
    if (heads < 1 || dim % heads != 0)
        throw Error("indivisible_heads", "model dimension " + std::to_string(dim) + " is not divisible by " +
                                             std::to_string(heads) + " heads");
}

Tensor MultiHeadAttention::forward(const Tensor& x, bool training, Rng* rng) const {
    AttentionWeights<float> w{qkv.w, qkv.b, out.w, out.b};
    return multi_head_attention(x, w, heads, p_drop, rng, training);
}

void MultiHeadAttention::collect(NamedParams& o, const std::string& prefix) const {
    qkv.collect(o, prefix + ".qkv");
    out.collect(o, prefix + ".out");
}

}  // namespace qlst::nn
