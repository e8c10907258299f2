#pragma once

#include <optional>
#include <string>

#include "qlst/adam.hpp"
#include "qlst/attention.hpp"
#include "qlst/ops.hpp"

// Building blocks shared by the three model families. Parameters are float
// tensors flagged requires_grad; forward passes only record when a tape is
// active on the calling thread.
namespace qlst::nn {

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
Tensor init_uniform(Rng& rng, Shape shape, int64_t fan_in);
Tensor init_normal(Rng& rng, Shape shape, double sd);

class Linear {
public:
    Linear() = default;
    Linear(int64_t in, int64_t out, Rng& rng);
    // x (..., in) -> (..., out)
    Tensor forward(const Tensor& x) const;
    void collect(NamedParams& out, const std::string& prefix) const;

    Tensor w;  // (in, out)
    Tensor b;  // (out)
};

class Conv1d {
public:
    Conv1d() = default;
    Conv1d(int64_t in, int64_t out, int kernel, int stride, int pad, Rng& rng);
    Tensor forward(const Tensor& x) const;
    void collect(NamedParams& out, const std::string& prefix) const;

    Tensor w;  // (out, in, kernel)
    Tensor b;  // (out)
    int stride = 1;
    int pad = 0;
};

// relu(conv2(relu(conv1(x))) + skip(x)); the skip is a strided 1x1 conv when
// the shape changes. conv2 starts scaled down so each block begins close to
// its skip path.
class ResBlock {
public:
    ResBlock() = default;
    ResBlock(int64_t in, int64_t out, int stride, int kernel, Rng& rng);
    Tensor forward(const Tensor& x) const;
    void collect(NamedParams& out, const std::string& prefix) const;

    Conv1d c1, c2;
    std::optional<Conv1d> skip;
};

class LayerNorm {
public:
    LayerNorm() = default;
    explicit LayerNorm(int64_t dim);
    Tensor forward(const Tensor& x) const;
    void collect(NamedParams& out, const std::string& prefix) const;

    Tensor gamma, beta;
};

class MultiHeadAttention {
public:
    MultiHeadAttention() = default;
    MultiHeadAttention(int64_t dim, int heads, double p_drop, Rng& rng);
    Tensor forward(const Tensor& x, bool training, Rng* rng) const;
    void collect(NamedParams& out, const std::string& prefix) const;

    Linear qkv, out;
    int heads = 1;
    double p_drop = 0.0;
};

}  // namespace qlst::nn
