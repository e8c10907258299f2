#pragma once

#include <string>
#include <utility>
#include <vector>

#include "qlst/tensor.hpp"

namespace qlst {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    Adam(NamedParams params, AdamOptions opt = {});

    // Applies one bias-corrected update from the parameters' current grads.
    // A parameter without a grad is treated as having a zero gradient.
    void step();
    void zero_grad();

    void set_lr(double lr) { opt_.lr = lr; }
    double lr() const { return opt_.lr; }
    int64_t step_count() const { return t_; }
    const std::vector<std::vector<float>>& first_moments() const { return m_; }
    const std::vector<std::vector<float>>& second_moments() const { return v_; }

private:
    NamedParams params_;
    AdamOptions opt_;
    std::vector<std::vector<float>> m_, v_;
    int64_t t_ = 0;
};

}  // namespace qlst
