#include "qlst/adam.hpp"

#include <cmath>

namespace qlst {

Adam::Adam(NamedParams params, AdamOptions opt) : params_(std::move(params)), opt_(opt) {
    for (auto& [name, p] : params_) {
        m_.emplace_back(static_cast<size_t>(p.numel()), 0.0f);
        v_.emplace_back(static_cast<size_t>(p.numel()), 0.0f);
    }
}

void Adam::zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
}

void Adam::step() {
    for (auto& [name, p] : params_) {
        if (!p.has_grad()) continue;
        for (float g : p.grad())
            if (!std::isfinite(g)) throw Error("nan_gradient", "non-finite gradient in parameter '" + name + "'");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, double(t_));
    const float b1 = float(opt_.beta1), b2 = float(opt_.beta2);
    const float step = float(opt_.lr / bc1);
    const float inv_sqrt_bc2 = float(1.0 / std::sqrt(bc2));
    const float eps = float(opt_.eps);
    for (size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i].second;
        float* w = p.data();
        auto& m = m_[i];
        auto& v = v_[i];
        const bool has = p.has_grad();
        const float* g = has ? p.grad().data() : nullptr;
        for (size_t j = 0; j < m.size(); ++j) {
            const float gj = has ? g[j] : 0.0f;
            m[j] = b1 * m[j] + (1.0f - b1) * gj;
            v[j] = b2 * v[j] + (1.0f - b2) * gj * gj;
            w[j] -= step * m[j] / (std::sqrt(v[j]) * inv_sqrt_bc2 + eps);
        }
    }
}

}  // namespace qlst
