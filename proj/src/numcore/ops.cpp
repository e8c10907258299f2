#include "qlst/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <initializer_list>

namespace qlst::ops {

namespace {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapM = Eigen::Map<Mat<T>>;
template <class T>
using CMapM = Eigen::Map<const Mat<T>>;

template <class T>
using NodeP = std::shared_ptr<Node<T>>;

template <class T>
bool recording(std::initializer_list<const BasicTensor<T>*> ins) {
    if (!active_tape<T>()) return false;
    for (auto* p : ins)
        if (p->defined() && p->requires_grad()) return true;
    return false;
}

template <class T>
void record(const char* op, std::initializer_list<const BasicTensor<T>*> ins, BasicTensor<T>& out,
            std::function<void()> fn) {
    out.set_requires_grad(true);
    typename Tape<T>::Entry e;
    e.op = op;
    for (auto* p : ins)
        if (p->defined()) e.input_ids.push_back(p->id());
    e.output = out.node();
    e.output_id = out.id();
    e.backward = std::move(fn);
    active_tape<T>()->record(std::move(e));
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
    throw Error("shape_mismatch", std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const std::string& why) {
    throw Error("shape_mismatch", std::string(op) + ": " + why + " for shape " + shape_str(a));
}

void require_defined(const char* op, bool ok) {
    if (!ok) throw Error("undefined_tensor", std::string(op) + ": undefined input tensor");
}

int norm_axis(const char* op, int axis, int64_t ndim, const Shape& s) {
    int a = axis < 0 ? axis + static_cast<int>(ndim) : axis;
    if (a < 0 || a >= ndim) shape_error(op, s, "axis " + std::to_string(axis) + " out of range");
    return a;
}

// Either identical shapes (period == numel) or b equal to a's trailing dims.
template <class T>
int64_t broadcast_period(const char* op, const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_defined(op, a.defined() && b.defined());
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa == sb) return a.numel();
    if (sb.size() < sa.size() && std::equal(sb.begin(), sb.end(), sa.end() - static_cast<long>(sb.size())))
        return b.numel();
    shape_error(op, sa, sb);
}

template <class T, class F, class G>
BasicTensor<T> unary(const char* op, const BasicTensor<T>& x, F fwd, G dfdx) {
    require_defined(op, x.defined());
    BasicTensor<T> out(x.shape());
    const T* px = x.data();
    T* po = out.data();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
    if (recording<T>({&x})) {
        NodeP<T> xn = x.node(), on = out.node();
        record<T>(op, {&x}, out, [xn, on, n, dfdx]() {
            T* gx = xn->ensure_grad();
            const T* g = on->grad.data();
            for (int64_t i = 0; i < n; ++i) gx[i] += g[i] * dfdx(xn->data[i], on->data[i]);
        });
    }
    return out;
}

}  // namespace

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_defined("matmul", a.defined() && b.defined());
    if (a.ndim() < 2 || b.ndim() < 2) shape_error("matmul", a.shape(), b.shape());
    const int64_t k = a.dim(-1);
    const int64_t m = a.dim(-2);
    if (b.dim(-2) != k) shape_error("matmul", a.shape(), b.shape());
    const int64_t n = b.dim(-1);
    Shape os = a.shape();
    os.back() = n;
    BasicTensor<T> out(os);

    if (b.ndim() == 2) {
        const int64_t rows = a.numel() / k;
        MapM<T>(out.data(), rows, n).noalias() = CMapM<T>(a.data(), rows, k) * CMapM<T>(b.data(), k, n);
        if (recording<T>({&a, &b})) {
            NodeP<T> an = a.node(), bn = b.node(), on = out.node();
            record<T>("matmul", {&a, &b}, out, [an, bn, on, rows, k, n]() {
                CMapM<T> g(on->grad.data(), rows, n);
                if (an->requires_grad)
                    MapM<T>(an->ensure_grad(), rows, k).noalias() += g * CMapM<T>(bn->data.data(), k, n).transpose();
                if (bn->requires_grad)
                    MapM<T>(bn->ensure_grad(), k, n).noalias() += CMapM<T>(an->data.data(), rows, k).transpose() * g;
            });
        }
        return out;
    }

    if (b.ndim() != a.ndim() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()))
        shape_error("matmul", a.shape(), b.shape());
    const int64_t batch = a.numel() / (m * k);
    for (int64_t i = 0; i < batch; ++i)
        MapM<T>(out.data() + i * m * n, m, n).noalias() =
            CMapM<T>(a.data() + i * m * k, m, k) * CMapM<T>(b.data() + i * k * n, k, n);
    if (recording<T>({&a, &b})) {
        NodeP<T> an = a.node(), bn = b.node(), on = out.node();
        record<T>("matmul", {&a, &b}, out, [an, bn, on, batch, m, k, n]() {
            T* ga = an->requires_grad ? an->ensure_grad() : nullptr;
            T* gb = bn->requires_grad ? bn->ensure_grad() : nullptr;
            for (int64_t i = 0; i < batch; ++i) {
                CMapM<T> g(on->grad.data() + i * m * n, m, n);
                if (ga)
                    MapM<T>(ga + i * m * k, m, k).noalias() +=
                        g * CMapM<T>(bn->data.data() + i * k * n, k, n).transpose();
                if (gb)
                    MapM<T>(gb + i * k * n, k, n).noalias() +=
                        CMapM<T>(an->data.data() + i * m * k, m, k).transpose() * g;
            }
        });
    }
    return out;
}

template <class T>
BasicTensor<T> conv1d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias, int stride,
                      int pad) {
    require_defined("conv1d", x.defined() && w.defined());
    if (x.ndim() != 3 || w.ndim() != 3 || x.dim(1) != w.dim(1)) shape_error("conv1d", x.shape(), w.shape());
    if (stride < 1 || pad < 0) shape_error("conv1d", x.shape(), "invalid stride/padding");
    const int64_t B = x.dim(0), Ci = x.dim(1), L = x.dim(2);
    const int64_t Co = w.dim(0), K = w.dim(2);
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != Co)) shape_error("conv1d", w.shape(), bias.shape());
    const int64_t span = L + 2 * pad - K;
    if (span < 0) shape_error("conv1d", x.shape(), "kernel longer than padded input");
    const int64_t Lo = span / stride + 1;
    const int64_t R = Ci * K;
    const int64_t N = B * Lo;

    std::vector<T> cols(static_cast<size_t>(R * N), T(0));
    const T* px = x.data();
    for (int64_t ci = 0; ci < Ci; ++ci)
        for (int64_t kk = 0; kk < K; ++kk) {
            T* row = cols.data() + (ci * K + kk) * N;
            for (int64_t b = 0; b < B; ++b) {
                const T* xr = px + (b * Ci + ci) * L;
                T* dst = row + b * Lo;
                for (int64_t t = 0; t < Lo; ++t) {
                    int64_t src = t * stride + kk - pad;
                    if (src >= 0 && src < L) dst[t] = xr[src];
                }
            }
        }

    Mat<T> Y(Co, N);
    Y.noalias() = CMapM<T>(w.data(), Co, R) * CMapM<T>(cols.data(), R, N);
    BasicTensor<T> out(Shape{B, Co, Lo});
    T* po = out.data();
    const T* pb = bias.defined() ? bias.data() : nullptr;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t co = 0; co < Co; ++co) {
            const T* yr = Y.data() + co * N + b * Lo;
            T* orow = po + (b * Co + co) * Lo;
            const T bv = pb ? pb[co] : T(0);
            for (int64_t t = 0; t < Lo; ++t) orow[t] = yr[t] + bv;
        }

    if (recording<T>({&x, &w, &bias})) {
        NodeP<T> xn = x.node(), wn = w.node(), on = out.node();
        NodeP<T> bn = bias.defined() ? bias.node() : nullptr;
        // The unfolded input is only needed for the weight gradient.
        auto saved = std::make_shared<std::vector<T>>();
        if (w.requires_grad()) *saved = std::move(cols);
        record<T>("conv1d", {&x, &w, &bias}, out, [=]() {
            Mat<T> G(Co, N);
            const T* g = on->grad.data();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t co = 0; co < Co; ++co)
                    std::copy_n(g + (b * Co + co) * Lo, Lo, G.data() + co * N + b * Lo);
            if (bn && bn->requires_grad) {
                T* gb = bn->ensure_grad();
                for (int64_t co = 0; co < Co; ++co) gb[co] += G.row(co).sum();
            }
            if (wn->requires_grad)
                MapM<T>(wn->ensure_grad(), Co, R).noalias() += G * CMapM<T>(saved->data(), R, N).transpose();
            if (xn->requires_grad) {
                Mat<T> dcols(R, N);
                dcols.noalias() = CMapM<T>(wn->data.data(), Co, R).transpose() * G;
                T* gx = xn->ensure_grad();
                for (int64_t ci = 0; ci < Ci; ++ci)
                    for (int64_t kk = 0; kk < K; ++kk) {
                        const T* row = dcols.data() + (ci * K + kk) * N;
                        for (int64_t b = 0; b < B; ++b) {
                            T* gr = gx + (b * Ci + ci) * L;
                            const T* src = row + b * Lo;
                            for (int64_t t = 0; t < Lo; ++t) {
                                int64_t d = t * stride + kk - pad;
                                if (d >= 0 && d < L) gr[d] += src[t];
                            }
                        }
                    }
            }
        });
    }
    return out;
}

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    const int64_t p = broadcast_period("add", a, b);
    BasicTensor<T> out(a.shape());
    const int64_t n = a.numel();
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i % p];
    if (recording<T>({&a, &b})) {
        NodeP<T> an = a.node(), bn = b.node(), on = out.node();
        record<T>("add", {&a, &b}, out, [an, bn, on, n, p]() {
            const T* g = on->grad.data();
            if (an->requires_grad) {
                T* ga = an->ensure_grad();
                for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
            }
            if (bn->requires_grad) {
                T* gb = bn->ensure_grad();
                for (int64_t i = 0; i < n; ++i) gb[i % p] += g[i];
            }
        });
    }
    return out;
}

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    const int64_t p = broadcast_period("sub", a, b);
    BasicTensor<T> out(a.shape());
    const int64_t n = a.numel();
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i % p];
    if (recording<T>({&a, &b})) {
        NodeP<T> an = a.node(), bn = b.node(), on = out.node();
        record<T>("sub", {&a, &b}, out, [an, bn, on, n, p]() {
            const T* g = on->grad.data();
            if (an->requires_grad) {
                T* ga = an->ensure_grad();
                for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
            }
            if (bn->requires_grad) {
                T* gb = bn->ensure_grad();
                for (int64_t i = 0; i < n; ++i) gb[i % p] -= g[i];
            }
        });
    }
    return out;
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    const int64_t p = broadcast_period("mul", a, b);
    BasicTensor<T> out(a.shape());
    const int64_t n = a.numel();
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i % p];
    if (recording<T>({&a, &b})) {
        NodeP<T> an = a.node(), bn = b.node(), on = out.node();
        record<T>("mul", {&a, &b}, out, [an, bn, on, n, p]() {
            const T* g = on->grad.data();
            if (an->requires_grad) {
                T* ga = an->ensure_grad();
                for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * bn->data[i % p];
            }
            if (bn->requires_grad) {
                T* gb = bn->ensure_grad();
                for (int64_t i = 0; i < n; ++i) gb[i % p] += g[i] * an->data[i];
            }
        });
    }
    return out;
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& x, T s) {
    return unary<T>("scale", x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
BasicTensor<T> add_scalar(const BasicTensor<T>& x, T s) {
    return unary<T>("add_scalar", x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
    return unary<T>(
        "relu", x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
    return unary<T>(
        "sigmoid", x,
        [](T v) {
            if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
            T e = std::exp(v);
            return e / (T(1) + e);
        },
        [](T, T y) { return y * (T(1) - y); });
}

template <class T>
BasicTensor<T> exp(const BasicTensor<T>& x) {
    return unary<T>("exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
BasicTensor<T> log(const BasicTensor<T>& x) {
    return unary<T>("log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
BasicTensor<T> clamp(const BasicTensor<T>& x, T lo, T hi) {
    return unary<T>(
        "clamp", x, [lo, hi](T v) { return std::min(std::max(v, lo), hi); },
        [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& x) {
    require_defined("softmax", x.defined());
    if (x.ndim() < 1) shape_error("softmax", x.shape(), "needs at least one dimension");
    const int64_t n = x.dim(-1);
    const int64_t rows = n ? x.numel() / n : 0;
    BasicTensor<T> out(x.shape());
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x.data() + r * n;
        T* yr = out.data() + r * n;
        T mx = *std::max_element(xr, xr + n);
        T s = 0;
        for (int64_t j = 0; j < n; ++j) s += (yr[j] = std::exp(xr[j] - mx));
        for (int64_t j = 0; j < n; ++j) yr[j] /= s;
    }
    if (recording<T>({&x})) {
        NodeP<T> xn = x.node(), on = out.node();
        record<T>("softmax", {&x}, out, [xn, on, rows, n]() {
            T* gx = xn->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const T* y = on->data.data() + r * n;
                const T* g = on->grad.data() + r * n;
                T dot = 0;
                for (int64_t j = 0; j < n; ++j) dot += g[j] * y[j];
                for (int64_t j = 0; j < n; ++j) gx[r * n + j] += y[j] * (g[j] - dot);
            }
        });
    }
    return out;
}

template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta, T eps) {
    require_defined("layer_norm", x.defined() && gamma.defined() && beta.defined());
    const int64_t n = x.dim(-1);
    if (gamma.shape() != Shape{n} || beta.shape() != Shape{n}) shape_error("layer_norm", x.shape(), gamma.shape());
    const int64_t rows = x.numel() / n;
    BasicTensor<T> out(x.shape());
    auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(x.numel()));
    auto rstd = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x.data() + r * n;
        T mu = 0;
        for (int64_t j = 0; j < n; ++j) mu += xr[j];
        mu /= T(n);
        T var = 0;
        for (int64_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= T(n);
        T rs = T(1) / std::sqrt(var + eps);
        (*rstd)[r] = rs;
        for (int64_t j = 0; j < n; ++j) {
            T h = (xr[j] - mu) * rs;
            (*xhat)[r * n + j] = h;
            out.data()[r * n + j] = h * gamma.data()[j] + beta.data()[j];
        }
    }
    if (recording<T>({&x, &gamma, &beta})) {
        NodeP<T> xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
        record<T>("layer_norm", {&x, &gamma, &beta}, out, [=]() {
            const T* g = on->grad.data();
            T* gg = gn->requires_grad ? gn->ensure_grad() : nullptr;
            T* gb = bn->requires_grad ? bn->ensure_grad() : nullptr;
            T* gx = xn->requires_grad ? xn->ensure_grad() : nullptr;
            std::vector<T> dh(static_cast<size_t>(n));
            for (int64_t r = 0; r < rows; ++r) {
                const T* h = xhat->data() + r * n;
                const T* gr = g + r * n;
                T m1 = 0, m2 = 0;
                for (int64_t j = 0; j < n; ++j) {
                    if (gg) gg[j] += gr[j] * h[j];
                    if (gb) gb[j] += gr[j];
                    dh[j] = gr[j] * gn->data[j];
                    m1 += dh[j];
                    m2 += dh[j] * h[j];
                }
                if (!gx) continue;
                m1 /= T(n);
                m2 /= T(n);
                for (int64_t j = 0; j < n; ++j) gx[r * n + j] += (*rstd)[r] * (dh[j] - m1 - h[j] * m2);
            }
        });
    }
    return out;
}

template <class T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double keep, Rng& rng, bool training) {
    require_defined("dropout", x.defined());
    if (!(keep > 0.0 && keep <= 1.0))
        throw Error("invalid_argument", "dropout: keep probability must be in (0, 1], got " + std::to_string(keep));
    if (!training || keep == 1.0) return x;
    const int64_t n = x.numel();
    auto mask = std::make_shared<std::vector<T>>(static_cast<size_t>(n));
    const T inv = T(1.0 / keep);
    for (int64_t i = 0; i < n; ++i) (*mask)[i] = rng.bernoulli(keep) ? inv : T(0);
    BasicTensor<T> out(x.shape());
    for (int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * (*mask)[i];
    if (recording<T>({&x})) {
        NodeP<T> xn = x.node(), on = out.node();
        record<T>("dropout", {&x}, out, [xn, on, mask, n]() {
            T* gx = xn->ensure_grad();
            for (int64_t i = 0; i < n; ++i) gx[i] += on->grad[i] * (*mask)[i];
        });
    }
    return out;
}

template <class T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& xs, int axis) {
    if (xs.empty()) throw Error("invalid_argument", "concat: no inputs");
    for (auto& t : xs) require_defined("concat", t.defined());
    const Shape& s0 = xs[0].shape();
    const int ax = norm_axis("concat", axis, xs[0].ndim(), s0);
    Shape os = s0;
    os[ax] = 0;
    for (auto& t : xs) {
        if (t.ndim() != xs[0].ndim()) shape_error("concat", s0, t.shape());
        for (int d = 0; d < t.ndim(); ++d)
            if (d != ax && t.shape()[d] != s0[d]) shape_error("concat", s0, t.shape());
        os[ax] += t.shape()[ax];
    }
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < ax; ++d) outer *= s0[d];
    for (size_t d = ax + 1; d < s0.size(); ++d) inner *= s0[d];
    BasicTensor<T> out(os);
    const int64_t orow = os[ax] * inner;
    std::vector<int64_t> offs;
    int64_t off = 0;
    for (auto& t : xs) {
        const int64_t chunk = t.shape()[ax] * inner;
        for (int64_t o = 0; o < outer; ++o)
            std::copy_n(t.data() + o * chunk, chunk, out.data() + o * orow + off);
        offs.push_back(off);
        off += chunk;
    }
    bool rec = false;
    if (active_tape<T>())
        for (auto& t : xs) rec = rec || t.requires_grad();
    if (rec) {
        std::vector<NodeP<T>> ins;
        for (auto& t : xs) ins.push_back(t.node());
        NodeP<T> on = out.node();
        out.set_requires_grad(true);
        typename Tape<T>::Entry e;
        e.op = "concat";
        for (auto& t : xs) e.input_ids.push_back(t.id());
        e.output = on;
        e.output_id = out.id();
        e.backward = [ins, on, offs, outer, orow, ax, inner]() {
            for (size_t i = 0; i < ins.size(); ++i) {
                if (!ins[i]->requires_grad) continue;
                const int64_t chunk = ins[i]->shape[ax] * inner;
                T* gi = ins[i]->ensure_grad();
                for (int64_t o = 0; o < outer; ++o) {
                    const T* src = on->grad.data() + o * orow + offs[i];
                    for (int64_t j = 0; j < chunk; ++j) gi[o * chunk + j] += src[j];
                }
            }
        };
        active_tape<T>()->record(std::move(e));
    }
    return out;
}

template <class T>
BasicTensor<T> slice(const BasicTensor<T>& x, int axis, int64_t start, int64_t stop) {
    require_defined("slice", x.defined());
    const int ax = norm_axis("slice", axis, x.ndim(), x.shape());
    const int64_t len = x.shape()[ax];
    if (start < 0 || stop > len || start >= stop)
        shape_error("slice", x.shape(), "range [" + std::to_string(start) + ", " + std::to_string(stop) + ") invalid");
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < ax; ++d) outer *= x.shape()[d];
    for (int64_t d = ax + 1; d < x.ndim(); ++d) inner *= x.shape()[d];
    Shape os = x.shape();
    os[ax] = stop - start;
    BasicTensor<T> out(os);
    const int64_t chunk = (stop - start) * inner;
    for (int64_t o = 0; o < outer; ++o)
        std::copy_n(x.data() + o * len * inner + start * inner, chunk, out.data() + o * chunk);
    if (recording<T>({&x})) {
        NodeP<T> xn = x.node(), on = out.node();
        record<T>("slice", {&x}, out, [xn, on, outer, len, inner, start, chunk]() {
            T* gx = xn->ensure_grad();
            for (int64_t o = 0; o < outer; ++o) {
                T* dst = gx + o * len * inner + start * inner;
                const T* src = on->grad.data() + o * chunk;
                for (int64_t j = 0; j < chunk; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
    require_defined("sum", x.defined());
    T s = 0;
    for (int64_t i = 0; i < x.numel(); ++i) s += x.data()[i];
    BasicTensor<T> out = BasicTensor<T>::scalar(s);
    if (recording<T>({&x})) {
        NodeP<T> xn = x.node(), on = out.node();
        record<T>("sum", {&x}, out, [xn, on]() {
            T* gx = xn->ensure_grad();
            const T g = on->grad[0];
            for (size_t i = 0; i < xn->data.size(); ++i) gx[i] += g;
        });
    }
    return out;
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
    require_defined("mean", x.defined());
    if (x.numel() == 0) shape_error("mean", x.shape(), "empty tensor");
    const T inv = T(1) / T(x.numel());
    T s = 0;
    for (int64_t i = 0; i < x.numel(); ++i) s += x.data()[i];
    BasicTensor<T> out = BasicTensor<T>::scalar(s * inv);
    if (recording<T>({&x})) {
        NodeP<T> xn = x.node(), on = out.node();
        record<T>("mean", {&x}, out, [xn, on, inv]() {
            T* gx = xn->ensure_grad();
            const T g = on->grad[0] * inv;
            for (size_t i = 0; i < xn->data.size(); ++i) gx[i] += g;
        });
    }
    return out;
}

namespace {
template <class T>
BasicTensor<T> reduce_axis(const char* op, const BasicTensor<T>& x, int axis, bool average) {
    require_defined(op, x.defined());
    const int ax = norm_axis(op, axis, x.ndim(), x.shape());
    const int64_t n = x.shape()[ax];
    if (n == 0) shape_error(op, x.shape(), "empty axis");
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < ax; ++d) outer *= x.shape()[d];
    for (int64_t d = ax + 1; d < x.ndim(); ++d) inner *= x.shape()[d];
    Shape os = x.shape();
    os.erase(os.begin() + ax);
    BasicTensor<T> out(os);
    const T f = average ? T(1) / T(n) : T(1);
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
            T s = 0;
            for (int64_t j = 0; j < n; ++j) s += x.data()[(o * n + j) * inner + i];
            out.data()[o * inner + i] = s * f;
        }
    if (recording<T>({&x})) {
        NodeP<T> xn = x.node(), on = out.node();
        record<T>(op, {&x}, out, [xn, on, outer, inner, n, f]() {
            T* gx = xn->ensure_grad();
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t i = 0; i < inner; ++i) {
                    const T g = on->grad[o * inner + i] * f;
                    for (int64_t j = 0; j < n; ++j) gx[(o * n + j) * inner + i] += g;
                }
        });
    }
    return out;
}
}  // namespace

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x, int axis) {
    return reduce_axis<T>("sum", x, axis, false);
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x, int axis) {
    return reduce_axis<T>("mean", x, axis, true);
}

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
    require_defined("reshape", x.defined());
    int64_t known = 1;
    int infer = -1;
    for (size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == -1) {
            if (infer >= 0) shape_error("reshape", shape, "more than one inferred dimension");
            infer = static_cast<int>(i);
        } else {
            known *= shape[i];
        }
    }
    if (infer >= 0 && known > 0 && x.numel() % known == 0) shape[infer] = x.numel() / known;
    if (numel_of(shape) != x.numel()) shape_error("reshape", x.shape(), shape);
    BasicTensor<T> out(shape, x.values());
    if (recording<T>({&x})) {
        NodeP<T> xn = x.node(), on = out.node();
        record<T>("reshape", {&x}, out, [xn, on]() {
            T* gx = xn->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i) gx[i] += on->grad[i];
        });
    }
    return out;
}

template <class T>
BasicTensor<T> transpose(const BasicTensor<T>& x, int a, int b) {
    require_defined("transpose", x.defined());
    const int nd = static_cast<int>(x.ndim());
    const int aa = norm_axis("transpose", a, nd, x.shape());
    const int bb = norm_axis("transpose", b, nd, x.shape());
    Shape os = x.shape();
    std::swap(os[aa], os[bb]);
    BasicTensor<T> out(os);
    // Source offset for every output element, shared by forward and backward.
    std::vector<int64_t> in_stride(nd, 1);
    for (int d = nd - 2; d >= 0; --d) in_stride[d] = in_stride[d + 1] * x.shape()[d + 1];
    std::vector<int64_t> perm_stride = in_stride;
    std::swap(perm_stride[aa], perm_stride[bb]);
    const int64_t n = x.numel();
    auto src = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n));
    std::vector<int64_t> idx(nd, 0);
    for (int64_t i = 0; i < n; ++i) {
        int64_t off = 0;
        for (int d = 0; d < nd; ++d) off += idx[d] * perm_stride[d];
        (*src)[i] = off;
        out.data()[i] = x.data()[off];
        for (int d = nd - 1; d >= 0; --d) {
            if (++idx[d] < os[d]) break;
            idx[d] = 0;
        }
    }
    if (recording<T>({&x})) {
        NodeP<T> xn = x.node(), on = out.node();
        record<T>("transpose", {&x}, out, [xn, on, src, n]() {
            T* gx = xn->ensure_grad();
            for (int64_t i = 0; i < n; ++i) gx[(*src)[i]] += on->grad[i];
        });
    }
    return out;
}

template <class T>
BasicTensor<T> upsample_nearest(const BasicTensor<T>& x, int factor) {
    require_defined("upsample_nearest", x.defined());
    if (factor < 1 || x.ndim() < 1) shape_error("upsample_nearest", x.shape(), "invalid factor");
    const int64_t L = x.dim(-1);
    const int64_t rows = L ? x.numel() / L : 0;
    Shape os = x.shape();
    os.back() = L * factor;
    BasicTensor<T> out(os);
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t i = 0; i < L * factor; ++i) out.data()[r * L * factor + i] = x.data()[r * L + i / factor];
    if (recording<T>({&x})) {
        NodeP<T> xn = x.node(), on = out.node();
        record<T>("upsample_nearest", {&x}, out, [xn, on, rows, L, factor]() {
            T* gx = xn->ensure_grad();
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t i = 0; i < L * factor; ++i) gx[r * L + i / factor] += on->grad[r * L * factor + i];
        });
    }
    return out;
}

template <class T>
BasicTensor<T> bce_with_logits(const BasicTensor<T>& logits, const BasicTensor<T>& targets,
                               const BasicTensor<T>& class_weights) {
    require_defined("bce_with_logits", logits.defined() && targets.defined());
    if (logits.ndim() != 2 || logits.shape() != targets.shape())
        shape_error("bce_with_logits", logits.shape(), targets.shape());
    const int64_t B = logits.dim(0), C = logits.dim(1);
    if (class_weights.defined() && class_weights.shape() != Shape{C})
        shape_error("bce_with_logits", logits.shape(), class_weights.shape());
    const T inv = T(1) / T(B * C);
    T s = 0;
    for (int64_t i = 0; i < B * C; ++i) {
        const T l = logits.data()[i], t = targets.data()[i];
        const T w = class_weights.defined() ? class_weights.data()[i % C] : T(1);
        s += w * (std::max(l, T(0)) - l * t + std::log1p(std::exp(-std::abs(l))));
    }
    BasicTensor<T> out = BasicTensor<T>::scalar(s * inv);
    if (recording<T>({&logits, &class_weights})) {
        NodeP<T> ln = logits.node(), tn = targets.node(), on = out.node();
        NodeP<T> wn = class_weights.defined() ? class_weights.node() : nullptr;
        record<T>("bce_with_logits", {&logits, &class_weights}, out, [=]() {
            const T g = on->grad[0] * inv;
            T* gl = ln->requires_grad ? ln->ensure_grad() : nullptr;
            T* gw = (wn && wn->requires_grad) ? wn->ensure_grad() : nullptr;
            for (int64_t i = 0; i < B * C; ++i) {
                const T l = ln->data[i], t = tn->data[i];
                const T w = wn ? wn->data[i % C] : T(1);
                const T sg = l >= T(0) ? T(1) / (T(1) + std::exp(-l)) : std::exp(l) / (T(1) + std::exp(l));
                if (gl) gl[i] += g * w * (sg - t);
                if (gw) gw[i % C] += g * (std::max(l, T(0)) - l * t + std::log1p(std::exp(-std::abs(l))));
            }
        });
    }
    return out;
}

#define QLST_INSTANTIATE_OPS(T)                                                                                  \
    template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                                \
    template BasicTensor<T> conv1d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, int, int); \
    template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                                   \
    template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                                   \
    template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                                   \
    template BasicTensor<T> scale(const BasicTensor<T>&, T);                                                     \
    template BasicTensor<T> add_scalar(const BasicTensor<T>&, T);                                                \
    template BasicTensor<T> relu(const BasicTensor<T>&);                                                         \
    template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                                      \
    template BasicTensor<T> exp(const BasicTensor<T>&);                                                          \
    template BasicTensor<T> log(const BasicTensor<T>&);                                                          \
    template BasicTensor<T> clamp(const BasicTensor<T>&, T, T);                                                  \
    template BasicTensor<T> softmax(const BasicTensor<T>&);                                                      \
    template BasicTensor<T> layer_norm(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, T);  \
    template BasicTensor<T> dropout(const BasicTensor<T>&, double, Rng&, bool);                                  \
    template BasicTensor<T> concat(const std::vector<BasicTensor<T>>&, int);                                     \
    template BasicTensor<T> slice(const BasicTensor<T>&, int, int64_t, int64_t);                                 \
    template BasicTensor<T> sum(const BasicTensor<T>&);                                                          \
    template BasicTensor<T> mean(const BasicTensor<T>&);                                                         \
    template BasicTensor<T> sum(const BasicTensor<T>&, int);                                                     \
    template BasicTensor<T> mean(const BasicTensor<T>&, int);                                                    \
    template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                               \
    template BasicTensor<T> transpose(const BasicTensor<T>&, int, int);                                          \
    template BasicTensor<T> upsample_nearest(const BasicTensor<T>&, int);                                        \
    template BasicTensor<T> bce_with_logits(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);

QLST_INSTANTIATE_OPS(float)
QLST_INSTANTIATE_OPS(double)

}  // namespace qlst::ops
