#include "qlst/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>

namespace qlst {

int64_t numel_of(const Shape& shape) {
    int64_t n = 1;
    for (auto d : shape) {
        if (d < 0) throw Error("shape_invalid", "negative dimension in " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
    if (shape.size() == 1) os << ',';
    os << ')';
    return os.str();
}

uint64_t next_node_id() {
    static std::atomic<uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

template <class T>
BasicTensor<T>::BasicTensor(Shape shape, T fill) : node_(std::make_shared<Node<T>>()) {
    node_->id = next_node_id();
    node_->data.assign(static_cast<size_t>(numel_of(shape)), fill);
    node_->shape = std::move(shape);
}

template <class T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> values) : node_(std::make_shared<Node<T>>()) {
    if (static_cast<int64_t>(values.size()) != numel_of(shape))
        throw Error("shape_mismatch", "tensor data length " + std::to_string(values.size()) +
                                          " does not match shape " + shape_str(shape));
    node_->id = next_node_id();
    node_->data = std::move(values);
    node_->shape = std::move(shape);
}

template <class T>
int64_t BasicTensor<T>::dim(int64_t i) const {
    int64_t n = ndim();
    if (i < 0) i += n;
    if (i < 0 || i >= n) throw Error("shape_invalid", "axis out of range for " + shape_str(shape()));
    return node_->shape[static_cast<size_t>(i)];
}

template <class T>
T BasicTensor<T>::item() const {
    if (numel() != 1) throw Error("shape_mismatch", "item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

template <class T>
BasicTensor<T> BasicTensor<T>::clone() const {
    BasicTensor<T> out(node_->shape, node_->data);
    out.node_->requires_grad = node_->requires_grad;
    return out;
}

template <class T>
bool BasicTensor<T>::all_finite() const {
    for (T v : node_->data)
        if (!std::isfinite(v)) return false;
    return true;
}

template <class T>
void check_finite(const BasicTensor<T>& t, const std::string& what) {
    if (!t.all_finite()) throw Error("non_finite", what + " contains NaN or Inf");
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template void check_finite(const BasicTensor<float>&, const std::string&);
template void check_finite(const BasicTensor<double>&, const std::string&);

}  // namespace qlst
