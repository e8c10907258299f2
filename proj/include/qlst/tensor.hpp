#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "qlst/error.hpp"

namespace qlst {

using Shape = std::vector<int64_t>;

int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

template <class T>
struct Node {
    uint64_t id = 0;
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool has_grad = false;
    bool requires_grad = false;

    T* ensure_grad() {
        if (!has_grad) {
            grad.assign(data.size(), T(0));
            has_grad = true;
        }
        return grad.data();
    }
};

uint64_t next_node_id();

// Shared handle: copies alias the same storage, clone() makes a deep copy.
template <class T>
class BasicTensor {
public:
    BasicTensor() = default;
    explicit BasicTensor(Shape shape, T fill = T(0));
    BasicTensor(Shape shape, std::vector<T> values);

    static BasicTensor scalar(T v) { return BasicTensor(Shape{}, std::vector<T>{v}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t ndim() const { return static_cast<int64_t>(node_->shape.size()); }
    int64_t dim(int64_t i) const;
    int64_t numel() const { return static_cast<int64_t>(node_->data.size()); }

    T* data() { return node_->data.data(); }
    const T* data() const { return node_->data.data(); }
    std::vector<T>& values() { return node_->data; }
    const std::vector<T>& values() const { return node_->data; }
    T item() const;

    bool requires_grad() const { return node_ && node_->requires_grad; }
    BasicTensor& set_requires_grad(bool on) {
        node_->requires_grad = on;
        return *this;
    }
    bool has_grad() const { return node_->has_grad; }
    const std::vector<T>& grad() const { return node_->grad; }
    std::vector<T>& grad() { return node_->grad; }
    void zero_grad() {
        node_->grad.clear();
        node_->has_grad = false;
    }

    BasicTensor clone() const;
    bool all_finite() const;

    uint64_t id() const { return node_->id; }
    const std::shared_ptr<Node<T>>& node() const { return node_; }
    explicit BasicTensor(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<Node<T>> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Throws non_finite naming `what` when any entry is NaN or Inf.
template <class T>
void check_finite(const BasicTensor<T>& t, const std::string& what);

}  // namespace qlst
