#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "qlst/tensor.hpp"

namespace qlst {

template <class T>
class Tape {
public:
    struct Entry {
        std::string op;
        std::vector<uint64_t> input_ids;
        uint64_t output_id = 0;
        std::shared_ptr<Node<T>> output;
        // Reads output->grad and accumulates into the inputs that require grad.
        std::function<void()> backward;
    };

    void record(Entry e) { entries_.push_back(std::move(e)); }
    const std::vector<Entry>& entries() const { return entries_; }
    size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    void clear() { entries_.clear(); }

private:
    std::vector<Entry> entries_;
};

// Ops record onto the calling thread's active tape, if any. Without an active
// tape nothing is recorded, which is how inference stays allocation-light and
// safe to run from several threads at once.
template <class T>
Tape<T>* active_tape();

template <class T>
class TapeScope {
public:
    explicit TapeScope(Tape<T>& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<T>* prev_;
};

// Seeds d(loss)/d(loss) = 1 and runs every recorded rule once, newest first.
// Leaf gradients accumulate; the tape is cleared afterwards.
template <class T>
void backward(Tape<T>& tape, const BasicTensor<T>& loss);

}  // namespace qlst
