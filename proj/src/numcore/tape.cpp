#include "qlst/tape.hpp"

namespace qlst {

namespace {
template <class T>
Tape<T>*& tape_slot() {
    thread_local Tape<T>* slot = nullptr;
    return slot;
}
}  // namespace

template <class T>
Tape<T>* active_tape() {
    return tape_slot<T>();
}

template <class T>
TapeScope<T>::TapeScope(Tape<T>& tape) : prev_(tape_slot<T>()) {
    tape_slot<T>() = &tape;
}

template <class T>
TapeScope<T>::~TapeScope() {
    tape_slot<T>() = prev_;
}

template <class T>
void backward(Tape<T>& tape, const BasicTensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw Error("non_scalar_loss",
                    "backward needs a scalar loss, got shape " + (loss.defined() ? shape_str(loss.shape()) : "()"));
    if (tape.empty()) throw Error("empty_tape", "backward called on an empty tape");
    const auto& entries = tape.entries();
    bool found = false;
    for (const auto& e : entries)
        if (e.output_id == loss.id()) found = true;
    if (!found) throw Error("loss_not_recorded", "loss tensor was not produced on this tape");

    loss.node()->ensure_grad()[0] += T(1);
    for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
        if (it->output->has_grad) it->backward();
    }
    tape.clear();
}

template Tape<float>* active_tape<float>();
template Tape<double>* active_tape<double>();
template class TapeScope<float>;
template class TapeScope<double>;
template void backward(Tape<float>&, const BasicTensor<float>&);
template void backward(Tape<double>&, const BasicTensor<double>&);

}  // namespace qlst
