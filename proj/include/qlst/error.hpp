#pragma once

#include <stdexcept>
#include <string>

namespace qlst {

// Every failure surfaced to callers carries a stable machine-readable code
// (e.g. "shape_mismatch", "nan_gradient") next to the human message.
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& message)
        : std::runtime_error(message), code_(std::move(code)) {}

    const std::string& code() const noexcept { return code_; }

private:
    std::string code_;
};

}  // namespace qlst
