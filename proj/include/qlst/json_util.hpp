#pragma once

#include <string>
#include <vector>

#include "json.hpp"

namespace qlst {

using json = nlohmann::json;

// The double nearest to the shortest decimal that round-trips `f`. Stored in
// JSON it prints as that short decimal, and parsing it back and narrowing to
// float recovers `f` bit-exactly.
double compact_float(float f);

json float_array(const float* p, size_t n);
inline json float_array(const std::vector<float>& v) { return float_array(v.data(), v.size()); }

// Throws invalid_json naming `field` when j is not an array of numbers.
std::vector<float> read_float_array(const json& j, const std::string& field);

// NaN becomes null so the document stays valid JSON.
json number_or_null(double v);

json read_json_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

}  // namespace qlst
