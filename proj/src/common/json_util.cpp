#include "qlst/json_util.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "qlst/error.hpp"

namespace qlst {

double compact_float(float f) {
    if (!std::isfinite(f)) return double(f);
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), f);
    double d = 0;
    std::from_chars(buf, res.ptr, d);
    return d;
}

json float_array(const float* p, size_t n) {
    json a = json::array();
    auto& arr = a.get_ref<json::array_t&>();
    arr.reserve(n);
    for (size_t i = 0; i < n; ++i) arr.emplace_back(compact_float(p[i]));
    return a;
}

std::vector<float> read_float_array(const json& j, const std::string& field) {
    if (!j.is_array()) throw Error("invalid_json", "field '" + field + "' must be an array of numbers");
    std::vector<float> out;
    out.reserve(j.size());
    for (const auto& v : j) {
        if (!v.is_number()) throw Error("invalid_json", "field '" + field + "' must contain only numbers");
        out.push_back(float(v.get<double>()));
    }
    return out;
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("io_error", "cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json read_json_file(const std::string& path) {
    std::string text = read_text_file(path);
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw Error("invalid_json", path + ": " + e.what());
    }
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("io_error", "cannot write " + path);
    out << text;
    if (!out) throw Error("io_error", "write failed for " + path);
}

}  // namespace qlst
