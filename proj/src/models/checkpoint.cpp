#include "qlst/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

namespace qlst::ckpt {

namespace fs = std::filesystem;
static_assert(std::endian::native == std::endian::little, "weights.bin is written in host byte order");

namespace {

std::string manifest_path(const std::string& dir) { return (fs::path(dir) / "manifest.json").string(); }
std::string blob_path(const std::string& dir) { return (fs::path(dir) / "weights.bin").string(); }

}  // namespace

void save(const models::Model& m, const std::string& dir, const json& meta) {
    fs::create_directories(dir);
    json tensors = json::array();
    int64_t offset = 0;
    std::string blob;
    for (const auto& [name, t] : m.params()) {
        tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"count", t.numel()}});
        blob.append(reinterpret_cast<const char*>(t.data()), size_t(t.numel()) * sizeof(float));
        offset += t.numel() * int64_t(sizeof(float));
    }
    json man = {{"format", kFormat}, {"kind", m.kind()}, {"arch", m.arch()}, {"meta", meta}, {"tensors", tensors}};
    write_text_file(blob_path(dir), blob);
    write_text_file(manifest_path(dir), man.dump(2) + "\n");
}

json read_manifest(const std::string& dir) {
    if (!fs::exists(manifest_path(dir)))
        throw Error("missing_checkpoint", "no manifest.json in '" + dir + "'");
    json man;
    try {
        man = json::parse(read_text_file(manifest_path(dir)));
    } catch (const json::exception& e) {
        throw Error("invalid_checkpoint", "manifest.json in '" + dir + "' is not valid JSON: " + e.what());
    }
    if (!man.is_object() || !man.contains("format"))
        throw Error("invalid_checkpoint", "manifest.json in '" + dir + "' has no format field");
    if (man["format"] != kFormat)
        throw Error("version_mismatch", "checkpoint '" + dir + "' has format " + man["format"].dump() +
                                            ", expected \"" + kFormat + "\"");
    for (const char* k : {"kind", "arch", "tensors"})
        if (!man.contains(k)) throw Error("invalid_checkpoint", std::string("manifest.json has no '") + k + "' field");
    return man;
}

void load_into(const models::Model& m, const std::string& dir) {
    json man = read_manifest(dir);
    if (man["kind"] != m.kind())
        throw Error("kind_mismatch", "checkpoint '" + dir + "' holds a " + man["kind"].dump() +
                                         ", expected a " + m.kind());
    std::string blob = read_text_file(blob_path(dir));

    int64_t expected = 0;
    for (const auto& t : man["tensors"]) expected += t.at("count").get<int64_t>() * int64_t(sizeof(float));
    if (int64_t(blob.size()) != expected)
        throw Error("truncated_blob", "weights.bin in '" + dir + "' has " + std::to_string(blob.size()) +
                                          " bytes, manifest indexes " + std::to_string(expected));

    std::map<std::string, json> index;
    for (const auto& t : man["tensors"]) index[t.at("name").get<std::string>()] = t;

    for (auto [name, t] : m.params()) {
        auto it = index.find(name);
        if (it == index.end()) throw Error("missing_tensor", "checkpoint '" + dir + "' has no tensor " + name);
        const json& e = it->second;
        Shape shape = e.at("shape").get<Shape>();
        if (shape != t.shape())
            throw Error("shape_mismatch", "tensor " + name + " is stored as " + shape_str(shape) +
                                              " but the model expects " + shape_str(t.shape()));
        const int64_t off = e.at("offset").get<int64_t>(), count = e.at("count").get<int64_t>();
        if (count != t.numel() || off < 0 || off + count * int64_t(sizeof(float)) > int64_t(blob.size()))
            throw Error("invalid_checkpoint", "tensor " + name + " has an inconsistent index entry");
        std::memcpy(t.data(), blob.data() + off, size_t(count) * sizeof(float));
    }
    if (index.size() != m.params().size())
        throw Error("invalid_checkpoint", "checkpoint '" + dir + "' stores tensors the model does not have");
}

namespace {

template <class M>
M load_as(const std::string& dir, const char* kind) {
    json man = read_manifest(dir);
    if (man["kind"] != kind)
        throw Error("kind_mismatch", "checkpoint '" + dir + "' holds a " + man["kind"].dump() + ", expected a " + kind);
    try {
        M m = M::from_arch(man["arch"]);
        load_into(m, dir);
        return m;
    } catch (const json::exception& e) {
        throw Error("invalid_checkpoint", "checkpoint '" + dir + "' has a malformed manifest: " + e.what());
    }
}

}  // namespace

models::Vae load_vae(const std::string& dir) { return load_as<models::Vae>(dir, "vae"); }
models::Classifier load_classifier(const std::string& dir) { return load_as<models::Classifier>(dir, "classifier"); }
models::QlstModel load_qlst(const std::string& dir) { return load_as<models::QlstModel>(dir, "qlst"); }

}  // namespace qlst::ckpt
