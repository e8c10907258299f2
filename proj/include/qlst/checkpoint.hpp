#pragma once

#include <string>

#include "qlst/models.hpp"

// Checkpoint directory layout:
//   manifest.json  {"format": "qlst-ckpt/1", "kind", "arch", "meta",
//                   "tensors": [{"name", "shape", "offset", "count"}]}
//   weights.bin    little-endian float32 tensors concatenated in index order
namespace qlst::ckpt {

inline constexpr const char* kFormat = "qlst-ckpt/1";

// `meta` carries free-form provenance (class id, dependency ids, seed).
void save(const models::Model& m, const std::string& dir, const json& meta = json::object());

// Reads and validates manifest.json only. Errors: missing_checkpoint,
// invalid_checkpoint, version_mismatch.
json read_manifest(const std::string& dir);

// Copies stored tensors into `m` after checking names, shapes and blob size.
// Errors: truncated_blob, shape_mismatch, missing_tensor, kind_mismatch.
void load_into(const models::Model& m, const std::string& dir);

models::Vae load_vae(const std::string& dir);
models::Classifier load_classifier(const std::string& dir);
models::QlstModel load_qlst(const std::string& dir);

}  // namespace qlst::ckpt
