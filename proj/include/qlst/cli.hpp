#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "qlst/json_util.hpp"

namespace qlst::cli {

// Runs one invocation; args exclude the program name. Failures print a single
// JSON line {"error": {"code", "message"}} to `err` and return nonzero.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Git blob id: SHA-1 over "blob <size>\0" followed by the content.
std::string git_blob_sha1(const std::string& content);
std::string sha256_hex(const std::string& content);

// {"path", "blob_sha1"} per file; directories expand to their files in name order.
json hash_paths(const std::vector<std::string>& paths);

}  // namespace qlst::cli
