#pragma once

#include <map>
#include <memory>
#include <string>

#include "qlst/explain.hpp"

namespace httplib {
class Server;
}

namespace qlst::service {

// One subdirectory of the models directory holding a checkpoint.
struct Entry {
    std::string id;    // directory name
    std::string kind;  // vae | classifier | qlst, "unknown" when unreadable
    // ok | incompatible (format version) | missing_dependency | invalid
    std::string status = "ok";
    std::string message;
    json manifest;
    std::shared_ptr<const models::Vae> vae;
    std::shared_ptr<const models::Classifier> clf;
    std::shared_ptr<const models::QlstModel> qlst;
    std::string vae_ref, clf_ref;  // qlst dependencies by id
};

// Loaded once and immutable afterwards, so requests can share it freely.
class Registry {
public:
    static Registry load(const std::string& models_dir);

    json listing() const;
    const std::map<std::string, Entry>& entries() const { return entries_; }

    // Throw not_found (unknown id or wrong kind) or model_unavailable.
    const models::Vae& vae(const std::string& id) const;
    const models::Classifier& classifier(const std::string& id) const;
    explain::Pipeline pipeline(const std::string& qlst_id) const;

private:
    const Entry& usable(const std::string& id, const std::string& kind) const;
    std::map<std::string, Entry> entries_;
};

struct Response {
    int status = 200;
    std::string body;  // JSON text
};

// Transport-free request handling; the HTTP server below is a thin wrapper.
// Error bodies are {"error": {"code", "message", "field"?}}.
Response handle(const Registry& reg, const std::string& method, const std::string& path, const std::string& body);

struct ServerOptions {
    std::string cors_origin = "*";
};

std::unique_ptr<httplib::Server> make_server(const Registry& reg, const ServerOptions& opt = {});

// Blocks until the server stops. Throws bind_failed.
void serve(const Registry& reg, const std::string& bind, int port, const ServerOptions& opt = {});

}  // namespace qlst::service
