#include "qlst/service.hpp"

#include <filesystem>
#include <fstream>

#include "httplib.h"
#include "qlst/checkpoint.hpp"

namespace qlst::service {

namespace fs = std::filesystem;
using namespace ecg;

namespace {

// A request-level failure with its HTTP status and the offending field.
struct HttpError : Error {
    HttpError(int status, std::string code, const std::string& message, std::string field = "")
        : Error(std::move(code), message), status(status), field(std::move(field)) {}
    int status;
    std::string field;
};

std::string error_body(const std::string& code, const std::string& message, const std::string& field) {
    json e = {{"code", code}, {"message", message}};
    if (!field.empty()) e["field"] = field;
    return json{{"error", e}}.dump();
}

}  // namespace

Registry Registry::load(const std::string& models_dir) {
    if (!fs::is_directory(models_dir))
        throw Error("missing_models_dir", "models directory '" + models_dir + "' does not exist");
    Registry reg;
    std::vector<fs::path> dirs;
    for (const auto& de : fs::directory_iterator(models_dir))
        if (de.is_directory() && fs::exists(de.path() / "manifest.json")) dirs.push_back(de.path());
    std::sort(dirs.begin(), dirs.end());

    for (const auto& d : dirs) {
        Entry e;
        e.id = d.filename().string();
        e.kind = "unknown";
        const std::string path = d.string();
        try {
            e.manifest = ckpt::read_manifest(path);
            e.kind = e.manifest["kind"].get<std::string>();
            if (e.kind == "vae") {
                auto m = std::make_shared<models::Vae>(ckpt::load_vae(path));
                m->freeze();
                e.vae = m;
            } else if (e.kind == "classifier") {
                auto m = std::make_shared<models::Classifier>(ckpt::load_classifier(path));
                m->freeze();
                e.clf = m;
            } else if (e.kind == "qlst") {
                auto m = std::make_shared<models::QlstModel>(ckpt::load_qlst(path));
                m->freeze();
                e.qlst = m;
                const json& meta = e.manifest["meta"];
                if (meta.is_object()) {
                    e.vae_ref = meta.value("vae", "");
                    e.clf_ref = meta.value("classifier", "");
                }
            } else {
                throw Error("invalid_checkpoint", "unknown model kind '" + e.kind + "'");
            }
        } catch (const Error& err) {
            e.status = err.code() == "version_mismatch" ? "incompatible" : "invalid";
            e.message = err.what();
            std::ifstream in(d / "manifest.json");
            json raw = json::parse(in, nullptr, false);
            if (e.kind == "unknown" && raw.is_object() && raw.contains("kind") && raw["kind"].is_string())
                e.kind = raw["kind"].get<std::string>();
        }
        reg.entries_[e.id] = std::move(e);
    }

    // qLST entries must point at a usable VAE and classifier of matching size.
    for (auto& [id, e] : reg.entries_) {
        if (e.kind != "qlst" || e.status != "ok") continue;
        auto dep_ok = [&](const std::string& ref, const std::string& kind) {
            auto it = reg.entries_.find(ref);
            return !ref.empty() && it != reg.entries_.end() && it->second.kind == kind && it->second.status == "ok";
        };
        if (!dep_ok(e.vae_ref, "vae") || !dep_ok(e.clf_ref, "classifier")) {
            e.status = "missing_dependency";
            e.message = "qlst model '" + id + "' needs vae '" + e.vae_ref + "' and classifier '" + e.clf_ref + "'";
        } else if (reg.entries_.at(e.vae_ref).vae->latent_dim() != e.qlst->config().latent_dim) {
            e.status = "incompatible";
            e.message = "qlst model '" + id + "' and vae '" + e.vae_ref + "' disagree on latent_dim";
        }
    }
    return reg;
}

json Registry::listing() const {
    json models = json::array();
    for (const auto& [id, e] : entries_) {
        json m = {{"id", id}, {"kind", e.kind}, {"status", e.status}};
        if (!e.message.empty()) m["message"] = e.message;
        if (e.vae) m["latent_dim"] = e.vae->latent_dim();
        if (e.clf) {
            m["arch"] = models::arch_name(e.clf->architecture());
            m["classes"] = label_names();
        }
        if (e.qlst) {
            const int c = e.qlst->config().class_id;
            m["class"] = label_names()[c];
            m["class_id"] = c;
            m["latent_dim"] = e.qlst->config().latent_dim;
            m["vae"] = e.vae_ref;
            m["classifier"] = e.clf_ref;
        }
        models.push_back(m);
    }
    return {{"models", models}};
}

const Entry& Registry::usable(const std::string& id, const std::string& kind) const {
    auto it = entries_.find(id);
    if (it == entries_.end() || it->second.kind != kind)
        throw HttpError(404, "not_found", "no " + kind + " model with id '" + id + "'");
    if (it->second.status != "ok")
        throw HttpError(409, "model_unavailable", "model '" + id + "' is " + it->second.status + ": " +
                                                      it->second.message);
    return it->second;
}

const models::Vae& Registry::vae(const std::string& id) const { return *usable(id, "vae").vae; }

const models::Classifier& Registry::classifier(const std::string& id) const {
    return *usable(id, "classifier").clf;
}

explain::Pipeline Registry::pipeline(const std::string& qlst_id) const {
    const Entry& e = usable(qlst_id, "qlst");
    return {vae(e.vae_ref), classifier(e.clf_ref), *e.qlst};
}

namespace {

json parse_body(const std::string& body) {
    json j = json::parse(body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw HttpError(400, "invalid_json", "request body must be a JSON object");
    return j;
}

std::string string_field(const json& j, const std::string& field) {
    if (!j.contains(field) || !j[field].is_string())
        throw HttpError(400, "invalid_request", "field '" + field + "' must be a string", field);
    return j[field].get<std::string>();
}

std::vector<float> float_field(const json& j, const std::string& field, size_t expected, const std::string& what) {
    if (!j.contains(field)) throw HttpError(400, "invalid_request", "missing field '" + field + "'", field);
    std::vector<float> v;
    try {
        v = read_float_array(j[field], field);
    } catch (const Error& e) {
        throw HttpError(400, e.code(), e.what(), field);
    }
    if (expected > 0 && v.size() != expected)
        throw HttpError(400, "shape_mismatch",
                        "field '" + field + "' has " + std::to_string(v.size()) + " entries, expected " +
                            std::to_string(expected) + " (" + what + ")",
                        field);
    for (float x : v)
        if (!std::isfinite(x)) throw HttpError(400, "non_finite", "field '" + field + "' must be finite", field);
    return v;
}

Response decode_route(const Registry& reg, const json& req) {
    const auto& vae = reg.vae(string_field(req, "vae_id"));
    auto z = float_field(req, "z", size_t(vae.latent_dim()), "latent_dim");
    return {200, json{{"signal", float_array(models::decode(vae, z))}}.dump()};
}

Response encode_route(const Registry& reg, const json& req) {
    const auto& vae = reg.vae(string_field(req, "vae_id"));
    auto x = float_field(req, "signal", kSignalSize, "8 leads x 600 samples");
    return {200, json{{"z", float_array(models::encode(vae, x))}}.dump()};
}

Response classify_route(const Registry& reg, const json& req) {
    const auto& clf = reg.classifier(string_field(req, "clf_id"));
    auto x = float_field(req, "signal", kSignalSize, "8 leads x 600 samples");
    auto p = models::classify(clf, x);
    json probs = json::object();
    for (int c = 0; c < kNumLabels; ++c) probs[label_names()[c]] = compact_float(p[c]);
    return {200, json{{"probs", probs}}.dump()};
}

Response traverse_route(const Registry& reg, const json& req) {
    auto p = reg.pipeline(string_field(req, "qlst_id"));
    auto grid = req.contains("queries") ? float_field(req, "queries", 0, "") : explain::default_grid();
    try {
        explain::validate_grid(grid);
    } catch (const Error& e) {
        throw HttpError(400, e.code(), e.what(), "queries");
    }
    if (!req.contains("origin") || !req["origin"].is_object())
        throw HttpError(400, "invalid_request", "field 'origin' must be an object", "origin");
    const json& o = req["origin"];
    explain::Bundle b;
    if (o.contains("signal")) {
        auto x = float_field(o, "signal", kSignalSize, "8 leads x 600 samples");
        const std::string id = o.contains("id") && o["id"].is_string() ? o["id"].get<std::string>() : "";
        b = explain::explain_local(p, x, p.qlst.config().class_id, explain::Direction::Both, grid, id);
    } else if (o.contains("z")) {
        auto z = float_field(o, "z", size_t(p.vae.latent_dim()), "latent_dim");
        b = explain::traverse(p, z, grid, {explain::Origin::Kind::Latent, ""});
    } else if (o.value("zero", false)) {
        b = explain::explain_global(p, grid);
    } else {
        throw HttpError(400, "invalid_request", "origin must be {\"zero\": true}, {\"signal\": [...]} or {\"z\": [...]}",
                        "origin");
    }
    return {200, explain::bundle_to_json(b).dump()};
}

}  // namespace

Response handle(const Registry& reg, const std::string& method, const std::string& path, const std::string& body) {
    try {
        if (method == "GET" && path == "/models") return {200, reg.listing().dump()};
        if (method == "POST") {
            if (path == "/decode") return decode_route(reg, parse_body(body));
            if (path == "/encode") return encode_route(reg, parse_body(body));
            if (path == "/classify") return classify_route(reg, parse_body(body));
            if (path == "/traverse") return traverse_route(reg, parse_body(body));
        }
        return {404, error_body("not_found", method + " " + path + " is not an endpoint", "")};
    } catch (const HttpError& e) {
        return {e.status, error_body(e.code(), e.what(), e.field)};
    } catch (const Error& e) {
        return {400, error_body(e.code(), e.what(), "")};
    } catch (const std::exception& e) {
        return {500, error_body("internal", e.what(), "")};
    }
}

std::unique_ptr<httplib::Server> make_server(const Registry& reg, const ServerOptions& opt) {
    auto srv = std::make_unique<httplib::Server>();
    const std::string origin = opt.cors_origin;
    srv->set_default_headers({{"Access-Control-Allow-Origin", origin},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                              {"Access-Control-Allow-Headers", "Content-Type"}});
    auto reply = [&reg](const httplib::Request& req, httplib::Response& res) {
        Response r = handle(reg, req.method, req.path, req.body);
        res.status = r.status;
        res.set_content(r.body, "application/json");
    };
    srv->Get("/models", reply);
    for (const char* p : {"/decode", "/encode", "/classify", "/traverse"}) srv->Post(p, reply);
    srv->Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    srv->set_error_handler([](const httplib::Request& req, httplib::Response& res) {
        if (res.body.empty())
            res.set_content(error_body(res.status == 404 ? "not_found" : "http_error",
                                       req.method + " " + req.path + " failed with status " + std::to_string(res.status),
                                       ""),
                            "application/json");
    });
    return srv;
}

void serve(const Registry& reg, const std::string& bind, int port, const ServerOptions& opt) {
    auto srv = make_server(reg, opt);
    if (!srv->bind_to_port(bind, port))
        throw Error("bind_failed", "cannot listen on " + bind + ":" + std::to_string(port));
    srv->listen_after_bind();
}

}  // namespace qlst::service
