#include <filesystem>
#include <fstream>
#include <thread>

#include "doctest.h"
#include "httplib.h"
#include "qlst/checkpoint.hpp"
#include "qlst/service.hpp"

using namespace qlst;
namespace fs = std::filesystem;

namespace {

// vae, clf, qlst-av1 (ok), qlst-orphan (missing dependency), old (format 0).
std::string make_models_dir() {
    auto dir = fs::temp_directory_path() / "qlst_test_service_models";
    fs::remove_all(dir);
    fs::create_directories(dir);
    ckpt::save(models::Vae(1), (dir / "vae").string());
    ckpt::save(models::Classifier(models::ClassifierArch::Mlp, 2), (dir / "clf").string());
    models::QlstConfig c;
    c.class_id = ecg::AV1;
    ckpt::save(models::QlstModel(c, 3), (dir / "qlst-av1").string(), {{"vae", "vae"}, {"classifier", "clf"}});
    ckpt::save(models::QlstModel(c, 4), (dir / "qlst-orphan").string(), {{"vae", "nope"}, {"classifier", "clf"}});
    ckpt::save(models::Vae(5), (dir / "old").string());
    auto man_path = dir / "old" / "manifest.json";
    json man = json::parse(std::ifstream(man_path));
    man["format"] = "qlst-ckpt/0";
    std::ofstream(man_path) << man.dump();
    return dir.string();
}

ecg::Signal sinus_signal(uint64_t seed) {
    ecg::MorphParams p;
    return ecg::generate(p, seed);
}

// Runs the HTTP server on an ephemeral loopback port for the test's lifetime.
struct LiveServer {
    explicit LiveServer(const service::Registry& reg) : srv(service::make_server(reg)) {
        port = srv->bind_to_any_port("127.0.0.1");
        thread = std::thread([this] { srv->listen_after_bind(); });
        srv->wait_until_ready();
    }
    ~LiveServer() {
        srv->stop();
        thread.join();
    }
    httplib::Client client() const { return httplib::Client("127.0.0.1", port); }
    std::unique_ptr<httplib::Server> srv;
    int port = 0;
    std::thread thread;
};

json post(httplib::Client& cli, const std::string& path, const json& body, int expect_status = 200) {
    auto res = cli.Post(path, body.dump(), "application/json");
    REQUIRE(res);
    CHECK(res->status == expect_status);
    return json::parse(res->body);
}

}  // namespace

TEST_CASE("registry lists every checkpoint with its status") {
    auto reg = service::Registry::load(make_models_dir());
    auto list = reg.listing()["models"];
    REQUIRE(list.size() == 5);
    std::map<std::string, json> by_id;
    for (const auto& m : list) by_id[m["id"]] = m;
    CHECK(by_id["vae"]["kind"] == "vae");
    CHECK(by_id["vae"]["latent_dim"] == 16);
    CHECK(by_id["clf"]["classes"].size() == 8);
    CHECK(by_id["qlst-av1"]["status"] == "ok");
    CHECK(by_id["qlst-av1"]["class"] == "AV1");
    CHECK(by_id["qlst-av1"]["vae"] == "vae");
    CHECK(by_id["qlst-orphan"]["status"] == "missing_dependency");
    CHECK(by_id["old"]["status"] == "incompatible");
    CHECK(by_id["old"]["kind"] == "vae");

    auto empty = fs::temp_directory_path() / "qlst_test_service_empty";
    fs::create_directories(empty);
    CHECK(service::Registry::load(empty.string()).listing().dump() == R"({"models":[]})");
    CHECK_THROWS_AS(service::Registry::load("/nonexistent/models"), Error);
}

TEST_CASE("HTTP responses equal in-process results bit for bit") {
    auto reg = service::Registry::load(make_models_dir());
    LiveServer live(reg);
    auto cli = live.client();
    const auto& vae = reg.vae("vae");
    const auto& clf = reg.classifier("clf");

    auto res = cli.Get("/models");
    REQUIRE(res);
    CHECK(res->status == 200);
    CHECK(res->get_header_value("Access-Control-Allow-Origin") == "*");
    CHECK(res->body == reg.listing().dump());

    std::vector<float> z(16);
    for (size_t i = 0; i < z.size(); ++i) z[i] = 0.3f * float(i) - 2.1f;
    auto dec = post(cli, "/decode", {{"vae_id", "vae"}, {"z", float_array(z)}});
    CHECK(read_float_array(dec["signal"], "signal") == models::decode(vae, z));

    auto x = sinus_signal(11);
    auto enc = post(cli, "/encode", {{"vae_id", "vae"}, {"signal", float_array(x)}});
    CHECK(read_float_array(enc["z"], "z") == models::encode(vae, x));

    auto cls = post(cli, "/classify", {{"clf_id", "clf"}, {"signal", float_array(x)}});
    auto probs = models::classify(clf, x);
    for (int c = 0; c < ecg::kNumLabels; ++c)
        CHECK(float(cls["probs"][ecg::label_names()[c]].get<double>()) == probs[c]);

    auto p = reg.pipeline("qlst-av1");
    const std::vector<float> grid{0.0f, 0.5f, 1.0f};
    auto tr_zero = cli.Post("/traverse", json{{"qlst_id", "qlst-av1"}, {"origin", {{"zero", true}}}, {"queries", grid}}.dump(),
                            "application/json");
    REQUIRE(tr_zero);
    CHECK(tr_zero->body == explain::bundle_to_json(explain::explain_global(p, grid)).dump());

    auto tr_sig = cli.Post("/traverse",
                           json{{"qlst_id", "qlst-av1"}, {"origin", {{"signal", float_array(x)}, {"id", "s11"}}}}.dump(),
                           "application/json");
    REQUIRE(tr_sig);
    auto local = explain::explain_local(p, x, ecg::AV1, explain::Direction::Both, explain::default_grid(), "s11");
    CHECK(tr_sig->body == explain::bundle_to_json(local).dump());

    auto tr_z = post(cli, "/traverse", {{"qlst_id", "qlst-av1"}, {"origin", {{"z", float_array(z)}}}, {"queries", {0.25}}});
    auto direct = explain::traverse(p, z, {0.25f}, {explain::Origin::Kind::Latent, ""});
    CHECK(tr_z.dump() == explain::bundle_to_json(direct).dump());
}

TEST_CASE("bad requests get field-level errors") {
    auto reg = service::Registry::load(make_models_dir());
    LiveServer live(reg);
    auto cli = live.client();

    auto e = post(cli, "/decode", {{"vae_id", "vae"}, {"z", std::vector<float>(3, 0.0f)}}, 400);
    CHECK(e["error"]["code"] == "shape_mismatch");
    CHECK(e["error"]["field"] == "z");

    e = post(cli, "/decode", {{"vae_id", "missing"}, {"z", std::vector<float>(16, 0.0f)}}, 404);
    CHECK(e["error"]["code"] == "not_found");
    e = post(cli, "/decode", {{"vae_id", "clf"}, {"z", std::vector<float>(16, 0.0f)}}, 404);
    e = post(cli, "/decode", {{"vae_id", "old"}, {"z", std::vector<float>(16, 0.0f)}}, 409);
    CHECK(e["error"]["code"] == "model_unavailable");
    e = post(cli, "/traverse", {{"qlst_id", "qlst-orphan"}, {"origin", {{"zero", true}}}}, 409);

    e = post(cli, "/classify", {{"clf_id", "clf"}, {"signal", "abc"}}, 400);
    CHECK(e["error"]["field"] == "signal");
    e = post(cli, "/classify", {{"signal", std::vector<float>(4800, 0.0f)}}, 400);
    CHECK(e["error"]["field"] == "clf_id");

    e = post(cli, "/traverse", {{"qlst_id", "qlst-av1"}, {"origin", {{"zero", true}}}, {"queries", {0.2, 1.5}}}, 400);
    CHECK(e["error"]["code"] == "invalid_grid");
    CHECK(e["error"]["field"] == "queries");
    e = post(cli, "/traverse", {{"qlst_id", "qlst-av1"}, {"origin", {{"weird", 1}}}}, 400);
    CHECK(e["error"]["field"] == "origin");

    auto res = cli.Post("/decode", "{not json", "application/json");
    REQUIRE(res);
    CHECK(res->status == 400);
    CHECK(json::parse(res->body)["error"]["code"] == "invalid_json");

    res = cli.Get("/nowhere");
    REQUIRE(res);
    CHECK(res->status == 404);
    CHECK(json::parse(res->body)["error"]["code"] == "not_found");

    res = cli.Options("/decode");
    REQUIRE(res);
    CHECK(res->status == 204);
    CHECK(res->get_header_value("Access-Control-Allow-Methods").find("POST") != std::string::npos);
}

TEST_CASE("concurrent requests give identical answers") {
    auto reg = service::Registry::load(make_models_dir());
    LiveServer live(reg);
    const std::string body = json{{"vae_id", "vae"}, {"z", std::vector<float>(16, 0.5f)}}.dump();
    std::vector<std::string> out(4);
    std::vector<std::thread> ts;
    for (size_t i = 0; i < out.size(); ++i)
        ts.emplace_back([&, i] {
            auto cli = live.client();
            auto res = cli.Post("/decode", body, "application/json");
            if (res) out[i] = res->body;
        });
    for (auto& t : ts) t.join();
    CHECK(!out[0].empty());
    for (const auto& o : out) CHECK(o == out[0]);
}
