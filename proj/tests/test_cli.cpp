#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "qlst/checkpoint.hpp"
#include "qlst/cli.hpp"
#include "qlst/explain.hpp"
#include "qlst/service.hpp"

using namespace qlst;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result qlst_cli(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path scratch(const std::string& name) {
    auto d = fs::temp_directory_path() / ("qlst_test_cli_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

// Untrained vae/clf/qlst checkpoints laid out like a models directory.
fs::path make_models(const fs::path& root) {
    auto dir = root / "models";
    ckpt::save(models::Vae(1), (dir / "vae").string());
    ckpt::save(models::Classifier(models::ClassifierArch::Mlp, 2), (dir / "clf").string());
    models::QlstConfig c;
    c.class_id = ecg::AV1;
    ckpt::save(models::QlstModel(c, 3), (dir / "qlst-AV1").string(), {{"vae", "vae"}, {"classifier", "clf"}});
    return dir;
}

json error_line(const std::string& err) {
    auto j = json::parse(err);
    REQUIRE(j.contains("error"));
    return j["error"];
}

}  // namespace

TEST_CASE("content hashes match git and SHA-256 reference values") {
    CHECK(cli::git_blob_sha1("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
    CHECK(cli::git_blob_sha1("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
    CHECK(cli::sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("gen-data twice gives identical files and run manifests") {
    auto d = scratch("gen");
    for (const char* name : {"a", "b"}) {
        auto r = qlst_cli({"gen-data", "--n", "1000", "--seed", "7", "--out", (d / name / "d.jsonl").string()});
        REQUIRE(r.code == 0);
    }
    auto a = slurp(d / "a" / "d.jsonl"), b = slurp(d / "b" / "d.jsonl");
    CHECK(a.size() > 0);
    CHECK(cli::git_blob_sha1(a) == cli::git_blob_sha1(b));
    auto ma = json::parse(slurp(d / "a" / "d.jsonl.run.json"));
    auto mb = json::parse(slurp(d / "b" / "d.jsonl.run.json"));
    CHECK(ma["seed"] == 7);
    CHECK(ma["outputs"][0]["blob_sha1"] == mb["outputs"][0]["blob_sha1"]);
    CHECK(ma["config_sha256"] == mb["config_sha256"]);

    auto other = qlst_cli({"gen-data", "--n", "1000", "--seed", "8", "--out", (d / "c.jsonl").string()});
    REQUIRE(other.code == 0);
    CHECK(slurp(d / "c.jsonl") != a);
}

TEST_CASE("usage errors are single JSON lines with nonzero exit") {
    auto r = qlst_cli({"gen-data", "--n", "10", "--out", "x.jsonl", "--bogus"});
    CHECK(r.code != 0);
    CHECK(error_line(r.err)["code"] == "usage");
    CHECK(r.err.find('\n') == r.err.size() - 1);

    r = qlst_cli({});
    CHECK(r.code != 0);
    r = qlst_cli({"gen-data", "train-clf"});
    CHECK(r.code != 0);
    CHECK(qlst_cli({"--help"}).code == 0);
}

TEST_CASE("train-qlst without stage 1 and 2 checkpoints names the stage order") {
    auto d = scratch("order");
    REQUIRE(qlst_cli({"gen-data", "--n", "50", "--out", (d / "d.jsonl").string()}).code == 0);
    auto r = qlst_cli({"train-qlst", "--data", (d / "d.jsonl").string(), "--out", (d / "q").string(), "--class", "AV1"});
    CHECK(r.code != 0);
    auto e = error_line(r.err);
    CHECK(e["code"] == "missing_dependency");
    CHECK(e["message"].get<std::string>().find("stage 1") != std::string::npos);
    CHECK(e["message"].get<std::string>().find("--clf") != std::string::npos);
    CHECK_FALSE(fs::exists(d / "q"));
}

TEST_CASE("training runs are byte-reproducible and flags override the config file") {
    auto d = scratch("train");
    REQUIRE(qlst_cli({"gen-data", "--n", "120", "--seed", "3", "--out", (d / "d.jsonl").string()}).code == 0);
    std::ofstream(d / "cfg.json") << R"({"epochs": 3, "arch": "mlp", "lr": 0.002})";
    for (const char* name : {"a", "b"}) {
        auto r = qlst_cli({"train-clf", "--config", (d / "cfg.json").string(), "--seed", "5", "--epochs", "1",
                           "--data", (d / "d.jsonl").string(), "--out", (d / name).string()});
        REQUIRE_MESSAGE(r.code == 0, r.err);
    }
    for (const char* f : {"weights.bin", "manifest.json", "metrics.csv"})
        CHECK_MESSAGE(slurp(d / "a" / f) == slurp(d / "b" / f), f);
    auto run = json::parse(slurp(d / "a" / "run.json"));
    CHECK(run["config"]["epochs"] == 1);
    CHECK(run["config"]["lr"] == 0.002);
    CHECK(run["config"]["arch"] == "mlp");
    CHECK(run["config"]["seed"] == 5);
    CHECK(run["outputs"].size() == 3);
    // Identical apart from the output paths.
    auto rb = json::parse(slurp(d / "b" / "run.json"));
    for (size_t i = 0; i < run["outputs"].size(); ++i)
        CHECK(run["outputs"][i]["blob_sha1"] == rb["outputs"][i]["blob_sha1"]);
    CHECK(run["inputs"] == rb["inputs"]);

    auto bad = qlst_cli({"train-clf", "--config", (d / "cfg.json").string(), "--lr", "-1", "--data",
                         (d / "d.jsonl").string(), "--out", (d / "c").string()});
    CHECK(bad.code != 0);
    std::ofstream(d / "typo.json") << R"({"epoch": 3})";
    bad = qlst_cli({"train-clf", "--config", (d / "typo.json").string(), "--data", (d / "d.jsonl").string(), "--out",
                    (d / "c").string()});
    CHECK(bad.code != 0);
    CHECK(error_line(bad.err)["code"] == "invalid_config");
}

TEST_CASE("explain --global writes a bundle over the default grid") {
    auto d = scratch("explain");
    auto models_dir = make_models(d);
    auto out = (d / "av1.json").string();
    auto r = qlst_cli({"explain", "--global", "--class", "AV1", "--queries", "0,0.2,0.4,0.6,0.8,1", "--qlst",
                       (models_dir / "qlst-AV1").string(), "--out", out});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    auto b = explain::bundle_from_json(json::parse(slurp(out)));
    CHECK(b.grid == explain::default_grid());
    CHECK(b.records.size() == 6);
    CHECK(fs::exists(out + ".run.json"));

    r = qlst_cli({"explain", "--global", "--class", "AF", "--qlst", (models_dir / "qlst-AV1").string(), "--out",
                  (d / "af.json").string()});
    CHECK(r.code != 0);
    CHECK(error_line(r.err)["code"] == "missing_model");
    r = qlst_cli({"explain", "--qlst", (models_dir / "qlst-AV1").string(), "--out", (d / "x.json").string()});
    CHECK(r.code != 0);
    r = qlst_cli({"explain", "--global", "--queries", "0,2", "--qlst", (models_dir / "qlst-AV1").string(), "--out",
                  (d / "x.json").string()});
    CHECK(error_line(r.err)["code"] == "invalid_grid");
}

TEST_CASE("CLI outputs equal service responses byte for byte") {
    auto d = scratch("parity");
    auto models_dir = make_models(d);
    auto reg = service::Registry::load(models_dir.string());

    std::vector<float> z(16);
    for (size_t i = 0; i < z.size(); ++i) z[i] = 0.25f * float(i) - 1.9f;
    std::ofstream(d / "z.json") << json{{"z", float_array(z)}}.dump();
    REQUIRE(qlst_cli({"decode", "--vae", (models_dir / "vae").string(), "--input", (d / "z.json").string(), "--out",
                      (d / "dec.json").string()})
                .code == 0);
    auto svc = service::handle(reg, "POST", "/decode", json{{"vae_id", "vae"}, {"z", float_array(z)}}.dump());
    CHECK(svc.status == 200);
    CHECK(slurp(d / "dec.json") == svc.body + "\n");

    ecg::MorphParams mp;
    auto x = ecg::generate(mp, 5);
    std::ofstream(d / "x.json") << json{{"signal", float_array(x)}}.dump();
    REQUIRE(qlst_cli({"classify", "--clf", (models_dir / "clf").string(), "--input", (d / "x.json").string(), "--out",
                      (d / "cls.json").string()})
                .code == 0);
    svc = service::handle(reg, "POST", "/classify", json{{"clf_id", "clf"}, {"signal", float_array(x)}}.dump());
    CHECK(slurp(d / "cls.json") == svc.body + "\n");

    REQUIRE(qlst_cli({"encode", "--vae", (models_dir / "vae").string(), "--input", (d / "x.json").string(), "--out",
                      (d / "enc.json").string()})
                .code == 0);
    svc = service::handle(reg, "POST", "/encode", json{{"vae_id", "vae"}, {"signal", float_array(x)}}.dump());
    CHECK(slurp(d / "enc.json") == svc.body + "\n");

    REQUIRE(qlst_cli({"explain", "--signal", (d / "x.json").string(), "--qlst", (models_dir / "qlst-AV1").string(),
                      "--out", (d / "local.json").string()})
                .code == 0);
    svc = service::handle(reg, "POST", "/traverse",
                          json{{"qlst_id", "qlst-AV1"}, {"origin", {{"signal", float_array(x)}}}}.dump());
    CHECK(slurp(d / "local.json") == svc.body + "\n");

    REQUIRE(qlst_cli({"explain", "--global", "--qlst", (models_dir / "qlst-AV1").string(), "--out",
                      (d / "global.json").string()})
                .code == 0);
    svc = service::handle(reg, "POST", "/traverse",
                          json{{"qlst_id", "qlst-AV1"}, {"origin", {{"zero", true}}}}.dump());
    CHECK(slurp(d / "global.json") == svc.body + "\n");
}
