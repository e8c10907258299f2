#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "qlst/checkpoint.hpp"
#include "qlst/models.hpp"

using namespace qlst;
using namespace qlst::models;
namespace fs = std::filesystem;

namespace {

Tensor random_batch(int64_t b, uint64_t seed) {
    Rng rng(seed);
    Tensor x({b, ecg::kLeads, ecg::kSamples});
    for (auto& v : x.values()) v = float(0.3 * rng.normal());
    return x;
}

std::vector<float> random_z(uint64_t seed) {
    Rng rng(seed);
    std::vector<float> z(kLatentDim);
    for (auto& v : z) v = float(rng.normal());
    return z;
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("qlst_test_models_" + name);
    fs::remove_all(p);
    return p;
}

}  // namespace

TEST_CASE("VAE shapes and the log-variance clamp") {
    Vae vae(1);
    auto post = vae.encode(random_batch(3, 2));
    CHECK(post.mu.shape() == Shape{3, 16});
    CHECK(post.logvar.shape() == Shape{3, 16});
    for (float v : post.logvar.values()) {
        CHECK(v >= -8.0f);
        CHECK(v <= 8.0f);
    }
    Tensor x = vae.decode(post.mu);
    CHECK(x.shape() == Shape{3, 8, 600});
    CHECK(x.all_finite());
    CHECK_THROWS_AS(vae.decode(Tensor({1, 15})), Error);
    CHECK_THROWS_AS(vae.encode(Tensor({1, 8, 500})), Error);
}

TEST_CASE("sampling with zero noise equals the posterior mean") {
    Vae vae(4);
    auto post = vae.encode(random_batch(2, 5));
    Tensor z = Vae::reparameterize(post, Tensor(post.mu.shape(), 0.0f));
    CHECK(z.values() == post.mu.values());

    ecg::Signal x(random_batch(1, 6).values());
    auto mean = encode(vae, x, EncodeMode::Mean);
    CHECK(mean.size() == 16);
    CHECK(encode(vae, x, EncodeMode::Sample, 3) == encode(vae, x, EncodeMode::Sample, 3));
    CHECK(encode(vae, x, EncodeMode::Sample, 3) != mean);
}

TEST_CASE("decoder is deterministic") {
    Vae vae(7);
    auto z = random_z(8);
    CHECK(decode(vae, z) == decode(vae, z));
    CHECK(decode(vae, z).size() == size_t(ecg::kSignalSize));
}

TEST_CASE("classifier probabilities lie strictly inside (0, 1)") {
    for (auto arch : {ClassifierArch::Mlp, ClassifierArch::ResnetSmall}) {
        Classifier clf(arch, 3);
        Tensor x = random_batch(4, 9);
        for (auto& v : x.values()) v *= 50.0f;  // push logits toward saturation
        Tensor p = clf.probs(x);
        CHECK(p.shape() == Shape{4, 8});
        for (float v : p.values()) {
            CHECK(v > 0.0f);
            CHECK(v < 1.0f);
        }
        auto zero = classify(clf, ecg::Signal(ecg::kSignalSize, 0.0f));
        for (float v : zero) CHECK((v > 0.0f && v < 1.0f));
    }
}

TEST_CASE("residual classifier has about 100k parameters") {
    Classifier clf(ClassifierArch::ResnetSmall, 0);
    CHECK(clf.num_params() == 109576);
    CHECK(Classifier(ClassifierArch::Mlp, 0).num_params() == 4800 * 64 + 64 + 64 * 64 + 64 + 64 * 8 + 8);
}

TEST_CASE("qLST output has the latent dimension for every query") {
    QlstModel m({}, 11);
    auto z = random_z(12);
    for (float q : {0.0f, 0.2f, 0.5f, 1.0f}) CHECK(qlst_delta(m, z, q).size() == 16);
    Tensor batch({5, 16}, 0.1f);
    CHECK(m.forward(batch, {0, 0.25f, 0.5f, 0.75f, 1}, false, nullptr).shape() == Shape{5, 16});
}

TEST_CASE("qLST rejects queries outside [0, 1]") {
    QlstModel m({}, 1);
    auto z = random_z(2);
    for (float q : {-0.01f, 1.5f, float(NAN)}) {
        try {
            qlst_delta(m, z, q);
            FAIL("expected invalid_query");
        } catch (const Error& e) {
            CHECK(e.code() == "invalid_query");
        }
    }
}

TEST_CASE("qLST query features hold the logit at 0.01 and 0.99") {
    Tensor f = QlstModel::query_features({0.0f, 0.01f, 0.5f, 0.99f, 1.0f});
    CHECK(f.data()[1] == f.data()[3]);
    CHECK(f.data()[7] == f.data()[9]);
    CHECK(f.data()[5] == 0.0f);
    CHECK(f.data()[1] == doctest::Approx(-std::log(99.0) / 4).epsilon(1e-6));
    CHECK(f.data()[0] != f.data()[2]);
}

TEST_CASE("qLST eval mode is deterministic, training mode applies dropout") {
    QlstModel m({}, 5);
    Tensor z({2, 16}, std::vector<float>(random_z(1).size() * 2, 0.3f));
    auto a = m.forward(z, {0.3f, 0.9f}, false, nullptr).values();
    CHECK(a == m.forward(z, {0.3f, 0.9f}, false, nullptr).values());
    Rng r1(1), r2(2);
    CHECK(m.forward(z, {0.3f, 0.9f}, true, &r1).values() != m.forward(z, {0.3f, 0.9f}, true, &r2).values());
    CHECK_THROWS_AS(QlstModel(QlstConfig{16, 32, 5, 128, 0.1, 0}, 0), Error);
}

TEST_CASE("the readout starts near zero so initial delta z is small") {
    QlstModel m({}, 3);
    auto dz = qlst_delta(m, random_z(4), 0.5f);
    double s = 0;
    for (float v : dz) s += v * v;
    CHECK(std::sqrt(s / 16) < 0.5);
}

TEST_CASE("checkpoint round trip preserves outputs bit-exactly") {
    auto dir = scratch("rt");
    Vae vae(21);
    Classifier clf(ClassifierArch::ResnetSmall, 22);
    QlstConfig cfg;
    cfg.class_id = ecg::AV1;
    QlstModel qm(cfg, 23);
    ckpt::save(vae, (dir / "vae").string());
    ckpt::save(clf, (dir / "clf").string());
    ckpt::save(qm, (dir / "qlst").string(), {{"classifier", "clf"}, {"vae", "vae"}});

    auto vae2 = ckpt::load_vae((dir / "vae").string());
    auto clf2 = ckpt::load_classifier((dir / "clf").string());
    auto qm2 = ckpt::load_qlst((dir / "qlst").string());
    auto z = random_z(30);
    ecg::Signal x(random_batch(1, 31).values());
    CHECK(decode(vae2, z) == decode(vae, z));
    CHECK(encode(vae2, x) == encode(vae, x));
    CHECK(classify(clf2, x) == classify(clf, x));
    CHECK(qlst_delta(qm2, z, 0.7f) == qlst_delta(qm, z, 0.7f));
    CHECK(qm2.config().class_id == ecg::AV1);
    auto man = ckpt::read_manifest((dir / "qlst").string());
    CHECK(man["meta"]["classifier"] == "clf");
    CHECK(fs::file_size(dir / "clf" / "weights.bin") == size_t(clf.num_params()) * 4);
    fs::remove_all(dir);
}

TEST_CASE("corrupt checkpoints raise structured errors") {
    auto dir = scratch("bad");
    auto expect_code = [](auto&& fn, const std::string& code) {
        try {
            fn();
            FAIL("expected " << code);
        } catch (const Error& e) {
            CHECK(e.code() == code);
        }
    };
    Classifier clf(ClassifierArch::Mlp, 1);
    auto d = (dir / "clf").string();
    ckpt::save(clf, d);

    expect_code([&] { ckpt::load_vae(d); }, "kind_mismatch");
    expect_code([&] { ckpt::load_classifier((dir / "nothing").string()); }, "missing_checkpoint");

    auto blob = read_text_file(d + "/weights.bin");
    write_text_file(d + "/weights.bin", blob.substr(0, blob.size() - 4));
    expect_code([&] { ckpt::load_classifier(d); }, "truncated_blob");
    write_text_file(d + "/weights.bin", blob);

    auto man = read_json_file(d + "/manifest.json");
    auto bad = man;
    bad["format"] = "qlst-ckpt/0";
    write_text_file(d + "/manifest.json", bad.dump());
    expect_code([&] { ckpt::load_classifier(d); }, "version_mismatch");

    bad = man;
    bad["tensors"][0]["shape"] = {64, 4800};
    write_text_file(d + "/manifest.json", bad.dump());
    expect_code([&] { ckpt::load_classifier(d); }, "shape_mismatch");

    bad = man;
    bad["arch"]["arch"] = "resnet_small";
    write_text_file(d + "/manifest.json", bad.dump());
    expect_code([&] { ckpt::load_classifier(d); }, "missing_tensor");

    write_text_file(d + "/manifest.json", "{not json");
    expect_code([&] { ckpt::load_classifier(d); }, "invalid_checkpoint");
    fs::remove_all(dir);
}

TEST_CASE("frozen models stop accumulating gradients") {
    Classifier clf(ClassifierArch::Mlp, 2);
    clf.freeze();
    Tape<float> tape;
    TapeScope<float> scope(tape);
    Tensor x = random_batch(2, 3);
    x.set_requires_grad(true);
    Tensor loss = ops::sum(clf.logits(x));
    backward(tape, loss);
    CHECK(x.has_grad());
    for (const auto& [name, t] : clf.params()) CHECK_FALSE(t.has_grad());
}
