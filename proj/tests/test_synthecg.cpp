#include <cmath>
#include <cstdio>
#include <filesystem>

#include "doctest.h"
#include "qlst/dataset.hpp"
#include "qlst/ecg.hpp"
#include "qlst/error.hpp"
#include "support/roundtrip.hpp"

using namespace qlst;
using namespace qlst::ecg;

namespace {
MorphParams mid_range() {
    MorphParams p;
    p.rr_ms = 800;
    p.pr_ms = 160;
    p.qrs_ms = 90;
    p.qt_ms = 380;
    p.noise_sd_mv = 0;
    return p;
}
}  // namespace

TEST_CASE("absent P wave contributes exactly nothing") {
    MorphParams a = mid_range(), b = mid_range();
    a.p_present = false;
    a.p_amp_mv = 0.25;
    b.p_present = true;
    b.p_amp_mv = 0.0;
    CHECK(generate(a, 1) == generate(b, 1));
}

TEST_CASE("generation is deterministic in (params, seed)") {
    MorphParams p = mid_range();
    CHECK(generate(p, 3) == generate(p, 3));
    p.noise_sd_mv = 0.02;
    CHECK(generate(p, 3) == generate(p, 3));
    CHECK(generate(p, 3) != generate(p, 4));
}

TEST_CASE("signals have the fixed shape and are finite") {
    Rng rng(12);
    BalanceSpec b;
    for (int i = 0; i < 50; ++i) {
        auto x = generate(sample_params(rng, b), uint64_t(i));
        CHECK(x.size() == size_t(kSignalSize));
        CHECK_NOTHROW(validate_signal(x));
    }
}

TEST_CASE("invalid parameters are rejected") {
    MorphParams p = mid_range();
    p.pr_ms = 900;
    CHECK_THROWS_AS(generate(p, 0), Error);
    p = mid_range();
    p.qt_ms = 80;
    CHECK_THROWS_AS(generate(p, 0), Error);
    p = mid_range();
    p.t_amp_mv = 6;
    CHECK_THROWS_AS(generate(p, 0), Error);
}

TEST_CASE("label thresholds") {
    MorphParams p = mid_range();
    p.pr_ms = 220;
    CHECK(derive_labels(p)[AV1]);
    p = mid_range();
    auto y = derive_labels(p);
    CHECK_FALSE(y[SB]);
    CHECK_FALSE(y[ST]);
    p.qrs_ms = 130;
    p.rsr_present = true;
    y = derive_labels(p);
    CHECK(y[RBBB]);
    CHECK_FALSE(y[LBBB]);
    Rng rng(5);
    BalanceSpec b;
    for (int i = 0; i < 5000; ++i) {
        auto q = sample_params(rng, b);
        auto l = derive_labels(q);
        CHECK_FALSE((l[SB] && l[ST]));
        CHECK(l == derive_labels(q));
    }
}

TEST_CASE("clean PR of 160 ms is measured within 10 ms") {
    auto m = measure_morphology(generate(mid_range(), 0));
    REQUIRE(m.measurable);
    CHECK(m.pr_ms >= 150);
    CHECK(m.pr_ms <= 170);
}

TEST_CASE("flat signal is unmeasurable, not a crash") {
    Signal zero(kSignalSize, 0.0f);
    CHECK_FALSE(measure_morphology(zero).measurable);
    CHECK_THROWS_AS(measure_morphology(Signal(10, 0.0f)), Error);
}

TEST_CASE("durations are invariant to amplitude scaling") {
    Rng rng(77);
    BalanceSpec b;
    b.noise_max_mv = 0.0;
    for (int i = 0; i < 50; ++i) {
        auto x = generate(sample_params(rng, b), 0);
        auto x2 = x;
        for (auto& v : x2) v *= 2.0f;
        auto m1 = measure_morphology(x), m2 = measure_morphology(x2);
        REQUIRE(m1.measurable);
        CHECK(std::abs(m1.qrs_ms - m2.qrs_ms) <= 2.0);
        if (std::isfinite(m1.pr_ms)) CHECK(std::abs(m1.pr_ms - m2.pr_ms) <= 2.0);
        if (std::isfinite(m1.qt_ms)) CHECK(std::abs(m1.qt_ms - m2.qt_ms) <= 2.0);
    }
}

TEST_CASE("round trip on 1000 low-noise draws") {
    auto s = testing::run_roundtrip(1000, 99);
    INFO("passed " << s.passed << " of " << s.draws);
    for (const auto& [k, v] : s.failures) INFO(k << " failures " << v);
    CHECK(s.passed >= 950);
}

TEST_CASE("AV1-positive draws measure PR above 200 ms") {
    Rng rng(31);
    BalanceSpec b;
    int n = 0, ok = 0;
    for (int i = 0; n < 300; ++i) {
        auto p = sample_params(rng, b);
        if (!derive_labels(p)[AV1] || !p.p_present) continue;
        ++n;
        auto m = measure_morphology(generate(p, uint64_t(i)));
        ok += m.pr_ms > 200.0;
    }
    CHECK(ok >= 0.95 * n);
}

TEST_CASE("label frequencies track the balance at n = 20000") {
    BalanceSpec b;
    std::array<double, kNumLabels> f{};
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        Rng rng = Rng::stream(7, "params", uint64_t(i));
        auto y = derive_labels(sample_params(rng, b));
        for (int c = 0; c < kNumLabels; ++c) f[c] += y[c];
    }
    for (int c = 0; c < kNumLabels; ++c) {
        INFO(label_names()[c] << " " << f[c] / n);
        CHECK(std::abs(f[c] / n - b.prevalence[c]) <= 0.03);
    }
}

TEST_CASE("dataset files are reproducible and split 80/10/10") {
    namespace fs = std::filesystem;
    auto dir = fs::temp_directory_path() / "qlst_test_dataset";
    fs::create_directories(dir);
    auto a = (dir / "a.jsonl").string(), b = (dir / "b.jsonl").string();
    BalanceSpec bal;
    data::build_dataset(a, 1000, 7, bal);
    data::build_dataset(b, 1000, 7, bal);
    CHECK(read_text_file(a) == read_text_file(b));
    CHECK(read_text_file(data::sidecar_path(a)) == read_text_file(data::sidecar_path(b)));

    auto ds = data::load_dataset(a);
    REQUIRE(ds.records.size() == 1000);
    CHECK(ds.indices(data::Split::Train).size() == 800);
    CHECK(ds.indices(data::Split::Val).size() == 100);
    CHECK(ds.indices(data::Split::Test).size() == 100);
    CHECK(ds.manifest["generator"]["lead_gains"].size() == 8);
    CHECK(ds.manifest["label_frequency"]["all"]["n"] == 1000);

    // Every stored float parses back bit-exactly.
    auto r = data::make_record(17, 1000, 7, bal);
    CHECK(ds.records[17].signal == r.signal);
    CHECK(ds.records[17].labels == r.labels);
    CHECK(ds.records[17].params.pr_ms == r.params.pr_ms);
    fs::remove_all(dir);
}
