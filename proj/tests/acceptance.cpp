// End-to-end acceptance run: trains the full pipeline at n = 20,000 through the
// CLI (artifacts are cached under the given directory and reused when complete)
// and prints one PASS/FAIL line per criterion. Exits nonzero if any fails.

#include <chrono>
#include <climits>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

#include "httplib.h"
#include "qlst/checkpoint.hpp"
#include "qlst/cli.hpp"
#include "qlst/explain.hpp"
#include "qlst/service.hpp"
#include "qlst/training.hpp"
#include "support/gradcheck.hpp"
#include "support/roundtrip.hpp"

using namespace qlst;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

constexpr int64_t kDatasetSize = 20000;
constexpr uint64_t kDataSeed = 7;

struct Outcome {
    std::string name;
    bool pass = false;
    std::string detail;
};

std::vector<Outcome> outcomes;

void criterion(const std::string& name, const std::function<Outcome()>& body) {
    Outcome o;
    try {
        o = body();
    } catch (const Error& e) {
        o.pass = false;
        o.detail = "error " + e.code() + ": " + e.what();
    } catch (const std::exception& e) {
        o.pass = false;
        o.detail = std::string("error: ") + e.what();
    }
    o.name = name;
    std::cout << (o.pass ? "PASS " : "FAIL ") << o.name << ": " << o.detail << std::endl;
    outcomes.push_back(o);
}

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4) {
    std::ostringstream s;
    s.precision(prec);
    s << v;
    return s.str();
}

void run_cli(const std::vector<std::string>& args) {
    std::ostringstream out;
    std::cerr << "$ qlst";
    for (const auto& a : args) std::cerr << " " << a;
    std::cerr << std::endl;
    if (cli::run(args, out, std::cerr) != 0) throw Error("cli_failed", "qlst " + args.at(0) + " failed");
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ---- pipeline ---------------------------------------------------------------

struct Artifacts {
    fs::path root, data, models;
    double clf_train_seconds = 0;
    fs::path qlst(int c) const { return models / ("qlst-" + ecg::label_names()[c]); }
};

// A stage is complete once its run manifest exists; it is written last.
bool complete(const fs::path& out) {
    return fs::exists(out / "run.json") || fs::exists(out.string() + ".run.json");
}

Artifacts build_pipeline(const fs::path& root) {
    Artifacts a{root, root / "d.jsonl", root / "models"};
    fs::create_directories(a.models);
    const fs::path timings = root / "timings.json";
    json t = fs::exists(timings) ? json::parse(slurp(timings)) : json::object();

    if (!complete(a.data))
        run_cli({"gen-data", "--n", std::to_string(kDatasetSize), "--seed", std::to_string(kDataSeed), "--out",
                 a.data.string()});
    if (!complete(a.models / "clf")) {
        auto t0 = Clock::now();
        run_cli({"train-clf", "--seed", "1", "--data", a.data.string(), "--out", (a.models / "clf").string()});
        t["train-clf"] = seconds_since(t0);
        std::ofstream(timings) << t.dump(2);
    }
    a.clf_train_seconds = t.value("train-clf", -1.0);
    if (!complete(a.models / "vae"))
        run_cli({"train-vae", "--seed", "2", "--data", a.data.string(), "--out", (a.models / "vae").string()});
    for (int c = 0; c < ecg::kNumLabels; ++c)
        if (!complete(a.qlst(c)))
            run_cli({"train-qlst", "--seed", std::to_string(3 + c), "--class", ecg::label_names()[c], "--data",
                     a.data.string(), "--clf", (a.models / "clf").string(), "--vae", (a.models / "vae").string(),
                     "--out", a.qlst(c).string()});
    return a;
}

struct Models {
    models::Vae vae;
    models::Classifier clf;
    std::vector<models::QlstModel> qlst;
    explain::Pipeline pipeline(int c) const { return {vae, clf, qlst.at(size_t(c))}; }
};

Models load_models(const Artifacts& a) {
    Models m{ckpt::load_vae((a.models / "vae").string()), ckpt::load_classifier((a.models / "clf").string()), {}};
    for (int c = 0; c < ecg::kNumLabels; ++c) m.qlst.push_back(ckpt::load_qlst(a.qlst(c).string()));
    return m;
}

// ---- determinism ------------------------------------------------------------

// Run manifests record paths, which differ between the two trees by design.
json without_paths(json j) {
    if (j.is_object()) {
        j.erase("path");
        for (auto& [k, v] : j.items()) v = without_paths(v);
    } else if (j.is_array()) {
        for (auto& v : j) v = without_paths(v);
    }
    return j;
}

void small_pipeline(const fs::path& dir) {
    fs::remove_all(dir);
    const auto d = (dir / "d.jsonl").string();
    const auto m = dir / "models";
    run_cli({"gen-data", "--n", "400", "--seed", "11", "--out", d});
    run_cli({"train-clf", "--seed", "1", "--epochs", "1", "--data", d, "--out", (m / "clf").string()});
    run_cli({"train-vae", "--seed", "2", "--epochs", "1", "--data", d, "--out", (m / "vae").string()});
    run_cli({"train-qlst", "--seed", "3", "--epochs", "1", "--class", "AV1", "--data", d, "--clf",
             (m / "clf").string(), "--vae", (m / "vae").string(), "--out", (m / "qlst-AV1").string()});
    run_cli({"explain", "--global", "--class", "AV1", "--qlst", (m / "qlst-AV1").string(), "--out",
             (dir / "global.json").string()});
    run_cli({"explain", "--sample", "390", "--data", d, "--qlst", (m / "qlst-AV1").string(), "--out",
             (dir / "local.csv").string()});
    run_cli({"eval-calibration", "--max-samples", "20", "--data", d, "--qlst", (m / "qlst-AV1").string(), "--out",
             (dir / "calibration.csv").string()});
}

Outcome determinism(const fs::path& root) {
    const auto a = root / "determinism" / "a", b = root / "determinism" / "b";
    small_pipeline(a);
    small_pipeline(b);
    int files = 0, differ = 0;
    std::string first_diff;
    for (const auto& de : fs::recursive_directory_iterator(a)) {
        if (!de.is_regular_file()) continue;
        const auto rel = fs::relative(de.path(), a);
        const std::string name = rel.filename().string();
        const bool manifest = name == "run.json" || name.ends_with(".run.json");
        bool same;
        if (manifest)
            same = without_paths(json::parse(slurp(de.path()))) == without_paths(json::parse(slurp(b / rel)));
        else
            same = fs::exists(b / rel) && slurp(de.path()) == slurp(b / rel);
        ++files;
        if (!same) {
            ++differ;
            if (first_diff.empty()) first_diff = rel.string();
        }
    }
    return {"", files > 0 && differ == 0,
            std::to_string(files) + " output files compared across two runs, " + std::to_string(differ) + " differ" +
                (first_diff.empty() ? "" : " (first: " + first_diff + ")")};
}

// ---- service parity ---------------------------------------------------------

Outcome service_parity(const Artifacts& a, const Models& m, const data::Dataset& ds) {
    auto reg = service::Registry::load(a.models.string());
    int ok_models = 0;
    for (const auto& [id, e] : reg.entries()) ok_models += e.status == "ok";
    auto srv = service::make_server(reg);
    const int port = srv->bind_to_any_port("127.0.0.1");
    std::thread th([&] { srv->listen_after_bind(); });
    srv->wait_until_ready();
    httplib::Client cli("127.0.0.1", port);

    int checks = 0, matched = 0;
    auto expect = [&](const std::string& path, const json& body, const std::string& want) {
        auto res = cli.Post(path, body.dump(), "application/json");
        ++checks;
        matched += res && res->status == 200 && res->body == want;
    };

    const auto test_idx = ds.indices(data::Split::Test);
    for (size_t k = 0; k < 3; ++k) {
        const auto& x = ds.records[test_idx[k * 97]].signal;
        auto z = models::encode(m.vae, x);
        expect("/encode", {{"vae_id", "vae"}, {"signal", float_array(x)}}, json{{"z", float_array(z)}}.dump());
        expect("/decode", {{"vae_id", "vae"}, {"z", float_array(z)}},
               json{{"signal", float_array(models::decode(m.vae, z))}}.dump());
        auto p = models::classify(m.clf, x);
        json probs = json::object();
        for (int c = 0; c < ecg::kNumLabels; ++c) probs[ecg::label_names()[c]] = compact_float(p[c]);
        expect("/classify", {{"clf_id", "clf"}, {"signal", float_array(x)}}, json{{"probs", probs}}.dump());
        const int c = int(k * 3) % ecg::kNumLabels;
        const std::string id = "qlst-" + ecg::label_names()[c];
        auto pl = m.pipeline(c);
        expect("/traverse", {{"qlst_id", id}, {"origin", {{"zero", true}}}},
               explain::bundle_to_json(explain::explain_global(pl, explain::default_grid())).dump());
        expect("/traverse", {{"qlst_id", id}, {"origin", {{"signal", float_array(x)}}}, {"queries", {0.1, 0.9}}},
               explain::bundle_to_json(explain::explain_local(pl, x, c, explain::Direction::Both, {0.1f, 0.9f}))
                   .dump());
        expect("/traverse", {{"qlst_id", id}, {"origin", {{"z", float_array(z)}}}},
               explain::bundle_to_json(
                   explain::traverse(pl, z, explain::default_grid(), {explain::Origin::Kind::Latent, ""}))
                   .dump());
    }

    // A checkpoint written by the CLI, queried through the CLI and the service.
    const auto probe = a.root / "probe_signal.json";
    const auto& x = ds.records[test_idx[1]].signal;
    std::ofstream(probe) << json{{"signal", float_array(x)}}.dump();
    const auto cli_out = a.root / "probe_classify.json";
    run_cli({"classify", "--clf", (a.models / "clf").string(), "--input", probe.string(), "--out", cli_out.string()});
    auto res = cli.Post("/classify", json{{"clf_id", "clf"}, {"signal", float_array(x)}}.dump(), "application/json");
    ++checks;
    matched += res && res->body + "\n" == slurp(cli_out);

    auto listing = cli.Get("/models");
    const size_t listed = listing ? json::parse(listing->body)["models"].size() : 0;

    srv->stop();
    th.join();
    return {"", matched == checks && ok_models == 10 && listed == 10,
            std::to_string(matched) + "/" + std::to_string(checks) + " responses bit-identical to in-process/CLI; " +
                std::to_string(listed) + " models listed, " + std::to_string(ok_models) + " ok"};
}

}  // namespace

int main(int argc, char** argv) {
    const fs::path root = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_artifacts");
    fs::create_directories(root);
    std::cout << "acceptance artifacts: " << fs::absolute(root).string() << std::endl;

    criterion("gradient correctness", [] {
        auto t0 = Clock::now();
        auto sums = testing::run_gradchecks(2024, 20);
        const double secs = seconds_since(t0);
        int bad = 0, cases = 0;
        double worst = 0;
        for (const auto& s : sums) {
            bad += s.cases < 20 || s.passed != s.cases;
            cases += s.cases;
            worst = std::max(worst, s.worst_rel_err);
        }
        return Outcome{"", bad == 0 && secs < 60,
                       std::to_string(sums.size()) + " ops, " + std::to_string(cases) + " cases, worst rel err " +
                           fmt(worst, 3) + ", " + fmt(secs, 3) + " s"};
    });

    criterion("generator/oracle round trip", [] {
        auto t0 = Clock::now();
        auto st = testing::run_roundtrip(1000, 99);
        const double secs = seconds_since(t0);
        const double rate = double(st.passed) / st.draws;
        return Outcome{"", st.draws == 1000 && rate >= 0.95 && secs < 60,
                       std::to_string(st.passed) + "/" + std::to_string(st.draws) + " draws within tolerance, " +
                           fmt(secs, 3) + " s"};
    });

    criterion("determinism", [&] { return determinism(root); });

    Artifacts art;
    std::optional<Models> m;
    data::Dataset ds;
    try {
        art = build_pipeline(root);
        m.emplace(load_models(art));
        ds = data::load_dataset(art.data.string());
    } catch (const std::exception& e) {
        std::cout << "pipeline failed: " << e.what() << std::endl;
    }
    auto need_models = [&] {
        if (!m) throw Error("pipeline_failed", "trained models unavailable");
    };

    criterion("classifier quality", [&] {
        need_models();
        auto auc = train::evaluate_auroc(m->clf, ds, data::Split::Test);
        double worst = 1;
        std::string per;
        for (int c = 0; c < ecg::kNumLabels; ++c) {
            worst = std::min(worst, auc[c]);
            per += " " + ecg::label_names()[c] + "=" + fmt(auc[c]);
        }
        const bool resnet = m->clf.architecture() == models::ClassifierArch::ResnetSmall;
        return Outcome{"", resnet && worst >= 0.95 && art.clf_train_seconds >= 0 && art.clf_train_seconds <= 900,
                       "test AUROC min " + fmt(worst) + " (" + per.substr(1) + "), training " +
                           fmt(art.clf_train_seconds, 4) + " s"};
    });

    criterion("calibration", [&] {
        need_models();
        explain::CalibrationReport rep;
        int monotone = 0;
        double mae_sum = 0;
        int64_t min_n = INT64_MAX;
        std::string per;
        for (int c = 0; c < ecg::kNumLabels; ++c) {
            explain::eval_calibration(m->pipeline(c), ds, data::Split::Test, explain::default_grid(), rep);
            const double mae = rep.mean_abs_error(c);
            const bool mono = rep.nondecreasing(c);
            monotone += mono;
            mae_sum += mae;
            per += " " + ecg::label_names()[c] + "=" + fmt(mae, 3) + (mono ? "" : "(non-monotone)");
        }
        for (const auto& r : rep.rows) min_n = std::min(min_n, r.probs.n);
        std::ofstream(root / "calibration.csv") << rep.csv();
        const double mae = mae_sum / ecg::kNumLabels;
        return Outcome{"", monotone >= 7 && mae <= 0.15 && min_n >= 500,
                       std::to_string(monotone) + "/8 classes nondecreasing, mean |y_lst - q| " + fmt(mae, 3) +
                           " over " + std::to_string(min_n) + " test samples (" + per.substr(1) + ")"};
    });

    criterion("morphology direction", [&] {
        need_models();
        const auto grid = explain::default_grid();
        const std::vector<double> qs(grid.begin(), grid.end());
        int av1 = 0, lbbb = 0;
        for (uint64_t seed = 0; seed < 20; ++seed) {
            auto b = explain::explain_global(m->pipeline(ecg::AV1), grid, seed);
            // PR is only defined where a P wave is detected; intermediate records without one are skipped,
            // but both ends must have it.
            const auto& first = b.records.front().morphology;
            const auto& last = b.records.back().morphology;
            bool ok = first.measurable && first.p_present && last.measurable && last.p_present;
            double prev = -1;
            for (const auto& rec : b.records) {
                if (!rec.morphology.measurable || !rec.morphology.p_present) continue;
                ok = ok && rec.morphology.pr_ms > prev;
                prev = rec.morphology.pr_ms;
            }
            ok = ok && first.pr_ms <= 200 && last.pr_ms > 200;
            av1 += ok;

            auto l = explain::explain_global(m->pipeline(ecg::LBBB), grid, seed);
            ok = true;
            std::vector<double> qrs;
            for (const auto& rec : l.records) {
                ok = ok && rec.morphology.measurable;
                qrs.push_back(rec.morphology.qrs_ms);
            }
            ok = ok && explain::spearman(qs, qrs) >= 0.8 && qrs.back() > qrs.front();
            lbbb += ok;
        }
        int af = 0, af_n = 0;
        for (size_t i : ds.indices(data::Split::Test)) {
            if (af_n == 40) break;
            const auto& r = ds.records[i];
            if (r.labels[ecg::AF]) continue;
            ++af_n;
            auto b = explain::explain_local(m->pipeline(ecg::AF), r.signal, ecg::AF, explain::Direction::Both, grid,
                                            std::to_string(r.id));
            std::vector<double> amp;
            for (const auto& rec : b.records)
                amp.push_back(rec.morphology.measurable && rec.morphology.p_present ? rec.morphology.p_amp_mv : 0.0);
            const double rho = explain::spearman(qs, amp);
            af += rho <= -0.8;
        }
        const double ra = av1 / 20.0, rl = lbbb / 20.0, rf = double(af) / af_n;
        return Outcome{"", ra >= 0.8 && rl >= 0.8 && rf >= 0.8 && af_n >= 20,
                       "AV1 PR rising across 200 ms " + std::to_string(av1) + "/20 seeds, LBBB QRS widening (rho >= 0.8) " +
                           std::to_string(lbbb) + "/20 seeds, AF P amplitude rho <= -0.8 " + std::to_string(af) +
                           "/" + std::to_string(af_n) + " sinus samples"};
    });

    criterion("locality", [&] {
        need_models();
        size_t within = 0, total = 0;
        std::string per;
        for (int c = 0; c < ecg::kNumLabels; ++c) {
            auto r = explain::locality_ratios(m->pipeline(c), ds, data::Split::Test);
            size_t w = 0;
            for (double v : r) w += v <= 0.10;
            within += w;
            total += r.size();
            per += " " + ecg::label_names()[c] + "=" + fmt(100.0 * double(w) / double(r.size()), 3) + "%";
        }
        const double frac = double(within) / double(total);
        return Outcome{"", frac >= 0.90,
                       fmt(100 * frac, 3) + "% of test samples within 10% relative RMSE at q = y_hat (" +
                           per.substr(1) + ")"};
    });

    criterion("checkpoint/service parity", [&] {
        need_models();
        return service_parity(art, *m, ds);
    });

    int failed = 0;
    for (const auto& o : outcomes) failed += !o.pass;
    std::cout << outcomes.size() - size_t(failed) << "/" << outcomes.size() << " criteria passed" << std::endl;
    return failed ? 1 : 0;
}
