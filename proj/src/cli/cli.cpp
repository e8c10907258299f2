#include "qlst/cli.hpp"

#include <openssl/evp.h>

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "qlst/checkpoint.hpp"
#include "qlst/explain.hpp"
#include "qlst/service.hpp"
#include "qlst/training.hpp"

namespace qlst::cli {

namespace fs = std::filesystem;

namespace {

std::string digest_hex(const std::string& data, const EVP_MD* md) {
    unsigned char buf[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (!EVP_Digest(data.data(), data.size(), buf, &len, md, nullptr)) throw Error("hash_failed", "digest failed");
    static const char* hex = "0123456789abcdef";
    std::string s;
    for (unsigned int i = 0; i < len; ++i) {
        s += hex[buf[i] >> 4];
        s += hex[buf[i] & 15];
    }
    return s;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("missing_file", "cannot read '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void ensure_parent(const std::string& path) {
    auto parent = fs::path(path).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
}

void write_file(const std::string& path, const std::string& content) {
    ensure_parent(path);
    std::ofstream out(path, std::ios::binary);
    out << content;
    if (!out) throw Error("write_failed", "cannot write '" + path + "'");
}

json read_json_file(const std::string& path) {
    json j = json::parse(read_file(path), nullptr, false);
    if (j.is_discarded()) throw Error("invalid_json", "'" + path + "' is not valid JSON");
    return j;
}

// A bare array, or an object holding the array under `field`.
std::vector<float> read_vector_file(const std::string& path, const std::string& field) {
    json j = read_json_file(path);
    if (j.is_object()) {
        if (!j.contains(field)) throw Error("invalid_json", "'" + path + "' has no field '" + field + "'");
        return read_float_array(j[field], field);
    }
    return read_float_array(j, field);
}

// The registry id of a checkpoint directory is its name.
std::string dir_id(const std::string& dir) {
    fs::path p = fs::path(dir).lexically_normal();
    if (p.filename().empty()) p = p.parent_path();
    return p.filename().string();
}

// Written next to a file output, or inside a directory output as run.json.
void write_run_manifest(const std::string& subcommand, const json& config, uint64_t seed,
                        const std::vector<std::string>& inputs, const std::vector<std::string>& outputs,
                        const std::string& manifest_path) {
    json m = {{"format", "qlst-run/1"},
              {"subcommand", subcommand},
              {"seed", seed},
              {"config", config},
              {"config_sha256", sha256_hex(config.dump())},
              {"inputs", hash_paths(inputs)},
              {"outputs", hash_paths(outputs)}};
    write_file(manifest_path, m.dump(2) + "\n");
}

std::string file_manifest_path(const std::string& out) { return out + ".run.json"; }
std::string dir_manifest_path(const std::string& dir) { return (fs::path(dir) / "run.json").string(); }

struct Globals {
    uint64_t seed = 0;
    bool seed_set = false;
    std::string config;
};

train::StageConfig stage_config(train::Stage stage, const Globals& g) {
    auto c = train::default_config(stage);
    if (!g.config.empty()) c = train::config_from_json(read_json_file(g.config), c);
    if (g.seed_set) c.seed = g.seed;
    return c;
}

// Overrides set only when the flag was given.
template <typename T>
void override_if(const CLI::Option* opt, T& field, const T& value) {
    if (opt->count() > 0) field = value;
}

int parse_class(const std::string& s) {
    if (!s.empty() && std::all_of(s.begin(), s.end(), ::isdigit)) {
        int c = std::stoi(s);
        if (c < 0 || c >= ecg::kNumLabels) throw Error("unknown_class", "class id " + s + " is out of range");
        return c;
    }
    return ecg::label_index(s);
}

// Loaded models for explain-style commands; dependencies default to the ids
// recorded in the qLST checkpoint, resolved as sibling directories.
struct Loaded {
    std::optional<models::Vae> vae;
    std::optional<models::Classifier> clf;
    std::optional<models::QlstModel> qlst;
    std::string vae_dir, clf_dir;
    explain::Pipeline pipeline() const { return {*vae, *clf, *qlst}; }
};

Loaded load_pipeline(const std::string& qlst_dir, std::string vae_dir, std::string clf_dir) {
    Loaded l;
    l.qlst.emplace(ckpt::load_qlst(qlst_dir));
    const json meta = ckpt::read_manifest(qlst_dir)["meta"];
    const fs::path parent = fs::path(qlst_dir).lexically_normal().parent_path();
    if (vae_dir.empty() && meta.is_object() && meta.contains("vae"))
        vae_dir = (parent / meta["vae"].get<std::string>()).string();
    if (clf_dir.empty() && meta.is_object() && meta.contains("classifier"))
        clf_dir = (parent / meta["classifier"].get<std::string>()).string();
    if (vae_dir.empty() || clf_dir.empty())
        throw Error("missing_dependency", "qLST checkpoint '" + qlst_dir + "' names no vae/classifier; pass --vae and --clf");
    l.vae.emplace(ckpt::load_vae(vae_dir));
    l.clf.emplace(ckpt::load_classifier(clf_dir));
    l.vae_dir = vae_dir;
    l.clf_dir = clf_dir;
    return l;
}

void log_line(std::ostream& err, const std::string& s) { err << s << "\n"; }

}  // namespace

std::string git_blob_sha1(const std::string& content) {
    std::string blob = "blob " + std::to_string(content.size());
    blob.push_back('\0');
    blob += content;
    return digest_hex(blob, EVP_sha1());
}

std::string sha256_hex(const std::string& content) { return digest_hex(content, EVP_sha256()); }

json hash_paths(const std::vector<std::string>& paths) {
    json out = json::array();
    for (const auto& p : paths) {
        std::vector<std::string> files;
        if (fs::is_directory(p)) {
            for (const auto& de : fs::directory_iterator(p))
                if (de.is_regular_file() && de.path().filename() != "run.json") files.push_back(de.path().string());
            std::sort(files.begin(), files.end());
        } else {
            files.push_back(p);
        }
        for (const auto& f : files) out.push_back({{"path", f}, {"blob_sha1", git_blob_sha1(read_file(f))}});
    }
    return out;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"qLST: query-conditioned latent space traversal for ECG classifiers", "qlst"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    auto* seed_opt = app.add_option("--seed", g.seed, "Random seed (default 0)");
    app.add_option("--config", g.config, "JSON StageConfig file; flags override its values")->check(CLI::ExistingFile);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Generate a labelled synthetic ECG dataset (JSON lines)");
    int64_t gen_n = 0;
    std::string gen_out;
    gen->add_option("--n", gen_n, "Number of records")->required()->check(CLI::PositiveNumber);
    gen->add_option("--out", gen_out, "Output .jsonl path")->required();

    // training stages share --data/--out and the common hyperparameters
    struct TrainFlags {
        std::string data, out;
        int epochs = 0, batch_size = 0;
        double lr = 0;
        CLI::Option *epochs_opt, *batch_opt, *lr_opt;
    };
    auto add_train = [](CLI::App* sub, TrainFlags& f) {
        sub->add_option("--data", f.data, "Dataset .jsonl")->required()->check(CLI::ExistingFile);
        sub->add_option("--out", f.out, "Checkpoint directory")->required();
        f.epochs_opt = sub->add_option("--epochs", f.epochs)->check(CLI::PositiveNumber);
        f.batch_opt = sub->add_option("--batch-size", f.batch_size)->check(CLI::PositiveNumber);
        f.lr_opt = sub->add_option("--lr", f.lr)->check(CLI::PositiveNumber);
    };
    auto apply_train = [](const TrainFlags& f, train::StageConfig& c) {
        override_if(f.epochs_opt, c.epochs, f.epochs);
        override_if(f.batch_opt, c.batch_size, f.batch_size);
        override_if(f.lr_opt, c.lr, f.lr);
    };

    auto* tclf = app.add_subcommand("train-clf", "Stage 1: train the ECG classifier");
    TrainFlags clf_f;
    add_train(tclf, clf_f);
    std::string clf_arch;
    auto* arch_opt = tclf->add_option("--arch", clf_arch, "resnet_small or mlp");

    auto* tvae = app.add_subcommand("train-vae", "Stage 2: train the VAE");
    TrainFlags vae_f;
    add_train(tvae, vae_f);
    int64_t latent_dim = 0;
    double kl_target = 0;
    auto* ld_opt = tvae->add_option("--latent-dim", latent_dim)->check(CLI::PositiveNumber);
    auto* kl_opt = tvae->add_option("--kl-target", kl_target)->check(CLI::PositiveNumber);

    auto* tq = app.add_subcommand("train-qlst", "Stage 3: train one qLST model against frozen stage 1 and 2 models");
    TrainFlags q_f;
    add_train(tq, q_f);
    std::string q_clf, q_vae, q_class;
    tq->add_option("--clf", q_clf, "Stage 1 classifier checkpoint");
    tq->add_option("--vae", q_vae, "Stage 2 VAE checkpoint");
    auto* class_opt = tq->add_option("--class", q_class, "Target class name or id");

    // explain
    auto* ex = app.add_subcommand("explain", "Export a traversal bundle (.json or .csv)");
    std::string ex_qlst, ex_vae, ex_clf, ex_class, ex_queries, ex_data, ex_signal, ex_out, ex_dir = "both";
    bool ex_global = false;
    int64_t ex_sample = -1;
    uint64_t ex_mc = 0;
    ex->add_option("--qlst", ex_qlst, "qLST checkpoint")->required();
    ex->add_option("--vae", ex_vae, "VAE checkpoint (default: the one recorded in the qLST checkpoint)");
    ex->add_option("--clf", ex_clf, "Classifier checkpoint (default: the one recorded in the qLST checkpoint)");
    ex->add_option("--class", ex_class, "Class to explain; must match the qLST model");
    ex->add_option("--queries", ex_queries, "Comma-separated query grid (default 0,0.2,0.4,0.6,0.8,1)");
    auto* global_opt = ex->add_flag("--global", ex_global, "Traverse from the zero latent");
    auto* sample_opt = ex->add_option("--sample", ex_sample, "Local explanation of this record id (needs --data)");
    ex->add_option("--data", ex_data, "Dataset for --sample")->check(CLI::ExistingFile);
    auto* signal_opt = ex->add_option("--signal", ex_signal, "Local explanation of a signal JSON file")
                           ->check(CLI::ExistingFile);
    ex->add_option("--direction", ex_dir, "both, increase or decrease (local only)");
    auto* mc_opt = ex->add_option("--mc-dropout-seed", ex_mc, "Run the qLST with dropout active (global only)");
    ex->add_option("--out", ex_out, "Bundle path (.json or .csv)")->required();

    // eval-calibration
    auto* ev = app.add_subcommand("eval-calibration", "Per-class calibration of qLST traversals on a split");
    std::string ev_data, ev_split = "test", ev_queries, ev_out, ev_vae, ev_clf;
    std::vector<std::string> ev_qlst;
    size_t ev_max = 0;
    ev->add_option("--data", ev_data)->required()->check(CLI::ExistingFile);
    ev->add_option("--qlst", ev_qlst, "qLST checkpoints, one per class")->required();
    ev->add_option("--vae", ev_vae);
    ev->add_option("--clf", ev_clf);
    ev->add_option("--split", ev_split, "train, val or test");
    ev->add_option("--max-samples", ev_max, "0 = whole split");
    ev->add_option("--queries", ev_queries);
    ev->add_option("--out", ev_out, "CSV report")->required();

    // serve
    auto* sv = app.add_subcommand("serve", "Serve checkpoints over HTTP");
    std::string sv_dir, sv_bind = "127.0.0.1", sv_cors = "*";
    int sv_port = 8080;
    sv->add_option("--models-dir", sv_dir)->required();
    sv->add_option("--port", sv_port)->check(CLI::Range(0, 65535));
    sv->add_option("--bind", sv_bind);
    sv->add_option("--cors-origin", sv_cors);

    // single-call inference, same bodies as the service responses
    auto* dec = app.add_subcommand("decode", "Decode a latent vector to a signal");
    std::string dec_vae, dec_in, dec_out;
    dec->add_option("--vae", dec_vae)->required();
    dec->add_option("--input", dec_in, "JSON array or {\"z\": [...]}")->required()->check(CLI::ExistingFile);
    dec->add_option("--out", dec_out)->required();

    auto* enc = app.add_subcommand("encode", "Encode a signal to its posterior mean");
    std::string enc_vae, enc_in, enc_out;
    enc->add_option("--vae", enc_vae)->required();
    enc->add_option("--input", enc_in, "JSON array or {\"signal\": [...]}")->required()->check(CLI::ExistingFile);
    enc->add_option("--out", enc_out)->required();

    auto* cls = app.add_subcommand("classify", "Classifier probabilities for a signal");
    std::string cls_clf, cls_in, cls_out;
    cls->add_option("--clf", cls_clf)->required();
    cls->add_option("--input", cls_in, "JSON array or {\"signal\": [...]}")->required()->check(CLI::ExistingFile);
    cls->add_option("--out", cls_out)->required();

    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(rev);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << json{{"error", {{"code", "usage"}, {"message", e.what()}}}}.dump() << "\n";
        return 2;
    }
    g.seed_set = seed_opt->count() > 0;
    auto log = [&err](const std::string& s) { log_line(err, s); };

    try {
        if (!g.config.empty() && !(*tclf || *tvae || *tq))
            throw Error("invalid_config", "--config applies to the training subcommands only");

        if (*gen) {
            ensure_parent(gen_out);
            data::build_dataset(gen_out, gen_n, g.seed, ecg::BalanceSpec{});
            json cfg = {{"n", gen_n}};
            write_run_manifest("gen-data", cfg, g.seed, {}, {gen_out, data::sidecar_path(gen_out)},
                               file_manifest_path(gen_out));
            log("wrote " + std::to_string(gen_n) + " records to " + gen_out);
        } else if (*tclf) {
            auto c = stage_config(train::Stage::Classifier, g);
            apply_train(clf_f, c);
            override_if(arch_opt, c.arch, clf_arch);
            train::validate(c);
            auto ds = data::load_dataset(clf_f.data);
            auto r = train::train_classifier(c, ds, log);
            auto auc = train::evaluate_auroc(r.model, ds, data::Split::Test);
            std::ostringstream s;
            s << "test auroc";
            for (int k = 0; k < ecg::kNumLabels; ++k) s << " " << ecg::label_names()[k] << "=" << auc[k];
            log(s.str());
            ckpt::save(r.model, clf_f.out, {{"stage", "classifier"}, {"config", train::to_json(c)}});
            write_file((fs::path(clf_f.out) / "metrics.csv").string(), r.metrics.csv());
            write_run_manifest("train-clf", train::to_json(c), c.seed, {clf_f.data}, {clf_f.out},
                               dir_manifest_path(clf_f.out));
        } else if (*tvae) {
            auto c = stage_config(train::Stage::Vae, g);
            apply_train(vae_f, c);
            override_if(ld_opt, c.latent_dim, latent_dim);
            override_if(kl_opt, c.kl_target, kl_target);
            train::validate(c);
            auto ds = data::load_dataset(vae_f.data);
            auto r = train::train_vae(c, ds, log);
            auto e = train::evaluate_vae(r.model, ds, data::Split::Test);
            log("test kl " + std::to_string(e.kl) + " rel_rmse " + std::to_string(e.rel_rmse));
            ckpt::save(r.model, vae_f.out, {{"stage", "vae"}, {"config", train::to_json(c)}});
            write_file((fs::path(vae_f.out) / "metrics.csv").string(), r.metrics.csv());
            write_run_manifest("train-vae", train::to_json(c), c.seed, {vae_f.data}, {vae_f.out},
                               dir_manifest_path(vae_f.out));
        } else if (*tq) {
            if (q_clf.empty() || q_vae.empty())
                throw Error("missing_dependency",
                            std::string("train-qlst needs ") + (q_clf.empty() ? "--clf" : "--vae") +
                                ": stage 3 trains against a frozen stage 1 classifier (train-clf) and a frozen "
                                "stage 2 VAE (train-vae); run train-clf and train-vae first");
            auto c = stage_config(train::Stage::Qlst, g);
            apply_train(q_f, c);
            if (class_opt->count() > 0) c.class_id = parse_class(q_class);
            train::validate(c);
            auto clf = ckpt::load_classifier(q_clf);
            auto vae = ckpt::load_vae(q_vae);
            auto ds = data::load_dataset(q_f.data);
            auto r = train::train_qlst(c, ds, clf, vae, log);
            json meta = {{"stage", "qlst"},
                         {"class", ecg::label_names()[c.class_id]},
                         {"vae", dir_id(q_vae)},
                         {"classifier", dir_id(q_clf)},
                         {"config", train::to_json(c)}};
            ckpt::save(r.model, q_f.out, meta);
            write_file((fs::path(q_f.out) / "metrics.csv").string(), r.metrics.csv());
            write_run_manifest("train-qlst", train::to_json(c), c.seed, {q_f.data, q_clf, q_vae}, {q_f.out},
                               dir_manifest_path(q_f.out));
        } else if (*ex) {
            const int modes = int(global_opt->count() > 0) + int(sample_opt->count() > 0) + int(signal_opt->count() > 0);
            if (modes != 1) throw Error("invalid_arguments", "explain needs exactly one of --global, --sample, --signal");
            auto l = load_pipeline(ex_qlst, ex_vae, ex_clf);
            auto p = l.pipeline();
            const int cls_id = ex_class.empty() ? l.qlst->config().class_id : parse_class(ex_class);
            auto grid = ex_queries.empty() ? explain::default_grid() : explain::parse_grid(ex_queries);
            std::vector<std::string> inputs{ex_qlst, l.vae_dir, l.clf_dir};
            json cfg = {{"class", ecg::label_names()[cls_id]}, {"queries", float_array(grid)}};
            explain::Bundle b;
            if (ex_global) {
                if (cls_id != l.qlst->config().class_id)
                    throw Error("missing_model", "qLST checkpoint '" + ex_qlst + "' explains " +
                                                     ecg::label_names()[l.qlst->config().class_id] + ", not " +
                                                     ecg::label_names()[cls_id]);
                std::optional<uint64_t> mc;
                if (mc_opt->count() > 0) {
                    mc = ex_mc;
                    cfg["mc_dropout_seed"] = ex_mc;
                }
                cfg["origin"] = "global";
                b = explain::explain_global(p, grid, mc);
            } else {
                if (mc_opt->count() > 0) throw Error("invalid_arguments", "--mc-dropout-seed applies to --global only");
                ecg::Signal x;
                std::string id;
                if (sample_opt->count() > 0) {
                    if (ex_data.empty()) throw Error("invalid_arguments", "--sample needs --data");
                    auto ds = data::load_dataset(ex_data);
                    auto it = std::find_if(ds.records.begin(), ds.records.end(),
                                           [&](const data::Record& r) { return r.id == ex_sample; });
                    if (it == ds.records.end())
                        throw Error("unknown_sample", "no record with id " + std::to_string(ex_sample));
                    x = it->signal;
                    id = std::to_string(ex_sample);
                    inputs.push_back(ex_data);
                } else {
                    x = read_vector_file(ex_signal, "signal");
                    inputs.push_back(ex_signal);
                }
                cfg["origin"] = "local";
                cfg["sample_id"] = id;
                cfg["direction"] = ex_dir;
                b = explain::explain_local(p, x, cls_id, explain::parse_direction(ex_dir), grid, id);
            }
            ensure_parent(ex_out);
            explain::export_bundle(b, ex_out);
            write_run_manifest("explain", cfg, g.seed, inputs, {ex_out}, file_manifest_path(ex_out));
        } else if (*ev) {
            auto grid = ev_queries.empty() ? explain::default_grid() : explain::parse_grid(ev_queries);
            auto ds = data::load_dataset(ev_data);
            const auto split = data::parse_split(ev_split);
            explain::CalibrationReport rep;
            std::vector<std::string> inputs{ev_data};
            for (const auto& q : ev_qlst) {
                auto l = load_pipeline(q, ev_vae, ev_clf);
                explain::eval_calibration(l.pipeline(), ds, split, grid, rep, ev_max);
                const int c = l.qlst->config().class_id;
                log(ecg::label_names()[c] + ": mean |y_lst - q| " + std::to_string(rep.mean_abs_error(c)) +
                    (rep.nondecreasing(c) ? ", nondecreasing" : ", not monotone"));
                inputs.insert(inputs.end(), {q, l.vae_dir, l.clf_dir});
            }
            write_file(ev_out, rep.csv());
            json cfg = {{"split", ev_split}, {"max_samples", ev_max}, {"queries", float_array(grid)}};
            write_run_manifest("eval-calibration", cfg, g.seed, inputs, {ev_out}, file_manifest_path(ev_out));
        } else if (*sv) {
            auto reg = service::Registry::load(sv_dir);
            for (const auto& [id, e] : reg.entries())
                log("model " + id + " (" + e.kind + "): " + e.status + (e.message.empty() ? "" : " " + e.message));
            log("listening on " + sv_bind + ":" + std::to_string(sv_port));
            service::serve(reg, sv_bind, sv_port, {sv_cors});
        } else if (*dec) {
            auto vae = ckpt::load_vae(dec_vae);
            auto z = read_vector_file(dec_in, "z");
            write_file(dec_out, json{{"signal", float_array(models::decode(vae, z))}}.dump() + "\n");
            write_run_manifest("decode", json::object(), g.seed, {dec_vae, dec_in}, {dec_out},
                               file_manifest_path(dec_out));
        } else if (*enc) {
            auto vae = ckpt::load_vae(enc_vae);
            auto x = read_vector_file(enc_in, "signal");
            write_file(enc_out, json{{"z", float_array(models::encode(vae, x))}}.dump() + "\n");
            write_run_manifest("encode", json::object(), g.seed, {enc_vae, enc_in}, {enc_out},
                               file_manifest_path(enc_out));
        } else if (*cls) {
            auto clf = ckpt::load_classifier(cls_clf);
            auto x = read_vector_file(cls_in, "signal");
            auto p = models::classify(clf, x);
            json probs = json::object();
            for (int k = 0; k < ecg::kNumLabels; ++k) probs[ecg::label_names()[k]] = compact_float(p[k]);
            write_file(cls_out, json{{"probs", probs}}.dump() + "\n");
            write_run_manifest("classify", json::object(), g.seed, {cls_clf, cls_in}, {cls_out},
                               file_manifest_path(cls_out));
        }
    } catch (const Error& e) {
        err << json{{"error", {{"code", e.code()}, {"message", e.what()}}}}.dump() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << json{{"error", {{"code", "internal"}, {"message", e.what()}}}}.dump() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace qlst::cli
