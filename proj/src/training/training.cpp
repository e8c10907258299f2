#include "qlst/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <numbers>
#include <numeric>
#include <sstream>

namespace qlst::train {

using namespace ecg;
using data::Split;
using models::Classifier;
using models::QlstModel;
using models::Vae;

std::string stage_name(Stage s) {
    switch (s) {
        case Stage::Classifier: return "classifier";
        case Stage::Vae: return "vae";
        case Stage::Qlst: return "qlst";
    }
    return "";
}

Stage parse_stage(const std::string& s) {
    if (s == "classifier") return Stage::Classifier;
    if (s == "vae") return Stage::Vae;
    if (s == "qlst") return Stage::Qlst;
    throw Error("invalid_config", "unknown stage '" + s + "' (expected classifier, vae or qlst)");
}

StageConfig default_config(Stage s) {
    StageConfig c;
    c.stage = s;
    switch (s) {
        case Stage::Classifier:
            c.epochs = 6;
            c.lr = 1e-3;
            break;
        case Stage::Vae:
            c.epochs = 20;
            c.lr = 1e-3;
            break;
        case Stage::Qlst:
            c.epochs = 20;
            c.lr = 3e-3;
            break;
    }
    return c;
}

json to_json(const StageConfig& c) {
    json j = {{"stage", stage_name(c.stage)}, {"epochs", c.epochs}, {"batch_size", c.batch_size},
              {"lr", c.lr},                   {"seed", c.seed}};
    switch (c.stage) {
        case Stage::Classifier:
            j["arch"] = c.arch;
            j["label_smoothing"] = c.label_smoothing;
            break;
        case Stage::Vae:
            j["latent_dim"] = c.latent_dim;
            j["kl_target"] = c.kl_target;
            j["kp"] = c.kp;
            j["ki"] = c.ki;
            j["beta_min"] = c.beta_min;
            j["beta_max"] = c.beta_max;
            break;
        case Stage::Qlst:
            j["class_id"] = c.class_id;
            j["alpha_base"] = c.alpha_base;
            j["cosine_lr"] = c.cosine_lr;
            j["val_samples"] = c.val_samples;
            j["shrunk_fraction"] = c.shrunk_fraction;
            break;
    }
    return j;
}

StageConfig config_from_json(const json& j, const StageConfig& base) {
    if (!j.is_object()) throw Error("invalid_config", "config must be a JSON object");
    StageConfig c = base;
    try {
        for (const auto& [k, v] : j.items()) {
            if (k == "stage") {
                if (parse_stage(v.get<std::string>()) != c.stage)
                    throw Error("invalid_config", "config is for stage '" + v.get<std::string>() + "', not '" +
                                                      stage_name(c.stage) + "'");
            } else if (k == "epochs") c.epochs = v.get<int>();
            else if (k == "batch_size") c.batch_size = v.get<int>();
            else if (k == "lr") c.lr = v.get<double>();
            else if (k == "seed") c.seed = v.get<uint64_t>();
            else if (k == "arch") c.arch = v.get<std::string>();
            else if (k == "label_smoothing") c.label_smoothing = v.get<double>();
            else if (k == "latent_dim") c.latent_dim = v.get<int64_t>();
            else if (k == "kl_target") c.kl_target = v.get<double>();
            else if (k == "kp") c.kp = v.get<double>();
            else if (k == "ki") c.ki = v.get<double>();
            else if (k == "beta_min") c.beta_min = v.get<double>();
            else if (k == "beta_max") c.beta_max = v.get<double>();
            else if (k == "class_id") c.class_id = v.is_string() ? label_index(v.get<std::string>()) : v.get<int>();
            else if (k == "alpha_base") c.alpha_base = v.get<double>();
            else if (k == "cosine_lr") c.cosine_lr = v.get<bool>();
            else if (k == "val_samples") c.val_samples = v.get<int>();
            else if (k == "shrunk_fraction") c.shrunk_fraction = v.get<double>();
            else throw Error("invalid_config", "unknown config key '" + k + "'");
        }
    } catch (const json::exception& e) {
        throw Error("invalid_config", std::string("config value has the wrong type: ") + e.what());
    }
    return c;
}

void validate(const StageConfig& c) {
    auto fail = [](const std::string& m) { throw Error("invalid_config", m); };
    if (c.epochs <= 0) fail("epochs must be positive");
    if (c.batch_size <= 0) fail("batch_size must be positive");
    if (!(c.lr > 0)) fail("lr must be positive");
    switch (c.stage) {
        case Stage::Classifier:
            models::parse_arch(c.arch);
            if (!(c.label_smoothing >= 0 && c.label_smoothing < 1)) fail("label_smoothing must be in [0, 1)");
            break;
        case Stage::Vae:
            if (c.latent_dim <= 0) fail("latent_dim must be positive");
            if (!(c.kl_target > 0)) fail("kl_target must be positive");
            if (!(c.kp >= 0 && c.ki >= 0)) fail("PI gains must be non-negative");
            if (!(c.beta_min >= 0 && c.beta_max >= c.beta_min)) fail("need 0 <= beta_min <= beta_max");
            break;
        case Stage::Qlst:
            if (c.class_id < 0 || c.class_id >= kNumLabels) fail("class_id must be in [0, 8) for the qlst stage");
            if (!(c.alpha_base >= 0)) fail("alpha_base must be non-negative");
            if (c.val_samples < 0) fail("val_samples must be non-negative");
            if (!(c.shrunk_fraction >= 0 && c.shrunk_fraction <= 4)) fail("shrunk_fraction must be in [0, 4]");
            break;
    }
}

std::array<float, kNumLabels> class_weights(const std::array<double, kNumLabels>& freq) {
    std::array<float, kNumLabels> w{};
    for (int c = 0; c < kNumLabels; ++c)
        w[c] = freq[c] > 0 ? float(std::clamp(0.5 / freq[c], 1.0, 10.0)) : 10.0f;
    return w;
}

float sample_weight(const LabelVector& y, const std::array<float, kNumLabels>& w) {
    double s = 0;
    int n = 0;
    for (int c = 0; c < kNumLabels; ++c)
        if (y[c]) {
            s += w[c];
            ++n;
        }
    return n ? float(s / n) : 1.0f;
}

double auroc(const std::vector<float>& scores, const std::vector<bool>& labels) {
    if (scores.size() != labels.size()) throw Error("shape_mismatch", "auroc needs one label per score");
    std::vector<size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });
    // Sum of positive ranks with ties given their average rank.
    double pos_rank_sum = 0;
    int64_t npos = 0;
    for (size_t i = 0; i < order.size();) {
        size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * double(i + 1 + j);
        for (size_t k = i; k < j; ++k)
            if (labels[order[k]]) {
                pos_rank_sum += avg_rank;
                ++npos;
            }
        i = j;
    }
    const int64_t nneg = int64_t(scores.size()) - npos;
    if (npos == 0 || nneg == 0) return NAN;
    return (pos_rank_sum - 0.5 * double(npos) * double(npos + 1)) / (double(npos) * double(nneg));
}

BetaController::BetaController(double set_point, double kp, double ki, double beta_min, double beta_max)
    : set_point_(set_point), kp_(kp), ki_(ki), beta_min_(beta_min), beta_max_(beta_max) {
    if (!(set_point > 0)) throw Error("invalid_config", "KL set point must be positive");
    if (!(beta_min >= 0 && beta_max >= beta_min)) throw Error("invalid_config", "need 0 <= beta_min <= beta_max");
    integral_ = beta_min;
    beta_ = beta_min;
}

double BetaController::proportional(double kl) const {
    const double e = std::clamp(kl - set_point_, -50.0, 50.0);
    return kp_ * (1.0 / (1.0 + std::exp(-e)) - 0.5);
}

double BetaController::update(double kl) {
    const double e = set_point_ - kl;
    integral_ = std::clamp(integral_ - ki_ * e, beta_min_, beta_max_);
    beta_ = std::clamp(proportional(kl) + integral_, beta_min_, beta_max_);
    return beta_;
}

double alpha(double q, double y_hat, double base) { return base * (1.0 - std::abs(q - y_hat)); }

Tensor mse_per_sample(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape() || a.ndim() != 3)
        throw Error("shape_mismatch", "mse needs two (B, C, L) tensors, got " + shape_str(a.shape()) + " and " +
                                          shape_str(b.shape()));
    Tensor d = ops::sub(a, b);
    return ops::mean(ops::mean(ops::mul(d, d), 2), 1);
}

QlstLoss qlst_loss(const std::vector<float>& q, const Tensor& y_lst, const Tensor& x_hat, const Tensor& x_lst,
                   const std::vector<float>& y_hat, double alpha_base) {
    const int64_t b = int64_t(q.size());
    if (y_lst.shape() != Shape{b} || int64_t(y_hat.size()) != b)
        throw Error("shape_mismatch", "qlst loss needs q, y_lst and y_hat of equal length");
    Tensor qt(Shape{b}, q), one_minus_q(Shape{b}), a(Shape{b});
    for (int64_t i = 0; i < b; ++i) {
        one_minus_q.data()[i] = 1.0f - q[i];
        a.data()[i] = float(alpha(q[i], y_hat[i], alpha_base));
    }
    Tensor y = ops::clamp(y_lst, 1e-7f, 1.0f - 1e-7f);
    Tensor ll = ops::add(ops::mul(qt, ops::log(y)),
                         ops::mul(one_minus_q, ops::log(ops::add_scalar(ops::scale(y, -1.0f), 1.0f))));
    QlstLoss out;
    out.bce = ops::scale(ops::mean(ll), -1.0f);
    out.mse = ops::mean(ops::mul(a, mse_per_sample(x_hat, x_lst)));
    out.total = ops::add(out.bce, out.mse);
    return out;
}

std::string Metrics::csv() const {
    std::ostringstream os;
    for (size_t i = 0; i < columns.size(); ++i) os << (i ? "," : "") << columns[i];
    os << "\n";
    char buf[32];
    for (const auto& r : rows) {
        for (size_t i = 0; i < r.size(); ++i) {
            std::snprintf(buf, sizeof buf, "%.9g", r[i]);
            os << (i ? "," : "") << buf;
        }
        os << "\n";
    }
    return os.str();
}

double Metrics::last(const std::string& column) const {
    auto it = std::find(columns.begin(), columns.end(), column);
    if (it == columns.end() || rows.empty()) throw Error("invalid_argument", "no metric '" + column + "'");
    return rows.back()[size_t(it - columns.begin())];
}

void log_to_stderr(const std::string& line) { std::cerr << line << std::endl; }

namespace {

std::vector<size_t> require_split(const data::Dataset& ds, Split s) {
    auto idx = ds.indices(s);
    if (idx.empty()) throw Error("empty_split", "the " + data::split_name(s) + " split is empty");
    return idx;
}

Tensor batch_of(const data::Dataset& ds, const size_t* idx, size_t n) {
    std::vector<const Signal*> xs(n);
    for (size_t i = 0; i < n; ++i) xs[i] = &ds.records[idx[i]].signal;
    return models::signal_batch(xs);
}

void check_loss(const Tensor& loss, const std::string& stage, int epoch) {
    if (!std::isfinite(loss.item()))
        throw Error("divergence", stage + " loss became non-finite in epoch " + std::to_string(epoch));
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

constexpr size_t kEvalChunk = 200;

}  // namespace

std::array<double, kNumLabels> evaluate_auroc(const Classifier& clf, const data::Dataset& ds, Split split) {
    auto idx = require_split(ds, split);
    std::array<std::vector<float>, kNumLabels> scores;
    std::array<std::vector<bool>, kNumLabels> labels;
    for (size_t s = 0; s < idx.size(); s += kEvalChunk) {
        const size_t n = std::min(kEvalChunk, idx.size() - s);
        Tensor p = clf.probs(batch_of(ds, idx.data() + s, n));
        for (size_t i = 0; i < n; ++i)
            for (int c = 0; c < kNumLabels; ++c) {
                scores[c].push_back(p.data()[i * kNumLabels + c]);
                labels[c].push_back(ds.records[idx[s + i]].labels[c]);
            }
    }
    std::array<double, kNumLabels> out{};
    for (int c = 0; c < kNumLabels; ++c) out[c] = auroc(scores[c], labels[c]);
    return out;
}

VaeEval evaluate_vae(const Vae& vae, const data::Dataset& ds, Split split) {
    auto idx = require_split(ds, split);
    double kl = 0, err = 0, ref = 0, ratio = 0;
    for (size_t s = 0; s < idx.size(); s += kEvalChunk) {
        const size_t n = std::min(kEvalChunk, idx.size() - s);
        Tensor x = batch_of(ds, idx.data() + s, n);
        auto post = vae.encode(x);
        Tensor xr = vae.decode(post.mu);
        const int64_t d = vae.latent_dim();
        for (size_t i = 0; i < n; ++i) {
            for (int64_t k = 0; k < d; ++k) {
                const double mu = post.mu.data()[i * d + k], lv = post.logvar.data()[i * d + k];
                kl += 0.5 * (mu * mu + std::exp(lv) - 1.0 - lv);
            }
            double e = 0, r = 0;
            for (int j = 0; j < kSignalSize; ++j) {
                const double a = x.data()[i * kSignalSize + j], b = xr.data()[i * kSignalSize + j];
                e += (a - b) * (a - b);
                r += a * a;
            }
            err += e;
            ref += r;
            ratio += r > 0 ? std::sqrt(e / r) : 0.0;
        }
    }
    const double n = double(idx.size());
    return {kl / n, std::sqrt(err / ref), ratio / n};
}

ClassifierRun train_classifier(const StageConfig& c, const data::Dataset& ds, const Logger& log) {
    validate(c);
    if (c.stage != Stage::Classifier) throw Error("invalid_config", "train_classifier needs a classifier config");
    auto train = require_split(ds, Split::Train);
    require_split(ds, Split::Val);
    ClassifierRun run{Classifier(models::parse_arch(c.arch), c.seed), {}};
    run.metrics.columns = {"epoch", "loss"};
    for (const auto& n : label_names()) run.metrics.columns.push_back("val_auroc_" + n);

    auto w = class_weights(ds.label_frequency(Split::Train));
    Tensor wt(Shape{kNumLabels}, std::vector<float>(w.begin(), w.end()));
    const float hi = float(1.0 - c.label_smoothing / 2), lo = float(c.label_smoothing / 2);
    Adam opt(run.model.params(), {c.lr});
    const auto t0 = std::chrono::steady_clock::now();

    for (int epoch = 1; epoch <= c.epochs; ++epoch) {
        auto order = train;
        Rng::stream(c.seed, "shuffle", uint64_t(epoch)).shuffle(order);
        double loss_sum = 0;
        int64_t batches = 0;
        for (size_t s = 0; s < order.size(); s += size_t(c.batch_size)) {
            const size_t n = std::min(size_t(c.batch_size), order.size() - s);
            Tensor x = batch_of(ds, order.data() + s, n);
            Tensor y({int64_t(n), kNumLabels});
            for (size_t i = 0; i < n; ++i)
                for (int k = 0; k < kNumLabels; ++k)
                    y.data()[i * kNumLabels + k] = ds.records[order[s + i]].labels[k] ? hi : lo;
            Tape<float> tape;
            TapeScope<float> scope(tape);
            Tensor loss = ops::bce_with_logits(run.model.logits(x), y, wt);
            check_loss(loss, "classifier", epoch);
            backward(tape, loss);
            opt.step();
            opt.zero_grad();
            loss_sum += loss.item();
            ++batches;
        }
        auto au = evaluate_auroc(run.model, ds, Split::Val);
        std::vector<double> row{double(epoch), loss_sum / double(batches)};
        row.insert(row.end(), au.begin(), au.end());
        run.metrics.rows.push_back(row);
        std::ostringstream os;
        os << "classifier epoch " << epoch << "/" << c.epochs << " loss " << row[1] << " min val auroc "
           << *std::min_element(au.begin(), au.end()) << " (" << int(seconds_since(t0)) << " s)";
        log(os.str());
    }
    return run;
}

VaeRun train_vae(const StageConfig& c, const data::Dataset& ds, const Logger& log) {
    validate(c);
    if (c.stage != Stage::Vae) throw Error("invalid_config", "train_vae needs a vae config");
    auto train = require_split(ds, Split::Train);
    require_split(ds, Split::Val);
    VaeRun run{Vae(c.seed, c.latent_dim), {}};
    run.metrics.columns = {"epoch", "loss", "mse", "kl", "beta", "val_rel_rmse"};

    auto w = class_weights(ds.label_frequency(Split::Train));
    BetaController ctl(c.kl_target, c.kp, c.ki, c.beta_min, c.beta_max);
    Adam opt(run.model.params(), {c.lr});
    Rng eps_rng = Rng::stream(c.seed, "reparam");
    const int64_t d = c.latent_dim;
    const auto t0 = std::chrono::steady_clock::now();

    for (int epoch = 1; epoch <= c.epochs; ++epoch) {
        auto order = train;
        Rng::stream(c.seed, "shuffle", uint64_t(epoch)).shuffle(order);
        double loss_sum = 0, mse_sum = 0, kl_sum = 0;
        int64_t batches = 0;
        for (size_t s = 0; s < order.size(); s += size_t(c.batch_size)) {
            const size_t n = std::min(size_t(c.batch_size), order.size() - s);
            const int64_t b = int64_t(n);
            Tensor x = batch_of(ds, order.data() + s, n);
            Tensor sw(Shape{b});
            double sw_sum = 0;
            for (size_t i = 0; i < n; ++i) {
                sw.data()[i] = sample_weight(ds.records[order[s + i]].labels, w);
                sw_sum += sw.data()[i];
            }
            Tensor eps({b, d});
            for (auto& v : eps.values()) v = float(eps_rng.normal());

            Tape<float> tape;
            TapeScope<float> scope(tape);
            auto post = run.model.encode(x);
            Tensor xr = run.model.decode(Vae::reparameterize(post, eps));
            Tensor mse = ops::scale(ops::sum(ops::mul(mse_per_sample(xr, x), sw)), float(1.0 / sw_sum));
            Tensor kl_terms = ops::add_scalar(
                ops::sub(ops::add(ops::mul(post.mu, post.mu), ops::exp(post.logvar)), post.logvar), -1.0f);
            Tensor kl = ops::scale(ops::sum(kl_terms), float(0.5 / double(b)));
            Tensor loss = ops::add(mse, ops::scale(kl, float(ctl.beta())));
            check_loss(loss, "vae", epoch);
            backward(tape, loss);
            opt.step();
            opt.zero_grad();
            ctl.update(kl.item());
            loss_sum += loss.item();
            mse_sum += mse.item();
            kl_sum += kl.item();
            ++batches;
        }
        auto ev = evaluate_vae(run.model, ds, Split::Val);
        const double nb = double(batches);
        run.metrics.rows.push_back(
            {double(epoch), loss_sum / nb, mse_sum / nb, kl_sum / nb, ctl.beta(), ev.rel_rmse});
        std::ostringstream os;
        os << "vae epoch " << epoch << "/" << c.epochs << " mse " << mse_sum / nb << " kl " << kl_sum / nb
           << " beta " << ctl.beta() << " val rel rmse " << ev.rel_rmse << " (" << int(seconds_since(t0)) << " s)";
        log(os.str());
    }
    return run;
}

namespace {

void assert_frozen(const models::Model& m) {
    for (const auto& [name, t] : m.params())
        if (t.requires_grad() || t.has_grad())
            throw Error("unfrozen_dependency", "frozen " + m.kind() + " parameter '" + name +
                                                   "' is trainable or received a gradient");
}

// Mean classifier probability for `class_id` after traversing every probe
// latent with each query of `grid`.
double probe_calibration_mae(const QlstModel& m, const Vae& vae, const Classifier& clf, const Tensor& z,
                             int class_id) {
    const std::vector<float> grid{0.0f, 0.2f, 0.4f, 0.6f, 0.8f, 1.0f};
    const int64_t b = z.dim(0);
    double mae = 0;
    for (float q : grid) {
        Tensor dz = m.forward(z, std::vector<float>(size_t(b), q), false, nullptr);
        Tensor p = clf.probs(vae.decode(ops::add(z, dz)));
        double mean = 0;
        for (int64_t i = 0; i < b; ++i) mean += p.data()[i * kNumLabels + class_id];
        mae += std::abs(mean / double(b) - q);
    }
    return mae / double(grid.size());
}

}  // namespace

QlstRun train_qlst(const StageConfig& c, const data::Dataset& ds, const Classifier& clf, const Vae& vae,
                   const Logger& log) {
    validate(c);
    if (c.stage != Stage::Qlst) throw Error("invalid_config", "train_qlst needs a qlst config");
    clf.freeze();
    vae.freeze();
    auto train = require_split(ds, Split::Train);
    auto val = require_split(ds, Split::Val);
    const int cls = c.class_id;
    const int64_t d = vae.latent_dim();

    // Frozen-model quantities per training sample: posterior mean, its
    // reconstruction and the classifier's probability on the original signal.
    // The pool is extended with shrunk latents s * z (s ~ U(0, 1)), which have
    // no source signal; their y_hat is the classifier on their decoding.
    const size_t nt = train.size();
    const size_t ns = size_t(std::llround(c.shrunk_fraction * double(nt)));
    const size_t np = nt + ns;
    std::vector<float> z_all(np * size_t(d)), xhat_all(np * kSignalSize), yhat_all(np);
    for (size_t s = 0; s < nt; s += kEvalChunk) {
        const size_t n = std::min(kEvalChunk, nt - s);
        Tensor x = batch_of(ds, train.data() + s, n);
        Tensor mu = vae.encode(x).mu;
        Tensor xh = vae.decode(mu);
        Tensor p = clf.probs(x);
        std::copy(mu.values().begin(), mu.values().end(), z_all.begin() + std::ptrdiff_t(s * size_t(d)));
        std::copy(xh.values().begin(), xh.values().end(), xhat_all.begin() + std::ptrdiff_t(s * kSignalSize));
        for (size_t i = 0; i < n; ++i) yhat_all[s + i] = p.data()[i * kNumLabels + cls];
    }
    Rng shrink_rng = Rng::stream(c.seed, "shrink");
    for (size_t s = nt; s < np; s += kEvalChunk) {
        const size_t n = std::min(kEvalChunk, np - s);
        Tensor z({int64_t(n), d});
        for (size_t i = 0; i < n; ++i) {
            const size_t src = size_t(shrink_rng.below(nt));
            const float scale = float(shrink_rng.uniform());
            for (int64_t k = 0; k < d; ++k) z.data()[i * size_t(d) + size_t(k)] = scale * z_all[src * size_t(d) + size_t(k)];
        }
        Tensor xh = vae.decode(z);
        Tensor p = clf.probs(xh);
        std::copy(z.values().begin(), z.values().end(), z_all.begin() + std::ptrdiff_t(s * size_t(d)));
        std::copy(xh.values().begin(), xh.values().end(), xhat_all.begin() + std::ptrdiff_t(s * kSignalSize));
        for (size_t i = 0; i < n; ++i) yhat_all[s + i] = p.data()[i * kNumLabels + cls];
    }
    const size_t nv = std::min(val.size(), size_t(c.val_samples));
    Tensor z_val;
    if (nv > 0) z_val = vae.encode(batch_of(ds, val.data(), nv)).mu;

    models::QlstConfig qc;
    qc.latent_dim = d;
    qc.class_id = cls;
    QlstRun run{QlstModel(qc, c.seed), {}};
    run.metrics.columns = {"epoch", "loss", "bce", "mse", "lr", "val_calib_mae"};
    Adam opt(run.model.params(), {c.lr});
    Rng query_rng = Rng::stream(c.seed, "query");
    Rng drop_rng = Rng::stream(c.seed, "dropout");
    const int64_t steps_per_epoch = int64_t((np + size_t(c.batch_size) - 1) / size_t(c.batch_size));
    const int64_t total_steps = steps_per_epoch * c.epochs;
    int64_t step = 0;
    const auto t0 = std::chrono::steady_clock::now();

    std::vector<size_t> order(np);
    for (int epoch = 1; epoch <= c.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        Rng::stream(c.seed, "shuffle", uint64_t(epoch)).shuffle(order);
        double loss_sum = 0, bce_sum = 0, mse_sum = 0, lr = c.lr;
        for (size_t s = 0; s < np; s += size_t(c.batch_size)) {
            const size_t n = std::min(size_t(c.batch_size), np - s);
            const int64_t b = int64_t(n);
            Tensor z({b, d}), xhat({b, kLeads, kSamples});
            std::vector<float> q(n), yhat(n);
            for (size_t i = 0; i < n; ++i) {
                const size_t k = order[s + i];
                std::copy_n(z_all.begin() + std::ptrdiff_t(k * size_t(d)), d, z.data() + i * size_t(d));
                std::copy_n(xhat_all.begin() + std::ptrdiff_t(k * kSignalSize), kSignalSize,
                            xhat.data() + i * kSignalSize);
                yhat[i] = yhat_all[k];
                q[i] = float(query_rng.uniform());
            }
            lr = c.cosine_lr ? c.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * double(step) / double(total_steps))) : c.lr;
            opt.set_lr(lr);

            Tape<float> tape;
            TapeScope<float> scope(tape);
            Tensor dz = run.model.forward(z, q, true, &drop_rng);
            Tensor x_lst = vae.decode(ops::add(z, dz));
            Tensor y_lst = ops::reshape(ops::slice(clf.probs(x_lst), 1, cls, cls + 1), {b});
            QlstLoss loss = qlst_loss(q, y_lst, xhat, x_lst, yhat, c.alpha_base);
            check_loss(loss.total, "qlst", epoch);
            backward(tape, loss.total);
            assert_frozen(clf);
            assert_frozen(vae);
            opt.step();
            opt.zero_grad();
            loss_sum += loss.total.item() * double(n);
            bce_sum += loss.bce.item() * double(n);
            mse_sum += loss.mse.item() * double(n);
            ++step;
        }
        const double mae = nv > 0 ? probe_calibration_mae(run.model, vae, clf, z_val, cls) : NAN;
        const double dn = double(np);
        run.metrics.rows.push_back({double(epoch), loss_sum / dn, bce_sum / dn, mse_sum / dn, lr, mae});
        std::ostringstream os;
        os << "qlst[" << label_names()[cls] << "] epoch " << epoch << "/" << c.epochs << " bce " << bce_sum / dn
           << " mse " << mse_sum / dn << " val calib mae " << mae << " (" << int(seconds_since(t0)) << " s)";
        log(os.str());
    }
    return run;
}

}  // namespace qlst::train
