#include "qlst/explain.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <sstream>

namespace qlst::explain {

using namespace ecg;
using models::Classifier;
using models::QlstModel;
using models::Vae;

std::vector<float> default_grid() { return {0.0f, 0.2f, 0.4f, 0.6f, 0.8f, 1.0f}; }

void validate_grid(const std::vector<float>& grid) {
    if (grid.empty()) throw Error("invalid_grid", "query grid is empty");
    for (size_t i = 0; i < grid.size(); ++i) {
        if (!(grid[i] >= 0.0f && grid[i] <= 1.0f))
            throw Error("invalid_grid", "query " + std::to_string(grid[i]) + " is outside [0, 1]");
        if (i > 0 && !(grid[i] > grid[i - 1]))
            throw Error("invalid_grid", "query grid must be strictly increasing");
    }
}

std::vector<float> parse_grid(const std::string& csv) {
    std::vector<float> g;
    std::stringstream ss(csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        float v = 0;
        auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
        if (res.ec != std::errc() || res.ptr != tok.data() + tok.size())
            throw Error("invalid_grid", "cannot parse query '" + tok + "'");
        g.push_back(v);
    }
    validate_grid(g);
    return g;
}

Bundle traverse(const Pipeline& p, const std::vector<float>& z0, const std::vector<float>& grid,
                const Origin& origin, std::optional<uint64_t> mc_dropout_seed) {
    validate_grid(grid);
    const int64_t d = p.vae.latent_dim();
    if (p.qlst.config().latent_dim != d)
        throw Error("shape_mismatch", "qlst latent_dim " + std::to_string(p.qlst.config().latent_dim) +
                                          " does not match the VAE's " + std::to_string(d));
    Tensor z = models::latent_tensor(z0, d);
    Bundle b;
    b.origin = origin;
    b.class_id = p.qlst.config().class_id;
    b.grid = grid;
    b.z0 = z0;
    for (size_t i = 0; i < grid.size(); ++i) {
        Tensor dz;
        if (mc_dropout_seed) {
            Rng rng = Rng::stream(*mc_dropout_seed, "mc_dropout", i);
            dz = p.qlst.forward(z, {grid[i]}, true, &rng);
        } else {
            dz = p.qlst.forward(z, {grid[i]}, false, nullptr);
        }
        Record r;
        r.q = grid[i];
        r.delta_z = dz.values();
        r.signal = p.vae.decode(ops::add(z, dz)).values();
        r.probs = models::classify(p.clf, r.signal);
        r.morphology = measure_morphology(r.signal);
        b.records.push_back(std::move(r));
    }
    return b;
}

Bundle explain_global(const Pipeline& p, const std::vector<float>& grid, std::optional<uint64_t> mc_dropout_seed) {
    return traverse(p, std::vector<float>(size_t(p.vae.latent_dim()), 0.0f), grid, {}, mc_dropout_seed);
}

Direction parse_direction(const std::string& s) {
    if (s == "both") return Direction::Both;
    if (s == "increase") return Direction::Increase;
    if (s == "decrease") return Direction::Decrease;
    throw Error("invalid_argument", "direction must be increase, decrease or both, got '" + s + "'");
}

Bundle explain_local(const Pipeline& p, const Signal& x, int class_id, Direction dir, const std::vector<float>& grid,
                     const std::string& sample_id) {
    validate_grid(grid);
    if (p.qlst.config().class_id != class_id)
        throw Error("missing_model", "no qLST model for class " + label_names().at(size_t(class_id)) +
                                         " (loaded model explains " + label_names()[p.qlst.config().class_id] + ")");
    auto z0 = models::encode(p.vae, x);
    std::vector<float> g = grid;
    if (dir != Direction::Both) {
        const float yhat = models::classify(p.clf, x)[size_t(class_id)];
        g.clear();
        if (dir == Direction::Decrease)
            for (float q : grid)
                if (q < yhat) g.push_back(q);
        g.push_back(yhat);
        if (dir == Direction::Increase)
            for (float q : grid)
                if (q > yhat) g.push_back(q);
    }
    return traverse(p, z0, g, {Origin::Kind::LocalSample, sample_id});
}

// ---- bundle IO -----------------------------------------------------------

namespace {

std::string origin_kind(Origin::Kind k) {
    switch (k) {
        case Origin::Kind::GlobalZero: return "global_zero";
        case Origin::Kind::LocalSample: return "local_sample";
        case Origin::Kind::Latent: return "latent";
    }
    return "";
}

Origin::Kind parse_origin_kind(const std::string& s) {
    if (s == "global_zero") return Origin::Kind::GlobalZero;
    if (s == "local_sample") return Origin::Kind::LocalSample;
    if (s == "latent") return Origin::Kind::Latent;
    throw Error("invalid_json", "unknown origin kind '" + s + "'");
}

double number_or_nan(const json& j, const char* key) {
    const auto& v = j.at(key);
    return v.is_null() ? NAN : v.get<double>();
}

Morphology morphology_from_json(const json& j) {
    Morphology m;
    m.measurable = j.at("measurable").get<bool>();
    if (!m.measurable) return m;
    m.pr_ms = number_or_nan(j, "pr_ms");
    m.qrs_ms = number_or_nan(j, "qrs_ms");
    m.qt_ms = number_or_nan(j, "qt_ms");
    m.rr_ms = number_or_nan(j, "rr_ms");
    m.p_amp_mv = number_or_nan(j, "p_amp_mv");
    m.r_amp_mv = number_or_nan(j, "r_amp_mv");
    m.s_amp_mv = number_or_nan(j, "s_amp_mv");
    m.t_amp_mv = number_or_nan(j, "t_amp_mv");
    m.p_present = j.at("p_present").get<bool>();
    return m;
}

void append_float(std::string& out, float v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    out.append(buf, res.ptr);
}

}  // namespace

json bundle_to_json(const Bundle& b) {
    json origin = {{"kind", origin_kind(b.origin.kind)}};
    if (b.origin.kind == Origin::Kind::LocalSample) origin["id"] = b.origin.id;
    json records = json::array();
    for (const auto& r : b.records) {
        json probs = json::object();
        for (int c = 0; c < kNumLabels; ++c) probs[label_names()[c]] = compact_float(r.probs[c]);
        records.push_back({{"q", compact_float(r.q)},
                           {"delta_z", float_array(r.delta_z)},
                           {"signal", float_array(r.signal)},
                           {"probs", probs},
                           {"morphology", data::morphology_to_json(r.morphology)}});
    }
    return {{"origin", origin},
            {"class", label_names().at(size_t(b.class_id))},
            {"class_id", b.class_id},
            {"grid", float_array(b.grid)},
            {"z0", float_array(b.z0)},
            {"records", records}};
}

Bundle bundle_from_json(const json& j) {
    try {
        Bundle b;
        b.origin.kind = parse_origin_kind(j.at("origin").at("kind").get<std::string>());
        if (j["origin"].contains("id")) b.origin.id = j["origin"]["id"].get<std::string>();
        b.class_id = label_index(j.at("class").get<std::string>());
        b.grid = read_float_array(j.at("grid"), "grid");
        b.z0 = read_float_array(j.at("z0"), "z0");
        validate_grid(b.grid);
        for (const auto& rj : j.at("records")) {
            Record r;
            r.q = float(rj.at("q").get<double>());
            r.delta_z = read_float_array(rj.at("delta_z"), "delta_z");
            r.signal = read_float_array(rj.at("signal"), "signal");
            validate_signal(r.signal);
            for (int c = 0; c < kNumLabels; ++c) r.probs[c] = float(rj.at("probs").at(label_names()[c]).get<double>());
            r.morphology = morphology_from_json(rj.at("morphology"));
            b.records.push_back(std::move(r));
        }
        if (b.records.size() != b.grid.size())
            throw Error("invalid_json", "bundle needs one record per grid value");
        return b;
    } catch (const json::exception& e) {
        throw Error("invalid_json", std::string("malformed bundle: ") + e.what());
    }
}

std::string bundle_to_csv(const Bundle& b) {
    std::string out = "q,lead,index,value\n";
    out.reserve(b.records.size() * kSignalSize * 24);
    for (const auto& r : b.records)
        for (int l = 0; l < kLeads; ++l)
            for (int t = 0; t < kSamples; ++t) {
                append_float(out, r.q);
                out += ',';
                out += lead_names()[l];
                out += ',';
                out += std::to_string(t);
                out += ',';
                append_float(out, r.signal[size_t(l * kSamples + t)]);
                out += '\n';
            }
    return out;
}

void export_bundle(const Bundle& b, const std::string& path) {
    if (b.records.empty()) throw Error("invalid_argument", "refusing to export an empty bundle");
    auto ends_with = [&](const std::string& s) {
        return path.size() >= s.size() && path.compare(path.size() - s.size(), s.size(), s) == 0;
    };
    if (ends_with(".json")) write_text_file(path, bundle_to_json(b).dump() + "\n");
    else if (ends_with(".csv")) write_text_file(path, bundle_to_csv(b));
    else throw Error("invalid_argument", "bundle path must end in .json or .csv: " + path);
}

// ---- calibration -----------------------------------------------------------

Summary summarize(std::vector<double> v) {
    if (v.empty()) throw Error("empty_split", "cannot summarize zero samples");
    std::sort(v.begin(), v.end());
    auto quantile = [&](double p) {
        const double pos = p * double(v.size() - 1);
        const size_t lo = size_t(std::floor(pos));
        const size_t hi = std::min(lo + 1, v.size() - 1);
        return v[lo] + (pos - double(lo)) * (v[hi] - v[lo]);
    };
    Summary s;
    s.n = int64_t(v.size());
    s.min = v.front();
    s.max = v.back();
    s.q1 = quantile(0.25);
    s.median = quantile(0.5);
    s.q3 = quantile(0.75);
    s.mean = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
    return s;
}

std::string CalibrationReport::csv() const {
    std::ostringstream os;
    os << "class,q,n,min,q1,median,q3,max,mean\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%.9g,%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n",
                      label_names()[r.class_id].c_str(), double(r.q), (long long)r.probs.n, r.probs.min,
                      r.probs.q1, r.probs.median, r.probs.q3, r.probs.max, r.probs.mean);
        os << buf;
    }
    return os.str();
}

std::vector<double> CalibrationReport::means(int class_id) const {
    std::vector<double> m;
    for (const auto& r : rows)
        if (r.class_id == class_id) m.push_back(r.probs.mean);
    return m;
}

double CalibrationReport::mean_abs_error(int class_id) const {
    double s = 0;
    int n = 0;
    for (const auto& r : rows)
        if (r.class_id == class_id) {
            s += std::abs(r.probs.mean - double(r.q));
            ++n;
        }
    if (n == 0) throw Error("invalid_argument", "no calibration rows for class " + label_names()[class_id]);
    return s / n;
}

bool CalibrationReport::nondecreasing(int class_id) const {
    auto m = means(class_id);
    return std::is_sorted(m.begin(), m.end());
}

namespace {

constexpr size_t kChunk = 200;

std::vector<size_t> split_indices(const data::Dataset& ds, data::Split split, size_t max_samples) {
    auto idx = ds.indices(split);
    if (idx.empty()) throw Error("empty_split", "the " + data::split_name(split) + " split is empty");
    if (max_samples > 0 && idx.size() > max_samples) idx.resize(max_samples);
    return idx;
}

Tensor chunk_batch(const data::Dataset& ds, const std::vector<size_t>& idx, size_t s, size_t n) {
    std::vector<const Signal*> xs(n);
    for (size_t i = 0; i < n; ++i) xs[i] = &ds.records[idx[s + i]].signal;
    return models::signal_batch(xs);
}

}  // namespace

void eval_calibration(const Pipeline& p, const data::Dataset& ds, data::Split split, const std::vector<float>& grid,
                      CalibrationReport& report, size_t max_samples) {
    validate_grid(grid);
    auto idx = split_indices(ds, split, max_samples);
    const int cls = p.qlst.config().class_id;
    std::vector<std::vector<double>> y(grid.size());
    for (size_t s = 0; s < idx.size(); s += kChunk) {
        const size_t n = std::min(kChunk, idx.size() - s);
        Tensor z = p.vae.encode(chunk_batch(ds, idx, s, n)).mu;
        for (size_t g = 0; g < grid.size(); ++g) {
            Tensor dz = p.qlst.forward(z, std::vector<float>(n, grid[g]), false, nullptr);
            Tensor pr = p.clf.probs(p.vae.decode(ops::add(z, dz)));
            for (size_t i = 0; i < n; ++i) y[g].push_back(pr.data()[i * kNumLabels + size_t(cls)]);
        }
    }
    for (size_t g = 0; g < grid.size(); ++g) report.rows.push_back({cls, grid[g], summarize(y[g])});
}

std::vector<double> locality_ratios(const Pipeline& p, const data::Dataset& ds, data::Split split,
                                    size_t max_samples) {
    auto idx = split_indices(ds, split, max_samples);
    const int cls = p.qlst.config().class_id;
    std::vector<double> out;
    for (size_t s = 0; s < idx.size(); s += kChunk) {
        const size_t n = std::min(kChunk, idx.size() - s);
        Tensor x = chunk_batch(ds, idx, s, n);
        Tensor z = p.vae.encode(x).mu;
        Tensor pr = p.clf.probs(x);
        std::vector<float> q(n);
        for (size_t i = 0; i < n; ++i) q[i] = pr.data()[i * kNumLabels + size_t(cls)];
        Tensor xhat = p.vae.decode(z);
        Tensor xlst = p.vae.decode(ops::add(z, p.qlst.forward(z, q, false, nullptr)));
        for (size_t i = 0; i < n; ++i) {
            double e = 0, r = 0;
            for (size_t j = 0; j < size_t(kSignalSize); ++j) {
                const double a = xlst.data()[i * kSignalSize + j], b = xhat.data()[i * kSignalSize + j];
                e += (a - b) * (a - b);
                r += b * b;
            }
            out.push_back(r > 0 ? std::sqrt(e / r) : INFINITY);
        }
    }
    return out;
}

namespace {

std::vector<double> ranks(const std::vector<double>& v) {
    std::vector<size_t> o(v.size());
    std::iota(o.begin(), o.end(), 0);
    std::sort(o.begin(), o.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (size_t i = 0; i < o.size();) {
        size_t j = i;
        while (j < o.size() && v[o[j]] == v[o[i]]) ++j;
        for (size_t k = i; k < j; ++k) r[o[k]] = 0.5 * double(i + j - 1);
        i = j;
    }
    return r;
}

}  // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2) throw Error("invalid_argument", "spearman needs two equal-length series");
    for (size_t i = 0; i < a.size(); ++i)
        if (!std::isfinite(a[i]) || !std::isfinite(b[i])) return NAN;
    auto ra = ranks(a), rb = ranks(b);
    const double n = double(a.size());
    const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
    const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
    double sab = 0, saa = 0, sbb = 0;
    for (size_t i = 0; i < ra.size(); ++i) {
        sab += (ra[i] - ma) * (rb[i] - mb);
        saa += (ra[i] - ma) * (ra[i] - ma);
        sbb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (saa == 0 || sbb == 0) return NAN;
    return sab / std::sqrt(saa * sbb);
}

}  // namespace qlst::explain
