#include "qlst/dataset.hpp"

#include <fstream>

#include "qlst/error.hpp"

namespace qlst::data {

std::string split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "train";
}

Split parse_split(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    throw Error("invalid_json", "unknown split '" + s + "'");
}

Split split_for(int64_t id, int64_t n) {
    const int64_t n_train = n * 8 / 10;
    const int64_t n_val = n / 10;
    if (id < n_train) return Split::Train;
    if (id < n_train + n_val) return Split::Val;
    return Split::Test;
}

std::vector<size_t> Dataset::indices(Split s) const {
    std::vector<size_t> out;
    for (size_t i = 0; i < records.size(); ++i)
        if (records[i].split == s) out.push_back(i);
    return out;
}

std::array<double, ecg::kNumLabels> Dataset::label_frequency(Split s) const {
    std::array<double, ecg::kNumLabels> f{};
    size_t count = 0;
    for (const auto& r : records) {
        if (r.split != s) continue;
        ++count;
        for (int c = 0; c < ecg::kNumLabels; ++c) f[c] += r.labels[c];
    }
    if (count == 0) throw Error("empty_split", "split '" + split_name(s) + "' has no records");
    for (auto& v : f) v /= double(count);
    return f;
}

json params_to_json(const ecg::MorphParams& p) {
    return json{{"rr_ms", p.rr_ms},         {"pr_ms", p.pr_ms},         {"qrs_ms", p.qrs_ms},
                {"qt_ms", p.qt_ms},         {"p_amp_mv", p.p_amp_mv},   {"r_amp_mv", p.r_amp_mv},
                {"s_amp_mv", p.s_amp_mv},   {"t_amp_mv", p.t_amp_mv},   {"p_present", p.p_present},
                {"rsr_present", p.rsr_present}, {"noise_sd_mv", p.noise_sd_mv}};
}

ecg::MorphParams params_from_json(const json& j) {
    try {
        ecg::MorphParams p;
        p.rr_ms = j.at("rr_ms").get<double>();
        p.pr_ms = j.at("pr_ms").get<double>();
        p.qrs_ms = j.at("qrs_ms").get<double>();
        p.qt_ms = j.at("qt_ms").get<double>();
        p.p_amp_mv = j.at("p_amp_mv").get<double>();
        p.r_amp_mv = j.at("r_amp_mv").get<double>();
        p.s_amp_mv = j.at("s_amp_mv").get<double>();
        p.t_amp_mv = j.at("t_amp_mv").get<double>();
        p.p_present = j.at("p_present").get<bool>();
        p.rsr_present = j.at("rsr_present").get<bool>();
        p.noise_sd_mv = j.at("noise_sd_mv").get<double>();
        return p;
    } catch (const json::exception& e) {
        throw Error("invalid_json", std::string("params: ") + e.what());
    }
}

json labels_to_json(const ecg::LabelVector& y) {
    json j = json::object();
    for (int c = 0; c < ecg::kNumLabels; ++c) j[ecg::label_names()[c]] = y[c];
    return j;
}

json morphology_to_json(const ecg::Morphology& m) {
    if (!m.measurable) return json{{"measurable", false}};
    return json{{"measurable", true},
                {"pr_ms", number_or_null(m.pr_ms)},
                {"qrs_ms", number_or_null(m.qrs_ms)},
                {"qt_ms", number_or_null(m.qt_ms)},
                {"rr_ms", number_or_null(m.rr_ms)},
                {"p_amp_mv", number_or_null(m.p_amp_mv)},
                {"r_amp_mv", number_or_null(m.r_amp_mv)},
                {"s_amp_mv", number_or_null(m.s_amp_mv)},
                {"t_amp_mv", number_or_null(m.t_amp_mv)},
                {"p_present", m.p_present}};
}

std::string sidecar_path(const std::string& dataset_path) { return dataset_path + ".manifest.json"; }

Record make_record(int64_t id, int64_t n, uint64_t seed, const ecg::BalanceSpec& balance) {
    Record r;
    r.id = id;
    r.split = split_for(id, n);
    Rng rng = Rng::stream(seed, "params", uint64_t(id));
    r.params = ecg::sample_params(rng, balance);
    r.signal = ecg::generate(r.params, splitmix64(seed) ^ uint64_t(id));
    r.labels = ecg::derive_labels(r.params);
    return r;
}

namespace {

json generator_description(const ecg::BalanceSpec& b) {
    json gains = json::array();
    for (const auto& row : ecg::lead_gains()) gains.push_back(row);
    json prevalence = json::object();
    for (int c = 0; c < ecg::kNumLabels; ++c) prevalence[ecg::label_names()[c]] = b.prevalence[c];
    return json{
        {"sample_rate_hz", ecg::kSampleRateHz},
        {"leads", ecg::lead_names()},
        {"samples", ecg::kSamples},
        {"waves", {"P", "Q", "R", "S", "T", "R'"}},
        {"lead_gains", gains},
        {"target_prevalence", prevalence},
        {"ranges",
         {{"rr_ms", {{"tachy", {420, 600}}, {"normal", {600, 1000}}, {"brady", {1000, 1300}}}},
          {"pr_ms", {{"normal", {120, 200}}, {"av1", {200, 290}}}},
          {"qrs_ms", {{"narrow", {70, 120}}, {"wide", {120, 170}}}},
          {"qt_ms", {{"normal", {"qrs_ms + 160", 460}}, {"long", {460, 530}}}},
          {"r_amp_mv", {{"normal", {0.5, 2.0}}, {"low", {0.25, 0.5}}}},
          {"p_amp_mv", {0.15, 0.3}},
          {"s_amp_mv", "-(0.15 + U(0.2, 0.5) * r_amp_mv)"},
          {"t_amp_mv", {0.15, 0.6}},
          {"noise_sd_mv", {b.noise_min_mv, b.noise_max_mv}},
          {"rsr_in_narrow_qrs", 0.1},
          {"constraints", "pr_ms + qt_ms + 30 < rr_ms and qt_ms > qrs_ms + 160"}}},
        {"label_thresholds",
         {{"LBBB", "qrs_ms > 120 and not rsr_present"},
          {"RBBB", "qrs_ms > 120 and rsr_present"},
          {"SB", "rr_ms > 1000"},
          {"ST", "rr_ms < 600"},
          {"AF", "not p_present"},
          {"AV1", "pr_ms > 200"},
          {"LQV", "r_amp_mv < 0.5"},
          {"LQT", "qt_ms > 460"}}}};
}

}  // namespace

void build_dataset(const std::string& path, int64_t n, uint64_t seed, const ecg::BalanceSpec& balance) {
    if (n <= 0) throw Error("invalid_argument", "dataset size must be positive");
    ecg::validate(balance);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("io_error", "cannot write " + path);

    std::array<std::array<int64_t, ecg::kNumLabels>, 4> pos{};  // all, train, val, test
    std::array<int64_t, 4> count{};
    for (int64_t i = 0; i < n; ++i) {
        Record r = make_record(i, n, seed, balance);
        json line = {{"id", r.id},
                     {"split", split_name(r.split)},
                     {"signal", float_array(r.signal)},
                     {"params", params_to_json(r.params)},
                     {"labels", labels_to_json(r.labels)}};
        out << line.dump() << '\n';
        const int s = 1 + int(r.split);
        count[0]++;
        count[s]++;
        for (int c = 0; c < ecg::kNumLabels; ++c) {
            pos[0][c] += r.labels[c];
            pos[s][c] += r.labels[c];
        }
    }
    out.close();
    if (!out) throw Error("io_error", "write failed for " + path);

    json freq = json::object();
    const char* names[4] = {"all", "train", "val", "test"};
    for (int s = 0; s < 4; ++s) {
        json f = json::object();
        for (int c = 0; c < ecg::kNumLabels; ++c)
            f[ecg::label_names()[c]] = {{"count", pos[s][c]},
                                        {"frequency", count[s] ? double(pos[s][c]) / double(count[s]) : 0.0}};
        freq[names[s]] = {{"n", count[s]}, {"labels", f}};
    }
    json manifest = {{"format", "qlst-dataset/1"},
                     {"n", n},
                     {"seed", seed},
                     {"splits", {{"train", count[1]}, {"val", count[2]}, {"test", count[3]}}},
                     {"generator", generator_description(balance)},
                     {"label_frequency", freq}};
    write_text_file(sidecar_path(path), manifest.dump(2) + "\n");
}

Dataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("io_error", "cannot open dataset " + path);
    Dataset ds;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            json j = json::parse(line);
            Record r;
            r.id = j.at("id").get<int64_t>();
            r.split = parse_split(j.at("split").get<std::string>());
            r.signal = read_float_array(j.at("signal"), "signal");
            ecg::validate_signal(r.signal);
            r.params = params_from_json(j.at("params"));
            const auto& lj = j.at("labels");
            for (int c = 0; c < ecg::kNumLabels; ++c) r.labels[c] = lj.at(ecg::label_names()[c]).get<bool>();
            ds.records.push_back(std::move(r));
        } catch (const json::exception& e) {
            throw Error("invalid_json", path + ":" + std::to_string(lineno) + ": " + e.what());
        } catch (const Error& e) {
            throw Error(e.code(), path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    std::ifstream side(sidecar_path(path));
    if (side) ds.manifest = read_json_file(sidecar_path(path));
    return ds;
}

}  // namespace qlst::data
