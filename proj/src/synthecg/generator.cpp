#include <Eigen/Dense>
#include <cmath>

#include "qlst/ecg.hpp"
#include "qlst/error.hpp"

namespace qlst::ecg {

namespace {

// Number of standard deviations at which a Gaussian falls to 10% of its peak;
// wave onsets and ends are defined by that crossing.
const double kTenPercentSigmas = std::sqrt(2.0 * std::log(10.0));
constexpr double kBeatOnsetMs = 40.0;
constexpr double kPDurationMs = 100.0;

// QRS shape in normalized time before it is stretched to qrs_ms:
// centers and widths of Q, R, S and the optional R'.
constexpr double kQrsCenter[4] = {0.18, 0.42, 0.68, 0.85};
constexpr double kQrsWidth[4] = {0.07, 0.10, 0.09, 0.07};
constexpr double kQDepthOfR = 0.15;
constexpr double kRPrimeOfR = 0.8;

double gauss(double t, double c, double s) {
    const double u = (t - c) / s;
    return std::exp(-0.5 * u * u);
}

struct QrsLayout {
    double amp[3];  // Q, R, S bump amplitudes
    double ua, ub;  // normalized times where |lead II| crosses 10% of R
};

double qrs_composite(const double amp[3], double u) {
    double y = 0;
    for (int j = 0; j < 3; ++j) y += amp[j] * gauss(u, kQrsCenter[j], kQrsWidth[j]);
    return y;
}

// Bump amplitudes are solved so that lead II hits exactly -0.15 r, r and s at
// the Q, R and S centers despite the overlapping tails.
QrsLayout qrs_layout(double r, double s) {
    Eigen::Matrix3d A;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) A(i, j) = gauss(kQrsCenter[i], kQrsCenter[j], kQrsWidth[j]);
    Eigen::Vector3d tgt(-kQDepthOfR * r, r, s);
    Eigen::Vector3d a = A.fullPivLu().solve(tgt);
    QrsLayout out{{a(0), a(1), a(2)}, 0, 0};

    const double thr = 0.1 * std::abs(r);
    auto above = [&](double u) { return std::abs(qrs_composite(out.amp, u)) >= thr; };
    const double step = 1e-3;
    double first = NAN, last = NAN;
    for (double u = -1.0; u <= 2.0; u += step) {
        if (above(u)) {
            if (std::isnan(first)) first = u;
            last = u;
        }
    }
    if (std::isnan(first)) throw Error("invalid_params", "QRS amplitudes produce no complex");
    auto refine = [&](double out_u, double in_u) {
        for (int it = 0; it < 60; ++it) {
            double mid = 0.5 * (out_u + in_u);
            (above(mid) ? in_u : out_u) = mid;
        }
        return 0.5 * (out_u + in_u);
    };
    out.ua = refine(first - step, first);
    out.ub = refine(last + step, last);
    return out;
}

void add_beat(std::array<std::vector<double>, kNumWaves>& comps, const MorphParams& p, const QrsLayout& q,
              double shift) {
    const double t0 = kBeatOnsetMs + shift;
    const double on = t0 + p.pr_ms;
    const double sc = p.qrs_ms / (q.ub - q.ua);
    auto at = [&](double u) { return on + (u - q.ua) * sc; };
    const double tdur = 0.55 * (p.qt_ms - p.qrs_ms);
    const double t_center = on + p.qt_ms - tdur / 2;
    const double t_sigma = (tdur / 2) / kTenPercentSigmas;
    const double p_sigma = (kPDurationMs / 2) / kTenPercentSigmas;
    for (int i = 0; i < kSamples; ++i) {
        const double t = i * kDtMs;
        if (p.p_present) comps[0][i] += p.p_amp_mv * gauss(t, t0 + kPDurationMs / 2, p_sigma);
        for (int k = 0; k < 3; ++k) comps[1 + k][i] += q.amp[k] * gauss(t, at(kQrsCenter[k]), kQrsWidth[k] * sc);
        comps[4][i] += p.t_amp_mv * gauss(t, t_center, t_sigma);
        if (p.rsr_present)
            comps[5][i] += kRPrimeOfR * p.r_amp_mv * gauss(t, at(kQrsCenter[3]), kQrsWidth[3] * sc);
    }
}

}  // namespace

const std::array<std::string, kNumLabels>& label_names() {
    static const std::array<std::string, kNumLabels> names = {"LBBB", "RBBB", "SB", "ST", "AF", "AV1", "LQV", "LQT"};
    return names;
}

int label_index(std::string_view name) {
    const auto& n = label_names();
    for (int i = 0; i < kNumLabels; ++i)
        if (n[i] == name) return i;
    throw Error("unknown_class", "unknown class '" + std::string(name) + "'");
}

const std::array<std::string, kLeads>& lead_names() {
    static const std::array<std::string, kLeads> names = {"I", "II", "V1", "V2", "V3", "V4", "V5", "V6"};
    return names;
}

const GainMatrix& lead_gains() {
    static const GainMatrix g = {{
        {0.7, 0.7, 0.6, 0.5, 0.6, 0.0},
        {1.0, 1.0, 1.0, 1.0, 1.0, 0.0},
        {0.4, 0.0, 0.25, 2.0, -0.4, 1.0},
        {0.2, 0.1, 0.5, 1.8, 0.8, 0.4},
        {0.3, 0.3, 0.9, 1.2, 1.0, 0.1},
        {0.5, 0.6, 1.3, 0.7, 1.1, 0.0},
        {0.8, 0.8, 1.2, 0.4, 0.9, 0.0},
        {0.9, 0.9, 1.0, 0.2, 0.5, 0.0},
    }};
    return g;
}

void validate(const MorphParams& p) {
    auto bad = [](const std::string& why) { throw Error("invalid_params", why); };
    const double vals[] = {p.rr_ms, p.pr_ms, p.qrs_ms, p.qt_ms, p.p_amp_mv, p.r_amp_mv, p.s_amp_mv, p.t_amp_mv,
                           p.noise_sd_mv};
    for (double v : vals)
        if (!std::isfinite(v)) bad("non-finite parameter");
    if (p.rr_ms <= 0 || p.pr_ms <= 0 || p.qrs_ms <= 0 || p.qt_ms <= 0) bad("durations must be positive");
    if (!(p.pr_ms < p.rr_ms)) bad("pr_ms must be below rr_ms");
    if (!(p.qrs_ms < p.qt_ms && p.qt_ms < p.rr_ms)) bad("need qrs_ms < qt_ms < rr_ms");
    for (double a : {p.p_amp_mv, p.r_amp_mv, p.s_amp_mv, p.t_amp_mv})
        if (a < -5.0 || a > 5.0) bad("amplitudes must lie in [-5, 5] mV");
    if (p.r_amp_mv <= 0) bad("r_amp_mv must be positive");
    if (p.noise_sd_mv < 0) bad("noise_sd_mv must be non-negative");
}

void validate_signal(const Signal& x) {
    if (x.size() != size_t(kSignalSize))
        throw Error("invalid_signal", "signal must have " + std::to_string(kSignalSize) + " samples (8 x 600), got " +
                                          std::to_string(x.size()));
    for (float v : x)
        if (!std::isfinite(v)) throw Error("invalid_signal", "signal contains NaN or Inf");
}

Signal generate(const MorphParams& p, uint64_t seed) {
    validate(p);
    const QrsLayout q = qrs_layout(p.r_amp_mv, p.s_amp_mv);
    std::array<std::vector<double>, kNumWaves> comps;
    for (auto& c : comps) c.assign(kSamples, 0.0);
    add_beat(comps, p, q, 0.0);
    add_beat(comps, p, q, p.rr_ms);

    Rng noise = Rng::stream(seed, "noise");
    const auto& g = lead_gains();
    Signal x(kSignalSize);
    for (int l = 0; l < kLeads; ++l)
        for (int i = 0; i < kSamples; ++i) {
            double v = 0;
            for (int w = 0; w < kNumWaves; ++w) v += g[l][w] * comps[w][i];
            if (p.noise_sd_mv > 0) v += p.noise_sd_mv * noise.normal();
            x[l * kSamples + i] = float(v);
        }
    return x;
}

LabelVector derive_labels(const MorphParams& p) {
    LabelVector y{};
    const bool wide = p.qrs_ms > 120.0;
    y[LBBB] = wide && !p.rsr_present;
    y[RBBB] = wide && p.rsr_present;
    y[SB] = p.rr_ms > 1000.0;
    y[ST] = p.rr_ms < 600.0;
    y[AF] = !p.p_present;
    y[AV1] = p.pr_ms > 200.0;
    y[LQV] = p.r_amp_mv < 0.5;
    y[LQT] = p.qt_ms > 460.0;
    return y;
}

void validate(const BalanceSpec& b) {
    for (double v : b.prevalence)
        if (!(v >= 0.0 && v <= 1.0)) throw Error("invalid_balance", "prevalences must lie in [0, 1]");
    if (b.prevalence[ST] + b.prevalence[SB] > 1.0) throw Error("invalid_balance", "SB + ST prevalence exceeds 1");
    if (b.prevalence[LBBB] + b.prevalence[RBBB] > 1.0)
        throw Error("invalid_balance", "LBBB + RBBB prevalence exceeds 1");
    if (b.prevalence[ST] >= 1.0) throw Error("invalid_balance", "ST prevalence must be below 1");
    if (b.noise_min_mv < 0 || b.noise_max_mv < b.noise_min_mv) throw Error("invalid_balance", "invalid noise range");
}

// Each label is driven by its own regime draw so the realized prevalence
// tracks the requested one; LQT is drawn only outside the tachycardia regime (QT above
// 460 ms does not fit inside RR below 600 ms), so its conditional rate is
// scaled up to compensate.
MorphParams sample_params(Rng& rng, const BalanceSpec& balance) {
    const auto& b = balance.prevalence;
    double u = rng.uniform();
    enum { kNormal, kBrady, kTachy } regime = u < b[ST] ? kTachy : (u < b[ST] + b[SB] ? kBrady : kNormal);
    const bool av1 = rng.uniform() < b[AV1];
    u = rng.uniform();
    const bool wide = u < b[LBBB] + b[RBBB];
    const bool rsr = wide ? u < b[RBBB] : rng.uniform() < 0.1;
    const bool lqt = regime == kTachy ? false : rng.uniform() < b[LQT] / (1.0 - b[ST]);
    const bool af = rng.uniform() < b[AF];
    const bool lqv = rng.uniform() < b[LQV];

    MorphParams p;
    for (int attempt = 0;; ++attempt) {
        if (attempt > 10000) throw Error("sampling_failed", "could not satisfy timing constraints");
        p.rr_ms = regime == kTachy ? rng.uniform(420, 600)
                                   : (regime == kBrady ? rng.uniform(1000.001, 1300) : rng.uniform(600, 1000));
        p.pr_ms = av1 ? rng.uniform(200.001, 290) : rng.uniform(120, 200);
        p.qrs_ms = wide ? rng.uniform(120.001, 170) : rng.uniform(70, 120);
        p.qt_ms = lqt ? rng.uniform(460.001, 530) : rng.uniform(p.qrs_ms + 160, 460);
        if (p.pr_ms + p.qt_ms + 30 < p.rr_ms && p.qt_ms > p.qrs_ms + 160) break;
    }
    p.r_amp_mv = lqv ? rng.uniform(0.25, 0.5) : rng.uniform(0.5, 2.0);
    p.p_present = !af;
    p.rsr_present = rsr;
    p.p_amp_mv = af ? 0.0 : rng.uniform(0.15, 0.3);
    p.s_amp_mv = -(0.15 + rng.uniform(0.2, 0.5) * p.r_amp_mv);
    p.t_amp_mv = rng.uniform(0.15, 0.6);
    p.noise_sd_mv = rng.uniform(balance.noise_min_mv, balance.noise_max_mv);
    return p;
}

}  // namespace qlst::ecg
