#include <algorithm>
#include <cmath>
#include <numeric>

#include "qlst/ecg.hpp"

namespace qlst::ecg {

namespace {

constexpr int kMeasureLead = 1;  // lead II: unit gain for P, QRS and T
constexpr int kQrsSearchLo = 40;
constexpr int kQrsSearchHi = 280;
constexpr int kPeakHalfWindow = 40;
constexpr int kQuietRun = 6;
constexpr double kMinRPeak = 0.05;
constexpr double kPPresentMv = 0.05;

// Moving average with edge replication.
std::vector<double> smooth(const std::vector<double>& x, int w) {
    const int n = int(x.size());
    const int left = w / 2;
    std::vector<double> out(n);
    for (int i = 0; i < n; ++i) {
        double s = 0;
        for (int k = 0; k < w; ++k) s += x[std::clamp(i - left + k, 0, n - 1)];
        out[i] = s / w;
    }
    return out;
}

size_t argmax(const std::vector<double>& v, int lo, int hi) {
    return size_t(std::max_element(v.begin() + lo, v.begin() + hi) - v.begin());
}

bool quiet(const std::vector<double>& s, int from, int to, double thr) {
    for (int i = from; i <= to; ++i)
        if (std::abs(s[i]) >= thr) return false;
    return true;
}

}  // namespace

Morphology measure_morphology(const Signal& x) {
    validate_signal(x);
    Morphology m;
    const int n = kSamples;
    std::vector<double> lead(x.begin() + kMeasureLead * n, x.begin() + (kMeasureLead + 1) * n);
    double peak_abs = 0;
    for (double v : lead) peak_abs = std::max(peak_abs, std::abs(v));
    if (peak_abs < 1e-6) return m;

    const auto s = smooth(lead, 5);
    // The QRS is where the steepest slope is; R is the local maximum around it.
    int k = kQrsSearchLo;
    double best_slope = -1;
    for (int i = kQrsSearchLo; i < kQrsSearchHi; ++i) {
        double d = std::abs(s[i + 1] - s[i]);
        if (d > best_slope) {
            best_slope = d;
            k = i;
        }
    }
    const int a = std::max(0, k - kPeakHalfWindow), b = std::min(n, k + kPeakHalfWindow);
    const int ri = int(argmax(s, a, b));
    const double R = s[ri];
    if (R <= kMinRPeak) return m;
    m.measurable = true;
    m.r_amp_mv = R;

    const double thr = 0.1 * R;
    int on = ri;
    while (on - kQuietRun >= 0 && !quiet(s, on - kQuietRun, on, thr)) --on;
    int off = ri;
    while (off + kQuietRun < n && !quiet(s, off, off + kQuietRun, thr)) ++off;
    on = std::clamp(on, 0, n - 2);
    off = std::clamp(off, 1, n - 1);
    const double on_t = [&] {
        double y0 = std::abs(s[on]), y1 = std::abs(s[on + 1]);
        return y1 != y0 ? (on + (thr - y0) / (y1 - y0)) * kDtMs : on * kDtMs;
    }();
    const double off_t = [&] {
        double y0 = std::abs(s[off - 1]), y1 = std::abs(s[off]);
        return y1 != y0 ? (off - 1 + (y0 - thr) / (y0 - y1)) * kDtMs : off * kDtMs;
    }();
    m.qrs_ms = off_t - on_t;
    m.s_amp_mv = *std::min_element(s.begin() + on, s.begin() + off + 1);

    const auto ps = smooth(lead, 9);
    const int pe = std::max(on - 5, 1);
    const int pi = int(argmax(ps, 0, pe));
    m.p_amp_mv = ps[pi];
    m.p_present = m.p_amp_mv > kPPresentMv;
    m.pr_ms = NAN;
    if (m.p_present) {
        const double pt = 0.1 * m.p_amp_mv;
        int i = pi;
        while (i > 0 && ps[i] >= pt) --i;
        double y0 = ps[i], y1 = ps[i + 1];
        double p_on = y1 != y0 ? (i + (pt - y0) / (y1 - y0)) * kDtMs : i * kDtMs;
        m.pr_ms = on_t - p_on;
    }

    // The next beat is found by matching the measured QRS shape; the T-wave
    // search stops one PR interval before it.
    const int L = off - on + 1;
    int next_qrs = -1;
    for (int j = off + 50; j < n - L / 2; ++j) {
        const int len = std::min(L, n - j);
        double dot = 0, seg2 = 0, tp2 = 0;
        for (int i = 0; i < len; ++i) {
            dot += s[j + i] * s[on + i];
            seg2 += s[j + i] * s[j + i];
            tp2 += s[on + i] * s[on + i];
        }
        const double c = dot / (std::sqrt(seg2) * std::sqrt(tp2) + 1e-12);
        if (c > 0.9 && std::sqrt(seg2) > 0.7 * std::sqrt(tp2)) {
            next_qrs = j;
            break;
        }
    }
    m.rr_ms = next_qrs >= 0 ? (next_qrs - on) * kDtMs : NAN;

    int ta = off + 5;
    int tb = std::min(n - 1, on + int(560 / kDtMs));
    if (next_qrs >= 0) {
        const double pr = std::isnan(m.pr_ms) ? 0.0 : m.pr_ms;
        tb = std::min(tb, next_qrs - int(pr / kDtMs) - 5);
    }
    m.qt_ms = NAN;
    m.t_amp_mv = NAN;
    if (ta < tb) {
        const int ti = int(argmax(ps, ta, tb));
        const double T = ps[ti];
        m.t_amp_mv = T;
        if (T > 0) {
            const double tt = 0.1 * T;
            int j = ti;
            while (j < n - 1 && ps[j] >= tt) ++j;
            j = std::max(j, 1);
            double y0 = ps[j - 1], y1 = ps[j];
            double t_end = y0 != y1 ? (j - 1 + (y0 - tt) / (y0 - y1)) * kDtMs : j * kDtMs;
            m.qt_ms = t_end - on_t;
        }
    }
    return m;
}

}  // namespace qlst::ecg
