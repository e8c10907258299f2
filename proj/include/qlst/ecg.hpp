#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "qlst/rng.hpp"

namespace qlst::ecg {

constexpr int kLeads = 8;
constexpr int kSamples = 600;
constexpr int kSignalSize = kLeads * kSamples;
constexpr double kSampleRateHz = 500.0;
constexpr double kDtMs = 1000.0 / kSampleRateHz;
constexpr int kNumLabels = 8;
constexpr int kNumWaves = 6;  // P, Q, R, S, T, R'

enum Label : int { LBBB = 0, RBBB, SB, ST, AF, AV1, LQV, LQT };

const std::array<std::string, kNumLabels>& label_names();
// Throws unknown_class for names outside the label set.
int label_index(std::string_view name);

const std::array<std::string, kLeads>& lead_names();

struct MorphParams {
    double rr_ms = 800;
    double pr_ms = 160;
    double qrs_ms = 90;
    double qt_ms = 380;
    double p_amp_mv = 0.2;
    double r_amp_mv = 1.0;
    double s_amp_mv = -0.4;
    double t_amp_mv = 0.3;
    bool p_present = true;
    bool rsr_present = false;
    double noise_sd_mv = 0.0;
};

using LabelVector = std::array<bool, kNumLabels>;

// Lead-major (8, 600) samples in millivolts.
using Signal = std::vector<float>;

// Per-wave lead gains: rows are leads (I, II, V1..V6), columns P, Q, R, S, T, R'.
// Lead II carries every wave except R' with unit gain; R' only appears in the
// right-precordial leads.
using GainMatrix = std::array<std::array<double, kNumWaves>, kLeads>;
const GainMatrix& lead_gains();

// Throws invalid_params when durations, ordering or amplitude bounds fail.
void validate(const MorphParams& p);
void validate_signal(const Signal& x);

// Deterministic in (params, seed). The beat starts with a 40 ms baseline
// before P onset; the next beat begins rr_ms after this one.
Signal generate(const MorphParams& p, uint64_t seed);

LabelVector derive_labels(const MorphParams& p);

// Landmark-based estimate from lead II. Durations that cannot be located are
// NaN; `measurable` is false when no R peak exists at all.
struct Morphology {
    bool measurable = false;
    double pr_ms = 0, qrs_ms = 0, qt_ms = 0, rr_ms = 0;
    double p_amp_mv = 0, r_amp_mv = 0, s_amp_mv = 0, t_amp_mv = 0;
    bool p_present = false;
};
Morphology measure_morphology(const Signal& x);

// Target prevalence per label plus the noise range used by sample_params.
struct BalanceSpec {
    std::array<double, kNumLabels> prevalence = {0.12, 0.12, 0.15, 0.15, 0.15, 0.15, 0.12, 0.12};
    double noise_min_mv = 0.0;
    double noise_max_mv = 0.02;
};
void validate(const BalanceSpec& b);

MorphParams sample_params(Rng& rng, const BalanceSpec& balance);

}  // namespace qlst::ecg
