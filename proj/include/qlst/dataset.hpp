#pragma once

#include <array>
#include <string>
#include <vector>

#include "qlst/ecg.hpp"
#include "qlst/json_util.hpp"

namespace qlst::data {

enum class Split { Train, Val, Test };
std::string split_name(Split s);
Split parse_split(const std::string& s);

// Contiguous 80/10/10 blocks by id; samples are i.i.d., so blocks are as good
// as a shuffle and keep the test block stable when n grows.
Split split_for(int64_t id, int64_t n);

struct Record {
    int64_t id = 0;
    Split split = Split::Train;
    ecg::Signal signal;
    ecg::MorphParams params;
    ecg::LabelVector labels{};
};

struct Dataset {
    std::vector<Record> records;
    json manifest;  // sidecar contents, null when absent

    std::vector<size_t> indices(Split s) const;
    // Fraction of positives per label within a split.
    std::array<double, ecg::kNumLabels> label_frequency(Split s) const;
};

json params_to_json(const ecg::MorphParams& p);
ecg::MorphParams params_from_json(const json& j);
json labels_to_json(const ecg::LabelVector& y);
json morphology_to_json(const ecg::Morphology& m);

std::string sidecar_path(const std::string& dataset_path);

// Writes `path` (JSON lines) and its sidecar manifest. Record i draws its
// parameters and noise from streams keyed by (seed, i) only.
void build_dataset(const std::string& path, int64_t n, uint64_t seed, const ecg::BalanceSpec& balance);

Record make_record(int64_t id, int64_t n, uint64_t seed, const ecg::BalanceSpec& balance);

Dataset load_dataset(const std::string& path);

}  // namespace qlst::data
