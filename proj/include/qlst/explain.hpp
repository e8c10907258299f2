#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "qlst/dataset.hpp"
#include "qlst/models.hpp"

namespace qlst::explain {

// {0, 0.2, 0.4, 0.6, 0.8, 1}
std::vector<float> default_grid();
// Values in [0, 1], strictly increasing, at least one. Throws invalid_grid.
void validate_grid(const std::vector<float>& grid);
// "0,0.2,1" -> {0, 0.2, 1}, validated.
std::vector<float> parse_grid(const std::string& csv);

struct Origin {
    enum class Kind { GlobalZero, LocalSample, Latent };
    Kind kind = Kind::GlobalZero;
    std::string id;  // sample id for LocalSample
};

struct Record {
    float q = 0;
    std::vector<float> delta_z;
    ecg::Signal signal;
    std::array<float, ecg::kNumLabels> probs{};
    ecg::Morphology morphology;
};

struct Bundle {
    Origin origin;
    int class_id = 0;
    std::vector<float> grid;
    std::vector<float> z0;
    std::vector<Record> records;
};

struct Pipeline {
    const models::Vae& vae;
    const models::Classifier& clf;
    const models::QlstModel& qlst;
};

// One independent query per grid value, each applied to z0 itself. With
// `mc_dropout_seed` the qLST runs with its attention dropout active, drawing
// from a stream keyed by the seed and the grid position.
Bundle traverse(const Pipeline& p, const std::vector<float>& z0, const std::vector<float>& grid,
                const Origin& origin = {}, std::optional<uint64_t> mc_dropout_seed = std::nullopt);

Bundle explain_global(const Pipeline& p, const std::vector<float>& grid,
                      std::optional<uint64_t> mc_dropout_seed = std::nullopt);

enum class Direction { Both, Increase, Decrease };
Direction parse_direction(const std::string& s);

// z0 is the encoder mean of x. Increase keeps the grid values above the
// classifier's current probability y_hat, decrease the ones below; both
// start from y_hat itself. `class_id` must match the qLST model (missing_model).
Bundle explain_local(const Pipeline& p, const ecg::Signal& x, int class_id, Direction dir,
                     const std::vector<float>& grid, const std::string& sample_id = "");

json bundle_to_json(const Bundle& b);
Bundle bundle_from_json(const json& j);
// Columns q,lead,index,value, one row per signal sample of every record.
std::string bundle_to_csv(const Bundle& b);
// Format by file extension: .json or .csv.
void export_bundle(const Bundle& b, const std::string& path);

struct Summary {
    int64_t n = 0;
    double min = 0, q1 = 0, median = 0, q3 = 0, max = 0, mean = 0;
};
// Quartiles by linear interpolation between order statistics.
Summary summarize(std::vector<double> values);

struct CalibrationRow {
    int class_id = 0;
    float q = 0;
    Summary probs;  // of y_LST[class] over the evaluated samples
};

struct CalibrationReport {
    std::vector<CalibrationRow> rows;
    std::string csv() const;
    std::vector<double> means(int class_id) const;
    // Mean over the grid of |mean y_LST - q|.
    double mean_abs_error(int class_id) const;
    bool nondecreasing(int class_id) const;
};

// Encodes up to `max_samples` samples of `split` (0 = all) and traverses each
// over the grid. Appends one row per grid value to `report`.
void eval_calibration(const Pipeline& p, const data::Dataset& ds, data::Split split, const std::vector<float>& grid,
                      CalibrationReport& report, size_t max_samples = 0);

// Relative RMSE between decode(z + qlst(z, y_hat)) and decode(z) per sample,
// where y_hat is the classifier's probability for the model's class on x.
std::vector<double> locality_ratios(const Pipeline& p, const data::Dataset& ds, data::Split split,
                                    size_t max_samples = 0);

// Spearman rank correlation with average ranks for ties; NaN for constant input.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace qlst::explain
