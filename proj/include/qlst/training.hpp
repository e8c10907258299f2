#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "qlst/dataset.hpp"
#include "qlst/models.hpp"

namespace qlst::train {

enum class Stage { Classifier, Vae, Qlst };
std::string stage_name(Stage s);
Stage parse_stage(const std::string& s);

struct StageConfig {
    Stage stage = Stage::Classifier;
    int epochs = 6;
    int batch_size = 64;
    double lr = 1e-3;
    uint64_t seed = 0;

    // classifier
    std::string arch = "resnet_small";
    double label_smoothing = 0.1;

    // vae
    int64_t latent_dim = models::kLatentDim;
    double kl_target = 32.0;
    double kp = 1e-3;
    double ki = 1e-5;
    double beta_min = 0.0;
    double beta_max = 1e-2;

    // qlst
    int class_id = -1;
    double alpha_base = 25.0;
    bool cosine_lr = true;
    int val_samples = 256;  // per-epoch calibration probe
    // Extra training latents s * z with s ~ U(0, 1), as a fraction of the
    // training split. They cover the region around the zero latent that global
    // explanations start from but that encoder means never occupy.
    double shrunk_fraction = 0.25;
};

// Defaults per stage; every field can then be overridden from JSON.
StageConfig default_config(Stage s);
json to_json(const StageConfig& c);
// Unknown keys are rejected so typos do not silently fall back to defaults.
StageConfig config_from_json(const json& j, const StageConfig& base);
// Throws invalid_config.
void validate(const StageConfig& c);

// Per-class loss weights clip(0.5 / freq, 1, 10); a balanced label gets 1.
std::array<float, ecg::kNumLabels> class_weights(const std::array<double, ecg::kNumLabels>& freq);
// Mean class weight over the sample's positive labels, 1 for label-free samples.
float sample_weight(const ecg::LabelVector& y, const std::array<float, ecg::kNumLabels>& w);

// Area under the ROC curve with tied scores counted half. NaN when either
// class is absent.
double auroc(const std::vector<float>& scores, const std::vector<bool>& labels);

// PI control of the KL weight toward a set point. The proportional term
// kp * (sigmoid(kl - set_point) - 1/2) is zero at the set point; the integral
// accumulates -ki * (set_point - kl). Both the accumulator and beta stay in
// [beta_min, beta_max].
class BetaController {
public:
    BetaController(double set_point, double kp, double ki, double beta_min, double beta_max);
    double update(double kl);
    double beta() const { return beta_; }
    double proportional(double kl) const;

private:
    double set_point_, kp_, ki_, beta_min_, beta_max_;
    double integral_ = 0.0;
    double beta_ = 0.0;
};

// alpha = base * (1 - |q - y_hat|)
double alpha(double q, double y_hat, double base = 25.0);

// (B, 8, 600) pair -> (B) mean squared difference per sample.
Tensor mse_per_sample(const Tensor& a, const Tensor& b);

struct QlstLoss {
    Tensor total;  // bce + mse
    Tensor bce;    // mean of -[q log y + (1 - q) log(1 - y)], y clamped to [1e-7, 1 - 1e-7]
    Tensor mse;    // mean of alpha * MSE(x_hat, x_lst)
};
// q, y_lst, y_hat: (B); x_hat, x_lst: (B, 8, 600).
QlstLoss qlst_loss(const std::vector<float>& q, const Tensor& y_lst, const Tensor& x_hat, const Tensor& x_lst,
                   const std::vector<float>& y_hat, double alpha_base = 25.0);

struct Metrics {
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;
    std::string csv() const;
    const std::vector<double>& last() const { return rows.back(); }
    double last(const std::string& column) const;
};

using Logger = std::function<void(const std::string&)>;
void log_to_stderr(const std::string& line);

struct ClassifierRun {
    models::Classifier model;
    Metrics metrics;  // epoch, loss, auroc_<label> on the validation split
};
ClassifierRun train_classifier(const StageConfig& c, const data::Dataset& ds, const Logger& log = log_to_stderr);

struct VaeRun {
    models::Vae model;
    Metrics metrics;  // epoch, loss, mse, kl, beta, val_rel_rmse
};
VaeRun train_vae(const StageConfig& c, const data::Dataset& ds, const Logger& log = log_to_stderr);

struct QlstRun {
    models::QlstModel model;
    Metrics metrics;  // epoch, loss, bce, mse, lr, val_calib_mae
};
// Freezes `clf` and `vae`; any gradient reaching them raises unfrozen_dependency.
QlstRun train_qlst(const StageConfig& c, const data::Dataset& ds, const models::Classifier& clf,
                   const models::Vae& vae, const Logger& log = log_to_stderr);

// Evaluation over one split, in forward-only chunks.
std::array<double, ecg::kNumLabels> evaluate_auroc(const models::Classifier& clf, const data::Dataset& ds,
                                                   data::Split split);
struct VaeEval {
    double kl = 0;              // mean KL per sample, nats
    double rel_rmse = 0;        // sqrt(sum (x_hat - x)^2 / sum x^2) over the split
    double rel_rmse_mean = 0;   // mean of the per-sample ratio
};
VaeEval evaluate_vae(const models::Vae& vae, const data::Dataset& ds, data::Split split);

}  // namespace qlst::train
