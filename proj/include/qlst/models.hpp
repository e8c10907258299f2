#pragma once

#include <array>
#include <string>
#include <vector>

#include "qlst/ecg.hpp"
#include "qlst/json_util.hpp"
#include "qlst/nn.hpp"

namespace qlst::models {

constexpr int64_t kLatentDim = 16;

// Models are cheap shared handles over their parameter tensors; copying one
// aliases the weights. Forward passes are const and record onto the calling
// thread's tape only when one is active.
class Model {
public:
    virtual ~Model() = default;
    virtual std::string kind() const = 0;
    virtual json arch() const = 0;
    virtual NamedParams params() const = 0;

    int64_t num_params() const;
    // Stops gradient accumulation into every parameter.
    void freeze() const;
};

enum class EncodeMode { Mean, Sample };

// Conv residual encoder to (mu, log sigma^2) and an upsampling conv decoder.
class Vae : public Model {
public:
    explicit Vae(uint64_t seed, int64_t latent_dim = kLatentDim);
    static Vae from_arch(const json& arch);

    std::string kind() const override { return "vae"; }
    json arch() const override;
    NamedParams params() const override;
    int64_t latent_dim() const { return latent_dim_; }

    struct Posterior {
        Tensor mu;      // (B, D)
        Tensor logvar;  // (B, D), clamped to [-8, 8]
    };
    // x (B, 8, 600)
    Posterior encode(const Tensor& x) const;
    // mu + eps * exp(logvar / 2)
    static Tensor reparameterize(const Posterior& p, const Tensor& eps);
    // z (B, D) -> (B, 8, 600)
    Tensor decode(const Tensor& z) const;

private:
    int64_t latent_dim_;
    nn::Conv1d stem_;
    std::vector<nn::ResBlock> enc_;
    nn::Linear head_;
    nn::Linear fc_;
    std::vector<nn::Conv1d> up_;
    nn::Conv1d out_;
};

enum class ClassifierArch { Mlp, ResnetSmall };
std::string arch_name(ClassifierArch a);
ClassifierArch parse_arch(const std::string& s);

class Classifier : public Model {
public:
    Classifier(ClassifierArch arch, uint64_t seed);
    static Classifier from_arch(const json& arch);

    std::string kind() const override { return "classifier"; }
    json arch() const override;
    NamedParams params() const override;
    ClassifierArch architecture() const { return arch_; }

    // x (B, 8, 600) -> (B, 8) logits.
    Tensor logits(const Tensor& x) const;
    // Sigmoids of the logits kept inside [1e-7, 1 - 1e-7] so they never
    // saturate to exactly 0 or 1 in float.
    Tensor probs(const Tensor& x) const;

private:
    ClassifierArch arch_;
    nn::Conv1d stem_;
    std::vector<nn::ResBlock> blocks_;
    std::vector<nn::Linear> fc_;
};

struct QlstConfig {
    int64_t latent_dim = kLatentDim;
    int64_t dim = 30;
    int heads = 5;
    int64_t ffn = 120;
    double dropout = 0.1;
    int class_id = 0;
};

// Each latent coordinate becomes a token z_i * w_i + p_i; the query is one
// more token built from q and logit(q)/4. One self-attention module and a
// pre-norm feed-forward sublayer follow, the query token is dropped and each
// coordinate token is read out as one component of delta z.
class QlstModel : public Model {
public:
    QlstModel(const QlstConfig& cfg, uint64_t seed);
    static QlstModel from_arch(const json& arch);

    std::string kind() const override { return "qlst"; }
    json arch() const override;
    NamedParams params() const override;
    const QlstConfig& config() const { return cfg_; }

    // z (B, D), q of length B with every entry in [0, 1]. `rng` drives
    // attention dropout and is only needed when training.
    Tensor forward(const Tensor& z, const std::vector<float>& q, bool training, Rng* rng) const;

    // (B, 2) rows of [q, logit(q)/4], the logit taken of q clamped to [0.01, 0.99].
    static Tensor query_features(const std::vector<float>& q);

private:
    QlstConfig cfg_;
    Tensor we_, pos_, wq_, pos_q_;
    nn::MultiHeadAttention att_;
    nn::LayerNorm ln_;
    nn::Linear ffn1_, ffn2_, readout_;
};

// Plain-value helpers used by explain, the service and the CLI.
Tensor signal_batch(const std::vector<const ecg::Signal*>& xs);
Tensor signal_tensor(const ecg::Signal& x);
Tensor latent_tensor(const std::vector<float>& z, int64_t latent_dim);

std::vector<float> encode(const Vae& vae, const ecg::Signal& x, EncodeMode mode = EncodeMode::Mean,
                          uint64_t seed = 0);
ecg::Signal decode(const Vae& vae, const std::vector<float>& z);
std::array<float, ecg::kNumLabels> classify(const Classifier& clf, const ecg::Signal& x);
std::vector<float> qlst_delta(const QlstModel& m, const std::vector<float>& z, float q);

void validate_query(double q);

}  // namespace qlst::models
