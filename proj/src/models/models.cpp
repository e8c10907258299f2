#include "qlst/models.hpp"

#include <algorithm>
#include <cmath>

namespace qlst::models {

using namespace ecg;

int64_t Model::num_params() const {
    int64_t n = 0;
    for (const auto& [name, t] : params()) n += t.numel();
    return n;
}

void Model::freeze() const {
    for (auto [name, t] : params()) {
        t.set_requires_grad(false);
        t.zero_grad();
    }
}

// ---- VAE ----------------------------------------------------------------

namespace {
constexpr int64_t kEncLen = 38;   // 600 -> 300 -> 150 -> 75 -> 38
constexpr int64_t kDecLen = 75;   // 75 -> 150 -> 300 -> 600
constexpr int64_t kVaeWidth = 32;
}  // namespace

Vae::Vae(uint64_t seed, int64_t latent_dim) : latent_dim_(latent_dim) {
    if (latent_dim < 1) throw Error("invalid_argument", "latent_dim must be positive");
    Rng rng = Rng::stream(seed, "init");
    stem_ = nn::Conv1d(kLeads, 16, 7, 2, 3, rng);
    enc_.emplace_back(16, 32, 2, 7, rng);
    enc_.emplace_back(32, 32, 2, 7, rng);
    enc_.emplace_back(32, 32, 2, 7, rng);
    head_ = nn::Linear(kVaeWidth * kEncLen, 2 * latent_dim, rng);
    fc_ = nn::Linear(latent_dim, kVaeWidth * kDecLen, rng);
    up_.emplace_back(32, 32, 7, 1, 3, rng);
    up_.emplace_back(32, 16, 7, 1, 3, rng);
    up_.emplace_back(16, 16, 7, 1, 3, rng);
    out_ = nn::Conv1d(16, kLeads, 7, 1, 3, rng);
}

Vae Vae::from_arch(const json& a) { return Vae(0, a.at("latent_dim").get<int64_t>()); }

json Vae::arch() const { return {{"latent_dim", latent_dim_}}; }

NamedParams Vae::params() const {
    NamedParams p;
    stem_.collect(p, "enc.stem");
    for (size_t i = 0; i < enc_.size(); ++i) enc_[i].collect(p, "enc.block" + std::to_string(i));
    head_.collect(p, "enc.head");
    fc_.collect(p, "dec.fc");
    for (size_t i = 0; i < up_.size(); ++i) up_[i].collect(p, "dec.up" + std::to_string(i));
    out_.collect(p, "dec.out");
    return p;
}

Vae::Posterior Vae::encode(const Tensor& x) const {
    if (x.ndim() != 3 || x.dim(1) != kLeads || x.dim(2) != kSamples)
        throw Error("shape_mismatch", "encode expects (B, 8, 600), got " + shape_str(x.shape()));
    Tensor h = ops::relu(stem_.forward(x));
    for (const auto& b : enc_) h = b.forward(h);
    h = head_.forward(ops::reshape(h, {x.dim(0), -1}));
    return {ops::slice(h, 1, 0, latent_dim_),
            ops::clamp(ops::slice(h, 1, latent_dim_, 2 * latent_dim_), -8.0f, 8.0f)};
}

Tensor Vae::reparameterize(const Posterior& p, const Tensor& eps) {
    return ops::add(p.mu, ops::mul(eps, ops::exp(ops::scale(p.logvar, 0.5f))));
}

Tensor Vae::decode(const Tensor& z) const {
    if (z.ndim() != 2 || z.dim(1) != latent_dim_)
        throw Error("shape_mismatch", "decode expects (B, " + std::to_string(latent_dim_) + "), got " +
                                          shape_str(z.shape()));
    Tensor h = ops::reshape(ops::relu(fc_.forward(z)), {z.dim(0), kVaeWidth, kDecLen});
    for (const auto& c : up_) h = ops::relu(c.forward(ops::upsample_nearest(h, 2)));
    return out_.forward(h);
}

// ---- classifier ---------------------------------------------------------

std::string arch_name(ClassifierArch a) { return a == ClassifierArch::Mlp ? "mlp" : "resnet_small"; }

ClassifierArch parse_arch(const std::string& s) {
    if (s == "mlp") return ClassifierArch::Mlp;
    if (s == "resnet_small") return ClassifierArch::ResnetSmall;
    throw Error("invalid_argument", "unknown classifier architecture '" + s + "' (expected mlp or resnet_small)");
}

Classifier::Classifier(ClassifierArch arch, uint64_t seed) : arch_(arch) {
    Rng rng = Rng::stream(seed, "init");
    if (arch == ClassifierArch::Mlp) {
        fc_.emplace_back(kSignalSize, 64, rng);
        fc_.emplace_back(64, 64, rng);
        fc_.emplace_back(64, kNumLabels, rng);
        return;
    }
    // 600 -> 150 -> 75 -> 38 -> 19 -> 10, then a mean over time.
    stem_ = nn::Conv1d(kLeads, 16, 9, 4, 4, rng);
    blocks_.emplace_back(16, 32, 2, 7, rng);
    blocks_.emplace_back(32, 48, 2, 7, rng);
    blocks_.emplace_back(48, 64, 2, 5, rng);
    blocks_.emplace_back(64, 64, 2, 3, rng);
    fc_.emplace_back(64, kNumLabels, rng);
}

Classifier Classifier::from_arch(const json& a) { return Classifier(parse_arch(a.at("arch").get<std::string>()), 0); }

json Classifier::arch() const { return {{"arch", arch_name(arch_)}}; }

NamedParams Classifier::params() const {
    NamedParams p;
    if (arch_ == ClassifierArch::ResnetSmall) {
        stem_.collect(p, "stem");
        for (size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(p, "block" + std::to_string(i));
    }
    for (size_t i = 0; i < fc_.size(); ++i) fc_[i].collect(p, "fc" + std::to_string(i));
    return p;
}

Tensor Classifier::logits(const Tensor& x) const {
    if (x.ndim() != 3 || x.dim(1) != kLeads || x.dim(2) != kSamples)
        throw Error("shape_mismatch", "classify expects (B, 8, 600), got " + shape_str(x.shape()));
    if (arch_ == ClassifierArch::Mlp) {
        Tensor h = ops::reshape(x, {x.dim(0), kSignalSize});
        h = ops::relu(fc_[0].forward(h));
        h = ops::relu(fc_[1].forward(h));
        return fc_[2].forward(h);
    }
    Tensor h = ops::relu(stem_.forward(x));
    for (const auto& b : blocks_) h = b.forward(h);
    return fc_[0].forward(ops::mean(h, 2));
}

Tensor Classifier::probs(const Tensor& x) const {
    return ops::clamp(ops::sigmoid(logits(x)), 1e-7f, 1.0f - 1e-7f);
}

// ---- qLST ---------------------------------------------------------------

void validate_query(double q) {
    if (!(q >= 0.0 && q <= 1.0))
        throw Error("invalid_query", "query " + std::to_string(q) + " is outside [0, 1]");
}

QlstModel::QlstModel(const QlstConfig& cfg, uint64_t seed) : cfg_(cfg) {
    if (cfg.class_id < 0 || cfg.class_id >= kNumLabels)
        throw Error("invalid_argument", "class_id must be in [0, 8)");
    Rng rng = Rng::stream(seed, "init");
    const int64_t d = cfg.dim, n = cfg.latent_dim;
    we_ = nn::init_normal(rng, {n, d}, 0.5);
    pos_ = nn::init_normal(rng, {n, d}, 0.5);
    wq_ = nn::init_normal(rng, {2, d}, 0.5);
    pos_q_ = nn::init_normal(rng, {d}, 0.5);
    att_ = nn::MultiHeadAttention(d, cfg.heads, cfg.dropout, rng);
    ln_ = nn::LayerNorm(d);
    ffn1_ = nn::Linear(d, cfg.ffn, rng);
    ffn2_ = nn::Linear(cfg.ffn, d, rng);
    readout_ = nn::Linear(d, 1, rng);
    for (auto& v : readout_.w.values()) v *= 0.1f;
    for (auto& v : readout_.b.values()) v = 0.0f;
}

QlstModel QlstModel::from_arch(const json& a) {
    QlstConfig c;
    c.latent_dim = a.at("latent_dim").get<int64_t>();
    c.dim = a.at("dim").get<int64_t>();
    c.heads = a.at("heads").get<int>();
    c.ffn = a.at("ffn").get<int64_t>();
    c.dropout = a.at("dropout").get<double>();
    c.class_id = a.at("class_id").get<int>();
    return QlstModel(c, 0);
}

json QlstModel::arch() const {
    return {{"latent_dim", cfg_.latent_dim}, {"dim", cfg_.dim},         {"heads", cfg_.heads},
            {"ffn", cfg_.ffn},               {"dropout", cfg_.dropout}, {"class_id", cfg_.class_id},
            {"class", label_names()[cfg_.class_id]}};
}

NamedParams QlstModel::params() const {
    NamedParams p{{"embed.w", we_}, {"embed.pos", pos_}, {"query.w", wq_}, {"query.pos", pos_q_}};
    att_.collect(p, "attn");
    ln_.collect(p, "ffn.norm");
    ffn1_.collect(p, "ffn.in");
    ffn2_.collect(p, "ffn.out");
    readout_.collect(p, "readout");
    return p;
}

Tensor QlstModel::query_features(const std::vector<float>& q) {
    Tensor f({int64_t(q.size()), 2});
    for (size_t i = 0; i < q.size(); ++i) {
        validate_query(q[i]);
        // Uniform training queries rarely come closer than 0.01 to either end,
        // so the logit is held there; q itself still separates the endpoints.
        const double c = std::clamp(double(q[i]), 0.01, 0.99);
        f.data()[2 * i] = q[i];
        f.data()[2 * i + 1] = float(std::log(c / (1.0 - c)) / 4.0);
    }
    return f;
}

Tensor QlstModel::forward(const Tensor& z, const std::vector<float>& q, bool training, Rng* rng) const {
    const int64_t n = cfg_.latent_dim, d = cfg_.dim;
    if (z.ndim() != 2 || z.dim(1) != n)
        throw Error("shape_mismatch", "qlst expects z of shape (B, " + std::to_string(n) + "), got " +
                                          shape_str(z.shape()));
    const int64_t b = z.dim(0);
    if (int64_t(q.size()) != b)
        throw Error("shape_mismatch", "qlst got " + std::to_string(q.size()) + " queries for a batch of " +
                                          std::to_string(b));
    Tensor qf = query_features(q);

    Tensor tok = ops::matmul(ops::reshape(z, {b, n, 1}), Tensor({1, d}, 1.0f));
    tok = ops::add(ops::mul(tok, we_), pos_);
    Tensor qt = ops::reshape(ops::add(ops::matmul(qf, wq_), pos_q_), {b, 1, d});
    Tensor x = ops::concat<float>({tok, qt}, 1);

    Tensor h = ops::add(x, att_.forward(x, training, rng));
    h = ops::add(h, ffn2_.forward(ops::relu(ffn1_.forward(ln_.forward(h)))));
    h = ops::slice(h, 1, 0, n);
    return ops::reshape(readout_.forward(h), {b, n});
}

// ---- plain-value helpers -------------------------------------------------

Tensor signal_batch(const std::vector<const Signal*>& xs) {
    Tensor t({int64_t(xs.size()), kLeads, kSamples});
    float* p = t.data();
    for (const Signal* x : xs) {
        validate_signal(*x);
        std::copy(x->begin(), x->end(), p);
        p += kSignalSize;
    }
    return t;
}

Tensor signal_tensor(const Signal& x) { return signal_batch({&x}); }

Tensor latent_tensor(const std::vector<float>& z, int64_t latent_dim) {
    if (int64_t(z.size()) != latent_dim)
        throw Error("shape_mismatch", "z has " + std::to_string(z.size()) + " entries, latent_dim is " +
                                          std::to_string(latent_dim));
    for (float v : z)
        if (!std::isfinite(v)) throw Error("non_finite", "z contains a non-finite value");
    return Tensor({1, latent_dim}, z);
}

std::vector<float> encode(const Vae& vae, const Signal& x, EncodeMode mode, uint64_t seed) {
    auto post = vae.encode(signal_tensor(x));
    if (mode == EncodeMode::Mean) return post.mu.values();
    Tensor eps({1, vae.latent_dim()});
    Rng rng = Rng::stream(seed, "encode");
    for (auto& v : eps.values()) v = float(rng.normal());
    return Vae::reparameterize(post, eps).values();
}

Signal decode(const Vae& vae, const std::vector<float>& z) {
    return vae.decode(latent_tensor(z, vae.latent_dim())).values();
}

std::array<float, kNumLabels> classify(const Classifier& clf, const Signal& x) {
    Tensor p = clf.probs(signal_tensor(x));
    std::array<float, kNumLabels> out{};
    std::copy(p.values().begin(), p.values().end(), out.begin());
    return out;
}

std::vector<float> qlst_delta(const QlstModel& m, const std::vector<float>& z, float q) {
    return m.forward(latent_tensor(z, m.config().latent_dim), {q}, false, nullptr).values();
}

}  // namespace qlst::models
