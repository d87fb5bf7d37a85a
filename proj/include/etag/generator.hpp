#pragma once

// Conditional VAE over final-stage features.
//
// Encoder: [f ; onehot(y)] -> hidden -> hidden -> (mu, logvar), ReLU between.
// Decoder: [z ; onehot(y)] -> hidden -> hidden -> f_hat.
// The one-hot width grows with the classes seen; growing appends input rows
// to the first layer of each network and leaves every existing weight alone.

#include <cstddef>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "etag/autodiff.hpp"
#include "etag/losses.hpp"
#include "etag/random.hpp"
#include "etag/serialize.hpp"
#include "etag/solver.hpp"

namespace etag {

struct GeneratorConfig {
    std::size_t feature_dim = 64;
    std::size_t latent_dim = 32;
    std::size_t hidden = 128;

    bool operator==(const GeneratorConfig&) const = default;
};

/// x . W + b with W stored in x out.
struct Dense {
    Tensor weight;
    Tensor bias;

    Dense() = default;
    Dense(std::size_t in, std::size_t out, Rng& rng) : weight(he_normal(Shape{in, out}, in, rng)), bias(Shape{out}) {
        bias.requires_grad = true;
    }

    template <class Self>
    static Var apply(Self& self, Tape& tape, const Var& x) {
        return add_bias(matmul(x, tape.bind(self.weight)), tape.bind(self.bias));
    }

    /// Append `rows` input rows drawn with the layer's fan-in scale.
    void grow_inputs(std::size_t rows, Rng& rng) {
        const std::size_t in = weight.dim(0), out = weight.dim(1);
        Tensor fresh = he_normal(Shape{rows, out}, in + rows, rng);
        Tensor w(Shape{in + rows, out});
        std::copy(weight.values.begin(), weight.values.end(), w.values.begin());
        std::copy(fresh.values.begin(), fresh.values.end(), w.values.begin() + static_cast<std::ptrdiff_t>(weight.size()));
        w.requires_grad = weight.requires_grad;
        weight = std::move(w);
    }
};

struct Posterior {
    Var mu;
    Var logvar;
};

class Generator {
public:
    Generator() = default;
    Generator(GeneratorConfig config, std::size_t classes, Rng& rng) : config_(config), classes_(classes) {
        if (config_.feature_dim == 0 || config_.latent_dim == 0 || config_.hidden == 0) {
            throw DomainError("generator dimensions must be positive");
        }
        const std::size_t h = config_.hidden;
        enc_in_ = Dense(config_.feature_dim + classes, h, rng);
        enc_mid_ = Dense(h, h, rng);
        enc_out_ = Dense(h, 2 * config_.latent_dim, rng);
        dec_in_ = Dense(config_.latent_dim + classes, h, rng);
        dec_mid_ = Dense(h, h, rng);
        dec_out_ = Dense(h, config_.feature_dim, rng);
    }

    const GeneratorConfig& config() const { return config_; }
    std::size_t classes() const { return classes_; }

    Posterior encode(Tape& tape, const Var& f, const std::vector<std::size_t>& labels) {
        return encode_impl(*this, tape, f, labels);
    }
    Posterior encode(Tape& tape, const Var& f, const std::vector<std::size_t>& labels) const {
        return encode_impl(*this, tape, f, labels);
    }

    Var decode(Tape& tape, const Var& z, const std::vector<std::size_t>& labels) {
        return decode_impl(*this, tape, z, labels);
    }
    Var decode(Tape& tape, const Var& z, const std::vector<std::size_t>& labels) const {
        return decode_impl(*this, tape, z, labels);
    }

    /// Decode outside any training tape.
    Tensor decode(const Tensor& z, const std::vector<std::size_t>& labels) const {
        Tape tape;
        return decode(tape, tape.constant(z), labels).value();
    }

    void expand(std::size_t new_classes, Rng& rng) {
        enc_in_.grow_inputs(new_classes, rng);
        dec_in_.grow_inputs(new_classes, rng);
        classes_ += new_classes;
    }

    std::vector<Tensor*> parameters() {
        std::vector<Tensor*> ps;
        for (Dense* d : layers()) {
            ps.push_back(&d->weight);
            ps.push_back(&d->bias);
        }
        return ps;
    }

    std::vector<Tensor*> encoder_parameters() {
        return {&enc_in_.weight, &enc_in_.bias, &enc_mid_.weight, &enc_mid_.bias, &enc_out_.weight, &enc_out_.bias};
    }

    std::vector<std::pair<std::string, const Tensor*>> named_parameters() const {
        static const char* names[] = {"enc_in", "enc_mid", "enc_out", "dec_in", "dec_mid", "dec_out"};
        const Dense* ls[] = {&enc_in_, &enc_mid_, &enc_out_, &dec_in_, &dec_mid_, &dec_out_};
        std::vector<std::pair<std::string, const Tensor*>> out;
        for (std::size_t i = 0; i < 6; ++i) {
            out.emplace_back(std::string(names[i]) + ".weight", &ls[i]->weight);
            out.emplace_back(std::string(names[i]) + ".bias", &ls[i]->bias);
        }
        return out;
    }

    void set_trainable(bool on) {
        for (Tensor* p : parameters()) {
            p->requires_grad = on;
            if (!on) p->grad.clear();
        }
    }

    /// Set every weight and bias to zero.
    void zero() {
        for (Tensor* p : parameters()) std::fill(p->values.begin(), p->values.end(), 0.0);
    }

    bool operator==(const Generator& other) const {
        if (!(config_ == other.config_) || classes_ != other.classes_) return false;
        auto a = named_parameters();
        auto b = other.named_parameters();
        for (std::size_t i = 0; i < a.size(); ++i)
            if (!(*a[i].second == *b[i].second)) return false;
        return true;
    }

private:
    std::vector<Dense*> layers() { return {&enc_in_, &enc_mid_, &enc_out_, &dec_in_, &dec_mid_, &dec_out_}; }

    template <class Self>
    static void check_labels(Self& self, const std::vector<std::size_t>& labels, std::size_t rows) {
        if (labels.size() != rows) throw ShapeError("generator: label count differs from batch size");
        for (std::size_t y : labels) {
            if (y >= self.classes_) {
                throw DomainError("generator: class " + std::to_string(y) + " unknown (" +
                                  std::to_string(self.classes_) + " classes)");
            }
        }
    }

    template <class Self>
    static Posterior encode_impl(Self& self, Tape& tape, const Var& f, const std::vector<std::size_t>& labels) {
        if (f.shape().size() != 2 || f.shape()[1] != self.config_.feature_dim) {
            throw ShapeError("encode expects N x " + std::to_string(self.config_.feature_dim) + " features");
        }
        check_labels(self, labels, f.shape()[0]);
        Var x = concat_cols(f, tape.constant(one_hot(labels, self.classes_)));
        Var h = relu(Dense::apply(self.enc_in_, tape, x));
        h = relu(Dense::apply(self.enc_mid_, tape, h));
        Var out = Dense::apply(self.enc_out_, tape, h);
        const std::size_t k = self.config_.latent_dim;
        return {slice_cols(out, 0, k), slice_cols(out, k, 2 * k)};
    }

    template <class Self>
    static Var decode_impl(Self& self, Tape& tape, const Var& z, const std::vector<std::size_t>& labels) {
        if (z.shape().size() != 2 || z.shape()[1] != self.config_.latent_dim) {
            throw ShapeError("decode expects N x " + std::to_string(self.config_.latent_dim) + " latents");
        }
        check_labels(self, labels, z.shape()[0]);
        Var x = concat_cols(z, tape.constant(one_hot(labels, self.classes_)));
        Var h = relu(Dense::apply(self.dec_in_, tape, x));
        h = relu(Dense::apply(self.dec_mid_, tape, h));
        return Dense::apply(self.dec_out_, tape, h);
    }

    GeneratorConfig config_;
    std::size_t classes_ = 0;
    Dense enc_in_, enc_mid_, enc_out_;
    Dense dec_in_, dec_mid_, dec_out_;
};

/// Frozen copy of a generator (the previous task's decoder in practice).
class GeneratorSnapshot {
public:
    GeneratorSnapshot() = default;
    explicit GeneratorSnapshot(const Generator& live) {
        auto copy = std::make_shared<Generator>(live);
        copy->set_trainable(false);
        frozen_ = std::move(copy);
    }

    explicit operator bool() const { return frozen_ != nullptr; }
    const Generator& generator() const { return *frozen_; }
    std::size_t classes() const { return frozen_->classes(); }

    Var decode(Tape& tape, const Var& z, const std::vector<std::size_t>& labels) const {
        return frozen_->decode(tape, z, labels);
    }

private:
    std::shared_ptr<const Generator> frozen_;
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// KL(N(mu, sigma^2) || N(0, 1)) summed over latent dims, averaged over the batch.
inline Var prior_kl(const Var& mu, const Var& logvar) {
    if (mu.shape() != logvar.shape() || mu.shape().size() != 2) throw ShapeError("prior_kl: mu/logvar shapes");
    const double n = static_cast<double>(mu.shape()[0]);
    const double cells = static_cast<double>(mu.size());
    Var s = sub(add(sum(mul(mu, mu)), sum(exp(logvar))), sum(logvar));
    return scale(add_scalar(s, -cells), 0.5 / n);
}

/// Batch mean of 0.5 ||target - output||^2 (unit-variance Gaussian NLL up to a constant).
inline Var gaussian_reconstruction(const Var& output, const Var& target) {
    return scale(mean(sq_norm_rows(sub(output, target))), 0.5);
}

struct VaeTerms {
    Var total;
    double prior_kl = 0.0;
    double reconstruction = 0.0;
    double task_ce = 0.0;
};

/// Loss on current-task features. `encoder_noise` drives the reparameterized
/// reconstruction path; `prior_noise` drives the fresh decoded sample scored
/// by the frozen classifier (only when `task_oriented`).
inline VaeTerms vae_loss_new(Tape& tape, Generator& gen, const Tensor& features, const std::vector<std::size_t>& labels,
                             const FinalClassifier& frozen_classifier, const Tensor& encoder_noise,
                             const Tensor& prior_noise, bool task_oriented) {
    if (frozen_classifier.trainable()) throw UsageError("vae_loss_new: classifier must be frozen");
    VaeTerms out;
    Var f = tape.constant(features);
    Posterior post = gen.encode(tape, f, labels);
    Var z = gaussian_sample(post.mu, post.logvar, encoder_noise);
    Var recon = gaussian_reconstruction(gen.decode(tape, z, labels), f);
    Var kl = prior_kl(post.mu, post.logvar);
    out.total = add(kl, recon);
    out.prior_kl = kl.item();
    out.reconstruction = recon.item();
    if (task_oriented) {
        Var sampled = gen.decode(tape, tape.constant(prior_noise), labels);
        Var ce = cross_entropy(frozen_classifier.logits(tape, sampled), labels);
        out.task_ce = ce.item();
        out.total = add(out.total, ce);
    }
    return out;
}

/// Knowledge reconstruction: match the frozen decoder on shared (label, noise) pairs.
inline Var vae_loss_old(Tape& tape, Generator& gen, const GeneratorSnapshot& previous,
                        const std::vector<std::size_t>& labels, const Tensor& noise) {
    if (!previous) throw UsageError("vae_loss_old needs the previous generator");
    if (labels.empty()) throw UsageError("vae_loss_old: no learned classes to reconstruct");
    Var z = tape.constant(noise);
    Var target = tape.constant(previous.decode(tape, z, labels).value());
    return gaussian_reconstruction(gen.decode(tape, z, labels), target);
}

/// new + lambda_vae * old; the old term is absent on the initial task.
inline Var generator_loss(std::size_t task, const Var& new_term, const std::optional<Var>& old_term, double lambda_vae) {
    if (task == 0 || !old_term) return new_term;
    return add(new_term, scale(*old_term, lambda_vae));
}

/// `count` labels drawn uniformly from [0, learned_classes).
inline std::vector<std::size_t> sample_uniform_labels(std::size_t learned_classes, std::size_t count, Rng& rng) {
    if (learned_classes == 0) throw UsageError("cannot sample labels from an empty class set");
    std::uniform_int_distribution<std::size_t> dist(0, learned_classes - 1);
    std::vector<std::size_t> out(count);
    for (auto& y : out) y = dist(rng);
    return out;
}

/// Decode `count_per_class` samples for each listed class with fresh N(0, 1) noise.
inline ReplayBatch sample_features(const Generator& gen, const std::vector<std::size_t>& classes,
                                   std::size_t count_per_class, Rng& rng) {
    ReplayBatch out;
    for (std::size_t y : classes) {
        if (y >= gen.classes()) throw DomainError("sample_features: class " + std::to_string(y) + " unknown");
        for (std::size_t i = 0; i < count_per_class; ++i) out.labels.push_back(y);
    }
    if (out.labels.empty()) {
        out.features = Tensor(Shape{0, gen.config().feature_dim});
        return out;
    }
    Tensor z = standard_normal(Shape{out.labels.size(), gen.config().latent_dim}, rng);
    out.features = gen.decode(z, out.labels);
    return out;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

inline std::vector<std::uint8_t> encode_generator(const Generator& gen) {
    nlohmann::json meta = {{"feature_dim", gen.config().feature_dim},
                           {"latent_dim", gen.config().latent_dim},
                           {"hidden", gen.config().hidden},
                           {"classes", gen.classes()}};
    return encode_parameters("generator", meta, gen.named_parameters());
}

inline Generator decode_generator(const std::vector<std::uint8_t>& bytes) {
    ParameterFile file = decode_parameters(bytes);
    if (file.kind != "generator") throw FormatError("expected a generator parameter file, got '" + file.kind + "'", 20);
    GeneratorConfig c;
    c.feature_dim = file.meta.at("feature_dim").get<std::size_t>();
    c.latent_dim = file.meta.at("latent_dim").get<std::size_t>();
    c.hidden = file.meta.at("hidden").get<std::size_t>();
    Rng scratch(0);
    Generator gen(c, file.meta.at("classes").get<std::size_t>(), scratch);
    const auto names = gen.named_parameters();
    const auto params = gen.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Tensor& stored = file.get(names[i].first);
        if (stored.shape != params[i]->shape) throw FormatError("shape mismatch for tensor '" + names[i].first + "'", 20);
        params[i]->values = stored.values;
    }
    return gen;
}

}  // namespace etag
