#pragma once

// Staged convolutional feature extractor, per-stage auxiliary heads, and the
// growing linear classifier.
//
// Stage l is conv3x3 -> ReLU with stride 2. The final stage is followed by
// global average pooling, giving the d-dimensional feature f^L. The auxiliary
// head behind stage l (l < L) re-runs its own copies of stages l+1..L, pools,
// and applies a fully connected layer with `rotations * classes_seen` outputs.
//
// Auxiliary logits are laid out in per-task blocks: task t owns columns
// [rotations * offset_t, rotations * (offset_t + m_t)), and inside the block
// column `rotation * m_t + local_class`. Growing a head appends a block, so
// the leading columns always reproduce the previous head.

#include <cstddef>
#include <memory>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "etag/autodiff.hpp"
#include "etag/random.hpp"
#include "etag/serialize.hpp"
#include "etag/tensor.hpp"

namespace etag {

struct StageConfig {
    std::size_t input_size = 32;      // square spatial extent
    std::size_t input_channels = 3;
    std::vector<std::size_t> widths{8, 16, 32, 64};

    std::size_t stages() const { return widths.size(); }
    std::size_t feature_dim() const { return widths.empty() ? 0 : widths.back(); }

    void validate() const {
        if (widths.size() < 2) throw DomainError("stage config needs at least 2 stages");
        for (std::size_t w : widths)
            if (w == 0) throw DomainError("stage widths must be positive");
        if (input_size == 0 || input_channels == 0) throw DomainError("input extent must be positive");
    }

    /// Spatial extent after stage l (1-based).
    std::size_t spatial_after(std::size_t l) const {
        std::size_t s = input_size;
        for (std::size_t i = 0; i < l; ++i) s = (s - 1) / 2 + 1;
        return s;
    }

    bool operator==(const StageConfig&) const = default;
};

inline nlohmann::json to_json(const StageConfig& c) {
    return {{"input_size", c.input_size}, {"input_channels", c.input_channels}, {"widths", c.widths}};
}

inline StageConfig stage_config_from_json(const nlohmann::json& j) {
    StageConfig c;
    c.input_size = j.at("input_size").get<std::size_t>();
    c.input_channels = j.at("input_channels").get<std::size_t>();
    c.widths = j.at("widths").get<std::vector<std::size_t>>();
    return c;
}

/// conv3x3 (stride 2, pad 1) -> ReLU
struct ConvBlock {
    Tensor weight;  // 3 x 3 x in x out
    Tensor bias;    // out

    ConvBlock() = default;
    ConvBlock(std::size_t in, std::size_t out, Rng& rng)
        : weight(he_normal(Shape{3, 3, in, out}, 9 * in, rng)), bias(Shape{out}) {
        bias.requires_grad = true;
    }

    std::size_t parameter_count() const { return weight.size() + bias.size(); }

    template <class Self>
    static Var apply(Self& self, Tape& tape, const Var& x) {
        return relu(conv2d(x, tape.bind(self.weight), tape.bind(self.bias), 2));
    }
};

/// Output of forward_all: stage maps f^1..f^{L-1} (N x H_l x W_l x C_l)
/// followed by the pooled final feature f^L (N x d).
struct StageOutputs {
    std::vector<Var> stages;

    const Var& features() const { return stages.back(); }
    std::size_t size() const { return stages.size(); }
};

class StagedExtractor {
public:
    StagedExtractor() = default;
    StagedExtractor(StageConfig config, Rng& rng) : config_(std::move(config)) {
        config_.validate();
        std::size_t in = config_.input_channels;
        for (std::size_t w : config_.widths) {
            blocks_.emplace_back(in, w, rng);
            in = w;
        }
    }

    const StageConfig& config() const { return config_; }
    std::vector<ConvBlock>& blocks() { return blocks_; }
    const std::vector<ConvBlock>& blocks() const { return blocks_; }

    StageOutputs forward_all(Tape& tape, const Var& x) { return forward_impl(*this, tape, x); }
    StageOutputs forward_all(Tape& tape, const Var& x) const { return forward_impl(*this, tape, x); }

private:
    template <class Self>
    static StageOutputs forward_impl(Self& self, Tape& tape, const Var& x) {
        const StageConfig& c = self.config_;
        const Shape& s = x.shape();
        if (s.size() != 4 || s[1] != c.input_size || s[2] != c.input_size || s[3] != c.input_channels) {
            throw ShapeError("extractor expects N x " + std::to_string(c.input_size) + " x " +
                             std::to_string(c.input_size) + " x " + std::to_string(c.input_channels) + ", got " +
                             to_string(s));
        }
        StageOutputs out;
        Var h = x;
        for (auto& block : self.blocks_) {
            h = ConvBlock::apply(block, tape, h);
            out.stages.push_back(h);
        }
        out.stages.back() = global_avg_pool(out.stages.back());
        return out;
    }

    StageConfig config_;
    std::vector<ConvBlock> blocks_;
};

/// Head behind stage `stage` (1-based, < L).
class AuxClassifier {
public:
    AuxClassifier() = default;
    AuxClassifier(const StageConfig& config, std::size_t stage, std::size_t rotations, std::size_t classes, Rng& rng)
        : stage_(stage), rotations_(rotations) {
        if (stage == 0 || stage >= config.stages()) throw DomainError("aux head stage out of range");
        for (std::size_t l = stage; l < config.stages(); ++l)
            blocks_.emplace_back(config.widths[l - 1], config.widths[l], rng);
        in_dim_ = config.feature_dim();
        weight_ = he_normal(Shape{rotations * classes, in_dim_}, in_dim_, rng);
        bias_ = Tensor(Shape{rotations * classes});
        bias_.requires_grad = true;
    }

    std::size_t stage() const { return stage_; }
    std::size_t rotations() const { return rotations_; }
    std::size_t width() const { return weight_.dim(0); }

    std::size_t parameter_count() const {
        std::size_t n = weight_.size() + bias_.size();
        for (const auto& b : blocks_) n += b.parameter_count();
        return n;
    }

    /// Raw logits; temperature is applied by the caller.
    Var logits(Tape& tape, const Var& stage_output) { return logits_impl(*this, tape, stage_output); }
    Var logits(Tape& tape, const Var& stage_output) const { return logits_impl(*this, tape, stage_output); }

    /// Append `rotations * new_classes` outputs; existing rows are untouched.
    void expand(std::size_t new_classes, Rng& rng) {
        const std::size_t old_rows = width();
        const std::size_t add = rotations_ * new_classes;
        Tensor fresh = he_normal(Shape{add, in_dim_}, in_dim_, rng);
        Tensor w(Shape{old_rows + add, in_dim_});
        std::copy(weight_.values.begin(), weight_.values.end(), w.values.begin());
        std::copy(fresh.values.begin(), fresh.values.end(), w.values.begin() + static_cast<std::ptrdiff_t>(weight_.size()));
        w.requires_grad = weight_.requires_grad;
        Tensor b(Shape{old_rows + add});
        std::copy(bias_.values.begin(), bias_.values.end(), b.values.begin());
        b.requires_grad = bias_.requires_grad;
        weight_ = std::move(w);
        bias_ = std::move(b);
    }

    std::vector<Tensor*> parameters() {
        std::vector<Tensor*> ps;
        for (auto& b : blocks_) {
            ps.push_back(&b.weight);
            ps.push_back(&b.bias);
        }
        ps.push_back(&weight_);
        ps.push_back(&bias_);
        return ps;
    }

    std::vector<ConvBlock>& blocks() { return blocks_; }
    const std::vector<ConvBlock>& blocks() const { return blocks_; }
    Tensor& weight() { return weight_; }
    const Tensor& weight() const { return weight_; }
    Tensor& bias() { return bias_; }
    const Tensor& bias() const { return bias_; }

private:
    template <class Self>
    static Var logits_impl(Self& self, Tape& tape, const Var& f) {
        Var h = f;
        for (auto& block : self.blocks_) h = ConvBlock::apply(block, tape, h);
        h = global_avg_pool(h);
        return add_bias(matmul(h, transpose(tape.bind(self.weight_))), tape.bind(self.bias_));
    }

    std::size_t stage_ = 0;
    std::size_t rotations_ = 0;
    std::size_t in_dim_ = 0;
    std::vector<ConvBlock> blocks_;
    Tensor weight_;  // width x d
    Tensor bias_;
};

/// Linear head without bias: probabilities = softmax(w . f).
class FinalClassifier {
public:
    FinalClassifier() = default;
    FinalClassifier(std::size_t classes, std::size_t feature_dim, Rng& rng)
        : weight_(he_normal(Shape{classes, feature_dim}, feature_dim, rng)) {}
    explicit FinalClassifier(Tensor weight) : weight_(std::move(weight)) {
        if (weight_.rank() != 2) throw ShapeError("classifier weight must be classes x d");
    }

    std::size_t classes() const { return weight_.dim(0); }
    std::size_t feature_dim() const { return weight_.dim(1); }
    bool trainable() const { return weight_.requires_grad; }

    Tensor& weight() { return weight_; }
    const Tensor& weight() const { return weight_; }

    /// N x classes logits.
    Var logits(Tape& tape, const Var& f) { return logits_impl(*this, tape, f); }
    Var logits(Tape& tape, const Var& f) const { return logits_impl(*this, tape, f); }

    /// Class probabilities for a batch of features (no tape involvement for callers).
    Tensor predict(const Tensor& features) const {
        Tape tape;
        return softmax(logits(tape, tape.constant(features))).value();
    }

    /// Append `new_classes` rows, fan-in scaled Gaussian.
    void expand(std::size_t new_classes, Rng& rng) {
        const std::size_t d = feature_dim();
        Tensor fresh = he_normal(Shape{new_classes, d}, d, rng);
        Tensor w(Shape{classes() + new_classes, d});
        std::copy(weight_.values.begin(), weight_.values.end(), w.values.begin());
        std::copy(fresh.values.begin(), fresh.values.end(), w.values.begin() + static_cast<std::ptrdiff_t>(weight_.size()));
        w.requires_grad = weight_.requires_grad;
        weight_ = std::move(w);
    }

private:
    template <class Self>
    static Var logits_impl(Self& self, Tape& tape, const Var& f) {
        if (f.shape().size() != 2 || f.shape()[1] != self.weight_.dim(1)) {
            throw ShapeError("classifier expects N x " + std::to_string(self.weight_.dim(1)) + " features, got " +
                             to_string(f.shape()));
        }
        return matmul(f, transpose(tape.bind(self.weight_)));
    }

    Tensor weight_;  // classes x d
};

/// Index of the largest entry in each row; ties go to the lowest index.
inline std::vector<std::size_t> argmax_rows(const Tensor& probs) {
    const std::size_t n = probs.dim(0), k = probs.dim(1);
    std::vector<std::size_t> out(n, 0);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 1; c < k; ++c)
            if (probs[r * k + c] > probs[r * k + out[r]]) out[r] = c;
    }
    return out;
}

class Solver {
public:
    Solver() = default;

    /// `aux_rotations` = 0 builds no auxiliary heads.
    Solver(StageConfig config, std::size_t initial_classes, std::size_t aux_rotations, Rng& rng)
        : extractor_(std::move(config), rng), aux_rotations_(aux_rotations), task_sizes_{initial_classes} {
        if (initial_classes == 0) throw DomainError("solver needs at least one class");
        const StageConfig& c = extractor_.config();
        if (aux_rotations_ > 0) {
            for (std::size_t l = 1; l < c.stages(); ++l) aux_.emplace_back(c, l, aux_rotations_, initial_classes, rng);
        }
        classifier_ = FinalClassifier(initial_classes, c.feature_dim(), rng);
    }

    const StageConfig& config() const { return extractor_.config(); }
    StagedExtractor& extractor() { return extractor_; }
    const StagedExtractor& extractor() const { return extractor_; }
    FinalClassifier& classifier() { return classifier_; }
    const FinalClassifier& classifier() const { return classifier_; }
    std::vector<AuxClassifier>& aux() { return aux_; }
    const std::vector<AuxClassifier>& aux() const { return aux_; }
    std::size_t aux_rotations() const { return aux_rotations_; }
    const std::vector<std::size_t>& task_sizes() const { return task_sizes_; }

    std::size_t classes_seen() const { return classifier_.classes(); }

    /// Number of classes in tasks before `task`.
    std::size_t class_offset(std::size_t task) const {
        std::size_t off = 0;
        for (std::size_t t = 0; t < task && t < task_sizes_.size(); ++t) off += task_sizes_[t];
        return off;
    }

    StageOutputs forward_all(Tape& tape, const Var& x) { return extractor_.forward_all(tape, x); }
    StageOutputs forward_all(Tape& tape, const Var& x) const { return extractor_.forward_all(tape, x); }

    /// Logits of the head behind stage `stage` (1-based).
    Var aux_logits(Tape& tape, std::size_t stage, const Var& f) { return aux_at(*this, stage).logits(tape, f); }
    Var aux_logits(Tape& tape, std::size_t stage, const Var& f) const { return aux_at(*this, stage).logits(tape, f); }

    /// Start a new task with `new_classes` classes.
    void expand(std::size_t new_classes, Rng& rng) {
        if (new_classes == 0) throw DomainError("expand needs at least one new class");
        classifier_.expand(new_classes, rng);
        for (auto& a : aux_) a.expand(new_classes, rng);
        task_sizes_.push_back(new_classes);
    }

    /// Trainable tensors (extractor, aux heads, classifier).
    std::vector<Tensor*> parameters() {
        std::vector<Tensor*> ps;
        for (auto& b : extractor_.blocks()) {
            ps.push_back(&b.weight);
            ps.push_back(&b.bias);
        }
        for (auto& a : aux_)
            for (Tensor* p : a.parameters()) ps.push_back(p);
        ps.push_back(&classifier_.weight());
        return ps;
    }

    std::vector<std::pair<std::string, const Tensor*>> named_parameters() const {
        std::vector<std::pair<std::string, const Tensor*>> out;
        for (std::size_t i = 0; i < extractor_.blocks().size(); ++i) {
            out.emplace_back("stage" + std::to_string(i + 1) + ".weight", &extractor_.blocks()[i].weight);
            out.emplace_back("stage" + std::to_string(i + 1) + ".bias", &extractor_.blocks()[i].bias);
        }
        for (const auto& a : aux_) {
            const std::string prefix = "aux" + std::to_string(a.stage());
            for (std::size_t i = 0; i < a.blocks().size(); ++i) {
                out.emplace_back(prefix + ".block" + std::to_string(i) + ".weight", &a.blocks()[i].weight);
                out.emplace_back(prefix + ".block" + std::to_string(i) + ".bias", &a.blocks()[i].bias);
            }
            out.emplace_back(prefix + ".fc.weight", &a.weight());
            out.emplace_back(prefix + ".fc.bias", &a.bias());
        }
        out.emplace_back("classifier.weight", &classifier_.weight());
        return out;
    }

    void set_trainable(bool on) {
        for (Tensor* p : parameters()) {
            p->requires_grad = on;
            if (!on) p->grad.clear();
        }
    }

    bool operator==(const Solver& other) const {
        auto a = named_parameters();
        auto b = other.named_parameters();
        if (a.size() != b.size() || task_sizes_ != other.task_sizes_) return false;
        for (std::size_t i = 0; i < a.size(); ++i)
            if (a[i].first != b[i].first || !(*a[i].second == *b[i].second)) return false;
        return true;
    }

private:
    template <class Self>
    static std::conditional_t<std::is_const_v<Self>, const AuxClassifier&, AuxClassifier&> aux_at(Self& self,
                                                                                                 std::size_t stage) {
        if (stage == 0 || stage > self.aux_.size()) {
            throw DomainError("aux stage " + std::to_string(stage) + " outside [1, " +
                              std::to_string(self.aux_.size()) + "]");
        }
        return self.aux_[stage - 1];
    }

    StagedExtractor extractor_;
    std::vector<AuxClassifier> aux_;
    FinalClassifier classifier_;
    std::size_t aux_rotations_ = 0;
    std::vector<std::size_t> task_sizes_;
};

/// Frozen deep copy of a solver. Everything bound from it enters a tape as a
/// constant, so no gradient can reach it.
class SolverSnapshot {
public:
    SolverSnapshot() = default;
    explicit SolverSnapshot(const Solver& live) {
        auto copy = std::make_shared<Solver>(live);
        copy->set_trainable(false);
        frozen_ = std::move(copy);
    }

    explicit operator bool() const { return frozen_ != nullptr; }
    const Solver& solver() const { return *frozen_; }
    const FinalClassifier& classifier() const { return frozen_->classifier(); }

    StageOutputs forward_all(Tape& tape, const Var& x) const { return frozen_->forward_all(tape, x); }
    Var aux_logits(Tape& tape, std::size_t stage, const Var& f) const { return frozen_->aux_logits(tape, stage, f); }

private:
    std::shared_ptr<const Solver> frozen_;
};

inline SolverSnapshot snapshot(const Solver& solver) { return SolverSnapshot(solver); }
inline SolverSnapshot snapshot(const SolverSnapshot& snap) { return snap; }

/// Final-stage features for a batch of images, computed outside any training tape.
inline Tensor extract_features(const Solver& solver, const Tensor& images) {
    Tape tape;
    return solver.forward_all(tape, tape.constant(images)).features().value();
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

inline std::vector<std::uint8_t> encode_solver(const Solver& solver) {
    nlohmann::json meta = {{"stage_config", to_json(solver.config())},
                           {"task_sizes", solver.task_sizes()},
                           {"aux_rotations", solver.aux_rotations()}};
    return encode_parameters("solver", meta, solver.named_parameters());
}

inline Solver decode_solver(const std::vector<std::uint8_t>& bytes) {
    ParameterFile file = decode_parameters(bytes);
    if (file.kind != "solver") throw FormatError("expected a solver parameter file, got '" + file.kind + "'", 20);
    const StageConfig config = stage_config_from_json(file.meta.at("stage_config"));
    const auto sizes = file.meta.at("task_sizes").get<std::vector<std::size_t>>();
    const auto rotations = file.meta.at("aux_rotations").get<std::size_t>();
    if (sizes.empty()) throw FormatError("solver file has no task sizes", 20);

    Rng scratch(0);
    Solver solver(config, sizes.front(), rotations, scratch);
    for (std::size_t t = 1; t < sizes.size(); ++t) solver.expand(sizes[t], scratch);
    // parameters() and named_parameters() enumerate tensors in the same order
    const auto names = solver.named_parameters();
    const auto params = solver.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Tensor& stored = file.get(names[i].first);
        if (stored.shape != params[i]->shape) {
            throw FormatError("shape mismatch for tensor '" + names[i].first + "'", 20);
        }
        params[i]->values = stored.values;
    }
    return solver;
}

}  // namespace etag
