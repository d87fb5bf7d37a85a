#pragma once

// Class-incremental training loop, evaluation and metrics.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "etag/config.hpp"
#include "etag/data.hpp"
#include "etag/errors.hpp"
#include "etag/generator.hpp"
#include "etag/losses.hpp"
#include "etag/optim.hpp"
#include "etag/random.hpp"
#include "etag/solver.hpp"
#include "json.hpp"

namespace etag {

// ---------------------------------------------------------------------------
// Variants
// ---------------------------------------------------------------------------

/// Which loss terms a method wires in.
struct MethodSpec {
    Method method = Method::eTag;
    std::size_t aux_rotations = kRotations;  // 0: no aux heads
    bool distill_final = true;
    bool distill_embedding = true;
    bool replay = true;          // generator trained and replayed
    bool task_oriented = true;   // classifier CE inside the generator loss
    bool cumulative_data = false;
};

inline MethodSpec ablation_variant(Method m) {
    MethodSpec s;
    s.method = m;
    switch (m) {
        case Method::eTag:
            break;
        case Method::B0:
            s.aux_rotations = 1;
            break;
        case Method::B1:
            s.aux_rotations = 0;
            s.distill_embedding = false;
            s.task_oriented = false;
            break;
        case Method::B2:
            s.aux_rotations = 0;
            s.distill_embedding = false;
            break;
        case Method::B3:
            s.task_oriented = false;
            break;
        case Method::Fine:
        case Method::Joint:
            s.aux_rotations = 0;
            s.distill_final = false;
            s.distill_embedding = false;
            s.replay = false;
            s.task_oriented = false;
            s.cumulative_data = m == Method::Joint;
            break;
    }
    return s;
}

inline MethodSpec ablation_variant(const std::string& name) { return ablation_variant(parse_method(name)); }

inline ObjectiveOptions objective_options(const RunConfig& c, const MethodSpec& s) {
    ObjectiveOptions o;
    o.distill_final = s.distill_final;
    o.distill_embedding = s.distill_embedding;
    o.replay = s.replay;
    o.ss_ce_incremental = c.ss_ce_incremental;
    o.l2_squared = c.l2_squared;
    o.tau = c.tau;
    // Baselines without replay have no other source of old-class logits, so
    // they always use one softmax over every seen class.
    o.support = (c.ce_support == "seen" || !s.replay) ? CeSupport::AllSeen : CeSupport::CurrentTask;
    return o;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Lower-triangular: row t holds a[t][0..t].
using AccuracyMatrix = std::vector<std::vector<double>>;

inline void check_triangular(const AccuracyMatrix& a) {
    for (std::size_t t = 0; t < a.size(); ++t) {
        if (a[t].size() != t + 1) {
            throw ShapeError("accuracy row " + std::to_string(t) + " has " + std::to_string(a[t].size()) +
                             " entries, expected " + std::to_string(t + 1));
        }
    }
}

/// acc_t over the union of test sets 0..t. With `test_sizes` empty every task weighs the same.
inline std::vector<double> cumulative_accuracy(const AccuracyMatrix& a, const std::vector<std::size_t>& test_sizes = {}) {
    check_triangular(a);
    if (!test_sizes.empty() && test_sizes.size() < a.size()) throw ShapeError("fewer test sizes than tasks");
    std::vector<double> out;
    for (std::size_t t = 0; t < a.size(); ++t) {
        double num = 0.0, den = 0.0;
        for (std::size_t j = 0; j <= t; ++j) {
            const double w = test_sizes.empty() ? 1.0 : static_cast<double>(test_sizes[j]);
            num += w * a[t][j];
            den += w;
        }
        out.push_back(den > 0.0 ? num / den : 0.0);
    }
    return out;
}

inline double metric_A(const AccuracyMatrix& a, const std::vector<std::size_t>& test_sizes = {}) {
    if (a.empty()) throw DomainError("metric_A of an empty accuracy matrix");
    const auto acc = cumulative_accuracy(a, test_sizes);
    return std::accumulate(acc.begin(), acc.end(), 0.0) / static_cast<double>(acc.size());
}

inline double metric_F(const AccuracyMatrix& a) {
    check_triangular(a);
    const std::size_t T = a.size();
    if (T < 2) throw DomainError("forgetting needs at least 2 tasks, got " + std::to_string(T));
    double sum = 0.0;
    for (std::size_t j = 0; j + 1 < T; ++j) {
        double best = a[j][j];
        for (std::size_t t = j; t < T; ++t) best = std::max(best, a[t][j]);
        sum += best - a[T - 1][j];
    }
    return sum / static_cast<double>(T - 1);
}

struct Evaluation {
    std::vector<double> accuracy;                  // a[t][0..t]
    std::vector<std::vector<std::size_t>> confusion;  // true x predicted over seen classes
};

/// Single softmax over every seen class; no task ids used.
inline Evaluation evaluate(const Solver& solver, const TaskStream& stream, std::size_t t, std::size_t chunk = 512) {
    if (t >= stream.size()) throw DomainError("evaluate: task " + std::to_string(t) + " beyond stream");
    std::size_t seen = 0;
    for (std::size_t j = 0; j <= t; ++j) seen += stream.tasks[j].classes;
    if (solver.classes_seen() != seen) {
        throw ShapeError("classifier covers " + std::to_string(solver.classes_seen()) + " classes, expected " +
                         std::to_string(seen));
    }
    Evaluation ev;
    ev.confusion.assign(seen, std::vector<std::size_t>(seen, 0));
    for (std::size_t j = 0; j <= t; ++j) {
        const LabeledImages& test = stream.tasks[j].test;
        std::size_t correct = 0;
        for (std::size_t begin = 0; begin < test.size(); begin += chunk) {
            const std::size_t end = std::min(test.size(), begin + chunk);
            std::vector<std::size_t> rows(end - begin);
            std::iota(rows.begin(), rows.end(), begin);
            const Tensor feats = extract_features(solver, gather_rows(test.images, rows));
            const auto pred = argmax_rows(solver.classifier().predict(feats));
            for (std::size_t i = 0; i < pred.size(); ++i) {
                const std::size_t y = test.labels[begin + i];
                correct += pred[i] == y;
                ++ev.confusion[y][pred[i]];
            }
        }
        ev.accuracy.push_back(test.size() ? static_cast<double>(correct) / static_cast<double>(test.size()) : 0.0);
    }
    return ev;
}

// ---------------------------------------------------------------------------
// Training phases
// ---------------------------------------------------------------------------

struct EpochRecord {
    std::size_t task = 0;
    std::string phase;  // "solver" or "generator"
    std::size_t epoch = 0;
    double loss = 0.0;
    double ce_final = 0.0;
    double ce_inter = 0.0;
    double ce_replay = 0.0;
    double l2 = 0.0;
    double kl = 0.0;
    double vae_kl = 0.0;
    double reconstruction = 0.0;
    double task_ce = 0.0;
    double vae_old = 0.0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Generated replay features for a solver step: labels uniform over
/// [0, learned_classes), fresh noise, no gradient.
inline ReplayBatch build_replay_batch(const GeneratorSnapshot& previous, std::size_t learned_classes,
                                      std::size_t batch_size, Rng& rng) {
    ReplayBatch out;
    if (batch_size == 0) {
        out.features = Tensor(Shape{0, previous ? previous.generator().config().feature_dim : 0});
        return out;
    }
    if (!previous) throw UsageError("build_replay_batch needs the previous generator");
    out.labels = sample_uniform_labels(learned_classes, batch_size, rng);
    const Tensor z = standard_normal(Shape{batch_size, previous.generator().config().latent_dim}, rng);
    out.features = previous.generator().decode(z, out.labels);
    return out;
}

namespace detail {

inline double phase_lr(double base, double decay_at, std::size_t epoch, std::size_t epochs) {
    const auto boundary = static_cast<std::size_t>(std::ceil(decay_at * static_cast<double>(epochs)));
    return epoch >= boundary ? base * 0.1 : base;
}

inline std::vector<std::vector<std::size_t>> minibatches(std::size_t n, std::size_t batch, Rng& rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t b = 0; b < n; b += batch) {
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, b + batch)));
    }
    return out;
}

inline void check_finite(double v, std::size_t task, const std::string& phase, std::size_t epoch) {
    if (!std::isfinite(v)) throw NumericalError("non-finite " + phase + " loss", task, phase, epoch);
}

inline LabeledImages concat(const std::vector<const LabeledImages*>& parts) {
    LabeledImages out;
    std::vector<const Tensor*> imgs;
    for (const auto* p : parts) {
        imgs.push_back(&p->images);
        out.labels.insert(out.labels.end(), p->labels.begin(), p->labels.end());
    }
    out.images = stack_rows(imgs);
    return out;
}

}  // namespace detail

struct SolverPhase {
    std::size_t task = 0;
    const LabeledImages* train = nullptr;
    const SolverSnapshot* previous = nullptr;          // t >= 1
    const GeneratorSnapshot* previous_generator = nullptr;  // replay source, t >= 1
    std::size_t epochs = 0;
    std::size_t batch_size = 64;
    double lr = 1e-3;
    double decay_at = 2.0 / 3.0;
    ObjectiveOptions objective;
};

/// Trains the live solver for one task. Initial objective at t = 0, the
/// incremental one afterwards.
inline std::vector<EpochRecord> train_solver_phase(Solver& solver, const SolverPhase& p, Rng& shuffle_rng,
                                                   Rng& replay_rng, const EpochCallback& on_epoch = {}) {
    if (p.train == nullptr || p.train->size() == 0) throw UsageError("solver phase without training data");
    const LambdaSchedule lambda = LambdaSchedule::at(solver.task_sizes(), p.task);
    const std::size_t learned = solver.class_offset(p.task);
    Adam opt(solver.parameters(), Adam::Options{p.lr});
    std::vector<EpochRecord> records;
    for (std::size_t e = 0; e < p.epochs; ++e) {
        opt.set_lr(detail::phase_lr(p.lr, p.decay_at, e, p.epochs));
        EpochRecord rec;
        rec.task = p.task;
        rec.phase = "solver";
        rec.epoch = e;
        std::size_t seen = 0;
        for (const auto& rows : detail::minibatches(p.train->size(), p.batch_size, shuffle_rng)) {
            SolverBatch batch;
            batch.images = gather_rows(p.train->images, rows);
            for (std::size_t r : rows) batch.labels.push_back(p.train->labels[r]);
            Tape tape;
            LossBreakdown lb;
            if (p.task == 0) {
                lb = solver_loss_initial(tape, solver, batch, 0, p.objective);
            } else {
                std::optional<ReplayBatch> replay;
                if (p.objective.replay && p.previous_generator != nullptr && *p.previous_generator) {
                    replay = build_replay_batch(*p.previous_generator, learned, rows.size(), replay_rng);
                }
                if (p.previous == nullptr) throw UsageError("incremental solver phase without a snapshot");
                lb = solver_loss_incremental(tape, solver, *p.previous, batch, replay ? &*replay : nullptr, lambda,
                                             p.task, p.objective);
            }
            const double loss = lb.total.item();
            detail::check_finite(loss, p.task, "solver", e);
            opt.zero_grad();
            tape.backward(lb.total);
            opt.step();
            const double w = static_cast<double>(rows.size());
            rec.loss += w * loss;
            rec.ce_final += w * lb.ce_final;
            rec.ce_inter += w * lb.ce_inter;
            rec.ce_replay += w * lb.ce_replay;
            rec.l2 += w * lb.l2;
            rec.kl += w * lb.kl;
            seen += rows.size();
        }
        const double n = static_cast<double>(seen);
        for (double* v : {&rec.loss, &rec.ce_final, &rec.ce_inter, &rec.ce_replay, &rec.l2, &rec.kl}) *v /= n;
        if (on_epoch) on_epoch(rec);
        records.push_back(rec);
    }
    return records;
}

struct GeneratorPhase {
    std::size_t task = 0;
    const Tensor* features = nullptr;  // frozen f^L of the current task's training data
    const std::vector<std::size_t>* labels = nullptr;
    const FinalClassifier* classifier = nullptr;  // frozen C_t
    const GeneratorSnapshot* previous = nullptr;  // t >= 1
    double lambda = 0.0;
    std::size_t learned_classes = 0;  // classes of tasks before `task`
    bool task_oriented = true;
    std::size_t epochs = 0;
    std::size_t batch_size = 64;
    double lr = 1e-4;
    double decay_at = 2.0 / 3.0;
};

inline std::vector<EpochRecord> train_generator_phase(Generator& gen, const GeneratorPhase& p, Rng& shuffle_rng,
                                                      Rng& noise_rng, const EpochCallback& on_epoch = {}) {
    if (p.features == nullptr || p.labels == nullptr || p.classifier == nullptr) {
        throw UsageError("generator phase is missing features, labels or classifier");
    }
    const std::size_t k = gen.config().latent_dim;
    Adam opt(gen.parameters(), Adam::Options{p.lr});
    std::vector<EpochRecord> records;
    for (std::size_t e = 0; e < p.epochs; ++e) {
        opt.set_lr(detail::phase_lr(p.lr, p.decay_at, e, p.epochs));
        EpochRecord rec;
        rec.task = p.task;
        rec.phase = "generator";
        rec.epoch = e;
        std::size_t seen = 0;
        for (const auto& rows : detail::minibatches(p.labels->size(), p.batch_size, shuffle_rng)) {
            const std::size_t n = rows.size();
            const Tensor f = gather_rows(*p.features, rows);
            std::vector<std::size_t> y;
            for (std::size_t r : rows) y.push_back((*p.labels)[r]);
            const Tensor enc_noise = standard_normal(Shape{n, k}, noise_rng);
            const Tensor prior_noise = standard_normal(Shape{n, k}, noise_rng);
            Tape tape;
            VaeTerms terms = vae_loss_new(tape, gen, f, y, *p.classifier, enc_noise, prior_noise, p.task_oriented);
            std::optional<Var> old;
            if (p.task > 0) {
                if (p.previous == nullptr || !*p.previous) throw UsageError("generator phase without G_{t-1}");
                const auto old_labels = sample_uniform_labels(p.learned_classes, n, noise_rng);
                const Tensor old_noise = standard_normal(Shape{n, k}, noise_rng);
                old = vae_loss_old(tape, gen, *p.previous, old_labels, old_noise);
                rec.vae_old += static_cast<double>(n) * old->item();
            }
            Var total = generator_loss(p.task, terms.total, old, p.lambda);
            const double loss = total.item();
            detail::check_finite(loss, p.task, "generator", e);
            opt.zero_grad();
            tape.backward(total);
            opt.step();
            const double w = static_cast<double>(n);
            rec.loss += w * loss;
            rec.vae_kl += w * terms.prior_kl;
            rec.reconstruction += w * terms.reconstruction;
            rec.task_ce += w * terms.task_ce;
            seen += n;
        }
        const double n = static_cast<double>(seen);
        for (double* v : {&rec.loss, &rec.vae_kl, &rec.reconstruction, &rec.task_ce, &rec.vae_old}) *v /= n;
        if (on_epoch) on_epoch(rec);
        records.push_back(rec);
    }
    return records;
}

// ---------------------------------------------------------------------------
// Full run
// ---------------------------------------------------------------------------

struct RunMetrics {
    AccuracyMatrix accuracy;
    std::vector<double> cumulative;
    double A = 0.0;
    std::optional<double> F;  // absent for single-task streams
    std::vector<std::vector<std::size_t>> confusion;
    std::vector<std::size_t> task_sizes;
    std::vector<std::size_t> test_sizes;
    std::vector<EpochRecord> curves;
};

struct RunResult {
    RunConfig config;
    RunMetrics metrics;
    Solver solver;
    std::optional<Generator> generator;
};

inline TaskStream make_task_stream(const RunConfig& c) {
    Dataset data;
    if (c.data.source == "synthetic") {
        data = synth_gaussian_dataset(c.data.classes, c.data.dim, c.data.separation, c.data.samples_per_class, c.seed);
    } else {
        if (c.data.train_images.empty() || c.data.train_labels.empty()) {
            throw ConfigError("idx source needs data.train_images and data.train_labels", "data.train_images");
        }
        const LabeledImages train = load_idx(c.data.train_images, c.data.train_labels);
        if (!c.data.test_images.empty()) {
            const LabeledImages test = load_idx(c.data.test_images, c.data.test_labels);
            data = dataset_from_idx(train, &test);
        } else {
            data = dataset_from_idx(train);
        }
    }
    const auto sizes = c.data.split == "equal" ? plan_equal_tasks(data.classes, c.data.tasks)
                                               : plan_task_sizes(data.classes, c.data.first_fraction, c.data.increments);
    return build_task_stream(data, sizes, c.seed);
}

inline StageConfig stage_config_for(const RunConfig& c, const TaskStream& stream) {
    const Tensor& x = stream.tasks.front().train.images;
    StageConfig s;
    s.input_size = x.dim(1);
    s.input_channels = x.dim(3);
    s.widths = c.solver.widths;
    s.validate();
    return s;
}

/// Train every task in order, evaluating after each one.
inline RunResult run_cil(const RunConfig& config, const TaskStream& stream, const EpochCallback& on_epoch = {}) {
    validate(config);
    if (stream.size() == 0) throw DomainError("empty task stream");
    const MethodSpec spec = ablation_variant(config.method);
    const ObjectiveOptions objective = objective_options(config, spec);
    const std::uint64_t seed = config.seed;

    RunResult result{config, {}, {}, std::nullopt};
    const StageConfig stages = stage_config_for(config, stream);
    {
        Rng init = make_stream(seed, 0, Purpose::SolverInit);
        result.solver = Solver(stages, stream.tasks[0].classes, spec.aux_rotations, init);
    }
    Solver& solver = result.solver;
    RunMetrics& m = result.metrics;
    for (const auto& t : stream.tasks) {
        m.task_sizes.push_back(t.classes);
        m.test_sizes.push_back(t.test.size());
    }
    auto record = [&](const std::vector<EpochRecord>& recs) { m.curves.insert(m.curves.end(), recs.begin(), recs.end()); };

    SolverSnapshot previous_solver;
    GeneratorSnapshot previous_gen;
    for (std::size_t t = 0; t < stream.size(); ++t) {
        const TaskSpec& task = stream.tasks[t];
        if (t > 0) {
            previous_solver = snapshot(solver);
            if (result.generator) previous_gen = GeneratorSnapshot(*result.generator);
            Rng init = make_stream(seed, t, Purpose::SolverInit);
            solver.expand(task.classes, init);
        }

        LabeledImages cumulative;
        const LabeledImages* train = &task.train;
        if (spec.cumulative_data && t > 0) {
            std::vector<const LabeledImages*> parts;
            for (std::size_t j = 0; j <= t; ++j) parts.push_back(&stream.tasks[j].train);
            cumulative = detail::concat(parts);
            train = &cumulative;
        }

        SolverPhase sp;
        sp.task = t;
        sp.train = train;
        sp.previous = t > 0 ? &previous_solver : nullptr;
        sp.previous_generator = t > 0 ? &previous_gen : nullptr;
        sp.epochs = config.solver.epochs;
        sp.batch_size = config.solver.batch_size;
        sp.lr = config.solver.lr;
        sp.decay_at = config.solver.decay_at;
        sp.objective = objective;
        Rng shuffle = make_stream(seed, t, Purpose::Shuffle);
        Rng replay = make_stream(seed, t, Purpose::Replay);
        record(train_solver_phase(solver, sp, shuffle, replay, on_epoch));

        if (spec.replay) {
            const SolverSnapshot current = snapshot(solver);
            const Tensor features = extract_features(current.solver(), task.train.images);
            if (!result.generator) {
                GeneratorConfig gc;
                gc.feature_dim = stages.feature_dim();
                gc.latent_dim = config.generator.latent_dim;
                gc.hidden = config.generator.hidden;
                Rng init = make_stream(seed, t, Purpose::GeneratorInit);
                result.generator.emplace(gc, task.classes, init);
            } else {
                Rng init = make_stream(seed, t, Purpose::GeneratorInit);
                result.generator->expand(task.classes, init);
            }
            GeneratorPhase gp;
            gp.task = t;
            gp.features = &features;
            gp.labels = &task.train.labels;
            gp.classifier = &current.classifier();
            gp.previous = t > 0 ? &previous_gen : nullptr;
            gp.lambda = t > 0 ? LambdaSchedule::at(solver.task_sizes(), t).value() : 0.0;
            gp.learned_classes = solver.class_offset(t);
            gp.task_oriented = spec.task_oriented;
            gp.epochs = config.generator.epochs;
            gp.batch_size = config.generator.batch_size;
            gp.lr = config.generator.lr;
            gp.decay_at = config.generator.decay_at;
            Rng gshuffle = make_stream(seed, t, Purpose::Shuffle);
            gshuffle.discard(1);  // decorrelate from the solver's shuffle stream
            Rng noise = make_stream(seed, t, Purpose::VaeNoise);
            record(train_generator_phase(*result.generator, gp, gshuffle, noise, on_epoch));
        }

        Evaluation ev = evaluate(solver, stream, t);
        m.accuracy.push_back(ev.accuracy);
        if (t + 1 == stream.size()) m.confusion = std::move(ev.confusion);
    }
    const bool by_sample = config.accuracy_weighting == "sample";
    m.cumulative = cumulative_accuracy(m.accuracy, by_sample ? m.test_sizes : std::vector<std::size_t>{});
    m.A = metric_A(m.accuracy, by_sample ? m.test_sizes : std::vector<std::size_t>{});
    if (m.accuracy.size() >= 2) m.F = metric_F(m.accuracy);
    return result;
}

inline RunResult run_cil(const RunConfig& config, const EpochCallback& on_epoch = {}) {
    return run_cil(config, make_task_stream(config), on_epoch);
}

// ---------------------------------------------------------------------------
// Output files
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const EpochRecord& r) {
    return {{"task", r.task},       {"phase", r.phase},         {"epoch", r.epoch},
            {"loss", r.loss},       {"ce_final", r.ce_final},   {"ce_inter", r.ce_inter},
            {"ce_replay", r.ce_replay}, {"l2", r.l2},           {"kl", r.kl},
            {"vae_kl", r.vae_kl},   {"reconstruction", r.reconstruction}, {"task_ce", r.task_ce},
            {"vae_old", r.vae_old}};
}

inline nlohmann::json metrics_json(const RunResult& r) {
    const RunMetrics& m = r.metrics;
    nlohmann::json j;
    j["seed"] = r.config.seed;
    j["method"] = to_string(r.config.method);
    j["config"] = r.config;
    j["task_sizes"] = m.task_sizes;
    j["test_sizes"] = m.test_sizes;
    j["accuracy"] = m.accuracy;
    j["cumulative_accuracy"] = m.cumulative;
    j["A"] = m.A;
    j["F"] = m.F ? nlohmann::json(*m.F) : nlohmann::json(nullptr);
    j["confusion"] = m.confusion;
    return j;
}

namespace detail {

inline std::string fmt_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << text;
    if (!os) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace detail

inline std::string accuracy_csv(const AccuracyMatrix& a) {
    std::ostringstream os;
    os << "after_task";
    for (std::size_t j = 0; j < a.size(); ++j) os << ",task_" << j;
    os << '\n';
    for (std::size_t t = 0; t < a.size(); ++t) {
        os << t;
        for (std::size_t j = 0; j < a.size(); ++j) {
            os << ',';
            if (j <= t) os << detail::fmt_double(a[t][j]);
        }
        os << '\n';
    }
    return os.str();
}

inline std::string confusion_csv(const std::vector<std::vector<std::size_t>>& c) {
    std::ostringstream os;
    os << "true\\pred";
    for (std::size_t j = 0; j < c.size(); ++j) os << ',' << j;
    os << '\n';
    for (std::size_t i = 0; i < c.size(); ++i) {
        os << i;
        for (std::size_t v : c[i]) os << ',' << v;
        os << '\n';
    }
    return os.str();
}

inline std::string curves_csv(const std::vector<EpochRecord>& curves) {
    std::ostringstream os;
    os << "task,phase,epoch,loss,ce_final,ce_inter,ce_replay,l2,kl,vae_kl,reconstruction,task_ce,vae_old\n";
    for (const auto& r : curves) {
        os << r.task << ',' << r.phase << ',' << r.epoch;
        for (double v : {r.loss, r.ce_final, r.ce_inter, r.ce_replay, r.l2, r.kl, r.vae_kl, r.reconstruction,
                         r.task_ce, r.vae_old})
            os << ',' << detail::fmt_double(v);
        os << '\n';
    }
    return os.str();
}

/// metrics.json, acc_matrix.csv, confusion.csv and curves.csv under `dir`.
inline void write_run_outputs(const std::filesystem::path& dir, const RunResult& r) {
    std::filesystem::create_directories(dir);
    detail::write_text(dir / "metrics.json", metrics_json(r).dump(2) + "\n");
    detail::write_text(dir / "acc_matrix.csv", accuracy_csv(r.metrics.accuracy));
    detail::write_text(dir / "confusion.csv", confusion_csv(r.metrics.confusion));
    detail::write_text(dir / "curves.csv", curves_csv(r.metrics.curves));
}

}  // namespace etag
