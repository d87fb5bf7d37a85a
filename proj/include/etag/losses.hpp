#pragma once

// Solver-side objectives: term functions and their composition into the
// initial-task and incremental-task losses.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "etag/augmentation.hpp"
#include "etag/autodiff.hpp"
#include "etag/solver.hpp"

namespace etag {

/// lambda = m_{:t-1} / m_t. One instance feeds the replay CE weight, the
/// distillation weight, and the generator's reconstruction weight.
struct LambdaSchedule {
    std::size_t previous_classes = 0;
    std::size_t current_classes = 1;

    static LambdaSchedule at(const std::vector<std::size_t>& task_sizes, std::size_t task) {
        if (task >= task_sizes.size()) throw DomainError("lambda schedule: task index out of range");
        LambdaSchedule s;
        for (std::size_t t = 0; t < task; ++t) s.previous_classes += task_sizes[t];
        s.current_classes = task_sizes[task];
        if (s.current_classes == 0) throw DomainError("lambda schedule: empty task");
        return s;
    }

    double value() const { return static_cast<double>(previous_classes) / static_cast<double>(current_classes); }
};

struct DistillTemperature {
    double tau = 3.0;

    DistillTemperature() = default;
    explicit DistillTemperature(double t) : tau(t) {
        if (!(tau > 0.0)) throw DomainError("distillation temperature must be positive");
    }
};

// ---------------------------------------------------------------------------
// Terms
// ---------------------------------------------------------------------------

inline Var ce_final(const Var& logits, const std::vector<std::size_t>& labels) {
    return cross_entropy(logits, labels);
}

/// Rotation-task CE summed over stages. Each stage's logits hold
/// `rotations * N` rows stacked rotation-major, so the per-rotation average
/// (1/R) sum_i mean_i equals one mean over all rows.
///
/// `rotations` must be 4; 1 is accepted for the identity-only variant.
inline Var ce_inter(const std::vector<Var>& stage_logits, const std::vector<std::size_t>& aug_labels,
                    std::size_t rotations = kRotations) {
    if (rotations != kRotations && rotations != 1) {
        throw DomainError("ce_inter: expected 4 rotations, got " + std::to_string(rotations));
    }
    if (stage_logits.empty()) throw DomainError("ce_inter: no auxiliary stages");
    if (aug_labels.size() % rotations != 0) throw ShapeError("ce_inter: rows are not a whole number of rotations");
    Var total = ce_final(stage_logits.front(), aug_labels);
    for (std::size_t l = 1; l < stage_logits.size(); ++l) total = add(total, ce_final(stage_logits[l], aug_labels));
    return total;
}

/// Batch mean of ||f_live - f_old||_2 (or its square when `squared`).
inline Var l2_final(const Var& live, const Var& old, bool squared = false) {
    if (live.shape() != old.shape()) {
        throw ShapeError("l2_final: shapes " + to_string(live.shape()) + " and " + to_string(old.shape()) + " differ");
    }
    Tape& tape = *live.tape();
    Var diff = sub(live, tape.constant(old.value()));
    return mean(squared ? sq_norm_rows(diff) : norm_rows(diff));
}

/// sum_l tau^2 * mean_rows KL(softmax(old_l / tau) || softmax(new_l[:, :w_old] / tau)).
///
/// Old logits are detached. New logits are sliced to the old head's width.
inline Var kl_inter(const std::vector<Var>& new_logits, const std::vector<Var>& old_logits, double tau) {
    if (new_logits.size() != old_logits.size() || new_logits.empty()) {
        throw ShapeError("kl_inter: stage counts differ or are empty");
    }
    std::optional<Var> total;
    for (std::size_t l = 0; l < new_logits.size(); ++l) {
        const Var& nl = new_logits[l];
        const Var& ol = old_logits[l];
        if (nl.shape().size() != 2 || ol.shape().size() != 2 || nl.shape()[0] != ol.shape()[0] ||
            nl.shape()[1] < ol.shape()[1]) {
            throw ShapeError("kl_inter: stage " + std::to_string(l + 1) + " new logits " + to_string(nl.shape()) +
                             " cannot be sliced to old " + to_string(ol.shape()));
        }
        Tape& tape = *nl.tape();
        Var teacher = softmax(tape.constant(ol.value()), tau);
        Var student = softmax(slice_cols(nl, 0, ol.shape()[1]), tau);
        Var term = scale(mean(kl_divergence(teacher, student)), tau * tau);
        total = total ? add(*total, term) : term;
    }
    return *total;
}

/// Current-task CE plus lambda_ce times replay CE over the old-class rows.
/// `replay_logits` must already be restricted to those rows.
inline Var ce_new(const Var& current_logits, const std::vector<std::size_t>& labels,
                  const std::optional<Var>& replay_logits, const std::vector<std::size_t>& replay_labels,
                  double lambda_ce) {
    Var loss = ce_final(current_logits, labels);
    if (!replay_logits || replay_labels.empty()) return loss;
    const std::size_t old_classes = replay_logits->shape()[1];
    for (std::size_t y : replay_labels) {
        if (y >= old_classes) {
            throw DomainError("ce_new: generated label " + std::to_string(y) + " is not a learned class (< " +
                              std::to_string(old_classes) + ")");
        }
    }
    return add(loss, scale(ce_final(*replay_logits, replay_labels), lambda_ce));
}

inline double combine_initial(double ce_final_value, double ce_inter_value) { return ce_final_value + ce_inter_value; }

inline double combine_incremental(double ce_new_value, double lambda, double l2_value, double kl_value) {
    return ce_new_value + lambda * (l2_value + kl_value);
}

// ---------------------------------------------------------------------------
// Composed objectives
// ---------------------------------------------------------------------------

enum class CeSupport {
    CurrentTask,  // current data over the current task's rows, replay over the old rows
    AllSeen,      // one softmax over every class seen so far for both
};

struct ObjectiveOptions {
    bool distill_final = true;        // L2 on f^L against the snapshot
    bool distill_embedding = true;    // stage-wise KL through the aux heads
    bool replay = true;               // CE on generated old-class features
    bool ss_ce_incremental = false;   // also train aux heads with the rotation CE at t >= 1
    bool l2_squared = false;
    CeSupport support = CeSupport::CurrentTask;
    double tau = 3.0;
};

/// A labelled image batch. Labels are global class ids.
struct SolverBatch {
    Tensor images;
    std::vector<std::size_t> labels;
};

/// Generated features with global labels, treated as constants.
struct ReplayBatch {
    Tensor features;
    std::vector<std::size_t> labels;

    std::size_t size() const { return labels.size(); }
};

struct LossBreakdown {
    Var total;
    double ce_final = 0.0;
    double ce_inter = 0.0;
    double ce_replay = 0.0;
    double l2 = 0.0;
    double kl = 0.0;
};

namespace detail {

struct SupportedLogits {
    Var logits;
    std::vector<std::size_t> labels;
};

inline SupportedLogits supported_logits(Solver& solver, Tape& tape, const Var& features,
                                        const std::vector<std::size_t>& labels, std::size_t task, CeSupport support) {
    Var logits = solver.classifier().logits(tape, features);
    if (support == CeSupport::AllSeen) return {logits, labels};
    const std::size_t begin = solver.class_offset(task);
    const std::size_t end = begin + solver.task_sizes().at(task);
    std::vector<std::size_t> local;
    local.reserve(labels.size());
    for (std::size_t y : labels) {
        if (y < begin || y >= end) {
            throw DomainError("label " + std::to_string(y) + " is not in task " + std::to_string(task));
        }
        local.push_back(y - begin);
    }
    return {slice_cols(logits, begin, end), std::move(local)};
}

// Rotation-task labels for the current task's block of the aux heads.
inline std::vector<std::size_t> block_aug_labels(const Solver& solver, const AugmentedBatch& aug, std::size_t task) {
    std::vector<std::size_t> out = aug.aug_labels;
    const std::size_t shift = solver.aux_rotations() * solver.class_offset(task);
    for (std::size_t& y : out) y += shift;
    return out;
}

inline std::vector<std::size_t> local_labels(const Solver& solver, const std::vector<std::size_t>& labels,
                                             std::size_t task) {
    const std::size_t begin = solver.class_offset(task);
    const std::size_t m = solver.task_sizes().at(task);
    std::vector<std::size_t> out;
    out.reserve(labels.size());
    for (std::size_t y : labels) {
        if (y < begin || y >= begin + m) {
            throw DomainError("label " + std::to_string(y) + " is not in task " + std::to_string(task));
        }
        out.push_back(y - begin);
    }
    return out;
}

}  // namespace detail

/// Initial task: ce_final + ce_inter (the latter only when the solver has aux heads).
inline LossBreakdown solver_loss_initial(Tape& tape, Solver& solver, const SolverBatch& batch, std::size_t task,
                                         const ObjectiveOptions& opt) {
    if (task != 0) throw UsageError("solver_loss_initial called for task " + std::to_string(task));
    LossBreakdown out;
    const std::size_t n = batch.labels.size();
    const bool aux = solver.aux_rotations() > 0;

    if (!aux) {
        auto live = solver.forward_all(tape, tape.constant(batch.images));
        auto sup = detail::supported_logits(solver, tape, live.features(), batch.labels, task, opt.support);
        out.total = ce_final(sup.logits, sup.labels);
        out.ce_final = out.total.item();
        return out;
    }

    const auto local = detail::local_labels(solver, batch.labels, task);
    const AugmentedBatch aug =
        augment_rotations(batch.images, local, solver.task_sizes().at(task), solver.aux_rotations());
    auto live = solver.forward_all(tape, tape.constant(aug.images));
    Var features = slice_rows(live.features(), 0, n);
    auto sup = detail::supported_logits(solver, tape, features, batch.labels, task, opt.support);
    Var cf = ce_final(sup.logits, sup.labels);

    std::vector<Var> heads;
    for (std::size_t l = 1; l < solver.config().stages(); ++l)
        heads.push_back(solver.aux_logits(tape, l, live.stages[l - 1]));
    Var ci = ce_inter(heads, detail::block_aug_labels(solver, aug, task), solver.aux_rotations());

    out.total = add(cf, ci);
    out.ce_final = cf.item();
    out.ce_inter = ci.item();
    return out;
}

/// Incremental task: ce_new + lambda * (l2_final + kl_inter), each term
/// switched by `opt`. `replay` may be null when replay is disabled.
inline LossBreakdown solver_loss_incremental(Tape& tape, Solver& solver, const SolverSnapshot& previous,
                                             const SolverBatch& batch, const ReplayBatch* replay,
                                             const LambdaSchedule& lambda, std::size_t task,
                                             const ObjectiveOptions& opt) {
    if (task == 0) throw UsageError("solver_loss_incremental called for the initial task");
    if (!previous) throw UsageError("solver_loss_incremental needs the previous task's snapshot");
    LossBreakdown out;
    const std::size_t n = batch.labels.size();
    const bool use_aux = solver.aux_rotations() > 0 && (opt.distill_embedding || opt.ss_ce_incremental);
    const bool need_teacher = opt.distill_final || (use_aux && opt.distill_embedding);

    Tensor input;
    std::optional<AugmentedBatch> aug;
    if (use_aux) {
        const auto local = detail::local_labels(solver, batch.labels, task);
        aug = augment_rotations(batch.images, local, solver.task_sizes().at(task), solver.aux_rotations());
        input = aug->images;
    } else {
        input = batch.images;
    }

    Var x = tape.constant(std::move(input));
    auto live = solver.forward_all(tape, x);
    Var features = use_aux ? slice_rows(live.features(), 0, n) : live.features();

    auto sup = detail::supported_logits(solver, tape, features, batch.labels, task, opt.support);
    std::optional<Var> replay_logits;
    std::vector<std::size_t> replay_labels;
    const std::size_t old_classes = solver.class_offset(task);
    if (opt.replay && replay != nullptr && replay->size() > 0) {
        for (std::size_t y : replay->labels) {
            if (y >= old_classes) {
                throw DomainError("generated label " + std::to_string(y) + " is not a learned class (< " +
                                  std::to_string(old_classes) + ")");
            }
        }
        Var all = solver.classifier().logits(tape, tape.constant(replay->features));
        // AllSeen scores replayed features against every seen class as well.
        replay_logits = opt.support == CeSupport::AllSeen ? all : slice_cols(all, 0, old_classes);
        replay_labels = replay->labels;
    }
    Var total = ce_new(sup.logits, sup.labels, replay_logits, replay_labels, lambda.value());
    out.ce_final = ce_final(sup.logits, sup.labels).item();
    out.ce_replay = replay_logits ? ce_final(*replay_logits, replay_labels).item() : 0.0;

    std::vector<Var> student_heads;
    if (use_aux) {
        for (std::size_t l = 1; l < solver.config().stages(); ++l)
            student_heads.push_back(solver.aux_logits(tape, l, live.stages[l - 1]));
    }

    std::optional<Var> distill;
    if (need_teacher) {
        auto teacher = previous.forward_all(tape, x);
        if (opt.distill_final) {
            Var teacher_features = use_aux ? slice_rows(teacher.features(), 0, n) : teacher.features();
            Var l2 = l2_final(features, teacher_features, opt.l2_squared);
            out.l2 = l2.item();
            distill = l2;
        }
        if (use_aux && opt.distill_embedding) {
            std::vector<Var> teacher_heads;
            for (std::size_t l = 1; l < solver.config().stages(); ++l)
                teacher_heads.push_back(previous.aux_logits(tape, l, teacher.stages[l - 1]));
            Var kl = kl_inter(student_heads, teacher_heads, opt.tau);
            out.kl = kl.item();
            distill = distill ? add(*distill, kl) : kl;
        }
    }
    if (distill) total = add(total, scale(*distill, lambda.value()));

    if (use_aux && opt.ss_ce_incremental) {
        Var ci = ce_inter(student_heads, detail::block_aug_labels(solver, *aug, task), solver.aux_rotations());
        out.ce_inter = ci.item();
        total = add(total, ci);
    }

    out.total = total;
    return out;
}

}  // namespace etag
