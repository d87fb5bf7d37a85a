#pragma once

// Named finite-difference checks over every primitive and composed loss.
// `inject_fault` flips the sign of the backward pass of one named check so
// the suite's own failure path can be exercised.

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "etag/augmentation.hpp"
#include "etag/autodiff.hpp"
#include "etag/generator.hpp"
#include "etag/gradcheck.hpp"
#include "etag/losses.hpp"
#include "etag/random.hpp"
#include "etag/solver.hpp"

namespace etag {

struct GradCheckOptions {
    std::size_t points = 10;
    double eps = 1e-5;
    double tolerance = 1e-4;
    std::uint64_t seed = 0;
    std::string inject_fault;  // check name whose backward is sign-flipped
};

struct GradCheckResult {
    std::string name;
    double max_error = 0.0;
    std::size_t points = 0;
    bool passed = false;
    double seconds = 0.0;
};

/// Identity forward, negated backward.
inline Var negate_gradient(const Var& a) {
    return a.tape()->record(a.value(), {a}, [](Tape& t, std::size_t self) {
        const std::vector<double> g = t.grad(self);
        auto& gi = t.grad(t.input(self, 0));
        for (std::size_t k = 0; k < g.size(); ++k) gi[k] -= g[k];
    });
}

namespace detail {

// One check: given a point index and the fault flag, return the max error at that point.
struct SuiteCheck {
    std::string name;
    std::function<double(std::size_t point, bool fault, const GradCheckOptions&)> run;
};

inline Tensor uniform_tensor(const Shape& s, double lo, double hi, Rng& rng) {
    Tensor t(s);
    std::uniform_real_distribution<double> d(lo, hi);
    for (double& v : t.values) v = d(rng);
    return t;
}

// Views of a flat input as several tensors, in order.
inline std::vector<Var> split_input(const Var& x, const std::vector<Shape>& shapes) {
    std::vector<Var> out;
    Var row = reshape(x, Shape{1, x.size()});
    std::size_t at = 0;
    for (const Shape& s : shapes) {
        const std::size_t n = element_count(s);
        out.push_back(reshape(slice_cols(row, at, at + n), s));
        at += n;
    }
    return out;
}

inline std::size_t total_size(const std::vector<Shape>& shapes) {
    std::size_t n = 0;
    for (const Shape& s : shapes) n += element_count(s);
    return n;
}

// Scalarize a tensor output with fixed random weights so the full Jacobian is probed.
inline Var project(const Var& out, const Tensor& weights) {
    Var w = out.tape()->constant(weights);
    return sum(mul(reshape(out, weights.shape), w));
}

using Body = std::function<Var(const std::vector<Var>&)>;

// Check an op over inputs drawn from [lo, hi]; non-scalar outputs are projected.
inline SuiteCheck op_check(std::string name, std::vector<Shape> shapes, Body body, double lo = -1.5, double hi = 1.5) {
    const std::string label = name;
    return {label, [=](std::size_t point, bool fault, const GradCheckOptions& opt) {
                Rng rng = make_stream(opt.seed + point, point, Purpose::Test);
                const Tensor x0 = uniform_tensor(Shape{total_size(shapes)}, lo, hi, rng);
                std::optional<Tensor> weights;
                auto closure = [&](Tape&, const Var& x) {
                    Var out = body(split_input(x, shapes));
                    if (fault) out = negate_gradient(out);
                    if (out.size() == 1 && out.shape().empty()) return out;
                    if (!weights) weights = standard_normal(Shape{out.size()}, rng);
                    return project(out, *weights);
                };
                return grad_check(closure, x0, opt.eps);
            }};
}

// ---- toy models for composed losses ----

inline StageConfig toy_stages() {
    StageConfig c;
    c.input_size = 4;
    c.input_channels = 1;
    c.widths = {2, 3, 3};
    return c;
}

inline Var maybe_fault(const Var& v, bool fault) { return fault ? negate_gradient(v) : v; }

// Move every coordinate off its initial value. Zero-initialized biases would
// otherwise sit exactly on a ReLU kink whenever a narrow layer's inputs die.
inline void jitter(const std::vector<Tensor*>& params, Rng& rng, double sd = 0.1) {
    std::normal_distribution<double> d(0.0, sd);
    for (Tensor* p : params)
        for (double& v : p->values) v += d(rng);
}

struct ToyIncremental {
    Solver solver;
    SolverSnapshot previous;
    Generator generator;
    GeneratorSnapshot previous_generator;
    SolverBatch batch;
    ReplayBatch replay;
};

// Task 0 with 2 classes, task 1 with 2 classes; the live model drifts from its snapshot.
inline ToyIncremental make_toy_incremental(std::size_t point, std::uint64_t seed, std::size_t rotations) {
    Rng rng = make_stream(seed + point, point, Purpose::Test);
    ToyIncremental toy{Solver(toy_stages(), 2, rotations, rng), {}, Generator(GeneratorConfig{3, 2, 5}, 2, rng), {}, {},
                       {}};
    toy.previous = snapshot(toy.solver);
    toy.previous_generator = GeneratorSnapshot(toy.generator);
    jitter(toy.solver.parameters(), rng);
    toy.solver.expand(2, rng);
    toy.generator.expand(2, rng);
    jitter(toy.generator.parameters(), rng);
    toy.batch.images = standard_normal(Shape{3, 4, 4, 1}, rng);
    toy.batch.labels = {2, 3, 2};
    toy.replay.features = standard_normal(Shape{3, 3}, rng);
    toy.replay.labels = {0, 1, 1};
    return toy;
}

inline std::vector<SuiteCheck> suite_checks() {
    std::vector<SuiteCheck> checks;
    auto add_op = [&](SuiteCheck c) { checks.push_back(std::move(c)); };
    using V = const std::vector<Var>&;

    // ---- primitives ----
    add_op(op_check("add", {{3, 4}, {3, 4}}, [](V v) { return add(v[0], v[1]); }));
    add_op(op_check("sub", {{3, 4}, {3, 4}}, [](V v) { return sub(v[0], v[1]); }));
    add_op(op_check("mul", {{3, 4}, {3, 4}}, [](V v) { return mul(v[0], v[1]); }));
    add_op(op_check("scale", {{5}}, [](V v) { return scale(v[0], -2.5); }));
    add_op(op_check("add_scalar", {{5}}, [](V v) { return add_scalar(v[0], 0.75); }));
    add_op(op_check("relu", {{4, 5}}, [](V v) { return relu(v[0]); }));
    add_op(op_check("log", {{6}}, [](V v) { return log(v[0]); }, 0.3, 2.0));
    add_op(op_check("exp", {{6}}, [](V v) { return exp(v[0]); }));
    add_op(op_check("sum", {{3, 4}}, [](V v) { return sum(v[0]); }));
    add_op(op_check("mean", {{3, 4}}, [](V v) { return mean(v[0]); }));
    add_op(op_check("sq_norm_rows", {{3, 4}}, [](V v) { return sq_norm_rows(v[0]); }));
    add_op(op_check("norm_rows", {{3, 4}}, [](V v) { return norm_rows(v[0]); }));
    add_op(op_check("reshape", {{3, 4}}, [](V v) { return reshape(v[0], Shape{2, 6}); }));
    add_op(op_check("concat_cols", {{3, 2}, {3, 4}}, [](V v) { return concat_cols(v[0], v[1]); }));
    add_op(op_check("slice_cols", {{3, 5}}, [](V v) { return slice_cols(v[0], 1, 4); }));
    add_op(op_check("slice_rows", {{4, 3}}, [](V v) { return slice_rows(v[0], 1, 3); }));
    add_op(op_check("transpose", {{3, 4}}, [](V v) { return transpose(v[0]); }));
    add_op(op_check("rotate90", {{2, 3, 3, 2}}, [](V v) { return add(rotate90(v[0], 1), rotate90(v[0], 3)); }));
    add_op(op_check("matmul", {{3, 4}, {4, 2}}, [](V v) { return matmul(v[0], v[1]); }));
    add_op(op_check("add_bias", {{3, 4}, {4}}, [](V v) { return add_bias(v[0], v[1]); }));
    add_op(op_check("conv2d_stride1", {{2, 5, 5, 2}, {3, 3, 2, 3}, {3}},
                    [](V v) { return conv2d(v[0], v[1], v[2], 1); }));
    add_op(op_check("conv2d_stride2", {{2, 5, 5, 2}, {3, 3, 2, 3}, {3}},
                    [](V v) { return conv2d(v[0], v[1], v[2], 2); }));
    add_op(op_check("global_avg_pool", {{2, 3, 3, 4}}, [](V v) { return global_avg_pool(v[0]); }));
    add_op(op_check("softmax", {{3, 5}}, [](V v) { return softmax(v[0], 1.0); }));
    add_op(op_check("softmax_tau3", {{3, 5}}, [](V v) { return softmax(v[0], 3.0); }));
    add_op(op_check("log_softmax", {{3, 5}}, [](V v) { return log_softmax(v[0], 2.0); }));
    add_op(op_check("kl_divergence", {{3, 4}, {3, 4}},
                    [](V v) { return kl_divergence(softmax(v[0]), softmax(v[1])); }));
    add_op(op_check("cross_entropy", {{4, 3}},
                    [](V v) { return cross_entropy(v[0], std::vector<std::size_t>{0, 2, 1, 2}); }));
    add_op(op_check("one_hot_concat", {{3, 2}}, [](V v) {
        return concat_cols(v[0], v[0].tape()->constant(one_hot({1, 0, 2}, 3)));
    }));
    add_op(op_check("gaussian_sample", {{3, 2}, {3, 2}}, [](V v) {
        Tensor eps = Tensor::matrix(3, 2, {0.3, -1.2, 0.9, 0.1, -0.4, 1.7});
        return gaussian_sample(v[0], v[1], eps);
    }));

    // ---- composed losses over tensors ----
    add_op(op_check("ce_final", {{4, 3}},
                    [](V v) { return ce_final(v[0], std::vector<std::size_t>{1, 1, 0, 2}); }));
    // Teachers are fixed tensors: the losses detach them, so they must not move with the probe.
    add_op(op_check("l2_final", {{3, 4}}, [](V v) {
        Rng fixed(11);
        return l2_final(v[0], v[0].tape()->constant(standard_normal(Shape{3, 4}, fixed)));
    }));
    add_op(op_check("kl_inter", {{4, 8}, {4, 8}}, [](V v) {
        Tape& t = *v[0].tape();
        Rng fixed(12);
        // new heads are wider than the old ones
        Var old1 = t.constant(standard_normal(Shape{4, 4}, fixed));
        Var old2 = t.constant(standard_normal(Shape{4, 4}, fixed));
        return kl_inter({v[0], v[1]}, {old1, old2}, 3.0);
    }));
    add_op(op_check("ce_new", {{3, 2}, {4, 3}}, [](V v) {
        std::optional<Var> replay = v[1];
        return ce_new(v[0], {0, 1, 1}, replay, {0, 2, 1, 1}, 1.5);
    }));
    add_op(op_check("prior_kl", {{3, 2}, {3, 2}}, [](V v) { return prior_kl(v[0], v[1]); }));
    add_op(op_check("gaussian_reconstruction", {{3, 4}, {3, 4}},
                    [](V v) { return gaussian_reconstruction(v[0], v[1]); }));

    // ---- composed losses over model parameters ----
    checks.push_back({"ce_inter", [](std::size_t point, bool fault, const GradCheckOptions& opt) {
                          Rng rng = make_stream(opt.seed + point, point, Purpose::Test);
                          Solver solver(toy_stages(), 3, kRotations, rng);
                          jitter(solver.parameters(), rng);
                          const Tensor images = standard_normal(Shape{2, 4, 4, 1}, rng);
                          const AugmentedBatch aug = augment_rotations(images, {0, 2}, 3);
                          std::vector<Tensor*> params;
                          for (auto& a : solver.aux())
                              for (Tensor* p : a.parameters()) params.push_back(p);
                          for (auto& b : solver.extractor().blocks()) {
                              params.push_back(&b.weight);
                              params.push_back(&b.bias);
                          }
                          return grad_check_params(
                              [&](Tape& t) {
                                  auto live = solver.forward_all(t, t.constant(aug.images));
                                  std::vector<Var> heads;
                                  for (std::size_t l = 1; l < solver.config().stages(); ++l)
                                      heads.push_back(solver.aux_logits(t, l, live.stages[l - 1]));
                                  return maybe_fault(ce_inter(heads, aug.aug_labels), fault);
                              },
                              params, opt.eps);
                      }});
    checks.push_back({"solver_loss_initial", [](std::size_t point, bool fault, const GradCheckOptions& opt) {
                          Rng rng = make_stream(opt.seed + point, point, Purpose::Test);
                          Solver solver(toy_stages(), 3, kRotations, rng);
                          jitter(solver.parameters(), rng);
                          SolverBatch batch{standard_normal(Shape{3, 4, 4, 1}, rng), {0, 2, 1}};
                          return grad_check_params(
                              [&](Tape& t) {
                                  return maybe_fault(solver_loss_initial(t, solver, batch, 0, ObjectiveOptions{}).total,
                                                     fault);
                              },
                              solver.parameters(), opt.eps);
                      }});
    checks.push_back({"solver_loss_incremental", [](std::size_t point, bool fault, const GradCheckOptions& opt) {
                          ToyIncremental toy = make_toy_incremental(point, opt.seed, kRotations);
                          ObjectiveOptions o;
                          o.ss_ce_incremental = point % 2 == 1;  // both settings of the flag
                          const LambdaSchedule lambda = LambdaSchedule::at(toy.solver.task_sizes(), 1);
                          return grad_check_params(
                              [&](Tape& t) {
                                  return maybe_fault(solver_loss_incremental(t, toy.solver, toy.previous, toy.batch,
                                                                             &toy.replay, lambda, 1, o)
                                                         .total,
                                                     fault);
                              },
                              toy.solver.parameters(), opt.eps);
                      }});
    checks.push_back({"vae_loss_new", [](std::size_t point, bool fault, const GradCheckOptions& opt) {
                          ToyIncremental toy = make_toy_incremental(point, opt.seed, 0);
                          Rng rng = make_stream(opt.seed + point, point, Purpose::VaeNoise);
                          const SolverSnapshot frozen = snapshot(toy.solver);
                          const Tensor f = standard_normal(Shape{4, 3}, rng);
                          const std::vector<std::size_t> y{0, 3, 2, 1};
                          const Tensor e1 = standard_normal(Shape{4, 2}, rng);
                          const Tensor e2 = standard_normal(Shape{4, 2}, rng);
                          return grad_check_params(
                              [&](Tape& t) {
                                  return maybe_fault(
                                      vae_loss_new(t, toy.generator, f, y, frozen.classifier(), e1, e2, true).total,
                                      fault);
                              },
                              toy.generator.parameters(), opt.eps);
                      }});
    checks.push_back({"vae_loss_old", [](std::size_t point, bool fault, const GradCheckOptions& opt) {
                          ToyIncremental toy = make_toy_incremental(point, opt.seed, 0);
                          Rng rng = make_stream(opt.seed + point, point, Purpose::VaeNoise);
                          const Tensor z = standard_normal(Shape{4, 2}, rng);
                          const std::vector<std::size_t> y{0, 1, 1, 0};
                          return grad_check_params(
                              [&](Tape& t) {
                                  return maybe_fault(vae_loss_old(t, toy.generator, toy.previous_generator, y, z), fault);
                              },
                              toy.generator.parameters(), opt.eps);
                      }});
    checks.push_back({"generator_loss", [](std::size_t point, bool fault, const GradCheckOptions& opt) {
                          ToyIncremental toy = make_toy_incremental(point, opt.seed, 0);
                          Rng rng = make_stream(opt.seed + point, point, Purpose::VaeNoise);
                          const SolverSnapshot frozen = snapshot(toy.solver);
                          const Tensor f = standard_normal(Shape{4, 3}, rng);
                          const std::vector<std::size_t> y{2, 3, 3, 2};
                          const Tensor e1 = standard_normal(Shape{4, 2}, rng);
                          const Tensor e2 = standard_normal(Shape{4, 2}, rng);
                          const Tensor z = standard_normal(Shape{4, 2}, rng);
                          const std::vector<std::size_t> old_y{0, 1, 0, 1};
                          const double lambda = LambdaSchedule::at(toy.solver.task_sizes(), 1).value();
                          return grad_check_params(
                              [&](Tape& t) {
                                  Var fresh =
                                      vae_loss_new(t, toy.generator, f, y, frozen.classifier(), e1, e2, true).total;
                                  Var old = vae_loss_old(t, toy.generator, toy.previous_generator, old_y, z);
                                  return maybe_fault(generator_loss(1, fresh, old, lambda), fault);
                              },
                              toy.generator.parameters(), opt.eps);
                      }});
    return checks;
}

}  // namespace detail

/// Names of every check, in report order.
inline std::vector<std::string> grad_check_names() {
    std::vector<std::string> out;
    for (const auto& c : detail::suite_checks()) out.push_back(c.name);
    return out;
}

inline std::vector<GradCheckResult> run_grad_suite(const GradCheckOptions& opt = {}) {
    std::vector<GradCheckResult> out;
    for (const auto& check : detail::suite_checks()) {
        const auto start = std::chrono::steady_clock::now();
        GradCheckResult r;
        r.name = check.name;
        const bool fault = check.name == opt.inject_fault;
        for (std::size_t p = 0; p < opt.points; ++p) {
            r.max_error = std::max(r.max_error, check.run(p, fault, opt));
            ++r.points;
        }
        r.passed = r.max_error < opt.tolerance;
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        out.push_back(r);
    }
    return out;
}

}  // namespace etag
