#include <gtest/gtest.h>

#include <cmath>

#include "etag/generator.hpp"
#include "etag/losses.hpp"

using namespace etag;

namespace {

StageConfig toy_config() {
    StageConfig c;
    c.input_size = 8;
    c.input_channels = 1;
    c.widths = {3, 4, 5, 6};
    return c;
}

Tensor images(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    return standard_normal(Shape{n, 8, 8, 1}, rng);
}

// Logit row whose softmax puts probability `p` on column `target` out of `k`.
std::vector<double> row_with_target_probability(double p, std::size_t target, std::size_t k) {
    std::vector<double> row(k, 0.0);
    row[target] = std::log(p * static_cast<double>(k - 1) / (1.0 - p));
    return row;
}

}  // namespace

// ---- ce_final ----

TEST(CeFinal, UniformTwoClassIsLnTwo) {
    Tape t;
    EXPECT_NEAR(ce_final(t.constant(Tensor::matrix(1, 2, {0, 0})), {0}).item(), std::log(2.0), 1e-15);
}

TEST(CeFinal, ConfidentCorrectApproachesZero) {
    Tape t;
    EXPECT_LT(ce_final(t.constant(Tensor::matrix(1, 3, {60, 0, 0})), {0}).item(), 1e-20);
}

TEST(CeFinal, DuplicatedSampleMatchesSingle) {
    Tape t;
    const double one = ce_final(t.constant(Tensor::matrix(1, 3, {0.3, -1, 2})), {1}).item();
    const double two = ce_final(t.constant(Tensor::matrix(2, 3, {0.3, -1, 2, 0.3, -1, 2})), {1, 1}).item();
    EXPECT_DOUBLE_EQ(one, two);
}

TEST(CeFinal, EmptyBatchIsDomainError) {
    Tape t;
    EXPECT_THROW(ce_final(t.constant(Tensor(Shape{0, 2})), {}), DomainError);
}

// ---- ce_inter ----

TEST(CeInter, UniformHeadsSumLogOfWidth) {
    const std::size_t m = 3, n = 2;
    Tape t;
    std::vector<Var> heads;
    for (int l = 0; l < 3; ++l) heads.push_back(t.constant(Tensor(Shape{4 * n, 4 * m})));
    std::vector<std::size_t> labels{0, 1, 3, 4, 6, 7, 9, 11};
    EXPECT_NEAR(ce_inter(heads, labels).item(), 3.0 * std::log(12.0), 1e-12);
}

TEST(CeInter, PerTermLnTwoOverThreeStages) {
    // width 8 (m = 2), each row puts 1/2 on its label
    const std::size_t n = 2;
    std::vector<std::size_t> labels;
    std::vector<double> values;
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t y = r * 2 + i;
            labels.push_back(y);
            auto row = row_with_target_probability(0.5, y, 8);
            values.insert(values.end(), row.begin(), row.end());
        }
    Tape t;
    std::vector<Var> heads(3, t.constant(Tensor::matrix(4 * n, 8, values)));
    const double oracle = 0.25 * 4.0 * 3.0 * std::log(2.0);
    EXPECT_NEAR(ce_inter(heads, labels).item(), oracle, 1e-12);
    EXPECT_NEAR(oracle, 2.0794, 1e-4);
}

TEST(CeInter, PerfectHeadsApproachZero) {
    Tape t;
    std::vector<double> v(4 * 4, 0.0);
    for (std::size_t r = 0; r < 4; ++r) v[r * 4 + r] = 80.0;
    std::vector<Var> heads{t.constant(Tensor::matrix(4, 4, v))};
    EXPECT_LT(ce_inter(heads, {0, 1, 2, 3}).item(), 1e-30);
}

TEST(CeInter, Errors) {
    Tape t;
    std::vector<Var> heads{t.constant(Tensor(Shape{4, 4}))};
    EXPECT_THROW(ce_inter(heads, {0, 1, 2, 3}, 2), DomainError);
    EXPECT_THROW(ce_inter({}, {0, 1, 2, 3}), DomainError);
    EXPECT_THROW(ce_inter(heads, {0, 1, 2}), ShapeError);
}

// ---- l2_final ----

TEST(L2Final, Examples) {
    Tape t;
    EXPECT_EQ(l2_final(t.constant(Tensor::matrix(1, 2, {1, 2})), t.constant(Tensor::matrix(1, 2, {1, 2}))).item(), 0.0);
    EXPECT_DOUBLE_EQ(l2_final(t.constant(Tensor::matrix(1, 2, {1, 2})), t.constant(Tensor::matrix(1, 2, {1, 0}))).item(),
                     2.0);
    EXPECT_DOUBLE_EQ(
        l2_final(t.constant(Tensor::matrix(2, 2, {1, 0, 0, 3})), t.constant(Tensor::matrix(2, 2, {0, 0, 0, 0}))).item(),
        2.0);
    EXPECT_DOUBLE_EQ(l2_final(t.constant(Tensor::matrix(2, 2, {1, 0, 0, 3})), t.constant(Tensor(Shape{2, 2})), true)
                         .item(),
                     5.0);
}

TEST(L2Final, ShapeMismatch) {
    Tape t;
    EXPECT_THROW(l2_final(t.constant(Tensor(Shape{1, 2})), t.constant(Tensor(Shape{1, 3}))), ShapeError);
}

TEST(L2Final, TeacherIsDetached) {
    Tensor live = Tensor::matrix(1, 2, {3, 4}), old = Tensor::matrix(1, 2, {0, 0});
    live.requires_grad = old.requires_grad = true;
    Tape t;
    t.backward(l2_final(t.leaf(live), t.leaf(old)));
    EXPECT_NEAR(live.grad[0], 0.6, 1e-15);
    EXPECT_NEAR(live.grad[1], 0.8, 1e-15);
    EXPECT_TRUE(old.grad.empty());
}

// ---- kl_inter ----

TEST(KlInter, IdenticalLogitsGiveZero) {
    Rng rng(1);
    Tape t;
    std::vector<Var> a;
    for (int l = 0; l < 3; ++l) a.push_back(t.constant(standard_normal(Shape{5, 8}, rng)));
    EXPECT_EQ(kl_inter(a, a, 3.0).item(), 0.0);
}

TEST(KlInter, PerPairPointOneOverThreeStagesAtTauThree) {
    // old rows uniform over 2; new rows at probability q with KL(u || q) = 0.1
    const double tau = 3.0;
    const double q = 0.5 * (1.0 - std::sqrt(1.0 - std::exp(-0.2)));
    ASSERT_NEAR(0.5 * std::log(0.5 / q) + 0.5 * std::log(0.5 / (1.0 - q)), 0.1, 1e-15);
    const double logit = tau * std::log(q / (1.0 - q));
    Tape t;
    std::vector<Var> old_heads(3, t.constant(Tensor::matrix(4, 2, std::vector<double>(8, 0.0))));
    // extra trailing column must be ignored by the slice
    std::vector<double> nv;
    for (int r = 0; r < 4; ++r) nv.insert(nv.end(), {logit, 0.0, 17.0});
    std::vector<Var> new_heads(3, t.constant(Tensor::matrix(4, 3, nv)));
    EXPECT_NEAR(kl_inter(new_heads, old_heads, tau).item(), 0.25 * 4.0 * 3.0 * 9.0 * 0.1, 1e-9);
}

TEST(KlInter, SliceWidthMismatchIsShapeError) {
    Tape t;
    std::vector<Var> narrow{t.constant(Tensor(Shape{2, 2}))}, wide{t.constant(Tensor(Shape{2, 4}))};
    EXPECT_THROW(kl_inter(narrow, wide, 3.0), ShapeError);
    EXPECT_THROW(kl_inter(wide, {}, 3.0), ShapeError);
}

// ---- lambda ----

TEST(Lambda, FiftyPlusFiveTimesTen) {
    const std::vector<std::size_t> sizes{50, 10, 10, 10, 10, 10};
    EXPECT_DOUBLE_EQ(LambdaSchedule::at(sizes, 0).value(), 0.0);
    std::vector<double> got;
    for (std::size_t t = 1; t <= 5; ++t) got.push_back(LambdaSchedule::at(sizes, t).value());
    EXPECT_EQ(got, (std::vector<double>{5, 6, 7, 8, 9}));
    EXPECT_THROW(LambdaSchedule::at(sizes, 6), DomainError);
}

TEST(Lambda, StrictlyIncreasingForEqualIncrements) {
    const std::vector<std::size_t> sizes{4, 2, 2, 2, 2, 2, 2};
    for (std::size_t t = 1; t + 1 < sizes.size(); ++t)
        EXPECT_LT(LambdaSchedule::at(sizes, t).value(), LambdaSchedule::at(sizes, t + 1).value());
}

TEST(Lambda, TemperatureMustBePositive) {
    EXPECT_THROW(DistillTemperature(0.0), DomainError);
    EXPECT_DOUBLE_EQ(DistillTemperature().tau, 3.0);
}

// ---- ce_new ----

TEST(CeNew, WeightIsPreviousOverCurrent) {
    EXPECT_DOUBLE_EQ(LambdaSchedule::at({50, 10}, 1).value(), 5.0);
}

TEST(CeNew, NoReplayReducesToCeFinal) {
    Tape t;
    Var cur = t.constant(Tensor::matrix(2, 3, {1, 2, 3, 0, -1, 4}));
    EXPECT_EQ(ce_new(cur, {0, 2}, std::nullopt, {}, 5.0).item(), ce_final(cur, {0, 2}).item());
}

TEST(CeNew, UniformOldRowsGiveLambdaLnFifty) {
    Tape t;
    Var cur = t.constant(Tensor::matrix(1, 2, {0, 0}));
    Var old = t.constant(Tensor(Shape{3, 50}));
    const double got = ce_new(cur, {0}, old, {0, 17, 49}, 5.0).item();
    EXPECT_NEAR(got - std::log(2.0), 5.0 * std::log(50.0), 1e-12);
}

TEST(CeNew, UnlearnedGeneratedLabelIsDomainError) {
    Tape t;
    Var cur = t.constant(Tensor::matrix(1, 2, {0, 0}));
    EXPECT_THROW(ce_new(cur, {0}, t.constant(Tensor(Shape{1, 4})), {4}, 1.0), DomainError);
}

// ---- composition ----

TEST(Compose, Arithmetic) {
    EXPECT_DOUBLE_EQ(combine_initial(0.0, 0.0), 0.0);
    EXPECT_DOUBLE_EQ(combine_initial(0.7, 2.1), 2.8);
    EXPECT_DOUBLE_EQ(combine_incremental(1.0, 5.0, 0.2, 0.3), 3.5);
}

TEST(SolverLossInitial, IsCeFinalPlusCeInter) {
    Rng rng(2);
    Solver s(toy_config(), 3, 4, rng);
    SolverBatch b{images(4, 3), {0, 1, 2, 1}};
    Tape t;
    auto out = solver_loss_initial(t, s, b, 0, ObjectiveOptions{});
    EXPECT_NEAR(out.total.item(), out.ce_final + out.ce_inter, 1e-12);
    EXPECT_GT(out.ce_inter, 0.0);

    // ce_final alone, recomputed by hand
    Tape t2;
    Var f = s.forward_all(t2, t2.constant(b.images)).features();
    EXPECT_NEAR(out.ce_final, cross_entropy(s.classifier().logits(t2, f), b.labels).item(), 1e-12);
}

TEST(SolverLossInitial, CalledAfterFirstTaskIsUsageError) {
    Rng rng(2);
    Solver s(toy_config(), 3, 4, rng);
    Tape t;
    EXPECT_THROW(solver_loss_initial(t, s, SolverBatch{images(1, 1), {0}}, 1, ObjectiveOptions{}), UsageError);
}

TEST(SolverLossIncremental, SnapshotEqualToLiveReducesToCeFinal) {
    Rng rng(4);
    Solver s(toy_config(), 2, 4, rng);
    s.expand(2, rng);
    SolverSnapshot snap = snapshot(s);
    SolverBatch b{images(3, 5), {2, 3, 2}};
    for (CeSupport support : {CeSupport::CurrentTask, CeSupport::AllSeen}) {
        ObjectiveOptions opt;
        opt.support = support;
        Tape t;
        auto out = solver_loss_incremental(t, s, snap, b, nullptr, LambdaSchedule::at(s.task_sizes(), 1), 1, opt);
        EXPECT_EQ(out.l2, 0.0);
        EXPECT_EQ(out.kl, 0.0);
        EXPECT_EQ(out.total.item(), out.ce_final);
    }
}

TEST(SolverLossIncremental, MissingSnapshotIsUsageError) {
    Rng rng(4);
    Solver s(toy_config(), 2, 4, rng);
    s.expand(2, rng);
    Tape t;
    EXPECT_THROW(solver_loss_incremental(t, s, SolverSnapshot{}, SolverBatch{images(1, 1), {2}}, nullptr,
                                         LambdaSchedule::at(s.task_sizes(), 1), 1, ObjectiveOptions{}),
                 UsageError);
}

TEST(SolverLossIncremental, TotalMatchesStatedFormAndIsNonNegative) {
    Rng rng(6);
    Solver s(toy_config(), 2, 4, rng);
    SolverSnapshot snap = snapshot(s);
    s.expand(2, rng);
    for (Tensor* p : s.parameters())
        for (double& v : p->values) v += 0.05;
    ReplayBatch replay{standard_normal(Shape{3, 6}, rng), {0, 1, 1}};
    SolverBatch b{images(3, 7), {2, 3, 3}};
    const LambdaSchedule lambda = LambdaSchedule::at(s.task_sizes(), 1);
    Tape t;
    auto out = solver_loss_incremental(t, s, snap, b, &replay, lambda, 1, ObjectiveOptions{});
    EXPECT_GT(out.l2, 0.0);
    EXPECT_GT(out.kl, 0.0);
    EXPECT_GT(out.ce_replay, 0.0);
    const double ce_new_value = out.ce_final + lambda.value() * out.ce_replay;
    EXPECT_NEAR(out.total.item(), combine_incremental(ce_new_value, lambda.value(), out.l2, out.kl), 1e-12);
    EXPECT_GE(out.total.item(), 0.0);
}

TEST(SolverLossIncremental, NoGradientReachesSnapshotOrReplayProducer) {
    Rng rng(8);
    Solver s(toy_config(), 2, 4, rng);
    SolverSnapshot snap = snapshot(s);
    s.expand(2, rng);
    GeneratorConfig gc;
    gc.feature_dim = 6;
    gc.latent_dim = 3;
    gc.hidden = 5;
    Generator gen(gc, 2, rng);
    GeneratorSnapshot frozen_gen(gen);
    ReplayBatch replay = sample_features(frozen_gen.generator(), {0, 1}, 2, rng);
    SolverBatch b{images(2, 9), {2, 3}};
    for (Tensor* p : s.parameters()) p->zero_grad();
    Tape t;
    auto out = solver_loss_incremental(t, s, snap, b, &replay, LambdaSchedule::at(s.task_sizes(), 1), 1,
                                       ObjectiveOptions{});
    t.backward(out.total);
    for (const auto& [name, p] : snap.solver().named_parameters()) EXPECT_TRUE(p->grad.empty()) << name;
    for (const auto& [name, p] : frozen_gen.generator().named_parameters()) EXPECT_TRUE(p->grad.empty()) << name;
    for (const auto& [name, p] : gen.named_parameters()) EXPECT_TRUE(p->grad.empty()) << name;
    double live_norm = 0.0;
    for (double g : s.classifier().weight().grad) live_norm += std::abs(g);
    EXPECT_GT(live_norm, 0.0);
}

TEST(SolverLossIncremental, ReplayLabelMustBeLearned) {
    Rng rng(8);
    Solver s(toy_config(), 2, 4, rng);
    SolverSnapshot snap = snapshot(s);
    s.expand(2, rng);
    ReplayBatch replay{Tensor(Shape{1, 6}), {2}};
    Tape t;
    EXPECT_THROW(solver_loss_incremental(t, s, snap, SolverBatch{images(1, 1), {2}}, &replay,
                                         LambdaSchedule::at(s.task_sizes(), 1), 1, ObjectiveOptions{}),
                 DomainError);
}

// One schedule instance drives the replay CE weight, the distillation weight,
// and the generator's reconstruction weight.
TEST(Lambda, SharedAcrossSolverAndGeneratorObjectives) {
    Rng rng(10);
    Solver s(toy_config(), 4, 4, rng);
    SolverSnapshot snap = snapshot(s);
    s.expand(2, rng);
    const LambdaSchedule lambda = LambdaSchedule::at(s.task_sizes(), 1);
    ASSERT_DOUBLE_EQ(lambda.value(), 2.0);
    for (Tensor* p : s.parameters())
        for (double& v : p->values) v *= 1.1;

    ReplayBatch replay{standard_normal(Shape{2, 6}, rng), {0, 3}};
    SolverBatch b{images(2, 11), {4, 5}};
    Tape t;
    auto out = solver_loss_incremental(t, s, snap, b, &replay, lambda, 1, ObjectiveOptions{});
    // solve total = ce + w_ce * replay + w_d * (l2 + kl) for both weights using a second lambda
    const double rest = out.total.item() - out.ce_final;
    EXPECT_NEAR(rest, lambda.value() * (out.ce_replay + out.l2 + out.kl), 1e-12);

    Tape g;
    Var newer = g.constant(Tensor::scalar(1.25));
    Var older = g.constant(Tensor::scalar(0.75));
    EXPECT_NEAR(generator_loss(1, newer, older, lambda.value()).item(), 1.25 + lambda.value() * 0.75, 1e-15);
}
