#include <gtest/gtest.h>

#include <cmath>

#include "etag/losses.hpp"
#include "etag/solver.hpp"

using namespace etag;

namespace {

StageConfig small_config(std::vector<std::size_t> widths = {4, 6, 8, 8}) {
    StageConfig c;
    c.input_size = 8;
    c.input_channels = 1;
    c.widths = std::move(widths);
    return c;
}

void zero_all(Solver& s) {
    for (Tensor* p : s.parameters()) std::fill(p->values.begin(), p->values.end(), 0.0);
}

Tensor images(std::size_t n, std::uint64_t seed, std::size_t size = 8) {
    Rng rng(seed);
    return standard_normal(Shape{n, size, size, 1}, rng);
}

}  // namespace

TEST(StageConfig, Validation) {
    EXPECT_THROW(small_config({4}).validate(), DomainError);
    EXPECT_THROW(small_config({4, 0}).validate(), DomainError);
    EXPECT_NO_THROW(small_config().validate());
    EXPECT_EQ(small_config().spatial_after(1), 4u);
    EXPECT_EQ(small_config().spatial_after(3), 1u);
}

TEST(Extractor, ZeroWeightsGiveZeroStages) {
    Rng rng(1);
    Solver s(small_config(), 3, 4, rng);
    zero_all(s);
    Tape t;
    auto out = s.forward_all(t, t.constant(Tensor(Shape{2, 8, 8, 1})));
    for (const Var& v : out.stages)
        for (double x : v.value().values) EXPECT_EQ(x, 0.0);
}

TEST(Extractor, ReturnsOneOutputPerStage) {
    Rng rng(2);
    Solver s(small_config(), 3, 4, rng);
    Tape t;
    auto out = s.forward_all(t, t.constant(images(2, 3)));
    ASSERT_EQ(out.size(), 4u);
    EXPECT_EQ(out.features().shape(), (Shape{2, 8}));
    EXPECT_EQ(out.stages[0].shape(), (Shape{2, 4, 4, 4}));
    EXPECT_EQ(out.stages[1].shape(), (Shape{2, 2, 2, 6}));
}

TEST(Extractor, DeterministicForFixedSeed) {
    Rng a(9), b(9);
    Solver s1(small_config(), 3, 4, a), s2(small_config(), 3, 4, b);
    EXPECT_TRUE(s1 == s2);
    const Tensor x = images(3, 4);
    EXPECT_EQ(extract_features(s1, x).values, extract_features(s1, x).values);
    EXPECT_EQ(extract_features(s1, x).values, extract_features(s2, x).values);
}

TEST(Extractor, WrongInputShapeIsShapeError) {
    Rng rng(2);
    Solver s(small_config(), 3, 4, rng);
    Tape t;
    EXPECT_THROW(s.forward_all(t, t.constant(Tensor(Shape{1, 6, 6, 1}))), ShapeError);
    EXPECT_THROW(s.forward_all(t, t.constant(Tensor(Shape{1, 8, 8, 3}))), ShapeError);
}

TEST(AuxHead, ZeroFeatureZeroHeadGivesZeroLogits) {
    Rng rng(3);
    Solver s(small_config(), 10, 4, rng);
    zero_all(s);
    Tape t;
    Var l = s.aux_logits(t, 2, t.constant(Tensor(Shape{2, 2, 2, 6})));
    EXPECT_EQ(l.shape(), (Shape{2, 40}));
    for (double v : l.value().values) EXPECT_EQ(v, 0.0);
}

TEST(AuxHead, WidthIsRotationsTimesClassesSeen) {
    Rng rng(4);
    Solver s(small_config(), 10, 4, rng);
    for (const auto& a : s.aux()) EXPECT_EQ(a.width(), 40u);
    s.expand(5, rng);
    for (const auto& a : s.aux()) EXPECT_EQ(a.width(), 60u);
    EXPECT_EQ(s.aux().size(), 3u);
}

TEST(AuxHead, StageOutOfRangeIsDomainError) {
    Rng rng(4);
    Solver s(small_config(), 2, 4, rng);
    Tape t;
    Var f = t.constant(Tensor(Shape{1, 4, 4, 4}));
    EXPECT_THROW(s.aux_logits(t, 0, f), DomainError);
    EXPECT_THROW(s.aux_logits(t, 4, f), DomainError);
    Rng r2(0);
    Solver none(small_config(), 2, 0, r2);
    EXPECT_TRUE(none.aux().empty());
    EXPECT_THROW(none.aux_logits(t, 1, f), DomainError);
}

TEST(AuxHead, ParameterCountStrictlyDecreasesWithStage) {
    Rng rng(5);
    Solver s(small_config({4, 6, 8, 8, 8}), 3, 4, rng);
    for (std::size_t l = 1; l < s.aux().size(); ++l)
        EXPECT_GT(s.aux()[l - 1].parameter_count(), s.aux()[l].parameter_count());
}

TEST(AuxHead, SnapshotHeadIsDeterministic) {
    Rng rng(6);
    Solver s(small_config(), 3, 4, rng);
    SolverSnapshot snap = snapshot(s);
    Tape t;
    Var f = t.constant(images(2, 7, 8));
    auto stages = snap.forward_all(t, f);
    EXPECT_EQ(snap.aux_logits(t, 1, stages.stages[0]).value().values,
              snap.aux_logits(t, 1, stages.stages[0]).value().values);
}

TEST(Classifier, IdentityRowsPickTheBasisIndex) {
    Tensor w(Shape{3, 3});
    for (std::size_t i = 0; i < 3; ++i) w.at(i, i) = 1.0;
    FinalClassifier c(w);
    for (std::size_t k = 0; k < 3; ++k) {
        Tensor f(Shape{1, 3});
        f[k] = 5.0;
        EXPECT_EQ(argmax_rows(c.predict(f))[0], k);
    }
}

TEST(Classifier, ZeroWeightsAreUniform) {
    FinalClassifier c(Tensor(Shape{4, 3}));
    for (double p : c.predict(Tensor(Shape{2, 3}, 1.7)).values) EXPECT_DOUBLE_EQ(p, 0.25);
}

TEST(Classifier, LnTwoLogitsGiveOneThirdTwoThirds) {
    FinalClassifier c(Tensor::matrix(2, 1, {0.0, std::log(2.0)}));
    Tensor p = c.predict(Tensor::matrix(1, 1, {1.0}));
    EXPECT_NEAR(p[0], 1.0 / 3.0, 1e-15);
    EXPECT_NEAR(p[1], 2.0 / 3.0, 1e-15);
}

TEST(Classifier, WidthMismatchIsShapeError) {
    FinalClassifier c(Tensor(Shape{2, 3}));
    EXPECT_THROW(c.predict(Tensor(Shape{1, 4})), ShapeError);
}

TEST(Classifier, ArgmaxTiesGoToLowestIndex) {
    EXPECT_EQ(argmax_rows(Tensor::matrix(1, 3, {0.2, 0.4, 0.4}))[0], 1u);
}

TEST(Expand, KeepsLeadingRowsAndOldClassLoss) {
    Rng rng(7);
    Solver s(small_config(), 5, 4, rng);
    const Tensor w_before = s.classifier().weight();
    std::vector<Tensor> aux_before;
    for (const auto& a : s.aux()) aux_before.push_back(a.weight());
    const Tensor x = images(4, 8);
    const std::vector<std::size_t> y{0, 1, 4, 2};
    auto old_loss = [&](Solver& m) {
        Tape t;
        Var f = m.forward_all(t, t.constant(x)).features();
        return ce_final(slice_cols(m.classifier().logits(t, f), 0, 5), y).item();
    };
    const double before = old_loss(s);
    s.expand(3, rng);
    EXPECT_EQ(s.classes_seen(), 8u);
    EXPECT_EQ(s.task_sizes(), (std::vector<std::size_t>{5, 3}));
    EXPECT_EQ(s.class_offset(1), 5u);
    const Tensor& w = s.classifier().weight();
    EXPECT_TRUE(std::equal(w_before.values.begin(), w_before.values.end(), w.values.begin()));
    for (std::size_t l = 0; l < aux_before.size(); ++l) {
        const Tensor& a = s.aux()[l].weight();
        EXPECT_TRUE(std::equal(aux_before[l].values.begin(), aux_before[l].values.end(), a.values.begin()));
    }
    EXPECT_EQ(old_loss(s), before);
    EXPECT_THROW(s.expand(0, rng), DomainError);
}

TEST(Snapshot, UnaffectedByLaterMutation) {
    Rng rng(8);
    Solver s(small_config(), 3, 4, rng);
    const Tensor x = images(2, 9);
    const Tensor before = extract_features(s, x);
    SolverSnapshot snap = snapshot(s);
    for (Tensor* p : s.parameters())
        for (double& v : p->values) v += 0.5;
    s.expand(2, rng);
    EXPECT_NE(extract_features(s, x).values, before.values);
    EXPECT_EQ(extract_features(snap.solver(), x).values, before.values);
    EXPECT_EQ(snap.classifier().classes(), 3u);
}

TEST(Snapshot, SnapshotOfSnapshotIsTheSame) {
    Rng rng(8);
    Solver s(small_config(), 3, 4, rng);
    SolverSnapshot a = snapshot(s);
    SolverSnapshot b = snapshot(a);
    EXPECT_TRUE(a.solver() == b.solver());
    EXPECT_TRUE(a.solver() == s);
}

TEST(Snapshot, ReceivesNoGradient) {
    Rng rng(10);
    Solver s(small_config(), 3, 4, rng);
    SolverSnapshot snap = snapshot(s);
    Tape t;
    auto out = snap.forward_all(t, t.constant(images(2, 11)));
    Var loss = sum(snap.classifier().logits(t, out.features()));
    EXPECT_EQ(t.backward(loss), 0u);
    for (const auto& [name, p] : snap.solver().named_parameters()) EXPECT_TRUE(p->grad.empty()) << name;
}

TEST(Persistence, RoundTripIsExact) {
    Rng rng(12);
    Solver s(small_config(), 3, 4, rng);
    s.expand(2, rng);
    const auto bytes = encode_solver(s);
    Solver back = decode_solver(bytes);
    EXPECT_TRUE(back == s);
    EXPECT_EQ(back.aux_rotations(), 4u);
    EXPECT_EQ(encode_solver(back), bytes);
}

TEST(Persistence, CorruptBytesAreFormatErrors) {
    Rng rng(12);
    Solver s(small_config(), 3, 0, rng);
    auto bytes = encode_solver(s);
    auto truncated = bytes;
    truncated.resize(bytes.size() / 2);
    EXPECT_THROW(decode_solver(truncated), FormatError);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(decode_solver(bad_magic), FormatError);
}
