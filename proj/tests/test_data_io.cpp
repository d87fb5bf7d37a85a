#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "etag/data.hpp"

using namespace etag;

namespace {

std::vector<std::uint8_t> be32(std::uint32_t v) {
    return {static_cast<std::uint8_t>(v >> 24), static_cast<std::uint8_t>(v >> 16), static_cast<std::uint8_t>(v >> 8),
            static_cast<std::uint8_t>(v)};
}

std::vector<std::uint8_t> idx_images(std::uint32_t n, std::uint32_t r, std::uint32_t c,
                                     const std::vector<std::uint8_t>& pixels, std::uint32_t magic = 0x803) {
    std::vector<std::uint8_t> out;
    for (std::uint32_t v : {magic, n, r, c}) {
        auto b = be32(v);
        out.insert(out.end(), b.begin(), b.end());
    }
    out.insert(out.end(), pixels.begin(), pixels.end());
    return out;
}

std::vector<std::uint8_t> idx_labels(const std::vector<std::uint8_t>& labels, std::uint32_t magic = 0x801) {
    std::vector<std::uint8_t> out = be32(magic);
    auto n = be32(static_cast<std::uint32_t>(labels.size()));
    out.insert(out.end(), n.begin(), n.end());
    out.insert(out.end(), labels.begin(), labels.end());
    return out;
}

// Nearest class mean over flattened samples (a linear rule for equal-norm means).
double nearest_mean_accuracy(const Dataset& d) {
    const std::size_t dim = d.train.images.size() / d.train.size();
    std::vector<std::vector<double>> mean(d.classes, std::vector<double>(dim, 0.0));
    std::vector<double> count(d.classes, 0.0);
    for (std::size_t i = 0; i < d.train.size(); ++i) {
        count[d.train.labels[i]] += 1.0;
        for (std::size_t j = 0; j < dim; ++j) mean[d.train.labels[i]][j] += d.train.images[i * dim + j];
    }
    for (std::size_t c = 0; c < d.classes; ++c)
        for (double& v : mean[c]) v /= count[c];
    std::size_t correct = 0;
    for (std::size_t i = 0; i < d.test.size(); ++i) {
        std::size_t best = 0;
        double best_d = INFINITY;
        for (std::size_t c = 0; c < d.classes; ++c) {
            double s = 0.0;
            for (std::size_t j = 0; j < dim; ++j) s += std::pow(d.test.images[i * dim + j] - mean[c][j], 2);
            if (s < best_d) best_d = s, best = c;
        }
        correct += best == d.test.labels[i];
    }
    return static_cast<double>(correct) / static_cast<double>(d.test.size());
}

}  // namespace

// ---- task plans ----

TEST(TaskPlan, HalfThenFiveIncrements) {
    EXPECT_EQ(plan_task_sizes(10, 0.5, 5), (std::vector<std::size_t>{5, 1, 1, 1, 1, 1}));
    EXPECT_EQ(plan_task_sizes(100, 0.5, 5), (std::vector<std::size_t>{50, 10, 10, 10, 10, 10}));
}

TEST(TaskPlan, EqualSplit) { EXPECT_EQ(plan_equal_tasks(8, 4), (std::vector<std::size_t>{2, 2, 2, 2})); }

TEST(TaskPlan, RemainderGoesToEarlierTasks) {
    EXPECT_EQ(plan_task_sizes(10, 0.5, 3), (std::vector<std::size_t>{5, 2, 2, 1}));
    EXPECT_EQ(plan_equal_tasks(7, 3), (std::vector<std::size_t>{3, 2, 2}));
}

TEST(TaskPlan, TooManyIncrementsIsDomainError) {
    EXPECT_THROW(plan_task_sizes(10, 0.5, 6), DomainError);
    EXPECT_THROW(plan_equal_tasks(3, 4), DomainError);
    EXPECT_THROW(plan_task_sizes(10, 0.0, 1), DomainError);
}

// ---- task stream ----

TEST(TaskStream, DisjointCoveringAndContiguous) {
    const Dataset d = synth_gaussian_dataset(10, 4, 3.0, 10, 1);
    const TaskStream s = build_task_stream(d, 0.5, 5, 1);
    ASSERT_EQ(s.task_sizes(), (std::vector<std::size_t>{5, 1, 1, 1, 1, 1}));
    std::set<std::size_t> sources;
    std::size_t train_total = 0, test_total = 0, offset = 0;
    for (const TaskSpec& t : s.tasks) {
        EXPECT_EQ(t.offset, offset);
        for (std::size_t c : t.source_classes) EXPECT_TRUE(sources.insert(c).second) << "class in two tasks";
        for (std::size_t y : t.train.labels) {
            EXPECT_GE(y, t.offset);
            EXPECT_LT(y, t.offset + t.classes);
        }
        for (std::size_t y : t.test.labels) {
            EXPECT_GE(y, t.offset);
            EXPECT_LT(y, t.offset + t.classes);
        }
        train_total += t.train.size();
        test_total += t.test.size();
        offset += t.classes;
    }
    EXPECT_EQ(sources.size(), 10u);
    EXPECT_EQ(train_total, d.train.size());
    EXPECT_EQ(test_total, d.test.size());
}

TEST(TaskStream, SamplesNeverShared) {
    const Dataset d = synth_gaussian_dataset(6, 4, 3.0, 10, 2);
    const TaskStream s = build_task_stream(d, plan_equal_tasks(6, 3), 2);
    // continuous values: identical rows would mean a duplicated sample
    std::set<std::vector<double>> rows;
    std::size_t total = 0;
    for (const TaskSpec& t : s.tasks)
        for (const LabeledImages* part : {&t.train, &t.test})
            for (std::size_t i = 0; i < part->size(); ++i, ++total) {
                const Tensor r = take_rows(part->images, i, i + 1);
                rows.insert(r.values);
            }
    EXPECT_EQ(rows.size(), total);
}

TEST(TaskStream, PureFunctionOfInputsAndSeed) {
    const Dataset d = synth_gaussian_dataset(8, 4, 3.0, 10, 3);
    const TaskStream a = build_task_stream(d, plan_equal_tasks(8, 4), 9);
    const TaskStream b = build_task_stream(d, plan_equal_tasks(8, 4), 9);
    for (std::size_t t = 0; t < 4; ++t) {
        EXPECT_EQ(a.tasks[t].source_classes, b.tasks[t].source_classes);
        EXPECT_EQ(a.tasks[t].train.images.values, b.tasks[t].train.images.values);
    }
    bool differs = false;
    for (std::uint64_t seed = 10; seed < 20 && !differs; ++seed)
        differs = build_task_stream(d, plan_equal_tasks(8, 4), seed).tasks[0].source_classes != a.tasks[0].source_classes;
    EXPECT_TRUE(differs);
}

TEST(TaskStream, SizePlanMustCoverClasses) {
    const Dataset d = synth_gaussian_dataset(4, 4, 3.0, 5, 3);
    EXPECT_THROW(build_task_stream(d, std::vector<std::size_t>{2, 1}, 0), DomainError);
}

// ---- synthetic data ----

TEST(Synthetic, ShapesAndSplit) {
    const Dataset d = synth_gaussian_dataset(3, 16, 2.0, 10, 4);
    EXPECT_EQ(d.train.images.shape, (Shape{24, 4, 4, 1}));
    EXPECT_EQ(d.test.images.shape, (Shape{6, 4, 4, 1}));
    EXPECT_THROW(synth_gaussian_dataset(3, 15, 2.0, 10, 4), DomainError);
    EXPECT_THROW(synth_gaussian_dataset(3, 16, -1.0, 10, 4), DomainError);
}

TEST(Synthetic, Reproducible) {
    EXPECT_EQ(synth_gaussian_dataset(3, 4, 2.0, 10, 5).train.images.values,
              synth_gaussian_dataset(3, 4, 2.0, 10, 5).train.images.values);
    EXPECT_NE(synth_gaussian_dataset(3, 4, 2.0, 10, 5).train.images.values,
              synth_gaussian_dataset(3, 4, 2.0, 10, 6).train.images.values);
}

TEST(Synthetic, WideSeparationIsLinearlySeparable) {
    EXPECT_GT(nearest_mean_accuracy(synth_gaussian_dataset(2, 16, 10.0, 500, 6)), 0.99);
}

TEST(Synthetic, ZeroSeparationIsChance) {
    const std::size_t classes = 4;
    const Dataset d = synth_gaussian_dataset(classes, 4, 0.0, 1000, 7);
    const double n = static_cast<double>(d.test.size()), p = 1.0 / classes;
    EXPECT_LT(std::abs(nearest_mean_accuracy(d) - p), 4.0 * std::sqrt(p * (1 - p) / n));
}

// ---- IDX ----

TEST(Idx, TwoImagesOfTwoByTwo) {
    const Tensor t = parse_idx_images(idx_images(2, 2, 2, {0, 255, 51, 102, 1, 2, 3, 4}));
    EXPECT_EQ(t.shape, (Shape{2, 2, 2, 1}));
    EXPECT_DOUBLE_EQ(t[1], 1.0);
    EXPECT_DOUBLE_EQ(t[2], 0.2);
    EXPECT_DOUBLE_EQ(t[7], 4.0 / 255.0);
}

TEST(Idx, LabelByteIsClass) { EXPECT_EQ(parse_idx_labels(idx_labels({7, 0})), (std::vector<std::size_t>{7, 0})); }

TEST(Idx, TruncatedPayloadNamesLengths) {
    try {
        parse_idx_images(idx_images(2, 2, 2, {1, 2, 3}));
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("expected 8"), std::string::npos) << msg;
        EXPECT_NE(msg.find("got 3"), std::string::npos) << msg;
        EXPECT_EQ(e.offset, 19u);
    }
    EXPECT_THROW(parse_idx_labels({0, 0, 8, 1, 0, 0, 0, 5, 1}), FormatError);
}

TEST(Idx, BadMagicAndShortHeader) {
    try {
        parse_idx_images(idx_images(1, 1, 1, {0}, 0x801));
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_EQ(e.offset, 0u);
    }
    EXPECT_THROW(parse_idx_labels(idx_labels({1}, 0x803)), FormatError);
    EXPECT_THROW(parse_idx_images({0, 0, 8, 3, 0}), FormatError);
}

TEST(Idx, LoadFromFilesAndDatasetSplit) {
    const auto dir = std::filesystem::temp_directory_path() / "etag_idx_test";
    std::filesystem::create_directories(dir);
    std::vector<std::uint8_t> pixels, labels;
    for (std::uint8_t i = 0; i < 20; ++i) {
        pixels.push_back(i);
        labels.push_back(i % 2);
    }
    write_bytes((dir / "img").string(), idx_images(20, 1, 1, pixels));
    write_bytes((dir / "lbl").string(), idx_labels(labels));
    const LabeledImages li = load_idx((dir / "img").string(), (dir / "lbl").string());
    EXPECT_EQ(li.size(), 20u);
    const Dataset d = dataset_from_idx(li);
    EXPECT_EQ(d.classes, 2u);
    EXPECT_EQ(d.train.size(), 16u);
    EXPECT_EQ(d.test.size(), 4u);
    write_bytes((dir / "lbl_short").string(), idx_labels({0, 1}));
    EXPECT_THROW(load_idx((dir / "img").string(), (dir / "lbl_short").string()), FormatError);
    std::filesystem::remove_all(dir);
}
