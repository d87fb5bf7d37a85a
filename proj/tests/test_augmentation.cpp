#include <gtest/gtest.h>

#include <set>

#include "etag/augmentation.hpp"
#include "etag/random.hpp"

using namespace etag;

namespace {

Tensor random_images(std::size_t n, std::size_t s, std::size_t c, std::uint64_t seed) {
    Rng rng(seed);
    return standard_normal(Shape{n, s, s, c}, rng);
}

}  // namespace

TEST(AugmentedLabel, RotationMajorIndexing) {
    EXPECT_EQ(augmented_label(0, 2, 10), 2u);
    EXPECT_EQ(augmented_label(1, 2, 10), 12u);
    EXPECT_EQ(augmented_label(3, 9, 10), 39u);
}

TEST(AugmentRotations, BatchLayout) {
    const Tensor x = random_images(3, 4, 2, 1);
    const std::vector<std::size_t> y{2, 0, 9};
    const AugmentedBatch a = augment_rotations(x, y, 10);
    EXPECT_EQ(a.images.shape, (Shape{12, 4, 4, 2}));
    ASSERT_EQ(a.aug_labels.size(), 12u);
    EXPECT_EQ(a.aug_labels[0], 2u);
    EXPECT_EQ(a.aug_labels[3], 12u);
    EXPECT_EQ(a.aug_labels[11], 39u);
    for (std::size_t r = 0; r < 4; ++r) {
        const Tensor block = take_rows(a.images, r * 3, (r + 1) * 3);
        EXPECT_EQ(block.values, rotate90(x, static_cast<int>(r)).values);
        for (std::size_t i = 0; i < 3; ++i) {
            EXPECT_EQ(a.rotation_index[r * 3 + i], r);
            EXPECT_EQ(a.base_labels[r * 3 + i], y[i]);
        }
    }
    // rotation 0 rows are the input bit for bit
    EXPECT_TRUE(std::equal(x.values.begin(), x.values.end(), a.images.values.begin()));
}

TEST(AugmentRotations, SizeIsFourTimesInput) {
    for (std::size_t n : {1u, 2u, 7u}) {
        std::vector<std::size_t> y(n, 0);
        EXPECT_EQ(augment_rotations(random_images(n, 3, 1, n), y, 1).images.dim(0), 4 * n);
    }
}

TEST(AugmentRotations, LabelMapIsBijectionAndModRecoversClass) {
    const std::size_t m = 5;
    std::vector<std::size_t> y;
    for (std::size_t c = 0; c < m; ++c) y.push_back(c);
    const AugmentedBatch a = augment_rotations(random_images(m, 2, 1, 3), y, m);
    std::set<std::size_t> seen;
    std::set<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t row = 0; row < a.aug_labels.size(); ++row) {
        EXPECT_LT(a.aug_labels[row], 4 * m);
        seen.insert(a.aug_labels[row]);
        pairs.emplace(a.rotation_index[row], a.base_labels[row]);
        EXPECT_EQ(a.aug_labels[row] % m, a.base_labels[row]);
        EXPECT_EQ(a.aug_labels[row] / m, a.rotation_index[row]);
    }
    EXPECT_EQ(seen.size(), 4 * m);
    EXPECT_EQ(pairs.size(), 4 * m);
}

TEST(AugmentRotations, IdentityOnlyVariant) {
    const Tensor x = random_images(2, 3, 1, 4);
    const AugmentedBatch a = augment_rotations(x, {1, 0}, 2, 1);
    EXPECT_EQ(a.images.values, x.values);
    EXPECT_EQ(a.aug_labels, (std::vector<std::size_t>{1, 0}));
}

TEST(AugmentRotations, Errors) {
    const Tensor x = random_images(2, 3, 1, 5);
    EXPECT_THROW(augment_rotations(x, {0, 10}, 10), DomainError);
    EXPECT_THROW(augment_rotations(x, {0}, 10), ShapeError);
    EXPECT_THROW(augment_rotations(x, {0, 1}, 10, 3), DomainError);
    EXPECT_THROW(augment_rotations(Tensor(Shape{1, 2, 3, 1}), {0}, 10), ShapeError);
}
