#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "etag/tensor.hpp"

namespace etag {

/// Quarter-turn count of the self-supervised rotation task.
inline constexpr std::size_t kRotations = 4;

/// Rotated copies of a batch stacked rotation-major.
///
/// Rows [i*N, (i+1)*N) hold the input rotated by i quarter turns; the first
/// block is the input itself. `aug_labels[row] = rotation * m + label`.
struct AugmentedBatch {
    Tensor images;
    std::vector<std::size_t> aug_labels;
    std::vector<std::size_t> rotation_index;
    std::vector<std::size_t> base_labels;
    std::size_t rotations = 0;
    std::size_t batch = 0;
};

inline std::size_t augmented_label(std::size_t rotation, std::size_t label, std::size_t num_classes) {
    return rotation * num_classes + label;
}

/// Build the rotation task for `rotations` in {1, 4}. A single rotation is
/// the identity-only variant used when the self-supervised task is disabled.
inline AugmentedBatch augment_rotations(const Tensor& images, const std::vector<std::size_t>& labels,
                                        std::size_t num_classes, std::size_t rotations = kRotations) {
    if (rotations != 1 && rotations != kRotations) {
        throw DomainError("augment_rotations: rotations must be 1 or 4, got " + std::to_string(rotations));
    }
    if (images.rank() != 4) throw ShapeError("augment_rotations expects N x H x W x C images");
    if (images.dim(1) != images.dim(2)) throw ShapeError("augment_rotations requires square images");
    const std::size_t n = images.dim(0);
    if (labels.size() != n) throw ShapeError("augment_rotations: label count differs from batch size");
    for (std::size_t y : labels) {
        if (y >= num_classes) {
            throw DomainError("augment_rotations: label " + std::to_string(y) + " outside [0, " +
                              std::to_string(num_classes) + ")");
        }
    }

    AugmentedBatch out;
    out.rotations = rotations;
    out.batch = n;
    std::vector<Tensor> turned;
    turned.reserve(rotations);
    turned.push_back(Tensor(images.shape, images.values));
    for (std::size_t r = 1; r < rotations; ++r) turned.push_back(rotate90(images, static_cast<int>(r)));
    std::vector<const Tensor*> parts;
    for (const Tensor& t : turned) parts.push_back(&t);
    out.images = stack_rows(parts);

    out.aug_labels.reserve(rotations * n);
    for (std::size_t r = 0; r < rotations; ++r) {
        for (std::size_t i = 0; i < n; ++i) {
            out.aug_labels.push_back(augmented_label(r, labels[i], num_classes));
            out.rotation_index.push_back(r);
            out.base_labels.push_back(labels[i]);
        }
    }
    return out;
}

}  // namespace etag
