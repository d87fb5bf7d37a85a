#pragma once

// Datasets and class-incremental task streams.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "etag/errors.hpp"
#include "etag/random.hpp"
#include "etag/serialize.hpp"
#include "etag/tensor.hpp"

namespace etag {

/// N x H x W x C images with one label each.
struct LabeledImages {
    Tensor images{Shape{0, 0, 0, 0}};
    std::vector<std::size_t> labels;

    std::size_t size() const { return labels.size(); }
};

struct Dataset {
    LabeledImages train;
    LabeledImages test;
    std::size_t classes = 0;
};

struct TaskSpec {
    std::vector<std::size_t> source_classes;  // ids in the original dataset
    std::size_t offset = 0;                   // first global id of this task
    std::size_t classes = 0;                  // m_t
    LabeledImages train;                      // labels are global ids
    LabeledImages test;

    std::size_t samples() const { return train.size(); }  // n_t
};

struct TaskStream {
    std::vector<TaskSpec> tasks;
    std::size_t total_classes = 0;

    std::size_t size() const { return tasks.size(); }

    std::vector<std::size_t> task_sizes() const {
        std::vector<std::size_t> out;
        for (const auto& t : tasks) out.push_back(t.classes);
        return out;
    }
};

// ---------------------------------------------------------------------------
// Task size plans
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::size_t> spread(std::size_t classes, std::size_t parts) {
    std::vector<std::size_t> out(parts, classes / parts);
    for (std::size_t i = 0; i < classes % parts; ++i) ++out[i];  // larger tasks first
    return out;
}

}  // namespace detail

/// First task takes ceil(first_fraction * classes); the rest is split over
/// `increments` tasks, remainder going to the earliest ones.
inline std::vector<std::size_t> plan_task_sizes(std::size_t classes, double first_fraction, std::size_t increments) {
    if (!(first_fraction > 0.0 && first_fraction <= 1.0)) throw DomainError("first_fraction must be in (0, 1]");
    const auto first = static_cast<std::size_t>(std::ceil(first_fraction * static_cast<double>(classes) - 1e-9));
    if (first == 0 || first > classes) throw DomainError("first task would be empty");
    const std::size_t rest = classes - first;
    if (increments > rest) {
        throw DomainError(std::to_string(increments) + " increments exceed the " + std::to_string(rest) +
                          " remaining classes");
    }
    if (increments == 0 && rest > 0) throw DomainError("remaining classes need at least one increment");
    std::vector<std::size_t> out{first};
    if (increments > 0) {
        auto tail = detail::spread(rest, increments);
        out.insert(out.end(), tail.begin(), tail.end());
    }
    return out;
}

inline std::vector<std::size_t> plan_equal_tasks(std::size_t classes, std::size_t tasks) {
    if (tasks == 0 || tasks > classes) {
        throw DomainError("cannot split " + std::to_string(classes) + " classes into " + std::to_string(tasks) +
                          " tasks");
    }
    return detail::spread(classes, tasks);
}

/// Assign classes to tasks with a seeded permutation and relabel them to
/// contiguous global ids in arrival order.
inline TaskStream build_task_stream(const Dataset& data, const std::vector<std::size_t>& sizes, std::uint64_t seed) {
    if (std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}) != data.classes) {
        throw DomainError("task sizes do not cover the dataset's classes");
    }
    std::vector<std::size_t> order(data.classes);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = make_stream(seed, 0, Purpose::TaskSplit);
    std::shuffle(order.begin(), order.end(), rng);

    std::vector<std::size_t> global_of(data.classes);
    for (std::size_t g = 0; g < order.size(); ++g) global_of[order[g]] = g;

    auto select = [&](const LabeledImages& src, std::size_t begin, std::size_t end) {
        std::vector<std::size_t> rows;
        LabeledImages out;
        for (std::size_t i = 0; i < src.size(); ++i) {
            const std::size_t g = global_of[src.labels[i]];
            if (g >= begin && g < end) {
                rows.push_back(i);
                out.labels.push_back(g);
            }
        }
        out.images = gather_rows(src.images, rows);
        return out;
    };

    TaskStream stream;
    stream.total_classes = data.classes;
    std::size_t offset = 0;
    for (std::size_t m : sizes) {
        if (m == 0) throw DomainError("empty task in size plan");
        TaskSpec spec;
        spec.offset = offset;
        spec.classes = m;
        spec.source_classes.assign(order.begin() + static_cast<std::ptrdiff_t>(offset),
                                   order.begin() + static_cast<std::ptrdiff_t>(offset + m));
        spec.train = select(data.train, offset, offset + m);
        spec.test = select(data.test, offset, offset + m);
        stream.tasks.push_back(std::move(spec));
        offset += m;
    }
    return stream;
}

inline TaskStream build_task_stream(const Dataset& data, double first_fraction, std::size_t increments,
                                    std::uint64_t seed) {
    return build_task_stream(data, plan_task_sizes(data.classes, first_fraction, increments), seed);
}

// ---------------------------------------------------------------------------
// Synthetic Gaussian clusters
// ---------------------------------------------------------------------------

/// Class means lie on a sphere of radius `separation`; samples have unit
/// covariance. Each class keeps its first 80% of samples for training. The
/// `dim` values are laid out as a 1-channel sqrt(dim) x sqrt(dim) image.
inline Dataset synth_gaussian_dataset(std::size_t classes, std::size_t dim, double separation,
                                      std::size_t samples_per_class, std::uint64_t seed) {
    if (!(separation >= 0.0)) throw DomainError("separation must be non-negative");
    const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(dim))));
    if (side * side != dim || dim == 0) throw DomainError("dim " + std::to_string(dim) + " is not a perfect square");
    if (classes == 0 || samples_per_class < 2) throw DomainError("need classes and at least 2 samples per class");

    Rng rng = make_stream(seed, 0, Purpose::Data);
    std::normal_distribution<double> normal(0.0, 1.0);
    const std::size_t n_train = std::max<std::size_t>(1, samples_per_class * 4 / 5);
    const std::size_t n_test = samples_per_class - n_train;

    Dataset data;
    data.classes = classes;
    data.train.images = Tensor(Shape{classes * n_train, side, side, 1});
    data.test.images = Tensor(Shape{classes * n_test, side, side, 1});
    for (std::size_t c = 0; c < classes; ++c) {
        std::vector<double> mean(dim);
        double norm = 0.0;
        for (double& v : mean) {
            v = normal(rng);
            norm += v * v;
        }
        norm = std::sqrt(norm);
        for (double& v : mean) v *= separation / norm;
        for (std::size_t i = 0; i < samples_per_class; ++i) {
            const bool train = i < n_train;
            Tensor& dst = train ? data.train.images : data.test.images;
            const std::size_t row = train ? c * n_train + i : c * n_test + (i - n_train);
            for (std::size_t j = 0; j < dim; ++j) dst[row * dim + j] = mean[j] + normal(rng);
            (train ? data.train.labels : data.test.labels).push_back(c);
        }
    }
    return data;
}

/// Synthetic dataset split into `tasks` equal tasks.
inline TaskStream synth_gaussian_stream(std::size_t classes, std::size_t dim, double separation,
                                        std::size_t samples_per_class, std::uint64_t seed, std::size_t tasks) {
    Dataset data = synth_gaussian_dataset(classes, dim, separation, samples_per_class, seed);
    return build_task_stream(data, plan_equal_tasks(classes, tasks), seed);
}

// ---------------------------------------------------------------------------
// IDX archives
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t at) {
    if (at + 4 > b.size()) {
        throw FormatError("IDX header truncated: need " + std::to_string(at + 4) + " bytes, file has " +
                              std::to_string(b.size()),
                          b.size());
    }
    return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
           std::uint32_t{b[at + 3]};
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// IDX3 unsigned-byte images -> N x rows x cols x 1, scaled to [0, 1].
inline Tensor parse_idx_images(const std::vector<std::uint8_t>& bytes) {
    const std::uint32_t magic = detail::read_be32(bytes, 0);
    if (magic != kIdxImageMagic) throw FormatError("bad IDX image magic " + std::to_string(magic), 0);
    const std::size_t n = detail::read_be32(bytes, 4);
    const std::size_t rows = detail::read_be32(bytes, 8);
    const std::size_t cols = detail::read_be32(bytes, 12);
    const std::size_t expected = n * rows * cols;
    const std::size_t actual = bytes.size() - 16;
    if (actual != expected) {
        throw FormatError("IDX image payload: expected " + std::to_string(expected) + " bytes, got " +
                              std::to_string(actual),
                          16 + std::min(actual, expected));
    }
    Tensor out(Shape{n, rows, cols, 1});
    for (std::size_t i = 0; i < expected; ++i) out[i] = static_cast<double>(bytes[16 + i]) / 255.0;
    return out;
}

inline std::vector<std::size_t> parse_idx_labels(const std::vector<std::uint8_t>& bytes) {
    const std::uint32_t magic = detail::read_be32(bytes, 0);
    if (magic != kIdxLabelMagic) throw FormatError("bad IDX label magic " + std::to_string(magic), 0);
    const std::size_t n = detail::read_be32(bytes, 4);
    const std::size_t actual = bytes.size() - 8;
    if (actual != n) {
        throw FormatError("IDX label payload: expected " + std::to_string(n) + " bytes, got " + std::to_string(actual),
                          8 + std::min(actual, n));
    }
    return std::vector<std::size_t>(bytes.begin() + 8, bytes.end());
}

inline LabeledImages load_idx(const std::string& images_path, const std::string& labels_path) {
    LabeledImages out;
    out.images = parse_idx_images(read_bytes(images_path));
    out.labels = parse_idx_labels(read_bytes(labels_path));
    if (out.images.dim(0) != out.labels.size()) {
        throw FormatError("IDX image count " + std::to_string(out.images.dim(0)) + " differs from label count " +
                              std::to_string(out.labels.size()),
                          4);
    }
    return out;
}

/// Dataset from an IDX pair. Without a separate test pair, each class keeps
/// its first 80% of samples (file order) for training.
inline Dataset dataset_from_idx(const LabeledImages& train, const LabeledImages* test = nullptr) {
    Dataset data;
    std::size_t max_label = 0;
    for (std::size_t y : train.labels) max_label = std::max(max_label, y);
    data.classes = train.size() ? max_label + 1 : 0;
    if (test != nullptr) {
        data.train = train;
        data.test = *test;
        for (std::size_t y : test->labels) {
            if (y >= data.classes) throw DomainError("test label " + std::to_string(y) + " unseen in training data");
        }
        return data;
    }
    std::vector<std::size_t> per_class(data.classes, 0), seen(data.classes, 0);
    for (std::size_t y : train.labels) ++per_class[y];
    std::vector<std::size_t> train_rows, test_rows;
    for (std::size_t i = 0; i < train.size(); ++i) {
        const std::size_t y = train.labels[i];
        const std::size_t keep = std::max<std::size_t>(1, per_class[y] * 4 / 5);
        (seen[y]++ < keep ? train_rows : test_rows).push_back(i);
    }
    data.train.images = gather_rows(train.images, train_rows);
    data.test.images = gather_rows(train.images, test_rows);
    for (std::size_t i : train_rows) data.train.labels.push_back(train.labels[i]);
    for (std::size_t i : test_rows) data.test.labels.push_back(train.labels[i]);
    return data;
}

}  // namespace etag
