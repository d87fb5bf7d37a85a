#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "etag/errors.hpp"

namespace etag {

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// Dense row-major array of doubles with an optional gradient buffer.
///
/// A rank-0 shape `{}` is a scalar holding one value. `grad` is either empty
/// (no gradient yet) or has exactly `values.size()` entries.
struct Tensor {
    Shape shape{0};
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad = false;

    Tensor() = default;

    explicit Tensor(Shape s, double fill = 0.0)
        : shape(std::move(s)), values(element_count(shape), fill) {}

    Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
        if (values.size() != element_count(shape)) {
            throw ShapeError("tensor of shape " + to_string(shape) + " needs " +
                             std::to_string(element_count(shape)) + " values, got " +
                             std::to_string(values.size()));
        }
    }

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

    static Tensor vector(std::vector<double> v) {
        Shape s{v.size()};
        return Tensor(std::move(s), std::move(v));
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
        return Tensor(Shape{rows, cols}, std::move(v));
    }

    std::size_t size() const { return values.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }

    double& operator[](std::size_t i) { return values[i]; }
    double operator[](std::size_t i) const { return values[i]; }

    double& at(std::size_t r, std::size_t c) { return values[r * shape[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return values[r * shape[1] + c]; }

    double item() const {
        if (values.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape));
        return values[0];
    }

    bool has_grad() const { return !grad.empty(); }
    void zero_grad() { grad.assign(values.size(), 0.0); }

    bool all_finite() const {
        return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
    }

    bool operator==(const Tensor& other) const {
        return shape == other.shape && values == other.values;
    }
};

/// Fan-in scaled Gaussian, std = sqrt(2 / fan_in).
template <class Rng>
Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (double& v : t.values) v = dist(rng);
    t.requires_grad = true;
    return t;
}

template <class Rng>
Tensor standard_normal(Shape shape, Rng& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, 1.0);
    for (double& v : t.values) v = dist(rng);
    return t;
}

/// One row per label, `classes` columns. Labels must lie in [0, classes).
inline Tensor one_hot(const std::vector<std::size_t>& labels, std::size_t classes) {
    Tensor t(Shape{labels.size(), classes});
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= classes) {
            throw DomainError("one_hot: label " + std::to_string(labels[i]) + " outside [0, " +
                              std::to_string(classes) + ")");
        }
        t.at(i, labels[i]) = 1.0;
    }
    return t;
}

/// Rows [begin, end) of the leading dimension.
inline Tensor take_rows(const Tensor& t, std::size_t begin, std::size_t end) {
    if (t.rank() == 0 || end > t.dim(0) || begin > end) throw ShapeError("take_rows out of range");
    const std::size_t stride = t.dim(0) ? t.size() / t.dim(0) : 0;
    Shape s = t.shape;
    s[0] = end - begin;
    return Tensor(std::move(s), std::vector<double>(t.values.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                                                    t.values.begin() + static_cast<std::ptrdiff_t>(end * stride)));
}

/// Gather the listed rows of the leading dimension, in order.
inline Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& rows) {
    if (t.rank() == 0) throw ShapeError("gather_rows on scalar");
    const std::size_t stride = t.dim(0) ? t.size() / t.dim(0) : 0;
    Shape s = t.shape;
    s[0] = rows.size();
    Tensor out(std::move(s));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= t.dim(0)) throw ShapeError("gather_rows index out of range");
        std::copy_n(t.values.begin() + static_cast<std::ptrdiff_t>(rows[i] * stride), stride,
                    out.values.begin() + static_cast<std::ptrdiff_t>(i * stride));
    }
    return out;
}

/// Concatenate along the leading dimension; trailing extents must agree.
inline Tensor stack_rows(const std::vector<const Tensor*>& parts) {
    if (parts.empty()) throw ShapeError("stack_rows of nothing");
    Shape s = parts.front()->shape;
    std::size_t rows = 0;
    for (const Tensor* p : parts) {
        if (p->rank() != s.size() || !std::equal(p->shape.begin() + 1, p->shape.end(), s.begin() + 1)) {
            throw ShapeError("stack_rows: trailing shapes differ");
        }
        rows += p->dim(0);
    }
    s[0] = rows;
    Tensor out(std::move(s));
    auto it = out.values.begin();
    for (const Tensor* p : parts) it = std::copy(p->values.begin(), p->values.end(), it);
    return out;
}

/// Rotate a square image counter-clockwise by k quarter turns.
///
/// Accepts H x W x C or N x H x W x C. One quarter turn maps
/// new[r][c] = old[c][H-1-r] on every channel.
inline Tensor rotate90(const Tensor& image, int k) {
    if (k < 0 || k > 3) throw DomainError("rotate90: k must be in {0,1,2,3}, got " + std::to_string(k));
    if (image.rank() != 3 && image.rank() != 4) throw ShapeError("rotate90 expects HxWxC or NxHxWxC");
    const bool batched = image.rank() == 4;
    const std::size_t n = batched ? image.dim(0) : 1;
    const std::size_t h = image.dim(batched ? 1 : 0);
    const std::size_t w = image.dim(batched ? 2 : 1);
    const std::size_t c = image.dim(batched ? 3 : 2);
    if (h != w) throw ShapeError("rotate90 requires square images, got " + to_string(image.shape));

    Tensor cur = image;
    cur.grad.clear();
    cur.requires_grad = false;
    Tensor next(image.shape);
    for (int turn = 0; turn < k; ++turn) {
        for (std::size_t b = 0; b < n; ++b) {
            const std::size_t base = b * h * w * c;
            for (std::size_t r = 0; r < h; ++r)
                for (std::size_t col = 0; col < w; ++col)
                    for (std::size_t ch = 0; ch < c; ++ch)
                        next.values[base + (r * w + col) * c + ch] =
                            cur.values[base + (col * w + (h - 1 - r)) * c + ch];
        }
        std::swap(cur, next);
    }
    return cur;
}

}  // namespace etag
