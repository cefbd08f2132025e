#pragma once

// Discrete 2D gradient on a regular pixel grid.
//
//   D = [D_h; D_v] : R^n -> R^{2n},   n = width * height (row-major)
//
// Forward differences with Neumann boundary: the last column of D_h x and the
// last row of D_v x are zero. A vector field stores the horizontal component
// of pixel i at data[i] and the vertical one at data[n + i].

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cncdtv/random.hpp"

namespace cncdtv {

struct GridShape {
    std::size_t width = 0;
    std::size_t height = 0;

    constexpr std::size_t size() const noexcept { return width * height; }
    friend constexpr bool operator==(const GridShape&, const GridShape&) = default;
};

template <std::floating_point Real>
struct BasicImage {
    GridShape shape;
    std::vector<Real> data;

    BasicImage() = default;

    BasicImage(std::size_t width, std::size_t height, Real fill = Real(0))
        : shape{width, height}, data(width * height, fill) {
        if (width == 0 || height == 0)
            throw std::invalid_argument("image dimensions must be positive");
    }

    BasicImage(std::size_t width, std::size_t height, std::vector<Real> values)
        : shape{width, height}, data(std::move(values)) {
        if (width == 0 || height == 0)
            throw std::invalid_argument("image dimensions must be positive");
        if (data.size() != width * height)
            throw std::invalid_argument("image data length " + std::to_string(data.size()) +
                                        " does not match " + std::to_string(width) + "x" +
                                        std::to_string(height));
    }

    std::size_t width() const noexcept { return shape.width; }
    std::size_t height() const noexcept { return shape.height; }
    std::size_t size() const noexcept { return data.size(); }

    Real& operator()(std::size_t row, std::size_t col) { return data[row * shape.width + col]; }
    Real operator()(std::size_t row, std::size_t col) const { return data[row * shape.width + col]; }
};

template <std::floating_point Real>
struct BasicVectorField {
    std::size_t n = 0;
    std::vector<Real> data;  // length 2n

    BasicVectorField() = default;
    explicit BasicVectorField(std::size_t pixels, Real fill = Real(0)) : n(pixels), data(2 * pixels, fill) {}
    BasicVectorField(std::size_t pixels, std::vector<Real> values) : n(pixels), data(std::move(values)) {
        if (data.size() != 2 * n)
            throw std::invalid_argument("vector field data length must be 2n");
    }

    Real& h(std::size_t i) { return data[i]; }
    Real& v(std::size_t i) { return data[n + i]; }
    Real h(std::size_t i) const { return data[i]; }
    Real v(std::size_t i) const { return data[n + i]; }
};

using Image = BasicImage<double>;
using VectorField = BasicVectorField<double>;

template <std::floating_point Real>
bool all_finite(std::span<const Real> values) {
    return std::all_of(values.begin(), values.end(), [](Real v) { return std::isfinite(v); });
}

template <std::floating_point Real>
Real dot(std::span<const Real> a, std::span<const Real> b) {
    if (a.size() != b.size())
        throw std::invalid_argument("dot: length mismatch");
    Real s = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        s += a[i] * b[i];
    return s;
}

template <std::floating_point Real>
Real norm2(std::span<const Real> a) {
    return std::sqrt(dot(a, a));
}

namespace detail {

inline void require_size(std::size_t got, std::size_t want, const char* what) {
    if (got != want)
        throw std::invalid_argument(std::string(what) + ": dimension mismatch (" + std::to_string(got) +
                                    " vs " + std::to_string(want) + ")");
}

}  // namespace detail

/// out = D x. `out` must hold 2n values.
template <std::floating_point Real>
void gradient_into(std::span<const Real> x, GridShape shape, std::span<Real> out) {
    const std::size_t w = shape.width, h = shape.height, n = shape.size();
    detail::require_size(x.size(), n, "gradient");
    detail::require_size(out.size(), 2 * n, "gradient");
    for (std::size_t r = 0; r < h; ++r) {
        const std::size_t row = r * w;
        for (std::size_t c = 0; c + 1 < w; ++c)
            out[row + c] = x[row + c + 1] - x[row + c];
        out[row + w - 1] = 0;
        if (r + 1 < h) {
            for (std::size_t c = 0; c < w; ++c)
                out[n + row + c] = x[row + w + c] - x[row + c];
        } else {
            for (std::size_t c = 0; c < w; ++c)
                out[n + row + c] = 0;
        }
    }
}

/// out = D^T u. `u` must hold 2n values.
template <std::floating_point Real>
void gradient_adjoint_into(std::span<const Real> u, GridShape shape, std::span<Real> out) {
    const std::size_t w = shape.width, h = shape.height, n = shape.size();
    detail::require_size(u.size(), 2 * n, "gradient adjoint");
    detail::require_size(out.size(), n, "gradient adjoint");
    const Real* uh = u.data();
    const Real* uv = u.data() + n;
    for (std::size_t r = 0; r < h; ++r) {
        const std::size_t row = r * w;
        for (std::size_t c = 0; c < w; ++c) {
            const std::size_t i = row + c;
            Real s = 0;
            if (c + 1 < w) s -= uh[i];
            if (c > 0) s += uh[i - 1];
            if (r + 1 < h) s -= uv[i];
            if (r > 0) s += uv[i - w];
            out[i] = s;
        }
    }
}

template <std::floating_point Real>
BasicVectorField<Real> apply_gradient(const BasicImage<Real>& x) {
    BasicVectorField<Real> out(x.size());
    gradient_into<Real>(x.data, x.shape, out.data);
    return out;
}

template <std::floating_point Real>
BasicImage<Real> apply_gradient_adjoint(const BasicVectorField<Real>& u, GridShape shape) {
    detail::require_size(u.n, shape.size(), "gradient adjoint");
    BasicImage<Real> out(shape.width, shape.height);
    gradient_adjoint_into<Real>(u.data, shape, out.data);
    return out;
}

/// Exact lambda_max(D^T D) for the Neumann forward-difference gradient:
/// the spectrum of D^T D is {4 sin^2(pi k / 2W) + 4 sin^2(pi l / 2H)}.
inline double gradient_norm_sq_exact(GridShape shape) {
    auto top = [](std::size_t m) {
        const double s = std::sin(std::numbers::pi * double(m - 1) / (2.0 * double(m)));
        return 4.0 * s * s;
    };
    return top(shape.width) + top(shape.height);
}

/// Upper bound of |||D|||^2 valid on every grid.
inline constexpr double gradient_norm_sq_bound = 8.0;

/// Power-iteration estimate of |||D|||^2 = lambda_max(D^T D).
///
/// Returns the Rayleigh quotient of (D^T D)^k x0 for a fixed pseudo-random x0.
/// For a PSD operator this sequence is nondecreasing in k and never exceeds
/// the true eigenvalue.
inline double operator_norm_sq(std::size_t width, std::size_t height, int iters) {
    if (iters < 1)
        throw std::invalid_argument("operator_norm_sq: iters must be >= 1");
    const GridShape shape{width, height};
    const std::size_t n = shape.size();
    if (n == 0)
        throw std::invalid_argument("operator_norm_sq: empty grid");

    std::vector<double> x(n), g(2 * n), y(n);
    SplitMix64 rng(0x5eedu);
    for (auto& xi : x) xi = rng.uniform() - 0.5;

    double estimate = 0.0;
    for (int k = 0; k < iters; ++k) {
        const double nx = norm2<double>(x);
        if (nx == 0.0)
            return 0.0;
        for (auto& xi : x) xi /= nx;
        gradient_into<double>(x, shape, g);
        gradient_adjoint_into<double>(g, shape, y);
        estimate = std::max(estimate, dot<double>(x, y));
        x.swap(y);
    }
    return estimate;
}

}  // namespace cncdtv
