#pragma once

// Helpers shared by the unit tests and the acceptance binary: seeded random
// data, explicit matrices of the linear operators, and an independent TV
// denoiser used as an oracle.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <numbers>
#include <vector>

#include "cncdtv/direction.hpp"
#include "cncdtv/grid.hpp"
#include "cncdtv/random.hpp"

namespace cncdtv::testing {

inline std::vector<double> random_vector(std::size_t len, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    SplitMix64 rng(seed);
    std::vector<double> v(len);
    for (auto& e : v) e = rng.uniform(lo, hi);
    return v;
}

inline Image random_image(std::size_t w, std::size_t h, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
    return Image(w, h, random_vector(w * h, seed, lo, hi));
}

inline VectorField random_field(std::size_t n, std::uint64_t seed, double scale = 1.0) {
    VectorField u(n);
    u.data = random_vector(2 * n, seed, -scale, scale);
    return u;
}

/// alpha in [1, max_alpha], theta in [-pi/2, pi/2].
inline DirectionField random_directions(std::size_t n, std::uint64_t seed, double max_alpha = 5.0) {
    SplitMix64 rng(seed);
    std::vector<double> a(n), t(n);
    for (std::size_t i = 0; i < n; ++i) {
        a[i] = rng.uniform(1.0, max_alpha);
        t[i] = rng.uniform(-std::numbers::pi / 2, std::numbers::pi / 2);
    }
    return DirectionField(std::move(a), std::move(t));
}

inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        den += b[i] * b[i];
    }
    return std::sqrt(num / (den > 0 ? den : 1.0));
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

/// D assembled entry by entry from the stencil (not from apply_gradient).
inline Eigen::MatrixXd gradient_matrix(std::size_t w, std::size_t h) {
    const std::size_t n = w * h;
    Eigen::MatrixXd d = Eigen::MatrixXd::Zero(Eigen::Index(2 * n), Eigen::Index(n));
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
            const auto i = Eigen::Index(r * w + c);
            if (c + 1 < w) {
                d(i, i) = -1;
                d(i, i + 1) = 1;
            }
            if (r + 1 < h) {
                d(Eigen::Index(n) + i, i) = -1;
                d(Eigen::Index(n) + i, i + Eigen::Index(w)) = 1;
            }
        }
    return d;
}

/// Projected dual iteration for min_x (lambda/2)|x - o|^2 + TV(x):
///   p <- (p + tau g) / (1 + tau |g|),  g = D(-D^T p - lambda o),
///   x = o + D^T p / lambda.
inline Image chambolle_tv(const Image& o, double lambda, int iters, double tau = 0.249) {
    const std::size_t n = o.size();
    VectorField p(n);
    Image q(o.width(), o.height());
    for (int it = 0; it < iters; ++it) {
        const Image dtp = apply_gradient_adjoint(p, o.shape);
        for (std::size_t i = 0; i < n; ++i) q.data[i] = -dtp.data[i] - lambda * o.data[i];
        const VectorField g = apply_gradient(q);
        for (std::size_t i = 0; i < n; ++i) {
            const double gh = g.data[i], gv = g.data[n + i];
            const double den = 1.0 + tau * std::hypot(gh, gv);
            p.data[i] = (p.data[i] + tau * gh) / den;
            p.data[n + i] = (p.data[n + i] + tau * gv) / den;
        }
    }
    const Image dtp = apply_gradient_adjoint(p, o.shape);
    Image x = o;
    for (std::size_t i = 0; i < n; ++i) x.data[i] += dtp.data[i] / lambda;
    return x;
}

}  // namespace cncdtv::testing
