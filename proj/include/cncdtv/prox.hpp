#pragma once

// Closed-form proximity operators used by the primal-dual solver, plus
// brute-force verification oracles (prox by grid search, generalised Moreau
// envelope by an inner iterative solve). The oracles are never used on the
// solve path.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "cncdtv/direction.hpp"
#include "cncdtv/grid.hpp"

namespace cncdtv {

// ---------------------------------------------------------------------------
// In-place kernels on the packed (h..., v...) layout.

/// Block soft-thresholding: u_i <- (1 - sigma / |u_i|)_+ u_i.
template <std::floating_point Real>
void prox_l12_inplace(std::span<Real> u, Real sigma) {
    const std::size_t n = u.size() / 2;
    for (std::size_t i = 0; i < n; ++i) {
        const Real a = u[i], b = u[n + i];
        const Real norm = std::sqrt(a * a + b * b);
        if (norm <= sigma) {
            u[i] = 0;
            u[n + i] = 0;
        } else {
            const Real s = Real(1) - sigma / norm;
            u[i] = s * a;
            u[n + i] = s * b;
        }
    }
}

/// u_i <- u_i / max(|u_i|, 1).
template <std::floating_point Real>
void project_linf2_ball_inplace(std::span<Real> u) {
    const std::size_t n = u.size() / 2;
    for (std::size_t i = 0; i < n; ++i) {
        const Real a = u[i], b = u[n + i];
        const Real sq = a * a + b * b;
        if (sq > Real(1)) {
            const Real s = Real(1) / std::sqrt(sq);
            u[i] = s * a;
            u[n + i] = s * b;
        }
    }
}

/// (y, v) <- ((y - v) / 2, (v - y) / 2), the projection onto {(a, -a)}.
template <std::floating_point Real>
void prox_consensus_dual_inplace(std::span<Real> y, std::span<Real> v) {
    detail::require_size(y.size(), v.size(), "consensus prox");
    for (std::size_t i = 0; i < y.size(); ++i) {
        const Real d = Real(0.5) * (y[i] - v[i]);
        y[i] = d;
        v[i] = -d;
    }
}

template <std::floating_point Real>
void project_box_inplace(std::span<Real> x, Real lo, Real hi) {
    for (auto& xi : x) xi = std::clamp(xi, lo, hi);
}

// ---------------------------------------------------------------------------
// Value-returning wrappers.

template <std::floating_point Real>
BasicVectorField<Real> prox_l12(BasicVectorField<Real> u, Real sigma) {
    if (!(sigma > 0))
        throw std::invalid_argument("prox_l12: sigma must be > 0");
    prox_l12_inplace<Real>(u.data, sigma);
    return u;
}

template <std::floating_point Real>
BasicVectorField<Real> project_linf2_ball(BasicVectorField<Real> u) {
    project_linf2_ball_inplace<Real>(u.data);
    return u;
}

template <std::floating_point Real>
std::pair<BasicVectorField<Real>, BasicVectorField<Real>> prox_consensus_dual(BasicVectorField<Real> y,
                                                                              BasicVectorField<Real> v) {
    detail::require_size(y.n, v.n, "prox_consensus_dual");
    prox_consensus_dual_inplace<Real>(y.data, v.data);
    return {std::move(y), std::move(v)};
}

template <std::floating_point Real>
BasicImage<Real> project_box(BasicImage<Real> x, Real lo, Real hi) {
    if (!(lo <= hi))
        throw std::invalid_argument("project_box: lo must be <= hi");
    project_box_inplace<Real>(x.data, lo, hi);
    return x;
}

// ---------------------------------------------------------------------------
// Norms of the DTV family.

template <std::floating_point Real>
Real l12_norm(std::span<const Real> u) {
    const std::size_t n = u.size() / 2;
    Real s = 0;
    for (std::size_t i = 0; i < n; ++i)
        s += std::hypot(u[i], u[n + i]);
    return s;
}

/// max_i |u_i|_2
template <std::floating_point Real>
Real linf2_norm(std::span<const Real> u) {
    const std::size_t n = u.size() / 2;
    Real m = 0;
    for (std::size_t i = 0; i < n; ++i)
        m = std::max(m, std::hypot(u[i], u[n + i]));
    return m;
}

/// phi_A(u) = min { |v|_{1,2} : A^{-*} v = u } = sum_i |diag(1, alpha_i) R(-theta_i) u_i|_2.
/// Equivalently the support function of the ellipses E_i evaluated at u_i.
inline double dtv_penalty(std::span<const double> u, const DirectionField& field) {
    detail::require_size(u.size(), 2 * field.n, "dtv_penalty");
    const std::size_t n = field.n;
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double c = std::cos(field.theta[i]), sn = std::sin(field.theta[i]);
        const double a = c * u[i] + sn * u[n + i];
        const double b = field.alpha[i] * (c * u[n + i] - sn * u[i]);
        s += std::hypot(a, b);
    }
    return s;
}

// ---------------------------------------------------------------------------
// Brute-force prox oracle.

struct ProxOracleOptions {
    /// Half-width of the initial search box around the starting point; <= 0
    /// picks |u| + sigma + 1.
    double radius = 0.0;
    /// Zooming stops once the grid spacing drops below this.
    double resolution = 1e-3;
    /// Golden-section steps per coordinate in the nested refinement.
    int golden_steps = 30;
};

/// argmin_p sigma * objective(p) + 0.5 |p - u|^2 by brute force.
///
/// A zooming grid locates the minimiser to `resolution`; the result is then
/// refined by nested golden-section search, minimising coordinate by
/// coordinate with the later coordinates minimised out. For a convex objective
/// every nested problem is unimodal, kinks included. Infinite costs are
/// treated as a constraint: infeasible points are charged an exact penalty on
/// the gauge of the feasible set about an interior anchor point.
///
/// `basis` (optional, orthonormal columns stored column after column)
/// restricts the search to the subspace it spans; the objective is then
/// implicitly +inf off that subspace. The search dimension must be <= 4.
inline std::vector<double> prox_oracle(const std::function<double(std::span<const double>)>& objective,
                                       std::span<const double> u, double sigma,
                                       const ProxOracleOptions& opt = {},
                                       const std::vector<std::vector<double>>& basis = {}) {
    const std::size_t d = u.size();
    const std::size_t k = basis.empty() ? d : basis.size();
    if (k == 0 || k > 4)
        throw std::invalid_argument("prox_oracle: search dimension must be in [1, 4]");
    if (!(sigma > 0))
        throw std::invalid_argument("prox_oracle: sigma must be > 0");
    for (const auto& b : basis)
        detail::require_size(b.size(), d, "prox_oracle basis");

    std::vector<double> point(d);
    auto embed = [&](std::span<const double> c) {
        if (basis.empty()) {
            std::copy(c.begin(), c.end(), point.begin());
        } else {
            std::fill(point.begin(), point.end(), 0.0);
            for (std::size_t j = 0; j < k; ++j)
                for (std::size_t t = 0; t < d; ++t) point[t] += c[j] * basis[j][t];
        }
    };
    auto quad = [&] {
        double q = 0;
        for (std::size_t t = 0; t < d; ++t) q += (point[t] - u[t]) * (point[t] - u[t]);
        return 0.5 * q;
    };
    auto cost = [&](std::span<const double> c) {
        embed(c);
        const double f = objective(point);
        if (!std::isfinite(f)) return std::numeric_limits<double>::infinity();
        return sigma * f + quad();
    };

    std::vector<double> center(k);
    if (basis.empty()) {
        std::copy(u.begin(), u.end(), center.begin());
    } else {
        for (std::size_t j = 0; j < k; ++j) center[j] = dot<double>(basis[j], u);
    }
    const double scale = norm2<double>(u) + sigma + 1.0;
    double radius = opt.radius > 0 ? opt.radius : scale;
    const int m = k <= 2 ? 21 : 7;

    // a feasible point reached by plain evaluation, generically interior
    std::vector<double> anchor;
    // Fraction t in [0, 1] at which the segment anchor -> q leaves the
    // feasible set (1 if q is feasible).
    std::vector<double> seg(k);
    auto exit_fraction = [&](std::span<const double> q) {
        double lo = 0.0, hi = 1.0;
        for (int b = 0; b < 28; ++b) {
            const double t = 0.5 * (lo + hi);
            for (std::size_t j = 0; j < k; ++j) seg[j] = anchor[j] + t * (q[j] - anchor[j]);
            (std::isfinite(cost(seg)) ? lo : hi) = t;
        }
        return lo;
    };

    std::vector<double> c(k), best(center);
    double best_cost = cost(best);
    if (std::isfinite(best_cost)) anchor = best;
    int moves = 0;
    double h = 2.0 * radius / double(m - 1);
    for (;;) {
        h = 2.0 * radius / double(m - 1);
        std::vector<int> idx(k, 0);
        std::vector<double> level_best = center;
        double level_cost = std::numeric_limits<double>::infinity();
        for (;;) {
            for (std::size_t j = 0; j < k; ++j) c[j] = center[j] - radius + h * idx[j];
            double v = cost(c);
            // infeasible: score the exit point of the segment from the anchor
            if (!std::isfinite(v) && !anchor.empty()) {
                const double t = exit_fraction(c);
                for (std::size_t j = 0; j < k; ++j) c[j] = anchor[j] + t * (c[j] - anchor[j]);
                v = cost(c);
            }
            if (v < level_cost) {
                level_cost = v;
                level_best = c;
            }
            std::size_t j = 0;
            while (j < k && ++idx[j] == m) idx[j++] = 0;
            if (j == k) break;
        }
        if (level_cost < best_cost) {
            best_cost = level_cost;
            best = level_best;
        }
        if (!std::isfinite(best_cost))
            throw std::runtime_error("prox_oracle: no feasible grid point; enlarge radius");
        if (anchor.empty()) anchor = best;
        double shift = 0.0;
        for (std::size_t j = 0; j < k; ++j) shift = std::max(shift, std::abs(best[j] - center[j]));
        center = best;
        // re-centre without shrinking while the best point is near the edge
        if (shift > 0.5 * radius && ++moves < 100000) continue;
        if (h < opt.resolution) break;
        radius *= 0.35;
    }

    // Finite convex extension: cost on the feasible set, quadratic plus a
    // gauge penalty outside it. The penalty weight exceeds any multiplier of
    // the constraint for inputs of this scale, so the minimiser is unchanged.
    const double weight = 4.0 * scale * scale;
    auto extended = [&](std::span<const double> q) {
        const double v = cost(q);
        if (std::isfinite(v)) return v;
        const double t = exit_fraction(q);
        for (std::size_t j = 0; j < k; ++j) c[j] = anchor[j] + t * (q[j] - anchor[j]);
        const double on_boundary = cost(c);  // sigma f(r(q)) + quadratic at r(q)
        const double fr = on_boundary - quad();
        embed(q);
        return fr + quad() + weight * (1.0 / std::max(t, 1e-300) - 1.0);
    };

    const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
    const double window = std::max(16.0 * h, 0.02 * scale);
    std::vector<double> q = best;
    std::function<double(std::size_t)> nested = [&](std::size_t j) -> double {
        if (j == k) return extended(q);
        double lo = best[j] - window, hi = best[j] + window;
        auto f = [&](double t) {
            q[j] = t;
            return nested(j + 1);
        };
        double x1 = hi - gr * (hi - lo), x2 = lo + gr * (hi - lo);
        double f1 = f(x1), f2 = f(x2);
        for (int it = 0; it < opt.golden_steps; ++it) {
            if (f1 < f2) {
                hi = x2; x2 = x1; f2 = f1;
                x1 = hi - gr * (hi - lo); f1 = f(x1);
            } else {
                lo = x1; x1 = x2; f1 = f2;
                x2 = lo + gr * (hi - lo); f2 = f(x2);
            }
        }
        return f(0.5 * (lo + hi));
    };
    nested(0);
    // the refined point may sit a hair outside the feasible set
    if (!std::isfinite(cost(q))) {
        const double t = exit_fraction(q);
        for (std::size_t j = 0; j < k; ++j) q[j] = anchor[j] + t * (q[j] - anchor[j]);
    }
    if (cost(q) < best_cost) best = q;
    embed(best);
    return point;
}

// ---------------------------------------------------------------------------
// Generalised Moreau envelope oracle, M = sqrt(gamma) I:
//
//   phi_M(u) = inf_t phi_A(t) + (gamma / 2) |u - t|^2
//            = sup_{s_i in E_i} <s, u> - |s|^2 / (2 gamma).
//
// The dual problem is solved per pixel by projected gradient in q = A^{-1} s,
// which ranges over the unit ball: maximize <A q, u> - |A q|^2 / (2 gamma).

struct EnvelopeResult {
    double value = 0.0;
    int iterations = 0;
    bool converged = true;
};

inline EnvelopeResult moreau_envelope_oracle(std::span<const double> u, double gamma, const DirectionField& field,
                                             int iters, double tol = 1e-13) {
    if (!(gamma >= 0))
        throw std::invalid_argument("moreau_envelope_oracle: gamma must be >= 0");
    detail::require_size(u.size(), 2 * field.n, "moreau_envelope_oracle");
    EnvelopeResult result;
    if (gamma == 0) return result;  // inf_t phi_A(t) = phi_A(0) = 0

    const std::size_t n = field.n;
    for (std::size_t i = 0; i < n; ++i) {
        const double c = std::cos(field.theta[i]), s = std::sin(field.theta[i]);
        const double alpha = field.alpha[i];
        // A = R(theta) diag(1, alpha)
        auto apply_a = [&](double q1, double q2, double& o1, double& o2) {
            o1 = c * q1 - s * alpha * q2;
            o2 = s * q1 + c * alpha * q2;
        };
        const double u1 = u[i], u2 = u[n + i];
        // A^T u
        const double atu1 = c * u1 + s * u2;
        const double atu2 = alpha * (-s * u1 + c * u2);
        const double lip = alpha * alpha / gamma;

        // start from the unconstrained maximizer q = gamma A^{-1} u, projected
        double q1 = gamma * atu1, q2 = gamma * atu2 / (alpha * alpha);
        auto project = [](double& a, double& b) {
            const double r = std::hypot(a, b);
            if (r > 1.0) { a /= r; b /= r; }
        };
        project(q1, q2);

        int it = 0;
        for (; it < iters; ++it) {
            double aq1, aq2;
            apply_a(q1, q2, aq1, aq2);
            // A^T A q
            const double ataq1 = c * aq1 + s * aq2;
            const double ataq2 = alpha * (-s * aq1 + c * aq2);
            double n1 = q1 + (atu1 - ataq1 / gamma) / lip;
            double n2 = q2 + (atu2 - ataq2 / gamma) / lip;
            project(n1, n2);
            const double step = std::hypot(n1 - q1, n2 - q2);
            q1 = n1;
            q2 = n2;
            if (step < tol) break;
        }
        if (it == iters) result.converged = false;
        result.iterations = std::max(result.iterations, it);

        double aq1, aq2;
        apply_a(q1, q2, aq1, aq2);
        result.value += aq1 * u1 + aq2 * u2 - (aq1 * aq1 + aq2 * aq2) / (2.0 * gamma);
    }
    return result;
}

/// Closed form of the envelope in the TV geometry (alpha = 1, theta = 0):
/// per-pixel Huber function of |u_i| with threshold 1/gamma.
inline double huber_envelope_l12(std::span<const double> u, double gamma) {
    const std::size_t n = u.size() / 2;
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double r = std::hypot(u[i], u[n + i]);
        s += gamma * r <= 1.0 ? 0.5 * gamma * r * r : r - 0.5 / gamma;
    }
    return s;
}

}  // namespace cncdtv
