#pragma once

// CNC-DTV denoising as a convex problem over z = (x, y, v) in R^n x R^2n x R^2n:
//
//   minimize  F(z) + |v|_{1,2} + i_S(z) + i_E(Dx, A^{-*} v)
//                  + i_{B_inf,2}(A^{-1} M^T M (Dx - y))
//
//   F(x, y, v) = (lambda/2)|x - o|^2 - (1/2)|M D x|^2 + (1/2)|M y|^2,
//   M = sqrt(gamma) I,  gamma = rho lambda / 8,  S = [0,1]^n x R^2n x R^2n,
//
// solved by a primal-dual splitting with
//   h1 = |.|_{1,2},    L1 z = v
//   h2 = i_{B_inf,2},  L2 z = gamma A^{-1} (Dx - y)
//   h3 = i_E,          L3 z = (Dx, A^{-*} v).
//
// Dual variables are sized by the codomains of L1, L2, L3 (2n, 2n, 2n + 2n).

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "cncdtv/direction.hpp"
#include "cncdtv/grid.hpp"
#include "cncdtv/prox.hpp"

namespace cncdtv {

class CncParams {
public:
    CncParams() = default;

    CncParams(double lambda, double rho) : lambda_(lambda), rho_(rho) {
        if (!(lambda > 0) || !std::isfinite(lambda))
            throw std::invalid_argument("lambda must be a positive finite number");
        if (!(rho >= 0 && rho < 1))
            throw std::invalid_argument("rho must lie in [0, 1): convexity requires gamma < lambda/8");
    }

    double lambda() const noexcept { return lambda_; }
    double rho() const noexcept { return rho_; }
    /// M^T M = gamma I
    double gamma() const noexcept { return rho_ * lambda_ / 8.0; }

private:
    double lambda_ = 1.0;
    double rho_ = 0.0;
};

enum class SolverVariant { c_tv, cnc_tv, c_dtv, cnc_dtv };

inline constexpr SolverVariant all_variants[] = {SolverVariant::c_tv, SolverVariant::cnc_tv, SolverVariant::c_dtv,
                                                 SolverVariant::cnc_dtv};

constexpr bool is_cnc(SolverVariant v) noexcept { return v == SolverVariant::cnc_tv || v == SolverVariant::cnc_dtv; }
constexpr bool is_directional(SolverVariant v) noexcept {
    return v == SolverVariant::c_dtv || v == SolverVariant::cnc_dtv;
}

inline std::string_view to_string(SolverVariant v) {
    switch (v) {
    case SolverVariant::c_tv: return "c-tv";
    case SolverVariant::cnc_tv: return "cnc-tv";
    case SolverVariant::c_dtv: return "c-dtv";
    case SolverVariant::cnc_dtv: return "cnc-dtv";
    }
    return "?";
}

inline SolverVariant parse_variant(std::string_view s) {
    for (auto v : all_variants)
        if (to_string(v) == s) return v;
    throw std::invalid_argument("unknown variant '" + std::string(s) + "' (expected c-tv, cnc-tv, c-dtv, cnc-dtv)");
}

enum class NormBound {
    analytic,   // 1 + 9 gamma^2 + 8
    estimated,  // power iteration on sum_i L_i^T L_i, if smaller than the analytic bound
};

struct PrimalPoint {
    Image x;
    VectorField y;
    VectorField v;
};

struct SolverState {
    Image x;
    VectorField y, v;
    VectorField w1, w2;
    VectorField w3a, w3b;  // w3 lives in R^2n x R^2n

    static SolverState zeros(GridShape shape) {
        const std::size_t n = shape.size();
        return SolverState{Image(shape.width, shape.height), VectorField(n), VectorField(n),
                           VectorField(n),  VectorField(n), VectorField(n), VectorField(n)};
    }

    PrimalPoint primal() const { return {x, y, v}; }
};

struct TraceRecord {
    int iter = 0;
    double objective = 0.0;  // F(z) + |v|_{1,2}, indicators dropped
    std::optional<double> psnr;
    double rel_change = 0.0;
    std::optional<double> dist_to_ref;
};

using SolverTrace = std::vector<TraceRecord>;

inline constexpr double default_step_ratio = 30.0;

struct SolverConfig {
    CncParams params;
    SolverVariant variant = SolverVariant::cnc_dtv;
    DirectionField field;  // ignored by the TV variants; empty means isotropic
    int max_iters = 3000;
    double tol = 0.0;      // relative change of (z, w) per iteration; 0 runs the full budget
    std::optional<double> tau, sigma;  // explicit overrides; the rule is not checked
    // sigma sqrt(B). The plain rule (1) makes the primal steps large and the
    // dual ones small, and converges far more slowly on denoising problems.
    double step_ratio = default_step_ratio;
    NormBound norm_bound = NormBound::analytic;
    int record_every = 1;  // 0 disables the trace
    const Image* clean = nullptr;            // for trace PSNR
    const SolverState* reference = nullptr;  // for trace dist_to_ref
};

class DivergenceError : public std::runtime_error {
public:
    DivergenceError(int iteration, const std::string& what)
        : std::runtime_error(what + " at iteration " + std::to_string(iteration)), iteration_(iteration) {}
    int iteration() const noexcept { return iteration_; }

private:
    int iteration_;
};

// ---------------------------------------------------------------------------
// Problem assembly

/// gamma and direction field actually used by a variant: C-* drop the
/// concave term, *-TV use the unit ball at every pixel. Pixels with alpha = 1
/// get theta = 0, since E_{1,theta} = B_2 for every theta.
struct EffectiveProblem {
    double lambda = 1.0;
    double gamma = 0.0;
    DirectionField field;
};

inline EffectiveProblem effective_problem(const SolverConfig& config, std::size_t n) {
    EffectiveProblem p;
    p.lambda = config.params.lambda();
    p.gamma = is_cnc(config.variant) ? config.params.gamma() : 0.0;
    if (is_directional(config.variant) && config.field.n != 0) {
        detail::require_size(config.field.n, n, "direction field");
        p.field = config.field;
        for (std::size_t i = 0; i < n; ++i)
            if (p.field.alpha[i] == 1.0) p.field.theta[i] = 0.0;
        p.field.validate();
    } else {
        p.field = DirectionField(n);
    }
    return p;
}

struct SmoothEval {
    double value = 0.0;
    PrimalPoint gradient;
};

/// F(x, y, v) and its gradient (lambda (x - o) - gamma D^T D x, gamma y, 0).
inline SmoothEval smooth_value_grad(const PrimalPoint& z, const Image& o, double lambda, double gamma) {
    const std::size_t n = o.size();
    detail::require_size(z.x.size(), n, "smooth_value_grad x");
    detail::require_size(z.y.n, n, "smooth_value_grad y");
    detail::require_size(z.v.n, n, "smooth_value_grad v");
    SmoothEval out{0.0, {Image(o.width(), o.height()), VectorField(n), VectorField(n)}};
    VectorField dx = apply_gradient(z.x);
    const Image dtdx = apply_gradient_adjoint(dx, o.shape);
    double fid = 0, conc = 0, quad = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double r = z.x.data[i] - o.data[i];
        fid += r * r;
        out.gradient.x.data[i] = lambda * r - gamma * dtdx.data[i];
    }
    for (std::size_t i = 0; i < 2 * n; ++i) {
        conc += dx.data[i] * dx.data[i];
        quad += z.y.data[i] * z.y.data[i];
        out.gradient.y.data[i] = gamma * z.y.data[i];
    }
    out.value = 0.5 * lambda * fid - 0.5 * gamma * conc + 0.5 * gamma * quad;
    return out;
}

inline SmoothEval smooth_value_grad(const PrimalPoint& z, const Image& o, const CncParams& params) {
    return smooth_value_grad(z, o, params.lambda(), params.gamma());
}

struct ConvexityReport {
    bool positive_semidefinite = false;
    double lambda_min = 0.0;
    bool dense = false;  // true when computed by a dense eigensolve
};

/// Smallest eigenvalue of H = lambda I - gamma D^T D. Dense symmetric
/// eigensolve up to 256 pixels, exact closed-form spectrum beyond.
inline ConvexityReport check_convexity(const CncParams& params, std::size_t width, std::size_t height) {
    const GridShape shape{width, height};
    const std::size_t n = shape.size();
    ConvexityReport rep;
    if (n <= 256) {
        Eigen::MatrixXd h = Eigen::MatrixXd::Zero(Eigen::Index(n), Eigen::Index(n));
        std::vector<double> e(n, 0.0), g(2 * n), col(n);
        for (std::size_t j = 0; j < n; ++j) {
            e[j] = 1.0;
            gradient_into<double>(e, shape, g);
            gradient_adjoint_into<double>(g, shape, col);
            for (std::size_t i = 0; i < n; ++i)
                h(Eigen::Index(i), Eigen::Index(j)) = (i == j ? params.lambda() : 0.0) - params.gamma() * col[i];
            e[j] = 0.0;
        }
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(h, Eigen::EigenvaluesOnly);
        rep.lambda_min = es.eigenvalues().minCoeff();
        rep.dense = true;
    } else {
        rep.lambda_min = params.lambda() - params.gamma() * gradient_norm_sq_exact(shape);
    }
    rep.positive_semidefinite = rep.lambda_min >= -1e-12 * params.lambda();
    return rep;
}

struct StepSizes {
    double tau = 0.0;
    double sigma = 0.0;
    double norm_bound = 0.0;  // bound B on |||sum_i L_i^T L_i|||
    double delta = 0.0;       // Lipschitz constant of grad F
};

/// sigma = ratio/sqrt(B), tau = 1/(delta/2 + sigma B), so that
/// 1/tau - sigma B = delta/2 holds with equality for every ratio > 0.
inline StepSizes select_steps(double lambda, double gamma, std::optional<double> norm_bound = {},
                              double ratio = 1.0) {
    if (!(ratio > 0) || !std::isfinite(ratio)) throw std::invalid_argument("select_steps: ratio must be positive");
    StepSizes s;
    s.delta = lambda;  // |lambda I - gamma D^T D| <= lambda and gamma < lambda when gamma <= lambda/8
    s.norm_bound = norm_bound.value_or(1.0 + 9.0 * gamma * gamma + 8.0);
    s.sigma = ratio / std::sqrt(s.norm_bound);
    s.tau = 1.0 / (0.5 * s.delta + s.sigma * s.norm_bound);
    return s;
}

inline StepSizes select_steps(const CncParams& params) { return select_steps(params.lambda(), params.gamma()); }

// ---------------------------------------------------------------------------
// Linear operators of the splitting

class SplittingOperators {
public:
    SplittingOperators(GridShape shape, double gamma, const DirectionField& field)
        : shape_(shape), gamma_(gamma), maps_(field) {
        detail::require_size(field.n, shape.size(), "splitting operators");
    }

    GridShape shape() const noexcept { return shape_; }
    double gamma() const noexcept { return gamma_; }
    const LocalAffineMaps<double>& maps() const noexcept { return maps_; }

    VectorField L1(const PrimalPoint& z) const { return z.v; }

    VectorField L2(const PrimalPoint& z) const {
        VectorField out = apply_gradient(z.x);
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = gamma_ * (out.data[i] - z.y.data[i]);
        maps_.apply(AffineMode::inverse, out.data, out.data);
        return out;
    }

    std::pair<VectorField, VectorField> L3(const PrimalPoint& z) const {
        VectorField b(z.v.n);
        maps_.apply(AffineMode::inverse_adjoint, z.v.data, b.data);
        return {apply_gradient(z.x), std::move(b)};
    }

    PrimalPoint L1T(const VectorField& w) const {
        const std::size_t n = shape_.size();
        return {Image(shape_.width, shape_.height), VectorField(n), w};
    }

    PrimalPoint L2T(const VectorField& w) const {
        const std::size_t n = shape_.size();
        VectorField t(n);
        maps_.apply(AffineMode::inverse_adjoint, w.data, t.data);
        for (auto& ti : t.data) ti *= gamma_;
        PrimalPoint out{apply_gradient_adjoint(t, shape_), t, VectorField(n)};
        for (auto& yi : out.y.data) yi = -yi;
        return out;
    }

    PrimalPoint L3T(const VectorField& a, const VectorField& b) const {
        const std::size_t n = shape_.size();
        VectorField vb(n);
        maps_.apply(AffineMode::inverse, b.data, vb.data);
        return {apply_gradient_adjoint(a, shape_), VectorField(n), std::move(vb)};
    }

    /// Power-iteration estimate of |||L1^T L1 + L2^T L2 + L3^T L3|||.
    double estimate_norm(int iters = 100) const {
        const std::size_t n = shape_.size();
        SplitMix64 rng(0xc0ffeeu);
        PrimalPoint z{Image(shape_.width, shape_.height), VectorField(n), VectorField(n)};
        for (auto* buf : {&z.x.data, &z.y.data, &z.v.data})
            for (auto& e : *buf) e = rng.uniform() - 0.5;
        double estimate = 0;
        for (int k = 0; k < iters; ++k) {
            const double nz = std::sqrt(dot<double>(z.x.data, z.x.data) + dot<double>(z.y.data, z.y.data) +
                                        dot<double>(z.v.data, z.v.data));
            if (nz == 0) return 0;
            for (auto* buf : {&z.x.data, &z.y.data, &z.v.data})
                for (auto& e : *buf) e /= nz;
            PrimalPoint s = L1T(L1(z));
            const PrimalPoint p2 = L2T(L2(z));
            const auto [a, b] = L3(z);
            const PrimalPoint p3 = L3T(a, b);
            for (std::size_t i = 0; i < n; ++i) s.x.data[i] += p2.x.data[i] + p3.x.data[i];
            for (std::size_t i = 0; i < 2 * n; ++i) {
                s.y.data[i] += p2.y.data[i] + p3.y.data[i];
                s.v.data[i] += p2.v.data[i] + p3.v.data[i];
            }
            estimate = std::max(estimate, dot<double>(z.x.data, s.x.data) + dot<double>(z.y.data, s.y.data) +
                                              dot<double>(z.v.data, s.v.data));
            z = std::move(s);
        }
        return estimate;
    }

private:
    GridShape shape_;
    double gamma_;
    LocalAffineMaps<double> maps_;
};

// ---------------------------------------------------------------------------
// Objective

struct ObjectiveReport {
    double value = 0.0;        // +inf when a constraint fails
    double finite_part = 0.0;  // F(z) + |v|_{1,2}
    double consensus_violation = 0.0;  // |Dx - A^{-*} v|_inf
    double ball_violation = 0.0;       // max_i |(A^{-1} gamma (Dx - y))_i| - 1, clipped at 0
    double box_violation = 0.0;        // distance of x outside [0,1], sup norm
    bool feasible = true;
    std::string failed;  // names of violated constraints
};

inline ObjectiveReport objective_value(const SolverState& state, const Image& o, const SolverConfig& config,
                                       double feas_tol = 1e-6) {
    const std::size_t n = o.size();
    const EffectiveProblem prob = effective_problem(config, n);
    const SplittingOperators ops(o.shape, prob.gamma, prob.field);
    const PrimalPoint z{state.x, state.y, state.v};

    ObjectiveReport rep;
    rep.finite_part = smooth_value_grad(z, o, prob.lambda, prob.gamma).value + l12_norm<double>(state.v.data);

    const auto [dx, av] = ops.L3(z);
    for (std::size_t i = 0; i < 2 * n; ++i)
        rep.consensus_violation = std::max(rep.consensus_violation, std::abs(dx.data[i] - av.data[i]));
    rep.ball_violation = std::max(0.0, linf2_norm<double>(ops.L2(z).data) - 1.0);
    for (double xi : state.x.data)
        rep.box_violation = std::max({rep.box_violation, -xi, xi - 1.0});

    auto fail = [&](const char* what) {
        rep.feasible = false;
        if (!rep.failed.empty()) rep.failed += ",";
        rep.failed += what;
    };
    if (rep.consensus_violation > feas_tol) fail("consensus");
    if (rep.ball_violation > feas_tol) fail("ball");
    if (rep.box_violation > 0.0) fail("box");
    rep.value = rep.feasible ? rep.finite_part : std::numeric_limits<double>::infinity();
    return rep;
}

// ---------------------------------------------------------------------------
// Primal-dual iteration

struct SolveResult {
    SolverState state;
    SolverTrace trace;
    int iterations = 0;
    bool converged = false;  // tol reached before the budget ran out
    StepSizes steps;
    double norm_estimate = 0.0;  // power-iteration |||sum L_i^T L_i|||, when computed
};

namespace detail {

inline double psnr_peak1(std::span<const double> x, std::span<const double> ref) {
    double mse = 0;
    for (std::size_t i = 0; i < x.size(); ++i) mse += (x[i] - ref[i]) * (x[i] - ref[i]);
    mse /= double(x.size());
    if (mse == 0) return 999.0;
    return std::min(999.0, 10.0 * std::log10(1.0 / mse));
}

inline double primal_sq_norm(const SolverState& s) {
    return dot<double>(s.x.data, s.x.data) + dot<double>(s.y.data, s.y.data) + dot<double>(s.v.data, s.v.data);
}

inline double primal_sq_dist(const SolverState& a, const SolverState& b) {
    double d = 0;
    auto acc = [&d](const std::vector<double>& p, const std::vector<double>& q) {
        for (std::size_t i = 0; i < p.size(); ++i) d += (p[i] - q[i]) * (p[i] - q[i]);
    };
    acc(a.x.data, b.x.data);
    acc(a.y.data, b.y.data);
    acc(a.v.data, b.v.data);
    return d;
}

}  // namespace detail

namespace detail {

// Raw views of the iterate and scratch buffers for one primal-dual step.
struct PdBuffers {
    std::size_t w = 0, h = 0, n = 0;
    double lambda = 0, gamma = 0, tau = 0, sigma = 0;
    const double* o = nullptr;
    const double *cs = nullptr, *sn = nullptr, *ia = nullptr;  // cos, sin, 1/alpha per pixel
    double *x = nullptr, *y = nullptr, *v = nullptr;
    double *w1 = nullptr, *w2 = nullptr, *w3a = nullptr, *w3b = nullptr;
    double *rh = nullptr, *rv = nullptr;  // rh[-1] and rv[-w .. -1] exist and stay zero
    double *aw2 = nullptr, *xbar = nullptr, *ybar = nullptr, *b3 = nullptr;
};

/// One iteration in flat, branch-free loops. With Measure it also returns
/// |(z+, w+) - (z, w)|^2 and |(z+, w+)|^2.
template <bool Cnc, bool Measure>
std::pair<double, double> pd_iteration(const PdBuffers& b) {
    const std::size_t w = b.w, h = b.h, n = b.n;
    const double lambda = b.lambda, gamma = b.gamma, tau = b.tau, sigma = b.sigma;
    const double* __restrict o = b.o;
    const double* __restrict cs = b.cs;
    const double* __restrict sn = b.sn;
    const double* __restrict ia = b.ia;
    double* __restrict x = b.x;
    double* __restrict y = b.y;
    double* __restrict v = b.v;
    double* __restrict w1 = b.w1;
    double* __restrict w2 = b.w2;
    double* __restrict w3a = b.w3a;
    double* __restrict w3b = b.w3b;
    double* __restrict rh = b.rh;
    double* __restrict rv = b.rv;
    double* __restrict aw2 = b.aw2;
    double* __restrict xbar = b.xbar;
    double* __restrict ybar = b.ybar;
    double* __restrict b3 = b.b3;

    double change = 0, norm = 0;
    auto acc = [&change, &norm](double cur, double old) {
        if constexpr (Measure) {
            change += (cur - old) * (cur - old);
            norm += cur * cur;
        }
    };

    // r = gamma A^{-*} w2 + w3a - gamma D x, zeroed where D^T does not read it
    if constexpr (Cnc) {
        for (std::size_t i = 0; i < n; ++i) {
            const double p = w2[i], q = ia[i] * w2[n + i];
            aw2[i] = gamma * (cs[i] * p - sn[i] * q);
            aw2[n + i] = gamma * (sn[i] * p + cs[i] * q);
        }
        for (std::size_t i = 0; i + 1 < n; ++i) rh[i] = aw2[i] + w3a[i] - gamma * (x[i + 1] - x[i]);
        for (std::size_t i = 0; i + w < n; ++i) rv[i] = aw2[n + i] + w3a[n + i] - gamma * (x[i + w] - x[i]);
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            rh[i] = w3a[i];
            rv[i] = w3a[n + i];
        }
    }
    for (std::size_t row = 0; row < h; ++row) rh[row * w + w - 1] = 0;
    for (std::size_t i = n - w; i < n; ++i) rv[i] = 0;

    // primal step, then the duals that need only pixel-local data
    for (std::size_t i = 0; i < n; ++i) {
        const double t = rh[i - 1] - rh[i] + rv[i - w] - rv[i];
        const double xo = x[i];
        const double xs = xo - tau * (lambda * (xo - o[i]) + t);
        const double xl = xs < 0.0 ? 0.0 : xs;
        const double xn = xl > 1.0 ? 1.0 : xl;  // clamp that keeps NaN
        x[i] = xn;
        xbar[i] = 2.0 * xn - xo;
        acc(xn, xo);

        if constexpr (Cnc) {
            const double y1 = y[i], y2 = y[n + i];
            const double yn1 = y1 - tau * (gamma * y1 - aw2[i]);
            const double yn2 = y2 - tau * (gamma * y2 - aw2[n + i]);
            y[i] = yn1;
            y[n + i] = yn2;
            ybar[i] = 2.0 * yn1 - y1;
            ybar[n + i] = 2.0 * yn2 - y2;
            acc(yn1, y1);
            acc(yn2, y2);
        }

        // v <- v - tau (w1 + A^{-1} w3b)
        const double e1 = w3b[i], e2 = w3b[n + i];
        const double p = cs[i] * e1 + sn[i] * e2, q = ia[i] * (cs[i] * e2 - sn[i] * e1);
        const double v1 = v[i], v2 = v[n + i];
        const double vn1 = v1 - tau * (w1[i] + p), vn2 = v2 - tau * (w1[n + i] + q);
        v[i] = vn1;
        v[n + i] = vn2;
        acc(vn1, v1);
        acc(vn2, v2);
        const double vb1 = 2.0 * vn1 - v1, vb2 = 2.0 * vn2 - v2;

        // w1 <- proj_ball(w1 + sigma vbar)
        double a = w1[i] + sigma * vb1, c = w1[n + i] + sigma * vb2;
        const double r1 = std::sqrt(a * a + c * c);
        const double s1 = 1.0 / (r1 > 1.0 ? r1 : 1.0);
        a *= s1;
        c *= s1;
        acc(a, w1[i]);
        acc(c, w1[n + i]);
        w1[i] = a;
        w1[n + i] = c;

        // pre-projection w3b + sigma A^{-*} vbar
        const double qb = ia[i] * vb2;
        b3[i] = e1 + sigma * (cs[i] * vb1 - sn[i] * qb);
        b3[n + i] = e2 + sigma * (sn[i] * vb1 + cs[i] * qb);
    }

    // D xbar, reusing the r buffers
    for (std::size_t i = 0; i + 1 < n; ++i) rh[i] = xbar[i + 1] - xbar[i];
    for (std::size_t i = 0; i + w < n; ++i) rv[i] = xbar[i + w] - xbar[i];
    for (std::size_t row = 0; row < h; ++row) rh[row * w + w - 1] = 0;
    for (std::size_t i = n - w; i < n; ++i) rv[i] = 0;

    for (std::size_t i = 0; i < n; ++i) {
        const double gh = rh[i], gv = rv[i];
        if constexpr (Cnc) {
            // w2 <- prox_l12(w2 + sigma gamma A^{-1} (D xbar - ybar), sigma)
            const double e1 = gamma * (gh - ybar[i]), e2 = gamma * (gv - ybar[n + i]);
            double a = w2[i] + sigma * (cs[i] * e1 + sn[i] * e2);
            double c = w2[n + i] + sigma * (ia[i] * (cs[i] * e2 - sn[i] * e1));
            const double t2 = 1.0 - sigma / std::sqrt(a * a + c * c);
            const double s2 = t2 > 0.0 ? t2 : 0.0;  // zero block stays zero
            a *= s2;
            c *= s2;
            acc(a, w2[i]);
            acc(c, w2[n + i]);
            w2[i] = a;
            w2[n + i] = c;
        }
        // (w3a, w3b) <- projection onto {(d, -d)}
        const double d1 = 0.5 * ((w3a[i] + sigma * gh) - b3[i]);
        const double d2 = 0.5 * ((w3a[n + i] + sigma * gv) - b3[n + i]);
        acc(d1, w3a[i]);
        acc(d2, w3a[n + i]);
        acc(-d1, w3b[i]);
        acc(-d2, w3b[n + i]);
        w3a[i] = d1;
        w3a[n + i] = d2;
        w3b[i] = -d1;
        w3b[n + i] = -d2;
    }
    return {change, norm};
}

}  // namespace detail

/// |z - ref| / |ref| over the primal block (x, y, v).
inline double relative_primal_distance(const SolverState& z, const SolverState& ref) {
    const double nr = detail::primal_sq_norm(ref);
    return std::sqrt(detail::primal_sq_dist(z, ref) / (nr > 0 ? nr : 1.0));
}

/// Checks that `init` is compatible with the grid of `o`.
inline void validate_state(const SolverState& s, GridShape shape) {
    const std::size_t n = shape.size();
    if (!(s.x.shape == shape)) throw std::invalid_argument("initial state: x has the wrong shape");
    for (const auto* f : {&s.y, &s.v, &s.w1, &s.w2, &s.w3a, &s.w3b})
        if (f->n != n || f->data.size() != 2 * n)
            throw std::invalid_argument("initial state: vector field has the wrong size");
}

/// The stopping test runs every `check_every` iterations; the divergence
/// check also runs at recorded iterations and at the last one.
inline constexpr int check_every = 10;

inline SolveResult solve(const Image& o, const SolverConfig& config, const SolverState* init = nullptr) {
    const GridShape shape = o.shape;
    const std::size_t n = shape.size();
    if (!all_finite<double>(o.data)) throw std::invalid_argument("solve: observation contains non-finite values");
    if (config.max_iters < 0) throw std::invalid_argument("solve: max_iters must be >= 0");
    if (config.clean && !(config.clean->shape == shape))
        throw std::invalid_argument("solve: clean image shape mismatch");
    if (config.reference) validate_state(*config.reference, shape);

    const EffectiveProblem prob = effective_problem(config, n);
    const double lambda = prob.lambda, gamma = prob.gamma;
    if (!check_convexity(CncParams(lambda, gamma * 8.0 / lambda), shape.width, shape.height).positive_semidefinite)
        throw std::invalid_argument("solve: convexity condition violated");

    SolveResult res;
    const SplittingOperators ops(shape, gamma, prob.field);
    std::optional<double> bound;
    if (config.norm_bound == NormBound::estimated) {
        res.norm_estimate = ops.estimate_norm(200);
        bound = std::min(res.norm_estimate, 1.0 + 9.0 * gamma * gamma + 8.0);
    }
    res.steps = select_steps(lambda, gamma, bound, config.step_ratio);
    if (config.tau) res.steps.tau = *config.tau;
    if (config.sigma) res.steps.sigma = *config.sigma;
    const double tau = res.steps.tau, sigma = res.steps.sigma;
    if (!(tau > 0) || !(sigma > 0)) throw std::invalid_argument("solve: step sizes must be positive");

    SolverState s;
    if (init) {
        validate_state(*init, shape);
        s = *init;
    } else {
        s = SolverState::zeros(shape);
        s.x.data = o.data;
        project_box_inplace<double>(s.x.data, 0.0, 1.0);
    }
    const auto& maps = ops.maps();
    const bool cnc = gamma > 0;

    auto record = [&](int iter, double rel_change) {
        TraceRecord rec;
        rec.iter = iter;
        rec.rel_change = rel_change;
        rec.objective = smooth_value_grad(s.primal(), o, lambda, gamma).value + l12_norm<double>(s.v.data);
        if (config.clean) rec.psnr = detail::psnr_peak1(s.x.data, config.clean->data);
        if (config.reference) rec.dist_to_ref = relative_primal_distance(s, *config.reference);
        res.trace.push_back(rec);
    };

    // scratch; the r buffers carry zero padding in front for the adjoint stencil
    std::vector<double> rh_buf(n + 1, 0.0), rv_buf(n + shape.width, 0.0);
    std::vector<double> aw2(cnc ? 2 * n : 0), xbar(n), ybar(cnc ? 2 * n : 0), b3(2 * n);
    detail::PdBuffers buf;
    buf.w = shape.width;
    buf.h = shape.height;
    buf.n = n;
    buf.lambda = lambda;
    buf.gamma = gamma;
    buf.tau = tau;
    buf.sigma = sigma;
    buf.o = o.data.data();
    buf.cs = maps.cos_data();
    buf.sn = maps.sin_data();
    buf.ia = maps.inv_alpha_data();
    buf.x = s.x.data.data();
    buf.y = s.y.data.data();
    buf.v = s.v.data.data();
    buf.w1 = s.w1.data.data();
    buf.w2 = s.w2.data.data();
    buf.w3a = s.w3a.data.data();
    buf.w3b = s.w3b.data.data();
    buf.rh = rh_buf.data() + 1;
    buf.rv = rv_buf.data() + shape.width;
    buf.aw2 = aw2.data();
    buf.xbar = xbar.data();
    buf.ybar = ybar.data();
    buf.b3 = b3.data();

    int it = 0;
    for (; it < config.max_iters; ++it) {
        const bool recording =
            config.record_every > 0 && ((it + 1) % config.record_every == 0 || it + 1 == config.max_iters);
        const bool measure = recording || (it + 1) % check_every == 0 || it + 1 == config.max_iters;
        if (!measure) {
            cnc ? detail::pd_iteration<true, false>(buf) : detail::pd_iteration<false, false>(buf);
            continue;
        }
        const auto [change, norm] = cnc ? detail::pd_iteration<true, true>(buf) : detail::pd_iteration<false, true>(buf);
        // a NaN or Inf anywhere in the iterate propagates into these sums
        if (!std::isfinite(change) || !std::isfinite(norm)) throw DivergenceError(it + 1, "non-finite iterate");
        const double rel = std::sqrt(change / (norm > 0 ? norm : 1.0));

        if (recording) record(it + 1, rel);
        // tested on the fixed cadence only, so tracing never changes the result
        if (config.tol > 0 && (it + 1) % check_every == 0 && rel < config.tol) {
            ++it;
            res.converged = true;
            if (config.record_every > 0 && (res.trace.empty() || res.trace.back().iter != it)) record(it, rel);
            break;
        }
    }
    res.iterations = it;
    res.state = std::move(s);
    return res;
}

// ---------------------------------------------------------------------------
// Two-route check of the dualised reformulation on tiny instances.
//
// Route 1: J(x) = phi_A(Dx) - phi_M(Dx) + (lambda/2)|x - o|^2, with phi_M from
//          the envelope oracle.
// Route 2: min_y of the reformulated objective,
//            (lambda/2)|x-o|^2 - (gamma/2)|Dx|^2 + phi_A(Dx)
//              + min_y { (gamma/2)|y|^2 : gamma A^{-1}(Dx - y) in B_inf,2 },
//          where the inner minimum is found per pixel by sampling the
//          boundary of the shifted ellipse Dx_i - E_i / gamma and
//          golden-section refinement.

struct ReformulationCheck {
    double direct = 0.0;
    double reformulated = 0.0;
    double gap = 0.0;
};

namespace detail {

/// min { |y|^2 : y in u - E / gamma }, E = R(theta) diag(1, alpha) B_2.
inline double min_sq_norm_shifted_ellipse(double u1, double u2, double gamma, double alpha, double theta) {
    const double c = std::cos(theta), s = std::sin(theta);
    // 0 is feasible iff gamma u in E iff |A^{-1} gamma u| <= 1
    const double p1 = c * u1 + s * u2, p2 = (-s * u1 + c * u2) / alpha;
    if (gamma * std::hypot(p1, p2) <= 1.0) return 0.0;
    auto f = [&](double phi) {
        const double q1 = std::cos(phi), q2 = alpha * std::sin(phi);
        const double y1 = u1 - (c * q1 - s * q2) / gamma;
        const double y2 = u2 - (s * q1 + c * q2) / gamma;
        return y1 * y1 + y2 * y2;
    };
    constexpr int samples = 7200;
    const double step = 2.0 * std::numbers::pi / samples;
    int best = 0;
    double fbest = f(0.0);
    for (int k = 1; k < samples; ++k) {
        const double v = f(k * step);
        if (v < fbest) { fbest = v; best = k; }
    }
    double lo = (best - 1) * step, hi = (best + 1) * step;
    const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
    double x1 = hi - gr * (hi - lo), x2 = lo + gr * (hi - lo);
    double f1 = f(x1), f2 = f(x2);
    for (int it = 0; it < 100; ++it) {
        if (f1 < f2) { hi = x2; x2 = x1; f2 = f1; x1 = hi - gr * (hi - lo); f1 = f(x1); }
        else { lo = x1; x1 = x2; f1 = f2; x2 = lo + gr * (hi - lo); f2 = f(x2); }
    }
    return std::min({fbest, f1, f2});
}

}  // namespace detail

inline ReformulationCheck reformulation_consistency_check(const Image& x, const Image& o, const CncParams& params,
                                                          const DirectionField& field, int envelope_iters = 200000) {
    if (x.size() > 16) throw std::invalid_argument("reformulation check: instance too large (n <= 16)");
    if (!(x.shape == o.shape)) throw std::invalid_argument("reformulation check: shape mismatch");
    detail::require_size(field.n, x.size(), "reformulation check field");
    const std::size_t n = x.size();
    const double lambda = params.lambda(), gamma = params.gamma();

    double fid = 0;
    for (std::size_t i = 0; i < n; ++i) fid += (x.data[i] - o.data[i]) * (x.data[i] - o.data[i]);
    fid *= 0.5 * lambda;
    const VectorField u = apply_gradient(x);
    const double phi = dtv_penalty(u.data, field);

    ReformulationCheck out;
    const EnvelopeResult env = moreau_envelope_oracle(u.data, gamma, field, envelope_iters);
    if (!env.converged) throw std::runtime_error("reformulation check: envelope oracle did not converge");
    out.direct = phi - env.value + fid;

    double inner = 0;
    if (gamma > 0) {
        for (std::size_t i = 0; i < n; ++i)
            inner += detail::min_sq_norm_shifted_ellipse(u.h(i), u.v(i), gamma, field.alpha[i], field.theta[i]);
        inner *= 0.5 * gamma;
    }
    out.reformulated = fid - 0.5 * gamma * dot<double>(u.data, u.data) + phi + inner;
    out.gap = std::abs(out.direct - out.reformulated);
    return out;
}

}  // namespace cncdtv
