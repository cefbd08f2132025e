#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <cmath>
#include <limits>

#include "cncdtv/imaging.hpp"
#include "cncdtv/solver.hpp"
#include "support.hpp"

using namespace cncdtv;
using namespace cncdtv::testing;

namespace {

PrimalPoint random_point(GridShape s, std::uint64_t seed) {
    const std::size_t n = s.size();
    return {random_image(s.width, s.height, seed), random_field(n, seed + 1), random_field(n, seed + 2)};
}

double inner(const PrimalPoint& a, const PrimalPoint& b) {
    return dot<double>(a.x.data, b.x.data) + dot<double>(a.y.data, b.y.data) + dot<double>(a.v.data, b.v.data);
}

double norm(const PrimalPoint& a) { return std::sqrt(inner(a, a)); }

Image noisy_shapes(std::size_t size, std::uint64_t seed) {
    GeneratorSpec g;
    g.kind = ImageKind::geometric;
    g.width = g.height = size;
    return add_noise(generate(g), NoiseSpec{0.1, seed});
}

bool same_state(const SolverState& a, const SolverState& b, double tol) {
    auto close = [tol](const std::vector<double>& p, const std::vector<double>& q) {
        for (std::size_t i = 0; i < p.size(); ++i)
            if (std::abs(p[i] - q[i]) > tol) return false;
        return true;
    };
    return close(a.x.data, b.x.data) && close(a.y.data, b.y.data) && close(a.v.data, b.v.data) &&
           close(a.w1.data, b.w1.data) && close(a.w2.data, b.w2.data) && close(a.w3a.data, b.w3a.data) &&
           close(a.w3b.data, b.w3b.data);
}

}  // namespace

// ---------------------------------------------------------------------------
// Parameters

TEST(CncParams, GammaAndValidation) {
    const CncParams p(8.0, 0.99);
    EXPECT_DOUBLE_EQ(p.gamma(), 0.99);
    EXPECT_LT(p.gamma(), p.lambda() / 8.0);
    EXPECT_THROW(CncParams(8.0, 1.0), std::invalid_argument);
    EXPECT_THROW(CncParams(8.0, -0.1), std::invalid_argument);
    EXPECT_THROW(CncParams(0.0, 0.5), std::invalid_argument);
    EXPECT_THROW(CncParams(std::numeric_limits<double>::infinity(), 0.5), std::invalid_argument);
}

TEST(SolverVariant, NamesRoundTrip) {
    for (SolverVariant v : all_variants) EXPECT_EQ(parse_variant(to_string(v)), v);
    EXPECT_THROW(parse_variant("tv"), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Smooth part

TEST(SmoothValueGrad, VanishesAtConstantObservation) {
    const Image o(6, 5, 0.37);
    const std::size_t n = o.size();
    const SmoothEval e = smooth_value_grad(PrimalPoint{o, VectorField(n), random_field(n, 4)}, o, CncParams(5, 0.9));
    EXPECT_NEAR(e.value, 0.0, 1e-14);
    for (double g : e.gradient.x.data) EXPECT_NEAR(g, 0.0, 1e-14);
    for (double g : e.gradient.y.data) EXPECT_EQ(g, 0.0);
    for (double g : e.gradient.v.data) EXPECT_EQ(g, 0.0);
}

// With x = o only the fidelity term drops: F = (gamma/2)(|y|^2 - |Do|^2).
TEST(SmoothValueGrad, AtObservationLeavesConcaveTerm) {
    const Image o = random_image(6, 5, 3);
    const std::size_t n = o.size();
    const CncParams p(5, 0.9);
    const VectorField y = random_field(n, 5);
    const SmoothEval e = smooth_value_grad(PrimalPoint{o, y, random_field(n, 4)}, o, p);
    const VectorField d = apply_gradient(o);
    const double expected = 0.5 * p.gamma() * (dot<double>(y.data, y.data) - dot<double>(d.data, d.data));
    EXPECT_NEAR(e.value, expected, 1e-12);
    const Image dtd = apply_gradient_adjoint(d, o.shape);
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(e.gradient.x.data[i], -p.gamma() * dtd.data[i], 1e-12);
    for (std::size_t i = 0; i < 2 * n; ++i) EXPECT_NEAR(e.gradient.y.data[i], p.gamma() * y.data[i], 1e-15);
}

TEST(SmoothValueGrad, MatchesCentralDifferences) {
    const GridShape s{8, 8};
    const Image o = random_image(8, 8, 10);
    const PrimalPoint z = random_point(s, 20);
    const CncParams params(6.0, 0.99);
    const SmoothEval e = smooth_value_grad(z, o, params);
    const double h = 1e-4;
    std::vector<double> fd, an;
    auto probe = [&](std::vector<double>& buf, const std::vector<double>& grad, PrimalPoint& zz, std::size_t i) {
        const double keep = buf[i];
        buf[i] = keep + h;
        const double fp = smooth_value_grad(zz, o, params).value;
        buf[i] = keep - h;
        const double fm = smooth_value_grad(zz, o, params).value;
        buf[i] = keep;
        fd.push_back((fp - fm) / (2 * h));
        an.push_back(grad[i]);
    };
    PrimalPoint zz = z;
    for (std::size_t i = 0; i < zz.x.data.size(); ++i) probe(zz.x.data, e.gradient.x.data, zz, i);
    for (std::size_t i = 0; i < zz.y.data.size(); ++i) probe(zz.y.data, e.gradient.y.data, zz, i);
    for (std::size_t i = 0; i < zz.v.data.size(); i += 7) probe(zz.v.data, e.gradient.v.data, zz, i);
    EXPECT_LE(relative_error(an, fd), 1e-6);
}

TEST(SmoothValueGrad, ConvexCaseIsPureFidelity) {
    const Image o = random_image(5, 4, 1);
    const PrimalPoint z = random_point(o.shape, 2);
    double fid = 0;
    for (std::size_t i = 0; i < o.size(); ++i) fid += (z.x.data[i] - o.data[i]) * (z.x.data[i] - o.data[i]);
    EXPECT_NEAR(smooth_value_grad(z, o, CncParams(3.0, 0.0)).value, 1.5 * fid, 1e-13);
}

TEST(SmoothValueGrad, DimensionMismatchThrows) {
    const Image o(4, 4);
    PrimalPoint z{Image(4, 4), VectorField(15), VectorField(16)};
    EXPECT_THROW(smooth_value_grad(z, o, CncParams(1, 0)), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Convexity and steps

TEST(CheckConvexity, ConvexCaseHasLambdaMin) {
    const ConvexityReport r = check_convexity(CncParams(3.5, 0.0), 8, 8);
    EXPECT_TRUE(r.positive_semidefinite);
    EXPECT_NEAR(r.lambda_min, 3.5, 1e-12);
    EXPECT_TRUE(r.dense);
}

TEST(CheckConvexity, NearlyNonconvexStillPositive) {
    const ConvexityReport r = check_convexity(CncParams(8.0, 0.99), 8, 8);
    EXPECT_TRUE(r.positive_semidefinite);
    EXPECT_GE(r.lambda_min, 0.08);
    // independent check with the explicit gradient matrix
    const Eigen::MatrixXd d = gradient_matrix(8, 8);
    const Eigen::MatrixXd h = 8.0 * Eigen::MatrixXd::Identity(64, 64) - 0.99 * d.transpose() * d;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(h, Eigen::EigenvaluesOnly);
    EXPECT_NEAR(r.lambda_min, es.eigenvalues().minCoeff(), 1e-10);
}

TEST(CheckConvexity, LargeGridUsesClosedForm) {
    const ConvexityReport r = check_convexity(CncParams(10.0, 0.5), 64, 64);
    EXPECT_FALSE(r.dense);
    EXPECT_NEAR(r.lambda_min, 10.0 - 0.625 * gradient_norm_sq_exact(GridShape{64, 64}), 1e-12);
    EXPECT_GE(r.lambda_min, 10.0 * 0.5);
}

TEST(CheckConvexity, BoundaryCaseIsRefused) { EXPECT_THROW(CncParams(8.0, 1.0), std::invalid_argument); }

TEST(SelectSteps, ConvexExample) {
    const StepSizes s = select_steps(CncParams(8.0, 0.0));
    EXPECT_DOUBLE_EQ(s.norm_bound, 9.0);
    EXPECT_DOUBLE_EQ(s.sigma, 1.0 / 3.0);
    EXPECT_DOUBLE_EQ(s.tau, 1.0 / 7.0);
}

TEST(SelectSteps, NonconvexExample) {
    const StepSizes s = select_steps(CncParams(8.0, 0.99));
    EXPECT_NEAR(s.norm_bound, 17.8209, 1e-12);
    EXPECT_NEAR(s.sigma, 1.0 / std::sqrt(17.8209), 1e-15);
    EXPECT_NEAR(s.tau, 1.0 / (4.0 + std::sqrt(17.8209)), 1e-15);
}

TEST(SelectSteps, RuleHoldsForAnyRatio) {
    for (double lambda : {0.5, 1.0, 8.0, 80.0})
        for (double rho : {0.0, 0.5, 0.99})
            for (double ratio : {0.1, 1.0, 30.0, 1000.0}) {
                const CncParams p(lambda, rho);
                const StepSizes s = select_steps(p.lambda(), p.gamma(), {}, ratio);
                EXPECT_GE(1.0 / s.tau - s.sigma * s.norm_bound - s.delta / 2, -1e-12 * (1.0 / s.tau));
            }
    EXPECT_THROW(select_steps(1.0, 0.0, {}, 0.0), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Splitting operators

TEST(Splitting, FirstOperatorSelectsV) {
    const GridShape s{5, 4};
    const SplittingOperators ops(s, 0.7, random_directions(20, 1));
    const PrimalPoint z = random_point(s, 3);
    EXPECT_EQ(ops.L1(z).data, z.v.data);
}

TEST(Splitting, AdjointsOnRandomInputs) {
    const GridShape s{16, 16};
    const std::size_t n = s.size();
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const SplittingOperators ops(s, 0.9, random_directions(n, seed));
        const PrimalPoint z = random_point(s, seed + 10);
        const VectorField w = random_field(n, seed + 20), w2 = random_field(n, seed + 30);

        const double l1 = dot<double>(ops.L1(z).data, w.data), l1t = inner(z, ops.L1T(w));
        EXPECT_LE(std::abs(l1 - l1t), 1e-10 * norm(z) * norm2<double>(w.data));

        const double l2 = dot<double>(ops.L2(z).data, w.data), l2t = inner(z, ops.L2T(w));
        EXPECT_LE(std::abs(l2 - l2t), 1e-10 * norm(z) * norm2<double>(w.data));

        const auto [a, b] = ops.L3(z);
        const double l3 = dot<double>(a.data, w.data) + dot<double>(b.data, w2.data);
        const double l3t = inner(z, ops.L3T(w, w2));
        EXPECT_LE(std::abs(l3 - l3t), 1e-10 * norm(z) * std::hypot(norm2<double>(w.data), norm2<double>(w2.data)));
    }
}

TEST(Splitting, SecondOperatorVanishesWithoutConcavity) {
    const GridShape s{6, 6};
    const SplittingOperators ops(s, 0.0, random_directions(36, 2));
    for (double e : ops.L2(random_point(s, 5)).data) EXPECT_EQ(e, 0.0);
}

TEST(Splitting, NormEstimateBelowAnalyticBound) {
    for (double gamma : {0.0, 0.5, 2.0}) {
        const SplittingOperators ops(GridShape{12, 10}, gamma, random_directions(120, 7));
        const double est = ops.estimate_norm(300);
        EXPECT_LE(est, 1.0 + 9.0 * gamma * gamma + 8.0);
        EXPECT_GT(est, 1.0);
    }
}

// ---------------------------------------------------------------------------
// Objective

TEST(Objective, FeasiblePointGivesFiniteValue) {
    const Image o = random_image(6, 6, 9);
    const std::size_t n = o.size();
    const DirectionField f = random_directions(n, 10);
    SolverConfig cfg;
    cfg.params = CncParams(4.0, 0.99);
    cfg.variant = SolverVariant::cnc_dtv;
    cfg.field = f;
    SolverState st = SolverState::zeros(o.shape);
    st.x = o;
    const VectorField dx = apply_gradient(o);
    st.y = dx;
    // A^{-*} v = Dx  <=>  v = A^T Dx = diag(1, alpha) R(-theta) Dx
    for (std::size_t i = 0; i < n; ++i) {
        const double c = std::cos(f.theta[i]), s = std::sin(f.theta[i]);
        st.v.data[i] = c * dx.h(i) + s * dx.v(i);
        st.v.data[n + i] = f.alpha[i] * (-s * dx.h(i) + c * dx.v(i));
    }
    const ObjectiveReport r = objective_value(st, o, cfg);
    EXPECT_TRUE(r.feasible) << r.failed;
    EXPECT_NEAR(r.value, l12_norm<double>(st.v.data), 1e-12);
    EXPECT_NEAR(r.value, dtv_penalty(dx.data, f), 1e-12);
}

TEST(Objective, BoxViolationIsInfinite) {
    const Image o(3, 3, 0.5);
    SolverConfig cfg;
    cfg.params = CncParams(1.0, 0.0);
    SolverState st = SolverState::zeros(o.shape);
    st.x = o;
    st.x.data[4] = 1.5;
    const ObjectiveReport r = objective_value(st, o, cfg);
    EXPECT_FALSE(r.feasible);
    EXPECT_TRUE(std::isinf(r.value));
    EXPECT_NEAR(r.box_violation, 0.5, 1e-15);
    EXPECT_NE(r.failed.find("box"), std::string::npos);
}

TEST(Objective, ConvexTvReduction) {
    const Image o = random_image(7, 5, 11);
    const Image x = random_image(7, 5, 12);
    SolverConfig cfg;
    cfg.params = CncParams(2.5, 0.0);
    cfg.variant = SolverVariant::c_tv;
    SolverState st = SolverState::zeros(o.shape);
    st.x = x;
    st.v = apply_gradient(x);
    double fid = 0;
    for (std::size_t i = 0; i < o.size(); ++i) fid += (x.data[i] - o.data[i]) * (x.data[i] - o.data[i]);
    const ObjectiveReport r = objective_value(st, o, cfg);
    EXPECT_TRUE(r.feasible);
    EXPECT_NEAR(r.value, 1.25 * fid + l12_norm<double>(st.v.data), 1e-12);
}

TEST(Objective, ConsensusViolationIsReported) {
    const Image o = random_image(4, 4, 1);
    SolverConfig cfg;
    cfg.params = CncParams(1.0, 0.0);
    SolverState st = SolverState::zeros(o.shape);
    st.x = o;
    const ObjectiveReport r = objective_value(st, o, cfg);
    EXPECT_FALSE(r.feasible);
    EXPECT_GT(r.consensus_violation, 1e-3);
    EXPECT_NE(r.failed.find("consensus"), std::string::npos);
}

// ---------------------------------------------------------------------------
// Solve

TEST(Solve, HugeLambdaReturnsClampedObservation) {
    const Image o = noisy_shapes(24, 5);
    for (SolverVariant v : all_variants) {
        SolverConfig cfg;
        cfg.params = CncParams(1e6, is_cnc(v) ? 0.99 : 0.0);
        cfg.variant = v;
        cfg.field = estimate_directions(o, 1.0, 2.0, 3.0);
        // With rho = 0 the steps give tau * lambda -> 2 and v creeps towards Dx
        // at rate ~ tau * sigma, so the convex variants need a long run before
        // the iterate is near the solution.
        cfg.max_iters = 300000;
        cfg.record_every = 0;
        const SolveResult r = solve(o, cfg);
        const Image clamped = project_box(o, 0.0, 1.0);
        EXPECT_LE(max_abs_diff(r.state.x.data, clamped.data), 1e-3) << to_string(v);
    }
}

TEST(Solve, ConvexTvMatchesChambolle) {
    const Image o = noisy_shapes(32, 7);
    const double lambda = 10.0;
    const Image ref = chambolle_tv(o, lambda, 3000);
    for (double e : ref.data) ASSERT_TRUE(e >= 0.0 && e <= 1.0) << "oracle left the box";
    SolverConfig cfg;
    cfg.params = CncParams(lambda, 0.0);
    cfg.variant = SolverVariant::c_tv;
    cfg.max_iters = 3000;
    cfg.record_every = 0;
    const SolveResult r = solve(o, cfg);
    EXPECT_LE(relative_error(r.state.x.data, ref.data), 1e-3);
}

TEST(Solve, ClampsEveryIterate) {
    const Image o = noisy_shapes(20, 2);
    SolverConfig cfg;
    cfg.params = CncParams(2.0, 0.99);
    cfg.max_iters = 1;
    cfg.record_every = 0;
    SolverState s = SolverState::zeros(o.shape);
    s.x = project_box(o, 0.0, 1.0);
    for (int it = 0; it < 50; ++it) {
        s = solve(o, cfg, &s).state;
        for (double e : s.x.data) ASSERT_TRUE(e >= 0.0 && e <= 1.0);
    }
}

TEST(Solve, ChainedSingleStepsEqualOneRun) {
    const Image o = noisy_shapes(16, 3);
    SolverConfig cfg;
    cfg.params = CncParams(6.0, 0.99);
    cfg.field = estimate_directions(o, 1.0, 2.0, 2.0);
    cfg.record_every = 0;
    cfg.max_iters = 40;
    const SolveResult full = solve(o, cfg);
    cfg.max_iters = 1;
    SolverState s = SolverState::zeros(o.shape);
    s.x = project_box(o, 0.0, 1.0);
    for (int it = 0; it < 40; ++it) s = solve(o, cfg, &s).state;
    EXPECT_TRUE(same_state(s, full.state, 0.0));
}

TEST(Solve, FixedPointOfConvergedState) {
    const Image o = noisy_shapes(16, 4);
    SolverConfig cfg;
    cfg.params = CncParams(8.0, 0.99);
    cfg.field = estimate_directions(o, 1.0, 2.0, 2.0);
    cfg.record_every = 0;
    cfg.max_iters = 30000;
    const SolveResult conv = solve(o, cfg);
    cfg.max_iters = 1;
    const SolveResult more = solve(o, cfg, &conv.state);
    EXPECT_LE(relative_primal_distance(more.state, conv.state), 1e-10);
}

TEST(Solve, ConsensusHoldsAtBudget) {
    const Image o = noisy_shapes(64, 8);
    for (SolverVariant v : all_variants) {
        SolverConfig cfg;
        cfg.params = CncParams(10.0, is_cnc(v) ? 0.99 : 0.0);
        cfg.variant = v;
        cfg.field = estimate_directions(o, DirectionEstimateOptions{1.0, 2.0, 2.0, DirectionConvention::normal});
        cfg.record_every = 0;
        const SolveResult r = solve(o, cfg);
        const ObjectiveReport rep = objective_value(r.state, o, cfg);
        EXPECT_LT(rep.consensus_violation, 1e-4) << to_string(v);
        EXPECT_LE(rep.ball_violation, 1e-6) << to_string(v);
    }
}

TEST(Solve, VariantReductions) {
    const Image o = noisy_shapes(20, 9);
    const DirectionField f = estimate_directions(o, 1.0, 2.0, 3.0);
    auto run = [&](SolverVariant v, double rho, const DirectionField& field) {
        SolverConfig cfg;
        cfg.params = CncParams(7.0, rho);
        cfg.variant = v;
        cfg.field = field;
        cfg.max_iters = 200;
        cfg.record_every = 1;
        return solve(o, cfg);
    };
    auto same_trace = [](const SolveResult& a, const SolveResult& b) {
        if (a.trace.size() != b.trace.size()) return false;
        for (std::size_t k = 0; k < a.trace.size(); ++k)
            if (std::abs(a.trace[k].objective - b.trace[k].objective) > 1e-12) return false;
        return true;
    };
    const SolveResult cdtv = run(SolverVariant::c_dtv, 0.0, f), cncdtv0 = run(SolverVariant::cnc_dtv, 0.0, f);
    EXPECT_TRUE(same_state(cdtv.state, cncdtv0.state, 1e-12));
    EXPECT_TRUE(same_trace(cdtv, cncdtv0));

    const DirectionField iso(o.size());
    const DirectionField iso_rotated(std::vector<double>(o.size(), 1.0), f.theta);
    for (auto [dtv, tv, rho] : {std::tuple{SolverVariant::c_dtv, SolverVariant::c_tv, 0.0},
                                {SolverVariant::cnc_dtv, SolverVariant::cnc_tv, 0.99}}) {
        const SolveResult a = run(dtv, rho, iso), b = run(tv, rho, f), c = run(dtv, rho, iso_rotated);
        EXPECT_TRUE(same_state(a.state, b.state, 1e-12));
        EXPECT_TRUE(same_state(c.state, b.state, 1e-12));
        EXPECT_TRUE(same_trace(a, b));
    }
}

TEST(Solve, TracingDoesNotChangeTheResult) {
    const Image o = noisy_shapes(24, 10);
    SolverConfig cfg;
    cfg.params = CncParams(9.0, 0.99);
    cfg.field = estimate_directions(o, 1.0, 2.0, 2.0);
    cfg.tol = 1e-4;
    cfg.record_every = 0;
    const SolveResult quiet = solve(o, cfg);
    cfg.record_every = 1;
    const SolveResult traced = solve(o, cfg);
    cfg.record_every = 7;
    const SolveResult sparse = solve(o, cfg);
    EXPECT_EQ(quiet.iterations, traced.iterations);
    EXPECT_EQ(quiet.iterations, sparse.iterations);
    EXPECT_TRUE(same_state(quiet.state, traced.state, 0.0));
    EXPECT_TRUE(same_state(quiet.state, sparse.state, 0.0));
    EXPECT_TRUE(quiet.converged);
    EXPECT_EQ(quiet.iterations % check_every, 0);
    EXPECT_EQ(int(traced.trace.size()), traced.iterations);
    EXPECT_EQ(traced.trace.back().iter, traced.iterations);
    EXPECT_LT(traced.trace.back().rel_change, 1e-4);
}

TEST(Solve, TraceFieldsAreFilled) {
    const Image clean = [] {
        GeneratorSpec g;
        g.kind = ImageKind::geometric;
        g.width = g.height = 16;
        return generate(g);
    }();
    const Image o = add_noise(clean, NoiseSpec{0.1, 1});
    SolverConfig cfg;
    cfg.params = CncParams(10.0, 0.99);
    cfg.max_iters = 60;
    cfg.record_every = 20;
    const SolveResult ref = solve(o, cfg);
    cfg.clean = &clean;
    cfg.reference = &ref.state;
    const SolveResult r = solve(o, cfg);
    ASSERT_EQ(r.trace.size(), 3u);
    EXPECT_EQ(r.trace[0].iter, 20);
    EXPECT_TRUE(r.trace[0].psnr.has_value());
    EXPECT_NEAR(*r.trace[2].psnr, psnr(r.state.x, clean), 1e-12);
    EXPECT_EQ(*r.trace[2].dist_to_ref, 0.0);
    EXPECT_GT(*r.trace[0].dist_to_ref, 0.0);
}

TEST(Solve, DeterministicAcrossRuns) {
    const Image o = noisy_shapes(20, 11);
    SolverConfig cfg;
    cfg.params = CncParams(5.0, 0.99);
    cfg.field = estimate_directions(o, 1.0, 2.0, 4.0);
    cfg.max_iters = 300;
    const SolveResult a = solve(o, cfg), b = solve(o, cfg);
    EXPECT_TRUE(same_state(a.state, b.state, 0.0));
}

TEST(Solve, NonFiniteIterateIsReported) {
    const Image o = noisy_shapes(12, 1);
    SolverConfig cfg;
    cfg.params = CncParams(5.0, 0.99);
    cfg.max_iters = 25;
    SolverState bad = SolverState::zeros(o.shape);
    bad.x = project_box(o, 0.0, 1.0);
    bad.w3a.data[5] = std::numeric_limits<double>::quiet_NaN();
    try {
        solve(o, cfg, &bad);
        FAIL() << "expected DivergenceError";
    } catch (const DivergenceError& e) {
        EXPECT_GE(e.iteration(), 1);
        EXPECT_LE(e.iteration(), 25);
    }
}

TEST(Solve, RejectsBadInputs) {
    Image o(4, 4, 0.5);
    SolverConfig cfg;
    cfg.max_iters = 5;
    SolverState wrong = SolverState::zeros(GridShape{3, 4});
    EXPECT_THROW(solve(o, cfg, &wrong), std::invalid_argument);
    cfg.field = DirectionField(7);
    EXPECT_THROW(solve(o, cfg), std::invalid_argument);
    cfg.field = DirectionField();
    o.data[0] = std::numeric_limits<double>::infinity();
    EXPECT_THROW(solve(o, cfg), std::invalid_argument);
}

TEST(Solve, EstimatedNormBoundIsUsedWhenSmaller) {
    const Image o = noisy_shapes(16, 2);
    SolverConfig cfg;
    cfg.params = CncParams(16.0, 0.99);
    cfg.max_iters = 10;
    cfg.norm_bound = NormBound::estimated;
    const SolveResult r = solve(o, cfg);
    EXPECT_GT(r.norm_estimate, 0.0);
    EXPECT_LE(r.steps.norm_bound, 1.0 + 9.0 * 1.98 * 1.98 + 8.0);
    EXPECT_NEAR(1.0 / r.steps.tau - r.steps.sigma * r.steps.norm_bound, r.steps.delta / 2, 1e-9);
}

// ---------------------------------------------------------------------------
// Reformulation

TEST(Reformulation, ConvexCaseHasNoGap) {
    const Image x = random_image(3, 3, 1), o = random_image(3, 3, 2);
    const ReformulationCheck r = reformulation_consistency_check(x, o, CncParams(4.0, 0.0), random_directions(9, 3));
    EXPECT_EQ(r.gap, 0.0);
}

TEST(Reformulation, TvGeometry) {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        const Image x = random_image(3, 3, seed), o = random_image(3, 3, seed + 50);
        const ReformulationCheck r = reformulation_consistency_check(x, o, CncParams(16.0, 0.99), DirectionField(9));
        EXPECT_LE(r.gap, 1e-5);
    }
}

TEST(Reformulation, DirectionalGeometry) {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        const Image x = random_image(3, 3, seed + 10), o = random_image(3, 3, seed + 60);
        const ReformulationCheck r =
            reformulation_consistency_check(x, o, CncParams(16.0, 0.99), random_directions(9, seed + 20));
        EXPECT_LE(r.gap, 1e-5);
    }
}

TEST(Reformulation, RejectsLargeInstances) {
    const Image x(5, 5);
    EXPECT_THROW(reformulation_consistency_check(x, x, CncParams(1, 0), DirectionField(25)), std::invalid_argument);
}
