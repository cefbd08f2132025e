#pragma once

// Per-pixel elliptic dual sets E_i = R(theta_i) diag(1, alpha_i) B_2 and the
// structure-tensor estimator that produces (alpha, theta) from an image.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <sstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cncdtv/grid.hpp"

namespace cncdtv {

template <std::floating_point Real>
struct BasicDirectionField {
    std::size_t n = 0;
    std::vector<Real> alpha;  // >= 1
    std::vector<Real> theta;  // in [-pi/2, pi/2]

    BasicDirectionField() = default;

    /// Isotropic field: alpha = 1, theta = 0 (plain TV geometry).
    explicit BasicDirectionField(std::size_t pixels) : n(pixels), alpha(pixels, Real(1)), theta(pixels, Real(0)) {}

    BasicDirectionField(std::size_t pixels, Real a, Real t) : n(pixels), alpha(pixels, a), theta(pixels, t) {
        validate();
    }

    BasicDirectionField(std::vector<Real> a, std::vector<Real> t)
        : n(a.size()), alpha(std::move(a)), theta(std::move(t)) {
        validate();
    }

    void validate() const {
        if (alpha.size() != n || theta.size() != n)
            throw std::invalid_argument("direction field: alpha/theta length mismatch");
        constexpr Real half_pi = std::numbers::pi_v<Real> / 2;
        for (std::size_t i = 0; i < n; ++i) {
            if (!(alpha[i] >= Real(1)) || !std::isfinite(alpha[i]))
                throw std::invalid_argument("direction field: alpha must be >= 1 (pixel " + std::to_string(i) + ")");
            if (!(theta[i] >= -half_pi && theta[i] <= half_pi))
                throw std::invalid_argument("direction field: theta outside [-pi/2, pi/2] (pixel " +
                                            std::to_string(i) + ")");
        }
    }

    bool isotropic() const {
        for (std::size_t i = 0; i < n; ++i)
            if (alpha[i] != Real(1) || theta[i] != Real(0)) return false;
        return true;
    }
};

using DirectionField = BasicDirectionField<double>;

enum class AffineMode {
    forward,          // u_i -> R(theta_i) diag(1, alpha_i) u_i
    inverse,          // u_i -> diag(1, 1/alpha_i) R(-theta_i) u_i
    inverse_adjoint,  // u_i -> R(theta_i) diag(1, 1/alpha_i) u_i
};

/// Cached per-pixel rotation/scaling coefficients of a direction field.
template <std::floating_point Real>
class LocalAffineMaps {
public:
    LocalAffineMaps() = default;

    explicit LocalAffineMaps(const BasicDirectionField<Real>& field)
        : n_(field.n), cos_(field.n), sin_(field.n), alpha_(field.alpha), inv_alpha_(field.n) {
        field.validate();
        for (std::size_t i = 0; i < n_; ++i) {
            cos_[i] = std::cos(field.theta[i]);
            sin_[i] = std::sin(field.theta[i]);
            inv_alpha_[i] = Real(1) / field.alpha[i];
        }
    }

    std::size_t size() const noexcept { return n_; }

    /// out = op(mode) in; `in` and `out` may alias.
    void apply(AffineMode mode, std::span<const Real> in, std::span<Real> out) const {
        detail::require_size(in.size(), 2 * n_, "affine map");
        detail::require_size(out.size(), 2 * n_, "affine map");
        const std::size_t n = n_;
        switch (mode) {
        case AffineMode::forward:
            for (std::size_t i = 0; i < n; ++i) {
                const Real a = in[i], b = alpha_[i] * in[n + i];
                out[i] = cos_[i] * a - sin_[i] * b;
                out[n + i] = sin_[i] * a + cos_[i] * b;
            }
            break;
        case AffineMode::inverse:
            for (std::size_t i = 0; i < n; ++i) {
                const Real a = in[i], b = in[n + i];
                out[i] = cos_[i] * a + sin_[i] * b;
                out[n + i] = inv_alpha_[i] * (cos_[i] * b - sin_[i] * a);
            }
            break;
        case AffineMode::inverse_adjoint:
            for (std::size_t i = 0; i < n; ++i) {
                const Real a = in[i], b = inv_alpha_[i] * in[n + i];
                out[i] = cos_[i] * a - sin_[i] * b;
                out[n + i] = sin_[i] * a + cos_[i] * b;
            }
            break;
        }
    }

    const Real* cos_data() const noexcept { return cos_.data(); }
    const Real* sin_data() const noexcept { return sin_.data(); }
    const Real* inv_alpha_data() const noexcept { return inv_alpha_.data(); }

    // single-pixel versions of apply(); same arithmetic, used by fused loops
    void inverse_at(std::size_t i, Real a, Real b, Real& p, Real& q) const noexcept {
        p = cos_[i] * a + sin_[i] * b;
        q = inv_alpha_[i] * (cos_[i] * b - sin_[i] * a);
    }
    void inverse_adjoint_at(std::size_t i, Real a, Real b, Real& p, Real& q) const noexcept {
        b *= inv_alpha_[i];
        p = cos_[i] * a - sin_[i] * b;
        q = sin_[i] * a + cos_[i] * b;
    }

private:
    std::size_t n_ = 0;
    std::vector<Real> cos_, sin_, alpha_, inv_alpha_;
};

template <std::floating_point Real>
struct BasicAffineFieldOperator {
    LocalAffineMaps<Real> maps;
    AffineMode mode = AffineMode::forward;

    BasicAffineFieldOperator(const BasicDirectionField<Real>& field, AffineMode m) : maps(field), mode(m) {}
};

using AffineFieldOperator = BasicAffineFieldOperator<double>;

template <std::floating_point Real>
BasicVectorField<Real> apply_affine(const BasicAffineFieldOperator<Real>& op, const BasicVectorField<Real>& u) {
    detail::require_size(u.n, op.maps.size(), "apply_affine");
    BasicVectorField<Real> out(u.n);
    op.maps.apply(op.mode, u.data, out.data);
    return out;
}

/// Spectral-norm bound of A^{-1} (and of A^{-*}): max_i max(1, 1/alpha_i).
template <std::floating_point Real>
Real affine_norm_bound(const BasicDirectionField<Real>& field) {
    field.validate();
    Real bound = 1;
    for (Real a : field.alpha)
        bound = std::max(bound, Real(1) / a);
    return bound;
}

// ---------------------------------------------------------------------------
// Direction estimation

enum class DirectionConvention {
    level_line,  // theta = orientation of the smaller-eigenvalue eigenvector
    normal,      // theta = orientation of the larger-eigenvalue eigenvector
};

struct DirectionEstimateOptions {
    double sigma_g = 1.0;   // pre-smoothing scale (px)
    double rho_st = 2.0;    // tensor integration scale (px), 0 disables
    double alpha = 1.0;     // global expansion factor
    DirectionConvention convention = DirectionConvention::level_line;
};

namespace detail {

inline std::vector<double> gaussian_kernel(double sigma) {
    const int radius = int(std::ceil(3.0 * sigma));
    std::vector<double> k(std::size_t(2 * radius + 1));
    double sum = 0;
    for (int t = -radius; t <= radius; ++t) {
        const double v = std::exp(-0.5 * double(t * t) / (sigma * sigma));
        k[std::size_t(t + radius)] = v;
        sum += v;
    }
    for (auto& v : k) v /= sum;
    return k;
}

/// Separable Gaussian blur with replicate boundary; sigma <= 0 is identity.
inline std::vector<double> gaussian_blur(std::span<const double> src, GridShape shape, double sigma) {
    std::vector<double> out(src.begin(), src.end());
    if (sigma <= 0) return out;
    const auto k = gaussian_kernel(sigma);
    const long radius = long(k.size() / 2);
    const long w = long(shape.width), h = long(shape.height);
    std::vector<double> tmp(out.size());
    for (long r = 0; r < h; ++r)
        for (long c = 0; c < w; ++c) {
            double s = 0;
            for (long t = -radius; t <= radius; ++t) {
                const long cc = std::clamp(c + t, 0L, w - 1);
                s += k[std::size_t(t + radius)] * out[std::size_t(r * w + cc)];
            }
            tmp[std::size_t(r * w + c)] = s;
        }
    for (long r = 0; r < h; ++r)
        for (long c = 0; c < w; ++c) {
            double s = 0;
            for (long t = -radius; t <= radius; ++t) {
                const long rr = std::clamp(r + t, 0L, h - 1);
                s += k[std::size_t(t + radius)] * tmp[std::size_t(rr * w + c)];
            }
            out[std::size_t(r * w + c)] = s;
        }
    return out;
}

inline double wrap_half_pi(double angle) {
    constexpr double pi = std::numbers::pi;
    while (angle > pi / 2) angle -= pi;
    while (angle < -pi / 2) angle += pi;
    return angle;
}

}  // namespace detail

/// Structure-tensor direction field. theta is measured in the (horizontal,
/// vertical) component frame of the gradient field, i.e. x to the right and
/// y down the rows.
inline DirectionField estimate_directions(const Image& x, const DirectionEstimateOptions& opt) {
    if (!(opt.sigma_g > 0))
        throw std::invalid_argument("estimate_directions: sigma_g must be > 0");
    if (!(opt.rho_st >= 0))
        throw std::invalid_argument("estimate_directions: rho_st must be >= 0");
    if (!(opt.alpha >= 1))
        throw std::invalid_argument("estimate_directions: alpha must be >= 1");

    const GridShape shape = x.shape;
    const long w = long(shape.width), h = long(shape.height);
    const std::size_t n = shape.size();
    const auto smooth = detail::gaussian_blur(x.data, shape, opt.sigma_g);

    std::vector<double> j11(n), j12(n), j22(n);
    auto at = [&](long r, long c) {
        return smooth[std::size_t(std::clamp(r, 0L, h - 1) * w + std::clamp(c, 0L, w - 1))];
    };
    for (long r = 0; r < h; ++r)
        for (long c = 0; c < w; ++c) {
            const double gx = 0.5 * (at(r, c + 1) - at(r, c - 1));
            const double gy = 0.5 * (at(r + 1, c) - at(r - 1, c));
            const std::size_t i = std::size_t(r * w + c);
            j11[i] = gx * gx;
            j12[i] = gx * gy;
            j22[i] = gy * gy;
        }
    j11 = detail::gaussian_blur(j11, shape, opt.rho_st);
    j12 = detail::gaussian_blur(j12, shape, opt.rho_st);
    j22 = detail::gaussian_blur(j22, shape, opt.rho_st);

    DirectionField field(n);
    for (std::size_t i = 0; i < n; ++i) {
        field.alpha[i] = opt.alpha;
        const double diff = j11[i] - j22[i];
        const double gap = std::sqrt(diff * diff + 4.0 * j12[i] * j12[i]);
        if (gap <= 1e-12) {
            field.theta[i] = 0.0;
            continue;
        }
        const double major = 0.5 * std::atan2(2.0 * j12[i], diff);
        field.theta[i] = opt.convention == DirectionConvention::normal
                             ? detail::wrap_half_pi(major)
                             : detail::wrap_half_pi(major + std::numbers::pi / 2);
    }
    return field;
}

inline DirectionField estimate_directions(const Image& x, double sigma_g, double rho_st, double alpha_global) {
    return estimate_directions(x, DirectionEstimateOptions{sigma_g, rho_st, alpha_global});
}

/// Same field with every alpha replaced.
inline DirectionField with_alpha(DirectionField field, double alpha) {
    for (auto& a : field.alpha) a = alpha;
    field.validate();
    return field;
}

// ---------------------------------------------------------------------------
// CSV: header "i,alpha,theta", one row per pixel in row-major order.

inline void write_direction_csv(const std::string& path, const DirectionField& field) {
    std::ofstream out(path);
    if (!out)
        throw std::runtime_error("cannot open " + path + " for writing");
    out << "i,alpha,theta\n" << std::setprecision(17);
    for (std::size_t i = 0; i < field.n; ++i)
        out << i << ',' << field.alpha[i] << ',' << field.theta[i] << '\n';
    if (!out)
        throw std::runtime_error("write failed: " + path);
}

inline DirectionField read_direction_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw std::runtime_error("cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line.rfind("i,alpha,theta", 0) != 0)
        throw std::runtime_error(path + ": expected header 'i,alpha,theta'");
    std::vector<double> alpha, theta;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream row(line);
        std::size_t i = 0;
        double a = 0, t = 0;
        char c1 = 0, c2 = 0;
        if (!(row >> i >> c1 >> a >> c2 >> t) || c1 != ',' || c2 != ',')
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": malformed row");
        if (i != alpha.size())
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": pixel index out of order");
        alpha.push_back(a);
        theta.push_back(t);
    }
    return DirectionField(std::move(alpha), std::move(theta));
}

}  // namespace cncdtv
