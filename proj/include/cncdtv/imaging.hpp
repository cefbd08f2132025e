#pragma once

// Synthetic test images, Gaussian noise, quality metrics and raster I/O.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cncdtv/grid.hpp"
#include "cncdtv/random.hpp"

namespace cncdtv {

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Generators

enum class ImageKind { texture, barcode, geometric };

inline std::string_view to_string(ImageKind k) {
    switch (k) {
    case ImageKind::texture: return "texture";
    case ImageKind::barcode: return "barcode";
    case ImageKind::geometric: return "geometric";
    }
    return "?";
}

inline ImageKind parse_image_kind(std::string_view s) {
    for (auto k : {ImageKind::texture, ImageKind::barcode, ImageKind::geometric})
        if (to_string(k) == s) return k;
    throw std::invalid_argument("unknown image kind '" + std::string(s) + "' (expected texture, barcode, geometric)");
}

struct GeneratorSpec {
    ImageKind kind = ImageKind::texture;
    std::size_t width = 128;
    std::size_t height = 128;
    std::uint64_t seed = 0;

    // texture: sinusoidal stripes whose level lines run at `stripe_angle_deg`
    // (x right, y down), `stripe_period` pixels per cycle. The profile is
    // tanh(k sin(.)) / tanh(k) with k = `stripe_sharpness`; k <= 0 gives hard
    // (thresholded, anti-aliased) stripes.
    double stripe_angle_deg = 30.0;
    double stripe_period = 12.0;
    double stripe_sharpness = 0.0;
    double texture_low = 0.1;
    double texture_high = 0.9;

    // barcode: alternating 0/1 vertical bars with widths uniform in [min, max]
    int bar_min_width = 2;
    int bar_max_width = 8;

    // geometric: disc, rectangle and triangle on a uniform background
    double background = 0.3;
};

namespace detail {

constexpr int supersample = 4;

template <class Inside>
double coverage(double r, double c, Inside inside) {
    int hits = 0;
    for (int a = 0; a < supersample; ++a)
        for (int b = 0; b < supersample; ++b)
            hits += inside(r + (a + 0.5) / supersample, c + (b + 0.5) / supersample) ? 1 : 0;
    return double(hits) / (supersample * supersample);
}

inline bool in_triangle(double py, double px, std::array<double, 6> t) {
    auto side = [](double ax, double ay, double bx, double by, double x, double y) {
        return (bx - ax) * (y - ay) - (by - ay) * (x - ax);
    };
    const double d1 = side(t[0], t[1], t[2], t[3], px, py);
    const double d2 = side(t[2], t[3], t[4], t[5], px, py);
    const double d3 = side(t[4], t[5], t[0], t[1], px, py);
    const bool neg = d1 < 0 || d2 < 0 || d3 < 0, pos = d1 > 0 || d2 > 0 || d3 > 0;
    return !(neg && pos);
}

}  // namespace detail

inline Image generate(const GeneratorSpec& spec) {
    if (spec.width == 0 || spec.height == 0) throw std::invalid_argument("generate: dimensions must be positive");
    Image img(spec.width, spec.height);
    const double w = double(spec.width), h = double(spec.height);

    switch (spec.kind) {
    case ImageKind::texture: {
        if (!(spec.stripe_period > 0)) throw std::invalid_argument("generate: stripe period must be positive");
        const double a = spec.stripe_angle_deg * std::numbers::pi / 180.0;
        // unit normal to the level-line direction (cos a, sin a)
        const double nx = -std::sin(a), ny = std::cos(a);
        SplitMix64 rng(spec.seed);
        const double phase = rng.uniform() * spec.stripe_period;
        const double k = spec.stripe_sharpness;
        for (std::size_t r = 0; r < spec.height; ++r)
            for (std::size_t c = 0; c < spec.width; ++c) {
                double level = 0;
                if (k > 0) {
                    const double y = double(r) + 0.5, x = double(c) + 0.5;
                    const double wave = std::sin(2.0 * std::numbers::pi * (nx * x + ny * y + phase) / spec.stripe_period);
                    level = 0.5 + 0.5 * std::tanh(k * wave) / std::tanh(k);
                } else {
                    level = detail::coverage(double(r), double(c), [&](double y, double x) {
                        const double t = std::fmod(nx * x + ny * y + phase, spec.stripe_period);
                        const double u = t < 0 ? t + spec.stripe_period : t;
                        return u < 0.5 * spec.stripe_period;
                    });
                }
                img(r, c) = spec.texture_low + (spec.texture_high - spec.texture_low) * level;
            }
        break;
    }
    case ImageKind::barcode: {
        if (spec.bar_min_width < 1 || spec.bar_max_width < spec.bar_min_width)
            throw std::invalid_argument("generate: invalid bar width range");
        SplitMix64 rng(spec.seed);
        std::vector<double> row(spec.width);
        double value = rng.uniform() < 0.5 ? 0.0 : 1.0;
        std::size_t c = 0;
        while (c < spec.width) {
            const int span = spec.bar_min_width +
                             int(rng.next() % std::uint64_t(spec.bar_max_width - spec.bar_min_width + 1));
            for (int k = 0; k < span && c < spec.width; ++k) row[c++] = value;
            value = 1.0 - value;
        }
        for (std::size_t r = 0; r < spec.height; ++r)
            std::copy(row.begin(), row.end(), img.data.begin() + std::ptrdiff_t(r * spec.width));
        break;
    }
    case ImageKind::geometric: {
        SplitMix64 rng(spec.seed);
        auto jitter = [&](double span) { return (rng.uniform() - 0.5) * span; };
        const double s = std::min(w, h);
        // disc
        const double dcx = 0.30 * w + jitter(0.05 * s), dcy = 0.30 * h + jitter(0.05 * s), dr = 0.18 * s;
        // axis-aligned rectangle
        const double rx0 = 0.55 * w + jitter(0.04 * s), ry0 = 0.12 * h + jitter(0.04 * s);
        const double rx1 = rx0 + 0.33 * w, ry1 = ry0 + 0.28 * h;
        // triangle (x, y pairs)
        const std::array<double, 6> tri{0.12 * w + jitter(0.04 * s), 0.90 * h, 0.52 * w + jitter(0.04 * s), 0.58 * h,
                                        0.62 * w, 0.92 * h};
        // tilted square, rotated 30 degrees
        const double qcx = 0.78 * w, qcy = 0.70 * h, qhalf = 0.11 * s;
        const double qc = std::cos(std::numbers::pi / 6), qs = std::sin(std::numbers::pi / 6);

        for (std::size_t r = 0; r < spec.height; ++r)
            for (std::size_t c = 0; c < spec.width; ++c) {
                double v = spec.background;
                auto paint = [&](double level, auto inside) {
                    const double cov = detail::coverage(double(r), double(c), inside);
                    v = (1.0 - cov) * v + cov * level;
                };
                paint(0.8, [&](double y, double x) { return (x - dcx) * (x - dcx) + (y - dcy) * (y - dcy) <= dr * dr; });
                paint(0.9, [&](double y, double x) { return x >= rx0 && x <= rx1 && y >= ry0 && y <= ry1; });
                paint(0.05, [&](double y, double x) { return detail::in_triangle(y, x, tri); });
                paint(0.6, [&](double y, double x) {
                    const double dx = x - qcx, dy = y - qcy;
                    return std::abs(qc * dx + qs * dy) <= qhalf && std::abs(-qs * dx + qc * dy) <= qhalf;
                });
                img(r, c) = v;
            }
        break;
    }
    }
    return img;
}

// ---------------------------------------------------------------------------
// Noise and metrics

struct NoiseSpec {
    double sigma_e = 0.1;
    std::uint64_t seed = 0;
};

/// x + e with e i.i.d. N(0, sigma_e^2); the result is not clamped.
inline Image add_noise(Image x, const NoiseSpec& spec) {
    if (!(spec.sigma_e >= 0)) throw std::invalid_argument("add_noise: sigma_e must be >= 0");
    if (spec.sigma_e == 0) return x;
    SplitMix64 rng(spec.seed);
    for (auto& v : x.data) v += spec.sigma_e * rng.gaussian();
    return x;
}

inline constexpr double psnr_cap = 999.0;

inline double mse(const Image& a, const Image& b) {
    if (!(a.shape == b.shape)) throw std::invalid_argument("mse: dimension mismatch");
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
    return s / double(a.size());
}

/// 10 log10(1 / MSE), peak 1; capped at 999 (zero MSE included).
inline double psnr(const Image& x, const Image& ref) {
    const double m = mse(x, ref);
    if (m == 0) return psnr_cap;
    return std::min(psnr_cap, -10.0 * std::log10(m));
}

struct ResidualMap {
    Image absolute;
    Image normalized;  // divided by its maximum (all zero when inputs agree)
};

inline ResidualMap residual_map(const Image& x_hat, const Image& x_bar) {
    if (!(x_hat.shape == x_bar.shape)) throw std::invalid_argument("residual_map: dimension mismatch");
    ResidualMap out{Image(x_hat.width(), x_hat.height()), Image(x_hat.width(), x_hat.height())};
    double peak = 0;
    for (std::size_t i = 0; i < x_hat.size(); ++i) {
        out.absolute.data[i] = std::abs(x_hat.data[i] - x_bar.data[i]);
        peak = std::max(peak, out.absolute.data[i]);
    }
    if (peak > 0)
        for (std::size_t i = 0; i < x_hat.size(); ++i) out.normalized.data[i] = out.absolute.data[i] / peak;
    return out;
}

// ---------------------------------------------------------------------------
// PGM (binary P5). Writes 16-bit, maxval 65535, value = round(65535 x);
// reads any maxval in [1, 65535].

inline void write_pgm(const std::string& path, const Image& x) {
    std::vector<unsigned char> bytes;
    bytes.reserve(2 * x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x.data[i];
        if (!(v >= 0.0 && v <= 1.0))
            throw IoError("write_pgm: value " + std::to_string(v) + " at pixel " + std::to_string(i) +
                          " is outside [0, 1]");
        const auto q = static_cast<std::uint16_t>(std::lround(v * 65535.0));
        bytes.push_back(static_cast<unsigned char>(q >> 8));
        bytes.push_back(static_cast<unsigned char>(q & 0xff));
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "P5\n" << x.width() << ' ' << x.height() << "\n65535\n";
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw IoError("write failed: " + path);
}

inline Image read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    const std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::size_t pos = 0;
    auto fail = [&](const std::string& what) { throw IoError(path + ": " + what + " at byte " + std::to_string(pos)); };

    if (buf.size() < 2 || buf[0] != 'P' || buf[1] != '5') fail("unsupported magic (expected P5)");
    pos = 2;
    auto skip_ws = [&] {
        for (;;) {
            while (pos < buf.size() && std::isspace(buf[pos])) ++pos;
            if (pos < buf.size() && buf[pos] == '#') {
                while (pos < buf.size() && buf[pos] != '\n') ++pos;
            } else {
                break;
            }
        }
    };
    auto number = [&]() -> long {
        skip_ws();
        if (pos >= buf.size() || !std::isdigit(buf[pos])) fail("malformed header");
        long v = 0;
        while (pos < buf.size() && std::isdigit(buf[pos])) {
            v = v * 10 + (buf[pos++] - '0');
            if (v > 1'000'000'000L) fail("header value overflow");
        }
        return v;
    };
    const long w = number(), h = number(), maxval = number();
    if (w <= 0 || h <= 0) fail("invalid dimensions");
    if (maxval <= 0 || maxval > 65535) fail("invalid maxval " + std::to_string(maxval));
    if (pos >= buf.size() || !std::isspace(buf[pos])) fail("malformed header");
    ++pos;

    const std::size_t bpp = maxval > 255 ? 2 : 1;
    const std::size_t need = std::size_t(w) * std::size_t(h) * bpp;
    if (buf.size() - pos < need) {
        pos = buf.size();
        fail("truncated pixel data (expected " + std::to_string(need) + " bytes)");
    }
    Image img{std::size_t(w), std::size_t(h)};
    for (std::size_t i = 0; i < img.size(); ++i) {
        long v = bpp == 2 ? (long(buf[pos]) << 8) | long(buf[pos + 1]) : long(buf[pos]);
        if (v > maxval) fail("sample exceeds maxval");
        img.data[i] = double(v) / double(maxval);
        pos += bpp;
    }
    return img;
}

// CSV image dump: header "row,col,value", row-major, lossless (17 digits).

inline void write_image_csv(const std::string& path, const Image& x) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "row,col,value\n" << std::setprecision(17);
    for (std::size_t r = 0; r < x.height(); ++r)
        for (std::size_t c = 0; c < x.width(); ++c) out << r << ',' << c << ',' << x(r, c) << '\n';
    if (!out) throw IoError("write failed: " + path);
}

inline Image read_image_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line.rfind("row,col,value", 0) != 0)
        throw IoError(path + ": expected header 'row,col,value'");
    struct Entry { std::size_t r, c; double v; };
    std::vector<Entry> entries;
    std::size_t max_r = 0, max_c = 0, lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream row(line);
        Entry e{};
        char c1 = 0, c2 = 0;
        if (!(row >> e.r >> c1 >> e.c >> c2 >> e.v) || c1 != ',' || c2 != ',')
            throw IoError(path + ":" + std::to_string(lineno) + ": malformed row");
        max_r = std::max(max_r, e.r);
        max_c = std::max(max_c, e.c);
        entries.push_back(e);
    }
    if (entries.empty()) throw IoError(path + ": no pixels");
    Image img(max_c + 1, max_r + 1, std::numeric_limits<double>::quiet_NaN());
    for (const auto& e : entries) img(e.r, e.c) = e.v;
    if (entries.size() != img.size() || !all_finite<double>(img.data))
        throw IoError(path + ": pixel grid incomplete or non-finite");
    return img;
}

inline bool has_suffix(std::string_view s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

/// Dispatches on extension: ".csv" uses the lossless CSV dump, anything else PGM.
inline Image read_image(const std::string& path) {
    return has_suffix(path, ".csv") ? read_image_csv(path) : read_pgm(path);
}

inline void write_image(const std::string& path, const Image& x) {
    if (has_suffix(path, ".csv")) write_image_csv(path, x);
    else write_pgm(path, x);
}

}  // namespace cncdtv
