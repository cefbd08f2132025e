#pragma once

// Parameter sweeps and reports: lambda x 1/alpha grid search per image and
// variant, Table-style CSV reports, convergence curves, trace and config I/O.

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "cncdtv/direction.hpp"
#include "cncdtv/imaging.hpp"
#include "cncdtv/solver.hpp"

namespace cncdtv {

struct GridSpec {
    std::vector<double> lambda_values;
    std::vector<double> inv_alpha_values;
    std::vector<SolverVariant> variants{std::begin(all_variants), std::end(all_variants)};

    void validate() const {
        if (lambda_values.empty() || inv_alpha_values.empty() || variants.empty())
            throw std::invalid_argument("grid: lambda, 1/alpha and variant lists must be nonempty");
        for (double l : lambda_values)
            if (!(l > 0) || !std::isfinite(l)) throw std::invalid_argument("grid: lambda values must be positive");
        for (double a : inv_alpha_values)
            if (!(a > 0 && a <= 1)) throw std::invalid_argument("grid: 1/alpha values must lie in (0, 1]");
    }
};

/// lo, lo + step, ..., hi inclusive. Values are lo + k step snapped to a
/// 1e-12 grid, so "0.1:1:0.05" yields 0.15 rather than 0.15000000000000002.
inline std::vector<double> arange_inclusive(double lo, double hi, double step) {
    if (!(step > 0) || !std::isfinite(lo) || !std::isfinite(hi)) throw std::invalid_argument("bad range");
    if ((hi - lo) / step > 1e6) throw std::invalid_argument("range too long");
    std::vector<double> out;
    for (long k = 0;; ++k) {
        const double v = std::round((lo + double(k) * step) * 1e12) / 1e12;
        if (v > hi + 1e-9 * step) break;
        out.push_back(v);
    }
    return out;
}

/// lambda in {1, ..., 80}, 1/alpha in {0.10, 0.15, ..., 1.00}.
inline GridSpec default_grid() {
    GridSpec g;
    g.lambda_values = arange_inclusive(1.0, 80.0, 1.0);
    for (int k = 2; k <= 20; ++k) g.inv_alpha_values.push_back(double(k) / 20.0);
    return g;
}

/// Parses "a:b:step" or a comma list "a,b,c".
inline std::vector<double> parse_value_list(const std::string& text) {
    std::vector<double> out;
    auto number = [&](const std::string& s) {
        std::size_t used = 0;
        double v = 0;
        try {
            v = std::stod(s, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != s.size()) throw std::invalid_argument("not a number: '" + s + "'");
        return v;
    };
    if (text.find(':') != std::string::npos) {
        std::vector<std::string> parts;
        std::stringstream ss(text);
        for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
        if (parts.size() != 3) throw std::invalid_argument("range must be lo:hi:step, got '" + text + "'");
        return arange_inclusive(number(parts[0]), number(parts[1]), number(parts[2]));
    }
    std::stringstream ss(text);
    for (std::string p; std::getline(ss, p, ',');) out.push_back(number(p));
    if (out.empty()) throw std::invalid_argument("empty value list");
    return out;
}

/// Settings shared by every cell of a sweep.
struct PipelineSettings {
    double rho = 0.99;  // used by the CNC variants
    int max_iters = 3000;
    double tol = 1e-4;
    double step_ratio = default_step_ratio;
    DirectionEstimateOptions directions{1.0, 2.0, 1.0, DirectionConvention::normal};
    bool warm_start = true;  // along increasing lambda within each (variant, 1/alpha) line
    bool directions_from_clean = false;  // upper-bound studies; the default uses the observation
    unsigned threads = 1;
};

/// Solver configuration for one grid cell; `base_field` must have alpha = 1.
inline SolverConfig cell_config(SolverVariant variant, double lambda, double inv_alpha, const DirectionField& base_field,
                                const PipelineSettings& s) {
    SolverConfig c;
    c.params = CncParams(lambda, is_cnc(variant) ? s.rho : 0.0);
    c.variant = variant;
    if (is_directional(variant)) c.field = with_alpha(base_field, 1.0 / inv_alpha);
    c.max_iters = s.max_iters;
    c.tol = s.tol;
    c.step_ratio = s.step_ratio;
    c.record_every = 0;
    return c;
}

struct BenchImage {
    std::string name;
    Image clean;
    Image noisy;
};

/// Synthetic square test image of `kind` with Gaussian noise. The noise seed
/// depends only on (seed, kind), so an image is the same whichever other
/// images share the run.
inline BenchImage make_bench_image(ImageKind kind, std::size_t size, std::uint64_t seed, double sigma_e) {
    GeneratorSpec g;
    g.kind = kind;
    g.width = g.height = size;
    g.seed = seed;
    BenchImage im{std::string(to_string(kind)), generate(g), {}};
    im.noisy = add_noise(im.clean, NoiseSpec{sigma_e, mix64(seed * 8 + std::uint64_t(kind) + 1)});
    return im;
}

struct GridCell {
    double lambda = 0;
    double inv_alpha = 1;
    double psnr = -std::numeric_limits<double>::infinity();
    int iterations = 0;
    std::string error;  // nonempty when the solve failed
};

struct BenchRow {
    std::string image;
    SolverVariant variant = SolverVariant::c_tv;
    double best_psnr = 0;   // cold solve at the selected cell
    double scan_psnr = 0;   // value that won the scan
    double best_lambda = 0;
    double best_inv_alpha = 1;
    int iterations = 0;     // of the cold solve
    double runtime_s = 0;   // wall time of the scan for this (image, variant)
    int failed_cells = 0;
    std::string residual_path, trace_path;
    Image denoised;
    SolverTrace trace;
};

struct BenchReport {
    std::vector<BenchRow> rows;
    std::vector<std::vector<GridCell>> cells;  // parallel to rows
};

namespace detail {

/// argmax PSNR; ties go to the smallest lambda, then the largest 1/alpha.
inline std::optional<std::size_t> best_cell(const std::vector<GridCell>& cells) {
    std::optional<std::size_t> best;
    for (std::size_t k = 0; k < cells.size(); ++k) {
        const GridCell& c = cells[k];
        if (!c.error.empty() || !std::isfinite(c.psnr)) continue;
        if (!best) {
            best = k;
            continue;
        }
        const GridCell& b = cells[*best];
        if (c.psnr > b.psnr || (c.psnr == b.psnr && (c.lambda < b.lambda ||
                                                     (c.lambda == b.lambda && c.inv_alpha > b.inv_alpha))))
            best = k;
    }
    return best;
}

/// Runs `jobs` indices on `threads` workers; job k writes only its own slot.
template <class Job>
void parallel_for(std::size_t jobs, unsigned threads, Job job) {
    threads = std::max(1u, std::min<unsigned>(threads, unsigned(jobs)));
    if (threads == 1) {
        for (std::size_t k = 0; k < jobs; ++k) job(k);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t)
        pool.emplace_back([&] {
            for (std::size_t k; (k = next.fetch_add(1)) < jobs;) {
                try {
                    job(k);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                }
            }
        });
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
}

}  // namespace detail

/// Full sweep. TV variants ignore 1/alpha and use the single value 1.
/// Each (image, variant, 1/alpha) line is scanned in increasing lambda, warm
/// started from the previous cell; lines are independent, so the result does
/// not depend on the thread count. The selected cell is then re-solved from
/// the default start with tracing on; that solve gives best_psnr.
inline BenchReport grid_search(const std::vector<BenchImage>& images, const GridSpec& grid,
                               const PipelineSettings& settings) {
    grid.validate();
    std::vector<double> lambdas = grid.lambda_values;
    std::sort(lambdas.begin(), lambdas.end());
    lambdas.erase(std::unique(lambdas.begin(), lambdas.end()), lambdas.end());

    struct Line {
        std::size_t image, row;
        SolverVariant variant;
        double inv_alpha;
    };
    std::vector<DirectionField> fields;
    for (const auto& im : images) {
        if (!(im.clean.shape == im.noisy.shape)) throw std::invalid_argument("grid: clean/noisy shape mismatch");
        DirectionEstimateOptions opt = settings.directions;
        opt.alpha = 1.0;
        fields.push_back(estimate_directions(settings.directions_from_clean ? im.clean : im.noisy, opt));
    }

    BenchReport rep;
    std::vector<Line> lines;
    for (std::size_t i = 0; i < images.size(); ++i)
        for (SolverVariant v : grid.variants) {
            BenchRow row;
            row.image = images[i].name;
            row.variant = v;
            rep.rows.push_back(row);
            const std::size_t r = rep.rows.size() - 1;
            if (is_directional(v))
                for (double a : grid.inv_alpha_values) lines.push_back({i, r, v, a});
            else
                lines.push_back({i, r, v, 1.0});
        }

    std::vector<std::vector<GridCell>> line_cells(lines.size());
    std::vector<double> line_time(lines.size(), 0.0);
    detail::parallel_for(lines.size(), settings.threads, [&](std::size_t k) {
        const Line& ln = lines[k];
        const BenchImage& im = images[ln.image];
        const auto t0 = std::chrono::steady_clock::now();
        std::optional<SolverState> warm;
        for (double lambda : lambdas) {
            GridCell cell;
            cell.lambda = lambda;
            cell.inv_alpha = ln.inv_alpha;
            try {
                const SolverConfig cfg = cell_config(ln.variant, lambda, ln.inv_alpha, fields[ln.image], settings);
                SolveResult r = solve(im.noisy, cfg, settings.warm_start && warm ? &*warm : nullptr);
                cell.psnr = psnr(r.state.x, im.clean);
                cell.iterations = r.iterations;
                if (settings.warm_start) warm = std::move(r.state);
            } catch (const std::exception& e) {
                cell.error = e.what();
                warm.reset();
            }
            line_cells[k].push_back(cell);
        }
        line_time[k] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    });

    rep.cells.resize(rep.rows.size());
    for (std::size_t k = 0; k < lines.size(); ++k) {
        auto& dst = rep.cells[lines[k].row];
        dst.insert(dst.end(), line_cells[k].begin(), line_cells[k].end());
        rep.rows[lines[k].row].runtime_s += line_time[k];
    }

    detail::parallel_for(rep.rows.size(), settings.threads, [&](std::size_t r) {
        BenchRow& row = rep.rows[r];
        const auto& cells = rep.cells[r];
        row.failed_cells = int(std::count_if(cells.begin(), cells.end(), [](const GridCell& c) { return !c.error.empty(); }));
        const auto best = detail::best_cell(cells);
        if (!best) {
            row.best_psnr = row.scan_psnr = std::numeric_limits<double>::quiet_NaN();
            return;
        }
        const GridCell& c = cells[*best];
        row.scan_psnr = c.psnr;
        row.best_lambda = c.lambda;
        row.best_inv_alpha = c.inv_alpha;
        std::size_t image = 0;
        while (images[image].name != row.image) ++image;
        SolverConfig cfg = cell_config(row.variant, c.lambda, c.inv_alpha, fields[image], settings);
        cfg.record_every = 1;
        cfg.clean = &images[image].clean;
        SolveResult res = solve(images[image].noisy, cfg);
        row.best_psnr = psnr(res.state.x, images[image].clean);
        row.iterations = res.iterations;
        row.denoised = std::move(res.state.x);
        row.trace = std::move(res.trace);
    });
    return rep;
}

// ---------------------------------------------------------------------------
// CSV output. Numbers use a fixed, locale-independent format so that equal
// inputs give byte-identical files.

namespace detail {

/// Shortest round-trip representation, or `digits` significant digits.
inline std::string fmt(double v, int digits = 0) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    const auto res = digits > 0 ? std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, digits)
                                : std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

}  // namespace detail

/// image,variant,best_psnr,best_lambda,best_inv_alpha,iters,runtime_s
/// runtime_s is left empty unless `with_timing`, which keeps the file
/// reproducible by default.
inline void write_report_csv(std::ostream& out, const BenchReport& rep, bool with_timing = false) {
    out << "image,variant,best_psnr,best_lambda,best_inv_alpha,iters,runtime_s\n";
    for (const BenchRow& r : rep.rows)
        out << r.image << ',' << to_string(r.variant) << ',' << detail::fmt(r.best_psnr) << ','
            << detail::fmt(r.best_lambda) << ',' << detail::fmt(r.best_inv_alpha) << ',' << r.iterations << ','
            << (with_timing ? detail::fmt(r.runtime_s, 6) : "") << '\n';
}

/// image,variant,scan_psnr,failed_cells,residual_map,trace
inline void write_report_details_csv(std::ostream& out, const BenchReport& rep) {
    out << "image,variant,scan_psnr,failed_cells,residual_map,trace\n";
    for (const BenchRow& r : rep.rows)
        out << r.image << ',' << to_string(r.variant) << ',' << detail::fmt(r.scan_psnr) << ',' << r.failed_cells
            << ',' << r.residual_path << ',' << r.trace_path << '\n';
}

/// One line per grid cell: image,variant,lambda,inv_alpha,psnr,iters,error
inline void write_cells_csv(std::ostream& out, const BenchReport& rep) {
    out << "image,variant,lambda,inv_alpha,psnr,iters,error\n";
    for (std::size_t r = 0; r < rep.rows.size(); ++r)
        for (const GridCell& c : rep.cells[r]) {
            std::string err = c.error;
            std::replace(err.begin(), err.end(), ',', ';');
            out << rep.rows[r].image << ',' << to_string(rep.rows[r].variant) << ',' << detail::fmt(c.lambda) << ','
                << detail::fmt(c.inv_alpha) << ',' << (c.error.empty() ? detail::fmt(c.psnr) : "") << ','
                << c.iterations << ',' << err << '\n';
        }
}

struct ReportEntry {
    std::string image;
    SolverVariant variant = SolverVariant::c_tv;
    double best_psnr = 0, best_lambda = 0, best_inv_alpha = 1;
    int iterations = 0;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace detail

inline std::vector<ReportEntry> read_report_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw IoError(path + ": empty report");
    const auto header = detail::split_csv_line(line);
    auto col = [&](const char* name) {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw IoError(path + ": missing column " + name);
        return std::size_t(it - header.begin());
    };
    const std::size_t ci = col("image"), cv = col("variant"), cp = col("best_psnr"), cl = col("best_lambda"),
                      ca = col("best_inv_alpha"), ct = col("iters");
    std::vector<ReportEntry> out;
    for (int lineno = 2; std::getline(in, line); ++lineno) {
        if (line.empty()) continue;
        const auto f = detail::split_csv_line(line);
        if (f.size() != header.size()) throw IoError(path + ":" + std::to_string(lineno) + ": wrong field count");
        try {
            out.push_back({f[ci], parse_variant(f[cv]), std::stod(f[cp]), std::stod(f[cl]), std::stod(f[ca]),
                           std::stoi(f[ct])});
        } catch (const std::invalid_argument& e) {
            throw IoError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

/// iter,objective,psnr,rel_change,dist_to_ref (empty where not computed)
inline void write_trace_csv(std::ostream& out, const SolverTrace& trace) {
    out << "iter,objective,psnr,rel_change,dist_to_ref\n";
    for (const TraceRecord& t : trace) {
        out << t.iter << ',' << detail::fmt(t.objective) << ',' << (t.psnr ? detail::fmt(*t.psnr) : "") << ','
            << detail::fmt(t.rel_change) << ',' << (t.dist_to_ref ? detail::fmt(*t.dist_to_ref) : "") << '\n';
    }
}

// ---------------------------------------------------------------------------
// Convergence curves: PSNR and log10 |z_l - z_inf| / |z_inf| per iteration,
// with z_inf a long run from the same start.

struct ConvergenceRun {
    SolverVariant variant = SolverVariant::c_tv;
    double lambda = 0, inv_alpha = 1;
    SolverTrace trace;  // psnr and dist_to_ref filled at every iteration
};

inline ConvergenceRun convergence_run(const Image& noisy, const Image& clean, SolverVariant variant, double lambda,
                                      double inv_alpha, const DirectionField& base_field, const PipelineSettings& s,
                                      int iters, int ref_iters) {
    if (!(ref_iters > iters)) throw std::invalid_argument("convergence: ref_iters must exceed iters");
    PipelineSettings full = s;
    full.tol = 0;
    full.max_iters = ref_iters;
    SolverConfig cfg = cell_config(variant, lambda, inv_alpha, base_field, full);
    const SolveResult ref = solve(noisy, cfg);
    cfg.max_iters = iters;
    cfg.record_every = 1;
    cfg.clean = &clean;
    cfg.reference = &ref.state;
    ConvergenceRun run{variant, lambda, inv_alpha, solve(noisy, cfg).trace};
    return run;
}

/// iter,variant,psnr,log10_rel_dist
inline void write_convergence_csv(std::ostream& out, const std::vector<ConvergenceRun>& runs) {
    out << "iter,variant,psnr,log10_rel_dist\n";
    for (const ConvergenceRun& r : runs)
        for (const TraceRecord& t : r.trace)
            out << t.iter << ',' << to_string(r.variant) << ',' << detail::fmt(t.psnr.value_or(NAN)) << ','
                << detail::fmt(std::log10(t.dist_to_ref.value_or(NAN))) << '\n';
}

// ---------------------------------------------------------------------------
// Flat key=value configuration files. '#' starts a comment.

using KeyValues = std::map<std::string, std::string>;

inline KeyValues read_key_values(std::istream& in, const std::string& origin = "config") {
    KeyValues kv;
    std::string line;
    for (int lineno = 1; std::getline(in, line); ++lineno) {
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument(origin + ":" + std::to_string(lineno) + ": expected key=value");
        const std::string key = trim(line.substr(0, eq));
        if (key.empty()) throw std::invalid_argument(origin + ":" + std::to_string(lineno) + ": empty key");
        kv[key] = trim(line.substr(eq + 1));
    }
    return kv;
}

inline KeyValues read_key_values_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    return read_key_values(in, path);
}

/// Writes the solver-relevant parts of a configuration. The direction field
/// is not serialised; `inv_alpha` records the global 1/alpha.
inline void write_solver_config(std::ostream& out, const SolverConfig& c, double inv_alpha) {
    out << "variant=" << to_string(c.variant) << '\n'
        << "lambda=" << detail::fmt(c.params.lambda()) << '\n'
        << "rho=" << detail::fmt(c.params.rho()) << '\n'
        << "inv_alpha=" << detail::fmt(inv_alpha) << '\n'
        << "iters=" << c.max_iters << '\n'
        << "tol=" << detail::fmt(c.tol) << '\n'
        << "step_ratio=" << detail::fmt(c.step_ratio) << '\n'
        << "norm_bound=" << (c.norm_bound == NormBound::analytic ? "analytic" : "estimated") << '\n';
    if (c.tau) out << "tau=" << detail::fmt(*c.tau) << '\n';
    if (c.sigma) out << "sigma=" << detail::fmt(*c.sigma) << '\n';
}

struct ParsedSolverConfig {
    SolverConfig config;
    double inv_alpha = 1.0;
};

inline ParsedSolverConfig parse_solver_config(const KeyValues& kv) {
    auto num = [&](const std::string& key, double fallback) {
        const auto it = kv.find(key);
        if (it == kv.end()) return fallback;
        std::size_t used = 0;
        double v = 0;
        try {
            v = std::stod(it->second, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != it->second.size())
            throw std::invalid_argument("config: " + key + " is not a number: '" + it->second + "'");
        return v;
    };
    static const char* known[] = {"variant", "lambda", "rho", "inv_alpha", "iters", "tol",
                                  "step_ratio", "norm_bound", "tau", "sigma"};
    for (const auto& [k, v] : kv)
        if (std::find_if(std::begin(known), std::end(known), [&](const char* s) { return k == s; }) == std::end(known))
            throw std::invalid_argument("config: unknown key '" + k + "'");

    ParsedSolverConfig p;
    if (auto it = kv.find("variant"); it != kv.end()) p.config.variant = parse_variant(it->second);
    p.config.params = CncParams(num("lambda", 1.0), num("rho", 0.0));
    p.inv_alpha = num("inv_alpha", 1.0);
    if (!(p.inv_alpha > 0 && p.inv_alpha <= 1)) throw std::invalid_argument("config: inv_alpha must lie in (0, 1]");
    const double iters = num("iters", p.config.max_iters);
    if (iters < 0 || iters != std::floor(iters)) throw std::invalid_argument("config: iters must be a whole number");
    p.config.max_iters = int(iters);
    p.config.tol = num("tol", p.config.tol);
    p.config.step_ratio = num("step_ratio", p.config.step_ratio);
    if (auto it = kv.find("norm_bound"); it != kv.end()) {
        if (it->second == "analytic") p.config.norm_bound = NormBound::analytic;
        else if (it->second == "estimated") p.config.norm_bound = NormBound::estimated;
        else throw std::invalid_argument("config: norm_bound must be analytic or estimated");
    }
    if (kv.count("tau")) p.config.tau = num("tau", 0);
    if (kv.count("sigma")) p.config.sigma = num("sigma", 0);
    return p;
}

}  // namespace cncdtv
