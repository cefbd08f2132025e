// cncdtv: command-line front end.
//
//   generate             synthetic test image
//   add-noise            additive Gaussian noise
//   estimate-directions  structure-tensor direction field (CSV)
//   denoise              one solve
//   grid-search          lambda x 1/alpha sweep with a report per image/variant
//   convergence          PSNR and distance-to-reference curves
//
// Exit codes: 0 success, 1 usage, 2 numerical failure, 3 I/O.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "cncdtv.hpp"

namespace fs = std::filesystem;
using namespace cncdtv;

namespace {

enum Exit { ok = 0, usage = 1, numerical = 2, io = 3 };

struct UsageError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    return out;
}

DirectionConvention parse_convention(const std::string& s) {
    if (s == "normal") return DirectionConvention::normal;
    if (s == "level-line") return DirectionConvention::level_line;
    throw UsageError("--convention must be normal or level-line");
}

// Options shared by the solving commands.
struct SolveFlags {
    double lambda = 10.0;
    double rho = 0.99;
    double inv_alpha = 1.0;
    std::string variant = "cnc-dtv";
    int iters = 3000;
    double tol = 1e-4;
    double step_ratio = default_step_ratio;
    double sigma_g = 1.0;
    double rho_st = 2.0;
    std::string convention = "normal";
    std::string config;
    bool directions_from_clean = false;
};

void add_solve_flags(CLI::App* cmd, SolveFlags& f, bool with_point) {
    if (with_point) {
        cmd->add_option("--lambda", f.lambda, "fidelity weight")->capture_default_str();
        cmd->add_option("--inv-alpha", f.inv_alpha, "1/alpha in (0, 1]")->capture_default_str();
        cmd->add_option("--variant", f.variant, "c-tv, cnc-tv, c-dtv or cnc-dtv")->capture_default_str();
    }
    cmd->add_option("--rho", f.rho, "non-convexity in [0, 1), CNC variants")->capture_default_str();
    cmd->add_option("--iters", f.iters, "iteration budget")->capture_default_str();
    cmd->add_option("--tol", f.tol, "stop when the relative iterate change drops below this (0 = off)")
        ->capture_default_str();
    cmd->add_option("--step-ratio", f.step_ratio, "sigma sqrt(B); tau follows from the step rule")
        ->capture_default_str();
    cmd->add_option("--sigma-g", f.sigma_g, "direction estimate: pre-smoothing scale")->capture_default_str();
    cmd->add_option("--rho-st", f.rho_st, "direction estimate: tensor smoothing scale")->capture_default_str();
    cmd->add_option("--convention", f.convention, "theta along the edge normal or the level line")
        ->capture_default_str();
    cmd->add_option("--config", f.config, "key=value file; explicit flags win");
}

/// Fills flags the user did not give from the config file.
void apply_config(CLI::App* cmd, SolveFlags& f) {
    if (f.config.empty()) return;
    const KeyValues kv = read_key_values_file(f.config);
    auto take = [&](const char* key, const char* flag, auto& dst) {
        const auto it = kv.find(key);
        if (it == kv.end() || cmd->count(flag) > 0) return;
        using T = std::decay_t<decltype(dst)>;
        try {
            if constexpr (std::is_same_v<T, std::string>) dst = it->second;
            else if constexpr (std::is_same_v<T, int>) dst = std::stoi(it->second);
            else dst = std::stod(it->second);
        } catch (const std::exception&) {
            throw UsageError(f.config + ": bad value for " + key + ": '" + it->second + "'");
        }
    };
    static const char* known[] = {"variant", "lambda", "rho", "inv_alpha", "iters", "tol", "step_ratio",
                                  "norm_bound", "tau", "sigma", "sigma_g", "rho_st", "convention"};
    for (const auto& [k, v] : kv)
        if (std::find_if(std::begin(known), std::end(known), [&](const char* s) { return k == s; }) == std::end(known))
            throw UsageError(f.config + ": unknown key '" + k + "'");
    take("variant", "--variant", f.variant);
    take("lambda", "--lambda", f.lambda);
    take("rho", "--rho", f.rho);
    take("inv_alpha", "--inv-alpha", f.inv_alpha);
    take("iters", "--iters", f.iters);
    take("tol", "--tol", f.tol);
    take("step_ratio", "--step-ratio", f.step_ratio);
    take("sigma_g", "--sigma-g", f.sigma_g);
    take("rho_st", "--rho-st", f.rho_st);
    take("convention", "--convention", f.convention);
}

PipelineSettings settings_from(const SolveFlags& f) {
    if (!(f.rho >= 0 && f.rho < 1))
        throw UsageError("--rho must lie in [0, 1); rho >= 1 breaks the convexity condition");
    if (f.iters < 0) throw UsageError("--iters must be >= 0");
    if (!(f.tol >= 0)) throw UsageError("--tol must be >= 0");
    if (!(f.step_ratio > 0)) throw UsageError("--step-ratio must be positive");
    PipelineSettings s;
    s.rho = f.rho;
    s.max_iters = f.iters;
    s.tol = f.tol;
    s.step_ratio = f.step_ratio;
    s.directions = {f.sigma_g, f.rho_st, 1.0, parse_convention(f.convention)};
    s.directions_from_clean = f.directions_from_clean;
    return s;
}

void warn_rho_zero(SolverVariant v, double rho) {
    if (is_cnc(v) && rho == 0.0)
        std::cerr << "warning: --rho 0 makes " << to_string(v) << " identical to "
                  << (is_directional(v) ? "c-dtv" : "c-tv") << "\n";
}

std::string image_file(const fs::path& dir, const std::string& stem, const char* ext) {
    return (dir / (stem + ext)).string();
}

// ---------------------------------------------------------------------------

int run_generate(const std::string& kind, std::size_t size, std::size_t width, std::size_t height,
                 std::uint64_t seed, const std::string& out) {
    GeneratorSpec g;
    g.kind = parse_image_kind(kind);
    g.width = width ? width : size;
    g.height = height ? height : size;
    g.seed = seed;
    write_image(out, generate(g));
    return ok;
}

int run_add_noise(const std::string& in, double sigma_e, std::uint64_t seed, const std::string& out) {
    if (!(sigma_e >= 0)) throw UsageError("--sigma-e must be >= 0");
    write_image(out, add_noise(read_image(in), {sigma_e, seed}));
    return ok;
}

int run_estimate(const std::string& in, const SolveFlags& f, const std::string& out) {
    if (!(f.inv_alpha > 0 && f.inv_alpha <= 1)) throw UsageError("--inv-alpha must lie in (0, 1]");
    DirectionEstimateOptions opt{f.sigma_g, f.rho_st, 1.0 / f.inv_alpha, parse_convention(f.convention)};
    write_direction_csv(out, estimate_directions(read_image(in), opt));
    return ok;
}

int run_denoise(CLI::App* cmd, SolveFlags& f, const std::string& in, const std::string& clean_path,
                const std::string& directions, const std::string& out, const std::string& trace_path,
                const std::string& save_config) {
    apply_config(cmd, f);
    const PipelineSettings s = settings_from(f);
    const SolverVariant variant = parse_variant(f.variant);
    if (!(f.inv_alpha > 0 && f.inv_alpha <= 1)) throw UsageError("--inv-alpha must lie in (0, 1]");
    warn_rho_zero(variant, f.rho);

    const Image noisy = read_image(in);
    std::optional<Image> clean;
    if (!clean_path.empty()) {
        clean = read_image(clean_path);
        if (!(clean->shape == noisy.shape)) throw UsageError("--clean has a different size than --in");
    }
    DirectionField field;
    if (!directions.empty()) {
        field = read_direction_csv(directions);
        if (field.n != noisy.size()) throw UsageError("--directions does not match the image size");
        if (cmd->count("--inv-alpha") > 0) field = with_alpha(std::move(field), 1.0 / f.inv_alpha);
    } else {
        DirectionEstimateOptions opt = s.directions;
        opt.alpha = 1.0;
        field = with_alpha(estimate_directions(noisy, opt), 1.0 / f.inv_alpha);
    }

    SolverConfig cfg;
    cfg.params = CncParams(f.lambda, is_cnc(variant) ? s.rho : 0.0);
    cfg.variant = variant;
    cfg.field = std::move(field);
    cfg.max_iters = s.max_iters;
    cfg.tol = s.tol;
    cfg.step_ratio = s.step_ratio;
    cfg.record_every = trace_path.empty() ? 0 : 1;
    if (clean) cfg.clean = &*clean;
    const SolveResult res = solve(noisy, cfg);

    if (!out.empty()) write_image(out, res.state.x);
    if (!trace_path.empty()) {
        auto os = open_out(trace_path);
        write_trace_csv(os, res.trace);
    }
    if (!save_config.empty()) {
        auto os = open_out(save_config);
        write_solver_config(os, cfg, f.inv_alpha);
    }
    std::cout << "iterations " << res.iterations << (res.converged ? " (converged)" : "") << "\n";
    if (clean) std::cout << "psnr " << detail::fmt(psnr(res.state.x, *clean)) << "\n";
    return ok;
}

int run_grid_search(CLI::App* cmd, SolveFlags& f, const std::string& images, std::size_t size, std::uint64_t seed,
                    double sigma_e, const std::string& lambdas, const std::string& inv_alphas,
                    const std::string& variants, unsigned threads, const std::string& out_dir, bool timing,
                    bool cold) {
    apply_config(cmd, f);
    PipelineSettings s = settings_from(f);
    s.threads = threads;
    s.warm_start = !cold;
    if (!(sigma_e >= 0)) throw UsageError("--sigma-e must be >= 0");

    GridSpec grid = default_grid();
    try {
        if (!lambdas.empty()) grid.lambda_values = parse_value_list(lambdas);
        if (!inv_alphas.empty()) grid.inv_alpha_values = parse_value_list(inv_alphas);
        if (!variants.empty()) {
            grid.variants.clear();
            std::stringstream ss(variants);
            for (std::string v; std::getline(ss, v, ',');) grid.variants.push_back(parse_variant(v));
        }
        grid.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    if (s.rho == 0.0)
        for (auto v : grid.variants) warn_rho_zero(v, s.rho);

    std::vector<BenchImage> bench;
    {
        std::stringstream ss(images);
        for (std::string k; std::getline(ss, k, ',');) {
            bench.push_back(make_bench_image(parse_image_kind(k), size, seed, sigma_e));
        }
    }
    if (bench.empty()) throw UsageError("--images is empty");

    const fs::path dir(out_dir);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());

    BenchReport rep = grid_search(bench, grid, s);

    for (const BenchImage& b : bench) {
        write_pgm(image_file(dir, b.name + "_clean", ".pgm"), b.clean);
        write_image_csv(image_file(dir, b.name + "_clean", ".csv"), b.clean);  // lossless, for --clean
        write_image_csv(image_file(dir, b.name + "_noisy", ".csv"), b.noisy);
    }
    for (BenchRow& r : rep.rows) {
        if (r.denoised.size() == 0) continue;
        const std::string stem = r.image + "_" + std::string(to_string(r.variant));
        const Image* clean = nullptr;
        for (const BenchImage& b : bench)
            if (b.name == r.image) clean = &b.clean;
        const ResidualMap res = residual_map(r.denoised, *clean);
        r.residual_path = "residual_" + stem + ".pgm";
        r.trace_path = "trace_" + stem + ".csv";
        write_pgm((dir / r.residual_path).string(), res.normalized);
        write_image_csv(image_file(dir, "residual_" + stem, ".csv"), res.absolute);
        write_pgm(image_file(dir, "denoised_" + stem, ".pgm"), r.denoised);
        auto ts = open_out((dir / r.trace_path).string());
        write_trace_csv(ts, r.trace);
    }
    {
        auto os = open_out((dir / "report.csv").string());
        write_report_csv(os, rep, timing);
    }
    {
        auto os = open_out((dir / "report_details.csv").string());
        write_report_details_csv(os, rep);
    }
    {
        auto os = open_out((dir / "cells.csv").string());
        write_cells_csv(os, rep);
    }
    write_report_csv(std::cout, rep, timing);
    for (const BenchRow& r : rep.rows)
        if (r.failed_cells > 0)
            std::cerr << "warning: " << r.failed_cells << " failed cells for " << r.image << "/"
                      << to_string(r.variant) << " (see cells.csv)\n";
    return ok;
}

int run_convergence(CLI::App* cmd, SolveFlags& f, const std::string& image, std::size_t size, std::uint64_t seed,
                    double sigma_e, const std::string& report, const std::string& variants, int ref_iters,
                    const std::string& out) {
    apply_config(cmd, f);
    const PipelineSettings s = settings_from(f);
    if (!(ref_iters > s.max_iters)) throw UsageError("--ref-iters must exceed --iters");

    const BenchImage im = make_bench_image(parse_image_kind(image), size, seed, sigma_e);
    const Image& clean = im.clean;
    const Image& noisy = im.noisy;
    DirectionEstimateOptions opt = s.directions;
    opt.alpha = 1.0;
    const DirectionField base = estimate_directions(s.directions_from_clean ? clean : noisy, opt);

    std::vector<SolverVariant> list(std::begin(all_variants), std::end(all_variants));
    if (!variants.empty()) {
        list.clear();
        std::stringstream ss(variants);
        for (std::string v; std::getline(ss, v, ',');) list.push_back(parse_variant(v));
    }
    std::vector<ReportEntry> entries;
    if (!report.empty()) entries = read_report_csv(report);

    std::vector<ConvergenceRun> runs;
    for (SolverVariant v : list) {
        double lambda = f.lambda, inv_alpha = is_directional(v) ? f.inv_alpha : 1.0;
        if (!report.empty()) {
            const auto it = std::find_if(entries.begin(), entries.end(), [&](const ReportEntry& e) {
                return e.image == im.name && e.variant == v;
            });
            if (it == entries.end())
                throw UsageError(report + " has no row for " + im.name + "/" +
                                 std::string(to_string(v)));
            lambda = it->best_lambda;
            inv_alpha = it->best_inv_alpha;
        }
        if (!(inv_alpha > 0 && inv_alpha <= 1)) throw UsageError("--inv-alpha must lie in (0, 1]");
        runs.push_back(convergence_run(noisy, clean, v, lambda, inv_alpha, base, s, s.max_iters, ref_iters));
    }
    auto os = open_out(out);
    write_convergence_csv(os, runs);
    return ok;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CNC directional TV denoising"};
    app.require_subcommand(1);

    // generate
    std::string kind = "texture", out;
    std::size_t size = 128, width = 0, height = 0;
    std::uint64_t seed = 0;
    auto* gen = app.add_subcommand("generate", "write a synthetic test image (.pgm or .csv)");
    gen->add_option("--kind", kind, "texture, barcode or geometric")->capture_default_str();
    gen->add_option("--size", size, "square size")->capture_default_str();
    gen->add_option("--width", width, "overrides --size");
    gen->add_option("--height", height, "overrides --size");
    gen->add_option("--seed", seed, "generator seed")->capture_default_str();
    gen->add_option("--out", out, "output path")->required();

    // add-noise
    std::string in;
    double sigma_e = 0.1;
    auto* noise = app.add_subcommand("add-noise", "add Gaussian noise; .csv keeps out-of-range values");
    noise->add_option("--in", in)->required();
    noise->add_option("--sigma-e", sigma_e, "noise standard deviation")->capture_default_str();
    noise->add_option("--seed", seed, "noise seed")->capture_default_str();
    noise->add_option("--out", out)->required();

    // estimate-directions
    SolveFlags est_flags;
    auto* est = app.add_subcommand("estimate-directions", "structure-tensor direction field as CSV");
    est->add_option("--in", in)->required();
    est->add_option("--inv-alpha", est_flags.inv_alpha, "1/alpha in (0, 1]")->capture_default_str();
    est->add_option("--sigma-g", est_flags.sigma_g)->capture_default_str();
    est->add_option("--rho-st", est_flags.rho_st)->capture_default_str();
    est->add_option("--convention", est_flags.convention, "normal or level-line")->capture_default_str();
    est->add_option("--out", out)->required();

    // denoise
    SolveFlags den_flags;
    std::string clean_path, directions, trace_path, save_config;
    auto* den = app.add_subcommand("denoise", "run one solve");
    add_solve_flags(den, den_flags, true);
    den->add_option("--in", in, "noisy image")->required();
    den->add_option("--clean", clean_path, "ground truth, enables PSNR");
    den->add_option("--directions", directions, "direction CSV instead of estimating from --in");
    den->add_option("--out", out, "denoised image");
    den->add_option("--trace", trace_path, "per-iteration trace CSV");
    den->add_option("--save-config", save_config, "write the effective solver config");

    // grid-search
    SolveFlags grid_flags;
    std::string images = "texture,barcode,geometric", lambdas, inv_alphas, variants, out_dir = "bench_out";
    unsigned threads = 1;
    bool timing = false, cold = false;
    auto* grid = app.add_subcommand("grid-search", "lambda x 1/alpha sweep on synthetic images");
    add_solve_flags(grid, grid_flags, false);
    grid->add_option("--images", images, "comma list of image kinds")->capture_default_str();
    grid->add_option("--size", size, "image size")->capture_default_str();
    grid->add_option("--seed", seed, "image and noise seed")->capture_default_str();
    grid->add_option("--sigma-e", sigma_e, "noise standard deviation")->capture_default_str();
    grid->add_option("--lambdas", lambdas, "lo:hi:step or a comma list (default 1:80:1)");
    grid->add_option("--inv-alphas", inv_alphas, "lo:hi:step or a comma list (default 0.1:1:0.05)");
    grid->add_option("--variants", variants, "comma list (default all four)");
    grid->add_option("--threads", threads, "worker threads")->capture_default_str();
    grid->add_option("--out-dir", out_dir)->capture_default_str();
    grid->add_flag("--timing", timing, "fill the runtime_s column (not reproducible)");
    grid->add_flag("--cold", cold, "start every cell from the default point");
    grid->add_flag("--directions-from-clean", grid_flags.directions_from_clean,
                   "estimate directions on the clean image (upper bound)");

    // convergence
    SolveFlags conv_flags;
    std::string conv_image = "geometric", report;
    std::size_t conv_size = 64;
    int ref_iters = 20000;
    auto* conv = app.add_subcommand("convergence", "PSNR and log10 distance to a long reference run");
    add_solve_flags(conv, conv_flags, true);
    conv->add_option("--image", conv_image, "image kind")->capture_default_str();
    conv->add_option("--size", conv_size)->capture_default_str();
    conv->add_option("--seed", seed)->capture_default_str();
    conv->add_option("--sigma-e", sigma_e)->capture_default_str();
    conv->add_option("--report", report, "take lambda and 1/alpha per variant from a grid-search report");
    conv->add_option("--variants", variants, "comma list (default all four)");
    conv->add_option("--ref-iters", ref_iters, "length of the reference run")->capture_default_str();
    conv->add_flag("--directions-from-clean", conv_flags.directions_from_clean,
                   "estimate directions on the clean image (upper bound)");
    conv->add_option("--out", out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? ok : usage;
    }

    try {
        if (*gen) return run_generate(kind, size, width, height, seed, out);
        if (*noise) return run_add_noise(in, sigma_e, seed, out);
        if (*est) return run_estimate(in, est_flags, out);
        if (*den) return run_denoise(den, den_flags, in, clean_path, directions, out, trace_path, save_config);
        if (*grid)
            return run_grid_search(grid, grid_flags, images, size, seed, sigma_e, lambdas, inv_alphas, variants,
                                   threads, out_dir, timing, cold);
        if (*conv)
            return run_convergence(conv, conv_flags, conv_image, conv_size, seed, sigma_e, report, variants,
                                   ref_iters, out);
    } catch (const DivergenceError& e) {
        std::cerr << "error: solver diverged: " << e.what() << "\n";
        return numerical;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return io;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return usage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return numerical;
    }
    return usage;
}
