// tetfit command line. Subcommands cover the full loop: synthesize a motion
// dataset, fit a static grid, fit a deformation model, score it, and export
// meshes. Exit codes: 0 ok, 2 usage or config error, 3 numeric failure,
// 4 I/O failure.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "tetfit/config.hpp"
#include "tetfit/eval.hpp"
#include "tetfit/fit.hpp"
#include "tetfit/march.hpp"
#include "tetfit/observe.hpp"
#include "tetfit/tetgrid.hpp"
#include "tetfit/threading.hpp"

namespace {

using namespace tetfit;

std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string frame_name(int t, const char* ext) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "frame_%03d.%s", t, ext);
    return buf;
}

std::string join(const std::string& dir, const std::string& name) {
    return (std::filesystem::path(dir) / name).string();
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
    if (!std::filesystem::is_directory(dir)) throw IoError(dir + " is not a directory");
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << text;
    if (!out) throw IoError("write failed: " + path);
}

// Flags set on the command line override config-file values, which override
// defaults. Each flag records an applier that fires only when its option was
// actually given.
struct Ctx {
    RunConfig v;
    std::string config_path;
    std::string base_s, motion_s, mode_s, placement_s, model_s, optimizer_s, schedule_s;
    std::string target, dataset, out, results, grid_path, canonical_path;
    const CLI::Option* threads_opt = nullptr;
    const CLI::Option* mode_opt = nullptr;
    const CLI::Option* k_opt = nullptr;
    const CLI::Option* placement_opt = nullptr;
    std::vector<std::pair<const CLI::Option*, std::function<void(RunConfig&)>>> overrides;

    void on(const CLI::Option* opt, std::function<void(RunConfig&)> apply) {
        overrides.emplace_back(opt, std::move(apply));
    }

    RunConfig resolve() const {
        RunConfig c;
        if (!config_path.empty()) c = load_config_file(config_path);
        for (const auto& [opt, apply] : overrides)
            if (opt->count() > 0) apply(c);
        return c;
    }
};

void add_common_flags(CLI::App* cmd, Ctx& x) {
    cmd->add_option("--config", x.config_path, "key = value config file read before flags")
        ->check(CLI::ExistingFile);
    x.on(cmd->add_option("--seed", x.v.seed, "master random seed"),
         [&x](RunConfig& c) { c.seed = x.v.seed; });
    x.threads_opt = cmd->add_option("--threads", x.v.threads, "worker threads, 0 = hardware");
    x.on(x.threads_opt, [&x](RunConfig& c) { c.threads = x.v.threads; });
}

void add_dataset_flags(CLI::App* cmd, Ctx& x) {
    x.on(cmd->add_option("--base", x.base_s, "base shape: icosphere, box, capsule"),
         [&x](RunConfig& c) { c.base = base_shape_from_name(x.base_s); });
    x.on(cmd->add_option("--motion", x.motion_s,
                         "motion: translate, squash, twist, radial-pulse"),
         [&x](RunConfig& c) { c.motion = motion_kind_from_name(x.motion_s); });
    x.on(cmd->add_option("--amplitude,--amp", x.v.amplitude, "motion amplitude"),
         [&x](RunConfig& c) { c.amplitude = x.v.amplitude; });
    x.on(cmd->add_option("--period", x.v.period, "frames per motion cycle"),
         [&x](RunConfig& c) { c.period = x.v.period; });
    x.on(cmd->add_option("--frames", x.v.frames, "number of frames"),
         [&x](RunConfig& c) { c.frames = x.v.frames; });
}

void add_observation_flags(CLI::App* cmd, Ctx& x) {
    x.mode_opt = cmd->add_option("--mode", x.mode_s, "observations: full, slices, volume");
    x.on(x.mode_opt, [&x](RunConfig& c) { c.mode = observation_mode_from_name(x.mode_s); });
    x.k_opt = cmd->add_option("--k", x.v.slice_k, "slice plane count");
    x.on(x.k_opt, [&x](RunConfig& c) { c.slice_k = x.v.slice_k; });
    x.placement_opt = cmd->add_option("--placement", x.placement_s,
                                      "slice placement: central, strided");
    x.on(x.placement_opt,
         [&x](RunConfig& c) { c.slice_placement = slice_placement_from_name(x.placement_s); });
}

void add_optimizer_flags(CLI::App* cmd, Ctx& x) {
    x.on(cmd->add_option("--optimizer", x.optimizer_s, "sgd or adam"),
         [&x](RunConfig& c) { c.optimizer.kind = optimizer_kind_from_name(x.optimizer_s); });
    x.on(cmd->add_option("--lr", x.v.optimizer.lr, "learning rate"),
         [&x](RunConfig& c) { c.optimizer.lr = x.v.optimizer.lr; });
    x.on(cmd->add_option("--momentum", x.v.optimizer.momentum, "sgd momentum"),
         [&x](RunConfig& c) { c.optimizer.momentum = x.v.optimizer.momentum; });
    x.on(cmd->add_option("--weight-decay", x.v.optimizer.weight_decay, "weight decay"),
         [&x](RunConfig& c) { c.optimizer.weight_decay = x.v.optimizer.weight_decay; });
    x.on(cmd->add_option("--schedule", x.schedule_s, "lr schedule: constant, cosine"),
         [&x](RunConfig& c) { c.optimizer.schedule = lr_schedule_from_name(x.schedule_s); });
    x.on(cmd->add_option("--cd-weight", x.v.weights.cd, "surface distance weight"),
         [&x](RunConfig& c) { c.weights.cd = x.v.weights.cd; });
    x.on(cmd->add_option("--sdf-weight", x.v.weights.sdf, "signed distance weight"),
         [&x](RunConfig& c) { c.weights.sdf = x.v.weights.sdf; });
    x.on(cmd->add_option("--vol-weight", x.v.weights.vol, "volume match weight"),
         [&x](RunConfig& c) { c.weights.vol = x.v.weights.vol; });
    x.on(cmd->add_option("--reg-weight", x.v.weights.reg, "displacement regularizer weight"),
         [&x](RunConfig& c) { c.weights.reg = x.v.weights.reg; });
}

// Thread count: explicit flag wins, then an explicit config value, then the
// environment-seeded default.
void apply_threads(const Ctx& x, const RunConfig& cfg) {
    if (x.threads_opt != nullptr && x.threads_opt->count() > 0)
        set_thread_count(cfg.threads);
    else if (cfg.threads > 0)
        set_thread_count(cfg.threads);
}

std::string loss_csv_shape(const FitShapeResult& res) {
    std::string csv = "iteration,loss,best\n";
    for (std::size_t i = 0; i < res.loss_trace.size(); ++i) {
        csv += std::to_string(i);
        csv += ',';
        csv += fmt17(res.loss_trace[i]);
        csv += ',';
        csv += fmt17(res.best_trace[i]);
        csv += '\n';
    }
    return csv;
}

std::string loss_csv_motion(const FitMotionResult& res, int frames) {
    std::string csv = "iteration,total,best";
    for (int t = 0; t < frames; ++t) {
        char buf[24];
        std::snprintf(buf, sizeof buf, ",frame_%03d", t);
        csv += buf;
    }
    csv += '\n';
    for (std::size_t i = 0; i < res.loss_trace.size(); ++i) {
        csv += std::to_string(i);
        csv += ',';
        csv += fmt17(res.loss_trace[i]);
        csv += ',';
        csv += fmt17(res.best_trace[i]);
        for (double f : res.frame_trace[i]) {
            csv += ',';
            csv += fmt17(f);
        }
        csv += '\n';
    }
    return csv;
}

int cmd_generate(const Ctx& x) {
    RunConfig cfg = x.resolve();
    apply_threads(x, cfg);
    AnalyticMotion motion = make_motion(cfg.motion, cfg.amplitude, cfg.period);
    SequenceDataset ds =
        generate_sequence(cfg.base, motion, cfg.frames, cfg.mode, cfg.slice_spec(), cfg.seed);
    ensure_dir(x.out);
    save_dataset(x.out, ds);
    std::printf("wrote %s\n", join(x.out, "manifest.json").c_str());
    std::printf("frames %d, mode %s, base %s, motion %s\n", ds.frames,
                observation_mode_name(ds.mode).c_str(), base_shape_name(ds.base).c_str(),
                motion_kind_name(ds.motion.kind).c_str());
    return 0;
}

int cmd_fit_shape(const Ctx& x) {
    RunConfig cfg = x.resolve();
    apply_threads(x, cfg);
    if (!std::filesystem::exists(x.target))
        throw InvalidArgument("target mesh not found: " + x.target);
    SurfaceMesh target = load_obj(x.target);

    TetGrid grid = build_uniform_grid(cfg.resolution);
    const double r = cfg.init_radius;
    set_sdf_from_field(grid, [r](const Vec3& p) { return norm(p) - r; });

    auto t0 = std::chrono::steady_clock::now();
    FitShapeResult res = fit_shape(grid, target, cfg.shape_config());
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    ensure_dir(x.out);
    save_config_file(join(x.out, "config.cfg"), cfg);
    write_text(join(x.out, "loss.csv"), loss_csv_shape(res));
    save_grid(join(x.out, "grid.tetgrid"), res.grid);
    SurfaceMesh mesh = marching_tetrahedra(res.grid);
    save_obj(join(x.out, "mesh.obj"), mesh);

    std::printf("best loss %.6g at iteration %d (%zu vertices, %zu triangles)\n", res.best_loss,
                res.best_iteration, mesh.positions.size(), mesh.triangles.size());
    std::size_t inverted = count_inverted_tets(res.grid);
    if (inverted > 0) std::printf("inverted tets %zu\n", inverted);
    std::printf("fit time %.1fs, wrote %s\n", secs, x.out.c_str());
    return 0;
}

// Observations normally come straight from the dataset. Passing --mode (or
// --k / --placement) re-derives them from the stored ground-truth frames, so
// one dataset serves every evidence regime.
std::vector<Observation> resolve_observations(const SequenceDataset& ds, const Ctx& x,
                                              const RunConfig& cfg) {
    bool re_derive = (x.mode_opt != nullptr && x.mode_opt->count() > 0) ||
                     (x.k_opt != nullptr && x.k_opt->count() > 0) ||
                     (x.placement_opt != nullptr && x.placement_opt->count() > 0);
    if (!re_derive) return ds.observations;

    std::vector<Observation> obs;
    obs.reserve(ds.gt_meshes.size());
    if (cfg.mode == ObservationMode::kSlices) {
        double z_lo = -1.0, z_hi = 1.0;
        for (const SurfaceMesh& m : ds.gt_meshes) {
            double lo = 1.0, hi = -1.0;
            for (const Vec3& p : m.positions) {
                lo = std::min(lo, p.z);
                hi = std::max(hi, p.z);
            }
            z_lo = std::max(z_lo, lo);
            z_hi = std::min(z_hi, hi);
        }
        if (!(z_lo < z_hi)) throw InvalidArgument("frames share no z-extent for slice planes");
        std::vector<PlaneSpec> planes = make_slice_planes(z_lo, z_hi, cfg.slice_spec());
        for (const SurfaceMesh& m : ds.gt_meshes) obs.push_back(observe_slices(m, planes));
    } else if (cfg.mode == ObservationMode::kVolume) {
        for (const SurfaceMesh& m : ds.gt_meshes) obs.push_back(observe_volume(m));
    } else {
        for (const SurfaceMesh& m : ds.gt_meshes) obs.push_back(observe_full(m));
    }
    return obs;
}

int cmd_fit_motion(const Ctx& x) {
    RunConfig cfg = x.resolve();
    apply_threads(x, cfg);
    if (!std::filesystem::exists(join(x.dataset, "manifest.json")))
        throw InvalidArgument("dataset has no manifest.json: " + x.dataset);
    if (!x.canonical_path.empty() && !std::filesystem::exists(x.canonical_path))
        throw InvalidArgument("canonical grid not found: " + x.canonical_path);
    SequenceDataset ds = load_dataset(x.dataset);
    std::vector<Observation> obs = resolve_observations(ds, x, cfg);

    auto t0 = std::chrono::steady_clock::now();
    TetGrid canonical;
    if (!x.canonical_path.empty()) {
        canonical = load_grid(x.canonical_path);
    } else {
        std::printf("fitting canonical shape (%d iterations at resolution %d)\n",
                    cfg.shape_iterations, cfg.resolution);
        std::fflush(stdout);
        TetGrid grid = build_uniform_grid(cfg.resolution);
        const double r = cfg.init_radius;
        set_sdf_from_field(grid, [r](const Vec3& p) { return norm(p) - r; });
        canonical = fit_shape(grid, ds.canonical(), cfg.shape_config()).grid;
    }

    FitMotionResult res = fit_motion(canonical, obs, cfg.motion_config());
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    ensure_dir(x.out);
    save_config_file(join(x.out, "config.cfg"), cfg);
    write_text(join(x.out, "loss.csv"), loss_csv_motion(res, ds.frames));
    save_model(join(x.out, "model.ckpt"), res.model, nullptr, nullptr);
    save_grid(join(x.out, "canonical.tetgrid"), canonical);
    save_obj(join(x.out, "canonical_mesh.obj"), res.canonical_mesh);
    for (int t = 0; t < ds.frames; ++t) {
        SurfaceMesh frame;
        frame.positions = res.frame_positions[static_cast<std::size_t>(t)];
        frame.triangles = res.canonical_mesh.triangles;
        save_obj(join(x.out, frame_name(t, "obj")), frame);
    }

    std::printf("best loss %.6g at iteration %d over %d frames\n", res.best_loss,
                res.best_iteration, ds.frames);
    std::printf("fit time %.1fs, wrote %s\n", secs, x.out.c_str());
    return 0;
}

int cmd_eval(const Ctx& x) {
    RunConfig cfg = x.resolve();
    apply_threads(x, cfg);
    if (!std::filesystem::exists(join(x.dataset, "manifest.json")))
        throw InvalidArgument("dataset has no manifest.json: " + x.dataset);
    SequenceDataset ds = load_dataset(x.dataset);

    std::string canonical_path = join(x.results, "canonical_mesh.obj");
    if (!std::filesystem::exists(canonical_path))
        throw InvalidArgument("results directory has no canonical_mesh.obj: " + x.results);
    SurfaceMesh canonical = load_obj(canonical_path);

    std::vector<std::vector<Vec3>> frame_positions;
    frame_positions.reserve(static_cast<std::size_t>(ds.frames));
    for (int t = 0; t < ds.frames; ++t) {
        std::string path = join(x.results, frame_name(t, "obj"));
        if (!std::filesystem::exists(path))
            throw InvalidArgument("results directory is missing " + frame_name(t, "obj"));
        frame_positions.push_back(load_obj(path).positions);
    }

    MetricsReport rep = evaluate_run(canonical, frame_positions, ds, cfg.eval_config());

    std::string out = x.out.empty() ? x.results : x.out;
    ensure_dir(out);
    save_metrics_json(join(out, "metrics.json"), rep);
    save_metrics_csv(join(out, "metrics.csv"), rep);

    std::printf("frames %d\n", ds.frames);
    std::printf("cd %.6g (max %.6g)\n", rep.mean_cd, rep.max_cd);
    std::printf("epe %.3f (max %.3f)\n", rep.mean_epe, rep.max_epe);
    std::printf("acc_s %.3f, acc_r %.3f\n", rep.acc_s, rep.acc_r);
    std::printf("volume gap %.6g\n", rep.max_volume_gap);
    std::printf("wrote %s\n", join(out, "metrics.json").c_str());
    return 0;
}

int cmd_export(const Ctx& x) {
    if (!std::filesystem::exists(x.grid_path))
        throw InvalidArgument("grid file not found: " + x.grid_path);
    TetGrid grid = load_grid(x.grid_path);
    SurfaceMesh mesh = marching_tetrahedra(grid);
    if (!x.out.empty()) {
        std::filesystem::path parent = std::filesystem::path(x.out).parent_path();
        if (!parent.empty()) ensure_dir(parent.string());
    }
    save_obj(x.out, mesh);
    std::printf("wrote %s (%zu vertices, %zu triangles)\n", x.out.c_str(), mesh.positions.size(),
                mesh.triangles.size());
    return 0;
}

int cmd_gradcheck(const Ctx& x) {
    RunConfig cfg = x.resolve();
    apply_threads(x, cfg);
    GradcheckReport rep = run_gradcheck(cfg.seed);
    std::printf("edge crossing   max rel err %.3g\n", rep.edge_crossing);
    std::printf("surface pipeline max rel err %.3g\n", rep.pipeline);
    std::printf("network stack   max rel err %.3g\n", rep.networks);
    std::printf("motion loss     max rel err %.3g\n", rep.motion);
    bool ok = rep.edge_crossing < 1e-4 && rep.pipeline < 1e-4 && rep.networks < 1e-4 &&
              rep.motion < 1e-3;
    std::printf("gradcheck %s\n", ok ? "passed" : "FAILED");
    return ok ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"deformable tetrahedral grid fitting"};
    app.require_subcommand(1);

    Ctx gen, shape, motion, ev, exp, gc;

    CLI::App* c_gen = app.add_subcommand("generate", "synthesize a motion dataset");
    add_common_flags(c_gen, gen);
    add_dataset_flags(c_gen, gen);
    add_observation_flags(c_gen, gen);
    c_gen->add_option("--out", gen.out, "output dataset directory")->required();

    CLI::App* c_shape = app.add_subcommand("fit-shape", "fit a grid to a target mesh");
    add_common_flags(c_shape, shape);
    add_optimizer_flags(c_shape, shape);
    c_shape->add_option("--target", shape.target, "target OBJ mesh")->required();
    shape.on(c_shape->add_option("--resolution,--res", shape.v.resolution, "grid resolution"),
             [&shape](RunConfig& c) { c.resolution = shape.v.resolution; });
    shape.on(c_shape->add_option("--iterations,--iters", shape.v.shape_iterations,
                                 "optimization iterations"),
             [&shape](RunConfig& c) { c.shape_iterations = shape.v.shape_iterations; });
    shape.on(c_shape->add_option("--samples", shape.v.shape_samples, "surface samples per side"),
             [&shape](RunConfig& c) { c.shape_samples = shape.v.shape_samples; });
    shape.on(c_shape->add_option("--init-radius", shape.v.init_radius, "initial sphere radius"),
             [&shape](RunConfig& c) { c.init_radius = shape.v.init_radius; });
    c_shape->add_option("--out", shape.out, "output results directory")->required();

    CLI::App* c_motion = app.add_subcommand("fit-motion", "fit a deformation model to a dataset");
    add_common_flags(c_motion, motion);
    add_observation_flags(c_motion, motion);
    add_optimizer_flags(c_motion, motion);
    c_motion->add_option("--dataset", motion.dataset, "dataset directory")->required();
    c_motion->add_option("--canonical", motion.canonical_path,
                         "reuse a fitted grid instead of fitting one");
    motion.on(c_motion->add_option("--model", motion.model_s,
                                   "deformation model: free-offsets, mlp, gru"),
              [&motion](RunConfig& c) { c.model = model_kind_from_name(motion.model_s); });
    motion.on(c_motion->add_option("--steps", motion.v.steps, "rollout steps, 0 = by mode"),
              [&motion](RunConfig& c) { c.steps = motion.v.steps; });
    motion.on(c_motion->add_option("--hidden", motion.v.hidden, "hidden width"),
              [&motion](RunConfig& c) { c.hidden = motion.v.hidden; });
    motion.on(c_motion->add_option("--latent", motion.v.latent, "per-frame latent size"),
              [&motion](RunConfig& c) { c.latent = motion.v.latent; });
    motion.on(c_motion->add_option("--iterations,--iters", motion.v.motion_iterations,
                                   "optimization iterations"),
              [&motion](RunConfig& c) { c.motion_iterations = motion.v.motion_iterations; });
    motion.on(
        c_motion->add_option("--samples", motion.v.motion_samples, "surface samples per side"),
        [&motion](RunConfig& c) { c.motion_samples = motion.v.motion_samples; });
    motion.on(c_motion->add_option("--resolution,--res", motion.v.resolution,
                                   "canonical grid resolution"),
              [&motion](RunConfig& c) { c.resolution = motion.v.resolution; });
    motion.on(c_motion->add_option("--shape-iters", motion.v.shape_iterations,
                                   "canonical fit iterations"),
              [&motion](RunConfig& c) { c.shape_iterations = motion.v.shape_iterations; });
    motion.on(c_motion->add_option("--init-radius", motion.v.init_radius,
                                   "canonical fit initial sphere radius"),
              [&motion](RunConfig& c) { c.init_radius = motion.v.init_radius; });
    c_motion->add_option("--out", motion.out, "output results directory")->required();

    CLI::App* c_eval = app.add_subcommand("eval", "score fitted frames against ground truth");
    add_common_flags(c_eval, ev);
    c_eval->add_option("--results", ev.results, "fit-motion results directory")->required();
    c_eval->add_option("--dataset", ev.dataset, "dataset directory")->required();
    c_eval->add_option("--out", ev.out, "metrics output directory (default: results)");
    ev.on(c_eval->add_option("--eval-samples", ev.v.eval_samples, "surface samples per frame"),
          [&ev](RunConfig& c) { c.eval_samples = ev.v.eval_samples; });
    ev.on(c_eval->add_option("--eval-seed", ev.v.eval_seed, "sampling seed"),
          [&ev](RunConfig& c) { c.eval_seed = ev.v.eval_seed; });
    ev.on(c_eval->add_option("--acc-strict", ev.v.acc_strict, "strict accuracy threshold"),
          [&ev](RunConfig& c) { c.acc_strict = ev.v.acc_strict; });
    ev.on(c_eval->add_option("--acc-relaxed", ev.v.acc_relaxed, "relaxed accuracy threshold"),
          [&ev](RunConfig& c) { c.acc_relaxed = ev.v.acc_relaxed; });

    CLI::App* c_export = app.add_subcommand("export", "extract a grid's surface to OBJ");
    c_export->add_option("--grid", exp.grid_path, "saved grid file")->required();
    c_export->add_option("--out", exp.out, "output OBJ path")->required();

    CLI::App* c_gc = app.add_subcommand("gradcheck", "finite-difference gradient audit");
    add_common_flags(c_gc, gc);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (c_gen->parsed()) return cmd_generate(gen);
        if (c_shape->parsed()) return cmd_fit_shape(shape);
        if (c_motion->parsed()) return cmd_fit_motion(motion);
        if (c_eval->parsed()) return cmd_eval(ev);
        if (c_export->parsed()) return cmd_export(exp);
        if (c_gc->parsed()) return cmd_gradcheck(gc);
    } catch (const InvalidArgument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const ContractViolation& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const FitDiverged& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
