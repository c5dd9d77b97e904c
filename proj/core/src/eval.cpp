#include "tetfit/eval.hpp"

#include <algorithm>
#include <cmath>

#include "io_util.hpp"
#include "json.hpp"
#include "tetfit/geometry.hpp"
#include "tetfit/threading.hpp"

namespace tetfit {

double epe(std::span<const Vec3> pred, std::span<const Vec3> gt) {
    if (pred.empty() || pred.size() != gt.size())
        throw InvalidArgument("epe needs two equal-length nonempty point lists");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) s += norm(pred[i] - gt[i]);
    return s / static_cast<double>(pred.size());
}

double accuracy(std::span<const Vec3> pred, std::span<const Vec3> gt, double threshold) {
    if (pred.empty() || pred.size() != gt.size())
        throw InvalidArgument("accuracy needs two equal-length nonempty point lists");
    if (!(threshold > 0.0)) throw InvalidArgument("accuracy threshold must be positive");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
        if (norm(pred[i] - gt[i]) < threshold) ++hits;
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

MetricsReport evaluate_run(const SurfaceMesh& canonical_mesh,
                           const std::vector<std::vector<Vec3>>& frame_positions,
                           const SequenceDataset& ds, const EvalConfig& cfg) {
    if (canonical_mesh.empty()) throw InvalidArgument("evaluation needs a nonempty canonical mesh");
    if (frame_positions.size() != static_cast<std::size_t>(ds.frames) ||
        ds.gt_meshes.size() != static_cast<std::size_t>(ds.frames))
        throw InvalidArgument("frame counts disagree between prediction and dataset");
    if (cfg.samples == 0) throw InvalidArgument("evaluation needs a positive sample count");
    std::size_t nv = canonical_mesh.positions.size();
    for (const auto& fp : frame_positions)
        if (fp.size() != nv)
            throw InvalidArgument("predicted frame has the wrong vertex count");

    MetricsReport rep;
    rep.config_echo = cfg.config_echo;
    rep.frames.resize(static_cast<std::size_t>(ds.frames));

    parallel_for(static_cast<std::size_t>(ds.frames), [&](int, std::size_t b, std::size_t e) {
        for (std::size_t t = b; t < e; ++t) {
            FrameMetrics& fm = rep.frames[t];
            SurfaceMesh pm;
            pm.triangles = canonical_mesh.triangles;
            pm.positions = frame_positions[t];

            std::uint64_t s = derive_seed(cfg.seed, 10, t);
            auto ps = sample_surface(pm, cfg.samples, s);
            auto gs = sample_surface(ds.gt_meshes[t], cfg.samples, s);
            std::vector<Vec3> pp(ps.size()), gp(gs.size());
            for (std::size_t k = 0; k < ps.size(); ++k) pp[k] = ps[k].point;
            for (std::size_t k = 0; k < gs.size(); ++k) gp[k] = gs[k].point;
            fm.cd = chamfer(pp, gp, cfg.squared_chamfer);

            std::vector<Vec3> gtv(nv);
            for (std::size_t i = 0; i < nv; ++i)
                gtv[i] = ds.motion.apply(canonical_mesh.positions[i], static_cast<int>(t));
            fm.epe = epe(frame_positions[t], gtv);
            fm.acc_s = accuracy(frame_positions[t], gtv, cfg.acc_strict);
            fm.acc_r = accuracy(frame_positions[t], gtv, cfg.acc_relaxed);

            fm.volume_pred = normalized_volume(pm);
            fm.volume_gt = normalized_volume(ds.gt_meshes[t]);
        }
    });

    double sum_cd = 0.0, sum_epe = 0.0, sum_s = 0.0, sum_r = 0.0;
    for (const FrameMetrics& fm : rep.frames) {
        sum_cd += fm.cd;
        sum_epe += fm.epe;
        sum_s += fm.acc_s;
        sum_r += fm.acc_r;
        rep.max_cd = std::max(rep.max_cd, fm.cd);
        rep.max_epe = std::max(rep.max_epe, fm.epe);
        rep.max_volume_gap = std::max(rep.max_volume_gap, std::fabs(fm.volume_pred - fm.volume_gt));
    }
    double n = static_cast<double>(rep.frames.size());
    rep.mean_cd = sum_cd / n;
    rep.mean_epe = sum_epe / n;
    rep.acc_s = sum_s / n;
    rep.acc_r = sum_r / n;
    return rep;
}

void save_metrics_json(const std::string& path, const MetricsReport& report) {
    nlohmann::json j;
    j["schema_version"] = report.schema_version;
    j["config"] = report.config_echo;
    nlohmann::json frames = nlohmann::json::array();
    for (std::size_t t = 0; t < report.frames.size(); ++t) {
        const FrameMetrics& fm = report.frames[t];
        frames.push_back({{"frame", t},
                          {"cd", fm.cd},
                          {"epe", fm.epe},
                          {"acc_s", fm.acc_s},
                          {"acc_r", fm.acc_r},
                          {"volume_pred", fm.volume_pred},
                          {"volume_gt", fm.volume_gt}});
    }
    j["frames"] = std::move(frames);
    j["aggregates"] = {{"mean_cd", report.mean_cd},     {"max_cd", report.max_cd},
                       {"mean_epe", report.mean_epe},   {"max_epe", report.max_epe},
                       {"acc_s", report.acc_s},         {"acc_r", report.acc_r},
                       {"max_volume_gap", report.max_volume_gap}};
    ioutil::write_text_file(path, j.dump(2) + "\n");
}

void save_metrics_csv(const std::string& path, const MetricsReport& report) {
    std::string out = "frame,cd,epe,acc_s,acc_r,volume_pred,volume_gt\n";
    for (std::size_t t = 0; t < report.frames.size(); ++t) {
        const FrameMetrics& fm = report.frames[t];
        out += std::to_string(t);
        for (double v : {fm.cd, fm.epe, fm.acc_s, fm.acc_r, fm.volume_pred, fm.volume_gt}) {
            out += ',';
            out += ioutil::format_double(v);
        }
        out += '\n';
    }
    ioutil::write_text_file(path, out);
}

}  // namespace tetfit
