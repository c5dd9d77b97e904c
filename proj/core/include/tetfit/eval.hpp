#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tetfit/common.hpp"
#include "tetfit/fit.hpp"
#include "tetfit/observe.hpp"

namespace tetfit {

// Mean Euclidean distance over corresponded point pairs.
double epe(std::span<const Vec3> pred, std::span<const Vec3> gt);

// Fraction of pairs strictly closer than the threshold.
double accuracy(std::span<const Vec3> pred, std::span<const Vec3> gt, double threshold);

struct FrameMetrics {
    double cd = 0.0;
    double epe = 0.0;
    double acc_s = 0.0;
    double acc_r = 0.0;
    double volume_pred = 0.0;
    double volume_gt = 0.0;
};

struct MetricsReport {
    int schema_version = 1;
    std::vector<FrameMetrics> frames;
    double mean_cd = 0.0, max_cd = 0.0;
    double mean_epe = 0.0, max_epe = 0.0;
    double acc_s = 0.0, acc_r = 0.0;  // means over frames
    double max_volume_gap = 0.0;
    std::string config_echo;
};

struct EvalConfig {
    std::size_t samples = 10000;
    std::uint64_t seed = 1001;  // keep distinct from the fit seed
    double acc_strict = 0.025;
    double acc_relaxed = 0.05;
    bool squared_chamfer = true;
    std::string config_echo;
};

// Scores predicted per-frame surface positions against the dataset. Chamfer
// uses fresh samples per frame with the same per-frame seed on both meshes,
// so feeding the ground truth back as the prediction scores exactly zero.
// EPE and the accuracies compare each advected canonical vertex with its
// image under the dataset's analytic motion.
MetricsReport evaluate_run(const SurfaceMesh& canonical_mesh,
                           const std::vector<std::vector<Vec3>>& frame_positions,
                           const SequenceDataset& ds, const EvalConfig& cfg);

void save_metrics_json(const std::string& path, const MetricsReport& report);
void save_metrics_csv(const std::string& path, const MetricsReport& report);

}  // namespace tetfit
