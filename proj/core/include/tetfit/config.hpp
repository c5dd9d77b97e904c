#pragma once

#include <cstdint>
#include <string>

#include "tetfit/eval.hpp"
#include "tetfit/fit.hpp"
#include "tetfit/observe.hpp"

namespace tetfit {

// Everything a run can configure, flat. Files hold "key = value" lines with
// '#' comments; serialize_config emits every key, and parsing that text back
// reproduces the struct exactly.
struct RunConfig {
    std::uint64_t seed = 1;
    int threads = 0;  // 0 = hardware concurrency
    int resolution = 16;

    // dataset generation
    BaseShape base = BaseShape::kIcosphere;
    MotionKind motion = MotionKind::kTranslate;
    double amplitude = 0.2;
    int period = 24;
    int frames = 25;
    ObservationMode mode = ObservationMode::kFull;
    int slice_k = 3;
    SlicePlacement slice_placement = SlicePlacement::kCentral;

    // static shape fit
    int shape_iterations = 300;
    std::size_t shape_samples = 10000;
    double init_radius = 0.3;

    // motion fit
    ModelKind model = ModelKind::kGru;
    int steps = 0;  // 0 = by observation mode
    int hidden = 64;
    int latent = 16;
    int motion_iterations = 150;
    std::size_t motion_samples = 10000;

    LossWeights weights;
    OptimizerConfig optimizer;
    bool squared_chamfer = true;

    // evaluation
    std::size_t eval_samples = 10000;
    std::uint64_t eval_seed = 1001;
    double acc_strict = 0.025;
    double acc_relaxed = 0.05;

    bool operator==(const RunConfig& o) const;

    FitShapeConfig shape_config() const;
    FitMotionConfig motion_config() const;
    EvalConfig eval_config() const;
    SliceSpec slice_spec() const;
};

RunConfig parse_config(const std::string& text);
std::string serialize_config(const RunConfig& c);
RunConfig load_config_file(const std::string& path);
void save_config_file(const std::string& path, const RunConfig& c);

}  // namespace tetfit
