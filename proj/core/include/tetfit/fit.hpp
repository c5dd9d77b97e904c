#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tetfit/common.hpp"
#include "tetfit/geometry.hpp"
#include "tetfit/layers.hpp"
#include "tetfit/march.hpp"
#include "tetfit/observe.hpp"
#include "tetfit/tape.hpp"
#include "tetfit/tetgrid.hpp"

namespace tetfit {

struct LossWeights {
    double cd = 1.0;
    double sdf = 0.1;
    double vol = 1.0;
    double reg = 1e-2;
};

// Symmetric chamfer distance: mean over a of min distance to b plus mean over
// b of min distance to a. Squared uses squared distances; both sets nonempty.
double chamfer(std::span<const Vec3> a, std::span<const Vec3> b, bool squared = true);

// Tracked variant. The b side is constant and pre-indexed; nearest-neighbor
// matches are frozen at current values, gradients flow through the matched
// squared distances only. A zero distance in non-squared mode contributes a
// constant zero term (sqrt is not differentiable there).
Val chamfer_val(std::span<const Vec3Val> a, const NearestNeighborIndex& b_index,
                bool squared = true);

// Signed distances to a fixed closed mesh with per-slot sign caching: once a
// query's sign is known, any later query inside the ball (previous point,
// previous unsigned distance) shares it, because that ball contains no
// surface. Slots are independent, so concurrent queries on distinct slots are
// safe. An exactly-on-surface query returns 0.
class MeshSdfCache {
public:
    MeshSdfCache(SurfaceMesh target, std::size_t slots);

    double signed_at(std::size_t slot, const Vec3& q);
    const SurfaceMesh& target() const { return mesh_; }

private:
    SurfaceMesh mesh_;
    MeshDistanceQuery query_;
    struct Slot {
        Vec3 anchor;
        double radius = 0.0;
        double sign = 1.0;
        bool valid = false;
    };
    std::vector<Slot> slots_;
};

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::kSgdMomentum;
    double lr = 0.01;
    double momentum = 0.99;
    double weight_decay = 3e-5;
    LrSchedule schedule = LrSchedule::kCosine;
};
Optimizer make_optimizer(const OptimizerConfig& cfg);

const char* optimizer_kind_name(OptimizerKind k);
OptimizerKind optimizer_kind_from_name(const std::string& name);
const char* lr_schedule_name(LrSchedule s);
LrSchedule lr_schedule_from_name(const std::string& name);

struct FitShapeConfig {
    int iterations = 300;
    std::size_t samples = 10000;
    LossWeights weights;
    OptimizerConfig optimizer;
    std::uint64_t seed = 1;
    bool squared_chamfer = true;
};

struct FitShapeResult {
    TetGrid grid;  // state with the lowest recorded loss
    std::vector<double> loss_trace;
    std::vector<double> best_trace;  // running minimum of loss_trace
    double best_loss = 0.0;
    int best_iteration = -1;
};

// Gradient descent of field values and vertex offsets against a fixed closed
// target mesh. Loss per iteration: cd * chamfer(fresh surface samples of both
// meshes) + sdf * mean |field - signed distance to target at current vertex
// positions|, the distance targets frozen per iteration. Throws FitDiverged
// after more than 25 consecutive empty extractions, NumericError on a
// non-finite loss.
FitShapeResult fit_shape(const TetGrid& grid, const SurfaceMesh& target, const FitShapeConfig& cfg);

enum class ModelKind { kFreeOffsets, kMlp, kGru };
const char* model_kind_name(ModelKind k);
ModelKind model_kind_from_name(const std::string& name);

// Per-frame deformation parameters. Tensor layout by kind:
//   free_offsets: "free_offsets" [frames, driving, 3]
//   mlp:  "latent" [frames, latent], "head0", "head1"
//   gru:  "latent", "gcn", "gru.update", "gru.reset", "gru.cand", "head0", "head1"
// head1 starts at zero, so every frame initially maps to the canonical shape.
struct DeformationModel {
    ModelKind kind = ModelKind::kGru;
    int steps = 1;
    int hidden = 64;
    int latent = 16;
    int frames = 1;
    std::uint32_t driving = 0;  // row count of the free-offsets table
    ParamStore params;
};

DeformationModel make_deformation_model(ModelKind kind, int steps, int hidden, int latent,
                                        int frames, std::uint32_t driving, std::uint64_t seed);

// Checkpoint: every parameter tensor plus optimizer buffers, with the model
// dimensions in the meta record. Pass a null optimizer to skip its state.
void save_model(const std::string& path, const DeformationModel& model, const Optimizer* optimizer,
                const OptimizerConfig* opt_config);
// Restores the model; when optimizer/opt_config are non-null and the file has
// optimizer state, both are restored too.
DeformationModel load_model(const std::string& path, Optimizer* optimizer,
                            OptimizerConfig* opt_config);

// Canonical extraction plus the recurrent per-frame rollout. Deforming only
// vertices that can influence the surface keeps results identical to a
// full-grid rollout: the influence sets shrink by one neighborhood ring per
// step, so every neighbor value a step reads was already updated by all
// earlier steps.
class MotionSystem {
public:
    MotionSystem(TetGrid canonical, ModelKind kind, int steps);

    const TetGrid& grid() const { return grid_; }
    const SurfaceMesh& canonical_mesh() const { return mesh_; }
    int steps() const { return steps_; }
    // Vertices whose motion moves the surface (crossing-edge endpoints),
    // ascending. The free-offsets table and the penalty term run over these.
    std::span<const std::uint32_t> driving_vertices() const { return sets_.front(); }

    struct FrameRoll {
        std::vector<Vec3Val> surface;  // per canonical-mesh vertex
        std::vector<Vec3Val> driving;  // per driving vertex, final positions
    };
    // Records frame t on the tape. Parameter blocks register on first use and
    // survive tape.reset(), so one tape serves many frames.
    FrameRoll roll_frame(Tape& tape, const DeformationModel& model, int t) const;

    // Same rollout without a tape; returns surface vertex positions.
    std::vector<Vec3> roll_frame_plain(const DeformationModel& model, int t) const;

private:
    TetGrid grid_;
    SurfaceMesh mesh_;
    ModelKind kind_;
    int steps_ = 1;
    std::vector<std::vector<std::uint32_t>> sets_;      // nested influence sets
    std::vector<std::uint32_t> slot_of_;                // grid vertex -> state slot, or kNoSlot
    std::vector<std::vector<std::uint32_t>> neighbors_; // per state slot, ascending grid ids
    static constexpr std::uint32_t kNoSlot = 0xffffffffu;
};

struct FitMotionConfig {
    ModelKind model = ModelKind::kGru;
    int steps = 0;  // 0 = pick by observation mode (3 full mesh, 2 otherwise)
    int hidden = 64;
    int latent = 16;
    int iterations = 150;
    std::size_t samples = 10000;
    LossWeights weights;
    OptimizerConfig optimizer;
    std::uint64_t seed = 1;
    bool squared_chamfer = true;
};

struct FitMotionResult {
    DeformationModel model;  // state with the lowest recorded loss
    SurfaceMesh canonical_mesh;
    std::vector<double> loss_trace;
    std::vector<double> best_trace;
    std::vector<std::vector<double>> frame_trace;  // [iteration][frame]
    double best_loss = 0.0;
    int best_iteration = -1;
    std::vector<std::vector<Vec3>> frame_positions;  // best model, surface verts per frame
};

// Fits one deformation model to the whole observation sequence. Frame losses:
//   full mesh: cd * chamfer(sampled prediction, sampled observed mesh)
//   slices:    cd * sum over planes of chamfer(predicted section, contour)
//              + reg * mean |v_final - v_canonical|^2 over driving vertices
//   volume:    vol * |normalized volume - observed| + same reg term
// A plane whose observed contour is empty is skipped; a nonempty contour with
// an empty predicted section adds a constant unit penalty. Gradients are
// reduced in frame order, so results do not depend on the thread count.
FitMotionResult fit_motion(const TetGrid& canonical, std::span<const Observation> sequence,
                           const FitMotionConfig& cfg);

struct GradcheckReport {
    double edge_crossing = 0.0;  // crossing formula vs central differences
    double pipeline = 0.0;       // field+offsets -> surface functional
    double networks = 0.0;       // dense/gru stacks
    double motion = 0.0;         // full motion loss wrt model parameters
    double worst() const;
};

// Finite-difference comparison across the differentiable stack.
GradcheckReport run_gradcheck(std::uint64_t seed);

}  // namespace tetfit
