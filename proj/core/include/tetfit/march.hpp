#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tetfit/common.hpp"
#include "tetfit/tape.hpp"
#include "tetfit/tetgrid.hpp"

namespace tetfit {

// Local tet edges in fixed order: 0:(0,1) 1:(0,2) 2:(0,3) 3:(1,2) 4:(1,3) 5:(2,3).
inline constexpr std::array<std::array<int, 2>, 6> kTetEdges = {{{0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}, {2, 3}}};

// Per sign pattern (bit i set iff value i negative): up to two triangles as
// edge-index triples, wound so normals face the non-negative side.
struct CaseEntry {
    int tri_count;
    std::array<std::array<int, 3>, 2> tris;
};
const std::array<CaseEntry, 16>& case_table();

// Bit i set iff sdf4[i] < 0 (zero counts as outside).
int classify_tet(const std::array<double, 4>& sdf4);

struct EdgeCrossing {
    Vec3 point;
    double t;
};
// Linear zero crossing on segment (va,sa)-(vb,sb); requires one strictly
// negative and one non-negative-free pairing, i.e. sa*sb < 0.
// t = sa/(sa-sb), point = va + t*(vb-va).
EdgeCrossing edge_crossing(const Vec3& va, const Vec3& vb, double sa, double sb);
// Tape-recorded variant; classification stays frozen, gradients flow through
// t into both endpoint positions and both field values.
Vec3Val edge_crossing_val(const Vec3Val& va, const Vec3Val& vb, const Val& sa, const Val& sb);

struct SurfaceVertexOrigin {
    std::uint32_t tet = 0;         // first tet that produced the crossing
    std::uint32_t va = 0, vb = 0;  // grid vertex ids, va < vb
    double t = 0.0;                // position = (1-t)*pos[va] + t*pos[vb]
};

struct SurfaceMesh {
    std::vector<Vec3> positions;
    std::vector<std::array<std::uint32_t, 3>> triangles;
    std::vector<SurfaceVertexOrigin> provenance;  // empty for imported meshes

    bool empty() const { return triangles.empty(); }
    bool has_provenance() const { return !positions.empty() && provenance.size() == positions.size(); }
};

// Zero-isosurface extraction. Crossing edges are deduplicated by their sorted
// grid-vertex pair so shared surface vertices are emitted once; vertices and
// triangles appear in tet-scan order.
SurfaceMesh marching_tetrahedra(const TetGrid& grid);

// Rebuild surface positions from provenance against externally supplied grid
// vertex positions (the motion path: field values frozen, vertices moving).
std::vector<Vec3> advect_surface(const SurfaceMesh& mesh, std::span<const Vec3> grid_positions);

// Tape-recorded advection. grid_position(i) must return the tracked position
// of grid vertex i for every vertex referenced by provenance.
std::vector<Vec3Val> advect_surface_vals(const SurfaceMesh& mesh,
                                         const std::function<Vec3Val(std::uint32_t)>& grid_position);

// A grid's degrees of freedom exposed on a tape for static fitting. Offsets
// are tracked as raw parameters; positions apply the saturating clamp, whose
// gradient is masked where saturation is active.
struct TrackedGrid {
    Tape* tape = nullptr;
    const TetGrid* grid = nullptr;
    std::span<const double> sdf_values;    // current field values
    std::span<const double> raw_offsets;   // size 3N when offsets tracked
    std::uint32_t sdf_first = Tape::kNone;
    std::uint32_t offset_first = Tape::kNone;

    Val sdf_val(std::uint32_t i) const;
    Vec3Val position_val(std::uint32_t i) const;
};
TrackedGrid track_grid(Tape& tape, const TetGrid& grid, std::span<const double> sdf_values,
                       std::span<const double> raw_offsets, bool track_sdf, bool track_offsets);

// Tracked surface positions for an extraction of the same grid state, one
// entry per mesh vertex, rebuilt through the crossing formulas.
std::vector<Vec3Val> lift_surface(const TrackedGrid& tg, const SurfaceMesh& mesh);

// Accumulate d(loss)/d(surface position) cotangents back into per-vertex sdf
// and offset gradients through the crossing formulas. Standalone adjoint with
// the same masking rules as the tape path.
void backward_surface(const SurfaceMesh& mesh, std::span<const Vec3> vertex_grads,
                      const TetGrid& grid, std::vector<double>& grad_sdf,
                      std::vector<Vec3>& grad_offsets);

// Wavefront OBJ, "v"/"f" records, 1-based indices. Import tolerates comments,
// blank lines, attribute suffixes (f a/b/c), and fan-triangulates polygons.
void save_obj(const std::string& path, const SurfaceMesh& mesh);
SurfaceMesh load_obj(const std::string& path);

}  // namespace tetfit
