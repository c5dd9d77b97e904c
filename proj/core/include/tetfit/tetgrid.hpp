#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tetfit/common.hpp"

namespace tetfit {

// Deformable tetrahedral lattice over [-1,1]^3. Each cube cell is split into
// the 6 tets sharing the cell's main diagonal, so neighboring cells tile
// face-to-face. Vertices carry a rest position, a clamped displacement, and a
// scalar field value (negative = inside; exact zero counts as outside).
struct TetGrid {
    int resolution = 0;
    std::vector<Vec3> rest_positions;
    std::vector<Vec3> offsets;  // stored pre-clamped: |component| <= clamp_bound()
    std::vector<double> sdf;
    std::vector<std::array<std::uint32_t, 4>> tets;

    std::size_t vertex_count() const { return rest_positions.size(); }
    double cell_edge() const { return 2.0 / resolution; }
    // Half a cell edge per component.
    double clamp_bound() const { return 1.0 / resolution; }
    Vec3 position(std::size_t i) const { return rest_positions[i] + offsets[i]; }
    std::vector<Vec3> positions() const;

    std::uint32_t vertex_index(int x, int y, int z) const;
};

TetGrid build_uniform_grid(int resolution);

// vertices = rest + clamp(offsets), component-wise saturation at the bound.
// The stored offsets are the clamped values.
void apply_offsets(TetGrid& grid, const std::vector<Vec3>& offsets);

void set_sdf_from_field(TetGrid& grid, const std::function<double(const Vec3&)>& field);

double tet_signed_volume(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d);

// Structural invariants: counts, rest orientation, finiteness, clamp bound.
// Throws ContractViolation on failure.
void validate_grid(const TetGrid& grid);

// Tets whose signed volume at current positions is <= 0. Offsets can legally
// produce these; callers that care report the count.
std::size_t count_inverted_tets(const TetGrid& grid);

// Binary container (versioned header + flat little-endian arrays) plus a JSON
// sidecar at path + ".json".
void save_grid(const std::string& path, const TetGrid& grid);
TetGrid load_grid(const std::string& path);

}  // namespace tetfit
