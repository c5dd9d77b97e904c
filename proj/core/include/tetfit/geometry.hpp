#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tetfit/common.hpp"
#include "tetfit/march.hpp"
#include "tetfit/tape.hpp"

namespace tetfit {

// Exact nearest neighbor over a fixed point set; ties broken by lowest index.
class NearestNeighborIndex {
public:
    explicit NearestNeighborIndex(std::vector<Vec3> points);

    std::size_t size() const { return points_.size(); }
    const Vec3& point(std::size_t i) const { return points_[i]; }
    // Index of the nearest point under (distance, index) lexicographic order.
    std::uint32_t nearest(const Vec3& q) const;

private:
    struct Node {
        double lo[3], hi[3];
        std::uint32_t begin, end;    // leaf range into order_
        std::uint32_t left = 0;      // 0 = leaf (right = left + 1 otherwise)
    };
    void build(std::uint32_t node, std::uint32_t begin, std::uint32_t end, int depth);

    std::vector<Vec3> points_;
    std::vector<std::uint32_t> order_;
    std::vector<Node> nodes_;
};

struct ClosestPointResult {
    Vec3 point;
    double dist2;
};
// Exact closest point on a triangle.
ClosestPointResult closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c);

// Solid-angle sum over all triangles divided by 4*pi. Near 1 inside a closed
// mesh, near 0 outside. Query must not lie on the surface.
double winding_number(const SurfaceMesh& mesh, const Vec3& q);

// Edge-manifold closure: every undirected edge borders exactly two triangles,
// once per direction.
bool mesh_is_closed(const SurfaceMesh& mesh);
// V - E + F over the triangle soup.
long euler_characteristic(const SurfaceMesh& mesh);

// Distance/side queries against one mesh; builds a triangle BVH once. Holds a
// reference, so the mesh must outlive the query object. Closedness is checked
// at construction: open meshes answer unsigned distances and flag it.
class MeshDistanceQuery {
public:
    explicit MeshDistanceQuery(const SurfaceMesh& mesh);

    double unsigned_distance(const Vec3& q) const;
    // Negative inside (winding > 0.5). Falls back to unsigned when the mesh
    // is open; consult signed_ok().
    double signed_distance(const Vec3& q) const;
    bool signed_ok() const { return closed_; }
    double winding(const Vec3& q) const;

private:
    struct Node {
        Vec3 lo, hi;
        std::uint32_t begin, end;
        std::uint32_t left = 0;
    };
    void build(std::uint32_t node, std::uint32_t begin, std::uint32_t end);
    double box_dist2(const Node& n, const Vec3& q) const;

    const SurfaceMesh& mesh_;
    std::vector<std::uint32_t> order_;
    std::vector<Vec3> centroids_;
    std::vector<Node> nodes_;
    bool closed_ = false;
};

// Convenience wrapper: exact distance with winding-number sign. Builds a
// throwaway query object.
double signed_distance(const SurfaceMesh& mesh, const Vec3& q);

struct SurfaceSample {
    Vec3 point;
    std::uint32_t triangle;
    double bary[3];
};
// Area-weighted i.i.d. samples; deterministic in seed. Zero-area meshes are
// rejected.
std::vector<SurfaceSample> sample_surface(const SurfaceMesh& mesh, std::size_t count, std::uint64_t seed);

// Tracked positions of samples taken on a mesh whose vertices are themselves
// tracked: each sample is the fixed barycentric blend of its triangle.
std::vector<Vec3Val> lift_samples(std::span<const SurfaceSample> samples,
                                  const SurfaceMesh& mesh, std::span<const Vec3Val> vertex_vals);

struct PlaneSpec {
    Vec3 n;    // unit normal
    double d;  // plane: dot(n, p) = d
};

// For each triangle crossing the plane: the two edge intersections and their
// midpoint. Vertices exactly on the plane count as the positive side, so
// tangency produces nothing.
std::vector<Vec3> plane_section(const SurfaceMesh& mesh, const PlaneSpec& plane);

// Tracked variant over tracked vertex positions (same crossing set as the
// values currently held by vertex_vals).
std::vector<Vec3Val> plane_section_vals(const SurfaceMesh& mesh, std::span<const Vec3Val> vertex_vals,
                                        const PlaneSpec& plane);

// Divergence-theorem volume; positive for outward-oriented closed meshes.
double enclosed_volume(const SurfaceMesh& mesh);
// enclosed_volume / 8 (the domain cube's volume).
double normalized_volume(const SurfaceMesh& mesh);
// Tracked normalized volume over tracked vertex positions.
Val normalized_volume_val(const SurfaceMesh& mesh, std::span<const Vec3Val> vertex_vals);

// Contour CSV: header x,y,z,plane_id then one row per point.
void save_contours_csv(const std::string& path, std::span<const std::vector<Vec3>> per_plane_points);
// Returns per-plane point lists (plane ids must be 0..K-1).
std::vector<std::vector<Vec3>> load_contours_csv(const std::string& path);

}  // namespace tetfit
