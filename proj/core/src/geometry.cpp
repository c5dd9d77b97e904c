#include "tetfit/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <unordered_map>

#include "io_util.hpp"

namespace tetfit {

namespace {

constexpr std::uint32_t kNnLeaf = 8;
constexpr std::uint32_t kBvhLeaf = 4;

std::uint64_t edge_key(std::uint32_t a, std::uint32_t b) {
    if (a > b) std::swap(a, b);
    return (static_cast<std::uint64_t>(a) << 32) | b;
}

}  // namespace

NearestNeighborIndex::NearestNeighborIndex(std::vector<Vec3> points) : points_(std::move(points)) {
    if (points_.empty()) throw InvalidArgument("nearest-neighbor index over an empty point set");
    for (const Vec3& p : points_)
        if (!all_finite(p)) throw NumericError("nearest-neighbor index: non-finite point");
    order_.resize(points_.size());
    std::iota(order_.begin(), order_.end(), 0u);
    nodes_.reserve(2 * points_.size() / kNnLeaf + 2);
    nodes_.emplace_back();
    build(0, 0, static_cast<std::uint32_t>(points_.size()), 0);
}

void NearestNeighborIndex::build(std::uint32_t node, std::uint32_t begin, std::uint32_t end, int depth) {
    Vec3 lo = points_[order_[begin]], hi = lo;
    for (std::uint32_t k = begin + 1; k < end; ++k) {
        const Vec3& p = points_[order_[k]];
        for (int a = 0; a < 3; ++a) {
            lo[a] = std::min(lo[a], p[a]);
            hi[a] = std::max(hi[a], p[a]);
        }
    }
    for (int a = 0; a < 3; ++a) {
        nodes_[node].lo[a] = lo[a];
        nodes_[node].hi[a] = hi[a];
    }
    nodes_[node].begin = begin;
    nodes_[node].end = end;
    nodes_[node].left = 0;
    if (end - begin <= kNnLeaf || depth > 48) return;

    int axis = 0;
    for (int a = 1; a < 3; ++a)
        if (hi[a] - lo[a] > hi[axis] - lo[axis]) axis = a;
    std::uint32_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](std::uint32_t i, std::uint32_t j) {
                         double ci = points_[i][axis], cj = points_[j][axis];
                         return ci < cj || (ci == cj && i < j);
                     });
    std::uint32_t left = static_cast<std::uint32_t>(nodes_.size());
    nodes_[node].left = left;
    nodes_.emplace_back();
    nodes_.emplace_back();
    build(left, begin, mid, depth + 1);
    build(left + 1, mid, end, depth + 1);
}

namespace {

double box_dist2_of(const double lo[3], const double hi[3], const Vec3& q) {
    double d2 = 0.0;
    for (int a = 0; a < 3; ++a) {
        double v = q[a];
        double e = v < lo[a] ? lo[a] - v : (v > hi[a] ? v - hi[a] : 0.0);
        d2 += e * e;
    }
    return d2;
}

}  // namespace

std::uint32_t NearestNeighborIndex::nearest(const Vec3& q) const {
    double best_d2 = std::numeric_limits<double>::infinity();
    std::uint32_t best_idx = 0;
    // Equal box distance is never pruned, so equal-distance points with lower
    // index stay reachable.
    std::uint32_t stack[128];
    int top = 0;
    stack[top++] = 0;
    while (top > 0) {
        const Node& n = nodes_[stack[--top]];
        if (box_dist2_of(n.lo, n.hi, q) > best_d2) continue;
        if (n.left == 0) {
            for (std::uint32_t k = n.begin; k < n.end; ++k) {
                std::uint32_t idx = order_[k];
                double d2 = (points_[idx] - q).dot(points_[idx] - q);
                if (d2 < best_d2 || (d2 == best_d2 && idx < best_idx)) {
                    best_d2 = d2;
                    best_idx = idx;
                }
            }
        } else {
            double dl = box_dist2_of(nodes_[n.left].lo, nodes_[n.left].hi, q);
            double dr = box_dist2_of(nodes_[n.left + 1].lo, nodes_[n.left + 1].hi, q);
            if (dl <= dr) {
                stack[top++] = n.left + 1;
                stack[top++] = n.left;
            } else {
                stack[top++] = n.left;
                stack[top++] = n.left + 1;
            }
        }
    }
    return best_idx;
}

namespace {

Vec3 closest_on_segment(const Vec3& p, const Vec3& a, const Vec3& b) {
    Vec3 ab = b - a;
    double len2 = ab.dot(ab);
    if (len2 == 0.0) return a;
    double t = std::clamp((p - a).dot(ab) / len2, 0.0, 1.0);
    return a + ab * t;
}

}  // namespace

ClosestPointResult closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
    Vec3 ab = b - a, ac = c - a, ap = p - a;
    double d1 = ab.dot(ap), d2 = ac.dot(ap);
    Vec3 r;
    if (d1 <= 0.0 && d2 <= 0.0) {
        r = a;
    } else {
        Vec3 bp = p - b;
        double d3 = ab.dot(bp), d4 = ac.dot(bp);
        if (d3 >= 0.0 && d4 <= d3) {
            r = b;
        } else {
            double vc = d1 * d4 - d3 * d2;
            if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {
                r = a + ab * (d1 / (d1 - d3));
            } else {
                Vec3 cp = p - c;
                double d5 = ab.dot(cp), d6 = ac.dot(cp);
                if (d6 >= 0.0 && d5 <= d6) {
                    r = c;
                } else {
                    double vb = d5 * d2 - d1 * d6;
                    if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {
                        r = a + ac * (d2 / (d2 - d6));
                    } else {
                        double va = d3 * d6 - d5 * d4;
                        if (va <= 0.0 && d4 - d3 >= 0.0 && d5 - d6 >= 0.0) {
                            r = b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
                        } else {
                            double sum = va + vb + vc;
                            if (sum > 0.0) {
                                double v = vb / sum, w = vc / sum;
                                r = a + ab * v + ac * w;
                            } else {
                                // Sliver triangle: the face interior collapses.
                                Vec3 e0 = closest_on_segment(p, a, b);
                                Vec3 e1 = closest_on_segment(p, a, c);
                                Vec3 e2 = closest_on_segment(p, b, c);
                                r = e0;
                                if ((e1 - p).dot(e1 - p) < (r - p).dot(r - p)) r = e1;
                                if ((e2 - p).dot(e2 - p) < (r - p).dot(r - p)) r = e2;
                            }
                        }
                    }
                }
            }
        }
    }
    return {r, (r - p).dot(r - p)};
}

double winding_number(const SurfaceMesh& mesh, const Vec3& q) {
    double total = 0.0;
    for (const auto& tri : mesh.triangles) {
        Vec3 a = mesh.positions[tri[0]] - q;
        Vec3 b = mesh.positions[tri[1]] - q;
        Vec3 c = mesh.positions[tri[2]] - q;
        double la = a.norm(), lb = b.norm(), lc = c.norm();
        if (la == 0.0 || lb == 0.0 || lc == 0.0)
            throw ContractViolation("winding number query coincides with a mesh vertex");
        double det = a.dot(b.cross(c));
        double denom = la * lb * lc + a.dot(b) * lc + b.dot(c) * la + c.dot(a) * lb;
        if (det == 0.0 && denom <= 0.0)
            throw ContractViolation("winding number query lies on the mesh surface");
        total += 2.0 * std::atan2(det, denom);
    }
    return total / (4.0 * std::numbers::pi);
}

bool mesh_is_closed(const SurfaceMesh& mesh) {
    if (mesh.triangles.empty()) return false;
    std::unordered_map<std::uint64_t, std::pair<int, int>> edges;
    edges.reserve(mesh.triangles.size() * 3);
    for (const auto& tri : mesh.triangles) {
        for (int k = 0; k < 3; ++k) {
            std::uint32_t a = tri[k], b = tri[(k + 1) % 3];
            if (a == b) return false;
            auto& e = edges[edge_key(a, b)];
            (a < b ? e.first : e.second) += 1;
        }
    }
    for (const auto& [key, e] : edges)
        if (e.first != 1 || e.second != 1) return false;
    return true;
}

long euler_characteristic(const SurfaceMesh& mesh) {
    std::unordered_map<std::uint64_t, int> edges;
    edges.reserve(mesh.triangles.size() * 3);
    for (const auto& tri : mesh.triangles)
        for (int k = 0; k < 3; ++k) edges[edge_key(tri[k], tri[(k + 1) % 3])] = 1;
    return static_cast<long>(mesh.positions.size()) - static_cast<long>(edges.size()) +
           static_cast<long>(mesh.triangles.size());
}

MeshDistanceQuery::MeshDistanceQuery(const SurfaceMesh& mesh) : mesh_(mesh) {
    if (mesh.triangles.empty()) throw InvalidArgument("distance query over an empty mesh");
    std::size_t tc = mesh.triangles.size();
    order_.resize(tc);
    std::iota(order_.begin(), order_.end(), 0u);
    centroids_.resize(tc);
    for (std::size_t t = 0; t < tc; ++t) {
        const auto& tri = mesh.triangles[t];
        centroids_[t] = (mesh.positions[tri[0]] + mesh.positions[tri[1]] + mesh.positions[tri[2]]) / 3.0;
    }
    nodes_.reserve(2 * tc / kBvhLeaf + 2);
    nodes_.emplace_back();
    build(0, 0, static_cast<std::uint32_t>(tc));
    closed_ = mesh_is_closed(mesh);
}

void MeshDistanceQuery::build(std::uint32_t node, std::uint32_t begin, std::uint32_t end) {
    Vec3 lo{1e300, 1e300, 1e300}, hi{-1e300, -1e300, -1e300};
    for (std::uint32_t k = begin; k < end; ++k) {
        const auto& tri = mesh_.triangles[order_[k]];
        for (int v = 0; v < 3; ++v) {
            const Vec3& p = mesh_.positions[tri[v]];
            for (int a = 0; a < 3; ++a) {
                lo[a] = std::min(lo[a], p[a]);
                hi[a] = std::max(hi[a], p[a]);
            }
        }
    }
    nodes_[node].lo = lo;
    nodes_[node].hi = hi;
    nodes_[node].begin = begin;
    nodes_[node].end = end;
    nodes_[node].left = 0;
    if (end - begin <= kBvhLeaf) return;

    int axis = 0;
    for (int a = 1; a < 3; ++a)
        if (hi[a] - lo[a] > hi[axis] - lo[axis]) axis = a;
    std::uint32_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](std::uint32_t i, std::uint32_t j) {
                         double ci = centroids_[i][axis], cj = centroids_[j][axis];
                         return ci < cj || (ci == cj && i < j);
                     });
    std::uint32_t left = static_cast<std::uint32_t>(nodes_.size());
    nodes_[node].left = left;
    nodes_.emplace_back();
    nodes_.emplace_back();
    build(left, begin, mid);
    build(left + 1, mid, end);
}

double MeshDistanceQuery::box_dist2(const Node& n, const Vec3& q) const {
    double d2 = 0.0;
    for (int a = 0; a < 3; ++a) {
        double v = q[a];
        double e = v < n.lo[a] ? n.lo[a] - v : (v > n.hi[a] ? v - n.hi[a] : 0.0);
        d2 += e * e;
    }
    return d2;
}

double MeshDistanceQuery::unsigned_distance(const Vec3& q) const {
    double best = std::numeric_limits<double>::infinity();
    std::uint32_t stack[128];
    int top = 0;
    stack[top++] = 0;
    while (top > 0) {
        const Node& n = nodes_[stack[--top]];
        if (box_dist2(n, q) >= best) continue;
        if (n.left == 0) {
            for (std::uint32_t k = n.begin; k < n.end; ++k) {
                const auto& tri = mesh_.triangles[order_[k]];
                ClosestPointResult r = closest_point_on_triangle(
                    q, mesh_.positions[tri[0]], mesh_.positions[tri[1]], mesh_.positions[tri[2]]);
                best = std::min(best, r.dist2);
            }
        } else {
            double dl = box_dist2(nodes_[n.left], q);
            double dr = box_dist2(nodes_[n.left + 1], q);
            if (dl <= dr) {
                stack[top++] = n.left + 1;
                stack[top++] = n.left;
            } else {
                stack[top++] = n.left;
                stack[top++] = n.left + 1;
            }
        }
    }
    return std::sqrt(best);
}

double MeshDistanceQuery::winding(const Vec3& q) const { return winding_number(mesh_, q); }

double MeshDistanceQuery::signed_distance(const Vec3& q) const {
    double d = unsigned_distance(q);
    if (!closed_) return d;
    if (d == 0.0) return 0.0;
    return winding(q) > 0.5 ? -d : d;
}

double signed_distance(const SurfaceMesh& mesh, const Vec3& q) {
    return MeshDistanceQuery(mesh).signed_distance(q);
}

std::vector<SurfaceSample> sample_surface(const SurfaceMesh& mesh, std::size_t count, std::uint64_t seed) {
    std::size_t tc = mesh.triangles.size();
    std::vector<double> cum(tc);
    double total = 0.0;
    for (std::size_t t = 0; t < tc; ++t) {
        const auto& tri = mesh.triangles[t];
        Vec3 ab = mesh.positions[tri[1]] - mesh.positions[tri[0]];
        Vec3 ac = mesh.positions[tri[2]] - mesh.positions[tri[0]];
        total += 0.5 * ab.cross(ac).norm();
        cum[t] = total;
    }
    if (!(total > 0.0)) throw InvalidArgument("surface sampling over a zero-area mesh");

    Rng rng(seed);
    std::vector<SurfaceSample> out;
    out.reserve(count);
    for (std::size_t s = 0; s < count; ++s) {
        double u = rng.uniform01() * total;
        std::size_t idx = static_cast<std::size_t>(std::upper_bound(cum.begin(), cum.end(), u) - cum.begin());
        if (idx >= tc) idx = tc - 1;
        double su = std::sqrt(rng.uniform01());
        double r2 = rng.uniform01();
        double b0 = 1.0 - su, b1 = su * (1.0 - r2), b2 = su * r2;
        const auto& tri = mesh.triangles[idx];
        Vec3 p = mesh.positions[tri[0]] * b0 + mesh.positions[tri[1]] * b1 + mesh.positions[tri[2]] * b2;
        out.push_back({p, static_cast<std::uint32_t>(idx), {b0, b1, b2}});
    }
    return out;
}

namespace {

// Fixed-weight blend of up to three tracked scalars as one node; constants
// contribute value only.
Val blend3(const Val& a, const Val& b, const Val& c, double wa, double wb, double wc) {
    double v = wa * a.v + wb * b.v + wc * c.v;
    const Val* vs[3] = {&a, &b, &c};
    double ws[3] = {wa, wb, wc};
    Tape* tape = nullptr;
    for (const Val* x : vs)
        if (!x->is_const()) tape = x->t;
    if (tape == nullptr) return Val(v);
    std::uint32_t parents[3];
    double partials[3];
    std::size_t n = 0;
    for (int k = 0; k < 3; ++k) {
        if (!vs[k]->is_const()) {
            parents[n] = vs[k]->i;
            partials[n] = ws[k];
            ++n;
        }
    }
    return tape->nary(v, {parents, n}, {partials, n});
}

}  // namespace

std::vector<Vec3Val> lift_samples(std::span<const SurfaceSample> samples,
                                  const SurfaceMesh& mesh, std::span<const Vec3Val> vertex_vals) {
    TETFIT_CHECK(vertex_vals.size() == mesh.positions.size(),
                 "sample lift needs one tracked position per mesh vertex");
    std::vector<Vec3Val> out;
    out.reserve(samples.size());
    for (const SurfaceSample& s : samples) {
        const auto& tri = mesh.triangles[s.triangle];
        const Vec3Val& a = vertex_vals[tri[0]];
        const Vec3Val& b = vertex_vals[tri[1]];
        const Vec3Val& c = vertex_vals[tri[2]];
        out.emplace_back(blend3(a.x, b.x, c.x, s.bary[0], s.bary[1], s.bary[2]),
                         blend3(a.y, b.y, c.y, s.bary[0], s.bary[1], s.bary[2]),
                         blend3(a.z, b.z, c.z, s.bary[0], s.bary[1], s.bary[2]));
    }
    return out;
}

namespace {

// Plane side value; zero counts as the positive side, so a vertex on the
// plane never starts a crossing.
inline bool plane_negative(double s) { return s < 0.0; }

constexpr int kTriEdge[3][2] = {{0, 1}, {1, 2}, {2, 0}};

}  // namespace

std::vector<Vec3> plane_section(const SurfaceMesh& mesh, const PlaneSpec& plane) {
    std::vector<Vec3> out;
    double nn = plane.n.dot(plane.n);
    if (!(nn > 0.0)) throw InvalidArgument("plane normal must be nonzero");
    std::vector<double> side(mesh.positions.size());
    for (std::size_t i = 0; i < mesh.positions.size(); ++i)
        side[i] = plane.n.dot(mesh.positions[i]) - plane.d;
    for (const auto& tri : mesh.triangles) {
        Vec3 pts[2];
        int np = 0;
        for (const auto& e : kTriEdge) {
            std::uint32_t a = tri[e[0]], b = tri[e[1]];
            double sa = side[a], sb = side[b];
            if (plane_negative(sa) == plane_negative(sb)) continue;
            double t = sa / (sa - sb);
            Vec3 p = mesh.positions[a] + (mesh.positions[b] - mesh.positions[a]) * t;
            p = p - plane.n * ((plane.n.dot(p) - plane.d) / nn);
            if (np < 2) pts[np] = p;
            ++np;
        }
        if (np != 2) continue;
        out.push_back(pts[0]);
        out.push_back(pts[1]);
        out.push_back((pts[0] + pts[1]) * 0.5);
    }
    return out;
}

std::vector<Vec3Val> plane_section_vals(const SurfaceMesh& mesh, std::span<const Vec3Val> vertex_vals,
                                        const PlaneSpec& plane) {
    TETFIT_CHECK(vertex_vals.size() == mesh.positions.size(),
                 "plane section needs one tracked position per mesh vertex");
    double nn = plane.n.dot(plane.n);
    if (!(nn > 0.0)) throw InvalidArgument("plane normal must be nonzero");
    std::vector<Val> side;
    side.reserve(vertex_vals.size());
    for (const Vec3Val& p : vertex_vals)
        side.push_back(blend3(p.x, p.y, p.z, plane.n.x, plane.n.y, plane.n.z) - Val(plane.d));

    std::vector<Vec3Val> out;
    for (const auto& tri : mesh.triangles) {
        Vec3Val pts[2];
        int np = 0;
        for (const auto& e : kTriEdge) {
            std::uint32_t a = tri[e[0]], b = tri[e[1]];
            const Val& sa = side[a];
            const Val& sb = side[b];
            if (plane_negative(sa.v) == plane_negative(sb.v)) continue;
            Val t = sa / (sa - sb);
            const Vec3Val& pa = vertex_vals[a];
            const Vec3Val& pb = vertex_vals[b];
            Vec3Val p(pa.x + (pb.x - pa.x) * t, pa.y + (pb.y - pa.y) * t, pa.z + (pb.z - pa.z) * t);
            if (np < 2) pts[np] = p;
            ++np;
        }
        if (np != 2) continue;
        out.push_back(pts[0]);
        out.push_back(pts[1]);
        out.emplace_back(val_axpby(0.5, pts[0].x, 0.5, pts[1].x),
                         val_axpby(0.5, pts[0].y, 0.5, pts[1].y),
                         val_axpby(0.5, pts[0].z, 0.5, pts[1].z));
    }
    return out;
}

double enclosed_volume(const SurfaceMesh& mesh) {
    double six_vol = 0.0;
    for (const auto& tri : mesh.triangles) {
        const Vec3& a = mesh.positions[tri[0]];
        const Vec3& b = mesh.positions[tri[1]];
        const Vec3& c = mesh.positions[tri[2]];
        six_vol += a.dot(b.cross(c));
    }
    return six_vol / 6.0;
}

double normalized_volume(const SurfaceMesh& mesh) { return enclosed_volume(mesh) / 8.0; }

Val normalized_volume_val(const SurfaceMesh& mesh, std::span<const Vec3Val> vertex_vals) {
    TETFIT_CHECK(vertex_vals.size() == mesh.positions.size(),
                 "volume needs one tracked position per mesh vertex");
    std::vector<Val> dets;
    dets.reserve(mesh.triangles.size());
    for (const auto& tri : mesh.triangles)
        dets.push_back(val_det3(vertex_vals[tri[0]], vertex_vals[tri[1]], vertex_vals[tri[2]]));
    return val_sum(dets) * (1.0 / 48.0);
}

void save_contours_csv(const std::string& path, std::span<const std::vector<Vec3>> per_plane_points) {
    std::string out = "x,y,z,plane_id\n";
    for (std::size_t plane = 0; plane < per_plane_points.size(); ++plane) {
        for (const Vec3& p : per_plane_points[plane]) {
            out += ioutil::format_double(p.x);
            out += ',';
            out += ioutil::format_double(p.y);
            out += ',';
            out += ioutil::format_double(p.z);
            out += ',';
            out += std::to_string(plane);
            out += '\n';
        }
    }
    ioutil::write_text_file(path, out);
}

std::vector<std::vector<Vec3>> load_contours_csv(const std::string& path) {
    std::string text = ioutil::read_text_file(path);
    std::vector<std::vector<Vec3>> out;
    std::size_t pos = 0;
    long line_no = 0;
    bool saw_header = false;
    while (pos < text.size()) {
        std::size_t eol = text.find('\n', pos);
        if (eol == std::string::npos) eol = text.size();
        std::string line = text.substr(pos, eol - pos);
        pos = eol + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (!saw_header) {
            if (line != "x,y,z,plane_id")
                throw IoError(path + ":" + std::to_string(line_no) + ": expected contour header");
            saw_header = true;
            continue;
        }
        double x, y, z;
        long plane;
        if (std::sscanf(line.c_str(), "%lf,%lf,%lf,%ld", &x, &y, &z, &plane) != 4 || plane < 0)
            throw IoError(path + ":" + std::to_string(line_no) + ": malformed contour row");
        if (static_cast<std::size_t>(plane) >= out.size()) out.resize(static_cast<std::size_t>(plane) + 1);
        out[static_cast<std::size_t>(plane)].push_back({x, y, z});
    }
    if (!saw_header) throw IoError(path + ": missing contour header");
    return out;
}

}  // namespace tetfit
