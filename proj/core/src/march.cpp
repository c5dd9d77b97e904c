#include "tetfit/march.hpp"

#include <cmath>
#include <limits>
#include <cstring>
#include <unordered_map>

#include "io_util.hpp"

namespace tetfit {

const std::array<CaseEntry, 16>& case_table() {
    // Single-negative patterns fan the three edges at the negative corner;
    // their complements reverse the winding. Two-negative patterns cut a quad,
    // split along a fixed diagonal. All windings face the non-negative side.
    static const std::array<CaseEntry, 16> table = {{
        /* 0 */ {0, {{{-1, -1, -1}, {-1, -1, -1}}}},
        /* 1 */ {1, {{{0, 1, 2}, {-1, -1, -1}}}},
        /* 2 */ {1, {{{0, 4, 3}, {-1, -1, -1}}}},
        /* 3 */ {2, {{{1, 2, 4}, {1, 4, 3}}}},
        /* 4 */ {1, {{{1, 3, 5}, {-1, -1, -1}}}},
        /* 5 */ {2, {{{2, 0, 3}, {2, 3, 5}}}},
        /* 6 */ {2, {{{0, 4, 5}, {0, 5, 1}}}},
        /* 7 */ {1, {{{2, 4, 5}, {-1, -1, -1}}}},
        /* 8 */ {1, {{{2, 5, 4}, {-1, -1, -1}}}},
        /* 9 */ {2, {{{0, 1, 5}, {0, 5, 4}}}},
        /*10 */ {2, {{{3, 0, 2}, {3, 2, 5}}}},
        /*11 */ {1, {{{1, 5, 3}, {-1, -1, -1}}}},
        /*12 */ {2, {{{1, 3, 4}, {1, 4, 2}}}},
        /*13 */ {1, {{{0, 3, 4}, {-1, -1, -1}}}},
        /*14 */ {1, {{{0, 2, 1}, {-1, -1, -1}}}},
        /*15 */ {0, {{{-1, -1, -1}, {-1, -1, -1}}}},
    }};
    return table;
}

int classify_tet(const std::array<double, 4>& sdf4) {
    int c = 0;
    for (int i = 0; i < 4; ++i) {
        if (!std::isfinite(sdf4[static_cast<std::size_t>(i)])) throw NumericError("non-finite sdf in classify");
        if (sdf4[static_cast<std::size_t>(i)] < 0.0) c |= 1 << i;
    }
    return c;
}

EdgeCrossing edge_crossing(const Vec3& va, const Vec3& vb, double sa, double sb) {
    if (!(sa * sb < 0.0)) throw ContractViolation("edge_crossing requires strictly opposite signs");
    double t = sa / (sa - sb);
    return {va + (vb - va) * t, t};
}

Vec3Val edge_crossing_val(const Vec3Val& va, const Vec3Val& vb, const Val& sa, const Val& sb) {
    if (!(sa.v * sb.v < 0.0)) throw ContractViolation("edge_crossing requires strictly opposite signs");
    double denom = sa.v - sb.v;
    double tv = sa.v / denom;
    Tape* tape = detail::common_tape(sa, sb);
    Val t;
    if (!tape) {
        t = Val(tv);
    } else {
        double dsa = -sb.v / (denom * denom);
        double dsb = sa.v / (denom * denom);
        if (sa.is_const())
            t = tape->unary(tv, sb.i, dsb);
        else if (sb.is_const())
            t = tape->unary(tv, sa.i, dsa);
        else
            t = tape->binary(tv, sa.i, dsa, sb.i, dsb);
    }
    Vec3Val p;
    p.x = va.x + t * (vb.x - va.x);
    p.y = va.y + t * (vb.y - va.y);
    p.z = va.z + t * (vb.z - va.z);
    return p;
}

namespace {
inline std::uint64_t edge_key(std::uint32_t a, std::uint32_t b) {
    return (static_cast<std::uint64_t>(a) << 32) | b;
}

// An exactly-zero field value classifies as outside. Interpolating against it
// needs a positive stand-in so the crossing keeps strictly opposite signs;
// the crossing then collapses onto the zero-valued vertex.
inline double nonzero_sdf(double s) {
    return s == 0.0 ? std::numeric_limits<double>::min() : s;
}

inline Val nonzero_sdf_val(Val s) {
    if (s.v == 0.0) s.v = std::numeric_limits<double>::min();
    return s;
}
}  // namespace

SurfaceMesh marching_tetrahedra(const TetGrid& grid) {
    const auto& table = case_table();
    SurfaceMesh mesh;
    std::unordered_map<std::uint64_t, std::uint32_t> edge_to_vertex;
    edge_to_vertex.reserve(1024);
    std::vector<Vec3> pos = grid.positions();

    for (std::size_t ti = 0; ti < grid.tets.size(); ++ti) {
        const auto& tet = grid.tets[ti];
        std::array<double, 4> s4 = {grid.sdf[tet[0]], grid.sdf[tet[1]], grid.sdf[tet[2]], grid.sdf[tet[3]]};
        int c = classify_tet(s4);
        const CaseEntry& entry = table[static_cast<std::size_t>(c)];
        for (int k = 0; k < entry.tri_count; ++k) {
            std::array<std::uint32_t, 3> out_tri;
            for (int j = 0; j < 3; ++j) {
                int e = entry.tris[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)];
                std::uint32_t ga = tet[static_cast<std::size_t>(kTetEdges[static_cast<std::size_t>(e)][0])];
                std::uint32_t gb = tet[static_cast<std::size_t>(kTetEdges[static_cast<std::size_t>(e)][1])];
                if (ga > gb) std::swap(ga, gb);
                auto [it, inserted] = edge_to_vertex.try_emplace(edge_key(ga, gb),
                                                                static_cast<std::uint32_t>(mesh.positions.size()));
                if (inserted) {
                    EdgeCrossing ec = edge_crossing(pos[ga], pos[gb], nonzero_sdf(grid.sdf[ga]),
                                                    nonzero_sdf(grid.sdf[gb]));
                    mesh.positions.push_back(ec.point);
                    mesh.provenance.push_back({static_cast<std::uint32_t>(ti), ga, gb, ec.t});
                }
                out_tri[static_cast<std::size_t>(j)] = it->second;
            }
            mesh.triangles.push_back(out_tri);
        }
    }
    return mesh;
}

std::vector<Vec3> advect_surface(const SurfaceMesh& mesh, std::span<const Vec3> grid_positions) {
    TETFIT_CHECK(mesh.has_provenance() || mesh.positions.empty(), "advect requires provenance");
    std::vector<Vec3> out(mesh.positions.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const SurfaceVertexOrigin& o = mesh.provenance[i];
        out[i] = grid_positions[o.va] * (1.0 - o.t) + grid_positions[o.vb] * o.t;
    }
    return out;
}

std::vector<Vec3Val> advect_surface_vals(const SurfaceMesh& mesh,
                                         const std::function<Vec3Val(std::uint32_t)>& grid_position) {
    TETFIT_CHECK(mesh.has_provenance() || mesh.positions.empty(), "advect requires provenance");
    std::unordered_map<std::uint32_t, Vec3Val> cache;
    cache.reserve(mesh.positions.size());
    auto lookup = [&](std::uint32_t g) -> const Vec3Val& {
        auto it = cache.find(g);
        if (it == cache.end()) it = cache.emplace(g, grid_position(g)).first;
        return it->second;
    };
    std::vector<Vec3Val> out(mesh.positions.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const SurfaceVertexOrigin& o = mesh.provenance[i];
        const Vec3Val& a = lookup(o.va);
        const Vec3Val& b = lookup(o.vb);
        double wa = 1.0 - o.t, wb = o.t;
        out[i] = {val_axpby(wa, a.x, wb, b.x), val_axpby(wa, a.y, wb, b.y), val_axpby(wa, a.z, wb, b.z)};
    }
    return out;
}

TrackedGrid track_grid(Tape& tape, const TetGrid& grid, std::span<const double> sdf_values,
                       std::span<const double> raw_offsets, bool track_sdf, bool track_offsets) {
    TETFIT_CHECK(sdf_values.size() == grid.vertex_count(), "sdf span size mismatch");
    TrackedGrid tg;
    tg.tape = &tape;
    tg.grid = &grid;
    tg.sdf_values = sdf_values;
    tg.raw_offsets = raw_offsets;
    if (track_sdf) tg.sdf_first = tape.leaves(sdf_values);
    if (track_offsets) {
        TETFIT_CHECK(raw_offsets.size() == 3 * grid.vertex_count(), "offset span size mismatch");
        tg.offset_first = tape.leaves(raw_offsets);
    }
    return tg;
}

Val TrackedGrid::sdf_val(std::uint32_t i) const {
    double v = sdf_values[i];
    if (sdf_first == Tape::kNone) return {v};
    return {v, sdf_first + i, tape};
}

Vec3Val TrackedGrid::position_val(std::uint32_t i) const {
    const Vec3& rest = grid->rest_positions[i];
    double b = grid->clamp_bound();
    if (offset_first == Tape::kNone) {
        Vec3 p = grid->position(i);
        return Vec3Val{p};
    }
    Vec3Val out;
    Val* comps[3] = {&out.x, &out.y, &out.z};
    for (int c = 0; c < 3; ++c) {
        double raw = raw_offsets[3 * i + static_cast<std::uint32_t>(c)];
        Val leaf{raw, offset_first + 3 * i + static_cast<std::uint32_t>(c), tape};
        *comps[c] = val_clamp(leaf, -b, b) + rest[c];
    }
    return out;
}

std::vector<Vec3Val> lift_surface(const TrackedGrid& tg, const SurfaceMesh& mesh) {
    TETFIT_CHECK(mesh.has_provenance() || mesh.positions.empty(), "lift requires provenance");
    std::unordered_map<std::uint32_t, Vec3Val> cache;
    cache.reserve(mesh.positions.size());
    auto lookup = [&](std::uint32_t g) -> const Vec3Val& {
        auto it = cache.find(g);
        if (it == cache.end()) it = cache.emplace(g, tg.position_val(g)).first;
        return it->second;
    };
    std::vector<Vec3Val> out(mesh.positions.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const SurfaceVertexOrigin& o = mesh.provenance[i];
        out[i] = edge_crossing_val(lookup(o.va), lookup(o.vb), nonzero_sdf_val(tg.sdf_val(o.va)),
                                   nonzero_sdf_val(tg.sdf_val(o.vb)));
    }
    return out;
}

void backward_surface(const SurfaceMesh& mesh, std::span<const Vec3> vertex_grads,
                      const TetGrid& grid, std::vector<double>& grad_sdf,
                      std::vector<Vec3>& grad_offsets) {
    if (!mesh.has_provenance() && !mesh.positions.empty())
        throw ContractViolation("backward_surface requires provenance");
    TETFIT_CHECK(vertex_grads.size() == mesh.positions.size(), "cotangent count mismatch");
    grad_sdf.assign(grid.vertex_count(), 0.0);
    grad_offsets.assign(grid.vertex_count(), Vec3{});
    double bound = grid.clamp_bound();
    for (std::size_t i = 0; i < mesh.positions.size(); ++i) {
        const SurfaceVertexOrigin& o = mesh.provenance[i];
        const Vec3& g = vertex_grads[i];
        Vec3 pa = grid.position(o.va), pb = grid.position(o.vb);
        double sa = nonzero_sdf(grid.sdf[o.va]), sb = nonzero_sdf(grid.sdf[o.vb]);
        double denom = sa - sb;
        double gt = dot(g, pb - pa);
        grad_sdf[o.va] += gt * (-sb) / (denom * denom);
        grad_sdf[o.vb] += gt * sa / (denom * denom);
        for (int c = 0; c < 3; ++c) {
            double ma = std::fabs(grid.offsets[o.va][c]) < bound ? 1.0 : 0.0;
            double mb = std::fabs(grid.offsets[o.vb][c]) < bound ? 1.0 : 0.0;
            grad_offsets[o.va][c] += g[c] * (1.0 - o.t) * ma;
            grad_offsets[o.vb][c] += g[c] * o.t * mb;
        }
    }
}

void save_obj(const std::string& path, const SurfaceMesh& mesh) {
    std::string out;
    out.reserve(mesh.positions.size() * 48 + mesh.triangles.size() * 24);
    for (const Vec3& p : mesh.positions) {
        out += "v ";
        out += ioutil::format_double(p.x);
        out += ' ';
        out += ioutil::format_double(p.y);
        out += ' ';
        out += ioutil::format_double(p.z);
        out += '\n';
    }
    for (const auto& t : mesh.triangles) {
        out += "f ";
        out += std::to_string(t[0] + 1);
        out += ' ';
        out += std::to_string(t[1] + 1);
        out += ' ';
        out += std::to_string(t[2] + 1);
        out += '\n';
    }
    ioutil::write_text_file(path, out);
}

SurfaceMesh load_obj(const std::string& path) {
    std::string text = ioutil::read_text_file(path);
    SurfaceMesh mesh;
    std::size_t pos = 0;
    std::size_t lineno = 0;
    auto fail = [&](const std::string& why) {
        throw IoError(path + ":" + std::to_string(lineno) + ": " + why);
    };
    while (pos < text.size()) {
        std::size_t eol = text.find('\n', pos);
        if (eol == std::string::npos) eol = text.size();
        std::string_view line(text.data() + pos, eol - pos);
        pos = eol + 1;
        ++lineno;
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.remove_suffix(1);
        while (!line.empty() && line.front() == ' ') line.remove_prefix(1);
        if (line.size() < 2 || line[0] == '#') continue;
        if (line[0] == 'v' && line[1] == ' ') {
            Vec3 p;
            if (std::sscanf(line.data(), "v %lf %lf %lf", &p.x, &p.y, &p.z) != 3) fail("malformed vertex");
            if (!all_finite(p)) fail("non-finite vertex");
            mesh.positions.push_back(p);
        } else if (line[0] == 'f' && line[1] == ' ') {
            std::vector<long> idx;
            std::size_t k = 1;
            while (k < line.size()) {
                while (k < line.size() && line[k] == ' ') ++k;
                if (k >= line.size()) break;
                char* end = nullptr;
                long v = std::strtol(line.data() + k, &end, 10);
                if (end == line.data() + k) fail("malformed face index");
                if (v < 0) v = static_cast<long>(mesh.positions.size()) + v + 1;
                if (v < 1 || v > static_cast<long>(mesh.positions.size())) fail("face index out of range");
                idx.push_back(v - 1);
                k = static_cast<std::size_t>(end - line.data());
                while (k < line.size() && line[k] != ' ') ++k;  // skip /vt/vn attributes
            }
            if (idx.size() < 3) fail("face with fewer than 3 vertices");
            for (std::size_t j = 1; j + 1 < idx.size(); ++j)
                mesh.triangles.push_back({static_cast<std::uint32_t>(idx[0]),
                                          static_cast<std::uint32_t>(idx[j]),
                                          static_cast<std::uint32_t>(idx[j + 1])});
        }
    }
    return mesh;
}

}  // namespace tetfit
