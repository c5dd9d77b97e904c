#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <unordered_map>
#include <vector>

#include "tetfit/config.hpp"
#include "tetfit/eval.hpp"
#include "tetfit/fit.hpp"
#include "tetfit/geometry.hpp"
#include "tetfit/layers.hpp"
#include "tetfit/march.hpp"
#include "tetfit/observe.hpp"
#include "tetfit/tape.hpp"
#include "tetfit/tetgrid.hpp"
#include "tetfit/threading.hpp"

using namespace tetfit;
namespace fs = std::filesystem;

namespace {

std::uint64_t pack_edge(std::uint32_t a, std::uint32_t b) {
    if (a > b) std::swap(a, b);
    return (static_cast<std::uint64_t>(a) << 32) | b;
}

std::map<std::uint64_t, int> edge_degrees(const SurfaceMesh& mesh) {
    std::map<std::uint64_t, int> deg;
    for (const auto& tri : mesh.triangles)
        for (int k = 0; k < 3; ++k) ++deg[pack_edge(tri[k], tri[(k + 1) % 3])];
    return deg;
}

bool watertight(const SurfaceMesh& mesh) {
    if (mesh.empty()) return false;
    for (const auto& [key, d] : edge_degrees(mesh))
        if (d != 2) return false;
    return true;
}

long euler_char_oracle(const SurfaceMesh& mesh) {
    long v = static_cast<long>(mesh.positions.size());
    long e = static_cast<long>(edge_degrees(mesh).size());
    long f = static_cast<long>(mesh.triangles.size());
    return v - e + f;
}

double brute_chamfer(const std::vector<Vec3>& a, const std::vector<Vec3>& b, bool squared = true) {
    auto one_way = [&](const std::vector<Vec3>& from, const std::vector<Vec3>& to) {
        double sum = 0.0;
        for (const Vec3& p : from) {
            double best = std::numeric_limits<double>::infinity();
            for (const Vec3& q : to) {
                double dx = p.x - q.x, dy = p.y - q.y, dz = p.z - q.z;
                best = std::min(best, dx * dx + dy * dy + dz * dz);
            }
            sum += squared ? best : std::sqrt(best);
        }
        return sum / static_cast<double>(from.size());
    };
    return one_way(a, b) + one_way(b, a);
}

std::size_t brute_nearest(const std::vector<Vec3>& pts, const Vec3& q) {
    std::size_t best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < pts.size(); ++i) {
        double d = (pts[i] - q).norm2();
        if (d < bd) {
            bd = d;
            best = i;
        }
    }
    return best;
}

std::vector<Vec3> random_points(Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
    std::vector<Vec3> pts(n);
    for (Vec3& p : pts) p = {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)};
    return pts;
}

std::string temp_dir(const std::string& name) {
    fs::path p = fs::path("test_tmp") / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// filename -> content for every regular file under dir
std::map<std::string, std::string> tree_contents(const std::string& dir) {
    std::map<std::string, std::string> out;
    for (const auto& entry : fs::recursive_directory_iterator(dir))
        if (entry.is_regular_file())
            out[fs::relative(entry.path(), dir).string()] = read_file(entry.path().string());
    return out;
}

int run_cli(const std::string& args, std::string* output = nullptr) {
    static int call = 0;
    std::string cap = "test_tmp/cli_capture_" + std::to_string(call++) + ".txt";
    fs::create_directories("test_tmp");
    std::string cmd = std::string(TETFIT_CLI_PATH) + " " + args + " > " + cap + " 2>&1";
    int rc = std::system(cmd.c_str());
    if (output) *output = read_file(cap);
    REQUIRE(WIFEXITED(rc));
    return WEXITSTATUS(rc);
}

TetGrid sphere_grid(int res, double radius) {
    TetGrid grid = build_uniform_grid(res);
    set_sdf_from_field(grid, [radius](const Vec3& p) { return p.norm() - radius; });
    return grid;
}

}  // namespace

TEST_SUITE("grid") {
    TEST_CASE("vertex and tet counts follow the resolution") {
        TetGrid g1 = build_uniform_grid(1);
        CHECK(g1.vertex_count() == 8);
        CHECK(g1.tets.size() == 6);

        TetGrid g2 = build_uniform_grid(2);
        CHECK(g2.vertex_count() == 27);
        CHECK(g2.tets.size() == 48);
    }

    TEST_CASE("high resolution counts") {
        TetGrid g = build_uniform_grid(128);
        CHECK(g.vertex_count() == 2146689u);
        CHECK(g.tets.size() == 12582912u);
    }

    TEST_CASE("resolution zero is rejected") {
        CHECK_THROWS_AS(build_uniform_grid(0), InvalidArgument);
    }

    TEST_CASE("fresh grid: zero offsets, field +1, positive tets") {
        TetGrid g = build_uniform_grid(4);
        for (const Vec3& o : g.offsets) CHECK(o == Vec3{0.0, 0.0, 0.0});
        for (double s : g.sdf) CHECK(s == 1.0);
        for (const auto& t : g.tets)
            CHECK(tet_signed_volume(g.rest_positions[t[0]], g.rest_positions[t[1]],
                                    g.rest_positions[t[2]], g.rest_positions[t[3]]) > 0.0);
        validate_grid(g);
    }

    TEST_CASE("interior faces shared by two tets, boundary faces by one") {
        for (int res = 1; res <= 16; ++res) {
            TetGrid g = build_uniform_grid(res);
            std::map<std::array<std::uint32_t, 3>, int> faces;
            for (const auto& t : g.tets) {
                const int pick[4][3] = {{0, 1, 2}, {0, 1, 3}, {0, 2, 3}, {1, 2, 3}};
                for (const auto& f : pick) {
                    std::array<std::uint32_t, 3> key{t[f[0]], t[f[1]], t[f[2]]};
                    std::sort(key.begin(), key.end());
                    ++faces[key];
                }
            }
            for (const auto& [key, count] : faces) {
                bool boundary = false;
                for (int axis = 0; axis < 3 && !boundary; ++axis)
                    for (double side : {-1.0, 1.0}) {
                        bool all = true;
                        for (std::uint32_t v : key)
                            all = all && std::fabs(g.rest_positions[v][axis] - side) < 1e-12;
                        boundary = boundary || all;
                    }
                CHECK(count == (boundary ? 1 : 2));
            }
        }
    }

    TEST_CASE("offsets are clamped to half a cell edge per component") {
        TetGrid g = build_uniform_grid(4);
        CHECK(g.cell_edge() == doctest::Approx(0.5));
        std::vector<Vec3> off(g.vertex_count());
        off[0] = {10.0, 0.0, 0.0};
        apply_offsets(g, off);
        CHECK(g.offsets[0] == Vec3{0.25, 0.0, 0.0});
        CHECK(g.position(0) == g.rest_positions[0] + Vec3{0.25, 0.0, 0.0});
    }

    TEST_CASE("zero offsets keep rest positions") {
        TetGrid g = build_uniform_grid(3);
        apply_offsets(g, std::vector<Vec3>(g.vertex_count()));
        for (std::size_t i = 0; i < g.vertex_count(); ++i)
            CHECK(g.position(i) == g.rest_positions[i]);
    }

    TEST_CASE("offset length mismatch is rejected") {
        TetGrid g = build_uniform_grid(2);
        CHECK_THROWS_AS(apply_offsets(g, std::vector<Vec3>(5)), InvalidArgument);
    }

    TEST_CASE("small random offsets apply exactly and keep tets positive") {
        TetGrid g = build_uniform_grid(5);
        Rng rng(99);
        double bound = 0.4 * g.clamp_bound();
        std::vector<Vec3> off(g.vertex_count());
        for (Vec3& o : off)
            o = {rng.uniform(-bound, bound), rng.uniform(-bound, bound),
                 rng.uniform(-bound, bound)};
        apply_offsets(g, off);
        for (std::size_t i = 0; i < g.vertex_count(); ++i)
            CHECK(g.position(i) == g.rest_positions[i] + off[i]);
        std::size_t inverted = 0;
        for (const auto& t : g.tets)
            if (tet_signed_volume(g.position(t[0]), g.position(t[1]), g.position(t[2]),
                                  g.position(t[3])) <= 0.0)
                ++inverted;
        CHECK(inverted == 0);
        CHECK(count_inverted_tets(g) == inverted);
    }

    TEST_CASE("field sampling lands on vertices") {
        TetGrid g = build_uniform_grid(4);
        set_sdf_from_field(g, [](const Vec3& p) { return p.norm() - 0.5; });
        std::uint32_t center = g.vertex_index(2, 2, 2);
        CHECK(g.rest_positions[center] == Vec3{0.0, 0.0, 0.0});
        CHECK(g.sdf[center] == doctest::Approx(-0.5));
    }

    TEST_CASE("non-finite field values are rejected with the vertex named") {
        TetGrid g = build_uniform_grid(2);
        CHECK_THROWS_AS(set_sdf_from_field(g, [](const Vec3&) {
                            return std::numeric_limits<double>::quiet_NaN();
                        }),
                        NumericError);
    }

    TEST_CASE("box field extraction recovers the analytic volume") {
        TetGrid g = build_uniform_grid(32);
        set_sdf_from_field(g, [](const Vec3& p) {
            return std::max({std::fabs(p.x), std::fabs(p.y), std::fabs(p.z)}) - 0.4;
        });
        SurfaceMesh mesh = marching_tetrahedra(g);
        CHECK(enclosed_volume(mesh) == doctest::Approx(0.512).epsilon(0.03));
    }

    TEST_CASE("serialization round-trips byte-identically") {
        std::string dir = temp_dir("grid_io");
        TetGrid g = sphere_grid(5, 0.45);
        std::vector<Vec3> off(g.vertex_count());
        Rng rng(7);
        for (Vec3& o : off) o = {rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), 0.0};
        apply_offsets(g, off);

        save_grid(dir + "/a.tetgrid", g);
        TetGrid loaded = load_grid(dir + "/a.tetgrid");
        CHECK(loaded.resolution == g.resolution);
        CHECK(loaded.rest_positions == g.rest_positions);
        CHECK(loaded.offsets == g.offsets);
        CHECK(loaded.sdf == g.sdf);
        CHECK(loaded.tets == g.tets);

        save_grid(dir + "/b.tetgrid", loaded);
        CHECK(read_file(dir + "/a.tetgrid") == read_file(dir + "/b.tetgrid"));
        CHECK(read_file(dir + "/a.tetgrid.json") == read_file(dir + "/b.tetgrid.json"));
    }

    TEST_CASE("grid construction is deterministic") {
        TetGrid a = build_uniform_grid(6);
        TetGrid b = build_uniform_grid(6);
        CHECK(a.rest_positions == b.rest_positions);
        CHECK(a.tets == b.tets);
    }
}

TEST_SUITE("surface extraction") {
    TEST_CASE("sign classification") {
        CHECK(classify_tet({1.0, 1.0, 1.0, 1.0}) == 0);
        CHECK(classify_tet({-1.0, 1.0, 1.0, 1.0}) == 1);
        CHECK(classify_tet({-1.0, -1.0, 1.0, 1.0}) == 3);
        CHECK(classify_tet({0.0, 1.0, 1.0, 1.0}) == 0);
        CHECK_THROWS_AS(classify_tet({std::numeric_limits<double>::quiet_NaN(), 0.0, 0.0, 0.0}),
                        NumericError);
    }

    TEST_CASE("case table triangle counts by sign pattern") {
        const auto& table = case_table();
        for (int c = 0; c < 16; ++c) {
            int neg = std::popcount(static_cast<unsigned>(c));
            int expect = (neg == 0 || neg == 4) ? 0 : (neg == 1 || neg == 3) ? 1 : 2;
            CHECK(table[c].tri_count == expect);
        }
    }

    TEST_CASE("every case separates negative from positive corners") {
        const Vec3 corners[4] = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
        const int edge_ends[6][2] = {{0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}, {2, 3}};
        Rng rng(2024);
        const auto& table = case_table();
        for (int c = 1; c < 15; ++c) {
            for (int trial = 0; trial < 64; ++trial) {
                std::array<double, 4> s;
                for (int i = 0; i < 4; ++i) {
                    double mag = rng.uniform(0.1, 2.0);
                    s[i] = (c >> i) & 1 ? -mag : mag;
                }
                REQUIRE(classify_tet(s) == c);
                Vec3 pts[6];
                bool have[6] = {};
                for (int e = 0; e < 6; ++e) {
                    int a = edge_ends[e][0], b = edge_ends[e][1];
                    if (s[a] * s[b] < 0.0) {
                        pts[e] = edge_crossing(corners[a], corners[b], s[a], s[b]).point;
                        have[e] = true;
                    }
                }
                for (int k = 0; k < table[c].tri_count; ++k) {
                    const auto& tri = table[c].tris[k];
                    REQUIRE(have[tri[0]]);
                    REQUIRE(have[tri[1]]);
                    REQUIRE(have[tri[2]]);
                    Vec3 n = (pts[tri[1]] - pts[tri[0]]).cross(pts[tri[2]] - pts[tri[0]]);
                    for (int i = 0; i < 4; ++i) {
                        double side = n.dot(corners[i] - pts[tri[0]]);
                        if (s[i] < 0.0)
                            CHECK(side < 0.0);  // inside corners behind the face
                        else
                            CHECK(side >= -1e-12);
                    }
                }
            }
        }
    }

    TEST_CASE("edge crossing interpolation") {
        EdgeCrossing mid = edge_crossing({0, 0, 0}, {1, 0, 0}, -1.0, 1.0);
        CHECK(mid.t == doctest::Approx(0.5));
        CHECK(mid.point == Vec3{0.5, 0.0, 0.0});

        EdgeCrossing quarter = edge_crossing({0, 0, 0}, {1, 0, 0}, -1.0, 3.0);
        CHECK(quarter.t == doctest::Approx(0.25));
        CHECK(quarter.point.x == doctest::Approx(0.25));

        CHECK_THROWS_AS(edge_crossing({0, 0, 0}, {1, 0, 0}, 1.0, 2.0), ContractViolation);
        CHECK_THROWS_AS(edge_crossing({0, 0, 0}, {1, 0, 0}, 0.0, -1.0), ContractViolation);
    }

    TEST_CASE("edge crossing gradient matches finite differences") {
        Tape tape;
        double in[8] = {0.1, -0.2, 0.3, 0.9, 0.4, -0.5, -1.3, 0.7};
        auto eval_x = [&](const double* v) {
            Tape t2;
            std::uint32_t first = t2.leaves(std::span<const double>(v, 8));
            Vec3Val va{Val{v[0], first + 0, &t2}, Val{v[1], first + 1, &t2},
                       Val{v[2], first + 2, &t2}};
            Vec3Val vb{Val{v[3], first + 3, &t2}, Val{v[4], first + 4, &t2},
                       Val{v[5], first + 5, &t2}};
            Val sa{v[6], first + 6, &t2};
            Val sb{v[7], first + 7, &t2};
            return edge_crossing_val(va, vb, sa, sb).x.v;
        };
        std::uint32_t first = tape.leaves(std::span<const double>(in, 8));
        Vec3Val va{Val{in[0], first + 0, &tape}, Val{in[1], first + 1, &tape},
                   Val{in[2], first + 2, &tape}};
        Vec3Val vb{Val{in[3], first + 3, &tape}, Val{in[4], first + 4, &tape},
                   Val{in[5], first + 5, &tape}};
        Val sa{in[6], first + 6, &tape};
        Val sb{in[7], first + 7, &tape};
        Vec3Val point = edge_crossing_val(va, vb, sa, sb);
        tape.backward(point.x);
        for (int i = 0; i < 8; ++i) {
            double h = 1e-6;
            double save = in[i];
            in[i] = save + h;
            double up = eval_x(in);
            in[i] = save - h;
            double dn = eval_x(in);
            in[i] = save;
            double fd = (up - dn) / (2.0 * h);
            CHECK(tape.adjoint(first + i) == doctest::Approx(fd).epsilon(1e-5));
        }
    }

    TEST_CASE("uniform positive field gives an empty mesh") {
        TetGrid g = build_uniform_grid(4);
        CHECK(marching_tetrahedra(g).empty());
    }

    TEST_CASE("sphere extraction is watertight with the right volume") {
        SurfaceMesh mesh = marching_tetrahedra(sphere_grid(32, 0.5));
        CHECK(watertight(mesh));
        CHECK(mesh_is_closed(mesh));
        CHECK(euler_char_oracle(mesh) == 2);
        CHECK(euler_characteristic(mesh) == 2);
        double analytic = 4.0 * std::numbers::pi * 0.125 / 3.0;
        CHECK(enclosed_volume(mesh) == doctest::Approx(analytic).epsilon(0.02));
        CHECK(mesh.has_provenance());
    }

    TEST_CASE("surface vertices are deduplicated per crossing edge") {
        SurfaceMesh mesh = marching_tetrahedra(sphere_grid(8, 0.5));
        std::set<std::uint64_t> edges;
        for (const auto& origin : mesh.provenance) {
            CHECK(origin.va < origin.vb);
            edges.insert(pack_edge(origin.va, origin.vb));
        }
        CHECK(edges.size() == mesh.positions.size());
    }

    TEST_CASE("triangle normals face away from the negative region") {
        SurfaceMesh mesh = marching_tetrahedra(sphere_grid(16, 0.5));
        std::size_t aligned = 0, with_area = 0;
        for (const auto& tri : mesh.triangles) {
            Vec3 a = mesh.positions[tri[0]], b = mesh.positions[tri[1]],
                 c = mesh.positions[tri[2]];
            Vec3 n = (b - a).cross(c - a);
            if (n.norm2() == 0.0) continue;
            ++with_area;
            Vec3 centroid = (a + b + c) / 3.0;
            if (n.dot(centroid) > 0.0) ++aligned;
        }
        CHECK(static_cast<double>(aligned) >= 0.99 * static_cast<double>(with_area));
    }

    TEST_CASE("extraction is deterministic") {
        SurfaceMesh a = marching_tetrahedra(sphere_grid(12, 0.45));
        SurfaceMesh b = marching_tetrahedra(sphere_grid(12, 0.45));
        CHECK(a.positions == b.positions);
        CHECK(a.triangles == b.triangles);
    }

    TEST_CASE("high resolution sphere vertex count, for the record") {
        SurfaceMesh mesh = marching_tetrahedra(sphere_grid(128, 0.5));
        MESSAGE("R=128 sphere surface vertices: ", mesh.positions.size());
        CHECK(watertight(mesh));
    }

    TEST_CASE("adjoint accumulation: zero cotangents, single-edge formula") {
        TetGrid g = sphere_grid(2, 0.4);
        SurfaceMesh mesh = marching_tetrahedra(g);
        REQUIRE(!mesh.empty());

        std::vector<Vec3> zero(mesh.positions.size());
        std::vector<double> gs;
        std::vector<Vec3> go;
        backward_surface(mesh, zero, g, gs, go);
        for (double v : gs) CHECK(v == 0.0);
        for (const Vec3& v : go) CHECK(v == Vec3{0.0, 0.0, 0.0});

        std::vector<Vec3> cot(mesh.positions.size());
        cot[0] = {1.0, 0.0, 0.0};
        backward_surface(mesh, cot, g, gs, go);
        const SurfaceVertexOrigin& origin = mesh.provenance[0];
        double sa = g.sdf[origin.va], sb = g.sdf[origin.vb];
        Vec3 d = g.position(origin.vb) - g.position(origin.va);
        double denom = (sa - sb) * (sa - sb);
        CHECK(gs[origin.va] == doctest::Approx(-sb / denom * d.x).epsilon(1e-12));
        CHECK(gs[origin.vb] == doctest::Approx(sa / denom * d.x).epsilon(1e-12));
    }

    TEST_CASE("tape gradients through the extraction match finite differences") {
        GradcheckReport rep = run_gradcheck(17);
        CHECK(rep.edge_crossing < 1e-4);
        CHECK(rep.pipeline < 1e-4);
        CHECK(rep.networks < 1e-4);
        CHECK(rep.motion < 1e-3);
    }

    TEST_CASE("OBJ round trip preserves geometry") {
        std::string dir = temp_dir("obj_io");
        SurfaceMesh mesh = marching_tetrahedra(sphere_grid(6, 0.5));
        save_obj(dir + "/m.obj", mesh);
        SurfaceMesh loaded = load_obj(dir + "/m.obj");
        CHECK(loaded.positions == mesh.positions);
        CHECK(loaded.triangles == mesh.triangles);
        save_obj(dir + "/n.obj", loaded);
        CHECK(read_file(dir + "/m.obj") == read_file(dir + "/n.obj"));
    }
}

TEST_SUITE("mesh geometry") {
    TEST_CASE("nearest neighbor index agrees with brute force") {
        Rng rng(5150);
        for (int trial = 0; trial < 60; ++trial) {
            std::size_t n = 1 + rng.below(400);
            std::vector<Vec3> pts = random_points(rng, n);
            NearestNeighborIndex index(pts);
            for (int q = 0; q < 12; ++q) {
                Vec3 query = {rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5),
                              rng.uniform(-1.5, 1.5)};
                CHECK(index.nearest(query) == brute_nearest(pts, query));
            }
        }
    }

    TEST_CASE("nearest neighbor ties break toward the lowest index") {
        std::vector<Vec3> pts = {{1.0, 0.0, 0.0}, {-1.0, 0.0, 0.0}, {1.0, 0.0, 0.0}};
        NearestNeighborIndex index(pts);
        CHECK(index.nearest({0.9, 0.0, 0.0}) == 0);
    }

    TEST_CASE("signed distance on the box") {
        SurfaceMesh cube = make_box({0.5, 0.5, 0.5});
        MeshDistanceQuery query(cube);
        CHECK(query.signed_distance({0.0, 0.0, 0.0}) == doctest::Approx(-0.5));
        CHECK(query.signed_distance({1.5, 0.0, 0.0}) == doctest::Approx(1.0));
    }

    TEST_CASE("signed distance on the faceted sphere") {
        SurfaceMesh ball = make_icosphere(0.5, 3);
        MeshDistanceQuery query(ball);
        CHECK(query.signed_distance({0.75, 0.0, 0.0}) == doctest::Approx(0.25).epsilon(4e-3));
        CHECK(std::fabs(query.signed_distance({0.75, 0.0, 0.0}) - 0.25) < 1e-3);
    }

    TEST_CASE("winding number classifies inside and outside") {
        SurfaceMesh cube = make_box({0.5, 0.5, 0.5});
        CHECK(winding_number(cube, {0.1, 0.2, -0.1}) == doctest::Approx(1.0).epsilon(1e-6));
        CHECK(winding_number(cube, {2.0, 0.0, 0.0}) == doctest::Approx(0.0).scale(1.0).epsilon(1e-6));
        CHECK_THROWS_AS(winding_number(cube, {0.5, 0.5, 0.5}), ContractViolation);
    }

    TEST_CASE("winding numbers of nested shells add") {
        SurfaceMesh outer = make_icosphere(0.6, 2);
        SurfaceMesh inner = make_icosphere(0.2, 2);
        Vec3 between{0.4, 0.0, 0.0};
        double w = winding_number(outer, between) + winding_number(inner, between);
        CHECK(w == doctest::Approx(1.0).epsilon(1e-6));
    }

    TEST_CASE("signed distance sign agrees with the analytic field") {
        SurfaceMesh ball = make_icosphere(0.5, 3);
        SurfaceMesh box = make_box({0.4, 0.3, 0.5});
        MeshDistanceQuery qb(ball), qx(box);
        Rng rng(31);
        for (int i = 0; i < 5000; ++i) {
            Vec3 p = {rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9)};
            double ds = p.norm() - 0.5;
            if (std::fabs(ds) > 6e-3) CHECK((qb.signed_distance(p) < 0.0) == (ds < 0.0));
            double dxv = std::max({std::fabs(p.x) - 0.4, std::fabs(p.y) - 0.3,
                                   std::fabs(p.z) - 0.5});
            if (std::fabs(dxv) > 1e-6) CHECK((qx.signed_distance(p) < 0.0) == (dxv < 0.0));
        }
    }

    TEST_CASE("surface samples are barycentric combinations of their triangle") {
        SurfaceMesh tri;
        tri.positions = {{0.0, 0.0, 0.0}, {2.0, 0.0, 0.0}, {0.0, 3.0, 0.0}};
        tri.triangles = {{0, 1, 2}};
        auto samples = sample_surface(tri, 1, 42);
        REQUIRE(samples.size() == 1);
        const auto& s = samples[0];
        CHECK(s.triangle == 0);
        CHECK(s.bary[0] + s.bary[1] + s.bary[2] == doctest::Approx(1.0).epsilon(1e-12));
        for (double b : s.bary) CHECK(b >= 0.0);
        Vec3 rebuilt = tri.positions[0] * s.bary[0] + tri.positions[1] * s.bary[1] +
                       tri.positions[2] * s.bary[2];
        CHECK((rebuilt - s.point).norm() < 1e-12);

        // moving a vertex moves the sample by its barycentric weight, exactly
        Vec3 delta{0.1, -0.2, 0.3};
        tri.positions[1] += delta;
        Vec3 moved = tri.positions[0] * s.bary[0] + tri.positions[1] * s.bary[1] +
                     tri.positions[2] * s.bary[2];
        CHECK((moved - (s.point + delta * s.bary[1])).norm() < 1e-12);
    }

    TEST_CASE("box sampling is area uniform across faces") {
        SurfaceMesh cube = make_box({0.5, 0.5, 0.5});
        auto samples = sample_surface(cube, 60000, 11);
        std::map<int, int> per_face;
        for (const auto& s : samples) {
            int face = -1;
            for (int axis = 0; axis < 3; ++axis) {
                if (std::fabs(s.point[axis] - 0.5) < 1e-9) face = 2 * axis;
                if (std::fabs(s.point[axis] + 0.5) < 1e-9) face = 2 * axis + 1;
            }
            REQUIRE(face >= 0);
            ++per_face[face];
        }
        for (const auto& [face, count] : per_face)
            CHECK(static_cast<double>(count) / 60000.0 ==
                  doctest::Approx(1.0 / 6.0).epsilon(0.06));
    }

    TEST_CASE("sampling is seed deterministic") {
        SurfaceMesh ball = make_icosphere(0.5, 2);
        auto a = sample_surface(ball, 500, 77);
        auto b = sample_surface(ball, 500, 77);
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].point == b[i].point);
            CHECK(a[i].triangle == b[i].triangle);
        }
        auto c = sample_surface(ball, 500, 78);
        bool any_diff = false;
        for (std::size_t i = 0; i < a.size(); ++i) any_diff = any_diff || !(a[i].point == c[i].point);
        CHECK(any_diff);
    }

    TEST_CASE("zero area meshes cannot be sampled") {
        SurfaceMesh degenerate;
        degenerate.positions = {{0, 0, 0}, {0, 0, 0}, {0, 0, 0}};
        degenerate.triangles = {{0, 1, 2}};
        CHECK_THROWS_AS(sample_surface(degenerate, 10, 1), InvalidArgument);
    }

    TEST_CASE("plane sections lie on the plane and trace the contour") {
        SurfaceMesh ball = make_icosphere(0.5, 3);
        PlaneSpec plane{{0.0, 0.0, 1.0}, 0.0};
        std::vector<Vec3> pts = plane_section(ball, plane);
        REQUIRE(!pts.empty());
        for (const Vec3& p : pts) {
            CHECK(std::fabs(p.z) < 1e-9);
            CHECK(std::hypot(p.x, p.y) == doctest::Approx(0.5).epsilon(0.02));
        }
        CHECK(plane_section(ball, {{0.0, 0.0, 1.0}, 2.0}).empty());
    }

    TEST_CASE("section of a convex mesh forms a convex loop") {
        SurfaceMesh ball = make_icosphere(0.5, 3);
        std::vector<Vec3> pts = plane_section(ball, {{0.0, 0.0, 1.0}, 0.1});
        REQUIRE(pts.size() >= 6);
        struct P2 {
            double x, y;
        };
        std::vector<P2> flat;
        for (const Vec3& p : pts) flat.push_back({p.x, p.y});
        double cx = 0.0, cy = 0.0;
        for (const P2& p : flat) {
            cx += p.x;
            cy += p.y;
        }
        cx /= static_cast<double>(flat.size());
        cy /= static_cast<double>(flat.size());
        std::sort(flat.begin(), flat.end(), [&](const P2& a, const P2& b) {
            return std::atan2(a.y - cy, a.x - cx) < std::atan2(b.y - cy, b.x - cx);
        });
        auto polygon_area = [](const std::vector<P2>& poly) {
            double s = 0.0;
            for (std::size_t i = 0; i < poly.size(); ++i) {
                const P2& a = poly[i];
                const P2& b = poly[(i + 1) % poly.size()];
                s += a.x * b.y - b.x * a.y;
            }
            return std::fabs(s) * 0.5;
        };
        // monotone chain hull
        std::vector<P2> sorted = flat;
        std::sort(sorted.begin(), sorted.end(),
                  [](const P2& a, const P2& b) { return a.x < b.x || (a.x == b.x && a.y < b.y); });
        auto cross2 = [](const P2& o, const P2& a, const P2& b) {
            return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
        };
        std::vector<P2> hull(2 * sorted.size());
        std::size_t k = 0;
        for (std::size_t i = 0; i < sorted.size(); ++i) {
            while (k >= 2 && cross2(hull[k - 2], hull[k - 1], sorted[i]) <= 0) --k;
            hull[k++] = sorted[i];
        }
        std::size_t lower = k + 1;
        for (std::size_t i = sorted.size() - 1; i-- > 0;) {
            while (k >= lower && cross2(hull[k - 2], hull[k - 1], sorted[i]) <= 0) --k;
            hull[k++] = sorted[i];
        }
        hull.resize(k - 1);
        CHECK(polygon_area(flat) / polygon_area(hull) > 0.99);
    }

    TEST_CASE("enclosed volumes") {
        SurfaceMesh cube = make_box({0.5, 0.5, 0.5});
        CHECK(enclosed_volume(cube) == doctest::Approx(1.0).epsilon(1e-12));

        SurfaceMesh ball = make_icosphere(0.5, 3);
        CHECK(enclosed_volume(ball) == doctest::Approx(0.5236).epsilon(0.02));

        SurfaceMesh reversed = cube;
        for (auto& tri : reversed.triangles) std::swap(tri[1], tri[2]);
        CHECK(enclosed_volume(reversed) == doctest::Approx(-1.0).epsilon(1e-12));
    }

    TEST_CASE("normalized volume against the domain") {
        SurfaceMesh domain = make_box({1.0, 1.0, 1.0});
        CHECK(normalized_volume(domain) == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(normalized_volume(SurfaceMesh{}) == 0.0);
        SurfaceMesh ball = make_icosphere(0.5, 3);
        CHECK(normalized_volume(ball) == doctest::Approx(0.0654).epsilon(0.02));
    }
}

TEST_SUITE("autodiff") {
    TEST_CASE("square function gradient") {
        Tape tape;
        Val x = tape.leaf(3.0);
        Val y = x * x;
        tape.backward(y);
        CHECK(tape.adjoint(x.i) == doctest::Approx(6.0).epsilon(1e-12));
    }

    TEST_CASE("product plus tanh gradient") {
        Tape tape;
        Val x = tape.leaf(1.0);
        Val y = tape.leaf(2.0);
        Val f = x * y + val_tanh(x);
        tape.backward(f);
        double th = std::tanh(1.0);
        CHECK(tape.adjoint(x.i) == doctest::Approx(2.0 + 1.0 - th * th).epsilon(1e-12));
        CHECK(tape.adjoint(y.i) == doctest::Approx(1.0).epsilon(1e-12));
    }

    TEST_CASE("random DAG gradients match finite differences") {
        Rng rng(4242);
        double leaves[6];
        for (double& v : leaves) v = rng.uniform(-1.5, 1.5);
        std::vector<std::array<int, 3>> plan;  // op, lhs, rhs picks
        for (int n = 0; n < 50; ++n)
            plan.push_back({static_cast<int>(rng.below(5)), static_cast<int>(rng.below(6 + n)),
                            static_cast<int>(rng.below(6 + n))});
        auto eval = [&](const double* in, Tape& tape, std::uint32_t* first_out) {
            std::uint32_t first = tape.leaves(std::span<const double>(in, 6));
            *first_out = first;
            std::vector<Val> nodes;
            for (int i = 0; i < 6; ++i) nodes.push_back(Val{in[i], first + i, &tape});
            for (const auto& [op, li, ri] : plan) {
                Val a = nodes[li], b = nodes[ri];
                switch (op) {
                    case 0: nodes.push_back(a + b); break;
                    case 1: nodes.push_back(a - b); break;
                    case 2: nodes.push_back(a * b); break;
                    case 3: nodes.push_back(val_tanh(a)); break;
                    default: nodes.push_back(val_sigmoid(a + b)); break;
                }
            }
            Val sum = nodes[6];
            for (std::size_t i = 7; i < nodes.size(); ++i) sum = sum + nodes[i];
            return sum;
        };
        Tape tape;
        std::uint32_t first;
        Val root = eval(leaves, tape, &first);
        tape.backward(root);
        for (int i = 0; i < 6; ++i) {
            double h = 1e-6, save = leaves[i];
            Tape t_up, t_dn;
            std::uint32_t dummy;
            leaves[i] = save + h;
            double up = eval(leaves, t_up, &dummy).v;
            leaves[i] = save - h;
            double dn = eval(leaves, t_dn, &dummy).v;
            leaves[i] = save;
            double fd = (up - dn) / (2.0 * h);
            double grad = tape.adjoint(first + i);
            double denom = std::max({std::fabs(fd), std::fabs(grad), 1e-6});
            CHECK(std::fabs(grad - fd) / denom < 1e-6);
        }
    }

    TEST_CASE("backward is linear in the root") {
        Tape tape;
        Val x = tape.leaf(0.7);
        Val y = tape.leaf(-0.3);
        Val f = val_tanh(x * y) + x;
        Val g = x * x + val_sigmoid(y);
        double a = 1.7, b = -2.3;
        tape.backward(f);
        double fx = tape.adjoint(x.i), fy = tape.adjoint(y.i);
        tape.backward(g);
        double gx = tape.adjoint(x.i), gy = tape.adjoint(y.i);
        Val combo = f * a + g * b;
        tape.backward(combo);
        CHECK(tape.adjoint(x.i) == doctest::Approx(a * fx + b * gx).epsilon(1e-12));
        CHECK(tape.adjoint(y.i) == doctest::Approx(a * fy + b * gy).epsilon(1e-12));
    }

    TEST_CASE("GRU cell fixed points") {
        ParamStore store;
        Rng rng(1);
        GruCell cell = GruCell::make(store, "gru", 3, 4, rng);
        for (int id = 0; id < store.count(); ++id)
            std::fill(store.at(id).data.begin(), store.at(id).data.end(), 0.0);

        Tape tape;
        GruCell::Bound bound = cell.bind(tape, store);
        std::vector<Val> x(3, Val{0.0}), h;
        for (double v : {0.8, -0.4, 0.2, 1.0}) h.push_back(tape.leaf(v));
        std::vector<Val> out;
        cell.forward(tape, bound, x, h, out);
        REQUIRE(out.size() == 4);
        for (int i = 0; i < 4; ++i) CHECK(out[i].v == doctest::Approx(0.5 * h[i].v).epsilon(1e-12));

        std::vector<Val> hz(4, Val{0.0});
        std::vector<Val> out0;
        cell.forward(tape, bound, x, hz, out0);
        for (const Val& v : out0) CHECK(v.v == 0.0);
    }

    TEST_CASE("GRU gradients match finite differences") {
        Rng rng(606);
        ParamStore store;
        GruCell cell = GruCell::make(store, "gru", 2, 3, rng);
        double xin[2] = {0.3, -0.7};
        double hin[3] = {0.5, 0.1, -0.2};
        auto build_loss = [&](Tape& tape) {
            GruCell::Bound bound = cell.bind(tape, store);
            std::vector<Val> x = {tape.leaf(xin[0]), tape.leaf(xin[1])};
            std::vector<Val> h = {tape.leaf(hin[0]), tape.leaf(hin[1]), tape.leaf(hin[2])};
            std::vector<Val> out;
            cell.forward(tape, bound, x, h, out);
            Val loss{0.0};
            for (const Val& v : out) loss = loss + v * v;
            return loss;
        };
        auto loss_value = [&]() {
            Tape scratch;
            return build_loss(scratch).v;
        };
        Tape tape;
        Val loss = build_loss(tape);
        tape.backward(loss);
        Rng pick(607);
        for (int trial = 0; trial < 30; ++trial) {
            int pid = static_cast<int>(pick.below(static_cast<std::uint64_t>(store.count())));
            Tensor& tensor = store.at(pid);
            std::size_t j = pick.below(tensor.size());
            double h = 1e-5, save = tensor.data[j];
            tensor.data[j] = save + h;
            double up = loss_value();
            tensor.data[j] = save - h;
            double dn = loss_value();
            tensor.data[j] = save;
            double fd = (up - dn) / (2.0 * h);
            int blk = tape.register_block(store.at(pid));
            auto grad = tape.block_grad(blk);
            REQUIRE(!grad.empty());
            double denom = std::max({std::fabs(fd), std::fabs(grad[j]), 1e-6});
            CHECK(std::fabs(grad[j] - fd) / denom < 1e-5);
        }
    }

    TEST_CASE("model initialization is seed deterministic") {
        DeformationModel a = make_deformation_model(ModelKind::kGru, 2, 8, 4, 3, 10, 55);
        DeformationModel b = make_deformation_model(ModelKind::kGru, 2, 8, 4, 3, 10, 55);
        REQUIRE(a.params.count() == b.params.count());
        for (int id = 0; id < a.params.count(); ++id) {
            CHECK(a.params.at(id).name == b.params.at(id).name);
            CHECK(a.params.at(id).data == b.params.at(id).data);
        }
        DeformationModel c = make_deformation_model(ModelKind::kGru, 2, 8, 4, 3, 10, 56);
        bool differs = false;
        for (int id = 0; id < a.params.count(); ++id)
            differs = differs || a.params.at(id).data != c.params.at(id).data;
        CHECK(differs);
    }

    TEST_CASE("checkpoints round trip exactly") {
        std::string dir = temp_dir("ckpt");
        DeformationModel model = make_deformation_model(ModelKind::kGru, 2, 6, 4, 4, 9, 12);
        OptimizerConfig ocfg;
        Optimizer opt = make_optimizer(ocfg);
        GradSet grads = make_gradset(model.params);
        for (int id = 0; id < model.params.count(); ++id) {
            for (double& g : grads[static_cast<std::size_t>(id)]) g = 0.01;
        }
        opt.step(model.params, grads, 1.0);

        save_model(dir + "/m.ckpt", model, &opt, &ocfg);
        Optimizer opt2 = make_optimizer(ocfg);
        OptimizerConfig loaded_cfg;
        DeformationModel loaded = load_model(dir + "/m.ckpt", &opt2, &loaded_cfg);
        REQUIRE(loaded.params.count() == model.params.count());
        for (int id = 0; id < model.params.count(); ++id) {
            CHECK(loaded.params.at(id).name == model.params.at(id).name);
            CHECK(loaded.params.at(id).data == model.params.at(id).data);
        }
        CHECK(loaded.kind == model.kind);
        CHECK(loaded.steps == model.steps);
        CHECK(loaded.hidden == model.hidden);
        CHECK(loaded.latent == model.latent);
        CHECK(loaded.frames == model.frames);

        save_model(dir + "/n.ckpt", loaded, &opt2, &ocfg);
        CHECK(read_file(dir + "/m.ckpt") == read_file(dir + "/n.ckpt"));
    }
}

TEST_SUITE("optimizers") {
    TEST_CASE("plain gradient step") {
        ParamStore store;
        int id = store.add("p", {1});
        store.at(id).data[0] = 1.0;
        Optimizer opt(OptimizerKind::kSgdMomentum, 0.1, 0.0, 0.0);
        GradSet grads = make_gradset(store);
        grads[0][0] = 1.0;
        opt.step(store, grads, 1.0);
        CHECK(store.at(id).data[0] == doctest::Approx(0.9).epsilon(1e-12));
    }

    TEST_CASE("momentum accumulates over steps") {
        ParamStore store;
        int id = store.add("p", {1});
        store.at(id).data[0] = 0.0;
        Optimizer opt(OptimizerKind::kSgdMomentum, 0.01, 0.99, 0.0);
        GradSet grads = make_gradset(store);
        grads[0][0] = 1.0;
        opt.step(store, grads, 1.0);
        CHECK(store.at(id).data[0] == doctest::Approx(-0.01).epsilon(1e-12));
        grads[0][0] = 1.0;
        opt.step(store, grads, 1.0);
        CHECK(store.at(id).data[0] == doctest::Approx(-0.0299).epsilon(1e-12));
    }

    TEST_CASE("adam first step equals the learning rate") {
        ParamStore store;
        int id = store.add("p", {1});
        store.at(id).data[0] = 0.0;
        Optimizer opt(OptimizerKind::kAdam, 0.001, 0.0, 0.0);
        GradSet grads = make_gradset(store);
        grads[0][0] = 1.0;
        opt.step(store, grads, 1.0);
        CHECK(std::fabs(store.at(id).data[0] - (-0.001)) < 1e-9);
    }

    TEST_CASE("non-finite gradients are rejected by name") {
        ParamStore store;
        store.add("weights.w", {2});
        Optimizer opt(OptimizerKind::kSgdMomentum, 0.01, 0.9, 0.0);
        GradSet grads = make_gradset(store);
        grads[0][1] = std::numeric_limits<double>::quiet_NaN();
        CHECK_THROWS_WITH_AS(opt.step(store, grads, 1.0),
                             doctest::Contains("weights.w"), NumericError);
    }

    TEST_CASE("cosine schedule spans one to zero") {
        CHECK(lr_schedule_scale(LrSchedule::kCosine, 0, 100) == doctest::Approx(1.0));
        CHECK(lr_schedule_scale(LrSchedule::kCosine, 50, 100) ==
              doctest::Approx(0.5).epsilon(0.01));
        CHECK(lr_schedule_scale(LrSchedule::kCosine, 99, 100) < 0.01);
        CHECK(lr_schedule_scale(LrSchedule::kConstant, 73, 100) == 1.0);
    }
}

TEST_SUITE("shape fitting") {
    TEST_CASE("chamfer basics") {
        std::vector<Vec3> a = {{0, 0, 0}, {1, 1, 1}};
        CHECK(chamfer(a, a) == 0.0);
        std::vector<Vec3> p = {{0, 0, 0}};
        std::vector<Vec3> q = {{0, 0, 1}};
        CHECK(chamfer(p, q) == doctest::Approx(2.0).epsilon(1e-12));
        CHECK_THROWS_AS(chamfer(std::vector<Vec3>{}, q), InvalidArgument);
    }

    TEST_CASE("chamfer equals the quadratic oracle and is symmetric") {
        Rng rng(808);
        for (int trial = 0; trial < 25; ++trial) {
            std::vector<Vec3> a = random_points(rng, 1 + rng.below(200));
            std::vector<Vec3> b = random_points(rng, 1 + rng.below(200));
            double fast = chamfer(a, b);
            CHECK(fast == brute_chamfer(a, b));
            CHECK(fast == chamfer(b, a));
            double plain = chamfer(a, b, false);
            CHECK(plain == brute_chamfer(a, b, false));
        }
    }

    TEST_CASE("field-only objective recovers queried distances") {
        SurfaceMesh target = make_icosphere(0.5, 3);
        TetGrid grid = build_uniform_grid(6);
        set_sdf_from_field(grid, [](const Vec3& p) { return p.norm() - 0.3; });

        FitShapeConfig cfg;
        cfg.iterations = 300;
        cfg.samples = 500;
        cfg.weights = {0.0, 1.0, 1.0, 1e-2};
        cfg.optimizer = {OptimizerKind::kAdam, 0.02, 0.0, 0.0, LrSchedule::kCosine};
        cfg.seed = 5;
        FitShapeResult res = fit_shape(grid, target, cfg);

        MeshDistanceQuery query(target);
        double worst = 0.0;
        for (std::size_t i = 0; i < res.grid.vertex_count(); ++i) {
            double want = query.signed_distance(res.grid.position(i));
            worst = std::max(worst, std::fabs(res.grid.sdf[i] - want));
            CHECK(res.grid.offsets[i] == Vec3{0.0, 0.0, 0.0});
        }
        CHECK(worst < 1e-3);
    }

    TEST_CASE("an exact-field initialization starts within a tenth of its final loss") {
        SurfaceMesh target = make_icosphere(0.5, 3);
        TetGrid grid = build_uniform_grid(12);
        MeshSdfCache cache(target, grid.vertex_count());
        for (std::size_t i = 0; i < grid.vertex_count(); ++i)
            grid.sdf[i] = cache.signed_at(i, grid.position(i));

        FitShapeConfig cfg;
        cfg.iterations = 30;
        cfg.samples = 8000;
        cfg.seed = 2;
        FitShapeResult res = fit_shape(grid, target, cfg);
        CHECK(res.loss_trace[0] <= 1.1 * res.best_loss);
    }

    TEST_CASE("surface never appearing aborts the fit") {
        SurfaceMesh target = make_icosphere(0.5, 2);
        TetGrid grid = build_uniform_grid(4);  // field stays at +1, no crossings
        FitShapeConfig cfg;
        cfg.iterations = 60;
        cfg.samples = 200;
        cfg.weights = {1.0, 0.0, 1.0, 1e-2};
        CHECK_THROWS_AS(fit_shape(grid, target, cfg), FitDiverged);
    }

    TEST_CASE("loss trace records the running best") {
        SurfaceMesh target = make_icosphere(0.5, 2);
        TetGrid grid = sphere_grid(6, 0.4);
        FitShapeConfig cfg;
        cfg.iterations = 25;
        cfg.samples = 800;
        cfg.seed = 9;
        FitShapeResult res = fit_shape(grid, target, cfg);
        REQUIRE(res.loss_trace.size() == 25);
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < res.loss_trace.size(); ++i) {
            best = std::min(best, res.loss_trace[i]);
            CHECK(res.best_trace[i] == best);
            if (i > 0) CHECK(res.best_trace[i] <= res.best_trace[i - 1]);
        }
        CHECK(res.best_loss == best);
    }

    TEST_CASE("identical seeds give identical traces") {
        SurfaceMesh target = make_icosphere(0.5, 2);
        FitShapeConfig cfg;
        cfg.iterations = 10;
        cfg.samples = 400;
        cfg.seed = 123;
        FitShapeResult a = fit_shape(sphere_grid(5, 0.4), target, cfg);
        FitShapeResult b = fit_shape(sphere_grid(5, 0.4), target, cfg);
        CHECK(a.loss_trace == b.loss_trace);
        CHECK(a.grid.sdf == b.grid.sdf);
        CHECK(a.grid.offsets == b.grid.offsets);
    }
}

TEST_SUITE("motion fitting") {
    TEST_CASE("zero-initialized update head rolls out the identity") {
        TetGrid canonical = sphere_grid(4, 0.45);
        for (ModelKind kind : {ModelKind::kFreeOffsets, ModelKind::kMlp, ModelKind::kGru}) {
            int steps = kind == ModelKind::kFreeOffsets ? 1 : 2;
            MotionSystem sys(canonical, kind, steps);
            DeformationModel model = make_deformation_model(
                kind, steps, 6, 4, 2, static_cast<std::uint32_t>(sys.driving_vertices().size()),
                3);
            std::vector<Vec3> rolled = sys.roll_frame_plain(model, 1);
            REQUIRE(rolled.size() == sys.canonical_mesh().positions.size());
            for (std::size_t i = 0; i < rolled.size(); ++i)
                CHECK((rolled[i] - sys.canonical_mesh().positions[i]).norm() < 1e-15);
        }
    }

    TEST_CASE("free offsets displace driving vertices exactly") {
        TetGrid canonical = sphere_grid(4, 0.45);
        MotionSystem sys(canonical, ModelKind::kFreeOffsets, 1);
        std::uint32_t driving = static_cast<std::uint32_t>(sys.driving_vertices().size());
        DeformationModel model =
            make_deformation_model(ModelKind::kFreeOffsets, 1, 4, 2, 2, driving, 3);
        Tensor& free = model.params.at(model.params.find("free_offsets"));
        Rng rng(44);
        for (double& v : free.data) v = rng.uniform(-0.05, 0.05);

        std::vector<Vec3> rolled = sys.roll_frame_plain(model, 1);
        const SurfaceMesh& mesh = sys.canonical_mesh();
        for (std::size_t v = 0; v < mesh.positions.size(); ++v) {
            const SurfaceVertexOrigin& origin = mesh.provenance[v];
            auto delta_of = [&](std::uint32_t gv) {
                auto it = std::lower_bound(sys.driving_vertices().begin(),
                                           sys.driving_vertices().end(), gv);
                std::size_t j = static_cast<std::size_t>(it - sys.driving_vertices().begin());
                std::size_t base = (1 * driving + j) * 3;
                return Vec3{free.data[base], free.data[base + 1], free.data[base + 2]};
            };
            Vec3 expect = mesh.positions[v] + delta_of(origin.va) * (1.0 - origin.t) +
                          delta_of(origin.vb) * origin.t;
            CHECK((rolled[v] - expect).norm() < 1e-14);
        }
    }

    TEST_CASE("tracked and plain rollouts agree bitwise") {
        TetGrid canonical = sphere_grid(4, 0.5);
        MotionSystem sys(canonical, ModelKind::kGru, 2);
        DeformationModel model = make_deformation_model(
            ModelKind::kGru, 2, 6, 4, 3, static_cast<std::uint32_t>(sys.driving_vertices().size()),
            21);
        Rng rng(22);
        for (const char* name : {"head1.weight", "head1.bias", "latent"}) {
            Tensor& tensor = model.params.at(model.params.find(name));
            for (double& v : tensor.data) v = rng.uniform(-0.2, 0.2);
        }
        Tape tape;
        MotionSystem::FrameRoll roll = sys.roll_frame(tape, model, 2);
        std::vector<Vec3> plain = sys.roll_frame_plain(model, 2);
        REQUIRE(roll.surface.size() == plain.size());
        for (std::size_t i = 0; i < plain.size(); ++i) {
            CHECK(roll.surface[i].x.v == plain[i].x);
            CHECK(roll.surface[i].y.v == plain[i].y);
            CHECK(roll.surface[i].z.v == plain[i].z);
        }
    }

    TEST_CASE("motion fit rejects bad sequences") {
        TetGrid canonical = sphere_grid(4, 0.45);
        FitMotionConfig cfg;
        CHECK_THROWS_AS(fit_motion(canonical, std::vector<Observation>{}, cfg), InvalidArgument);

        std::vector<Observation> mixed(2);
        mixed[0].mode = ObservationMode::kFull;
        mixed[0].target = make_icosphere(0.4, 1);
        mixed[1].mode = ObservationMode::kVolume;
        mixed[1].volume = 0.1;
        CHECK_THROWS_AS(fit_motion(canonical, mixed, cfg), InvalidArgument);

        TetGrid empty_grid = build_uniform_grid(3);
        std::vector<Observation> obs(1);
        obs[0].mode = ObservationMode::kFull;
        obs[0].target = make_icosphere(0.4, 1);
        CHECK_THROWS_AS(fit_motion(empty_grid, obs, cfg), InvalidArgument);
    }

    TEST_CASE("field values and connectivity survive a motion fit untouched") {
        TetGrid canonical = sphere_grid(4, 0.45);
        std::vector<double> sdf_before = canonical.sdf;
        auto tets_before = canonical.tets;
        std::vector<Observation> obs(2);
        for (auto& o : obs) {
            o.mode = ObservationMode::kVolume;
            o.volume = 0.05;
        }
        FitMotionConfig cfg;
        cfg.model = ModelKind::kMlp;
        cfg.hidden = 6;
        cfg.latent = 4;
        cfg.iterations = 4;
        cfg.seed = 8;
        FitMotionResult res = fit_motion(canonical, obs, cfg);
        CHECK(canonical.sdf == sdf_before);
        CHECK(canonical.tets == tets_before);
        CHECK(res.frame_positions.size() == 2);
    }

    TEST_CASE("identical seeds give identical motion traces") {
        TetGrid canonical = sphere_grid(4, 0.45);
        SurfaceMesh target = marching_tetrahedra(canonical);
        std::vector<Observation> obs(2);
        for (auto& o : obs) o = observe_full(target);
        FitMotionConfig cfg;
        cfg.model = ModelKind::kGru;
        cfg.hidden = 6;
        cfg.latent = 4;
        cfg.iterations = 5;
        cfg.samples = 600;
        cfg.seed = 77;
        FitMotionResult a = fit_motion(canonical, obs, cfg);
        FitMotionResult b = fit_motion(canonical, obs, cfg);
        CHECK(a.loss_trace == b.loss_trace);
        for (std::size_t t = 0; t < a.frame_positions.size(); ++t)
            CHECK(a.frame_positions[t] == b.frame_positions[t]);
    }

    TEST_CASE("repeating the canonical target is fit by staying put") {
        SurfaceMesh shape = make_icosphere(0.5, 3);
        TetGrid grid = build_uniform_grid(6);
        set_sdf_from_field(grid, [](const Vec3& p) { return p.norm() - 0.3; });
        FitShapeConfig scfg;
        scfg.iterations = 80;
        scfg.samples = 3000;
        scfg.seed = 4;
        TetGrid canonical = fit_shape(grid, shape, scfg).grid;
        SurfaceMesh target = marching_tetrahedra(canonical);

        auto cd_to_target = [&](const SurfaceMesh& mesh, std::uint64_t seed) {
            auto sp = sample_surface(mesh, 4000, derive_seed(seed, 90));
            auto st = sample_surface(target, 4000, derive_seed(seed, 91));
            std::vector<Vec3> a, b;
            for (const auto& s : sp) a.push_back(s.point);
            for (const auto& s : st) b.push_back(s.point);
            return chamfer(a, b);
        };
        double static_cd = cd_to_target(target, 1);

        std::vector<Observation> obs(5);
        for (auto& o : obs) o = observe_full(target);
        FitMotionConfig cfg;
        cfg.model = ModelKind::kGru;
        cfg.steps = 2;
        cfg.hidden = 12;
        cfg.latent = 6;
        cfg.iterations = 50;
        cfg.samples = 2500;
        cfg.seed = 6;
        FitMotionResult res = fit_motion(canonical, obs, cfg);

        double displacement = 0.0;
        std::size_t count = 0;
        for (std::size_t t = 0; t < res.frame_positions.size(); ++t) {
            SurfaceMesh frame;
            frame.positions = res.frame_positions[t];
            frame.triangles = res.canonical_mesh.triangles;
            double cd = cd_to_target(frame, 100 + t);
            CHECK(cd <= 2.0 * static_cd);
            for (std::size_t v = 0; v < frame.positions.size(); ++v) {
                displacement += (frame.positions[v] - res.canonical_mesh.positions[v]).norm();
                ++count;
            }
        }
        CHECK(displacement / static_cast<double>(count) < 0.01);
    }

    TEST_CASE("more slice planes pull the fit closer to the truth") {
        const int frames = 8;
        AnalyticMotion motion = make_motion(MotionKind::kTranslate, 0.2, frames);
        SequenceDataset ds = generate_sequence(BaseShape::kIcosphere, motion, frames,
                                               ObservationMode::kFull, SliceSpec{}, 11);
        TetGrid grid = build_uniform_grid(6);
        set_sdf_from_field(grid, [](const Vec3& p) { return p.norm() - 0.3; });
        FitShapeConfig scfg;
        scfg.iterations = 80;
        scfg.samples = 3000;
        scfg.seed = 4;
        TetGrid canonical = fit_shape(grid, ds.canonical(), scfg).grid;

        // Planes must cut every frame, so intersect the per-frame z extents.
        double z_lo = -1e9, z_hi = 1e9;
        for (const auto& m : ds.gt_meshes) {
            double lo = 1e9, hi = -1e9;
            for (const Vec3& p : m.positions) {
                lo = std::min(lo, p.z);
                hi = std::max(hi, p.z);
            }
            z_lo = std::max(z_lo, lo);
            z_hi = std::min(z_hi, hi);
        }

        auto mean_cd_for = [&](int planes) {
            auto specs =
                make_slice_planes(z_lo, z_hi, SliceSpec{planes, SlicePlacement::kCentral, {}});
            std::vector<Observation> obs;
            for (const auto& m : ds.gt_meshes) obs.push_back(observe_slices(m, specs));
            FitMotionConfig cfg;
            cfg.model = ModelKind::kGru;
            cfg.steps = 2;
            cfg.hidden = 10;
            cfg.latent = 6;
            cfg.iterations = 200;
            cfg.samples = 2000;
            cfg.seed = 7;
            cfg.optimizer.kind = OptimizerKind::kAdam;
            // Contour terms leave everything between the planes unconstrained;
            // the pull toward the canonical pose has to hold those parts still.
            cfg.weights.reg = 0.5;
            FitMotionResult res = fit_motion(canonical, obs, cfg);
            double sum = 0.0;
            for (int t = 0; t < frames; ++t) {
                SurfaceMesh frame;
                frame.positions = res.frame_positions[static_cast<std::size_t>(t)];
                frame.triangles = res.canonical_mesh.triangles;
                auto sp = sample_surface(frame, 4000,
                                         derive_seed(99, 7, static_cast<std::uint64_t>(t)));
                auto st = sample_surface(ds.gt_meshes[static_cast<std::size_t>(t)], 4000,
                                         derive_seed(99, 8, static_cast<std::uint64_t>(t)));
                std::vector<Vec3> a, b;
                for (const auto& s : sp) a.push_back(s.point);
                for (const auto& s : st) b.push_back(s.point);
                sum += chamfer(a, b);
            }
            return sum / frames;
        };

        double cd1 = mean_cd_for(1);
        double cd3 = mean_cd_for(3);
        double cd5 = mean_cd_for(5);
        CHECK(cd1 > cd3);
        CHECK(cd3 > cd5);
        CHECK(cd5 < 0.004);
    }
}

TEST_SUITE("synthetic sequences") {
    TEST_CASE("zero amplitude motion freezes every frame") {
        AnalyticMotion still = make_motion(MotionKind::kTranslate, 0.0, 24);
        SequenceDataset ds = generate_sequence(BaseShape::kIcosphere, still, 5,
                                               ObservationMode::kFull, SliceSpec{}, 3);
        for (const SurfaceMesh& m : ds.gt_meshes) CHECK(m.positions == ds.canonical().positions);
    }

    TEST_CASE("frame zero is always the canonical mesh") {
        AnalyticMotion motion = make_motion(MotionKind::kSquash, 0.2, 12);
        SequenceDataset ds = generate_sequence(BaseShape::kBox, motion, 7,
                                               ObservationMode::kFull, SliceSpec{}, 5);
        CHECK(ds.gt_meshes[0].positions == ds.canonical().positions);
        for (const SurfaceMesh& m : ds.gt_meshes) CHECK(m.triangles == ds.canonical().triangles);
    }

    TEST_CASE("radial pulse volume curve matches the scaled-sphere ratio") {
        AnalyticMotion pulse = make_motion(MotionKind::kRadialPulse, 0.1, 24);
        SequenceDataset ds = generate_sequence(BaseShape::kIcosphere, pulse, 25,
                                               ObservationMode::kFull, SliceSpec{}, 7);
        std::vector<double> volume;
        for (const SurfaceMesh& m : ds.gt_meshes) volume.push_back(normalized_volume(m));
        double vmax = *std::max_element(volume.begin(), volume.end());
        double vmin = *std::min_element(volume.begin(), volume.end());
        CHECK(vmax / vmin == doctest::Approx(3.375).epsilon(0.03));
        CHECK(volume[24] == doctest::Approx(volume[0]).epsilon(1e-9));
        CHECK(volume[6] == doctest::Approx(vmax).epsilon(1e-9));
        CHECK(volume[18] == doctest::Approx(vmin).epsilon(1e-9));
    }

    TEST_CASE("twisted frames stay watertight with positive volume") {
        AnalyticMotion twist = make_motion(MotionKind::kTwist, std::numbers::pi / 6.0, 12);
        SequenceDataset ds = generate_sequence(BaseShape::kIcosphere, twist, 13,
                                               ObservationMode::kFull, SliceSpec{}, 2);
        for (const SurfaceMesh& m : ds.gt_meshes) {
            CHECK(watertight(m));
            CHECK(enclosed_volume(m) > 0.0);
        }
    }

    TEST_CASE("amplitudes outside the safe range are rejected") {
        CHECK_THROWS_AS(make_motion(MotionKind::kTranslate, 0.4, 24), InvalidArgument);
        CHECK_THROWS_AS(make_motion(MotionKind::kRadialPulse, 0.3, 24), InvalidArgument);
        CHECK_THROWS_AS(make_motion(MotionKind::kTranslate, -0.1, 24), InvalidArgument);
    }

    TEST_CASE("volume observation of the unit box") {
        Observation o = observe_volume(make_box({0.5, 0.5, 0.5}));
        CHECK(o.mode == ObservationMode::kVolume);
        CHECK(o.volume == doctest::Approx(0.125).epsilon(1e-12));
    }

    TEST_CASE("single central slice cuts the equator") {
        SurfaceMesh ball = make_icosphere(0.5, 3);
        Observation o = extract_observation(ball, ObservationMode::kSlices,
                                            SliceSpec{1, SlicePlacement::kCentral, {}}, 1);
        REQUIRE(o.planes.size() == 1);
        CHECK(std::fabs(o.planes[0].d) < 0.06);
        REQUIRE(!o.contours[0].empty());
        for (const Vec3& p : o.contours[0])
            CHECK(std::hypot(p.x, p.y) == doctest::Approx(0.5).epsilon(0.03));
    }

    TEST_CASE("strided slices span a wider range than central ones") {
        auto central = make_slice_planes(-0.45, 0.45, {3, SlicePlacement::kCentral, {}});
        auto strided = make_slice_planes(-0.45, 0.45, {3, SlicePlacement::kStrided, {}});
        auto span_of = [](const std::vector<PlaneSpec>& planes) {
            double lo = 1e9, hi = -1e9;
            for (const PlaneSpec& p : planes) {
                lo = std::min(lo, p.d);
                hi = std::max(hi, p.d);
            }
            return hi - lo;
        };
        CHECK(span_of(strided) > span_of(central));
    }

    TEST_CASE("full observation echoes the source") {
        SurfaceMesh ball = make_icosphere(0.4, 2);
        Observation o = observe_full(ball);
        CHECK(o.target.positions == ball.positions);
        CHECK(o.target.triangles == ball.triangles);
    }

    TEST_CASE("the analytic motion scores zero error against itself") {
        AnalyticMotion motion = make_motion(MotionKind::kTranslate, 0.2, 24);
        SequenceDataset ds = generate_sequence(BaseShape::kIcosphere, motion, 6,
                                               ObservationMode::kFull, SliceSpec{}, 9);
        for (int t = 0; t < ds.frames; ++t) {
            std::vector<Vec3> moved;
            for (const Vec3& p : ds.canonical().positions) moved.push_back(ds.motion.apply(p, t));
            CHECK(epe(moved, ds.gt_meshes[static_cast<std::size_t>(t)].positions) == 0.0);
        }
    }

    TEST_CASE("datasets round trip bit exactly in every mode") {
        for (ObservationMode mode :
             {ObservationMode::kFull, ObservationMode::kSlices, ObservationMode::kVolume}) {
            AnalyticMotion motion = make_motion(MotionKind::kSquash, 0.15, 8);
            SequenceDataset ds = generate_sequence(BaseShape::kIcosphere, motion, 4, mode,
                                                   SliceSpec{3, SlicePlacement::kCentral, {}}, 13);
            std::string d1 = temp_dir(std::string("ds_rt_a_") + observation_mode_name(mode));
            std::string d2 = temp_dir(std::string("ds_rt_b_") + observation_mode_name(mode));
            save_dataset(d1, ds);
            SequenceDataset loaded = load_dataset(d1);
            save_dataset(d2, loaded);
            CHECK(tree_contents(d1) == tree_contents(d2));
            CHECK(loaded.frames == ds.frames);
            CHECK(loaded.mode == ds.mode);
            CHECK(loaded.motion.kind == ds.motion.kind);
            for (int t = 0; t < ds.frames; ++t)
                CHECK(loaded.gt_meshes[static_cast<std::size_t>(t)].positions ==
                      ds.gt_meshes[static_cast<std::size_t>(t)].positions);
        }
    }
}

TEST_SUITE("metrics") {
    TEST_CASE("endpoint error basics") {
        std::vector<Vec3> a = {{0, 0, 0}, {1, 0, 0}};
        CHECK(epe(a, a) == 0.0);
        std::vector<Vec3> b;
        for (const Vec3& p : a) b.push_back(p + Vec3{0.03, 0.0, 0.0});
        CHECK(epe(b, a) == doctest::Approx(0.03).epsilon(1e-12));
        CHECK_THROWS_AS(epe(a, std::vector<Vec3>{{0, 0, 0}}), InvalidArgument);
    }

    TEST_CASE("endpoint error equals the direct mean of norms") {
        Rng rng(515);
        std::vector<Vec3> a = random_points(rng, 300);
        std::vector<Vec3> b = random_points(rng, 300);
        double direct = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) direct += (a[i] - b[i]).norm();
        direct /= static_cast<double>(a.size());
        CHECK(epe(a, b) == direct);
    }

    TEST_CASE("accuracy threshold is strict") {
        std::vector<Vec3> gt = {{0, 0, 0}, {0, 1, 0}};
        CHECK(accuracy(gt, gt, 0.025) == 1.0);
        std::vector<Vec3> shifted;
        for (const Vec3& p : gt) shifted.push_back(p + Vec3{0.025, 0.0, 0.0});
        CHECK(accuracy(shifted, gt, 0.025) == 0.0);

        std::vector<Vec3> mixed = {{0.01, 0, 0}, {0.04, 0, 0}};
        std::vector<Vec3> zeros = {{0, 0, 0}, {0, 0, 0}};
        CHECK(accuracy(mixed, zeros, 0.025) == 0.5);
        CHECK(accuracy(mixed, zeros, 0.05) == 1.0);
    }

    TEST_CASE("accuracy grows with the threshold, scaling leaves it fixed") {
        Rng rng(616);
        std::vector<Vec3> a = random_points(rng, 200);
        std::vector<Vec3> b;
        for (const Vec3& p : a)
            b.push_back(p + Vec3{rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), 0.0});
        double t1 = accuracy(a, b, 0.02), t2 = accuracy(a, b, 0.05), t3 = accuracy(a, b, 0.1);
        CHECK(t1 <= t2);
        CHECK(t2 <= t3);

        double lambda = 3.7;
        std::vector<Vec3> as, bs;
        for (const Vec3& p : a) as.push_back(p * lambda);
        for (const Vec3& p : b) bs.push_back(p * lambda);
        CHECK(accuracy(as, bs, 0.05 * lambda) == accuracy(a, b, 0.05));
        CHECK(epe(as, bs) == doctest::Approx(lambda * epe(a, b)).epsilon(1e-12));
        CHECK(chamfer(as, bs) == doctest::Approx(lambda * lambda * chamfer(a, b)).epsilon(1e-12));
    }

    TEST_CASE("feeding the true motion back scores perfectly") {
        AnalyticMotion motion = make_motion(MotionKind::kTranslate, 0.2, 12);
        SequenceDataset ds = generate_sequence(BaseShape::kIcosphere, motion, 6,
                                               ObservationMode::kFull, SliceSpec{}, 21);
        std::vector<std::vector<Vec3>> oracle;
        for (int t = 0; t < ds.frames; ++t)
            oracle.push_back(ds.gt_meshes[static_cast<std::size_t>(t)].positions);
        EvalConfig cfg;
        cfg.samples = 2000;
        MetricsReport rep = evaluate_run(ds.canonical(), oracle, ds, cfg);
        CHECK(rep.mean_epe == 0.0);
        CHECK(rep.acc_s == 1.0);
        CHECK(rep.acc_r == 1.0);
        CHECK(rep.mean_cd < 1e-5);
        CHECK(rep.max_volume_gap < 1e-12);
    }

    TEST_CASE("a frozen prediction scores the mean swing of the motion") {
        AnalyticMotion motion = make_motion(MotionKind::kTranslate, 0.2, 24);
        SequenceDataset ds = generate_sequence(BaseShape::kIcosphere, motion, 25,
                                               ObservationMode::kFull, SliceSpec{}, 21);
        std::vector<std::vector<Vec3>> frozen(25, ds.canonical().positions);
        EvalConfig cfg;
        cfg.samples = 1000;
        MetricsReport rep = evaluate_run(ds.canonical(), frozen, ds, cfg);
        double expect = 0.0;
        for (int t = 0; t < 25; ++t)
            expect += std::fabs(0.2 * std::sin(2.0 * std::numbers::pi * t / 24.0));
        expect /= 25.0;
        CHECK(rep.mean_epe == doctest::Approx(expect).epsilon(1e-9));
    }

    TEST_CASE("volume gap reports the worst frame") {
        AnalyticMotion pulse = make_motion(MotionKind::kRadialPulse, 0.1, 12);
        SequenceDataset ds = generate_sequence(BaseShape::kIcosphere, pulse, 13,
                                               ObservationMode::kFull, SliceSpec{}, 3);
        std::vector<std::vector<Vec3>> frozen(13, ds.canonical().positions);
        EvalConfig cfg;
        cfg.samples = 500;
        MetricsReport rep = evaluate_run(ds.canonical(), frozen, ds, cfg);
        double v0 = normalized_volume(ds.canonical());
        double worst = 0.0;
        for (int t = 0; t < 13; ++t)
            worst = std::max(worst,
                             std::fabs(v0 - normalized_volume(ds.gt_meshes[static_cast<std::size_t>(t)])));
        CHECK(rep.max_volume_gap == doctest::Approx(worst).epsilon(1e-12));
    }

    TEST_CASE("metric files are written and stable") {
        std::string dir = temp_dir("metrics_io");
        AnalyticMotion motion = make_motion(MotionKind::kTranslate, 0.1, 8);
        SequenceDataset ds = generate_sequence(BaseShape::kIcosphere, motion, 3,
                                               ObservationMode::kFull, SliceSpec{}, 2);
        std::vector<std::vector<Vec3>> oracle;
        for (int t = 0; t < 3; ++t)
            oracle.push_back(ds.gt_meshes[static_cast<std::size_t>(t)].positions);
        EvalConfig cfg;
        cfg.samples = 500;
        MetricsReport rep = evaluate_run(ds.canonical(), oracle, ds, cfg);
        save_metrics_json(dir + "/m.json", rep);
        save_metrics_csv(dir + "/m.csv", rep);
        std::string json = read_file(dir + "/m.json");
        CHECK(json.find("\"schema_version\"") != std::string::npos);
        std::string csv = read_file(dir + "/m.csv");
        CHECK(csv.rfind("frame,", 0) == 0);
        save_metrics_json(dir + "/m2.json", rep);
        CHECK(json == read_file(dir + "/m2.json"));
    }
}

TEST_SUITE("run configuration") {
    TEST_CASE("serialization round trips every field") {
        RunConfig c;
        c.seed = 42;
        c.threads = 3;
        c.resolution = 12;
        c.base = BaseShape::kCapsule;
        c.motion = MotionKind::kTwist;
        c.amplitude = 0.31;
        c.period = 16;
        c.frames = 17;
        c.mode = ObservationMode::kSlices;
        c.slice_k = 5;
        c.slice_placement = SlicePlacement::kStrided;
        c.shape_iterations = 77;
        c.shape_samples = 1234;
        c.init_radius = 0.27;
        c.model = ModelKind::kMlp;
        c.steps = 4;
        c.hidden = 48;
        c.latent = 24;
        c.motion_iterations = 55;
        c.motion_samples = 4321;
        c.weights = {0.5, 0.25, 2.0, 0.125};
        c.optimizer = {OptimizerKind::kAdam, 0.005, 0.5, 1e-4, LrSchedule::kConstant};
        c.squared_chamfer = false;
        c.eval_samples = 999;
        c.eval_seed = 31337;
        c.acc_strict = 0.03;
        c.acc_relaxed = 0.06;

        RunConfig back = parse_config(serialize_config(c));
        CHECK(back == c);
    }

    TEST_CASE("defaults round trip too") {
        RunConfig c;
        CHECK(parse_config(serialize_config(c)) == c);
    }

    TEST_CASE("comments and spacing are tolerated") {
        RunConfig c = parse_config("# a comment\n\n  seed = 9\nresolution=4   # trailing\n");
        CHECK(c.seed == 9);
        CHECK(c.resolution == 4);
    }

    TEST_CASE("unknown keys are rejected with their line") {
        CHECK_THROWS_WITH_AS(parse_config("seed = 1\nbogus = 2\n"), doctest::Contains("line 2"),
                             InvalidArgument);
        CHECK_THROWS_AS(parse_config("resolution = banana\n"), InvalidArgument);
        CHECK_THROWS_AS(parse_config("model = resnet\n"), InvalidArgument);
    }

    TEST_CASE("config files round trip through disk") {
        std::string dir = temp_dir("config_io");
        RunConfig c;
        c.seed = 5;
        c.model = ModelKind::kFreeOffsets;
        save_config_file(dir + "/run.cfg", c);
        CHECK(load_config_file(dir + "/run.cfg") == c);
    }
}

TEST_SUITE("command line") {
    TEST_CASE("help exits cleanly, bad usage does not") {
        std::string out;
        CHECK(run_cli("--help", &out) == 0);
        CHECK(out.find("generate") != std::string::npos);
        CHECK(run_cli("fit-shape --help") == 0);
        CHECK(run_cli("definitely-not-a-command") == 2);
        CHECK(run_cli("") == 2);
        CHECK(run_cli("fit-shape") == 2);  // missing required flags
    }

    TEST_CASE("generation validates its arguments") {
        std::string dir = temp_dir("cli_gen_bad");
        CHECK(run_cli("generate --frames 0 --out " + dir) == 2);
        CHECK(run_cli("generate --amp 5.0 --out " + dir) == 2);
        CHECK(run_cli("generate --base dodecahedron --out " + dir) == 2);
    }

    TEST_CASE("generation is deterministic across reruns") {
        std::string d1 = temp_dir("cli_gen_a");
        std::string d2 = temp_dir("cli_gen_b");
        std::string flags = "generate --base icosphere --motion radial-pulse --amp 0.1 "
                            "--frames 4 --seed 7 --out ";
        std::string out;
        CHECK(run_cli(flags + d1, &out) == 0);
        CHECK(out.find("manifest.json") != std::string::npos);
        CHECK(run_cli(flags + d2) == 0);
        CHECK(tree_contents(d1) == tree_contents(d2));
        CHECK(fs::exists(d1 + "/manifest.json"));
        CHECK(fs::exists(d1 + "/frame_003.obj"));
    }

    TEST_CASE("missing inputs exit with a usage error") {
        CHECK(run_cli("fit-shape --target no_such.obj --out test_tmp/x") == 2);
        CHECK(run_cli("fit-motion --dataset no_such_dir --out test_tmp/x") == 2);
        CHECK(run_cli("eval --results no_such --dataset also_no_such --out test_tmp/x") == 2);
        CHECK(run_cli("export --grid no_such.tetgrid --out test_tmp/x.obj") == 2);
    }

    TEST_CASE("a small fit writes the full results layout") {
        std::string ds = temp_dir("cli_fit_ds");
        REQUIRE(run_cli("generate --base icosphere --motion translate --amp 0.15 --frames 3 "
                        "--seed 3 --out " + ds) == 0);
        std::string r1 = temp_dir("cli_fit_r1");
        std::string flags = "fit-shape --target " + ds + "/frame_000.obj --res 6 --iters 8 "
                            "--samples 500 --seed 2 --out ";
        REQUIRE(run_cli(flags + r1) == 0);
        for (const char* f : {"config.cfg", "loss.csv", "grid.tetgrid", "grid.tetgrid.json",
                              "mesh.obj"})
            CHECK(fs::exists(r1 + "/" + f));

        std::string r2 = temp_dir("cli_fit_r2");
        REQUIRE(run_cli(flags + r2) == 0);
        CHECK(tree_contents(r1) == tree_contents(r2));

        std::string exp = temp_dir("cli_export");
        std::string out;
        CHECK(run_cli("export --grid " + r1 + "/grid.tetgrid --out " + exp + "/m.obj", &out) == 0);
        CHECK(load_obj(exp + "/m.obj").positions == load_obj(r1 + "/mesh.obj").positions);
    }

    TEST_CASE("config file values yield to explicit flags") {
        std::string dir = temp_dir("cli_cfg");
        {
            std::ofstream f(dir + "/run.cfg");
            f << "resolution = 5\nshape_iterations = 99\nseed = 11\n";
        }
        std::string ds = temp_dir("cli_cfg_ds");
        REQUIRE(run_cli("generate --frames 2 --amp 0.1 --seed 1 --out " + ds) == 0);
        std::string res = temp_dir("cli_cfg_res");
        REQUIRE(run_cli("fit-shape --config " + dir + "/run.cfg --target " + ds +
                        "/frame_000.obj --iters 6 --samples 400 --out " + res) == 0);
        RunConfig echoed = load_config_file(res + "/config.cfg");
        CHECK(echoed.resolution == 5);     // from the file
        CHECK(echoed.shape_iterations == 6);  // flag wins
        CHECK(echoed.seed == 11);

        CHECK(run_cli("fit-shape --config " + dir + "/missing.cfg --target " + ds +
                      "/frame_000.obj --out " + res) == 2);
    }

    TEST_CASE("an oracle results directory evaluates to zero error") {
        std::string ds = temp_dir("cli_eval_ds");
        REQUIRE(run_cli("generate --base icosphere --motion translate --amp 0.2 --frames 4 "
                        "--seed 5 --out " + ds) == 0);
        std::string res = temp_dir("cli_eval_res");
        fs::copy_file(ds + "/frame_000.obj", res + "/canonical_mesh.obj");
        for (int t = 0; t < 4; ++t) {
            char name[32];
            std::snprintf(name, sizeof name, "frame_%03d.obj", t);
            fs::copy_file(ds + "/" + name, res + "/" + name);
        }
        std::string out;
        CHECK(run_cli("eval --results " + res + " --dataset " + ds + " --eval-samples 500",
                      &out) == 0);
        CHECK(out.find("epe 0.000") != std::string::npos);
        CHECK(fs::exists(res + "/metrics.json"));
        CHECK(fs::exists(res + "/metrics.csv"));

        fs::remove(res + "/frame_003.obj");
        CHECK(run_cli("eval --results " + res + " --dataset " + ds) == 2);
    }

    TEST_CASE("gradient audit subcommand passes") {
        std::string out;
        CHECK(run_cli("gradcheck --seed 12", &out) == 0);
        CHECK(out.find("passed") != std::string::npos);
    }
}
