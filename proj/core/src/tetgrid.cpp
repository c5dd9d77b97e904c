#include "tetfit/tetgrid.hpp"

#include <cmath>
#include <cstring>
#include <unordered_map>

#include "io_util.hpp"

namespace tetfit {

std::vector<Vec3> TetGrid::positions() const {
    std::vector<Vec3> p(vertex_count());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = position(i);
    return p;
}

std::uint32_t TetGrid::vertex_index(int x, int y, int z) const {
    int n = resolution + 1;
    return static_cast<std::uint32_t>(x + n * (y + n * z));
}

double tet_signed_volume(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d) {
    return dot(b - a, cross(c - a, d - a)) / 6.0;
}

TetGrid build_uniform_grid(int resolution) {
    if (resolution < 1) throw InvalidArgument("grid resolution must be >= 1");
    TetGrid g;
    g.resolution = resolution;
    int n = resolution + 1;
    g.rest_positions.reserve(static_cast<std::size_t>(n) * n * n);
    for (int z = 0; z < n; ++z)
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x)
                g.rest_positions.push_back({-1.0 + 2.0 * x / resolution,
                                            -1.0 + 2.0 * y / resolution,
                                            -1.0 + 2.0 * z / resolution});
    g.offsets.assign(g.rest_positions.size(), Vec3{});
    g.sdf.assign(g.rest_positions.size(), 1.0);

    // Each cube is cut into 6 tets along vertex chains 000 -> 111, one per
    // axis order. Odd permutations get two corners swapped to keep the signed
    // volume positive. Every chain contains the main diagonal, which makes
    // neighboring cubes agree on their shared faces.
    static const int perms[6][3] = {{0, 1, 2}, {1, 2, 0}, {2, 0, 1}, {0, 2, 1}, {1, 0, 2}, {2, 1, 0}};
    static const bool odd[6] = {false, false, false, true, true, true};
    g.tets.reserve(static_cast<std::size_t>(resolution) * resolution * resolution * 6);
    for (int z = 0; z < resolution; ++z)
        for (int y = 0; y < resolution; ++y)
            for (int x = 0; x < resolution; ++x) {
                int c[3] = {x, y, z};
                for (int p = 0; p < 6; ++p) {
                    int v[3] = {c[0], c[1], c[2]};
                    std::array<std::uint32_t, 4> tet;
                    tet[0] = g.vertex_index(v[0], v[1], v[2]);
                    for (int s = 0; s < 3; ++s) {
                        ++v[perms[p][s]];
                        tet[static_cast<std::size_t>(s + 1)] = g.vertex_index(v[0], v[1], v[2]);
                    }
                    if (odd[p]) std::swap(tet[1], tet[2]);
                    g.tets.push_back(tet);
                }
            }
    return g;
}

void apply_offsets(TetGrid& grid, const std::vector<Vec3>& offsets) {
    if (offsets.size() != grid.vertex_count())
        throw InvalidArgument("offset count does not match vertex count");
    double b = grid.clamp_bound();
    auto clamp1 = [b](double v) { return v < -b ? -b : (v > b ? b : v); };
    for (std::size_t i = 0; i < offsets.size(); ++i)
        grid.offsets[i] = {clamp1(offsets[i].x), clamp1(offsets[i].y), clamp1(offsets[i].z)};
}

void set_sdf_from_field(TetGrid& grid, const std::function<double(const Vec3&)>& field) {
    for (std::size_t i = 0; i < grid.vertex_count(); ++i) {
        double v = field(grid.position(i));
        if (!std::isfinite(v))
            throw NumericError("field returned non-finite value at vertex " + std::to_string(i));
        grid.sdf[i] = v;
    }
}

void validate_grid(const TetGrid& grid) {
    std::size_t n = static_cast<std::size_t>(grid.resolution) + 1;
    TETFIT_CHECK(grid.resolution >= 1, "resolution < 1");
    TETFIT_CHECK(grid.rest_positions.size() == n * n * n, "vertex count != (R+1)^3");
    TETFIT_CHECK(grid.offsets.size() == grid.rest_positions.size(), "offset array size");
    TETFIT_CHECK(grid.sdf.size() == grid.rest_positions.size(), "sdf array size");
    std::size_t r = static_cast<std::size_t>(grid.resolution);
    TETFIT_CHECK(grid.tets.size() == 6 * r * r * r, "tet count != 6R^3");
    double bound = grid.clamp_bound() * (1.0 + 1e-12);
    for (std::size_t i = 0; i < grid.vertex_count(); ++i) {
        TETFIT_CHECK(all_finite(grid.rest_positions[i]) && all_finite(grid.offsets[i]), "non-finite vertex data");
        TETFIT_CHECK(std::isfinite(grid.sdf[i]), "non-finite sdf");
        const Vec3& o = grid.offsets[i];
        TETFIT_CHECK(std::fabs(o.x) <= bound && std::fabs(o.y) <= bound && std::fabs(o.z) <= bound,
                     "offset exceeds clamp bound");
    }
    for (const auto& t : grid.tets) {
        for (std::uint32_t vi : t) TETFIT_CHECK(vi < grid.vertex_count(), "tet index out of range");
        double vol = tet_signed_volume(grid.rest_positions[t[0]], grid.rest_positions[t[1]],
                                       grid.rest_positions[t[2]], grid.rest_positions[t[3]]);
        TETFIT_CHECK(vol > 0.0, "tet not positively oriented at rest");
    }
}

std::size_t count_inverted_tets(const TetGrid& grid) {
    std::size_t count = 0;
    for (const auto& t : grid.tets) {
        double vol = tet_signed_volume(grid.position(t[0]), grid.position(t[1]),
                                       grid.position(t[2]), grid.position(t[3]));
        if (vol <= 0.0) ++count;
    }
    return count;
}

namespace {
constexpr char kGridMagic[8] = {'T', 'E', 'T', 'G', 'R', 'I', 'D', '\0'};
}

void save_grid(const std::string& path, const TetGrid& grid) {
    ioutil::File f = ioutil::open_file(path, "wb");
    ioutil::write_exact(f.get(), kGridMagic, 8, path);
    ioutil::write_pod<std::uint32_t>(f.get(), 1, path);
    ioutil::write_pod<std::uint32_t>(f.get(), static_cast<std::uint32_t>(grid.resolution), path);
    ioutil::write_pod<std::uint64_t>(f.get(), grid.vertex_count(), path);
    ioutil::write_pod<std::uint64_t>(f.get(), grid.tets.size(), path);
    ioutil::write_exact(f.get(), grid.rest_positions.data(), grid.rest_positions.size() * sizeof(Vec3), path);
    ioutil::write_exact(f.get(), grid.offsets.data(), grid.offsets.size() * sizeof(Vec3), path);
    ioutil::write_exact(f.get(), grid.sdf.data(), grid.sdf.size() * sizeof(double), path);
    ioutil::write_exact(f.get(), grid.tets.data(), grid.tets.size() * sizeof(std::array<std::uint32_t, 4>), path);
    if (std::fflush(f.get()) != 0) throw IoError("flush failed: " + path);

    std::string sidecar = "{\n  \"format_version\": 1,\n  \"resolution\": " +
                          std::to_string(grid.resolution) +
                          ",\n  \"vertex_count\": " + std::to_string(grid.vertex_count()) +
                          ",\n  \"tet_count\": " + std::to_string(grid.tets.size()) + "\n}\n";
    ioutil::write_text_file(path + ".json", sidecar);
}

TetGrid load_grid(const std::string& path) {
    ioutil::File f = ioutil::open_file(path, "rb");
    char magic[8];
    ioutil::read_exact(f.get(), magic, 8, path);
    if (std::memcmp(magic, kGridMagic, 8) != 0) throw IoError("bad grid magic: " + path);
    auto version = ioutil::read_pod<std::uint32_t>(f.get(), path);
    if (version != 1) throw IoError("unsupported grid version: " + path);
    TetGrid g;
    g.resolution = static_cast<int>(ioutil::read_pod<std::uint32_t>(f.get(), path));
    auto nverts = ioutil::read_pod<std::uint64_t>(f.get(), path);
    auto ntets = ioutil::read_pod<std::uint64_t>(f.get(), path);
    g.rest_positions.resize(nverts);
    g.offsets.resize(nverts);
    g.sdf.resize(nverts);
    g.tets.resize(ntets);
    ioutil::read_exact(f.get(), g.rest_positions.data(), nverts * sizeof(Vec3), path);
    ioutil::read_exact(f.get(), g.offsets.data(), nverts * sizeof(Vec3), path);
    ioutil::read_exact(f.get(), g.sdf.data(), nverts * sizeof(double), path);
    ioutil::read_exact(f.get(), g.tets.data(), ntets * sizeof(std::array<std::uint32_t, 4>), path);
    validate_grid(g);
    return g;
}

}  // namespace tetfit
