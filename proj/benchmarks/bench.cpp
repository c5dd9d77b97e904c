#include <benchmark/benchmark.h>

#include "tetfit/fit.hpp"
#include "tetfit/geometry.hpp"
#include "tetfit/layers.hpp"
#include "tetfit/march.hpp"
#include "tetfit/tetgrid.hpp"

using namespace tetfit;

namespace {

TetGrid sphere_grid(std::uint32_t res) {
    TetGrid grid = build_uniform_grid(res);
    set_sdf_from_field(grid, [](const Vec3& p) { return norm(p) - 0.5; });
    return grid;
}

void BM_BuildGrid(benchmark::State& state) {
    auto res = static_cast<std::uint32_t>(state.range(0));
    for (auto _ : state) {
        TetGrid grid = build_uniform_grid(res);
        benchmark::DoNotOptimize(grid.tets.data());
    }
}
BENCHMARK(BM_BuildGrid)->Arg(8)->Arg(16)->Arg(32);

void BM_MarchingTets(benchmark::State& state) {
    TetGrid grid = sphere_grid(static_cast<std::uint32_t>(state.range(0)));
    for (auto _ : state) {
        SurfaceMesh mesh = marching_tetrahedra(grid);
        benchmark::DoNotOptimize(mesh.positions.data());
    }
}
BENCHMARK(BM_MarchingTets)->Arg(8)->Arg(16)->Arg(32);

void BM_Chamfer(benchmark::State& state) {
    Rng rng(11);
    auto n = static_cast<std::size_t>(state.range(0));
    std::vector<Vec3> a(n), b(n);
    for (Vec3& p : a) p = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    for (Vec3& p : b) p = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    for (auto _ : state) benchmark::DoNotOptimize(chamfer(a, b));
}
BENCHMARK(BM_Chamfer)->Arg(1000)->Arg(10000);

void BM_TapeBackward(benchmark::State& state) {
    TetGrid grid = sphere_grid(8);
    SurfaceMesh mesh = marching_tetrahedra(grid);
    auto samples = sample_surface(mesh, static_cast<std::size_t>(state.range(0)), 7);
    std::vector<Vec3> targets(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i)
        targets[i] = normalized(samples[i].point) * 0.5;
    NearestNeighborIndex index(targets);
    std::vector<double> raw(grid.offsets.size() * 3, 0.0);
    for (auto _ : state) {
        Tape tape;
        TrackedGrid tg = track_grid(tape, grid, grid.sdf, raw, true, true);
        std::vector<Vec3Val> lifted = lift_surface(tg, mesh);
        std::vector<Vec3Val> pts = lift_samples(samples, mesh, lifted);
        Val loss = chamfer_val(pts, index, true);
        tape.backward(loss);
        benchmark::DoNotOptimize(tape.adjoint(0));
    }
}
BENCHMARK(BM_TapeBackward)->Arg(500)->Arg(2000);

void BM_SignedDistance(benchmark::State& state) {
    SurfaceMesh mesh = make_icosphere(0.5, static_cast<int>(state.range(0)));
    MeshDistanceQuery query(mesh);
    Rng rng(5);
    std::vector<Vec3> points(1000);
    for (Vec3& p : points) p = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    for (auto _ : state) {
        double acc = 0.0;
        for (const Vec3& p : points) acc += query.signed_distance(p);
        benchmark::DoNotOptimize(acc);
    }
}
BENCHMARK(BM_SignedDistance)->Arg(2)->Arg(4);

}  // namespace

BENCHMARK_MAIN();
