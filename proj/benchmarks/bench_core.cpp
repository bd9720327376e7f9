#include <numbers>
#include <random>

#include <benchmark/benchmark.h>

#include "pbl/calibration.hpp"
#include "pbl/field.hpp"
#include "pbl/normals.hpp"
#include "pbl/synth.hpp"

using namespace pbl;

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

SceneSpec bench_scene(int width) {
  using V = Eigen::Vector3d;
  SceneSpec spec;
  spec.primitives = {Primitive::plane(V(0, 0, -1.73), V::UnitZ(), 0.55, 0.08),
                     Primitive::box(V(15, 9, 1.5), V(50, 1, 4), 0.0, 0.45, 0.12),
                     Primitive::box(V(15, -2, 1.5), V(50, 1, 4), 0.0, 0.6, 0.1),
                     Primitive::sphere(V(10, 5, -0.7), 1.0, 0.65, 0.18),
                     Primitive::box(V(14, 3.5, -0.5), V(2, 1, 1.2), 35 * kDeg, 0.62, 0.22)};
  spec.intrinsics = hdl64e_intrinsics(width);
  spec.params = IntensityParams::defaults(spec.intrinsics.height);
  spec.trajectory = {Pose::identity()};
  spec.shutter = false;
  return spec;
}

const SyntheticScan& bench_scan() {
  static const SyntheticScan scan = synthesize_scan(bench_scene(1024), 0);
  return scan;
}

const VoxelField& bench_field() {
  static const VoxelField field =
      voxelize(bench_scene(1024), {160, 60, 24}, 0.25, Eigen::Vector3d(-10, -3, -2.5), 60.0);
  return field;
}

void BM_RenderRay(benchmark::State& state) {
  const VoxelField& field = bench_field();
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> az(-std::numbers::pi, std::numbers::pi), el(-0.4, 0.05);
  std::vector<Eigen::Vector3d> dirs;
  for (int k = 0; k < 256; ++k) {
    const double a = az(rng), e = el(rng);
    dirs.emplace_back(std::cos(e) * std::cos(a), std::cos(e) * std::sin(a), std::sin(e));
  }
  std::vector<RaySample> trace;
  std::size_t k = 0;
  for (auto _ : state) {
    const RayOutput out = render_ray(field, Eigen::Vector3d::Zero(), dirs[k++ % dirs.size()], 0.125, 120.0,
                                     state.range(0) ? &trace : nullptr);
    benchmark::DoNotOptimize(out);
  }
}
BENCHMARK(BM_RenderRay)->Arg(0)->Arg(1);

void BM_Project(benchmark::State& state) {
  const SyntheticScan& scan = bench_scan();
  const SensorIntrinsics intr = hdl64e_intrinsics(1024);
  for (auto _ : state) benchmark::DoNotOptimize(project(scan.cloud, intr));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(scan.cloud.size()));
}
BENCHMARK(BM_Project)->Unit(benchmark::kMillisecond);

void BM_Unproject(benchmark::State& state) {
  const SyntheticScan& scan = bench_scan();
  const SensorIntrinsics intr = hdl64e_intrinsics(1024);
  for (auto _ : state) benchmark::DoNotOptimize(unproject(scan.observed, intr));
}
BENCHMARK(BM_Unproject)->Unit(benchmark::kMillisecond);

void BM_Normals(benchmark::State& state) {
  const SyntheticScan& scan = bench_scan();
  const SensorIntrinsics intr = hdl64e_intrinsics(1024);
  for (auto _ : state) benchmark::DoNotOptimize(normals_from_range(scan.observed, intr));
}
BENCHMARK(BM_Normals)->Unit(benchmark::kMillisecond);

void BM_ReprojectionLoss(benchmark::State& state) {
  const SyntheticScan& scan = bench_scan();
  const SensorIntrinsics intr = hdl64e_intrinsics(1024);
  const std::vector<PointCloud> frames{scan.cloud};
  const bool with_gradient = state.range(0) != 0;
  for (auto _ : state) benchmark::DoNotOptimize(evaluate_reprojection(intr, frames, ChannelWeights{}, with_gradient));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(scan.cloud.size()));
}
BENCHMARK(BM_ReprojectionLoss)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_RenderScan(benchmark::State& state) {
  const VoxelField& field = bench_field();
  const SceneSpec spec = bench_scene(256);
  RenderOptions options;
  options.shutter = false;
  for (auto _ : state)
    benchmark::DoNotOptimize(render_scan(field, spec.intrinsics, Pose::identity(), Pose::identity(), spec.params, options));
}
BENCHMARK(BM_RenderScan)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
