#include <cmath>

#include "pbl/error.hpp"
#include "pbl/field.hpp"
#include "pbl/parallel.hpp"

namespace pbl {

RenderImages RenderImages::blank(int height, int width) {
  RenderImages r;
  r.depth = Grid<double>(height, width, 0.0);
  r.intensity_base = Grid<double>(height, width, 0.0);
  r.reflectivity = Grid<double>(height, width, 0.0);
  r.drop_prob = Grid<double>(height, width, 1.0);
  r.transmittance_residual = Grid<double>(height, width, 1.0);
  r.weight_sum = Grid<double>(height, width, 0.0);
  return r;
}

void RenderImages::store(int i, int j, const RayOutput& out) {
  depth(i, j) = out.depth;
  intensity_base(i, j) = out.intensity;
  reflectivity(i, j) = out.reflectivity;
  drop_prob(i, j) = out.drop;
  transmittance_residual(i, j) = out.transmittance;
  weight_sum(i, j) = out.weight_sum;
}

double RenderOptions::resolved_step(const VoxelField& field) const {
  if (step < 0.0 || !std::isfinite(step)) throw ConfigError("render: step must be >= 0");
  return step > 0.0 ? step : 0.5 * field.cell_size;
}

std::vector<Pose> scan_column_poses(const Pose& p0, const Pose& p1, int width,
                                    const RenderOptions& options) {
  if (!options.shutter) return std::vector<Pose>(static_cast<std::size_t>(width), p0);
  return shutter_poses(p0, p1, width, options.direction, options.interpolation);
}

ScanRender render_scan(const VoxelField& field, const SensorIntrinsics& intr, const Pose& p0,
                       const Pose& p1, const IntensityParams& params,
                       const RenderOptions& options) {
  field.validate();
  intr.validate();
  params.validate();
  if (params.laser_powers.size() != static_cast<std::size_t>(intr.height))
    throw ConfigError("render_scan: need one laser power per row");
  const double step = options.resolved_step(field);
  const auto poses = scan_column_poses(p0, p1, intr.width, options);

  ScanRender out;
  out.render = RenderImages::blank(intr.height, intr.width);
  parallel_chunks(static_cast<std::size_t>(intr.height), options.workers, [&](std::size_t row) {
    const int i = static_cast<int>(row);
    for (int j = 0; j < intr.width; ++j) {
      const Ray r = ray_from_pixel(i, j, intr);
      const Pose& pose = poses[static_cast<std::size_t>(j)];
      out.render.store(i, j, render_ray(field, pose.apply(r.origin), pose.rotate(r.direction),
                                        step, options.max_range));
    }
  });

  out.image = RangeImage::blank(intr.width, intr.height);
  for (int i = 0; i < intr.height; ++i)
    for (int j = 0; j < intr.width; ++j)
      if (out.render.drop_prob(i, j) < 0.5 && out.render.depth(i, j) > 0.0)
        out.image.set(i, j, out.render.depth(i, j), 0.0);

  out.normals = normals_from_range(out.image, intr, options.normals);
  out.cos_incidence = out.normals.cos_incidence;
  for (int i = 0; i < intr.height; ++i) {
    for (int j = 0; j < intr.width; ++j) {
      if (!out.image.valid(i, j)) continue;
      out.image.intensity(i, j) =
          apply_model(out.render.intensity_base(i, j), out.image.depth(i, j),
                      out.cos_incidence(i, j), out.render.reflectivity(i, j), i, params);
    }
  }
  return out;
}

CameraRender render_camera(const VoxelField& field, const Pinhole& camera, const Pose& pose,
                           const IntensityParams& params, const RenderOptions& options) {
  field.validate();
  if (!(camera.fx > 0.0) || !(camera.fy > 0.0))
    throw ConfigError("render_camera: fx and fy must be > 0");
  if (camera.width < 1 || camera.height < 1)
    throw ConfigError("render_camera: image size must be positive");
  params.distance.validate();
  const double step = options.resolved_step(field);

  CameraRender out;
  out.render = RenderImages::blank(camera.height, camera.width);
  out.intensity = Grid<double>(camera.height, camera.width, 0.0);
  const Eigen::Vector3d origin = pose.translation;
  parallel_chunks(static_cast<std::size_t>(camera.height), options.workers, [&](std::size_t row) {
    const int v = static_cast<int>(row);
    for (int u = 0; u < camera.width; ++u) {
      const Eigen::Vector3d dir =
          Eigen::Vector3d((u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0)
              .normalized();
      const RayOutput r = render_ray(field, origin, pose.rotate(dir), step, options.max_range);
      out.render.store(v, u, r);
      double value = r.intensity;
      if (params.distance_enabled && r.depth > 0.0) value *= n_distance(r.depth, params.distance);
      out.intensity(v, u) = value;
    }
  });
  return out;
}

}  // namespace pbl
