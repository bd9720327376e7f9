#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <sstream>

#include <Eigen/Geometry>

#include "commands.hpp"
#include "job.hpp"
#include "json.hpp"
#include "pbl/config.hpp"
#include "pbl/error.hpp"
#include "pbl/field.hpp"
#include "pbl/fit.hpp"
#include "pbl/grad_check.hpp"
#include "pbl/io.hpp"
#include "pbl/sensor_model.hpp"
#include "pbl/synth.hpp"

namespace pblsim {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using pbl::format_double;

std::array<int, 3> dims_for(const Eigen::Vector3d& lo, const Eigen::Vector3d& hi, double cell) {
  std::array<int, 3> dims{};
  for (int a = 0; a < 3; ++a) {
    if (!(hi[a] > lo[a])) throw pbl::ConfigError("--bounds: max must exceed min on every axis");
    dims[static_cast<std::size_t>(a)] = static_cast<int>(std::ceil((hi[a] - lo[a]) / cell - 1e-9));
  }
  return dims;
}

pbl::Grid<double> clamped(const pbl::Grid<double>& g) {
  pbl::Grid<double> out = g;
  for (auto& v : out.values()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

// --- fit ----------------------------------------------------------------------------------------

struct FitArgs {
  CommonOptions common;
  std::string input;
  std::vector<std::string> depth;
  std::vector<std::string> intensity;
  std::string poses;
  std::string poses_end;
  std::string intrinsics;
  std::string params_init;
  std::string truth_params;
  std::string field_init;
  std::string scene;
  std::vector<double> bounds;
  double cell = 0.25;
  double sigma_max = 60.0;
  std::vector<std::string> free{"laser"};
  int iterations = 300;
  double field_lr = 2e-2;
  double sensor_lr = 1e-2;
  double pose_lr = 1e-3;
  double lr_final = 0.05;
  double w_depth = 1.0;
  double w_intensity = 1.0;
  double w_drop = 0.1;
  double w_reflectivity = 0.01;
  double w_laser = 0.01;
  double crease_deg = 0.0;
  double tau_deg = 80.0;
  double step = 0.0;
  bool no_shutter = false;
  bool no_masks = false;
  bool reset_laser = false;
  double depth_scale = pbl::kDefaultDepthScale;
};

pbl::FitFree parse_free(const std::vector<std::string>& names) {
  pbl::FitFree f;
  for (const auto& n : names) {
    if (n == "density") f.density = true;
    else if (n == "intensity") f.intensity = true;
    else if (n == "reflectivity") f.reflectivity = true;
    else if (n == "drop") f.drop = true;
    else if (n == "distance") f.distance = true;
    else if (n == "laser") f.laser = true;
    else if (n == "incidence") f.incidence = true;
    else if (n == "poses") f.pose_offsets = true;
    else if (n == "all") f = {true, true, true, true, true, true, true, f.pose_offsets};
    else throw pbl::ConfigError("--free: unknown group '" + n + "'");
  }
  return f;
}

void run_fit(const CLI::App& sub, const FitArgs& a) {
  Job job("fit", sub, a.common);
  auto in_dir = [&](const std::string& explicit_path, const char* name) {
    if (!explicit_path.empty() || a.input.empty()) return explicit_path;
    const std::string p = (fs::path(a.input) / name).string();
    return fs::exists(p) ? p : std::string();
  };
  const std::string intr_path = in_dir(a.intrinsics, "intrinsics.txt");
  const std::string poses_path = in_dir(a.poses, "poses.txt");
  const std::string poses_end_path = in_dir(a.poses_end, "poses_end.txt");
  if (intr_path.empty()) throw pbl::ConfigError("--intrinsics required");
  if (poses_path.empty()) throw pbl::ConfigError("--poses required");

  const pbl::SensorIntrinsics intr = pbl::read_intrinsics(job.input(intr_path));
  const auto begin = pbl::read_poses(job.input(poses_path));
  std::vector<pbl::FramePose> end = begin;
  if (!poses_end_path.empty()) end = pbl::read_poses(job.input(poses_end_path));
  if (end.size() != begin.size()) throw pbl::ConfigError("poses and end poses differ in length");

  std::vector<std::string> depth = a.depth, intensity = a.intensity;
  if (depth.empty() && !a.input.empty())
    for (const auto& [id, pose] : begin) {
      depth.push_back((fs::path(a.input) / numbered("frame_%03lld_depth.png", id)).string());
      intensity.push_back((fs::path(a.input) / numbered("frame_%03lld_intensity.png", id)).string());
    }
  if (depth.size() != begin.size() || intensity.size() != begin.size())
    throw pbl::ConfigError("need one depth and one intensity image per pose");

  std::vector<pbl::Observation> obs;
  std::vector<pbl::RangeImage> images;
  for (std::size_t f = 0; f < begin.size(); ++f) {
    pbl::RangeImage img = pbl::read_range_png(job.input(depth[f]), job.input(intensity[f]), a.depth_scale);
    if (img.width != intr.width || img.height != intr.height)
      throw pbl::ConfigError("image size does not match the intrinsics: " + depth[f]);
    if (begin[f].first != end[f].first) throw pbl::ConfigError("poses and end poses list different frame ids");
    obs.push_back({img, begin[f].second, a.no_shutter ? begin[f].second : end[f].second});
    images.push_back(std::move(img));
  }

  pbl::IntensityParams init = a.params_init.empty() ? pbl::IntensityParams::defaults(intr.height)
                                                    : pbl::read_intensity_params(job.input(a.params_init));
  if (a.reset_laser) std::fill(init.laser_powers.begin(), init.laser_powers.end(), 1.0);
  pbl::VoxelField field;
  if (!a.field_init.empty()) {
    field = pbl::read_field(job.input(a.field_init));
  } else {
    if (a.bounds.size() != 6) throw pbl::ConfigError("--bounds (6 values) required without --field-init");
    const Eigen::Vector3d lo(a.bounds[0], a.bounds[1], a.bounds[2]), hi(a.bounds[3], a.bounds[4], a.bounds[5]);
    const auto dims = dims_for(lo, hi, a.cell);
    field = a.scene.empty() ? pbl::VoxelField::empty(dims, a.cell, lo)
                            : pbl::voxelize(pbl::load_scene(job.input(a.scene)), dims, a.cell, lo, a.sigma_max);
  }

  pbl::MaskSet masks = pbl::MaskSet::empty(intr.height, intr.width, deg_to_rad(a.tau_deg));
  if (!a.no_masks) {
    masks.drop_mask = pbl::build_drop_mask(images);
    masks.intensity_mask = pbl::build_intensity_mask(images);
  }

  pbl::FitOptions options;
  options.optimizer.iterations = a.iterations;
  options.optimizer.final_lr_fraction = a.lr_final;
  options.optimizer.seed = job.seed();
  options.optimizer.workers = job.workers();
  options.field_lr = a.field_lr;
  options.sensor_lr = a.sensor_lr;
  options.pose_lr = a.pose_lr;
  options.weights = {a.w_depth, a.w_intensity, a.w_drop, a.w_reflectivity, a.w_laser};
  options.render.step = a.step;
  options.render.shutter = !a.no_shutter;
  options.render.workers = job.workers();
  options.render.normals.crease_angle = deg_to_rad(a.crease_deg);
  const pbl::FitFree free = parse_free(a.free);

  pbl::FitResult result;
  bool diverged = false;
  try {
    result = pbl::fit(obs, intr, field, init, masks, options, free);
  } catch (const pbl::FitDiverged& e) {
    result = e.last_finite();
    diverged = true;
  }

  pbl::write_field(job.output("field.bin"), result.state.field);
  pbl::write_intensity_params(job.output("params.txt"), result.state.params);
  std::ostringstream offsets;
  offsets << "# id rx ry rz tx ty tz\n";
  for (std::size_t f = 0; f < result.state.offsets.size(); ++f) {
    const auto& o = result.state.offsets[f];
    offsets << begin[f].first;
    for (int k = 0; k < 3; ++k) offsets << " " << format_double(o.rotation[k]);
    for (int k = 0; k < 3; ++k) offsets << " " << format_double(o.translation[k]);
    offsets << "\n";
  }
  pbl::write_text_file(job.output("offsets.txt"), offsets.str());
  std::ostringstream csv;
  csv << "iteration,best_loss,loss\n";
  for (std::size_t k = 0; k < result.history.size(); ++k)
    csv << k << "," << format_double(result.history[k]) << ","
        << format_double(k < result.raw_history.size() ? result.raw_history[k] : result.history[k]) << "\n";
  pbl::write_text_file(job.output("history.csv"), csv.str());

  const auto& l = result.losses;
  json r;
  r["frames"] = obs.size();
  r["iterations"] = a.iterations;
  r["evaluations"] = result.evaluations;
  r["diverged"] = diverged;
  r["losses"] = {{"total", l.total}, {"depth", l.depth}, {"intensity", l.intensity}, {"drop", l.drop},
                 {"reflectivity", l.reflectivity}, {"laser", l.laser}};
  r["intensity_pixels"] = l.intensity_pixels;
  r["intensity_rmse"] = std::sqrt(l.intensity);
  if (!a.truth_params.empty()) {
    const pbl::IntensityParams truth = pbl::read_intensity_params(job.input(a.truth_params));
    if (truth.laser_powers.size() != result.state.params.laser_powers.size())
      throw pbl::ConfigError("--truth-params: laser count differs");
    double worst = 0.0;
    for (std::size_t i = 0; i < truth.laser_powers.size(); ++i)
      worst = std::max(worst, std::abs(result.state.params.laser_powers[i] - truth.laser_powers[i]) / truth.laser_powers[i]);
    r["laser_max_rel_error"] = worst;
    std::printf("laser powers: max relative error %.4f%% over %zu rows\n", 100.0 * worst, truth.laser_powers.size());
  }
  pbl::write_text_file(job.output("losses.json"), r.dump(2) + "\n");
  std::printf("fit: loss %.6g -> %.6g after %d iterations\n", result.history.front(), result.history.back(), a.iterations);
  job.write_manifest();
  if (diverged) throw pbl::NumericError("fit diverged; best finite state written");
}

// --- resim --------------------------------------------------------------------------------------

struct ResimArgs {
  CommonOptions common;
  std::string field;
  std::string params;
  std::string intrinsics;
  std::string poses;
  std::string poses_end;
  bool no_shutter = false;
  double reflect_scale = 0.0;
  bool disable_distance = false;
  bool disable_laser = false;
  bool disable_incidence = false;
  double step = 0.0;
  double max_range = 120.0;
  double depth_scale = pbl::kDefaultDepthScale;
};

void run_resim(const CLI::App& sub, const ResimArgs& a) {
  Job job("resim", sub, a.common);
  const pbl::VoxelField field = pbl::read_field(job.input(a.field));
  pbl::IntensityParams params = pbl::read_intensity_params(job.input(a.params));
  const pbl::SensorIntrinsics intr = pbl::read_intrinsics(job.input(a.intrinsics));
  const auto begin = pbl::read_poses(job.input(a.poses));
  std::vector<pbl::FramePose> end = begin;
  if (!a.poses_end.empty()) end = pbl::read_poses(job.input(a.poses_end));
  if (end.size() != begin.size()) throw pbl::ConfigError("poses and end poses differ in length");
  if (sub.count("--reflect-scale") > 0) params.reflect_scale = a.reflect_scale;
  if (a.disable_distance) params.distance_enabled = false;
  if (a.disable_laser) params.laser_enabled = false;
  if (a.disable_incidence) params.incidence_enabled = false;
  params.validate();

  pbl::RenderOptions options;
  options.step = a.step;
  options.max_range = a.max_range;
  options.shutter = !a.no_shutter;
  options.workers = job.workers();
  for (std::size_t f = 0; f < begin.size(); ++f) {
    const long long id = begin[f].first;
    const pbl::ScanRender r = pbl::render_scan(field, intr, begin[f].second, end[f].second, params, options);
    pbl::RangeImage img = r.image;
    img.intensity = clamped(img.intensity);
    pbl::write_range_png(img, job.output(numbered("resim_%03lld_depth.png", id)),
                         job.output(numbered("resim_%03lld_intensity.png", id)), a.depth_scale);
    pbl::write_png_gray16(job.output(numbered("resim_%03lld_reflectivity.png", id)),
                          to_gray16(r.render.reflectivity, 65535.0));
    std::printf("frame %lld: %zu returns\n", id, img.valid_count());
  }
  job.write_manifest();
}

// --- render-camera ------------------------------------------------------------------------------

struct CameraArgs {
  CommonOptions common;
  std::string field;
  std::string params;
  double fx = 500.0;
  double fy = 500.0;
  double cx = 320.0;
  double cy = 240.0;
  int width = 640;
  int height = 480;
  std::vector<double> position{0.0, 0.0, 0.0};
  double yaw_deg = 0.0;
  double pitch_deg = 0.0;
  double step = 0.0;
  double max_range = 120.0;
  double depth_scale = pbl::kDefaultDepthScale;
};

/// Camera looking along world +x rotated by yaw about +z, pitch positive upward.
pbl::Pose camera_pose(const CameraArgs& a) {
  Eigen::Matrix3d base;
  base.col(0) = Eigen::Vector3d(0, -1, 0);
  base.col(1) = Eigen::Vector3d(0, 0, -1);
  base.col(2) = Eigen::Vector3d(1, 0, 0);
  const Eigen::Matrix3d r = Eigen::AngleAxisd(deg_to_rad(a.yaw_deg), Eigen::Vector3d::UnitZ()).toRotationMatrix() *
                            Eigen::AngleAxisd(-deg_to_rad(a.pitch_deg), Eigen::Vector3d::UnitY()).toRotationMatrix() *
                            base;
  return pbl::Pose(Eigen::Vector3d(a.position[0], a.position[1], a.position[2]), Eigen::Quaterniond(r).normalized());
}

void run_render_camera(const CLI::App& sub, const CameraArgs& a) {
  Job job("render-camera", sub, a.common);
  const pbl::VoxelField field = pbl::read_field(job.input(a.field));
  const pbl::IntensityParams params = pbl::read_intensity_params(job.input(a.params));
  const pbl::Pinhole cam{a.fx, a.fy, a.cx, a.cy, a.width, a.height};
  if (!(a.fx > 0.0 && a.fy > 0.0) || a.width <= 0 || a.height <= 0)
    throw pbl::ConfigError("camera focal lengths and size must be positive");
  pbl::RenderOptions options;
  options.step = a.step;
  options.max_range = a.max_range;
  options.workers = job.workers();
  const pbl::CameraRender r = pbl::render_camera(field, cam, camera_pose(a), params, options);
  pbl::write_png_gray16(job.output("camera_depth.png"), to_gray16(r.render.depth, a.depth_scale));
  pbl::write_png_gray16(job.output("camera_intensity.png"), to_gray16(clamped(r.intensity), 65535.0));
  pbl::write_png_gray16(job.output("camera_reflectivity.png"), to_gray16(r.render.reflectivity, 65535.0));
  job.write_manifest();
}

// --- grad-check ---------------------------------------------------------------------------------

struct GradArgs {
  CommonOptions common;
  std::string target = "all";
  std::size_t points = 100;
  double step = 1e-5;
  double floor = 1e-4;
  double tolerance = 1e-4;
  bool zero_upstream = false;
};

void run_grad_check(const CLI::App& sub, const GradArgs& a) {
  Job job("grad-check", sub, a.common);
  std::vector<pbl::GradTarget> targets;
  if (a.target == "all") {
    targets = {pbl::GradTarget::kRenderRay, pbl::GradTarget::kDistance, pbl::GradTarget::kIncidence,
               pbl::GradTarget::kApplyModel, pbl::GradTarget::kReprojection};
  } else if (const auto t = pbl::parse_grad_target(a.target)) {
    targets = {*t};
  } else {
    throw pbl::ConfigError("--target: unknown '" + a.target + "'");
  }
  pbl::GradCheckOptions options;
  options.points = a.points;
  options.step = a.step;
  options.floor = a.floor;
  options.seed = job.seed();
  options.zero_upstream = a.zero_upstream;

  json out = json::array();
  double worst = 0.0;
  for (const auto t : targets) {
    const pbl::GradCheckReport r = pbl::grad_check(t, options);
    worst = std::max(worst, r.max_rel_error);
    out.push_back({{"target", pbl::grad_target_name(t)},
                   {"points", r.points},
                   {"comparisons", r.comparisons},
                   {"max_rel_error", r.max_rel_error},
                   {"max_abs_analytic", r.max_abs_analytic},
                   {"max_abs_numeric", r.max_abs_numeric}});
    std::printf("%-13s %zu points, max relative error %.3g\n", pbl::grad_target_name(t).c_str(), r.points,
                r.max_rel_error);
  }
  pbl::write_text_file(job.output("grad_check.json"), out.dump(2) + "\n");
  job.write_manifest();
  if (!(worst < a.tolerance)) throw pbl::NumericError("gradient mismatch: max relative error " + std::to_string(worst));
}

}  // namespace

void register_field_commands(CLI::App& app) {
  {
    auto a = std::make_shared<FitArgs>();
    CLI::App* sub = app.add_subcommand("fit", "Fit the field and sensor parameters to observed scans");
    add_common_options(*sub, a->common);
    sub->add_option("--input", a->input, "Directory written by synth");
    sub->add_option("--depth", a->depth, "Depth PNGs, one per pose");
    sub->add_option("--intensity", a->intensity, "Intensity PNGs, one per pose");
    sub->add_option("--poses", a->poses, "Poses at the start of each revolution");
    sub->add_option("--poses-end", a->poses_end, "Poses at the end of each revolution");
    sub->add_option("--intrinsics", a->intrinsics, "Intrinsics file");
    sub->add_option("--params-init", a->params_init, "Initial intensity parameters");
    sub->add_option("--truth-params", a->truth_params, "Planted parameters to report laser-power errors against");
    sub->add_option("--field-init", a->field_init, "Initial field checkpoint");
    sub->add_option("--scene", a->scene, "Scene description to voxelize as the initial field");
    sub->add_option("--bounds", a->bounds, "Field box: xmin ymin zmin xmax ymax zmax")->expected(6);
    sub->add_option("--cell", a->cell, "Cell size [m]")->capture_default_str();
    sub->add_option("--sigma-max", a->sigma_max, "Density inside solids [1/m]")->capture_default_str();
    sub->add_option("--free", a->free,
                    "Groups to optimize: density intensity reflectivity drop distance laser incidence poses all")
        ->capture_default_str();
    sub->add_option("--iterations", a->iterations, "Optimizer iterations")->capture_default_str();
    sub->add_option("--field-lr", a->field_lr, "Field learning rate")->capture_default_str();
    sub->add_option("--sensor-lr", a->sensor_lr, "Sensor parameter learning rate")->capture_default_str();
    sub->add_option("--pose-lr", a->pose_lr, "Pose offset learning rate")->capture_default_str();
    sub->add_option("--lr-final", a->lr_final, "Final learning rate relative to the first")->capture_default_str();
    sub->add_option("--w-depth", a->w_depth, "Depth loss weight")->capture_default_str();
    sub->add_option("--w-intensity", a->w_intensity, "Intensity loss weight")->capture_default_str();
    sub->add_option("--w-drop", a->w_drop, "Ray drop loss weight")->capture_default_str();
    sub->add_option("--w-reflectivity", a->w_reflectivity, "Reflectivity prior weight")->capture_default_str();
    sub->add_option("--w-laser", a->w_laser, "Laser power prior weight")->capture_default_str();
    sub->add_option("--crease-deg", a->crease_deg, "Crease angle of the normal repair [deg], 0 disables")
        ->capture_default_str();
    sub->add_option("--tau-deg", a->tau_deg, "Shallow incidence threshold [deg]")->capture_default_str();
    sub->add_option("--step", a->step, "Ray marching step [m], 0: half a cell")->capture_default_str();
    sub->add_flag("--no-shutter", a->no_shutter, "Treat every revolution as captured at its start pose");
    sub->add_flag("--no-masks", a->no_masks, "Skip the drop and intensity masks");
    sub->add_flag("--reset-laser", a->reset_laser, "Start every laser power at 1");
    sub->add_option("--depth-scale", a->depth_scale, "Depth PNG units per meter")->capture_default_str();
    sub->callback([sub, a] { run_fit(*sub, *a); });
  }
  {
    auto a = std::make_shared<ResimArgs>();
    CLI::App* sub = app.add_subcommand("resim", "Render LiDAR scans from a fitted field at new poses");
    add_common_options(*sub, a->common);
    sub->add_option("--field", a->field, "Field checkpoint")->required();
    sub->add_option("--params", a->params, "Intensity parameters")->required();
    sub->add_option("--intrinsics", a->intrinsics, "Intrinsics file")->required();
    sub->add_option("--poses", a->poses, "Poses at the start of each revolution")->required();
    sub->add_option("--poses-end", a->poses_end, "Poses at the end of each revolution");
    sub->add_flag("--no-shutter", a->no_shutter, "Render every column from the start pose");
    sub->add_option("--reflect-scale", a->reflect_scale, "Reflectance exponent rescaler a_r")->check(CLI::PositiveNumber);
    sub->add_flag("--disable-distance", a->disable_distance, "Render without distance falloff");
    sub->add_flag("--disable-laser", a->disable_laser, "Render without per-row laser power");
    sub->add_flag("--disable-incidence", a->disable_incidence, "Render without incidence attenuation");
    sub->add_option("--step", a->step, "Ray marching step [m], 0: half a cell")->capture_default_str();
    sub->add_option("--max-range", a->max_range, "Maximum range [m]")->capture_default_str();
    sub->add_option("--depth-scale", a->depth_scale, "Depth PNG units per meter")->capture_default_str();
    sub->callback([sub, a] { run_resim(*sub, *a); });
  }
  {
    auto a = std::make_shared<CameraArgs>();
    CLI::App* sub = app.add_subcommand("render-camera", "Pinhole view of a fitted field");
    add_common_options(*sub, a->common);
    sub->add_option("--field", a->field, "Field checkpoint")->required();
    sub->add_option("--params", a->params, "Intensity parameters")->required();
    sub->add_option("--fx", a->fx, "Focal length x [px]")->capture_default_str();
    sub->add_option("--fy", a->fy, "Focal length y [px]")->capture_default_str();
    sub->add_option("--cx", a->cx, "Principal point x [px]")->capture_default_str();
    sub->add_option("--cy", a->cy, "Principal point y [px]")->capture_default_str();
    sub->add_option("--width", a->width, "Image width")->capture_default_str();
    sub->add_option("--height", a->height, "Image height")->capture_default_str();
    sub->add_option("--position", a->position, "Camera center x y z [m]")->expected(3)->capture_default_str();
    sub->add_option("--yaw-deg", a->yaw_deg, "Heading from +x about +z [deg]")->capture_default_str();
    sub->add_option("--pitch-deg", a->pitch_deg, "Upward tilt [deg]")->capture_default_str();
    sub->add_option("--step", a->step, "Ray marching step [m], 0: half a cell")->capture_default_str();
    sub->add_option("--max-range", a->max_range, "Maximum range [m]")->capture_default_str();
    sub->add_option("--depth-scale", a->depth_scale, "Depth PNG units per meter")->capture_default_str();
    sub->callback([sub, a] { run_render_camera(*sub, *a); });
  }
  {
    auto a = std::make_shared<GradArgs>();
    CLI::App* sub = app.add_subcommand("grad-check", "Analytic derivatives against central differences");
    add_common_options(*sub, a->common);
    sub->add_option("--target", a->target,
                    "render_ray, n_distance, n_incidence, apply_model, reprojection or all")
        ->capture_default_str();
    sub->add_option("--points", a->points, "Random points per target")->capture_default_str();
    sub->add_option("--step", a->step, "Relative difference step")->capture_default_str();
    sub->add_option("--floor", a->floor, "Denominator floor of the relative error")->capture_default_str();
    sub->add_option("--tolerance", a->tolerance, "Largest accepted relative error")->capture_default_str();
    sub->add_flag("--zero-upstream", a->zero_upstream, "render_ray: mask every output weight to 0");
    sub->callback([sub, a] { run_grad_check(*sub, *a); });
  }
}

}  // namespace pblsim
