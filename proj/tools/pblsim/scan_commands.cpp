#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numbers>
#include <sstream>

#include "commands.hpp"
#include "job.hpp"
#include "json.hpp"
#include "pbl/calibration.hpp"
#include "pbl/config.hpp"
#include "pbl/error.hpp"
#include "pbl/io.hpp"
#include "pbl/normals.hpp"
#include "pbl/sensor_model.hpp"
#include "pbl/synth.hpp"
#include "plot.hpp"

namespace pblsim {

namespace {

using pbl::format_double;
using json = nlohmann::ordered_json;

std::vector<std::uint8_t> mask_bytes(const pbl::Grid<std::uint8_t>& mask) {
  std::vector<std::uint8_t> out(mask.size());
  for (std::size_t k = 0; k < mask.size(); ++k) out[k] = mask.values()[k] ? 255 : 0;
  return out;
}

// --- synth ---------------------------------------------------------------------------------

struct SynthArgs {
  CommonOptions common;
  std::string scene;
  int frames = 0;
  double depth_scale = pbl::kDefaultDepthScale;
};

void run_synth(const CLI::App& sub, const SynthArgs& a) {
  Job job("synth", sub, a.common);
  pbl::SceneSpec spec = pbl::load_scene(job.input(a.scene));
  if (sub.count("--seed") > 0) spec.seed = a.common.seed;
  job.set_seed(spec.seed);
  const int frames = a.frames > 0 ? a.frames : spec.frame_count();
  if (frames > spec.frame_count())
    throw pbl::ConfigError("--frames " + std::to_string(frames) + " exceeds the " +
                           std::to_string(spec.frame_count()) + " trajectory poses");

  std::vector<pbl::FramePose> begin, end;
  for (int f = 0; f < frames; ++f) {
    const pbl::SyntheticScan s = pbl::synthesize_scan(spec, f, job.workers());
    pbl::write_kitti_bin(job.output(numbered("frame_%03lld.bin", f)), s.cloud);
    pbl::write_range_png(s.observed, job.output(numbered("frame_%03lld_depth.png", f)),
                         job.output(numbered("frame_%03lld_intensity.png", f)), a.depth_scale);
    pbl::write_range_png(s.truth, job.output(numbered("truth_%03lld_depth.png", f)),
                         job.output(numbered("truth_%03lld_intensity.png", f)), a.depth_scale);
    pbl::write_png_gray16(job.output(numbered("truth_%03lld_incidence.png", f)), to_gray16(s.cos_incidence, 65535.0));
    begin.emplace_back(f, s.pose_begin);
    end.emplace_back(f, s.pose_end);
    std::printf("frame %d: %zu points\n", f, s.cloud.size());
  }
  pbl::write_intrinsics(job.output("intrinsics.txt"), spec.intrinsics);
  pbl::write_intensity_params(job.output("params.txt"), spec.params);
  pbl::write_poses(job.output("poses.txt"), begin);
  pbl::write_poses(job.output("poses_end.txt"), end);
  job.write_manifest();
}

// --- project / unproject ----------------------------------------------------------------------

struct ProjectArgs {
  CommonOptions common;
  std::string cloud;
  std::string intrinsics;
  bool rings = false;
  double depth_scale = pbl::kDefaultDepthScale;
};

void run_project(const CLI::App& sub, const ProjectArgs& a) {
  Job job("project", sub, a.common);
  const pbl::SensorIntrinsics intr = pbl::read_intrinsics(job.input(a.intrinsics));
  pbl::PointCloud cloud = pbl::read_kitti_bin(job.input(a.cloud));
  if (a.rings) cloud = pbl::recover_rings(cloud, intr.height, intr.width);
  const pbl::Projection p = pbl::project(cloud, intr);
  pbl::write_range_png(p.image, job.output("depth.png"), job.output("intensity.png"), a.depth_scale);
  json stats;
  stats["points"] = cloud.size();
  stats["projected"] = p.stats.projected;
  stats["collisions"] = p.stats.collisions;
  stats["out_of_fov"] = p.stats.out_of_fov;
  stats["invalid"] = p.stats.invalid;
  stats["valid_pixels"] = p.image.valid_count();
  pbl::write_text_file(job.output("projection.json"), stats.dump(2) + "\n");
  job.write_manifest();
}

struct UnprojectArgs {
  CommonOptions common;
  std::string depth;
  std::string intensity;
  std::string intrinsics;
  double depth_scale = pbl::kDefaultDepthScale;
};

void run_unproject(const CLI::App& sub, const UnprojectArgs& a) {
  Job job("unproject", sub, a.common);
  const pbl::SensorIntrinsics intr = pbl::read_intrinsics(job.input(a.intrinsics));
  const pbl::RangeImage img = a.intensity.empty()
                                  ? read_depth_png(job.input(a.depth), a.depth_scale)
                                  : pbl::read_range_png(job.input(a.depth), job.input(a.intensity), a.depth_scale);
  if (img.width != intr.width || img.height != intr.height)
    throw pbl::ConfigError("image size does not match the intrinsics");
  pbl::write_kitti_bin(job.output("cloud.bin"), pbl::unproject(img, intr));
  job.write_manifest();
}

// --- calibrate ---------------------------------------------------------------------------------

struct CalibrateArgs {
  CommonOptions common;
  std::vector<std::string> frames;
  int width = 1024;
  int height = 64;
  std::string init;
  int iterations = 2000;
  double lr = 2e-3;
  double lr_final = 1e-3;
  std::vector<double> weights{1.0, 0.0, 1.0, 1.0};
  bool freeze_diodes = false;
};

void run_calibrate(const CLI::App& sub, const CalibrateArgs& a) {
  Job job("calibrate", sub, a.common);
  pbl::CalibProblem problem;
  if (!a.init.empty()) problem.initial = pbl::read_intrinsics(job.input(a.init));
  const int width = a.init.empty() ? a.width : problem.initial.width;
  const int height = a.init.empty() ? a.height : problem.initial.height;
  for (const auto& path : a.frames) problem.frames.push_back(pbl::recover_rings(pbl::read_kitti_bin(job.input(path)), height, width));
  if (a.init.empty()) problem.initial = pbl::initial_intrinsics_from_rings(problem.frames.front(), height, width);
  problem.free = pbl::CalibFreeMask::all(problem.initial);
  if (a.freeze_diodes) std::fill(problem.free.diodes.begin(), problem.free.diodes.end(), false);
  problem.weights = {a.weights[0], a.weights[1], a.weights[2], a.weights[3]};

  pbl::CalibOptions options;
  options.optimizer.iterations = a.iterations;
  options.optimizer.learning_rate = a.lr;
  options.optimizer.final_lr_fraction = a.lr_final;
  options.optimizer.seed = a.common.seed;
  options.optimizer.workers = job.workers();

  const double initial_loss = pbl::reprojection_loss(problem.initial, problem.frames, problem.weights);
  pbl::CalibReport report;
  bool diverged = false;
  try {
    report = pbl::calibrate(problem, options);
  } catch (const pbl::CalibrationDiverged& e) {
    report = e.last_finite();
    diverged = true;
  }

  pbl::write_intrinsics(job.output("intrinsics.txt"), report.final);
  std::ostringstream csv;
  csv << "iteration,loss\n" << "0," << format_double(initial_loss) << "\n";
  for (std::size_t k = 0; k < report.loss_history.size(); ++k)
    csv << k + 1 << "," << format_double(report.loss_history[k]) << "\n";
  pbl::write_text_file(job.output("loss_history.csv"), csv.str());

  json r;
  r["frames"] = problem.frames.size();
  r["initial_loss"] = initial_loss;
  r["final_loss"] = report.loss_history.empty() ? initial_loss : report.loss_history.back();
  r["evaluations"] = report.evaluations;
  r["diverged"] = diverged;
  r["mean_abs_residual"] = {{"depth", report.per_channel_residuals.depth},
                            {"intensity", report.per_channel_residuals.intensity},
                            {"row", report.per_channel_residuals.row},
                            {"col", report.per_channel_residuals.col}};
  pbl::write_text_file(job.output("report.json"), r.dump(2) + "\n");
  job.write_manifest();
  if (diverged) throw pbl::NumericError("calibration diverged; best finite state written");
}

// --- normals -----------------------------------------------------------------------------------

struct NormalsArgs {
  CommonOptions common;
  std::string depth;
  std::string intrinsics;
  double depth_scale = pbl::kDefaultDepthScale;
  double edge_threshold = 0.3;
  double artifact_deg = 25.0;
  double crease_deg = 0.0;
  double tau_deg = 80.0;
};

pbl::RepairConfig repair_config(double edge_threshold, double artifact_deg, double crease_deg) {
  pbl::RepairConfig c;
  c.edge_threshold = edge_threshold;
  c.artifact_angle = deg_to_rad(artifact_deg);
  c.crease_angle = deg_to_rad(crease_deg);
  return c;
}

void run_normals(const CLI::App& sub, const NormalsArgs& a) {
  Job job("normals", sub, a.common);
  const pbl::SensorIntrinsics intr = pbl::read_intrinsics(job.input(a.intrinsics));
  const pbl::RangeImage img = read_depth_png(job.input(a.depth), a.depth_scale);
  if (img.width != intr.width || img.height != intr.height)
    throw pbl::ConfigError("image size does not match the intrinsics");
  const pbl::NormalImage n =
      pbl::normals_from_range(img, intr, repair_config(a.edge_threshold, a.artifact_deg, a.crease_deg));
  const pbl::IncidenceImage inc = pbl::incidence_image(n, intr, deg_to_rad(a.tau_deg));

  const int h = intr.height, w = intr.width;
  std::vector<std::uint16_t> rgb(static_cast<std::size_t>(h) * w * 3, 0);
  std::vector<std::uint8_t> edges(static_cast<std::size_t>(h) * w, 0);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      const std::size_t k = static_cast<std::size_t>(i) * w + j;
      edges[k] = static_cast<std::uint8_t>(85 * static_cast<int>(n.edge_flags(i, j)));
      if (!n.valid(i, j)) continue;
      for (int c = 0; c < 3; ++c)
        rgb[3 * k + c] = static_cast<std::uint16_t>(std::lround(std::clamp((n.normal(i, j)[c] + 1.0) / 2.0, 0.0, 1.0) * 65535.0));
    }
  pbl::write_png_rgb16(job.output("normals.png"), w, h, rgb);
  pbl::write_png_gray16(job.output("incidence.png"), to_gray16(inc.cos, 65535.0));
  pbl::write_png_gray8(job.output("edges.png"), w, h, edges);
  pbl::write_png_gray8(job.output("usable.png"), w, h, mask_bytes(inc.usable));
  job.write_manifest();
}

// --- analyze -----------------------------------------------------------------------------------

struct AnalyzeArgs {
  CommonOptions common;
  std::vector<std::string> depth;
  std::vector<std::string> intensity;
  std::string intrinsics;
  double depth_scale = pbl::kDefaultDepthScale;
  std::vector<double> distance_edges{1, 5, 10, 15, 20, 30, 40, 60, 80};
  std::vector<double> angle_edges_deg{0, 10, 20, 30, 40, 50, 60, 70, 80, 90};
  double drop_threshold = pbl::kDefaultDropMaskThreshold;
  double intensity_threshold = pbl::kDefaultIntensityMaskThreshold;
  double crease_deg = 0.0;
};

/// Count-weighted pooling of bins that share an index along one axis.
BarSeries pool(const std::vector<pbl::StatsBin>& bins, std::size_t groups, bool by_angle, std::size_t n_angle) {
  std::vector<double> n(groups, 0.0), s(groups, 0.0), s2(groups, 0.0);
  for (std::size_t k = 0; k < bins.size(); ++k) {
    const std::size_t g = by_angle ? k % n_angle : k / n_angle;
    const double c = static_cast<double>(bins[k].count);
    n[g] += c;
    s[g] += c * bins[k].mean;
    s2[g] += c * (bins[k].stddev * bins[k].stddev + bins[k].mean * bins[k].mean);
  }
  BarSeries out;
  for (std::size_t g = 0; g < groups; ++g) {
    if (n[g] == 0.0) {
      out.values.push_back(std::nan(""));
      out.spread.push_back(0.0);
      continue;
    }
    const double m = s[g] / n[g];
    out.values.push_back(m);
    out.spread.push_back(std::sqrt(std::max(0.0, s2[g] / n[g] - m * m)));
  }
  return out;
}

void run_analyze(const CLI::App& sub, const AnalyzeArgs& a) {
  Job job("analyze", sub, a.common);
  if (a.depth.size() != a.intensity.size())
    throw pbl::ConfigError("--depth and --intensity need the same number of files");
  if (a.distance_edges.size() < 2 || a.angle_edges_deg.size() < 2)
    throw pbl::ConfigError("bin edges need at least two values");
  const pbl::SensorIntrinsics intr = pbl::read_intrinsics(job.input(a.intrinsics));
  const pbl::RepairConfig repair = repair_config(0.3, 25.0, a.crease_deg);

  std::vector<pbl::RangeImage> images;
  std::vector<pbl::Grid<double>> cos;
  std::vector<pbl::Grid<std::uint8_t>> exclude;
  for (std::size_t f = 0; f < a.depth.size(); ++f) {
    pbl::RangeImage img = pbl::read_range_png(job.input(a.depth[f]), job.input(a.intensity[f]), a.depth_scale);
    if (img.width != intr.width || img.height != intr.height)
      throw pbl::ConfigError("image size does not match the intrinsics: " + a.depth[f]);
    const pbl::NormalImage n = pbl::normals_from_range(img, intr, repair);
    const pbl::IncidenceImage inc = pbl::incidence_image(n, intr, std::numbers::pi / 2.0);
    pbl::Grid<std::uint8_t> ex(img.height, img.width, 0);
    for (std::size_t k = 0; k < ex.size(); ++k) ex.values()[k] = inc.usable.values()[k] ? 0 : 1;
    images.push_back(std::move(img));
    cos.push_back(inc.cos);
    exclude.push_back(std::move(ex));
  }
  std::vector<pbl::StatsFrame> frames;
  for (std::size_t f = 0; f < images.size(); ++f) frames.push_back({&images[f], &cos[f], &exclude[f]});

  std::vector<double> angle_edges;
  for (double d : a.angle_edges_deg) angle_edges.push_back(deg_to_rad(d));
  const auto bins = pbl::analyze_statistics(frames, a.distance_edges, angle_edges);

  std::ostringstream csv;
  csv << "d_lo,d_hi,angle_lo_deg,angle_hi_deg,count,mean,std\n";
  const std::size_t na = a.angle_edges_deg.size() - 1;
  for (std::size_t k = 0; k < bins.size(); ++k) {
    const auto& b = bins[k];
    csv << format_double(b.d_lo) << "," << format_double(b.d_hi) << "," << format_double(a.angle_edges_deg[k % na])
        << "," << format_double(a.angle_edges_deg[k % na + 1]) << "," << b.count << "," << format_double(b.mean)
        << "," << format_double(b.stddev) << "\n";
  }
  pbl::write_text_file(job.output("stats.csv"), csv.str());

  const std::size_t n_angle = na, n_dist = a.distance_edges.size() - 1;
  const RgbImage by_angle = render_bar_plot(pool(bins, n_angle, true, n_angle));
  const RgbImage by_distance = render_bar_plot(pool(bins, n_dist, false, n_angle));
  pbl::write_png_rgb8(job.output("plot_by_angle.png"), by_angle.width, by_angle.height, by_angle.rgb);
  pbl::write_png_rgb8(job.output("plot_by_distance.png"), by_distance.width, by_distance.height, by_distance.rgb);

  const auto drop = pbl::build_drop_mask(images, a.drop_threshold);
  const auto dark = pbl::build_intensity_mask(images, a.intensity_threshold);
  pbl::write_png_gray8(job.output("drop_mask.png"), intr.width, intr.height, mask_bytes(drop));
  pbl::write_png_gray8(job.output("intensity_mask.png"), intr.width, intr.height, mask_bytes(dark));
  job.write_manifest();
}

}  // namespace

void register_scan_commands(CLI::App& app) {
  {
    auto a = std::make_shared<SynthArgs>();
    CLI::App* sub = app.add_subcommand("synth", "Ray-cast a scene description into scans and ground truth");
    add_common_options(*sub, a->common);
    sub->add_option("--scene", a->scene, "Scene description file")->required();
    sub->add_option("--frames", a->frames, "Frames to render (0: every trajectory pose)")->capture_default_str();
    sub->add_option("--depth-scale", a->depth_scale, "Depth PNG units per meter")->capture_default_str();
    sub->callback([sub, a] { run_synth(*sub, *a); });
  }
  {
    auto a = std::make_shared<ProjectArgs>();
    CLI::App* sub = app.add_subcommand("project", "Point cloud to range image");
    add_common_options(*sub, a->common);
    sub->add_option("--cloud", a->cloud, "KITTI .bin point cloud")->required();
    sub->add_option("--intrinsics", a->intrinsics, "Intrinsics file")->required();
    sub->add_flag("--rings", a->rings, "Assign rings from the storage order before projecting");
    sub->add_option("--depth-scale", a->depth_scale, "Depth PNG units per meter")->capture_default_str();
    sub->callback([sub, a] { run_project(*sub, *a); });
  }
  {
    auto a = std::make_shared<UnprojectArgs>();
    CLI::App* sub = app.add_subcommand("unproject", "Range image to point cloud");
    add_common_options(*sub, a->common);
    sub->add_option("--depth", a->depth, "16-bit depth PNG")->required();
    sub->add_option("--intensity", a->intensity, "16-bit intensity PNG");
    sub->add_option("--intrinsics", a->intrinsics, "Intrinsics file")->required();
    sub->add_option("--depth-scale", a->depth_scale, "Depth PNG units per meter")->capture_default_str();
    sub->callback([sub, a] { run_unproject(*sub, *a); });
  }
  {
    auto a = std::make_shared<CalibrateArgs>();
    CLI::App* sub = app.add_subcommand("calibrate", "Fit intrinsics to raw scans by reprojection");
    add_common_options(*sub, a->common);
    sub->add_option("--frames", a->frames, "KITTI .bin scans in storage order")->required();
    sub->add_option("--width", a->width, "Range image width")->capture_default_str();
    sub->add_option("--height", a->height, "Number of rings")->capture_default_str();
    sub->add_option("--init", a->init, "Initial intrinsics (default: single unit from the ring elevations)");
    sub->add_option("--iterations", a->iterations, "Optimizer iterations")->capture_default_str();
    sub->add_option("--lr", a->lr, "Learning rate")->capture_default_str();
    sub->add_option("--lr-final", a->lr_final, "Final learning rate relative to the first")->capture_default_str();
    sub->add_option("--weights", a->weights, "Channel weights: depth intensity row col")
        ->expected(4)
        ->capture_default_str();
    sub->add_flag("--freeze-diodes", a->freeze_diodes, "Keep the per-row offsets of the initial intrinsics");
    sub->callback([sub, a] { run_calibrate(*sub, *a); });
  }
  {
    auto a = std::make_shared<NormalsArgs>();
    CLI::App* sub = app.add_subcommand("normals", "Normals, incidence and edge flags of a depth image");
    add_common_options(*sub, a->common);
    sub->add_option("--depth", a->depth, "16-bit depth PNG")->required();
    sub->add_option("--intrinsics", a->intrinsics, "Intrinsics file")->required();
    sub->add_option("--depth-scale", a->depth_scale, "Depth PNG units per meter")->capture_default_str();
    sub->add_option("--edge-threshold", a->edge_threshold, "Relative depth jump of a strong edge")->capture_default_str();
    sub->add_option("--artifact-deg", a->artifact_deg, "Row artifact angle [deg]")->capture_default_str();
    sub->add_option("--crease-deg", a->crease_deg, "Crease angle [deg], 0 disables")->capture_default_str();
    sub->add_option("--tau-deg", a->tau_deg, "Shallow incidence threshold [deg]")->capture_default_str();
    sub->callback([sub, a] { run_normals(*sub, *a); });
  }
  {
    auto a = std::make_shared<AnalyzeArgs>();
    CLI::App* sub = app.add_subcommand("analyze", "Intensity statistics by distance and incidence, and loss masks");
    add_common_options(*sub, a->common);
    sub->add_option("--depth", a->depth, "Depth PNGs")->required();
    sub->add_option("--intensity", a->intensity, "Intensity PNGs, one per depth PNG")->required();
    sub->add_option("--intrinsics", a->intrinsics, "Intrinsics file")->required();
    sub->add_option("--depth-scale", a->depth_scale, "Depth PNG units per meter")->capture_default_str();
    sub->add_option("--distance-edges", a->distance_edges, "Distance bin edges [m]")->capture_default_str();
    sub->add_option("--angle-edges-deg", a->angle_edges_deg, "Incidence bin edges [deg]")->capture_default_str();
    sub->add_option("--drop-threshold", a->drop_threshold, "Invalid fraction that masks a pixel")->capture_default_str();
    sub->add_option("--intensity-threshold", a->intensity_threshold, "Zero-intensity fraction that masks a pixel")
        ->capture_default_str();
    sub->add_option("--crease-deg", a->crease_deg, "Crease angle [deg], 0 disables")->capture_default_str();
    sub->callback([sub, a] { run_analyze(*sub, *a); });
  }
}

}  // namespace pblsim
