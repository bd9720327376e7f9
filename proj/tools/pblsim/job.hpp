#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pbl/geometry.hpp"
#include "pbl/grid.hpp"
#include "pbl/io.hpp"

namespace pblsim {

inline constexpr std::uint64_t kDefaultSeed = 0x5eed;
inline constexpr const char* kVersion = "0.1.0";

/// Options every subcommand shares.
struct CommonOptions {
  std::string out_dir = ".";
  std::uint64_t seed = kDefaultSeed;
  int workers = 0;  ///< 0: PBL_WORKERS or 1
  std::string config_path;

  int resolved_workers() const;
};

/// Registers --out, --seed, --workers and --config on `sub`.
void add_common_options(CLI::App& sub, CommonOptions& common);

/// Tracks the files a command reads and writes and emits manifest.json.
class Job {
 public:
  Job(std::string command, const CLI::App& sub, const CommonOptions& common);

  /// Path of `name` inside the output directory, which is created on demand.
  std::string output(const std::string& name);
  const std::string& input(const std::string& path);
  std::uint64_t seed() const { return has_seed_override_ ? seed_override_ : common_.seed; }
  int workers() const { return common_.resolved_workers(); }
  void set_seed(std::uint64_t seed) { seed_override_ = seed; has_seed_override_ = true; }
  void write_manifest() const;

 private:
  std::string command_;
  std::string effective_config_;
  const CommonOptions& common_;
  std::uint64_t seed_override_ = 0;
  bool has_seed_override_ = false;
  std::vector<std::string> inputs_;
  std::vector<std::string> outputs_;
};

std::string sha256_file(const std::string& path);
std::string sha256_text(const std::string& text);

/// Expands `--config FILE` into command-line tokens. Entries of the root
/// section and of the section named after the subcommand become `--key value`;
/// keys that are not long options of the subcommand raise a line-numbered
/// ConfigError. Options given explicitly on the command line win.
std::vector<std::string> expand_config(CLI::App& app, const std::vector<std::string>& args);

// --- shared helpers ---------------------------------------------------------------------------

/// Gray16 image of a grid, value = round(v * scale) clamped to [0, 65535].
pbl::Gray16Image to_gray16(const pbl::Grid<double>& grid, double scale);

/// Depth-only range image from a depth PNG (intensity 0).
pbl::RangeImage read_depth_png(const std::string& path, double depth_scale);

/// printf-style file name, e.g. numbered("frame_%03d.bin", 4).
std::string numbered(const char* pattern, long long k);

double deg_to_rad(double deg);

}  // namespace pblsim
