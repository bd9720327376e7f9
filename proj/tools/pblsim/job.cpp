#include "job.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include <openssl/evp.h>

#include "json.hpp"
#include "pbl/config.hpp"
#include "pbl/error.hpp"
#include "pbl/parallel.hpp"

namespace pblsim {

namespace fs = std::filesystem;

int CommonOptions::resolved_workers() const { return workers > 0 ? workers : pbl::default_workers(); }

void add_common_options(CLI::App& sub, CommonOptions& common) {
  sub.add_option("--out", common.out_dir, "Output directory")->capture_default_str();
  sub.add_option("--seed", common.seed, "Random seed")->capture_default_str();
  sub.add_option("--workers", common.workers, "Worker threads (0: PBL_WORKERS or 1)")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  sub.add_option("--config", common.config_path, "key = value file; [<command>] sections apply to one command");
}

Job::Job(std::string command, const CLI::App& sub, const CommonOptions& common)
    : command_(std::move(command)), effective_config_(sub.config_to_str(true, false)), common_(common) {}

std::string Job::output(const std::string& name) {
  fs::create_directories(common_.out_dir);
  const std::string path = (fs::path(common_.out_dir) / name).string();
  if (std::find(outputs_.begin(), outputs_.end(), path) == outputs_.end()) outputs_.push_back(path);
  return path;
}

const std::string& Job::input(const std::string& path) {
  if (!fs::exists(path)) throw pbl::IoError("cannot open " + path);
  inputs_.push_back(path);
  return inputs_.back();
}

void Job::write_manifest() const {
  nlohmann::ordered_json m;
  m["tool"] = "pblsim";
  m["version"] = kVersion;
  m["command"] = command_;
  m["seed"] = has_seed_override_ ? seed_override_ : common_.seed;
  m["config"] = effective_config_;
  m["config_sha256"] = sha256_text(effective_config_);
  auto files = [](const std::vector<std::string>& paths) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    std::set<std::string> seen;
    for (const auto& p : paths) {
      if (!seen.insert(p).second || !fs::exists(p)) continue;
      arr.push_back({{"path", p}, {"sha256", sha256_file(p)}});
    }
    return arr;
  };
  m["inputs"] = files(inputs_);
  m["outputs"] = files(outputs_);
  fs::create_directories(common_.out_dir);
  pbl::write_text_file((fs::path(common_.out_dir) / "manifest.json").string(), m.dump(2) + "\n");
}

namespace {

std::string sha256_bytes(const unsigned char* data, std::size_t n) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data, n, digest, &len, EVP_sha256(), nullptr) != 1) throw pbl::Error("sha256 failed");
  std::string hex;
  char buf[3];
  for (unsigned int k = 0; k < len; ++k) {
    std::snprintf(buf, sizeof buf, "%02x", digest[k]);
    hex += buf;
  }
  return hex;
}

}  // namespace

std::string sha256_file(const std::string& path) {
  const auto bytes = pbl::read_file_bytes(path);
  return sha256_bytes(bytes.data(), bytes.size());
}

std::string sha256_text(const std::string& text) {
  return sha256_bytes(reinterpret_cast<const unsigned char*>(text.data()), text.size());
}

std::vector<std::string> expand_config(CLI::App& app, const std::vector<std::string>& args) {
  if (args.empty() || args[0].starts_with("-")) return args;
  CLI::App* sub = app.get_subcommand_no_throw(args[0]);
  if (sub == nullptr) return args;

  std::string config_path;
  std::set<std::string> explicit_keys;
  for (std::size_t k = 1; k < args.size(); ++k) {
    const std::string& a = args[k];
    if (!a.starts_with("--")) continue;
    const auto eq = a.find('=');
    const std::string key = a.substr(2, eq == std::string::npos ? std::string::npos : eq - 2);
    explicit_keys.insert(key);
    if (key == "config") config_path = eq != std::string::npos ? a.substr(eq + 1) : (k + 1 < args.size() ? args[k + 1] : "");
  }
  if (config_path.empty()) return args;

  const pbl::ConfigDocument doc = pbl::ConfigDocument::load(config_path);
  std::set<std::string> commands;
  for (const CLI::App* s : app.get_subcommands([](const CLI::App*) { return true; })) commands.insert(s->get_name());
  for (const auto& section : doc.sections())
    if (!section.name.empty() && !commands.contains(section.name))
      section.fail("unknown section [" + section.name + "]");

  std::vector<std::string> out{args[0]};
  for (const auto& section : doc.sections()) {
    if (!section.name.empty() && section.name != sub->get_name()) continue;
    for (const auto& entry : section.entries) {
      const CLI::Option* opt = sub->get_option_no_throw("--" + entry.key);
      if (opt == nullptr || entry.key == "config")
        section.fail(entry, "unknown key '" + entry.key + "' for " + sub->get_name());
      if (explicit_keys.contains(entry.key)) continue;
      if (opt->get_expected_max() == 0) {
        if (entry.value == "true") {
          out.push_back("--" + entry.key);
        } else if (entry.value != "false") {
          section.fail(entry, "expected true or false for '" + entry.key + "'");
        }
        continue;
      }
      out.push_back("--" + entry.key);
      if (opt->get_expected_max() > 1) {
        std::istringstream in(entry.value);
        std::string tok;
        while (in >> tok) out.push_back(tok);
      } else {
        out.push_back(entry.value);
      }
    }
  }
  out.insert(out.end(), args.begin() + 1, args.end());
  return out;
}

pbl::Gray16Image to_gray16(const pbl::Grid<double>& grid, double scale) {
  pbl::Gray16Image img{grid.cols(), grid.rows(), std::vector<std::uint16_t>(grid.size(), 0)};
  for (std::size_t k = 0; k < grid.size(); ++k) {
    const double v = std::round(grid.values()[k] * scale);
    img.pixels[k] = static_cast<std::uint16_t>(std::clamp(std::isfinite(v) ? v : 0.0, 0.0, 65535.0));
  }
  return img;
}

pbl::RangeImage read_depth_png(const std::string& path, double depth_scale) {
  const pbl::Gray16Image g = pbl::read_png_gray16(path);
  pbl::RangeImage img = pbl::RangeImage::blank(g.width, g.height);
  for (int i = 0; i < g.height; ++i)
    for (int j = 0; j < g.width; ++j) {
      const std::uint16_t v = g.pixels[static_cast<std::size_t>(i) * g.width + j];
      if (v != 0) img.set(i, j, v / depth_scale, 0.0);
    }
  return img;
}

std::string numbered(const char* pattern, long long k) {
  char buf[256];
  std::snprintf(buf, sizeof buf, pattern, k);
  return buf;
}

double deg_to_rad(double deg) { return deg * std::numbers::pi / 180.0; }

}  // namespace pblsim
