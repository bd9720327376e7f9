#include <algorithm>
#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "commands.hpp"
#include "job.hpp"
#include "pbl/error.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Physics-based LiDAR simulation and sensor parameter fitting"};
  app.set_version_flag("--version", pblsim::kVersion);
  app.require_subcommand(1);
  pblsim::register_scan_commands(app);
  pblsim::register_field_commands(app);

  try {
    std::vector<std::string> args(argv + 1, argv + argc);
    args = pblsim::expand_config(app, args);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  } catch (const pbl::ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  } catch (const pbl::NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
