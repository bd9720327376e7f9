#pragma once

#include "CLI11.hpp"

namespace pblsim {

/// synth, project, unproject, calibrate, normals, analyze.
void register_scan_commands(CLI::App& app);
/// fit, resim, render-camera, grad-check.
void register_field_commands(CLI::App& app);

}  // namespace pblsim
