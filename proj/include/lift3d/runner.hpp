#pragma once

#include <functional>
#include <string>

#include "lift3d/config.hpp"

namespace lift3d {

// One function per CLI command. Each writes its outputs under
// settings().io_outdir (created on demand) and echoes the effective
// configuration to outdir/effective.cfg.
using LogLineFn = std::function<void(const std::string&)>;

void run_synth(const Config& config, const LogLineFn& log = nullptr);
void run_coarse(const Config& config, const LogLineFn& log = nullptr);
void run_fine(const Config& config, const LogLineFn& log = nullptr);
void run_render(const Config& config, const LogLineFn& log = nullptr);
void run_eval(const Config& config, const LogLineFn& log = nullptr);
int run_gradcheck_command(const Config& config, const LogLineFn& log = nullptr);  // returns #failed

}  // namespace lift3d
