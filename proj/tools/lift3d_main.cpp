// Command-line front end over the C API. Subcommands map 1:1 to l3d_run_*.
#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lift3d/lift3d.h"

namespace {

void print_line(const char* line, void* /*user*/) {
  std::printf("%s\n", line);
  std::fflush(stdout);
}

struct CommandArgs {
  std::string config_path;
  std::string seed;
  std::vector<std::string> sets;
};

int fail_with(l3d_session* session, l3d_status status) {
  std::fprintf(stderr, "error: %s\n", l3d_last_error(session));
  return static_cast<int>(status);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"single-image 3D reconstruction (coarse volume + fine mesh)"};
  app.require_subcommand(1);

  const struct {
    const char* name;
    const char* help;
  } kCommands[] = {
      {"synth", "write the reference bundle (rgb, mask, depth) for the configured scene"},
      {"coarse", "stage 1: optimize the volumetric field"},
      {"fine", "stage 2: refine a deformable tet mesh from the coarse checkpoint"},
      {"render", "render a 36-frame turntable from a checkpoint or OBJ"},
      {"eval", "recompute metrics.json from existing checkpoints"},
      {"gradcheck", "run the finite-difference gradient suite"},
  };

  CommandArgs args;
  for (const auto& cmd : kCommands) {
    CLI::App* sub = app.add_subcommand(cmd.name, cmd.help);
    sub->add_option("--config", args.config_path, "configuration file (key = value lines)");
    sub->add_option("--seed", args.seed, "seed override, applied before --set");
    sub->add_option("--set", args.sets, "key=value override, repeatable, last wins");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  const std::string command = app.get_subcommands().front()->get_name();

  l3d_session* session = l3d_session_new();
  if (!session) {
    std::fprintf(stderr, "error: out of memory\n");
    return 2;
  }
  l3d_set_logger(session, print_line, nullptr);

  l3d_status status = L3D_OK;
  if (!args.config_path.empty()) status = l3d_config_load(session, args.config_path.c_str());
  if (status == L3D_OK && !args.seed.empty())
    status = l3d_config_set(session, ("seed=" + args.seed).c_str());
  for (const std::string& kv : args.sets) {
    if (status != L3D_OK) break;
    status = l3d_config_set(session, kv.c_str());
  }

  int exit_code = 0;
  if (status != L3D_OK) {
    exit_code = fail_with(session, status);
  } else if (command == "synth") {
    if ((status = l3d_run_synth(session)) != L3D_OK) exit_code = fail_with(session, status);
  } else if (command == "coarse") {
    if ((status = l3d_run_coarse(session)) != L3D_OK) exit_code = fail_with(session, status);
  } else if (command == "fine") {
    if ((status = l3d_run_fine(session)) != L3D_OK) exit_code = fail_with(session, status);
  } else if (command == "render") {
    if ((status = l3d_run_render(session)) != L3D_OK) exit_code = fail_with(session, status);
  } else if (command == "eval") {
    if ((status = l3d_run_eval(session)) != L3D_OK) exit_code = fail_with(session, status);
  } else if (command == "gradcheck") {
    int n_failed = 0;
    if ((status = l3d_run_gradcheck(session, &n_failed)) != L3D_OK) {
      exit_code = fail_with(session, status);
    } else if (n_failed > 0) {
      std::fprintf(stderr, "error: %d gradient check(s) failed\n", n_failed);
      exit_code = 2;
    }
  }

  l3d_session_free(session);
  return exit_code;
}
