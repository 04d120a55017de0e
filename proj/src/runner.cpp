#include "lift3d/runner.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>

#include "lift3d/gradcheck.hpp"
#include "lift3d/image_io.hpp"
#include "lift3d/pipeline.hpp"

namespace lift3d {

namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void say(const LogLineFn& log, const std::string& line) {
  if (log) log(line);
}

std::string outpath(const Settings& s, const std::string& rel) { return (fs::path(s.io_outdir) / rel).string(); }

void prepare_outdir(const Config& config, std::initializer_list<const char*> subdirs) {
  const Settings& s = config.settings();
  fs::create_directories(s.io_outdir);
  for (const char* sub : subdirs) fs::create_directories(fs::path(s.io_outdir) / sub);
  const std::string path = outpath(s, "effective.cfg");
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << config.render();
}

std::shared_ptr<const SyntheticScene> make_scene(const Settings& s) { return SyntheticScene::preset(s.scene_preset); }

ReferenceBundle make_bundle(const Settings& s, const SyntheticScene& scene) {
  return synthesize_reference(scene, reference_camera_from(s), s.scene_depth_scale, s.scene_depth_offset);
}

struct Providers {
  NoiseSchedule schedule = NoiseSchedule::make_linear();
  std::unique_ptr<ScoreProvider> p2d;
  std::unique_ptr<ScoreProvider> p3d;
};

Providers make_providers(const Settings& s, const ReferenceBundle& bundle,
                         std::shared_ptr<const SyntheticScene> scene) {
  Providers p;
  p.p2d = make_target_denoiser(p.schedule, bundle.rgb, s.guidance_scale_2d);
  p.p3d = make_multiview_oracle(p.schedule, std::move(scene), bundle.camera, s.guidance_scale_3d);
  return p;
}

std::string format_log(const IterationLog& l) {
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "iter %6lld  total %.6f  recon %.6f  depth %.6f  normal %.6f  |g| %.6g  psnr %.2f",
                static_cast<long long>(l.iteration), l.total, l.recon, l.depth, l.normal, l.guidance_magnitude,
                l.psnr_ref_db);
  return buf;
}

std::string format_metrics(const Metrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "psnr_ref %.2f dB  iou %.4f  depth_r %.4f  novel_psnr %.2f dB  wall %.1f s",
                m.psnr_ref_db, m.mask_iou, m.depth_pearson, m.novel_psnr_mean_db, m.wall_seconds);
  return buf;
}

Metrics field_metrics(const CoarseTrainer& trainer, const SyntheticScene& scene, double wall) {
  const ReferenceBundle& b = trainer.bundle();
  const ViewRender ref = trainer.render_reference();
  Metrics m;
  m.psnr_ref_db = psnr(ref.rgb, b.rgb);
  m.mask_iou = mask_iou(ref.mask, b.mask);
  m.depth_pearson = depth_corr(ref.depth, b.depth, b.mask);
  double acc = 0.0;
  const std::vector<Camera> cams = held_out_cameras(b.camera);
  for (const Camera& cam : cams) acc += psnr(trainer.render_view_at(cam).rgb, scene.render(cam).rgb);
  m.novel_psnr_mean_db = acc / cams.size();
  m.wall_seconds = wall;
  return m;
}

Metrics mesh_metrics(const MeshRaycaster& caster, const HashField* field, const ReferenceBundle& b,
                     const SyntheticScene& scene, int threads, double wall) {
  MeshRenderOptions opt;
  opt.shading = Shading::kAlbedo;
  opt.threads = threads;
  const ViewRender ref = render_mesh(caster, field, b.camera, opt);
  Metrics m;
  m.psnr_ref_db = psnr(ref.rgb, b.rgb);
  m.mask_iou = mask_iou(ref.mask, b.mask);
  m.depth_pearson = depth_corr(ref.depth, b.depth, b.mask);
  double acc = 0.0;
  const std::vector<Camera> cams = held_out_cameras(b.camera);
  for (const Camera& cam : cams) acc += psnr(render_mesh(caster, field, cam, opt).rgb, scene.render(cam).rgb);
  m.novel_psnr_mean_db = acc / cams.size();
  m.wall_seconds = wall;
  return m;
}

// Rebuilds the fine-stage parameter layout and loads its checkpoint.
struct FineState {
  ParamStore store;
  std::unique_ptr<HashField> field;
  TetGrid grid;
  TriMesh mesh;
};

FineState load_fine_state(const Settings& s, const std::string& checkpoint) {
  FineState state;
  state.field = std::make_unique<HashField>(state.store, field_config_from(s), s.seed);
  state.grid = build_grid(s.fine_grid_resolution);
  add_tet_params(state.store, state.grid);
  state.store.load(checkpoint);
  state.mesh = marching_tets(state.grid, state.store);
  return state;
}

}  // namespace

void run_synth(const Config& config, const LogLineFn& log) {
  const Settings& s = config.settings();
  prepare_outdir(config, {});
  const auto scene = make_scene(s);
  const ReferenceBundle bundle = make_bundle(s, *scene);
  save_png(outpath(s, "ref_rgb.png"), bundle.rgb);
  save_png(outpath(s, "ref_mask.png"), bundle.mask);
  save_pfm(outpath(s, "ref_depth.pfm"), bundle.depth);
  say(log, "wrote ref_rgb.png, ref_mask.png, ref_depth.pfm to " + s.io_outdir);
}

void run_coarse(const Config& config, const LogLineFn& log) {
  const Settings& s = config.settings();
  prepare_outdir(config, {"coarse"});
  const auto scene = make_scene(s);
  const ReferenceBundle bundle = make_bundle(s, *scene);
  const Providers providers = make_providers(s, bundle, scene);

  CoarseTrainer trainer(s, bundle, providers.p2d.get(), providers.p3d.get());
  const auto t0 = Clock::now();
  trainer.run([&](const IterationLog& l) { say(log, format_log(l)); });
  const double wall = seconds_since(t0);

  trainer.save(outpath(s, "coarse/checkpoint.bin"));
  const Metrics m = field_metrics(trainer, *scene, wall);
  write_metrics(m, outpath(s, "metrics.json"));
  say(log, "coarse stage done: " + format_metrics(m));
}

void run_fine(const Config& config, const LogLineFn& log) {
  const Settings& s = config.settings();
  prepare_outdir(config, {"fine", "renders"});
  const auto scene = make_scene(s);
  const ReferenceBundle bundle = make_bundle(s, *scene);
  const Providers providers = make_providers(s, bundle, scene);

  const std::string coarse_ckpt = outpath(s, "coarse/checkpoint.bin");
  if (!fs::exists(coarse_ckpt)) throw IoError("missing coarse checkpoint " + coarse_ckpt + "; run coarse first");

  FineTrainer trainer(s, bundle, coarse_ckpt, providers.p2d.get(), providers.p3d.get());
  const auto t0 = Clock::now();
  trainer.run([&](const IterationLog& l) { say(log, format_log(l)); });
  const double wall = seconds_since(t0);

  trainer.save(outpath(s, "fine/checkpoint.bin"));
  const TriMesh mesh = trainer.current_mesh();
  export_obj(mesh, outpath(s, "mesh.obj"));
  const ViewRender fine_ref =
      trainer.render_reference(trainer.render_camera().width, trainer.render_camera().height);
  save_png(outpath(s, "fine/render_ref.png"), fine_ref.rgb);

  const MeshRaycaster caster(mesh);
  const Metrics m = mesh_metrics(caster, &trainer.field(), bundle, *scene, s.threads, wall);
  write_metrics(m, outpath(s, "metrics.json"));
  say(log, "fine stage done: " + std::to_string(mesh.triangles.size()) + " triangles, " + format_metrics(m));
}

void run_render(const Config& config, const LogLineFn& log) {
  const Settings& s = config.settings();
  prepare_outdir(config, {"renders"});
  const std::vector<Camera> cams = turntable_cameras(reference_camera_from(s));

  auto frame_path = [&](int k) {
    char name[64];
    std::snprintf(name, sizeof(name), "renders/turntable_%03d.png", k);
    return outpath(s, name);
  };

  if (s.render_source == "coarse") {
    const auto scene = make_scene(s);
    CoarseTrainer trainer(s, make_bundle(s, *scene), nullptr, nullptr);
    trainer.load(outpath(s, "coarse/checkpoint.bin"));
    for (size_t k = 0; k < cams.size(); ++k) save_png(frame_path(k), trainer.render_view_at(cams[k]).rgb);
  } else {
    TriMesh mesh;
    std::unique_ptr<HashField> field;
    ParamStore store;
    if (s.render_source == "fine") {
      FineState state = load_fine_state(s, outpath(s, "fine/checkpoint.bin"));
      mesh = std::move(state.mesh);
      field = std::move(state.field);
      store = std::move(state.store);
    } else {
      mesh = import_obj(s.render_obj.empty() ? outpath(s, "mesh.obj") : s.render_obj);
    }
    const MeshRaycaster caster(mesh);
    MeshRenderOptions opt;
    opt.shading = Shading::kAlbedo;
    opt.threads = s.threads;
    for (size_t k = 0; k < cams.size(); ++k) save_png(frame_path(k), render_mesh(caster, field.get(), cams[k], opt).rgb);
  }
  say(log, "wrote " + std::to_string(cams.size()) + " turntable frames to " + outpath(s, "renders"));
}

void run_eval(const Config& config, const LogLineFn& log) {
  const Settings& s = config.settings();
  prepare_outdir(config, {});
  const auto scene = make_scene(s);
  const ReferenceBundle bundle = make_bundle(s, *scene);
  const auto t0 = Clock::now();

  Metrics m;
  if (s.render_source == "fine") {
    FineState state = load_fine_state(s, outpath(s, "fine/checkpoint.bin"));
    const MeshRaycaster caster(state.mesh);
    m = mesh_metrics(caster, state.field.get(), bundle, *scene, s.threads, 0.0);
  } else {
    CoarseTrainer trainer(s, bundle, nullptr, nullptr);
    trainer.load(outpath(s, "coarse/checkpoint.bin"));
    m = field_metrics(trainer, *scene, 0.0);
  }
  m.wall_seconds = seconds_since(t0);
  write_metrics(m, outpath(s, "metrics.json"));
  say(log, "eval: " + format_metrics(m));
}

int run_gradcheck_command(const Config& config, const LogLineFn& log) {
  const std::vector<GradCheckEntry> entries = run_gradcheck(config.settings().seed);
  int failed = 0;
  for (const GradCheckEntry& e : entries) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-24s max_rel_error %.3e  (tolerance %.0e)  %s", e.name.c_str(),
                  e.report.max_rel_error, e.tolerance, e.pass() ? "PASS" : "FAIL");
    say(log, buf);
    if (!e.pass()) ++failed;
  }
  return failed;
}

}  // namespace lift3d
