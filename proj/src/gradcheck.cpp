#include "lift3d/gradcheck.hpp"

#include <cmath>

#include "lift3d/field.hpp"
#include "lift3d/losses.hpp"
#include "lift3d/mesh_render.hpp"
#include "lift3d/tet.hpp"
#include "lift3d/volume_render.hpp"

namespace lift3d {

namespace {

ImageBuffer random_image(int h, int w, int c, Rng& rng, double lo, double hi) {
  ImageBuffer img(h, w, c);
  double* p = img.data();
  for (int64_t i = 0; i < img.size(); ++i) p[i] = rng.next_uniform(lo, hi);
  return img;
}

// Small field so a modest finite-difference subset actually lands on
// parameters the fixture touches.
FieldConfig small_field_config() {
  FieldConfig cfg;
  cfg.levels = 4;
  cfg.base_resolution = 4;
  cfg.finest_resolution = 16;
  cfg.table_log2 = 8;
  cfg.hidden = 16;
  return cfg;
}

// The default feature init is tiny, which leaves some first-order
// sensitivities far below the curvature scale and makes the finite
// difference meaningless there. Bump features to a healthy range.
void randomize_grid(ParamStore& store, const FieldConfig& cfg, uint64_t seed) {
  Rng rng(seed);
  for (int l = 0; l < cfg.levels; ++l) {
    const ParamArray& arr = store.array("field.grid.l" + std::to_string(l));
    double* g = store.values_flat() + arr.offset;
    for (int64_t i = 0; i < arr.size; ++i) g[i] = rng.next_uniform(-0.3, 0.3);
  }
}

GradCheckEntry check_encode(uint64_t seed) {
  ParamStore store;
  const FieldConfig cfg = small_field_config();
  HashField field(store, cfg, seed);
  Rng rng(hash_mix(seed, 0xE1));

  const int n_points = 32;
  const int n_features = cfg.levels * cfg.features_per_level;
  std::vector<Vec3> points;
  std::vector<double> coeffs;
  for (int i = 0; i < n_points; ++i) {
    points.push_back(Vec3{rng.next_uniform(-0.95, 0.95), rng.next_uniform(-0.95, 0.95), rng.next_uniform(-0.95, 0.95)});
    for (int j = 0; j < n_features; ++j) coeffs.push_back(rng.next_uniform(-1.0, 1.0));
  }

  std::vector<std::string> grid_names;
  for (int l = 0; l < cfg.levels; ++l) grid_names.push_back("field.grid.l" + std::to_string(l));

  std::vector<double> feats(n_features);
  LossFn fn = [&](bool with_grad) {
    if (with_grad) store.zero_grad();
    double loss = 0.0;
    for (int i = 0; i < n_points; ++i) {
      field.encode(points[i], feats.data());
      const double* c = coeffs.data() + static_cast<size_t>(i) * n_features;
      for (int j = 0; j < n_features; ++j) loss += c[j] * feats[j];
      if (with_grad) field.encode_backward(points[i], c, store.grads_flat());
    }
    return loss;
  };
  return {"encode", finite_diff_check(store, fn, 1e-6, 200, hash_mix(seed, 0xE2), grid_names), 1e-3};
}

GradCheckEntry check_render_view(uint64_t seed) {
  ParamStore store;
  const FieldConfig cfg = small_field_config();
  HashField field(store, cfg, hash_mix(seed, 0xB0));
  randomize_grid(store, cfg, hash_mix(seed, 0xB7));
  Camera cam;
  cam.width = cam.height = 8;
  RenderOptions opt;
  opt.n_samples = 32;
  opt.shading = Shading::kLambertian;
  opt.light_dir = normalized(Vec3{0.3, 0.5, 0.8});
  opt.seed = seed;
  opt.salt = 0x42;

  Rng rng(hash_mix(seed, 0xB1));
  const ImageBuffer target = random_image(8, 8, 3, rng, 0.0, 1.0);
  const int64_t n = target.size();

  LossFn fn = [&](bool with_grad) {
    const ViewRender render = render_view(field, cam, opt);
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      const double d = render.rgb.data()[i] - target.data()[i];
      loss += d * d;
    }
    loss /= static_cast<double>(n);
    if (with_grad) {
      store.zero_grad();
      ImageBuffer d_rgb(8, 8, 3);
      for (int64_t i = 0; i < n; ++i)
        d_rgb.data()[i] = 2.0 * (render.rgb.data()[i] - target.data()[i]) / static_cast<double>(n);
      render_view_backward(field, store, cam, opt, ViewGrad{&d_rgb, nullptr, nullptr});
    }
    return loss;
  };
  return {"render_view_photometric", finite_diff_check(store, fn, 1e-5, 150, hash_mix(seed, 0xB2)), 1e-3};
}

GradCheckEntry check_depth_pearson(uint64_t seed) {
  ParamStore store;
  store.add("depth", {8, 8});
  Rng rng(hash_mix(seed, 0xD0));
  double* vals = store.values("depth");
  for (int i = 0; i < 64; ++i) vals[i] = rng.next_uniform(0.5, 2.0);
  const ImageBuffer ref = random_image(8, 8, 1, rng, 0.5, 2.0);
  ImageBuffer mask(8, 8, 1);
  for (int i = 0; i < 64; ++i) mask.data()[i] = rng.next_u01() < 0.7 ? 1.0 : 0.0;

  LossFn fn = [&](bool with_grad) {
    ImageBuffer depth(8, 8, 1);
    for (int i = 0; i < 64; ++i) depth.data()[i] = store.values("depth")[i];
    const PearsonResult pr = depth_pearson_loss(depth, ref, mask);
    if (with_grad) {
      store.zero_grad();
      for (int i = 0; i < 64; ++i) store.grads("depth")[i] = pr.d_depth.data()[i];
    }
    return pr.loss;
  };
  return {"depth_pearson", finite_diff_check(store, fn, 1e-6, 64, hash_mix(seed, 0xD1)), 1e-3};
}

GradCheckEntry check_normal_smoothness(uint64_t seed) {
  ParamStore store;
  store.add("normals", {8, 8, 3});
  Rng rng(hash_mix(seed, 0xC0));
  double* vals = store.values("normals");
  for (int i = 0; i < 192; ++i) vals[i] = rng.next_uniform(-1.0, 1.0);
  ImageBuffer initial(8, 8, 3);
  for (int i = 0; i < 192; ++i) initial.data()[i] = vals[i];
  const ImageBuffer frozen = gaussian_blur(initial, 9, 3.0);
  ImageBuffer mask(8, 8, 1);
  for (int i = 0; i < 64; ++i) mask.data()[i] = rng.next_u01() < 0.8 ? 1.0 : 0.0;

  LossFn fn = [&](bool with_grad) {
    ImageBuffer normals(8, 8, 3);
    for (int i = 0; i < 192; ++i) normals.data()[i] = store.values("normals")[i];
    const SmoothnessResult sm = normal_smoothness_against(normals, frozen, mask);
    if (with_grad) {
      store.zero_grad();
      for (int i = 0; i < 192; ++i) store.grads("normals")[i] = sm.d_normals.data()[i];
    }
    return sm.loss;
  };
  return {"normal_smoothness", finite_diff_check(store, fn, 1e-6, 192, hash_mix(seed, 0xC1)), 1e-3};
}

GradCheckEntry check_marching_tets(uint64_t seed) {
  const TetGrid grid = build_grid(5);
  ParamStore store;
  add_tet_params(store, grid);
  Rng rng(hash_mix(seed, 0xF0));
  double* sdf = store.values("tet.sdf");
  for (int64_t i = 0; i < grid.vertex_count(); ++i) {
    do {
      sdf[i] = rng.next_uniform(-1.0, 1.0);
    } while (std::abs(sdf[i]) < 1e-2);
  }
  double* deform = store.values("tet.deform");
  const double spread = 0.3 * grid.cell;
  for (int64_t i = 0; i < grid.vertex_count() * 3; ++i) deform[i] = rng.next_uniform(-spread, spread);

  const TriMesh mesh0 = marching_tets(grid, store);
  std::vector<Vec3> coeffs;
  for (size_t k = 0; k < mesh0.vertices.size(); ++k)
    coeffs.push_back(Vec3{rng.next_uniform(-1.0, 1.0), rng.next_uniform(-1.0, 1.0), rng.next_uniform(-1.0, 1.0)});

  LossFn fn = [&](bool with_grad) {
    const TriMesh mesh = marching_tets(grid, store);
    if (mesh.vertices.size() != mesh0.vertices.size())
      throw NumericError("marching-tets fixture changed topology during finite differences");
    double loss = 0.0;
    for (size_t k = 0; k < mesh.vertices.size(); ++k) loss += dot(coeffs[k], mesh.vertices[k]);
    if (with_grad) {
      store.zero_grad();
      marching_tets_backward(grid, store, mesh, coeffs, store.grads_flat());
    }
    return loss;
  };
  return {"marching_tets_vertices", finite_diff_check(store, fn, 1e-6, 200, hash_mix(seed, 0xF1)), 1e-3};
}

GradCheckEntry check_render_mesh(uint64_t seed) {
  const TetGrid grid = build_grid(6);
  ParamStore tet_store;
  add_tet_params(tet_store, grid);
  double* sdf = tet_store.values("tet.sdf");
  for (int64_t i = 0; i < grid.vertex_count(); ++i) sdf[i] = 0.5 - norm(grid.vertices[i]);
  const TriMesh mesh = marching_tets(grid, tet_store);
  const MeshRaycaster caster(mesh);

  ParamStore store;
  const FieldConfig cfg = small_field_config();
  HashField field(store, cfg, hash_mix(seed, 0xA0));
  randomize_grid(store, cfg, hash_mix(seed, 0xA7));
  Camera cam;
  cam.width = cam.height = 8;
  MeshRenderOptions opt;
  opt.shading = Shading::kLambertian;
  opt.light_dir = normalized(Vec3{0.2, 0.6, 0.75});

  Rng rng(hash_mix(seed, 0xA1));
  const ImageBuffer target = random_image(8, 8, 3, rng, 0.0, 1.0);
  const int64_t n = target.size();

  LossFn fn = [&](bool with_grad) {
    const ViewRender render = render_mesh(caster, &field, cam, opt);
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      const double d = render.rgb.data()[i] - target.data()[i];
      loss += d * d;
    }
    loss /= static_cast<double>(n);
    if (with_grad) {
      store.zero_grad();
      ImageBuffer d_rgb(8, 8, 3);
      for (int64_t i = 0; i < n; ++i)
        d_rgb.data()[i] = 2.0 * (render.rgb.data()[i] - target.data()[i]) / static_cast<double>(n);
      std::vector<Vec3> d_vertices;
      render_mesh_backward(caster, &field, &store, cam, opt, ViewGrad{&d_rgb, nullptr, nullptr}, &d_vertices);
    }
    return loss;
  };
  return {"render_mesh_color", finite_diff_check(store, fn, 1e-5, 150, hash_mix(seed, 0xA2)), 1e-3};
}

}  // namespace

std::vector<GradCheckEntry> run_gradcheck(uint64_t seed) {
  std::vector<GradCheckEntry> entries;
  entries.push_back(check_encode(seed));
  entries.push_back(check_render_view(seed));
  entries.push_back(check_depth_pearson(seed));
  entries.push_back(check_normal_smoothness(seed));
  entries.push_back(check_marching_tets(seed));
  entries.push_back(check_render_mesh(seed));
  return entries;
}

}  // namespace lift3d
