#include "lift3d/volume_render.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace lift3d {

namespace {

constexpr Vec3 kBackground{1.0, 1.0, 1.0};
constexpr Vec3 kFallbackNormal{0.0, 0.0, 1.0};
constexpr Vec3 kGray{0.5, 0.5, 0.5};

struct SampleRecord {
  double t = 0.0, delta = 0.0;
  double sigma = 0.0, alpha = 0.0, transmittance = 1.0, weight = 0.0;
  Vec3 x, albedo, color;
  Vec3 grad_raw;          // unnormalized -grad(sigma) input to the normal
  double grad_norm = 0.0;  // its length (0 when not computed / fallback)
  Vec3 normal;
  int tape_slot = -1;  // column in the chunk's tape batch, -1 outside the box
  bool inbox = false;
  bool normal_computed = false;
};

constexpr int kMarchChunk = 16;

// Forward tapes for one ray's march, one batch per sample chunk. Letting the
// backward pass keep these around means it never re-evaluates the field.
struct RayTape {
  std::vector<FieldBatch> chunks;
  FieldBatch& chunk(int ci) {
    if (static_cast<size_t>(ci) >= chunks.size()) chunks.resize(static_cast<size_t>(ci) + 1);
    return chunks[static_cast<size_t>(ci)];
  }
};

}  // namespace

struct ViewTapeImpl {
  int width = 0, height = 0, n_samples = 0;
  std::vector<RayTape> rays;
  std::vector<RayShade> shades;
  std::vector<SampleRecord> records;  // n_rays x n_samples, flat
  std::vector<int> n_rec;
};

ViewTape::ViewTape() : impl_(std::make_unique<ViewTapeImpl>()) {}
ViewTape::~ViewTape() = default;
ViewTape::ViewTape(ViewTape&&) noexcept = default;
ViewTape& ViewTape::operator=(ViewTape&&) noexcept = default;

namespace {

struct ShadeCtx {
  const RenderOptions* opt;
  const VolumeField* field;
};

// Normal estimate matching field_normal, but keeping the raw gradient for
// the backward chain.
void estimate_normal(const VolumeField& field, const Vec3& x, double step, SampleRecord& rec) {
  Vec3 g;
  for (int k = 0; k < 3; ++k) {
    Vec3 hi = x, lo = x;
    hi[k] += step;
    lo[k] -= step;
    g[k] = (field.sigma_at(hi) - field.sigma_at(lo)) / (2.0 * step);
  }
  rec.grad_raw = g;
  rec.grad_norm = norm(g);
  if (rec.grad_norm < 1e-8) {
    rec.normal = kFallbackNormal;
    rec.normal_computed = false;
  } else {
    rec.normal = g / -rec.grad_norm;
    rec.normal_computed = true;
  }
}

Vec3 shade_sample(const ShadeCtx& ctx, SampleRecord& rec) {
  const RenderOptions& opt = *ctx.opt;
  switch (opt.shading) {
    case Shading::kAlbedo:
      return rec.albedo;
    case Shading::kLambertian:
    case Shading::kTextureless: {
      Vec3 n = kFallbackNormal;
      if (rec.weight >= opt.shade_weight_cutoff) {
        estimate_normal(*ctx.field, rec.x, opt.normal_step, rec);
        n = rec.normal;
      } else {
        rec.normal = n;
      }
      double ndl = std::max(0.0, dot(n, opt.light_dir));
      double f = 0.1 + 0.9 * ndl;
      return (opt.shading == Shading::kLambertian ? rec.albedo : kGray) * f;
    }
    case Shading::kNormal: {
      Vec3 n = kFallbackNormal;
      if (rec.weight >= opt.shade_weight_cutoff) {
        estimate_normal(*ctx.field, rec.x, opt.normal_step, rec);
        n = rec.normal;
      } else {
        rec.normal = n;
      }
      return (n + Vec3{1.0, 1.0, 1.0}) * 0.5;
    }
  }
  return rec.albedo;
}

// Shared march. records, when non-null, must hold opt.n_samples entries and
// receives the per-sample state; the return value carries the accumulated
// shade. Used by forward rendering and replayed in backward; the backward
// replay passes a tape so the chunk batches survive for the gradient pass.
RayShade march_ray(const VolumeField& field, const Ray& ray, const RenderOptions& opt, uint64_t ray_index,
                   SampleRecord* records, int* n_recorded, const HashField* tape_field = nullptr,
                   RayTape* tape = nullptr) {
  int n = opt.n_samples;
  if (n < 2) throw ConfigError("render: n_samples must be >= 2");
  double bin = (ray.t_far - ray.t_near) / n;

  // All jitters are drawn up front so early termination cannot shift the
  // stream between forward and backward replays.
  Rng rng(hash_mix(hash_mix(opt.seed, opt.salt), ray_index));
  static thread_local std::vector<double> ts;
  ts.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) ts[static_cast<size_t>(i)] = ray.t_near + (i + rng.next_u01()) * bin;

  ShadeCtx ctx{&opt, &field};
  RayShade out;
  out.rgb = {0.0, 0.0, 0.0};
  double transmittance = 1.0;
  double depth_sum = 0.0;
  int count = 0;
  // The field is queried a chunk at a time; early termination wastes at most
  // the tail of one chunk.
  Vec3 pos[kMarchChunk];
  double sg[kMarchChunk];
  Vec3 alb[kMarchChunk];
  bool stopped = false;
  for (int base = 0; base < n && !stopped; base += kMarchChunk) {
    const int m = std::min(kMarchChunk, n - base);
    for (int j = 0; j < m; ++j) pos[j] = ray.origin + ray.direction * ts[static_cast<size_t>(base + j)];
    int slot[kMarchChunk];
    if (tape) {
      // Same gather order as HashField::sample_many, so the taped replay
      // reproduces the forward values bitwise.
      Vec3 inpos[kMarchChunk];
      double in_sg[kMarchChunk];
      Vec3 in_alb[kMarchChunk];
      int k = 0;
      for (int j = 0; j < m; ++j) {
        if (HashField::inside_box(pos[j])) {
          slot[j] = k;
          inpos[k] = pos[j];
          ++k;
        } else {
          slot[j] = -1;
          sg[j] = 0.0;
          alb[j] = kBackground;
        }
      }
      FieldBatch& fb = tape->chunk(base / kMarchChunk);
      fb.n = 0;
      if (k > 0) tape_field->sample_batch(inpos, k, fb, in_sg, in_alb);
      for (int j = 0; j < m; ++j) {
        if (slot[j] < 0) continue;
        sg[j] = in_sg[slot[j]];
        alb[j] = in_alb[slot[j]];
      }
    } else {
      field.sample_many(pos, m, sg, alb);
      for (int j = 0; j < m; ++j) slot[j] = -1;
    }
    for (int j = 0; j < m; ++j) {
      const int i = base + j;
      SampleRecord local;
      SampleRecord& rec = records ? records[i] : local;
      rec = SampleRecord{};
      rec.t = ts[static_cast<size_t>(i)];
      rec.delta = (i + 1 < n ? ts[static_cast<size_t>(i) + 1] - ts[static_cast<size_t>(i)] : bin);
      rec.x = pos[j];
      rec.transmittance = transmittance;
      rec.tape_slot = slot[j];
      rec.inbox = HashField::inside_box(rec.x);
      if (rec.inbox) {
        rec.sigma = sg[j];
        rec.albedo = alb[j];
        rec.alpha = 1.0 - std::exp(-rec.sigma * rec.delta);
      } else {
        rec.sigma = 0.0;
        rec.albedo = kBackground;
        rec.alpha = 0.0;
      }
      rec.weight = transmittance * rec.alpha;
      if (rec.inbox && rec.weight != 0.0) {
        rec.color = shade_sample(ctx, rec);
        out.rgb += rec.color * rec.weight;
        out.alpha += rec.weight;
        depth_sum += rec.weight * rec.t;
      } else {
        rec.color = rec.albedo;
      }
      transmittance *= 1.0 - rec.alpha;
      count = i + 1;
      if (opt.stop_transmittance > 0.0 && transmittance < opt.stop_transmittance) {
        stopped = true;
        break;
      }
    }
  }
  out.rgb += kBackground * transmittance;
  out.depth = depth_sum / std::max(out.alpha, 1e-6);
  if (n_recorded) *n_recorded = count;
  return out;
}

// One deferred parameter-gradient contribution: accumulate the pullback of
// (d_sigma, d_albedo) at x. Collected across rays and drained in batches so
// the weight-gradient accumulation amortizes.
struct GradItem {
  Vec3 x;
  double d_sigma = 0.0;
  Vec3 d_albedo{0.0, 0.0, 0.0};
};

void flush_grad_items(const HashField& field, std::vector<GradItem>& items, FieldBatch& batch, double* grad) {
  constexpr int kChunk = 32;
  Vec3 pos[kChunk];
  double ds[kChunk];
  Vec3 da[kChunk];
  for (size_t base = 0; base < items.size(); base += kChunk) {
    const int m = static_cast<int>(std::min<size_t>(kChunk, items.size() - base));
    for (int j = 0; j < m; ++j) {
      const GradItem& it = items[base + static_cast<size_t>(j)];
      pos[j] = it.x;
      ds[j] = it.d_sigma;
      da[j] = it.d_albedo;
    }
    field.sample_batch(pos, m, batch, nullptr, nullptr);
    field.sample_batch_backward(ds, da, batch, grad);
  }
  items.clear();
}

// Backward for one ray. records/n_rec and tape come from a taped replay of
// the same ray; upstream gradients are per-ray. Per-sample contributions run
// straight off the tape chunks; normal-difference arms (new positions, no
// tape) are appended to items for the caller to drain.
void ray_backward(const HashField& field, const RenderOptions& opt, const SampleRecord* records, int n_rec,
                  const RayShade& shade, const Vec3& d_rgb, double d_mask, double d_depth, const RayTape& tape,
                  std::vector<GradItem>& items, double* grad) {
  double alpha = shade.alpha;
  double denom = std::max(alpha, 1e-6);
  double depth_sum = shade.depth * denom;

  double d_depth_sum = d_depth / denom;
  double d_alpha_total = d_mask;
  if (alpha > 1e-6) d_alpha_total -= d_depth * depth_sum / (denom * denom);

  static thread_local std::vector<double> dsig;
  static thread_local std::vector<Vec3> dalb;
  dsig.assign(static_cast<size_t>(n_rec), 0.0);
  dalb.assign(static_cast<size_t>(n_rec), Vec3{0.0, 0.0, 0.0});

  // Reverse sweep of w_i = T_i alpha_i, T_{i+1} = T_i (1 - alpha_i).
  double dT = dot(d_rgb, kBackground);  // background enters via final T
  for (int i = n_rec - 1; i >= 0; --i) {
    const SampleRecord& rec = records[i];
    if (!rec.inbox) continue;  // alpha identically 0, nothing differentiable

    double dw = d_alpha_total + d_depth_sum * rec.t;
    Vec3 dc{0.0, 0.0, 0.0};
    if (rec.weight != 0.0) {
      dw += dot(d_rgb, rec.color);
      dc = d_rgb * rec.weight;
    }
    double d_alpha = rec.transmittance * (dw - dT);
    dT = dw * rec.alpha + dT * (1.0 - rec.alpha);

    double d_sigma = d_alpha * (1.0 - rec.alpha) * rec.delta;

    // Shading chain: dc -> (albedo, normal).
    Vec3 d_albedo{0.0, 0.0, 0.0};
    Vec3 d_normal{0.0, 0.0, 0.0};
    if (rec.weight != 0.0) {
      switch (opt.shading) {
        case Shading::kAlbedo:
          d_albedo = dc;
          break;
        case Shading::kLambertian:
        case Shading::kTextureless: {
          double ndl = dot(rec.normal, opt.light_dir);
          double f = 0.1 + 0.9 * std::max(0.0, ndl);
          const Vec3& base = opt.shading == Shading::kLambertian ? rec.albedo : kGray;
          if (opt.shading == Shading::kLambertian) d_albedo = dc * f;
          double df = dot(dc, base);
          if (ndl > 0.0) d_normal = opt.light_dir * (0.9 * df);
          break;
        }
        case Shading::kNormal:
          d_normal = dc * 0.5;
          break;
      }
    }

    if (rec.normal_computed && (d_normal.x != 0.0 || d_normal.y != 0.0 || d_normal.z != 0.0)) {
      // n = -g/|g|  =>  dL/dg = -(I - n n^T) dL/dn / |g|
      double r = rec.grad_norm;
      Vec3 dn = d_normal;
      Vec3 dg = (dn - rec.normal * dot(rec.normal, dn)) / -r;
      // g_k = (sigma(x + h e_k) - sigma(x - h e_k)) / (2h)
      double inv2h = 1.0 / (2.0 * opt.normal_step);
      for (int k = 0; k < 3; ++k) {
        if (dg[k] == 0.0) continue;
        Vec3 hi = rec.x, lo = rec.x;
        hi[k] += opt.normal_step;
        lo[k] -= opt.normal_step;
        if (HashField::inside_box(hi)) items.push_back({hi, dg[k] * inv2h, {0.0, 0.0, 0.0}});
        if (HashField::inside_box(lo)) items.push_back({lo, -dg[k] * inv2h, {0.0, 0.0, 0.0}});
      }
    }

    dsig[static_cast<size_t>(i)] = d_sigma;
    dalb[static_cast<size_t>(i)] = d_albedo;
  }

  for (int base = 0; base < n_rec; base += kMarchChunk) {
    const FieldBatch& fb = tape.chunks[static_cast<size_t>(base / kMarchChunk)];
    if (fb.n == 0) continue;
    double ds[kMarchChunk] = {0};
    Vec3 da[kMarchChunk];
    bool any = false;
    const int m = std::min(kMarchChunk, n_rec - base);
    for (int j = 0; j < m; ++j) {
      const SampleRecord& rec = records[base + j];
      if (rec.tape_slot < 0) continue;
      ds[rec.tape_slot] = dsig[static_cast<size_t>(base + j)];
      da[rec.tape_slot] = dalb[static_cast<size_t>(base + j)];
      any = any || ds[rec.tape_slot] != 0.0 || da[rec.tape_slot].x != 0.0 || da[rec.tape_slot].y != 0.0 ||
            da[rec.tape_slot].z != 0.0;
    }
    if (any) field.sample_batch_backward(ds, da, tape.chunks[static_cast<size_t>(base / kMarchChunk)], grad);
  }
}

}  // namespace

Shading shading_from_string(const std::string& name) {
  if (name == "albedo") return Shading::kAlbedo;
  if (name == "lambertian") return Shading::kLambertian;
  if (name == "textureless") return Shading::kTextureless;
  if (name == "normal") return Shading::kNormal;
  throw ConfigError("unknown shading mode '" + name + "' (expected albedo|lambertian|textureless|normal)");
}

const char* shading_name(Shading s) {
  switch (s) {
    case Shading::kAlbedo: return "albedo";
    case Shading::kLambertian: return "lambertian";
    case Shading::kTextureless: return "textureless";
    case Shading::kNormal: return "normal";
  }
  return "albedo";
}

RayShade render_ray(const VolumeField& field, const Ray& ray, const RenderOptions& opt, uint64_t ray_index) {
  return march_ray(field, ray, opt, ray_index, nullptr, nullptr);
}

ViewRender render_view(const VolumeField& field, const Camera& cam, const RenderOptions& opt, ViewTape* retain) {
  cam.check();
  CameraBasis basis = camera_basis(cam);
  ViewRender out;
  out.rgb = ImageBuffer(cam.height, cam.width, 3);
  out.mask = ImageBuffer(cam.height, cam.width, 1);
  out.depth = ImageBuffer(cam.height, cam.width, 1);

  int64_t n_rays = static_cast<int64_t>(cam.width) * cam.height;
  const HashField* tape_field = nullptr;
  ViewTapeImpl* tp = nullptr;
  if (retain) {
    tape_field = dynamic_cast<const HashField*>(&field);
    if (!tape_field) throw ConfigError("render_view: tape retention requires a HashField");
    tp = &retain->impl();
    tp->width = cam.width;
    tp->height = cam.height;
    tp->n_samples = opt.n_samples;
    tp->rays.resize(static_cast<size_t>(n_rays));
    tp->shades.resize(static_cast<size_t>(n_rays));
    tp->records.resize(static_cast<size_t>(n_rays) * opt.n_samples);
    tp->n_rec.assign(static_cast<size_t>(n_rays), 0);
  }
  parallel_for(opt.threads, n_rays, [&](int, int64_t begin, int64_t end) {
    for (int64_t r = begin; r < end; ++r) {
      int y = static_cast<int>(r / cam.width);
      int x = static_cast<int>(r % cam.width);
      Ray ray = ray_through(cam, basis, x + 0.5, y + 0.5);
      RayShade shade;
      if (tp) {
        int n_rec = 0;
        shade = march_ray(field, ray, opt, static_cast<uint64_t>(r),
                          tp->records.data() + r * static_cast<int64_t>(opt.n_samples), &n_rec, tape_field,
                          &tp->rays[static_cast<size_t>(r)]);
        tp->n_rec[static_cast<size_t>(r)] = n_rec;
        tp->shades[static_cast<size_t>(r)] = shade;
      } else {
        shade = render_ray(field, ray, opt, static_cast<uint64_t>(r));
      }
      out.rgb.set_rgb(y, x, shade.rgb);
      out.mask.at(y, x) = shade.alpha;
      out.depth.at(y, x) = shade.depth;
    }
  });
  return out;
}

void render_view_backward(const HashField& field, ParamStore& store, const Camera& cam, const RenderOptions& opt,
                          const ViewGrad& upstream, const ViewTape* tape) {
  cam.check();
  CameraBasis basis = camera_basis(cam);
  int64_t n_rays = static_cast<int64_t>(cam.width) * cam.height;

  const ViewTapeImpl* tp = tape ? &tape->impl() : nullptr;
  if (tp && (tp->width != cam.width || tp->height != cam.height || tp->n_samples != opt.n_samples))
    throw ConfigError("render_view_backward: tape does not match the view being differentiated");

  int n_workers = opt.threads <= 1 ? 1 : opt.threads;
  std::vector<std::vector<double>> buffers;
  buffers.reserve(static_cast<size_t>(n_workers));
  for (int w = 0; w < n_workers; ++w) buffers.push_back(store.make_grad_buffer());

  parallel_for(n_workers, n_rays, [&](int worker, int64_t begin, int64_t end) {
    std::vector<SampleRecord> records(static_cast<size_t>(opt.n_samples));
    std::vector<GradItem> items;
    items.reserve(512);
    RayTape tape_local;
    FieldBatch batch;
    double* grad = buffers[static_cast<size_t>(worker)].data();
    for (int64_t r = begin; r < end; ++r) {
      int y = static_cast<int>(r / cam.width);
      int x = static_cast<int>(r % cam.width);

      Vec3 d_rgb{0.0, 0.0, 0.0};
      if (upstream.d_rgb) d_rgb = upstream.d_rgb->rgb_at(y, x);
      double d_mask = upstream.d_mask ? upstream.d_mask->at(y, x) : 0.0;
      double d_depth = upstream.d_depth ? upstream.d_depth->at(y, x) : 0.0;
      if (d_rgb.x == 0.0 && d_rgb.y == 0.0 && d_rgb.z == 0.0 && d_mask == 0.0 && d_depth == 0.0) continue;

      if (tp) {
        ray_backward(field, opt, tp->records.data() + r * static_cast<int64_t>(opt.n_samples),
                     tp->n_rec[static_cast<size_t>(r)], tp->shades[static_cast<size_t>(r)], d_rgb, d_mask, d_depth,
                     tp->rays[static_cast<size_t>(r)], items, grad);
      } else {
        Ray ray = ray_through(cam, basis, x + 0.5, y + 0.5);
        int n_rec = 0;
        RayShade shade =
            march_ray(field, ray, opt, static_cast<uint64_t>(r), records.data(), &n_rec, &field, &tape_local);
        ray_backward(field, opt, records.data(), n_rec, shade, d_rgb, d_mask, d_depth, tape_local, items, grad);
      }
      if (items.size() >= 256) flush_grad_items(field, items, batch, grad);
    }
    flush_grad_items(field, items, batch, grad);
  });

  store.merge_grad_buffers(buffers);
}

}  // namespace lift3d
