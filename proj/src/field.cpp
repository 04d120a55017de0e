#include "lift3d/field.hpp"

#include <algorithm>
#include <cmath>

namespace lift3d {

namespace {

// Smooth saturating activation x/sqrt(1+x^2): C-infinity, cheap, and its
// derivative (1-t^2)^{3/2} is recoverable from the output t alone, which
// keeps the backward tape down to post-activation values.
inline double isru(double x) { return x / std::sqrt(1.0 + x * x); }

inline double isru_deriv_from_output(double t) {
  double u = 1.0 - t * t;
  if (u < 0.0) u = 0.0;
  return u * std::sqrt(u);
}

inline double softplus(double x) {
  if (x >= 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) {
    double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline double dot_tail(const double* __restrict a, const double* __restrict b, int n) {
  double acc = 0.0;
#pragma omp simd reduction(+ : acc)
  for (int i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

// y = W x + b, W row-major. Four rows at a time so the x loads are shared
// and each row keeps an independent accumulator lane (the single-accumulator
// form is FMA-latency-bound).
inline void gemv(const double* __restrict w, const double* __restrict b, const double* __restrict x, int out, int in,
                 double* __restrict y) {
  int o = 0;
  for (; o + 4 <= out; o += 4) {
    const double* __restrict r0 = w + static_cast<int64_t>(o) * in;
    const double *__restrict r1 = r0 + in, *__restrict r2 = r1 + in, *__restrict r3 = r2 + in;
    double l0[8] = {0}, l1[8] = {0}, l2[8] = {0}, l3[8] = {0};
    int i = 0;
    for (; i + 8 <= in; i += 8) {
#pragma omp simd
      for (int k = 0; k < 8; ++k) {
        const double xv = x[i + k];
        l0[k] += r0[i + k] * xv;
        l1[k] += r1[i + k] * xv;
        l2[k] += r2[i + k] * xv;
        l3[k] += r3[i + k] * xv;
      }
    }
    double a0 = b ? b[o] : 0.0, a1 = b ? b[o + 1] : 0.0, a2 = b ? b[o + 2] : 0.0, a3 = b ? b[o + 3] : 0.0;
    for (; i < in; ++i) {
      const double xv = x[i];
      a0 += r0[i] * xv;
      a1 += r1[i] * xv;
      a2 += r2[i] * xv;
      a3 += r3[i] * xv;
    }
    for (int k = 0; k < 8; ++k) {
      a0 += l0[k];
      a1 += l1[k];
      a2 += l2[k];
      a3 += l3[k];
    }
    y[o] = a0;
    y[o + 1] = a1;
    y[o + 2] = a2;
    y[o + 3] = a3;
  }
  for (; o < out; ++o) y[o] = (b ? b[o] : 0.0) + dot_tail(w + static_cast<int64_t>(o) * in, x, in);
}

// y = W x without bias, used for tangents.
inline void gemv_nobias(const double* __restrict w, const double* __restrict x, int out, int in, double* __restrict y) {
  gemv(w, nullptr, x, out, in, y);
}

// Backward of y = W x + b: accumulates dW, db and writes dx. The two output
// streams are split so dW is a plain axpy per row and dx = W^T dy runs on
// register-blocked accumulators instead of a store-forwarding chain.
inline void gemv_backward(const double* __restrict w, const double* __restrict x, const double* __restrict dy, int out, int in,
                          double* __restrict dw, double* __restrict db, double* __restrict dx) {
  for (int o = 0; o < out; ++o) {
    const double g = dy[o];
    db[o] += g;
    double* __restrict drow = dw + static_cast<int64_t>(o) * in;
#pragma omp simd
    for (int i = 0; i < in; ++i) drow[i] += g * x[i];
  }
  for (int ib = 0; ib < in; ib += 32) {
    const int m = in - ib < 32 ? in - ib : 32;
    double acc[32] = {0};
    for (int o = 0; o < out; ++o) {
      const double g = dy[o];
      const double* __restrict row = w + static_cast<int64_t>(o) * in + ib;
#pragma omp simd
      for (int i = 0; i < m; ++i) acc[i] += row[i] * g;
    }
#pragma omp simd
    for (int i = 0; i < m; ++i) dx[ib + i] = acc[i];
  }
}

// R output rows by W sample lanes of Y = W X + b. The x strip loads are
// shared across the R rows, which keeps the tile FMA-bound instead of
// load-bound. Columns are summed in ascending unit order regardless of tile
// shape, so batch grouping never changes results bitwise.
template <int R, int W>
inline void gemm_fwd_tile(const double* __restrict w, const double* __restrict bias, const double* __restrict x,
                          int in, int S, double* __restrict y) {
  double acc[R][W];
  for (int r = 0; r < R; ++r) {
    const double b = bias ? bias[r] : 0.0;
#pragma omp simd
    for (int k = 0; k < W; ++k) acc[r][k] = b;
  }
  for (int i = 0; i < in; ++i) {
    const double* __restrict xr = x + static_cast<int64_t>(i) * S;
    for (int r = 0; r < R; ++r) {
      const double wv = w[static_cast<int64_t>(r) * in + i];
#pragma omp simd
      for (int k = 0; k < W; ++k) acc[r][k] += wv * xr[k];
    }
  }
  for (int r = 0; r < R; ++r)
#pragma omp simd
    for (int k = 0; k < W; ++k) y[static_cast<int64_t>(r) * S + k] = acc[r][k];
}

template <int R>
inline void gemm_fwd_rows(const double* __restrict w, const double* __restrict bias, const double* __restrict x,
                          int in, int S, double* __restrict y) {
  int sb = 0;
  for (; sb + 16 <= S; sb += 16) gemm_fwd_tile<R, 16>(w, bias, x + sb, in, S, y + sb);
  if (sb + 8 <= S) {
    gemm_fwd_tile<R, 8>(w, bias, x + sb, in, S, y + sb);
    sb += 8;
  }
  if (sb + 4 <= S) {
    gemm_fwd_tile<R, 4>(w, bias, x + sb, in, S, y + sb);
    sb += 4;
  }
  for (; sb < S; ++sb) {
    for (int r = 0; r < R; ++r) {
      double acc = bias ? bias[r] : 0.0;
      const double* __restrict row = w + static_cast<int64_t>(r) * in;
      for (int i = 0; i < in; ++i) acc += row[i] * x[static_cast<int64_t>(i) * S + sb];
      y[static_cast<int64_t>(r) * S + sb] = acc;
    }
  }
}

// Y = W X + b over a sample block: W (out x in) row-major, X (in x S)
// unit-major, Y (out x S).
inline void gemm_forward(const double* __restrict w, const double* __restrict b, const double* __restrict x, int out,
                         int in, int S, double* __restrict y) {
  int o = 0;
  for (; o + 4 <= out; o += 4)
    gemm_fwd_rows<4>(w + static_cast<int64_t>(o) * in, b ? b + o : nullptr, x, in, S, y + static_cast<int64_t>(o) * S);
  for (; o < out; ++o)
    gemm_fwd_rows<1>(w + static_cast<int64_t>(o) * in, b ? b + o : nullptr, x, in, S, y + static_cast<int64_t>(o) * S);
}

// B (n x m) = transpose of A (m x n), widening float tapes back to double.
template <typename Src>
inline void transpose(const Src* __restrict a, int m, int n, double* __restrict bt) {
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < n; ++c)
      bt[static_cast<int64_t>(c) * m + r] = static_cast<double>(a[static_cast<int64_t>(r) * n + c]);
}

inline void narrow_block(const double* __restrict src, float* __restrict dst, int64_t n) {
#pragma omp simd
  for (int64_t i = 0; i < n; ++i) dst[i] = static_cast<float>(src[i]);
}

// R dW rows by W input columns: dw[r][0..W) += sum_s dy[r][s] xt[s][0..W).
template <int R, int W>
inline void gemm_gw_tile(const double* __restrict dy, const double* __restrict xt, int in, int S,
                         double* __restrict dw) {
  double acc[R][W];
  for (int r = 0; r < R; ++r)
#pragma omp simd
    for (int k = 0; k < W; ++k) acc[r][k] = 0.0;
  for (int s = 0; s < S; ++s) {
    const double* __restrict xr = xt + static_cast<int64_t>(s) * in;
    for (int r = 0; r < R; ++r) {
      const double g = dy[static_cast<int64_t>(r) * S + s];
#pragma omp simd
      for (int k = 0; k < W; ++k) acc[r][k] += g * xr[k];
    }
  }
  for (int r = 0; r < R; ++r)
#pragma omp simd
    for (int k = 0; k < W; ++k) dw[static_cast<int64_t>(r) * in + k] += acc[r][k];
}

template <int R>
inline void gemm_gw_rows(const double* __restrict dy, const double* __restrict xt, int in, int S,
                         double* __restrict dw, double* __restrict db) {
  for (int r = 0; r < R; ++r) {
    double sum = 0.0;
    for (int s = 0; s < S; ++s) sum += dy[static_cast<int64_t>(r) * S + s];
    db[r] += sum;
  }
  int ib = 0;
  for (; ib + 16 <= in; ib += 16) gemm_gw_tile<R, 16>(dy, xt + ib, in, S, dw + ib);
  if (ib + 8 <= in) {
    gemm_gw_tile<R, 8>(dy, xt + ib, in, S, dw + ib);
    ib += 8;
  }
  if (ib + 4 <= in) {
    gemm_gw_tile<R, 4>(dy, xt + ib, in, S, dw + ib);
    ib += 4;
  }
  for (; ib < in; ++ib) {
    for (int r = 0; r < R; ++r) {
      double acc = 0.0;
      for (int s = 0; s < S; ++s) acc += dy[static_cast<int64_t>(r) * S + s] * xt[static_cast<int64_t>(s) * in + ib];
      dw[static_cast<int64_t>(r) * in + ib] += acc;
    }
  }
}

// dW (out x in) += dY (out x S) Xt (S x in), db += row sums of dY. Xt is the
// sample-major transpose so the tile reads stay contiguous; amortizing the
// dW read-modify-write over the whole block is the point of batching (the
// per-sample axpy form is store-bound).
inline void gemm_grad_w(const double* __restrict dy, const double* __restrict xt, int out, int in, int S,
                        double* __restrict dw, double* __restrict db) {
  int o = 0;
  for (; o + 4 <= out; o += 4)
    gemm_gw_rows<4>(dy + static_cast<int64_t>(o) * S, xt, in, S, dw + static_cast<int64_t>(o) * in, db + o);
  for (; o < out; ++o)
    gemm_gw_rows<1>(dy + static_cast<int64_t>(o) * S, xt, in, S, dw + static_cast<int64_t>(o) * in, db + o);
}

// R dX rows (units i0..i0+R) by W sample lanes: dx[i0+r][0..W) = sum_o
// w[o][i0+r] dy[o][0..W).
template <int R, int W>
inline void gemm_gx_tile(const double* __restrict w, const double* __restrict dy, int out, int in, int S, int i0,
                         double* __restrict dx) {
  double acc[R][W];
  for (int r = 0; r < R; ++r)
#pragma omp simd
    for (int k = 0; k < W; ++k) acc[r][k] = 0.0;
  for (int o = 0; o < out; ++o) {
    const double* __restrict gr = dy + static_cast<int64_t>(o) * S;
    const double* __restrict wrow = w + static_cast<int64_t>(o) * in + i0;
    for (int r = 0; r < R; ++r) {
      const double wv = wrow[r];
#pragma omp simd
      for (int k = 0; k < W; ++k) acc[r][k] += wv * gr[k];
    }
  }
  for (int r = 0; r < R; ++r)
#pragma omp simd
    for (int k = 0; k < W; ++k) dx[static_cast<int64_t>(r) * S + k] = acc[r][k];
}

template <int R>
inline void gemm_gx_rows(const double* __restrict w, const double* __restrict dy, int out, int in, int S, int i0,
                         double* __restrict dx) {
  int sb = 0;
  for (; sb + 16 <= S; sb += 16) gemm_gx_tile<R, 16>(w, dy + sb, out, in, S, i0, dx + sb);
  if (sb + 8 <= S) {
    gemm_gx_tile<R, 8>(w, dy + sb, out, in, S, i0, dx + sb);
    sb += 8;
  }
  if (sb + 4 <= S) {
    gemm_gx_tile<R, 4>(w, dy + sb, out, in, S, i0, dx + sb);
    sb += 4;
  }
  for (; sb < S; ++sb) {
    for (int r = 0; r < R; ++r) {
      double acc = 0.0;
      for (int o = 0; o < out; ++o)
        acc += w[static_cast<int64_t>(o) * in + i0 + r] * dy[static_cast<int64_t>(o) * S + sb];
      dx[static_cast<int64_t>(r) * S + sb] = acc;
    }
  }
}

// dX (in x S) = W^T dY, overwriting dX.
inline void gemm_grad_x(const double* __restrict w, const double* __restrict dy, int out, int in, int S,
                        double* __restrict dx) {
  int i = 0;
  for (; i + 4 <= in; i += 4) gemm_gx_rows<4>(w, dy, out, in, S, i, dx + static_cast<int64_t>(i) * S);
  for (; i < in; ++i) gemm_gx_rows<1>(w, dy, out, in, S, i, dx + static_cast<int64_t>(i) * S);
}

inline void isru_block(double* __restrict a, int64_t n) {
#pragma omp simd
  for (int64_t i = 0; i < n; ++i) a[i] = a[i] / std::sqrt(1.0 + a[i] * a[i]);
}

template <typename Src>
inline void isru_deriv_mul_block(double* __restrict d, const Src* __restrict t, int64_t n) {
#pragma omp simd
  for (int64_t i = 0; i < n; ++i) {
    const double ti = static_cast<double>(t[i]);
    double u = 1.0 - ti * ti;
    if (u < 0.0) u = 0.0;
    d[i] *= u * std::sqrt(u);
  }
}

constexpr uint64_t kHashPrimeY = 2654435761ULL;
constexpr uint64_t kHashPrimeZ = 805459861ULL;

}  // namespace

void FieldConfig::check() const {
  if (levels < 1) throw ConfigError("field: levels must be >= 1");
  if (base_resolution < 1 || finest_resolution < base_resolution) throw ConfigError("field: resolutions must satisfy 1 <= base <= finest");
  if (levels > 1 && finest_resolution == base_resolution) throw ConfigError("field: multi-level grids need finest > base");
  if (table_log2 < 4 || table_log2 > 24) throw ConfigError("field: table_log2 must lie in [4, 24]");
  if (features_per_level < 1 || hidden < 1) throw ConfigError("field: feature and hidden dims must be >= 1");
}

Vec3 field_normal(const VolumeField& field, const Vec3& x, double step) {
  Vec3 g;
  for (int k = 0; k < 3; ++k) {
    Vec3 hi = x, lo = x;
    hi[k] += step;
    lo[k] -= step;
    g[k] = (field.sigma_at(hi) - field.sigma_at(lo)) / (2.0 * step);
  }
  double n = norm(g);
  if (n < 1e-8) return {0.0, 0.0, 1.0};
  return g / -n;
}

HashField::HashField(ParamStore& store, const FieldConfig& cfg, uint64_t init_seed) : store_(store), cfg_(cfg) {
  cfg_.check();
  int64_t table = int64_t{1} << cfg_.table_log2;
  double growth = cfg_.levels > 1 ? std::exp(std::log(static_cast<double>(cfg_.finest_resolution) / cfg_.base_resolution) /
                                             (cfg_.levels - 1))
                                  : 1.0;
  for (int l = 0; l < cfg_.levels; ++l) {
    int res = static_cast<int>(std::lround(cfg_.base_resolution * std::pow(growth, l)));
    if (!resolutions_.empty() && res <= resolutions_.back()) res = resolutions_.back() + 1;
    resolutions_.push_back(res);
  }

  for (int l = 0; l < cfg_.levels; ++l) {
    Level lv;
    lv.res = resolutions_[static_cast<size_t>(l)];
    int64_t corners = static_cast<int64_t>(lv.res + 1) * (lv.res + 1) * (lv.res + 1);
    lv.dense = corners <= table;
    lv.entries = lv.dense ? corners : table;
    std::string name = "field.grid.l" + std::to_string(l);
    store_.add(name, {lv.entries, cfg_.features_per_level});
    lv.offset = store_.array(name).offset;
    levels_.push_back(lv);

    Rng rng(hash_mix(init_seed, 0x9000 + static_cast<uint64_t>(l)));
    double* feat = store_.values(name);
    for (int64_t i = 0; i < lv.entries * cfg_.features_per_level; ++i)
      feat[i] = rng.next_uniform(-cfg_.feature_init_scale, cfg_.feature_init_scale);
  }

  int in = cfg_.input_dim(), hid = cfg_.hidden;
  auto add_linear = [&](const char* wname, const char* bname, int out_dim, int in_dim, uint64_t salt, int64_t* w_off,
                        int64_t* b_off) {
    store_.add(wname, {out_dim, in_dim});
    store_.add(bname, {out_dim});
    *w_off = store_.array(wname).offset;
    *b_off = store_.array(bname).offset;
    Rng rng(hash_mix(init_seed, salt));
    double limit = std::sqrt(6.0 / (in_dim + out_dim));
    double* w = store_.values(wname);
    for (int64_t i = 0; i < static_cast<int64_t>(out_dim) * in_dim; ++i) w[i] = rng.next_uniform(-limit, limit);
  };
  add_linear("field.mlp.w0", "field.mlp.b0", hid, in, 0xA0, &w0_, &b0_);
  add_linear("field.mlp.w1", "field.mlp.b1", hid, hid, 0xA1, &w1_, &b1_);
  add_linear("field.mlp.w2", "field.mlp.b2", 4, hid, 0xA2, &w2_, &b2_);
}

FieldScratch HashField::make_scratch() const {
  FieldScratch s;
  int in = cfg_.input_dim(), hid = cfg_.hidden;
  s.features.resize(static_cast<size_t>(in));
  s.h0.resize(static_cast<size_t>(hid));
  s.h1.resize(static_cast<size_t>(hid));
  s.d_features.resize(static_cast<size_t>(in));
  s.dh0.resize(static_cast<size_t>(hid));
  s.dh1.resize(static_cast<size_t>(hid));
  s.t_features.resize(static_cast<size_t>(in));
  s.th0.resize(static_cast<size_t>(hid));
  s.th1.resize(static_cast<size_t>(hid));
  return s;
}

double HashField::blob(const Vec3& x) const {
  double s2 = cfg_.blob_sigma * cfg_.blob_sigma;
  return cfg_.blob_amplitude * std::exp(-dot(x, x) / (2.0 * s2));
}

Vec3 HashField::blob_grad(const Vec3& x) const {
  double s2 = cfg_.blob_sigma * cfg_.blob_sigma;
  return x * (-blob(x) / s2);
}

void HashField::corner_setup(const Level& lv, const Vec3& x, int64_t idx[8], double w[8]) const {
  int n = lv.res;
  double u[3], f[3];
  int c[3];
  for (int k = 0; k < 3; ++k) {
    u[k] = (x[k] + 1.0) * 0.5 * n;
    int ck = static_cast<int>(std::floor(u[k]));
    if (ck < 0) ck = 0;
    if (ck > n - 1) ck = n - 1;
    c[k] = ck;
    f[k] = u[k] - ck;
  }
  int64_t stride = n + 1;
  for (int corner = 0; corner < 8; ++corner) {
    int dx = corner & 1, dy = (corner >> 1) & 1, dz = (corner >> 2) & 1;
    int ix = c[0] + dx, iy = c[1] + dy, iz = c[2] + dz;
    if (lv.dense) {
      idx[corner] = (static_cast<int64_t>(ix) * stride + iy) * stride + iz;
    } else {
      uint64_t h = static_cast<uint64_t>(ix) ^ (static_cast<uint64_t>(iy) * kHashPrimeY) ^ (static_cast<uint64_t>(iz) * kHashPrimeZ);
      idx[corner] = static_cast<int64_t>(h & (static_cast<uint64_t>(lv.entries) - 1));
    }
    w[corner] = (dx ? f[0] : 1.0 - f[0]) * (dy ? f[1] : 1.0 - f[1]) * (dz ? f[2] : 1.0 - f[2]);
  }
}

void HashField::corner_setup_grad(const Level& lv, const Vec3& x, int64_t idx[8], double w[8], double dw[8][3]) const {
  corner_setup(lv, x, idx, w);
  int n = lv.res;
  double f[3];
  for (int k = 0; k < 3; ++k) {
    double u = (x[k] + 1.0) * 0.5 * n;
    int ck = static_cast<int>(std::floor(u));
    if (ck < 0) ck = 0;
    if (ck > n - 1) ck = n - 1;
    f[k] = u - ck;
  }
  double scale = 0.5 * n;  // du/dx
  for (int corner = 0; corner < 8; ++corner) {
    int d[3] = {corner & 1, (corner >> 1) & 1, (corner >> 2) & 1};
    for (int k = 0; k < 3; ++k) {
      double prod = scale * (d[k] ? 1.0 : -1.0);
      for (int j = 0; j < 3; ++j)
        if (j != k) prod *= d[j] ? f[j] : 1.0 - f[j];
      dw[corner][k] = prod;
    }
  }
}

void HashField::encode(const Vec3& x, double* features) const {
  const double* values = store_.values_flat();
  int F = cfg_.features_per_level;
  int64_t idx[8];
  double w[8];
  for (size_t l = 0; l < levels_.size(); ++l) {
    corner_setup(levels_[l], x, idx, w);
    const double* base = values + levels_[l].offset;
    for (int f = 0; f < F; ++f) {
      double acc = 0.0;
      for (int corner = 0; corner < 8; ++corner) acc += w[corner] * base[idx[corner] * F + f];
      features[l * F + f] = acc;
    }
  }
}

void HashField::encode_backward(const Vec3& x, const double* d_features, double* grad) const {
  int F = cfg_.features_per_level;
  int64_t idx[8];
  double w[8];
  for (size_t l = 0; l < levels_.size(); ++l) {
    corner_setup(levels_[l], x, idx, w);
    double* base = grad + levels_[l].offset;
    for (int f = 0; f < F; ++f) {
      double g = d_features[l * F + f];
      if (g == 0.0) continue;
      for (int corner = 0; corner < 8; ++corner) base[idx[corner] * F + f] += w[corner] * g;
    }
  }
}

std::vector<int64_t> HashField::touched_feature_indices(const Vec3& x) const {
  std::vector<int64_t> out;
  int F = cfg_.features_per_level;
  int64_t idx[8];
  double w[8];
  for (const auto& lv : levels_) {
    corner_setup(lv, x, idx, w);
    for (int corner = 0; corner < 8; ++corner)
      for (int f = 0; f < F; ++f) out.push_back(lv.offset + idx[corner] * F + f);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

void HashField::forward(const Vec3& x, FieldScratch& s, double* sigma, Vec3* albedo) const {
  int in = cfg_.input_dim(), hid = cfg_.hidden;
  encode(x, s.features.data());
  s.features[static_cast<size_t>(in) - 3] = x.x;
  s.features[static_cast<size_t>(in) - 2] = x.y;
  s.features[static_cast<size_t>(in) - 1] = x.z;

  const double* values = store_.values_flat();
  gemv(values + w0_, values + b0_, s.features.data(), hid, in, s.h0.data());
  for (int i = 0; i < hid; ++i) s.h0[static_cast<size_t>(i)] = isru(s.h0[static_cast<size_t>(i)]);
  gemv(values + w1_, values + b1_, s.h0.data(), hid, hid, s.h1.data());
  for (int i = 0; i < hid; ++i) s.h1[static_cast<size_t>(i)] = isru(s.h1[static_cast<size_t>(i)]);

  double out[4];
  gemv(values + w2_, values + b2_, s.h1.data(), 4, hid, out);

  s.sigma_pre = out[0] + blob(x);
  double sg = softplus(s.sigma_pre);
  Vec3 alb{sigmoid(out[1]), sigmoid(out[2]), sigmoid(out[3])};
  if (!std::isfinite(sg) || !std::isfinite(alb.x) || !std::isfinite(alb.y) || !std::isfinite(alb.z))
    throw NumericError("field produced a non-finite sample (diverged)");
  s.albedo_out = alb;
  *sigma = sg;
  *albedo = alb;
}

void HashField::sample(const Vec3& x, double* sigma, Vec3* albedo) const {
  if (!inside_box(x)) {
    *sigma = 0.0;
    *albedo = {1.0, 1.0, 1.0};
    return;
  }
  static thread_local FieldScratch tls;
  if (tls.features.size() != static_cast<size_t>(cfg_.input_dim()) || tls.h0.size() != static_cast<size_t>(cfg_.hidden))
    tls = make_scratch();
  forward(x, tls, sigma, albedo);
}

void HashField::sample_cached(const Vec3& x, FieldScratch& s, double* sigma, Vec3* albedo) const {
  if (!inside_box(x)) {
    *sigma = 0.0;
    *albedo = {1.0, 1.0, 1.0};
    return;
  }
  forward(x, s, sigma, albedo);
}

void HashField::sample_backward(const Vec3& x, double d_sigma, const Vec3& d_albedo, FieldScratch& s, double* grad) const {
  if (!inside_box(x)) return;
  double sigma;
  Vec3 albedo;
  forward(x, s, &sigma, &albedo);
  sample_backward_cached(x, d_sigma, d_albedo, s, grad);
}

void HashField::sample_backward_cached(const Vec3& x, double d_sigma, const Vec3& d_albedo, FieldScratch& s, double* grad) const {
  if (!inside_box(x)) return;
  int in = cfg_.input_dim(), hid = cfg_.hidden;
  const double* values = store_.values_flat();
  const Vec3& a = s.albedo_out;

  double dout[4];
  dout[0] = d_sigma * sigmoid(s.sigma_pre);
  dout[1] = d_albedo.x * a.x * (1.0 - a.x);
  dout[2] = d_albedo.y * a.y * (1.0 - a.y);
  dout[3] = d_albedo.z * a.z * (1.0 - a.z);

  gemv_backward(values + w2_, s.h1.data(), dout, 4, hid, grad + w2_, grad + b2_, s.dh1.data());
  for (int i = 0; i < hid; ++i) s.dh1[static_cast<size_t>(i)] *= isru_deriv_from_output(s.h1[static_cast<size_t>(i)]);
  gemv_backward(values + w1_, s.h0.data(), s.dh1.data(), hid, hid, grad + w1_, grad + b1_, s.dh0.data());
  for (int i = 0; i < hid; ++i) s.dh0[static_cast<size_t>(i)] *= isru_deriv_from_output(s.h0[static_cast<size_t>(i)]);
  gemv_backward(values + w0_, s.features.data(), s.dh0.data(), hid, in, grad + w0_, grad + b0_, s.d_features.data());

  int F = cfg_.features_per_level;
  int64_t idx[8];
  double w[8];
  for (size_t l = 0; l < levels_.size(); ++l) {
    corner_setup(levels_[l], x, idx, w);
    double* base = grad + levels_[l].offset;
    for (int f = 0; f < F; ++f) {
      double g = s.d_features[l * F + f];
      if (g == 0.0) continue;
      for (int corner = 0; corner < 8; ++corner) base[idx[corner] * F + f] += w[corner] * g;
    }
  }
}

void HashField::sample_jvp(const Vec3& x, const Vec3& dir, FieldScratch& s, double* d_sigma, Vec3* d_albedo) const {
  if (!inside_box(x)) {
    *d_sigma = 0.0;
    *d_albedo = {0.0, 0.0, 0.0};
    return;
  }
  // Requires a preceding sample_cached(x, s, ...) so the activations in s
  // belong to x.
  int in = cfg_.input_dim(), hid = cfg_.hidden;
  const double* values = store_.values_flat();

  int F = cfg_.features_per_level;
  int64_t idx[8];
  double w[8], dw[8][3];
  for (size_t l = 0; l < levels_.size(); ++l) {
    corner_setup_grad(levels_[l], x, idx, w, dw);
    const double* base = values + levels_[l].offset;
    for (int f = 0; f < F; ++f) {
      double acc = 0.0;
      for (int corner = 0; corner < 8; ++corner) {
        double dwdir = dw[corner][0] * dir.x + dw[corner][1] * dir.y + dw[corner][2] * dir.z;
        acc += dwdir * base[idx[corner] * F + f];
      }
      s.t_features[l * F + f] = acc;
    }
  }
  s.t_features[static_cast<size_t>(in) - 3] = dir.x;
  s.t_features[static_cast<size_t>(in) - 2] = dir.y;
  s.t_features[static_cast<size_t>(in) - 1] = dir.z;

  gemv_nobias(values + w0_, s.t_features.data(), hid, in, s.th0.data());
  for (int i = 0; i < hid; ++i) s.th0[static_cast<size_t>(i)] *= isru_deriv_from_output(s.h0[static_cast<size_t>(i)]);
  gemv_nobias(values + w1_, s.th0.data(), hid, hid, s.th1.data());
  for (int i = 0; i < hid; ++i) s.th1[static_cast<size_t>(i)] *= isru_deriv_from_output(s.h1[static_cast<size_t>(i)]);

  double tout[4];
  gemv_nobias(values + w2_, s.th1.data(), 4, hid, tout);

  double t_pre = tout[0] + dot(blob_grad(x), dir);
  const Vec3& a = s.albedo_out;
  *d_sigma = t_pre * sigmoid(s.sigma_pre);
  *d_albedo = {tout[1] * a.x * (1.0 - a.x), tout[2] * a.y * (1.0 - a.y), tout[3] * a.z * (1.0 - a.z)};
}

void HashField::sample_batch(const Vec3* xs, int n, FieldBatch& b, double* sigma, Vec3* albedo,
                             bool for_grad) const {
  const int in = cfg_.input_dim(), hid = cfg_.hidden;
  const int F = cfg_.features_per_level;
  const int L = static_cast<int>(levels_.size());
  const int64_t N = n;
  b.n = n;
  b.sigma_pre.resize(static_cast<size_t>(N));
  b.sig_gate.resize(static_cast<size_t>(N));
  b.albedo_out.resize(static_cast<size_t>(N));
  if (for_grad) {
    b.x_in.resize(static_cast<size_t>(in) * N);
    b.h0.resize(static_cast<size_t>(hid) * N);
    b.h1.resize(static_cast<size_t>(hid) * N);
    b.corner_idx.resize(static_cast<size_t>(L) * 8 * N);
    b.corner_w.resize(static_cast<size_t>(L) * 8 * N);
  }
  static thread_local std::vector<double> xw, h0w, h1w, outw;
  xw.resize(static_cast<size_t>(in) * N);
  h0w.resize(static_cast<size_t>(hid) * N);
  h1w.resize(static_cast<size_t>(hid) * N);
  outw.resize(4 * static_cast<size_t>(N));

  const double* values = store_.values_flat();
  int64_t idx[8];
  double w[8];
  static thread_local std::vector<int64_t> itab;
  static thread_local std::vector<double> wtab;
  itab.resize(8 * static_cast<size_t>(N));
  wtab.resize(8 * static_cast<size_t>(N));
  // Same gather as encode(), walked level-major and in two passes: the first
  // computes every sample's corners for this level and prefetches them, the
  // second does the interpolation with the lines already on their way. When
  // a backward pass will follow, the corner table is kept so the scatter
  // never recomputes the hashes.
  for (int l = 0; l < L; ++l) {
    const Level& lv = levels_[static_cast<size_t>(l)];
    const double* base = values + lv.offset;
    for (int s = 0; s < n; ++s) {
      corner_setup(lv, xs[s], idx, w);
      for (int corner = 0; corner < 8; ++corner) {
        itab[static_cast<size_t>(s) * 8 + corner] = idx[corner];
        wtab[static_cast<size_t>(s) * 8 + corner] = w[corner];
        __builtin_prefetch(base + idx[corner] * F, 0, 1);
      }
      if (for_grad) {
        int32_t* ci = b.corner_idx.data() + (static_cast<size_t>(l) * N + s) * 8;
        float* cw = b.corner_w.data() + (static_cast<size_t>(l) * N + s) * 8;
        for (int corner = 0; corner < 8; ++corner) {
          ci[corner] = static_cast<int32_t>(idx[corner]);
          cw[corner] = static_cast<float>(w[corner]);
        }
      }
    }
    for (int s = 0; s < n; ++s) {
      const int64_t* si = itab.data() + static_cast<size_t>(s) * 8;
      const double* sw = wtab.data() + static_cast<size_t>(s) * 8;
      for (int f = 0; f < F; ++f) {
        double acc = 0.0;
        for (int corner = 0; corner < 8; ++corner) acc += sw[corner] * base[si[corner] * F + f];
        xw[(static_cast<size_t>(l) * F + f) * N + s] = acc;
      }
    }
  }
  for (int s = 0; s < n; ++s) {
    xw[static_cast<size_t>(in - 3) * N + s] = xs[s].x;
    xw[static_cast<size_t>(in - 2) * N + s] = xs[s].y;
    xw[static_cast<size_t>(in - 1) * N + s] = xs[s].z;
  }

  gemm_forward(values + w0_, values + b0_, xw.data(), hid, in, n, h0w.data());
  isru_block(h0w.data(), static_cast<int64_t>(hid) * N);
  gemm_forward(values + w1_, values + b1_, h0w.data(), hid, hid, n, h1w.data());
  isru_block(h1w.data(), static_cast<int64_t>(hid) * N);
  gemm_forward(values + w2_, values + b2_, h1w.data(), 4, hid, n, outw.data());
  if (for_grad) {
    narrow_block(xw.data(), b.x_in.data(), static_cast<int64_t>(in) * N);
    narrow_block(h0w.data(), b.h0.data(), static_cast<int64_t>(hid) * N);
    narrow_block(h1w.data(), b.h1.data(), static_cast<int64_t>(hid) * N);
  }

  bool finite = true;
  for (int s = 0; s < n; ++s) {
    const double pre = outw[static_cast<size_t>(s)] + blob(xs[s]);
    b.sigma_pre[static_cast<size_t>(s)] = pre;
    // One exp serves both the softplus and its derivative.
    double sg, gate;
    if (pre >= 0.0) {
      const double e = std::exp(-pre);
      sg = pre + std::log1p(e);
      gate = 1.0 / (1.0 + e);
    } else {
      const double e = std::exp(pre);
      sg = std::log1p(e);
      gate = e / (1.0 + e);
    }
    b.sig_gate[static_cast<size_t>(s)] = gate;
    const Vec3 alb{sigmoid(outw[static_cast<size_t>(N + s)]), sigmoid(outw[static_cast<size_t>(2 * N + s)]),
                   sigmoid(outw[static_cast<size_t>(3 * N + s)])};
    b.albedo_out[static_cast<size_t>(s)] = alb;
    if (sigma) sigma[s] = sg;
    if (albedo) albedo[s] = alb;
    finite = finite && std::isfinite(sg) && std::isfinite(alb.x) && std::isfinite(alb.y) && std::isfinite(alb.z);
  }
  if (!finite) throw NumericError("field produced a non-finite sample (diverged)");
}

void HashField::sample_batch_backward(const double* d_sigma, const Vec3* d_albedo, const FieldBatch& b,
                                      double* grad) const {
  const int in = cfg_.input_dim(), hid = cfg_.hidden;
  const int n = b.n;
  if (n == 0) return;
  const int64_t N = n;
  static thread_local std::vector<double> d_out, dh1, dh0, dx_in, xt, a0t, a1t;
  d_out.resize(4 * static_cast<size_t>(N));
  dh1.resize(static_cast<size_t>(hid) * N);
  dh0.resize(static_cast<size_t>(hid) * N);
  dx_in.resize(static_cast<size_t>(in) * N);
  xt.resize(static_cast<size_t>(in) * N);
  a0t.resize(static_cast<size_t>(hid) * N);
  a1t.resize(static_cast<size_t>(hid) * N);

  for (int s = 0; s < n; ++s) {
    const Vec3& a = b.albedo_out[static_cast<size_t>(s)];
    d_out[static_cast<size_t>(s)] = d_sigma[s] * b.sig_gate[static_cast<size_t>(s)];
    d_out[static_cast<size_t>(N + s)] = d_albedo[s].x * a.x * (1.0 - a.x);
    d_out[static_cast<size_t>(2 * N + s)] = d_albedo[s].y * a.y * (1.0 - a.y);
    d_out[static_cast<size_t>(3 * N + s)] = d_albedo[s].z * a.z * (1.0 - a.z);
  }

  transpose(b.x_in.data(), in, n, xt.data());
  transpose(b.h0.data(), hid, n, a0t.data());
  transpose(b.h1.data(), hid, n, a1t.data());

  const double* values = store_.values_flat();
  gemm_grad_w(d_out.data(), a1t.data(), 4, hid, n, grad + w2_, grad + b2_);
  gemm_grad_x(values + w2_, d_out.data(), 4, hid, n, dh1.data());
  isru_deriv_mul_block(dh1.data(), b.h1.data(), static_cast<int64_t>(hid) * N);
  gemm_grad_w(dh1.data(), a0t.data(), hid, hid, n, grad + w1_, grad + b1_);
  gemm_grad_x(values + w1_, dh1.data(), hid, hid, n, dh0.data());
  isru_deriv_mul_block(dh0.data(), b.h0.data(), static_cast<int64_t>(hid) * N);
  gemm_grad_w(dh0.data(), xt.data(), hid, in, n, grad + w0_, grad + b0_);
  gemm_grad_x(values + w0_, dh0.data(), hid, in, n, dx_in.data());

  // Level-major like the forward gather; per grid cell the accumulation
  // order over samples is unchanged.
  const int F = cfg_.features_per_level;
  const int L = static_cast<int>(levels_.size());
  for (int l = 0; l < L; ++l) {
    double* gbase = grad + levels_[static_cast<size_t>(l)].offset;
    for (int s = 0; s < n; ++s) {
      const int32_t* ci = b.corner_idx.data() + (static_cast<size_t>(l) * N + s) * 8;
      const float* cw = b.corner_w.data() + (static_cast<size_t>(l) * N + s) * 8;
      for (int f = 0; f < F; ++f) {
        const double g = dx_in[(static_cast<size_t>(l) * F + f) * N + s];
        if (g == 0.0) continue;
        for (int corner = 0; corner < 8; ++corner)
          gbase[ci[corner] * F + f] += static_cast<double>(cw[corner]) * g;
      }
    }
  }
}

void HashField::extract_scratch(const FieldBatch& b, int i, FieldScratch& s) const {
  const int in = cfg_.input_dim(), hid = cfg_.hidden;
  const int64_t N = b.n;
  for (int u = 0; u < in; ++u)
    s.features[static_cast<size_t>(u)] = static_cast<double>(b.x_in[static_cast<size_t>(u) * N + i]);
  for (int u = 0; u < hid; ++u)
    s.h0[static_cast<size_t>(u)] = static_cast<double>(b.h0[static_cast<size_t>(u) * N + i]);
  for (int u = 0; u < hid; ++u)
    s.h1[static_cast<size_t>(u)] = static_cast<double>(b.h1[static_cast<size_t>(u) * N + i]);
  s.sigma_pre = b.sigma_pre[static_cast<size_t>(i)];
  s.albedo_out = b.albedo_out[static_cast<size_t>(i)];
}

void HashField::sample_many(const Vec3* xs, int n, double* sigma, Vec3* albedo) const {
  constexpr int kChunk = 32;
  static thread_local FieldBatch batch;
  Vec3 pos[kChunk];
  double sg[kChunk];
  Vec3 alb[kChunk];
  int slot[kChunk];
  for (int base = 0; base < n; base += kChunk) {
    const int m = std::min(kChunk, n - base);
    int k = 0;
    for (int i = 0; i < m; ++i) {
      if (inside_box(xs[base + i])) {
        slot[k] = base + i;
        pos[k] = xs[base + i];
        ++k;
      } else {
        sigma[base + i] = 0.0;
        albedo[base + i] = {1.0, 1.0, 1.0};
      }
    }
    if (k == 0) continue;
    sample_batch(pos, k, batch, sg, alb, /*for_grad=*/false);
    for (int j = 0; j < k; ++j) {
      sigma[slot[j]] = sg[j];
      albedo[slot[j]] = alb[j];
    }
  }
}

}  // namespace lift3d
