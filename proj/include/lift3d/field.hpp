#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lift3d/common.hpp"
#include "lift3d/params.hpp"

namespace lift3d {

// Positional field over the unit box [-1,1]^3: density sigma >= 0 plus a
// view-independent linear albedo in (0,1)^3. Positions outside the box are
// empty by definition (sigma 0, white albedo).
class VolumeField {
 public:
  virtual ~VolumeField() = default;
  virtual void sample(const Vec3& x, double* sigma, Vec3* albedo) const = 0;

  // Bulk evaluation. The default just loops; implementations may batch.
  virtual void sample_many(const Vec3* xs, int n, double* sigma, Vec3* albedo) const {
    for (int i = 0; i < n; ++i) sample(xs[i], &sigma[i], &albedo[i]);
  }

  double sigma_at(const Vec3& x) const {
    double s;
    Vec3 a;
    sample(x, &s, &a);
    return s;
  }
};

// Shading normal from the density: n = -grad(sigma)/|grad(sigma)| estimated
// with central differences; flat regions fall back to +z.
Vec3 field_normal(const VolumeField& field, const Vec3& x, double step = 1e-3);

struct FieldConfig {
  int levels = 8;
  int base_resolution = 16;
  int finest_resolution = 256;
  int table_log2 = 16;  // max entries per level
  int features_per_level = 2;
  int hidden = 64;
  double blob_amplitude = 5.0;
  double blob_sigma = 0.2;
  double feature_init_scale = 1e-4;

  int input_dim() const { return levels * features_per_level + 3; }
  void check() const;
};

// Scratch space for one field evaluation; reused across samples so the hot
// path never allocates. Doubling as the backward tape: forward leaves the
// activations needed by sample_backward_cached in place.
struct FieldScratch {
  std::vector<double> features, h0, h1;
  std::vector<double> d_features, dh0, dh1;
  std::vector<double> t_features, th0, th1;
  double sigma_pre = 0.0;  // softplus input, for the cached backward
  Vec3 albedo_out;
};

// Tape for a batch of field evaluations. Activations are stored unit-major
// (row u holds all samples), which keeps the matrix kernels on contiguous
// rows; each sample's result only depends on its own column, so batching
// never changes values bitwise. The forward math runs entirely in double;
// the tape keeps float snapshots of the activations (plus the interpolation
// corners) for the gradient pass, which tolerates the rounding and reads
// half the memory for it.
struct FieldBatch {
  int n = 0;
  std::vector<float> x_in;            // input_dim x n
  std::vector<float> h0, h1;          // hidden x n, post-activation
  std::vector<double> sigma_pre;      // n
  std::vector<double> sig_gate;       // n, sigmoid(sigma_pre)
  std::vector<Vec3> albedo_out;       // n
  std::vector<int32_t> corner_idx;    // n x levels x 8, grid entry per corner
  std::vector<float> corner_w;        // n x levels x 8
};

// Multiresolution hash-grid encoding feeding a small MLP. All learnable
// state lives in a ParamStore under the "field." prefix, registered (and
// initialized, seeded) by the constructor.
//
// Per level, a query position selects a cell of the level's lattice over
// [-1,1]^3 and trilinearly blends the 8 corner feature vectors. Levels whose
// full corner grid fits in the table use injective dense indexing; finer
// levels hash the corner coordinates (XOR of the coordinates multiplied by
// 1, 2654435761 and 805459861, modulo table size). The MLP input is the
// concatenated per-level features plus the raw position.
class HashField : public VolumeField {
 public:
  HashField(ParamStore& store, const FieldConfig& cfg, uint64_t init_seed);

  const FieldConfig& config() const { return cfg_; }
  const std::vector<int>& resolutions() const { return resolutions_; }
  int64_t level_entries(int level) const { return levels_[level].entries; }
  bool level_dense(int level) const { return levels_[level].dense; }

  void sample(const Vec3& x, double* sigma, Vec3* albedo) const override;
  void sample_cached(const Vec3& x, FieldScratch& s, double* sigma, Vec3* albedo) const;
  void sample_many(const Vec3* xs, int n, double* sigma, Vec3* albedo) const override;

  // Batched forward with tape. All positions must lie inside the box (the
  // sample_many wrapper handles the empty-outside convention). sigma/albedo
  // may be null when only the tape matters.
  void sample_batch(const Vec3* xs, int n, FieldBatch& b, double* sigma, Vec3* albedo,
                    bool for_grad = true) const;

  // Batched parameter gradient from the tape sample_batch left in b.
  void sample_batch_backward(const double* d_sigma, const Vec3* d_albedo, const FieldBatch& b, double* grad) const;

  // Copies sample i of a batch tape into a per-sample scratch so the jvp and
  // single-sample backward paths can run off batched forwards.
  void extract_scratch(const FieldBatch& b, int i, FieldScratch& s) const;

  // Accumulates d(loss)/d(params) into grad (a flat buffer of
  // store.total_size()) given upstream d_sigma / d_albedo. The cached variant
  // consumes the activations sample_cached left in the scratch.
  void sample_backward(const Vec3& x, double d_sigma, const Vec3& d_albedo, FieldScratch& s, double* grad) const;
  void sample_backward_cached(const Vec3& x, double d_sigma, const Vec3& d_albedo, FieldScratch& s, double* grad) const;

  // Directional derivative of (sigma, albedo) along dir at x.
  void sample_jvp(const Vec3& x, const Vec3& dir, FieldScratch& s, double* d_sigma, Vec3* d_albedo) const;

  // Fills the levels * features_per_level grid features for x (the raw
  // position is appended separately by the forward pass).
  void encode(const Vec3& x, double* features) const;

  // Accumulates d(dot(d_features, encode(x))) / d(grid features) into grad;
  // the encoding is linear in the grid parameters.
  void encode_backward(const Vec3& x, const double* d_features, double* grad) const;

  // Flat ParamStore indices of the grid features touched by x (test support).
  std::vector<int64_t> touched_feature_indices(const Vec3& x) const;

  static bool inside_box(const Vec3& x) {
    return x.x >= -1.0 && x.x <= 1.0 && x.y >= -1.0 && x.y <= 1.0 && x.z >= -1.0 && x.z <= 1.0;
  }

  FieldScratch make_scratch() const;

 private:
  struct Level {
    int res = 0;
    bool dense = false;
    int64_t entries = 0;
    int64_t offset = 0;  // flat offset of the level's feature array
  };

  void forward(const Vec3& x, FieldScratch& s, double* sigma, Vec3* albedo) const;
  double blob(const Vec3& x) const;
  Vec3 blob_grad(const Vec3& x) const;
  void corner_setup(const Level& lv, const Vec3& x, int64_t idx[8], double w[8]) const;
  void corner_setup_grad(const Level& lv, const Vec3& x, int64_t idx[8], double w[8], double dw[8][3]) const;

  ParamStore& store_;
  FieldConfig cfg_;
  std::vector<int> resolutions_;
  std::vector<Level> levels_;
  int64_t w0_ = 0, b0_ = 0, w1_ = 0, b1_ = 0, w2_ = 0, b2_ = 0;  // flat offsets
};

}  // namespace lift3d
