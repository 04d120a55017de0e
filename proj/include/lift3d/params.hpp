#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lift3d/common.hpp"

namespace lift3d {

struct ParamArray {
  std::string name;
  std::vector<int64_t> shape;
  int64_t offset = 0;  // into the flat storage
  int64_t size = 0;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Flat float64 parameter storage with named views, gradients and Adam moment
// buffers. Everything trainable in the pipeline lives here, which keeps
// checkpointing, finite-difference checks and the optimizer trivial.
class ParamStore {
 public:
  // Registers a new named array and returns its index. Values start at 0.
  int add(const std::string& name, std::vector<int64_t> shape);

  bool has(const std::string& name) const;
  const ParamArray& array(const std::string& name) const;
  const std::vector<ParamArray>& arrays() const { return arrays_; }
  int64_t total_size() const { return static_cast<int64_t>(values_.size()); }
  int64_t step() const { return step_; }

  double* values(const std::string& name) { return values_.data() + array(name).offset; }
  const double* values(const std::string& name) const { return values_.data() + array(name).offset; }
  double* grads(const std::string& name) { return grads_.data() + array(name).offset; }

  double* values_flat() { return values_.data(); }
  const double* values_flat() const { return values_.data(); }
  double* grads_flat() { return grads_.data(); }
  const double* grads_flat() const { return grads_.data(); }

  void zero_grad();

  // Bias-corrected Adam over every parameter; increments the step counter.
  // Non-finite gradients abort with the offending array named.
  void adam_step(const AdamConfig& cfg);

  // Worker-private gradient accumulation: each worker fills its own buffer,
  // then the buffers are summed into the store in worker order so that the
  // reduction is deterministic for a fixed worker count.
  std::vector<double> make_grad_buffer() const { return std::vector<double>(values_.size(), 0.0); }
  void merge_grad_buffers(const std::vector<std::vector<double>>& buffers);

  // Checkpointing: text manifest (name, shape, byte offsets) followed by raw
  // little-endian float64 payload holding values and both Adam moments, plus
  // the step counter. load() requires the exact same array layout.
  void save(const std::string& path) const;
  void load(const std::string& path);

  const char* array_name_at(int64_t flat_index) const;

 private:
  std::vector<ParamArray> arrays_;
  std::vector<double> values_, grads_, m_, v_;
  int64_t step_ = 0;

  friend class ParamBackup;
};

// Snapshot of the full optimizer state (values, moments, step). Used both
// for temporary perturbation (finite differences) and as the last-good state
// a training loop falls back to when a step goes non-finite.
class ParamBackup {
 public:
  explicit ParamBackup(ParamStore& store)
      : store_(store), values_(store.values_), m_(store.m_), v_(store.v_), step_(store.step_) {}
  void restore() {
    store_.values_ = values_;
    store_.m_ = m_;
    store_.v_ = v_;
    store_.step_ = step_;
  }

 private:
  ParamStore& store_;
  std::vector<double> values_, m_, v_;
  int64_t step_ = 0;
};

// loss_fn(with_grad): evaluates the current loss; when with_grad is true it
// must also leave dloss/dtheta in the store gradients (after zeroing them).
using LossFn = std::function<double(bool with_grad)>;

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  int64_t worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Central-difference check of the analytic gradient on a random subset of
// parameters: rel = |a - n| / max(|a|, |n|, 1e-8). An optional name filter
// restricts the subset to specific arrays.
FiniteDiffReport finite_diff_check(ParamStore& store, const LossFn& loss_fn, double h, int subset_size, uint64_t seed,
                                   const std::vector<std::string>& name_filter = {});

}  // namespace lift3d
