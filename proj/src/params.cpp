#include "lift3d/params.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>

namespace lift3d {

namespace {

int64_t shape_size(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d <= 0) throw ConfigError("parameter array dimensions must be positive");
    n *= d;
  }
  return n;
}

void check_little_endian() {
  uint16_t probe = 1;
  uint8_t byte;
  std::memcpy(&byte, &probe, 1);
  if (byte != 1) throw NumericError("checkpoint io requires a little-endian host");
}

constexpr const char* kCheckpointMagic = "L3D-CHECKPOINT 1";

}  // namespace

int ParamStore::add(const std::string& name, std::vector<int64_t> shape) {
  if (name.empty()) throw ConfigError("parameter array name must not be empty");
  if (has(name)) throw ConfigError("parameter array '" + name + "' already exists");
  ParamArray a;
  a.name = name;
  a.size = shape_size(shape);
  a.shape = std::move(shape);
  a.offset = total_size();
  arrays_.push_back(a);
  values_.resize(values_.size() + a.size, 0.0);
  grads_.resize(values_.size(), 0.0);
  m_.resize(values_.size(), 0.0);
  v_.resize(values_.size(), 0.0);
  return static_cast<int>(arrays_.size()) - 1;
}

bool ParamStore::has(const std::string& name) const {
  for (const auto& a : arrays_)
    if (a.name == name) return true;
  return false;
}

const ParamArray& ParamStore::array(const std::string& name) const {
  for (const auto& a : arrays_)
    if (a.name == name) return a;
  throw ConfigError("unknown parameter array '" + name + "'");
}

const char* ParamStore::array_name_at(int64_t flat_index) const {
  for (const auto& a : arrays_)
    if (flat_index >= a.offset && flat_index < a.offset + a.size) return a.name.c_str();
  return "<none>";
}

void ParamStore::zero_grad() { std::fill(grads_.begin(), grads_.end(), 0.0); }

void ParamStore::adam_step(const AdamConfig& cfg) {
  step_ += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_));
  for (size_t i = 0; i < values_.size(); ++i) {
    double g = grads_[i];
    if (!std::isfinite(g)) {
      step_ -= 1;
      throw NumericError(std::string("non-finite gradient in array '") + array_name_at(static_cast<int64_t>(i)) + "'");
    }
    m_[i] = cfg.beta1 * m_[i] + (1.0 - cfg.beta1) * g;
    v_[i] = cfg.beta2 * v_[i] + (1.0 - cfg.beta2) * g * g;
    double m_hat = m_[i] / bc1;
    double v_hat = v_[i] / bc2;
    values_[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
  }
}

void ParamStore::merge_grad_buffers(const std::vector<std::vector<double>>& buffers) {
  for (const auto& buf : buffers) {
    if (buf.size() != grads_.size()) throw ConfigError("gradient buffer size mismatch");
    for (size_t i = 0; i < grads_.size(); ++i) grads_[i] += buf[i];
  }
}

void ParamStore::save(const std::string& path) const {
  check_little_endian();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("checkpoint: cannot open '" + path + "' for writing");

  int64_t n = total_size();
  std::ostringstream manifest;
  manifest << kCheckpointMagic << "\n";
  manifest << "step " << step_ << "\n";
  manifest << "arrays " << arrays_.size() << "\n";
  for (const auto& a : arrays_) {
    manifest << "array " << a.name << " shape";
    for (int64_t d : a.shape) manifest << " " << d;
    // Byte offsets into the payload for values / first moment / second moment.
    manifest << " values " << a.offset * 8 << " adam_m " << (n + a.offset) * 8 << " adam_v " << (2 * n + a.offset) * 8 << "\n";
  }
  manifest << "payload " << 3 * n * 8 << "\n";
  manifest << "end\n";

  std::string header = manifest.str();
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(values_.data()), n * 8);
  out.write(reinterpret_cast<const char*>(m_.data()), n * 8);
  out.write(reinterpret_cast<const char*>(v_.data()), n * 8);
  if (!out) throw IoError("checkpoint: write to '" + path + "' failed");
}

void ParamStore::load(const std::string& path) {
  check_little_endian();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open '" + path + "'");

  std::string line;
  if (!std::getline(in, line) || line != kCheckpointMagic) throw FormatError("checkpoint: bad magic in '" + path + "'");

  int64_t step = -1;
  size_t n_arrays = 0;
  int64_t payload_bytes = -1;
  std::vector<ParamArray> arrays;
  while (std::getline(in, line)) {
    if (line == "end") break;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "step") {
      ls >> step;
    } else if (tag == "arrays") {
      ls >> n_arrays;
    } else if (tag == "array") {
      ParamArray a;
      std::string kw;
      ls >> a.name >> kw;
      if (kw != "shape") throw FormatError("checkpoint: malformed array line in '" + path + "'");
      std::string tok;
      while (ls >> tok) {
        if (tok == "values") break;
        a.shape.push_back(std::stoll(tok));
      }
      int64_t values_off = -1, m_off = -1, v_off = -1;
      ls >> values_off >> kw >> m_off >> kw >> v_off;
      a.offset = values_off / 8;
      a.size = shape_size(a.shape);
      arrays.push_back(std::move(a));
    } else if (tag == "payload") {
      ls >> payload_bytes;
    } else {
      throw FormatError("checkpoint: unknown manifest entry '" + tag + "' in '" + path + "'");
    }
    if (!ls && tag != "array") throw FormatError("checkpoint: malformed manifest line in '" + path + "'");
  }
  if (line != "end") throw FormatError("checkpoint: truncated manifest in '" + path + "'");
  if (step < 0 || payload_bytes < 0) throw FormatError("checkpoint: missing step or payload size in '" + path + "'");
  if (arrays.size() != n_arrays) throw FormatError("checkpoint: manifest array count mismatch in '" + path + "'");

  if (arrays.size() != arrays_.size()) throw FormatError("checkpoint: array layout does not match this model");
  for (size_t i = 0; i < arrays.size(); ++i) {
    if (arrays[i].name != arrays_[i].name || arrays[i].shape != arrays_[i].shape || arrays[i].offset != arrays_[i].offset)
      throw FormatError("checkpoint: array '" + arrays[i].name + "' does not match this model");
  }
  int64_t n = total_size();
  if (payload_bytes != 3 * n * 8) throw FormatError("checkpoint: payload size mismatch in '" + path + "'");

  in.read(reinterpret_cast<char*>(values_.data()), n * 8);
  in.read(reinterpret_cast<char*>(m_.data()), n * 8);
  in.read(reinterpret_cast<char*>(v_.data()), n * 8);
  if (in.gcount() != n * 8 || !in) throw FormatError("checkpoint: truncated payload in '" + path + "'");
  step_ = step;
  zero_grad();
}

FiniteDiffReport finite_diff_check(ParamStore& store, const LossFn& loss_fn, double h, int subset_size, uint64_t seed,
                                   const std::vector<std::string>& name_filter) {
  std::vector<int64_t> candidates;
  if (name_filter.empty()) {
    candidates.resize(static_cast<size_t>(store.total_size()));
    for (int64_t i = 0; i < store.total_size(); ++i) candidates[static_cast<size_t>(i)] = i;
  } else {
    for (const auto& name : name_filter) {
      const ParamArray& a = store.array(name);
      for (int64_t i = 0; i < a.size; ++i) candidates.push_back(a.offset + i);
    }
  }
  if (candidates.empty()) throw ConfigError("finite_diff_check: no parameters selected");

  Rng rng(splitmix64(seed));
  std::vector<int64_t> subset;
  if (subset_size <= 0 || subset_size >= static_cast<int>(candidates.size())) {
    subset = candidates;
  } else {
    // Partial Fisher-Yates draw of subset_size distinct indices.
    for (int k = 0; k < subset_size; ++k) {
      int64_t j = rng.next_int(k, static_cast<int64_t>(candidates.size()) - 1);
      std::swap(candidates[static_cast<size_t>(k)], candidates[static_cast<size_t>(j)]);
      subset.push_back(candidates[static_cast<size_t>(k)]);
    }
  }

  store.zero_grad();
  loss_fn(true);
  std::vector<double> analytic(subset.size());
  for (size_t k = 0; k < subset.size(); ++k) analytic[k] = store.grads_flat()[subset[k]];

  FiniteDiffReport report;
  double* theta = store.values_flat();
  for (size_t k = 0; k < subset.size(); ++k) {
    int64_t i = subset[k];
    double saved = theta[i];
    theta[i] = saved + h;
    double fp = loss_fn(false);
    theta[i] = saved - h;
    double fm = loss_fn(false);
    theta[i] = saved;
    double numeric = (fp - fm) / (2.0 * h);
    double a = analytic[k];
    double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = i;
      report.analytic = a;
      report.numeric = numeric;
    }
  }
  return report;
}

}  // namespace lift3d
