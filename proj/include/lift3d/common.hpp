#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace lift3d {

// Error taxonomy used across the library. The C API maps these onto its
// status codes; everything else surfaces as a generic runtime error.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr double kPi = 3.14159265358979323846;

inline double deg_to_rad(double deg) { return deg * (kPi / 180.0); }
inline double rad_to_deg(double rad) { return rad * (180.0 / kPi); }

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  constexpr Vec3() = default;
  constexpr Vec3(double x_, double y_, double z_) : x(x_), y(y_), z(z_) {}

  double& operator[](int i) { return (&x)[i]; }
  double operator[](int i) const { return (&x)[i]; }

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
  Vec3 operator-() const { return {-x, -y, -z}; }
  Vec3& operator+=(const Vec3& o) {
    x += o.x;
    y += o.y;
    z += o.z;
    return *this;
  }
  Vec3& operator-=(const Vec3& o) {
    x -= o.x;
    y -= o.y;
    z -= o.z;
    return *this;
  }
  Vec3& operator*=(double s) {
    x *= s;
    y *= s;
    z *= s;
    return *this;
  }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }

inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}

inline double norm(const Vec3& v) { return std::sqrt(dot(v, v)); }

inline Vec3 normalized(const Vec3& v) {
  double n = norm(v);
  if (n <= 0.0) throw NumericError("cannot normalize zero-length vector");
  return v / n;
}

inline Vec3 cwise_mul(const Vec3& a, const Vec3& b) { return {a.x * b.x, a.y * b.y, a.z * b.z}; }

inline double clamp(double v, double lo, double hi) { return v < lo ? lo : (v > hi ? hi : v); }

// --- deterministic RNG -----------------------------------------------------
//
// All stochastic pieces of the pipeline draw from SplitMix64 streams keyed by
// (seed, purpose, index) so that renders can be replayed sample-for-sample in
// backward passes and training is resumable from a step counter alone.

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t hash_mix(uint64_t a, uint64_t b) { return splitmix64(a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2))); }

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double next_u01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_u01(); }

  int64_t next_int(int64_t lo, int64_t hi) {  // inclusive bounds
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(next_u64() % span);
  }

  // Standard normal via Box-Muller; two uniforms per draw, no cached state.
  double next_normal() {
    double u1 = 1.0 - next_u01();
    double u2 = next_u01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  Vec3 next_unit_vector() {
    // Marsaglia: uniform on the sphere.
    for (;;) {
      double a = next_uniform(-1.0, 1.0);
      double b = next_uniform(-1.0, 1.0);
      double s = a * a + b * b;
      if (s >= 1.0 || s == 0.0) continue;
      double r = 2.0 * std::sqrt(1.0 - s);
      return {a * r, b * r, 1.0 - 2.0 * s};
    }
  }

 private:
  uint64_t state_;
};

// --- parallel helpers -------------------------------------------------------

// Static block partition of [0, count) over n_workers threads. fn(worker,
// begin, end) must only write worker-private state; callers merge in worker
// order afterwards. n_workers <= 1 runs inline.
inline void parallel_for(int n_workers, int64_t count, const std::function<void(int, int64_t, int64_t)>& fn) {
  if (n_workers <= 1 || count <= 1) {
    fn(0, 0, count);
    return;
  }
  if (n_workers > count) n_workers = static_cast<int>(count);
  std::vector<std::thread> threads;
  threads.reserve(static_cast<size_t>(n_workers));
  int64_t chunk = (count + n_workers - 1) / n_workers;
  for (int w = 0; w < n_workers; ++w) {
    int64_t begin = w * chunk;
    int64_t end = std::min<int64_t>(count, begin + chunk);
    if (begin >= end) break;
    threads.emplace_back([fn, w, begin, end] { fn(w, begin, end); });
  }
  for (auto& t : threads) t.join();
}

inline int resolve_threads(int requested) {
  if (requested > 0) return requested;
  unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

}  // namespace lift3d
