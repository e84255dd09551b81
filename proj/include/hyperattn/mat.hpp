#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace hyperattn {

namespace alloc_track {
// Float-allocation accounting. The benchmark reports peak allocated doubles
// as its memory proxy, so every Vec/Mat buffer is routed through here.
void add(std::int64_t n);
void sub(std::int64_t n);
void reset_peak();
std::int64_t current();
std::int64_t peak();
}  // namespace alloc_track

template <class T>
struct CountingAlloc {
  using value_type = T;
  CountingAlloc() = default;
  template <class U>
  CountingAlloc(const CountingAlloc<U>&) {}
  T* allocate(std::size_t n) {
    alloc_track::add(static_cast<std::int64_t>(n));
    return std::allocator<T>().allocate(n);
  }
  void deallocate(T* p, std::size_t n) {
    alloc_track::sub(static_cast<std::int64_t>(n));
    std::allocator<T>().deallocate(p, n);
  }
  bool operator==(const CountingAlloc&) const { return true; }
};

using Vec = std::vector<double, CountingAlloc<double>>;

// Row-major f64 matrix. The reference path runs entirely at f64.
struct Mat {
  int rows = 0;
  int cols = 0;
  Vec d;

  Mat() = default;
  Mat(int r, int c, double fill = 0.0)
      : rows(r), cols(c), d(static_cast<std::size_t>(r) * c, fill) {
    if (r < 0 || c < 0) throw std::invalid_argument("Mat: negative shape");
  }

  double& at(int i, int j) { return d[static_cast<std::size_t>(i) * cols + j]; }
  double at(int i, int j) const { return d[static_cast<std::size_t>(i) * cols + j]; }
  double* row(int i) { return d.data() + static_cast<std::size_t>(i) * cols; }
  const double* row(int i) const { return d.data() + static_cast<std::size_t>(i) * cols; }
  std::size_t size() const { return d.size(); }
  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

// c = a * b, a: [m x k], b: [k x n]
Mat matmul(const Mat& a, const Mat& b);
// c = a * b^T (linear layer convention: x [L x in] * W [out x in]^T)
Mat matmul_nt(const Mat& a, const Mat& b);
// c = a^T * b (gradient accumulation shape)
Mat matmul_tn(const Mat& a, const Mat& b);

void add_inplace(Mat& a, const Mat& b);
// a += s * b
void axpy_inplace(Mat& a, double s, const Mat& b);

// Deterministic RNG. std:: distributions are not bit-portable, so uniform and
// normal draws are derived directly from the raw 64-bit stream.
struct Rng {
  explicit Rng(std::uint64_t seed);
  std::uint64_t next_u64();
  double uniform();                     // [0, 1)
  double uniform(double lo, double hi);
  double normal();                      // standard normal, Box-Muller
  int uniform_int(int lo, int hi);      // inclusive bounds

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// splitmix64-style hash combine for stable content-keyed streams.
std::uint64_t mix64(std::uint64_t a);
std::uint64_t mix64(std::uint64_t a, std::uint64_t b);
std::uint64_t mix64(std::uint64_t a, std::uint64_t b, std::uint64_t c);
// Uniform double in [-1, 1) from a hash value.
double hash_to_unit(std::uint64_t h);

namespace counters {
// Attention score FLOPs, accumulated as the dense 2 * Lq * Lk * D count per
// attention call (the cost-model convention).
void reset_attn_flops();
void add_attn_flops(std::uint64_t n);
std::uint64_t attn_flops();
}  // namespace counters

}  // namespace hyperattn
