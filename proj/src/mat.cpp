#include "hyperattn/mat.hpp"

#include <cmath>

namespace hyperattn {

namespace alloc_track {
namespace {
std::atomic<std::int64_t> g_current{0};
std::atomic<std::int64_t> g_peak{0};
}  // namespace

void add(std::int64_t n) {
  std::int64_t cur = g_current.fetch_add(n, std::memory_order_relaxed) + n;
  std::int64_t prev = g_peak.load(std::memory_order_relaxed);
  while (cur > prev &&
         !g_peak.compare_exchange_weak(prev, cur, std::memory_order_relaxed)) {
  }
}
void sub(std::int64_t n) { g_current.fetch_sub(n, std::memory_order_relaxed); }
void reset_peak() { g_peak.store(g_current.load(std::memory_order_relaxed)); }
std::int64_t current() { return g_current.load(std::memory_order_relaxed); }
std::int64_t peak() { return g_peak.load(std::memory_order_relaxed); }
}  // namespace alloc_track

namespace counters {
namespace {
std::atomic<std::uint64_t> g_attn_flops{0};
}
void reset_attn_flops() { g_attn_flops.store(0, std::memory_order_relaxed); }
void add_attn_flops(std::uint64_t n) { g_attn_flops.fetch_add(n, std::memory_order_relaxed); }
std::uint64_t attn_flops() { return g_attn_flops.load(std::memory_order_relaxed); }
}  // namespace counters

Mat matmul(const Mat& a, const Mat& b) {
  if (a.cols != b.rows) throw std::invalid_argument("matmul: inner dims differ");
  Mat c(a.rows, b.cols, 0.0);
  for (int i = 0; i < a.rows; ++i) {
    const double* ai = a.row(i);
    double* ci = c.row(i);
    for (int k = 0; k < a.cols; ++k) {
      const double aik = ai[k];
      const double* bk = b.row(k);
      for (int j = 0; j < b.cols; ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

Mat matmul_nt(const Mat& a, const Mat& b) {
  if (a.cols != b.cols) throw std::invalid_argument("matmul_nt: inner dims differ");
  Mat c(a.rows, b.rows, 0.0);
  for (int i = 0; i < a.rows; ++i) {
    const double* ai = a.row(i);
    double* ci = c.row(i);
    for (int j = 0; j < b.rows; ++j) {
      const double* bj = b.row(j);
      double s = 0.0;
      for (int k = 0; k < a.cols; ++k) s += ai[k] * bj[k];
      ci[j] = s;
    }
  }
  return c;
}

Mat matmul_tn(const Mat& a, const Mat& b) {
  if (a.rows != b.rows) throw std::invalid_argument("matmul_tn: inner dims differ");
  Mat c(a.cols, b.cols, 0.0);
  for (int k = 0; k < a.rows; ++k) {
    const double* ak = a.row(k);
    const double* bk = b.row(k);
    for (int i = 0; i < a.cols; ++i) {
      const double aki = ak[i];
      double* ci = c.row(i);
      for (int j = 0; j < b.cols; ++j) ci[j] += aki * bk[j];
    }
  }
  return c;
}

void add_inplace(Mat& a, const Mat& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("add_inplace: shape mismatch");
  for (std::size_t i = 0; i < a.d.size(); ++i) a.d[i] += b.d[i];
}

void axpy_inplace(Mat& a, double s, const Mat& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("axpy_inplace: shape mismatch");
  for (std::size_t i = 0; i < a.d.size(); ++i) a.d[i] += s * b.d[i];
}

namespace {
inline std::uint64_t splitmix64(std::uint64_t& x) {
  x += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}
}  // namespace

Rng::Rng(std::uint64_t seed) : state_(seed ? seed : 0x853c49e6748fea9bULL) {}

std::uint64_t Rng::next_u64() { return splitmix64(state_); }

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 2.0 * 3.14159265358979323846 * u2;
  spare_ = r * std::sin(a);
  has_spare_ = true;
  return r * std::cos(a);
}

int Rng::uniform_int(int lo, int hi) {
  if (hi < lo) throw std::invalid_argument("uniform_int: empty range");
  std::uint64_t span = static_cast<std::uint64_t>(hi) - static_cast<std::uint64_t>(lo) + 1;
  return lo + static_cast<int>(next_u64() % span);
}

std::uint64_t mix64(std::uint64_t a) {
  std::uint64_t x = a;
  return splitmix64(x);
}
std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a ^ (0x9e3779b97f4a7c15ULL + (b << 6) + (b >> 2));
  std::uint64_t h = splitmix64(x);
  x ^= b + 0x9e3779b97f4a7c15ULL;
  return h ^ splitmix64(x);
}
std::uint64_t mix64(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return mix64(mix64(a, b), c);
}

double hash_to_unit(std::uint64_t h) {
  return static_cast<double>(h >> 11) * 0x1.0p-52 - 1.0;
}

}  // namespace hyperattn
