#include "doctest.h"

#include <cmath>
#include <limits>
#include <map>

#include "hyperattn/checks.hpp"
#include "hyperattn/oracle.hpp"

using namespace hyperattn;

namespace {

Mat random_mat(Rng& rng, int r, int c) {
  Mat m(r, c);
  for (auto& x : m.d) x = rng.normal();
  return m;
}

}  // namespace

TEST_CASE("matmul variants agree with explicit index loops") {
  Rng rng(51);
  Mat a = random_mat(rng, 3, 5), b = random_mat(rng, 5, 4), w = random_mat(rng, 4, 5);

  Mat ab = matmul(a, b);
  REQUIRE(ab.rows == 3);
  REQUIRE(ab.cols == 4);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) {
      double want = 0.0;
      for (int k = 0; k < 5; ++k) want += a.at(i, k) * b.at(k, j);
      CHECK(std::fabs(ab.at(i, j) - want) < 1e-12);
    }

  Mat awt = matmul_nt(a, w);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) {
      double want = 0.0;
      for (int k = 0; k < 5; ++k) want += a.at(i, k) * w.at(j, k);
      CHECK(std::fabs(awt.at(i, j) - want) < 1e-12);
    }

  Mat atb = matmul_tn(a, random_mat(rng, 3, 2));
  CHECK(atb.rows == 5);
  CHECK(atb.cols == 2);

  CHECK_THROWS_AS(matmul(a, w), std::invalid_argument);  // 5 vs 4 inner dim
}

TEST_CASE("rng streams are reproducible and in range") {
  Rng a(7), b(7), c(8);
  for (int i = 0; i < 100; ++i) {
    CHECK(a.next_u64() == b.next_u64());
    double u = a.uniform();
    b.next_u64();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    int n = c.uniform_int(3, 5);
    CHECK(n >= 3);
    CHECK(n <= 5);
  }
  CHECK(mix64(1, 2, 3) != mix64(1, 3, 2));
  CHECK(mix64(42) == mix64(42));
  for (std::uint64_t h : {0ull, 1ull, 0xdeadbeefull}) {
    double x = hash_to_unit(mix64(h));
    CHECK(x >= -1.0);
    CHECK(x < 1.0);
  }
}

TEST_CASE("scalar references agree with the production kernels") {
  Rng rng(52);
  Mat x = random_mat(rng, 4, 12), w = random_mat(rng, 6, 12);
  Mat lin = oracle::ref_linear(x, w), lin2 = matmul_nt(x, w);
  for (std::size_t i = 0; i < lin.size(); ++i)
    CHECK(std::fabs(lin.d[i] - lin2.d[i]) < 1e-12);

  Vec g(12), b(12);
  for (auto& v : g) v = rng.uniform(0.5, 1.5);
  for (auto& v : b) v = rng.normal();
  Mat ln = oracle::ref_layernorm(x, g, b);
  Mat ln2 = layernorm_rows(x, g, b, nullptr);
  for (std::size_t i = 0; i < ln.size(); ++i)
    CHECK(std::fabs(ln.d[i] - ln2.d[i]) < 1e-12);

  std::vector<int> pos = {0, 5, 2, 19};
  Mat rot = oracle::ref_rotary(x, pos, 3);
  Mat rot2 = apply_rotary(x, pos, 3);
  for (std::size_t i = 0; i < rot.size(); ++i)
    CHECK(std::fabs(rot.d[i] - rot2.d[i]) < 1e-12);
}

TEST_CASE("reference attention averages values under a uniform score") {
  // identical keys give equal scores, so probabilities are uniform over the
  // visible set and the context is the plain mean of the visible value rows
  int d = 4;
  Mat q(1, d), k(3, d), v(3, d);
  for (int j = 0; j < d; ++j) {
    q.at(0, j) = 0.25 * j;
    for (int i = 0; i < 3; ++i) {
      k.at(i, j) = 1.0;
      v.at(i, j) = i + 10.0 * j;
    }
  }
  std::vector<std::uint8_t> visible = {1, 0, 1};
  Mat ctx = oracle::ref_attention(q, k, v, visible, 1);
  for (int j = 0; j < d; ++j)
    CHECK(ctx.at(0, j) == doctest::Approx((v.at(0, j) + v.at(2, j)) / 2.0).epsilon(1e-12));

  Mat none = oracle::ref_attention(q, k, v, {0, 0, 0}, 1);
  for (double x : none.d) CHECK(x == 0.0);
}

TEST_CASE("dense attention reference on a two-key case computed inline") {
  int d = 2;
  Mat q(1, d), k(2, d), v(2, d);
  q.at(0, 0) = 1.0;
  q.at(0, 1) = 0.0;
  k.at(0, 0) = 1.0;
  k.at(1, 1) = 2.0;
  v.at(0, 0) = 5.0;
  v.at(1, 0) = -3.0;
  v.at(1, 1) = 1.0;
  // positions all zero: rotary is the identity and scores are q.k / sqrt(2)
  std::vector<int> pq = {0}, pk = {0, 0};
  Mat ctx = oracle::dense_attention_reference(q, k, v, pq, pk, {1, 1}, 1);
  double s0 = 1.0 / std::sqrt(2.0), s1 = 0.0;
  double z = std::exp(s0) + std::exp(s1);
  double p0 = std::exp(s0) / z, p1 = std::exp(s1) / z;
  CHECK(std::fabs(ctx.at(0, 0) - (p0 * 5.0 + p1 * -3.0)) < 1e-12);
  CHECK(std::fabs(ctx.at(0, 1) - (p1 * 1.0)) < 1e-12);
}

TEST_CASE("block reference agrees with the production block") {
  Rng rng(53);
  int d = 16, heads = 2, L = 5;
  BlockWeights w = checks::random_block_weights(rng, d, 32);
  Mat x = random_mat(rng, L, d);
  std::vector<int> pos = {0, 1, 2, 3, 4};
  Mat want = oracle::block_reference(x, w, pos, heads);
  Mat got = standard_block_forward(x, w, pos, heads);
  double worst = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i)
    worst = std::max(worst, std::fabs(got.d[i] - want.d[i]));
  CHECK(worst < 1e-9);
}

TEST_CASE("finite differences recover an analytic gradient and restore state") {
  std::vector<double> p = {0.3, -1.2, 2.0};
  auto f = [&]() { return p[0] * p[0] * p[0] + p[1] * p[1] * p[1] + p[2] * p[2] * p[2]; };
  std::vector<double> before = p;
  std::vector<double> g = oracle::finite_diff_grad(f, p.data(), p.size());
  REQUIRE(g.size() == 3);
  for (int i = 0; i < 3; ++i)
    CHECK(std::fabs(g[static_cast<std::size_t>(i)] - 3.0 * p[static_cast<std::size_t>(i)] * p[static_cast<std::size_t>(i)]) < 1e-8);
  CHECK(p == before);

  auto bad = [&]() { return std::numeric_limits<double>::infinity(); };
  CHECK_THROWS_AS(oracle::finite_diff_grad(bad, p.data(), 1), std::runtime_error);
}

TEST_CASE("tensor comparison uses a closed relative tolerance") {
  Mat a(1, 2), b(1, 2);
  a.at(0, 0) = 1.0;
  b.at(0, 0) = 1.0 + 1e-6;
  a.at(0, 1) = 100.0;
  b.at(0, 1) = 100.0;
  std::map<std::string, Mat> ma = {{"t", a}}, mb = {{"t", b}};
  double rel = 1e-6 / (1.0 + 1e-6);

  oracle::ComparisonReport at_tol = oracle::compare(ma, mb, rel + 1e-15);
  CHECK(at_tol.pass);  // boundary is closed
  CHECK(at_tol.worst_tensor == "t");
  CHECK(at_tol.worst_index == 0);
  CHECK(at_tol.max_abs_err == doctest::Approx(1e-6).epsilon(1e-6));

  oracle::ComparisonReport below = oracle::compare(ma, mb, rel * 0.5);
  CHECK_FALSE(below.pass);

  // tiny reference values hit the relative floor instead of dividing by ~0
  Mat c(1, 1), dref(1, 1);
  c.at(0, 0) = 5e-9;
  std::map<std::string, Mat> mc = {{"t", c}}, md = {{"t", dref}};
  oracle::ComparisonReport floored = oracle::compare(mc, md, 1.0);
  CHECK(floored.max_rel_err == doctest::Approx(0.5).epsilon(1e-9));  // 5e-9 / 1e-8

  std::map<std::string, Mat> missing;
  CHECK_THROWS_AS(oracle::compare(ma, missing, 1e-9), std::invalid_argument);
  std::map<std::string, Mat> wrong_shape = {{"t", Mat(2, 1)}};
  CHECK_THROWS_AS(oracle::compare(ma, wrong_shape, 1e-9), std::invalid_argument);

  std::string js = at_tol.to_json();
  CHECK(js.find("max_rel_err") != std::string::npos);
  CHECK(js.find("worst_tensor") != std::string::npos);
  CHECK(js.find("pass") != std::string::npos);
}

TEST_CASE("gradient comparison floors out finite-difference noise") {
  // an exactly-zero analytic gradient with ~1e-9 numeric noise must not fail
  Mat zero(1, 3), noise(1, 3);
  noise.at(0, 0) = 1e-9;
  noise.at(0, 1) = -3e-9;
  std::map<std::string, Mat> an = {{"g", zero}}, num = {{"g", noise}};
  oracle::ComparisonReport r = oracle::grad_compare(an, num);
  CHECK(r.pass);
  CHECK(r.max_rel_err <= 3e-5);

  // a genuine relative error on a large coordinate still trips it
  Mat big_a(1, 1), big_n(1, 1);
  big_a.at(0, 0) = 1.0;
  big_n.at(0, 0) = 1.001;
  oracle::ComparisonReport bad =
      oracle::grad_compare({{"g", big_a}}, {{"g", big_n}});
  CHECK_FALSE(bad.pass);
  CHECK(bad.max_rel_err == doctest::Approx(0.001 / 1.001).epsilon(1e-6));
}
