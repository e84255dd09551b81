#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <limits>

#include "hyperattn/tensorio.hpp"

using namespace hyperattn;

TEST_CASE("tensor files round-trip values at full precision") {
  TensorFile tf;
  Mat m(2, 3);
  m.at(0, 0) = M_PI;
  m.at(0, 1) = 1.0 / 3.0;
  m.at(0, 2) = -0.0;
  m.at(1, 0) = 1e300;
  m.at(1, 1) = 5e-324;  // smallest denormal
  m.at(1, 2) = -123456.789;
  tf.put("weights", m);
  tf.put("bias", Vec{1.5, -2.5, std::exp(1.0)});

  TensorFile back = tensor_file_from_json(tensor_file_to_json(tf));
  REQUIRE(back.has("weights"));
  REQUIRE(back.has("bias"));
  const Mat& w = back.get("weights");
  REQUIRE(w.rows == 2);
  REQUIRE(w.cols == 3);
  for (std::size_t i = 0; i < m.size(); ++i) CHECK(w.d[i] == m.d[i]);
  Vec b = back.get_vec("bias");
  REQUIRE(b.size() == 3);
  CHECK(b[2] == std::exp(1.0));

  CHECK_FALSE(back.has("missing"));
  CHECK_THROWS_AS(back.get("missing"), std::out_of_range);
  CHECK_THROWS_AS(back.get_vec("weights"), std::invalid_argument);  // 2 rows
}

TEST_CASE("tensor files round-trip through disk") {
  TensorFile tf;
  Mat m(1, 4);
  for (int j = 0; j < 4; ++j) m.at(0, j) = std::sqrt(j + 2.0);
  tf.put("t", m);
  std::string path = "tensorio_roundtrip.json";
  write_tensor_file(path, tf);
  TensorFile back = read_tensor_file(path);
  const Mat& r = back.get("t");
  for (int j = 0; j < 4; ++j) CHECK(r.at(0, j) == m.at(0, j));
  std::remove(path.c_str());
  CHECK_THROWS_AS(read_tensor_file(path), std::runtime_error);  // gone now
  CHECK_THROWS_AS(write_tensor_file("no/such/dir/t.json", tf), std::runtime_error);
}

TEST_CASE("malformed tensor json is rejected") {
  CHECK_THROWS(tensor_file_from_json("{"));
  CHECK_THROWS_AS(tensor_file_from_json("{\"nope\": 1}"), std::invalid_argument);
  // shape says 2x2 but carries 3 values
  CHECK_THROWS_AS(
      tensor_file_from_json(
          "{\"tensors\": [{\"name\": \"t\", \"shape\": [2, 2], \"data\": [1, 2, 3]}]}"),
      std::invalid_argument);
  // negative dimension
  CHECK_THROWS_AS(
      tensor_file_from_json(
          "{\"tensors\": [{\"name\": \"t\", \"shape\": [-1, 2], \"data\": []}]}"),
      std::invalid_argument);
  // duplicate tensor name
  CHECK_THROWS_AS(
      tensor_file_from_json(
          "{\"tensors\": [{\"name\": \"t\", \"shape\": [1, 1], \"data\": [1]},"
          " {\"name\": \"t\", \"shape\": [1, 1], \"data\": [2]}]}"),
      std::invalid_argument);
}

TEST_CASE("put replaces an existing tensor of the same name") {
  TensorFile tf;
  tf.put("x", Mat(1, 1, 3.0));
  tf.put("x", Mat(1, 1, 4.0));
  CHECK(tf.get("x").at(0, 0) == 4.0);
  CHECK(tf.tensors.size() == 1);
}
