#pragma once

#include <map>
#include <string>
#include <vector>

#include "hyperattn/mat.hpp"

namespace hyperattn {

// Named tensors serialized as JSON:
//   { "tensors": [ {"name": "...", "shape": [r, c], "data": [..row-major..]} ] }
// Values round-trip at full double precision.
struct TensorFile {
  std::map<std::string, Mat> tensors;

  void put(const std::string& name, const Mat& m) { tensors[name] = m; }
  void put(const std::string& name, const Vec& v);
  const Mat& get(const std::string& name) const;
  Vec get_vec(const std::string& name) const;  // requires shape [1 x n]
  bool has(const std::string& name) const { return tensors.count(name) != 0; }
};

void write_tensor_file(const std::string& path, const TensorFile& tf);
TensorFile read_tensor_file(const std::string& path);

std::string tensor_file_to_json(const TensorFile& tf);
TensorFile tensor_file_from_json(const std::string& text);

}  // namespace hyperattn
