#include "hyperattn/tensorio.hpp"

#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace hyperattn {

using nlohmann::json;

void TensorFile::put(const std::string& name, const Vec& v) {
  Mat m(1, static_cast<int>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) m.d[i] = v[i];
  tensors[name] = std::move(m);
}

const Mat& TensorFile::get(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end())
    throw std::out_of_range("tensor file: missing tensor '" + name + "'");
  return it->second;
}

Vec TensorFile::get_vec(const std::string& name) const {
  const Mat& m = get(name);
  if (m.rows != 1)
    throw std::invalid_argument("tensor file: '" + name + "' is not a row vector");
  Vec v(m.d.begin(), m.d.end());
  return v;
}

std::string tensor_file_to_json(const TensorFile& tf) {
  json root;
  root["tensors"] = json::array();
  for (const auto& [name, m] : tf.tensors) {
    json t;
    t["name"] = name;
    t["shape"] = {m.rows, m.cols};
    json data = json::array();
    for (std::size_t i = 0; i < m.size(); ++i) data.push_back(m.d[i]);
    t["data"] = std::move(data);
    root["tensors"].push_back(std::move(t));
  }
  return root.dump(1);
}

TensorFile tensor_file_from_json(const std::string& text) {
  json root = json::parse(text);
  if (!root.contains("tensors") || !root["tensors"].is_array())
    throw std::invalid_argument("tensor file: missing 'tensors' array");
  TensorFile tf;
  for (const auto& t : root["tensors"]) {
    std::string name = t.at("name").get<std::string>();
    auto shape = t.at("shape");
    if (!shape.is_array() || shape.size() != 2)
      throw std::invalid_argument("tensor file: bad shape for '" + name + "'");
    int r = shape[0].get<int>(), c = shape[1].get<int>();
    const auto& data = t.at("data");
    if (static_cast<std::size_t>(r) * c != data.size())
      throw std::invalid_argument("tensor file: data size mismatch for '" + name + "'");
    Mat m(r, c);
    for (std::size_t i = 0; i < m.size(); ++i) m.d[i] = data[i].get<double>();
    if (tf.tensors.count(name))
      throw std::invalid_argument("tensor file: duplicate tensor '" + name + "'");
    tf.tensors[name] = std::move(m);
  }
  return tf;
}

void write_tensor_file(const std::string& path, const TensorFile& tf) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << tensor_file_to_json(tf) << "\n";
}

TensorFile read_tensor_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return tensor_file_from_json(text);
}

}  // namespace hyperattn
