#include "gnflow/io.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <system_error>

namespace gnflow::io {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& s) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  while (first != last && (*first == ' ' || *first == '\t')) ++first;
  auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc()) throw std::runtime_error("bad number: '" + s + "'");
  return v;
}

void write_tensor_block(std::ostream& os, const std::string& name, const Tensor& t) {
  os << "tensor " << name << ' ' << t.rank();
  for (std::int64_t d : t.shape()) os << ' ' << d;
  os << '\n';
  const std::int64_t cols = t.rank() == 0 ? 1 : t.dim(t.rank() - 1);
  const std::int64_t rows = cols == 0 ? 0 : t.size() / cols;
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t c = 0; c < cols; ++c) {
      if (c) os << ',';
      os << format_double(t.at(r * cols + c));
    }
    os << '\n';
  }
}

std::pair<std::string, Tensor> read_tensor_block(std::istream& is) {
  std::string name;
  int rank = 0;
  is >> name >> rank;
  std::vector<std::int64_t> shape(static_cast<std::size_t>(rank));
  for (auto& d : shape) is >> d;
  std::int64_t size = 1;
  for (auto d : shape) size *= d;
  const std::int64_t cols = rank == 0 ? 1 : shape.back();
  const std::int64_t rows = cols == 0 ? 0 : size / cols;
  is >> std::ws;
  std::vector<double> values;
  values.reserve(static_cast<std::size_t>(size));
  std::string line;
  for (std::int64_t r = 0; r < rows; ++r) {
    if (!std::getline(is, line)) throw std::runtime_error("tensor block truncated: " + name);
    for (const std::string& tok : split(line, ',')) values.push_back(parse_double(tok));
  }
  if (static_cast<std::int64_t>(values.size()) != size) {
    throw std::runtime_error("tensor block " + name + ": expected " + std::to_string(size) +
                             " values, got " + std::to_string(values.size()));
  }
  return {name, Tensor(shape, std::move(values))};
}

void save_matrix_csv(const std::string& path, const Tensor& m) {
  if (m.rank() != 2) throw std::invalid_argument("save_matrix_csv: need rank 2");
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  for (std::int64_t i = 0; i < m.dim(0); ++i) {
    for (std::int64_t j = 0; j < m.dim(1); ++j) {
      if (j) f << ',';
      f << format_double(m.at(i, j));
    }
    f << '\n';
  }
}

Tensor load_matrix_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::vector<double> values;
  std::int64_t rows = 0, cols = -1;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    auto toks = split(line, ',');
    if (cols < 0) cols = static_cast<std::int64_t>(toks.size());
    if (static_cast<std::int64_t>(toks.size()) != cols) {
      throw std::runtime_error(path + ": ragged CSV at line " + std::to_string(rows + 1));
    }
    for (const auto& t : toks) values.push_back(parse_double(t));
    ++rows;
  }
  if (rows == 0) throw std::runtime_error(path + ": empty CSV");
  return Tensor({rows, cols}, std::move(values));
}

void write_kv(const std::string& path, const std::string& version, const KeyValues& kv) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << version << '\n';
  for (const auto& [k, v] : kv) f << k << " = " << v << '\n';
}

KeyValues read_kv(const std::string& path, const std::string& version) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::string line;
  if (!std::getline(f, line)) throw std::runtime_error(path + ": empty file");
  if (!version.empty() && line != version) {
    throw std::runtime_error(path + ": unknown format version '" + line + "', expected '" +
                             version + "'");
  }
  KeyValues kv;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error(path + ": bad line '" + line + "'");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    kv.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return kv;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    if (pos == std::string::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

}  // namespace gnflow::io
