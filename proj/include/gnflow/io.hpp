#pragma once

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "gnflow/tensor.hpp"

namespace gnflow::io {

/// Shortest decimal string that round-trips to the same double.
std::string format_double(double v);
double parse_double(const std::string& s);

/// `tensor <name> <rank> <dims...>` then one comma-separated line per row.
void write_tensor_block(std::ostream& os, const std::string& name, const Tensor& t);
/// Reads a block after the leading "tensor" token has been consumed.
std::pair<std::string, Tensor> read_tensor_block(std::istream& is);

/// Square matrix as n lines of n comma-separated full-precision values.
void save_matrix_csv(const std::string& path, const Tensor& m);
Tensor load_matrix_csv(const std::string& path);

/// Flat `key = value` text files (configs, manifests, metrics).
using KeyValues = std::vector<std::pair<std::string, std::string>>;
void write_kv(const std::string& path, const std::string& version, const KeyValues& kv);
/// Returns the entries; checks the first line against `version` when given.
KeyValues read_kv(const std::string& path, const std::string& version = "");

std::vector<std::string> split(const std::string& s, char sep);

}  // namespace gnflow::io
