#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "gnflow/tensor.hpp"

namespace gnflow {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Named parameter tensors plus their Adam moment accumulators.
/// Single-writer: one optimizer owns a store; reads are free.
class ParamStore {
 public:
  void add(const std::string& name, Tensor init);
  bool has(const std::string& name) const { return entries_.count(name) != 0; }
  Tensor& value(const std::string& name);
  const Tensor& value(const std::string& name) const;
  void set(const std::string& name, Tensor v);

  /// Names in insertion order; update order is part of the determinism
  /// contract.
  const std::vector<std::string>& names() const { return order_; }
  std::int64_t step() const { return step_; }

  friend bool adam_step(ParamStore& params,
                        const std::unordered_map<std::string, Tensor>& grads,
                        const AdamConfig& cfg, std::string* diagnostic);

 private:
  struct Entry {
    Tensor value;
    Tensor m;
    Tensor v;
  };
  std::vector<std::string> order_;
  std::unordered_map<std::string, Entry> entries_;
  std::int64_t step_ = 0;
};

/// One Adam update with bias correction. Parameters without an entry in
/// `grads` are treated as having zero gradient (their moments still decay).
/// If any gradient is non-finite the step is rejected: returns false, writes
/// the offending name into `diagnostic`, and leaves the store untouched.
bool adam_step(ParamStore& params, const std::unordered_map<std::string, Tensor>& grads,
               const AdamConfig& cfg, std::string* diagnostic = nullptr);

}  // namespace gnflow
