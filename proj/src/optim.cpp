#include "gnflow/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace gnflow {

void ParamStore::add(const std::string& name, Tensor init) {
  if (entries_.count(name)) throw std::invalid_argument("param already registered: " + name);
  Entry e;
  e.m = Tensor::zeros(init.shape());
  e.v = Tensor::zeros(init.shape());
  e.value = std::move(init);
  entries_.emplace(name, std::move(e));
  order_.push_back(name);
}

Tensor& ParamStore::value(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::invalid_argument("unknown param: " + name);
  return it->second.value;
}

const Tensor& ParamStore::value(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::invalid_argument("unknown param: " + name);
  return it->second.value;
}

void ParamStore::set(const std::string& name, Tensor v) {
  Tensor& cur = value(name);
  check_same_shape(cur, v, "param set");
  cur = std::move(v);
}

bool adam_step(ParamStore& params, const std::unordered_map<std::string, Tensor>& grads,
               const AdamConfig& cfg, std::string* diagnostic) {
  for (const auto& name : params.order_) {
    auto git = grads.find(name);
    if (git == grads.end()) continue;
    const ParamStore::Entry& e = params.entries_.at(name);
    check_same_shape(e.value, git->second, "adam_step grad");
    if (!git->second.all_finite()) {
      if (diagnostic) *diagnostic = "non-finite gradient for parameter '" + name + "'";
      return false;
    }
  }

  params.step_ += 1;
  const double t = static_cast<double>(params.step_);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);

  for (const auto& name : params.order_) {
    ParamStore::Entry& e = params.entries_.at(name);
    auto git = grads.find(name);
    const Tensor* g = git == grads.end() ? nullptr : &git->second;
    Tensor next(e.value.shape());
    for (std::int64_t i = 0; i < e.value.size(); ++i) {
      const double gi = g ? g->at(i) : 0.0;
      e.m.at(i) = cfg.beta1 * e.m.at(i) + (1.0 - cfg.beta1) * gi;
      e.v.at(i) = cfg.beta2 * e.v.at(i) + (1.0 - cfg.beta2) * gi * gi;
      const double mhat = e.m.at(i) / bc1;
      const double vhat = e.v.at(i) / bc2;
      next.at(i) = e.value.at(i) - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
    e.value = std::move(next);
  }
  return true;
}

}  // namespace gnflow
