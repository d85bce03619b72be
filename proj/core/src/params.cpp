#include "ttt/params.hpp"

namespace ttt {

ad::Var Binder::operator()(const std::string& name) {
  if (auto it = bound_.find(name); it != bound_.end()) return it->second;
  auto p = params_->find(name);
  if (p == params_->end()) throw ConfigError("missing parameter '" + name + "'");
  ad::Var v = tape_->leaf(p->second);
  bound_.emplace(name, v);
  return v;
}

NamedTensors Binder::gradients(const ad::Gradients& grads) const {
  NamedTensors out;
  for (const auto& [name, v] : bound_) out.emplace(name, grads[v]);
  return out;
}

std::size_t parameter_count(const NamedTensors& params) {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t.size();
  return n;
}

}  // namespace ttt
