#pragma once

#include <map>
#include <string>

#include "ttt/autodiff.hpp"
#include "ttt/serialize.hpp"

namespace ttt {

// Binds named parameters to leaves of one tape, creating each leaf on first
// use so unused parameters never enter the graph.
class Binder {
 public:
  Binder(ad::Tape& tape, const NamedTensors& params) : tape_(&tape), params_(&params) {}

  ad::Var operator()(const std::string& name);
  // Uses an existing node for `name` instead of creating a leaf.
  void bind(const std::string& name, ad::Var v) { bound_.insert_or_assign(name, v); }
  ad::Tape& tape() { return *tape_; }
  const std::map<std::string, ad::Var>& bound() const { return bound_; }

  // Gradients for every bound parameter; unbound ones are absent.
  NamedTensors gradients(const ad::Gradients& grads) const;

 private:
  ad::Tape* tape_;
  const NamedTensors* params_;
  std::map<std::string, ad::Var> bound_;
};

std::size_t parameter_count(const NamedTensors& params);

}  // namespace ttt
