#pragma once

#include <map>
#include <string>
#include <utility>

#include "fewner/autodiff.hpp"
#include "fewner/errors.hpp"
#include "fewner/matrix.hpp"

namespace fewner {

/// Named trainable tensors. std::map keeps iteration order deterministic,
/// which the bitwise-determinism contract relies on (clip/update order).
class ParamStore {
 public:
  Matrix& add(const std::string& name, Matrix init) {
    auto [it, fresh] = tensors_.emplace(name, std::move(init));
    if (!fresh) throw ContractError("duplicate parameter: " + name);
    return it->second;
  }

  Matrix& get(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
  }

  const Matrix& get(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
  }

  bool has(const std::string& name) const { return tensors_.count(name) != 0; }
  std::size_t size() const { return tensors_.size(); }

  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

 private:
  std::map<std::string, Matrix> tensors_;
};

/// Binds parameters to tape leaves, one leaf per name per forward pass, and
/// routes gradients back to the store's naming after backward().
class ParamBinder {
 public:
  ParamBinder(ad::Tape& tape, const ParamStore& store) : tape_(tape), store_(store) {}

  ad::Tape::NodeId operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    const ad::Tape::NodeId id = tape_.leaf(store_.get(name));
    bound_.emplace(name, id);
    return id;
  }

  /// Gradients for every bound parameter (call after tape.backward()).
  std::map<std::string, Matrix> collect_grads() const {
    std::map<std::string, Matrix> grads;
    for (const auto& [name, id] : bound_) grads.emplace(name, tape_.grad(id));
    return grads;
  }

 private:
  ad::Tape& tape_;
  const ParamStore& store_;
  std::map<std::string, ad::Tape::NodeId> bound_;
};

}  // namespace fewner
