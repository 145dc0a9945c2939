#pragma once

#include <map>
#include <string>

#include "cllm/tensor.hpp"

namespace cllm {

using GradientMap = std::map<std::string, Tensor>;

// Named collection of trainable tensors. Iteration order is the lexical order
// of names, which fixes the order of every reduction over parameters.
class ParameterSet {
 public:
  Tensor& add(const std::string& name, Tensor value);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  std::size_t size() const { return tensors_.size(); }
  std::size_t scalar_count() const;

  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

  // Deep copy used as the stop-gradient teacher; shares no storage with *this.
  ParameterSet snapshot() const { return *this; }

  bool operator==(const ParameterSet& other) const = default;

 private:
  std::map<std::string, Tensor> tensors_;
};

}  // namespace cllm
