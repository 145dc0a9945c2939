#include "cllm/parameters.hpp"

#include "cllm/errors.hpp"

namespace cllm {

Tensor& ParameterSet::add(const std::string& name, Tensor value) {
  auto [it, inserted] = tensors_.emplace(name, std::move(value));
  if (!inserted) throw ContractViolation("duplicate parameter name: " + name);
  return it->second;
}

Tensor& ParameterSet::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ContractViolation("unknown parameter: " + name);
  return it->second;
}

const Tensor& ParameterSet::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ContractViolation("unknown parameter: " + name);
  return it->second;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors_) n += t.size();
  return n;
}

}  // namespace cllm
