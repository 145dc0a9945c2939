#pragma once

#include <cstddef>
#include <map>
#include <string>

#include "cllm/parameters.hpp"

namespace cllm {

struct OptimizerConfig {
  enum class Kind { GradientDescent, Adam };
  Kind kind = Kind::Adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;
  // Learning-rate schedule over a run: linear warmup, then constant or a
  // cosine decay down to min_rate_fraction * learning_rate at the last step.
  enum class Schedule { Constant, Cosine };
  Schedule schedule = Schedule::Constant;
  std::size_t warmup_steps = 0;
  double min_rate_fraction = 0.1;
};

double scheduled_learning_rate(const OptimizerConfig& config, std::size_t step, std::size_t total_steps);

// Applies deterministic parameter updates. Adam keeps per-parameter moment
// estimates, so one Optimizer instance belongs to one ParameterSet.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config = {}) : config_(config) {}

  // Throws ContractViolation when a parameter has no gradient entry or shapes differ.
  void step(ParameterSet& params, const GradientMap& grads);
  // Same update with an explicit learning rate (for schedules).
  void step(ParameterSet& params, const GradientMap& grads, double learning_rate);

  const OptimizerConfig& config() const { return config_; }
  std::size_t steps_taken() const { return step_; }

 private:
  OptimizerConfig config_;
  std::map<std::string, Tensor> first_moment_;
  std::map<std::string, Tensor> second_moment_;
  std::size_t step_ = 0;
};

// Functional form: one update from fresh optimizer state.
ParameterSet optimizer_step(const ParameterSet& params, const GradientMap& grads, const OptimizerConfig& config);

}  // namespace cllm
