#include "cllm/optimizer.hpp"

#include <cmath>
#include <numbers>

#include "cllm/errors.hpp"

namespace cllm {

double scheduled_learning_rate(const OptimizerConfig& config, std::size_t step, std::size_t total_steps) {
  const double peak = config.learning_rate;
  if (step < config.warmup_steps) {
    return peak * static_cast<double>(step + 1) / static_cast<double>(config.warmup_steps);
  }
  if (config.schedule == OptimizerConfig::Schedule::Constant || total_steps <= config.warmup_steps + 1) return peak;
  const double t = static_cast<double>(step - config.warmup_steps) /
                   static_cast<double>(total_steps - config.warmup_steps - 1);
  const double floor = config.min_rate_fraction * peak;
  return floor + (peak - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(t, 1.0)));
}

void Optimizer::step(ParameterSet& params, const GradientMap& grads) { step(params, grads, config_.learning_rate); }

void Optimizer::step(ParameterSet& params, const GradientMap& grads, double learning_rate) {
  for (const auto& [name, value] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw ContractViolation("missing gradient for parameter " + name);
    if (it->second.shape() != value.shape()) throw ContractViolation("gradient shape mismatch for " + name);
  }
  double clip = 1.0;
  if (config_.clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& [name, g] : grads) {
      if (!params.contains(name)) continue;
      for (double v : g.values()) sq += v * v;
    }
    const double norm = std::sqrt(sq);
    if (norm > config_.clip_norm) clip = config_.clip_norm / norm;
  }
  ++step_;
  const double lr = learning_rate;
  if (config_.kind == OptimizerConfig::Kind::GradientDescent) {
    for (auto& [name, value] : params) {
      const Tensor& g = grads.at(name);
      for (std::size_t i = 0; i < value.size(); ++i) value[i] -= lr * clip * g[i];
    }
    return;
  }
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (auto& [name, value] : params) {
    const Tensor& g = grads.at(name);
    auto [m_it, m_new] = first_moment_.try_emplace(name, value.shape(), 0.0);
    auto [v_it, v_new] = second_moment_.try_emplace(name, value.shape(), 0.0);
    double* __restrict m = m_it->second.data();
    double* __restrict v = v_it->second.data();
    double* __restrict w = value.data();
    const double* __restrict gp = g.data();
    const double eps = config_.epsilon;
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double gi = clip * gp[i];
      m[i] = b1 * m[i] + (1.0 - b1) * gi;
      v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
  }
}

ParameterSet optimizer_step(const ParameterSet& params, const GradientMap& grads, const OptimizerConfig& config) {
  ParameterSet out = params;
  Optimizer opt(config);
  opt.step(out, grads);
  return out;
}

}  // namespace cllm
