#include "cllm/trainer.hpp"

#include <chrono>
#include <cmath>
#include <deque>

#include "cllm/errors.hpp"
#include "cllm/rng.hpp"

namespace cllm {

void LossConfig::validate() const {
  if (!std::isfinite(ar_weight) || ar_weight < 0.0) throw ConfigError("ar_weight must be finite and non-negative");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(plateau_tolerance >= 0.0)) throw ConfigError("plateau_tolerance must be non-negative");
  if (!(optimizer.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(optimizer.min_rate_fraction >= 0.0 && optimizer.min_rate_fraction <= 1.0)) {
    throw ConfigError("min_rate_fraction must lie in [0, 1]");
  }
}

Tensor TeacherSnapshot::distributions(std::span<const Token> prefix, std::span<const Token> block) const {
  return softmax_rows(logits_block(model_, prefix, block));
}

namespace {

Var reduce(Var summed, std::size_t count, Reduction reduction) {
  return reduction == Reduction::Mean ? scale(summed, 1.0 / static_cast<double>(count)) : summed;
}

Var consistency_term(Graph& graph, const Model& student, const TeacherSnapshot& teacher, std::span<const Token> prefix,
                     std::span<const Token> student_block, std::span<const Token> teacher_block, Divergence kind,
                     Reduction reduction) {
  require(student_block.size() == teacher_block.size(), "consistency loss: states differ in length");
  require(!student_block.empty(), "consistency loss: empty state");
  const Tensor reference = teacher.distributions(prefix, teacher_block);
  Var q = softmax_rows(logits_block_graph(graph, student, prefix, student_block));
  return reduce(divergence_rows(reference, q, kind), student_block.size(), reduction);
}

}  // namespace

Var global_consistency_loss(Graph& graph, const Model& student, const TeacherSnapshot& teacher,
                            std::span<const Token> prefix, std::span<const Token> y, std::span<const Token> y_star,
                            Divergence kind, Reduction reduction) {
  return consistency_term(graph, student, teacher, prefix, y, y_star, kind, reduction);
}

Var local_consistency_loss(Graph& graph, const Model& student, const TeacherSnapshot& teacher,
                           std::span<const Token> prefix, std::span<const Token> y, std::span<const Token> y_next,
                           Divergence kind, Reduction reduction) {
  return consistency_term(graph, student, teacher, prefix, y, y_next, kind, reduction);
}

Var ar_loss(Graph& graph, const Model& student, std::span<const Token> prompt, std::span<const Token> target,
            Reduction reduction) {
  require(!target.empty(), "ar_loss: empty target");
  Var logits = logits_block_graph(graph, student, prompt, target);
  return reduce(cross_entropy_rows(logits, target), target.size(), reduction);
}

Var total_loss(Var consistency, Var ar, double ar_weight) {
  require(std::isfinite(consistency.value().item()) && std::isfinite(ar.value().item()),
          "total_loss: non-finite input");
  return add(consistency, scale(ar, ar_weight));
}

double total_loss(double consistency, double ar, double ar_weight) {
  require(std::isfinite(consistency) && std::isfinite(ar), "total_loss: non-finite input");
  return consistency + ar_weight * ar;
}

nlohmann::json TrainStep::to_json() const {
  return {{"step", step}, {"L_consistency", consistency}, {"L_AR", ar}, {"total", total}, {"wall_ms", wall_ms}};
}

std::size_t sample_space(const TrainingRecord& record, std::size_t window, ConsistencyKind kind) {
  const WindowRecord& w = record.windows.at(window);
  if (kind == ConsistencyKind::Local) return w.states.size() - 1;
  return w.states.size() + w.augmented.size();
}

ExampleLoss example_loss(const Model& student, const TeacherSnapshot& teacher, const TrainingRecord& record,
                         std::size_t window, std::size_t state, const LossConfig& config) {
  require(window < record.windows.size(), "example_loss: window out of range");
  require(state < sample_space(record, window, config.consistency), "example_loss: state out of range");
  const WindowRecord& w = record.windows[window];
  const TokenSequence prefix = record.window_prefix(window);

  Graph graph;
  Var consistency;
  if (config.consistency == ConsistencyKind::Global) {
    const TokenSequence& y = state < w.states.size() ? w.states[state] : w.augmented[state - w.states.size()];
    consistency =
        global_consistency_loss(graph, student, teacher, prefix, y, w.fixed_point, config.divergence, config.reduction);
  } else {
    consistency = local_consistency_loss(graph, student, teacher, prefix, w.states[state], w.states[state + 1],
                                         config.divergence, config.reduction);
  }
  Var ar = ar_loss(graph, student, record.prompt, record.response, config.reduction);
  Var total = total_loss(consistency, ar, config.ar_weight);

  ExampleLoss out;
  out.consistency = consistency.value().item();
  out.ar = ar.value().item();
  out.total = total.value().item();
  out.gradients = gradients(graph, total, student.params());
  return out;
}

TrainResult train(const TrajectoryDataset& dataset, const Model& base, const LossConfig& config,
                  const StepCallback& on_step) {
  require(!dataset.records.empty(), "train: empty dataset");
  config.validate();
  for (const auto& r : dataset.records) require(!r.windows.empty() && !r.response.empty(), "train: record has no windows");

  TrainResult result{base.snapshot(), {}, 0, false};
  Model& student = result.model;
  Optimizer optimizer(config.optimizer);
  Rng rng(derive_seed(config.seed, "train"));

  std::deque<double> recent;
  double recent_sum = 0.0;
  double best_mean = 0.0;
  std::size_t best_step = 0;
  bool have_best = false;

  for (std::size_t step = 0; step < config.steps; ++step) {
    const auto started = std::chrono::steady_clock::now();
    const TeacherSnapshot teacher(student);

    GradientMap accumulated;
    TrainStep entry;
    entry.step = step;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      const TrainingRecord& rec = dataset.records[rng.uniform_index(dataset.records.size())];
      const std::size_t w = rng.uniform_index(rec.windows.size());
      const std::size_t s = rng.uniform_index(sample_space(rec, w, config.consistency));
      ExampleLoss ex = example_loss(student, teacher, rec, w, s, config);
      entry.consistency += ex.consistency;
      entry.ar += ex.ar;
      entry.total += ex.total;
      if (b == 0) {
        accumulated = std::move(ex.gradients);
      } else {
        for (auto& [name, g] : accumulated) {
          auto dst = g.values();
          auto src = ex.gradients.at(name).values();
          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
        }
      }
    }
    const double inv = 1.0 / static_cast<double>(config.batch_size);
    if (config.batch_size > 1) {
      for (auto& [name, g] : accumulated)
        for (double& v : g.values()) v *= inv;
    }
    entry.consistency *= inv;
    entry.ar *= inv;
    entry.total *= inv;
    if (!std::isfinite(entry.total)) throw TrainingError("loss became non-finite at step " + std::to_string(step));

    optimizer.step(student.params(), accumulated, scheduled_learning_rate(config.optimizer, step, config.steps));
    entry.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
    result.log.push_back(entry);
    result.steps_run = step + 1;
    if (on_step) on_step(entry);

    if (config.plateau_window == 0) continue;
    recent.push_back(entry.total);
    recent_sum += entry.total;
    if (recent.size() > config.plateau_window) {
      recent_sum -= recent.front();
      recent.pop_front();
    }
    if (recent.size() == config.plateau_window) {
      const double mean = recent_sum / static_cast<double>(recent.size());
      if (!have_best || mean < best_mean * (1.0 - config.plateau_tolerance)) {
        best_mean = mean;
        best_step = step;
        have_best = true;
      } else if (step - best_step >= config.plateau_window) {
        result.early_stopped = true;
        break;
      }
    }
  }
  return result;
}

}  // namespace cllm
