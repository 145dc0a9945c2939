#pragma once

// Consistency distillation: adapts a copy of the target model so that any
// state on a Jacobi trajectory maps to the trajectory's fixed point in as few
// passes as possible, while an AR term keeps it close to the target's outputs.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "cllm/autograd.hpp"
#include "cllm/dataset.hpp"
#include "cllm/model.hpp"
#include "cllm/optimizer.hpp"
#include "json.hpp"

namespace cllm {

enum class ConsistencyKind { Global, Local };

// Mean divides every term by its token count; Sum keeps plain sums.
enum class Reduction { Mean, Sum };

struct LossConfig {
  ConsistencyKind consistency = ConsistencyKind::Global;
  Divergence divergence = Divergence::ForwardKL;
  double ar_weight = 10.0;
  Reduction reduction = Reduction::Mean;
  std::size_t batch_size = 1;
  std::size_t steps = 2000;
  // Early stop once the moving mean of the total loss (over plateau_window
  // steps) has not improved by plateau_tolerance relative for plateau_window steps.
  // 0 disables early stopping.
  std::size_t plateau_window = 200;
  double plateau_tolerance = 0.01;
  std::uint64_t seed = 0;
  OptimizerConfig optimizer;

  void validate() const;
};

// Frozen copy of the student's parameters. Evaluated through the inference
// path only, so no gradient can ever reach it.
class TeacherSnapshot {
 public:
  explicit TeacherSnapshot(const Model& student) : model_(student.snapshot()) {}
  const Model& model() const { return model_; }
  // Next-token distributions [block x V] for prefix ++ block[<i].
  Tensor distributions(std::span<const Token> prefix, std::span<const Token> block) const;

 private:
  Model model_;
};

// Sum (or mean) over block positions of D(teacher(. | prefix, y*<i) || student(. | prefix, y<i)).
Var global_consistency_loss(Graph& graph, const Model& student, const TeacherSnapshot& teacher,
                            std::span<const Token> prefix, std::span<const Token> y, std::span<const Token> y_star,
                            Divergence kind = Divergence::ForwardKL, Reduction reduction = Reduction::Mean);

// Same with the teacher conditioned on the next trajectory state y_next.
Var local_consistency_loss(Graph& graph, const Model& student, const TeacherSnapshot& teacher,
                           std::span<const Token> prefix, std::span<const Token> y, std::span<const Token> y_next,
                           Divergence kind = Divergence::ForwardKL, Reduction reduction = Reduction::Mean);

// Negative log-likelihood of `target` given prompt, teacher-forced.
Var ar_loss(Graph& graph, const Model& student, std::span<const Token> prompt, std::span<const Token> target,
            Reduction reduction = Reduction::Mean);

Var total_loss(Var consistency, Var ar, double ar_weight);
double total_loss(double consistency, double ar, double ar_weight);

struct TrainStep {
  std::size_t step = 0;
  double consistency = 0.0;
  double ar = 0.0;
  double total = 0.0;
  double wall_ms = 0.0;

  nlohmann::json to_json() const;
};

struct TrainResult {
  Model model;
  std::vector<TrainStep> log;
  std::size_t steps_run = 0;
  bool early_stopped = false;
};

using StepCallback = std::function<void(const TrainStep&)>;

// Alternative entry point for tests: loss and gradient of one training
// example with a given sampled state index.
struct ExampleLoss {
  double consistency = 0.0;
  double ar = 0.0;
  double total = 0.0;
  GradientMap gradients;
};
ExampleLoss example_loss(const Model& student, const TeacherSnapshot& teacher, const TrainingRecord& record,
                         std::size_t window, std::size_t state, const LossConfig& config);

// Number of states a sample can draw from window `w` of `record`: every raw
// and augmented state for the global loss, every adjacent raw pair for the local one.
std::size_t sample_space(const TrainingRecord& record, std::size_t window, ConsistencyKind kind);

TrainResult train(const TrajectoryDataset& dataset, const Model& base, const LossConfig& config,
                  const StepCallback& on_step = {});

}  // namespace cllm
