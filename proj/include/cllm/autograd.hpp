#pragma once

// Tape-based reverse-mode differentiation.
//
// A Graph records nodes in creation order, which is a topological order, so
// backward() is a single reverse sweep that visits every node at most once.
// Leaves come in two flavours: constants (never differentiated) and parameters
// bound to a tensor living in some ParameterSet, identified by address.

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cllm/parameters.hpp"
#include "cllm/tensor.hpp"

namespace cllm {

class Graph;

// Lightweight handle to a node of a Graph.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

class Graph {
 public:
  using Backward = std::function<void(Graph&, std::size_t self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  // Returns the leaf bound to `source`, creating it on first use.
  Var parameter(const Tensor& source);

  // Records an op result. `backward` is dropped when no input needs gradients.
  Var record(Tensor value, std::span<const Var> inputs, Backward backward);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  // Gradient buffer of a node, zero-initialised on first access.
  Tensor& grad(std::size_t id);
  bool has_grad(std::size_t id) const { return nodes_[id].grad_ready; }
  std::size_t size() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and propagates. The loss must hold one value.
  void backward(Var loss);

  // Gradient accumulated for a bound parameter tensor, or nullptr when the
  // tensor never entered the graph or no path reached it.
  const Tensor* parameter_grad(const Tensor& source) const;

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool grad_ready = false;
    bool requires_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> parameters_;
  bool backward_done_ = false;
};

// Runs backward from `loss` and returns one gradient per entry of `params`;
// parameters not on any path to the loss receive zeros.
GradientMap gradients(Graph& graph, Var loss, const ParameterSet& params);

// ---- differentiable ops -------------------------------------------------------

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var add_row_bias(Var a, Var bias);  // a[m x n] + bias[n] on every row
Var mul(Var a, Var b);              // elementwise
Var scale(Var a, double c);
Var sum(Var a);                     // -> scalar
Var gelu(Var a);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
Var embedding(Var table, std::span<const std::size_t> ids);
Var causal_attention(Var q, Var k, Var v, std::size_t heads);
Var softmax_rows(Var a);
Var slice_rows(Var a, std::size_t begin, std::size_t count);

// Sum over rows of -log softmax(logits)[target]; computed by log-sum-exp.
Var cross_entropy_rows(Var logits, std::span<const std::size_t> targets);
Var cross_entropy(Var logits, std::size_t target);

enum class Divergence { ForwardKL, ReverseKL, JensenShannon };

// Probability floor applied (then renormalised) to both sides of a divergence.
inline constexpr double kProbabilityFloor = 1e-12;

// Sum over rows of D(p_ref[r] || q[r]). p_ref is a constant (stop-gradient)
// side, q carries gradients. Both are floored at kProbabilityFloor first.
Var divergence_rows(const Tensor& p_ref, Var q, Divergence kind);
// Single-distribution forward KL. Throws ContractViolation unless both inputs
// are probability vectors.
Var forward_kl(const Tensor& p_ref, Var q);

// ---- graph-free helpers -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax_rows(const Tensor& a);
double forward_kl(const Tensor& p_ref, const Tensor& q);
double cross_entropy(const Tensor& logits, std::size_t target);
// Floors every row at kProbabilityFloor and renormalises.
Tensor floor_probabilities(const Tensor& p);

}  // namespace cllm
