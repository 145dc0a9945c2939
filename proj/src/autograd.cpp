#include "cllm/autograd.hpp"

#include <algorithm>
#include <cmath>

#include "cllm/errors.hpp"
#include "cllm/kernels.hpp"

namespace cllm {

const Tensor& Var::value() const { return graph_->value(id_); }

Var Graph::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), Tensor(), false, false, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Graph::parameter(const Tensor& source) {
  if (auto it = parameters_.find(&source); it != parameters_.end()) return Var(this, it->second);
  nodes_.push_back(Node{source, Tensor(), false, true, nullptr});
  parameters_.emplace(&source, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

Var Graph::record(Tensor value, std::span<const Var> inputs, Backward backward) {
  bool needs = false;
  for (const Var& in : inputs) {
    if (&in.graph() != this) throw ContractViolation("op mixes nodes from different graphs");
    needs = needs || nodes_[in.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), Tensor(), false, needs, needs ? std::move(backward) : nullptr});
  return Var(this, nodes_.size() - 1);
}

Tensor& Graph::grad(std::size_t id) {
  Node& node = nodes_[id];
  if (!node.grad_ready) {
    node.grad = Tensor(node.value.shape(), 0.0);
    node.grad_ready = true;
  }
  return node.grad;
}

void Graph::backward(Var loss) {
  if (&loss.graph() != this) throw ContractViolation("loss belongs to another graph");
  if (loss.value().size() != 1) {
    throw ContractViolation("backward requires a scalar loss, got shape " + shape_string(loss.shape()));
  }
  if (backward_done_) throw ContractViolation("backward already ran on this graph");
  backward_done_ = true;
  grad(loss.id())[0] = 1.0;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (node.grad_ready && node.backward) node.backward(*this, id);
  }
}

const Tensor* Graph::parameter_grad(const Tensor& source) const {
  auto it = parameters_.find(&source);
  if (it == parameters_.end()) return nullptr;
  const Node& node = nodes_[it->second];
  return node.grad_ready ? &node.grad : nullptr;
}

GradientMap gradients(Graph& graph, Var loss, const ParameterSet& params) {
  graph.backward(loss);
  GradientMap out;
  for (const auto& [name, tensor] : params) {
    const Tensor* g = graph.parameter_grad(tensor);
    out.emplace(name, g ? *g : Tensor(tensor.shape(), 0.0));
  }
  return out;
}

namespace {

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

void accumulate(Tensor& dst, const Tensor& src, double factor = 1.0) {
  double* d = dst.data();
  const double* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += factor * s[i];
}

// Row-wise log-sum-exp with max subtraction.
double log_sum_exp(const double* row, std::size_t n) {
  const double mx = *std::max_element(row, row + n);
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
  return mx + std::log(z);
}

void check_probability_vector(const Tensor& p, const char* which) {
  double total = 0.0;
  for (double v : p.values()) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw ContractViolation(std::string("forward_kl: ") + which + " has a negative or non-finite entry");
    }
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw ContractViolation(std::string("forward_kl: ") + which + " is not normalised (sum " +
                            std::to_string(total) + ")");
  }
}

// Per-kind divergence of one floored row pair and its derivative w.r.t. q.
double divergence_row(const double* p, const double* q, std::size_t n, Divergence kind, double* dq) {
  double d = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    switch (kind) {
      case Divergence::ForwardKL:
        d += p[i] * (std::log(p[i]) - std::log(q[i]));
        if (dq) dq[i] = -p[i] / q[i];
        break;
      case Divergence::ReverseKL:
        d += q[i] * (std::log(q[i]) - std::log(p[i]));
        if (dq) dq[i] = std::log(q[i]) - std::log(p[i]) + 1.0;
        break;
      case Divergence::JensenShannon: {
        const double m = 0.5 * (p[i] + q[i]);
        d += 0.5 * p[i] * (std::log(p[i]) - std::log(m)) + 0.5 * q[i] * (std::log(q[i]) - std::log(m));
        if (dq) dq[i] = 0.5 * (std::log(q[i]) - std::log(m));
        break;
      }
    }
  }
  return d;
}

}  // namespace

Tensor floor_probabilities(const Tensor& p) {
  Tensor out = p;
  const std::size_t cols = p.cols();
  for (std::size_t r = 0; r < p.rows(); ++r) {
    double* row = out.row(r);
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      row[j] = std::max(row[j], kProbabilityFloor);
      s += row[j];
    }
    for (std::size_t j = 0; j < cols; ++j) row[j] /= s;
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  Tensor c(Shape{m, n});
  kernels::gemm_nn(a.data(), b.data(), c.data(), m, k, n, false);
  return c;
}

Tensor softmax_rows(const Tensor& a) {
  Tensor out = a;
  const std::size_t cols = a.cols();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    double* row = out.row(r);
    const double mx = *std::max_element(row, row + cols);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      row[j] = std::exp(row[j] - mx);
      z += row[j];
    }
    for (std::size_t j = 0; j < cols; ++j) row[j] /= z;
  }
  return out;
}

double forward_kl(const Tensor& p_ref, const Tensor& q) {
  require_same_shape(p_ref, q, "forward_kl");
  check_probability_vector(p_ref, "p_ref");
  check_probability_vector(q, "q");
  const Tensor p = floor_probabilities(p_ref);
  const Tensor qf = floor_probabilities(q);
  return divergence_row(p.data(), qf.data(), p.size(), Divergence::ForwardKL, nullptr);
}

double cross_entropy(const Tensor& logits, std::size_t target) {
  if (target >= logits.size()) {
    throw IndexError("cross_entropy: target " + std::to_string(target) + " outside " +
                     std::to_string(logits.size()) + " classes");
  }
  return log_sum_exp(logits.data(), logits.size()) - logits[target];
}

// ---- differentiable ops -------------------------------------------------------

Var matmul(Var a, Var b) {
  Tensor c = matmul(a.value(), b.value());
  const Var in[] = {a, b};
  return a.graph().record(std::move(c), in, [a, b](Graph& g, std::size_t self) {
    const Tensor& dc = g.grad(self);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const std::size_t m = av.shape()[0], k = av.shape()[1], n = bv.shape()[1];
    if (g.requires_grad(a.id())) kernels::gemm_nt(dc.data(), bv.data(), g.grad(a.id()).data(), m, n, k, true);
    if (g.requires_grad(b.id())) kernels::gemm_tn(av.data(), dc.data(), g.grad(b.id()).data(), m, k, n, true);
  });
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor c = a.value();
  accumulate(c, b.value());
  const Var in[] = {a, b};
  return a.graph().record(std::move(c), in, [a, b](Graph& g, std::size_t self) {
    const Tensor& dc = g.grad(self);
    if (g.requires_grad(a.id())) accumulate(g.grad(a.id()), dc);
    if (g.requires_grad(b.id())) accumulate(g.grad(b.id()), dc);
  });
}

Var add_row_bias(Var a, Var bias) {
  require_matrix(a.value(), "add_row_bias");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (bias.value().size() != n) throw DimensionError("add_row_bias: bias length does not match columns");
  Tensor c = a.value();
  for (std::size_t r = 0; r < m; ++r) {
    double* row = c.row(r);
    for (std::size_t j = 0; j < n; ++j) row[j] += bias.value()[j];
  }
  const Var in[] = {a, bias};
  return a.graph().record(std::move(c), in, [a, bias, m, n](Graph& g, std::size_t self) {
    const Tensor& dc = g.grad(self);
    if (g.requires_grad(a.id())) accumulate(g.grad(a.id()), dc);
    if (g.requires_grad(bias.id())) {
      Tensor& db = g.grad(bias.id());
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t j = 0; j < n; ++j) db[j] += dc.at(r, j);
      }
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor c = a.value();
  for (std::size_t i = 0; i < c.size(); ++i) c[i] *= b.value()[i];
  const Var in[] = {a, b};
  return a.graph().record(std::move(c), in, [a, b](Graph& g, std::size_t self) {
    const Tensor& dc = g.grad(self);
    if (g.requires_grad(a.id())) {
      Tensor& da = g.grad(a.id());
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += dc[i] * b.value()[i];
    }
    if (g.requires_grad(b.id())) {
      Tensor& db = g.grad(b.id());
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += dc[i] * a.value()[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tensor c = a.value();
  for (double& v : c.values()) v *= factor;
  const Var in[] = {a};
  return a.graph().record(std::move(c), in, [a, factor](Graph& g, std::size_t self) {
    accumulate(g.grad(a.id()), g.grad(self), factor);
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const Var in[] = {a};
  return a.graph().record(Tensor::scalar(s), in, [a](Graph& g, std::size_t self) {
    const double d = g.grad(self)[0];
    for (double& v : g.grad(a.id()).values()) v += d;
  });
}

Var gelu(Var a) {
  Tensor y(a.shape());
  kernels::gelu_forward(a.value().data(), y.data(), y.size());
  const Var in[] = {a};
  return a.graph().record(std::move(y), in, [a](Graph& g, std::size_t self) {
    const Tensor& dy = g.grad(self);
    kernels::gelu_backward(dy.data(), a.value().data(), g.grad(a.id()).data(), dy.size());
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  require_matrix(x.value(), "layer_norm");
  const std::size_t rows = x.shape()[0], d = x.shape()[1];
  if (gamma.value().size() != d || beta.value().size() != d) {
    throw DimensionError("layer_norm: gain/bias length does not match feature size");
  }
  Tensor y(x.shape());
  std::vector<double> mean(rows), rstd(rows);
  kernels::layer_norm_forward(x.value().data(), gamma.value().data(), beta.value().data(), rows, d, eps, y.data(),
                              mean.data(), rstd.data());
  const Var in[] = {x, gamma, beta};
  return x.graph().record(std::move(y), in,
                          [x, gamma, beta, rows, d, mean = std::move(mean), rstd = std::move(rstd)](
                              Graph& g, std::size_t self) {
                            const Tensor& dy = g.grad(self);
                            // The kernel fills all three buffers; route unused ones to scratch.
                            Tensor dx_scratch, dg_scratch, db_scratch;
                            double* dx = g.requires_grad(x.id()) ? g.grad(x.id()).data()
                                                                  : (dx_scratch = Tensor(x.shape())).data();
                            double* dg = g.requires_grad(gamma.id()) ? g.grad(gamma.id()).data()
                                                                      : (dg_scratch = Tensor(gamma.shape())).data();
                            double* db = g.requires_grad(beta.id()) ? g.grad(beta.id()).data()
                                                                     : (db_scratch = Tensor(beta.shape())).data();
                            kernels::layer_norm_backward(dy.data(), x.value().data(), gamma.value().data(),
                                                         mean.data(), rstd.data(), rows, d, dx, dg, db);
                          });
}

Var embedding(Var table, std::span<const std::size_t> ids) {
  require_matrix(table.value(), "embedding");
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  Tensor out(Shape{ids.size(), d});
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] >= vocab) throw IndexError("embedding: id " + std::to_string(ids[t]) + " out of range");
    std::copy_n(table.value().row(ids[t]), d, out.row(t));
  }
  const Var in[] = {table};
  return table.graph().record(std::move(out), in,
                              [table, ids = std::vector<std::size_t>(ids.begin(), ids.end()), d](
                                  Graph& g, std::size_t self) {
                                const Tensor& dy = g.grad(self);
                                Tensor& dt = g.grad(table.id());
                                for (std::size_t t = 0; t < ids.size(); ++t) {
                                  double* dst = dt.row(ids[t]);
                                  const double* src = dy.row(t);
                                  for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                                }
                              });
}

Var causal_attention(Var q, Var k, Var v, std::size_t heads) {
  require_matrix(q.value(), "causal_attention");
  require_same_shape(q.value(), k.value(), "causal_attention");
  require_same_shape(q.value(), v.value(), "causal_attention");
  const std::size_t rows = q.shape()[0], d = q.shape()[1];
  if (heads == 0 || d % heads != 0) throw DimensionError("causal_attention: width not divisible by head count");
  Tensor out(q.shape());
  std::vector<double> probs(heads * rows * rows);
  kernels::attention_forward(q.value().data(), k.value().data(), v.value().data(), rows, 0, d, heads, out.data(),
                             probs.data());
  const Var in[] = {q, k, v};
  return q.graph().record(std::move(out), in,
                          [q, k, v, heads, rows, d, probs = std::move(probs)](Graph& g, std::size_t self) {
                            Tensor dq(q.shape()), dk(k.shape()), dv(v.shape());
                            kernels::attention_backward(g.grad(self).data(), q.value().data(), k.value().data(),
                                                        v.value().data(), probs.data(), rows, 0, d, heads,
                                                        dq.data(), dk.data(), dv.data());
                            if (g.requires_grad(q.id())) accumulate(g.grad(q.id()), dq);
                            if (g.requires_grad(k.id())) accumulate(g.grad(k.id()), dk);
                            if (g.requires_grad(v.id())) accumulate(g.grad(v.id()), dv);
                          });
}

Var softmax_rows(Var a) {
  Tensor y = softmax_rows(a.value());
  const Var in[] = {a};
  return a.graph().record(std::move(y), in, [a](Graph& g, std::size_t self) {
    const Tensor& y = g.value(self);
    const Tensor& dy = g.grad(self);
    Tensor& da = g.grad(a.id());
    const std::size_t cols = y.cols();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < cols; ++j) dot += dy.at(r, j) * y.at(r, j);
      for (std::size_t j = 0; j < cols; ++j) da.at(r, j) += y.at(r, j) * (dy.at(r, j) - dot);
    }
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  require_matrix(a.value(), "slice_rows");
  const std::size_t rows = a.shape()[0], cols = a.shape()[1];
  if (count == 0 || begin + count > rows) {
    throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") outside " + std::to_string(rows));
  }
  Tensor out(Shape{count, cols});
  std::copy_n(a.value().row(begin), count * cols, out.data());
  const Var in[] = {a};
  return a.graph().record(std::move(out), in, [a, begin, count, cols](Graph& g, std::size_t self) {
    const Tensor& dy = g.grad(self);
    double* dst = g.grad(a.id()).row(begin);
    for (std::size_t i = 0; i < count * cols; ++i) dst[i] += dy[i];
  });
}

Var cross_entropy_rows(Var logits, std::span<const std::size_t> targets) {
  const Tensor& x = logits.value();
  const std::size_t rows = x.rows(), cols = x.cols();
  if (targets.size() != rows) throw DimensionError("cross_entropy_rows: one target per row required");
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= cols) {
      throw IndexError("cross_entropy: target " + std::to_string(targets[r]) + " outside " + std::to_string(cols) +
                       " classes");
    }
    total += log_sum_exp(x.row(r), cols) - x.row(r)[targets[r]];
  }
  const Var in[] = {logits};
  return logits.graph().record(
      Tensor::scalar(total), in,
      [logits, t = std::vector<std::size_t>(targets.begin(), targets.end()), rows, cols](Graph& g, std::size_t self) {
        const double d = g.grad(self)[0];
        const Tensor& x = logits.value();
        Tensor& dx = g.grad(logits.id());
        for (std::size_t r = 0; r < rows; ++r) {
          const double lse = log_sum_exp(x.row(r), cols);
          for (std::size_t j = 0; j < cols; ++j) {
            dx.row(r)[j] += d * (std::exp(x.row(r)[j] - lse) - (j == t[r] ? 1.0 : 0.0));
          }
        }
      });
}

Var cross_entropy(Var logits, std::size_t target) {
  const std::size_t t[] = {target};
  if (logits.value().rows() != 1) throw DimensionError("cross_entropy: expected a single row of logits");
  return cross_entropy_rows(logits, t);
}

Var divergence_rows(const Tensor& p_ref, Var q, Divergence kind) {
  require_same_shape(p_ref, q.value(), "divergence_rows");
  const Tensor p = floor_probabilities(p_ref);
  const Tensor qf = floor_probabilities(q.value());
  const std::size_t rows = p.rows(), cols = p.cols();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) total += divergence_row(p.row(r), qf.row(r), cols, kind, nullptr);
  const Var in[] = {q};
  return q.graph().record(Tensor::scalar(total), in, [q, p, qf, kind, rows, cols](Graph& g, std::size_t self) {
    const double d = g.grad(self)[0];
    const Tensor& raw = q.value();
    Tensor& dq = g.grad(q.id());
    std::vector<double> dqf(cols);
    for (std::size_t r = 0; r < rows; ++r) {
      divergence_row(p.row(r), qf.row(r), cols, kind, dqf.data());
      // Back through q_floored = max(q, eps) / sum(max(q, eps)).
      double s = 0.0;
      for (std::size_t j = 0; j < cols; ++j) s += std::max(raw.row(r)[j], kProbabilityFloor);
      double dot = 0.0;
      for (std::size_t j = 0; j < cols; ++j) dot += dqf[j] * qf.row(r)[j];
      for (std::size_t j = 0; j < cols; ++j) {
        if (raw.row(r)[j] > kProbabilityFloor) dq.row(r)[j] += d * (dqf[j] - dot) / s;
      }
    }
  });
}

Var forward_kl(const Tensor& p_ref, Var q) {
  require_same_shape(p_ref, q.value(), "forward_kl");
  check_probability_vector(p_ref, "p_ref");
  check_probability_vector(q.value(), "q");
  return divergence_rows(p_ref, q, Divergence::ForwardKL);
}

}  // namespace cllm
