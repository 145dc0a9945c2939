#pragma once

// Dense kernels behind the autograd ops and the inference path.
//
// Every kernel exists twice: the OpenMP-parallel version in cllm::kernels and a
// serial reference in cllm::kernels::serial. Both share one row-level
// implementation and partition work only over independent outputs, so their
// results are bit-identical regardless of thread count. Each output element is
// accumulated in a fixed order independent of how many rows are processed at
// once, which is what makes cached and uncached forward passes agree exactly.

#include <cstddef>

namespace cllm::kernels {

// c[m x n] (+)= a[m x k] * b[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate);
// c[k x n] (+)= a[m x k]^T * b[m x n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate);
// c[m x k] (+)= a[m x n] * b[k x n]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k,
             bool accumulate);

// Row-wise layer normalisation. mean/rstd receive one value per row.
void layer_norm_forward(const double* x, const double* gamma, const double* beta, std::size_t rows,
                        std::size_t d, double eps, double* y, double* mean, double* rstd);
// dx, dgamma, dbeta are accumulated into.
void layer_norm_backward(const double* dy, const double* x, const double* gamma, const double* mean,
                         const double* rstd, std::size_t rows, std::size_t d, double* dx, double* dgamma,
                         double* dbeta);

// Multi-head causal attention. Query row t sits at absolute position offset + t
// and attends keys [0, offset + t]. keys/values hold at least offset + rows
// entries. probs, when non-null, receives [heads x rows x (offset + rows)]
// attention weights (entries beyond the causal horizon are zero).
void attention_forward(const double* q, const double* keys, const double* values, std::size_t rows,
                       std::size_t offset, std::size_t d, std::size_t heads, double* out, double* probs);
// Gradients of attention_forward, accumulated into dq, dkeys, dvalues.
void attention_backward(const double* dout, const double* q, const double* keys, const double* values,
                        const double* probs, std::size_t rows, std::size_t offset, std::size_t d,
                        std::size_t heads, double* dq, double* dkeys, double* dvalues);

// tanh-approximated GELU.
void gelu_forward(const double* x, double* y, std::size_t count);
void gelu_backward(const double* dy, const double* x, double* dx, std::size_t count);

namespace serial {

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate);
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate);
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k,
             bool accumulate);
void layer_norm_forward(const double* x, const double* gamma, const double* beta, std::size_t rows,
                        std::size_t d, double eps, double* y, double* mean, double* rstd);
void layer_norm_backward(const double* dy, const double* x, const double* gamma, const double* mean,
                         const double* rstd, std::size_t rows, std::size_t d, double* dx, double* dgamma,
                         double* dbeta);
void attention_forward(const double* q, const double* keys, const double* values, std::size_t rows,
                       std::size_t offset, std::size_t d, std::size_t heads, double* out, double* probs);
void attention_backward(const double* dout, const double* q, const double* keys, const double* values,
                        const double* probs, std::size_t rows, std::size_t offset, std::size_t d,
                        std::size_t heads, double* dq, double* dkeys, double* dvalues);
void gelu_forward(const double* x, double* y, std::size_t count);
void gelu_backward(const double* dy, const double* x, double* dx, std::size_t count);

}  // namespace serial

// Number of threads the parallel kernels will use (1 when built without OpenMP).
int max_threads();

}  // namespace cllm::kernels
