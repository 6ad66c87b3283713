#pragma once

#include <cstdint>

namespace vimp::kern {

/// Kernel dispatch mode. Parallel runs the OpenMP kernels (the production
/// path); SerialRef routes every call through the plain serial reference
/// implementations in kern::ref. Both are bit-deterministic: parallel loops
/// only ever split independent output elements across threads, so results do
/// not depend on the thread count.
enum class Mode { Parallel, SerialRef };

void set_mode(Mode m);
Mode mode();

// ---------------------------------------------------------------------------
// Dense float32 kernels, row-major, tightly packed.
// ---------------------------------------------------------------------------

/// C = alpha * op(A) * op(B) + beta * C with op controlled by transpose
/// flags. A is (m x k) or (k x m) when trans_a; B is (k x n) or (n x k).
void sgemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
           const float* a, const float* b, float beta, float* c);

void ew_add(const float* a, const float* b, float* y, int64_t n);
void ew_sub(const float* a, const float* b, float* y, int64_t n);
void ew_mul(const float* a, const float* b, float* y, int64_t n);
void ew_scale(const float* x, float alpha, float* y, int64_t n);
/// y += alpha * x
void ew_axpy(float alpha, const float* x, float* y, int64_t n);

void add_bias_rows(float* x, const float* bias, int rows, int cols);
/// out[c] += sum_r x[r, c]
void sum_rows_add(const float* x, float* out, int rows, int cols);

void gelu_fwd(const float* x, float* y, int64_t n);
/// dx += dgelu(x) * dy
void gelu_bwd(const float* x, const float* dy, float* dx, int64_t n);
void sigmoid_fwd(const float* x, float* y, int64_t n);
/// dx += y * (1 - y) * dy, y = sigmoid(x)
void sigmoid_bwd(const float* y, const float* dy, float* dx, int64_t n);

/// Row-wise softmax of x + add_mask (mask nullable, same shape).
void softmax_rows(const float* x, const float* add_mask, float* p, int rows, int cols);
/// ds += p * (dp - rowdot(dp, p))
void softmax_bwd_rows(const float* p, const float* dp, float* ds, int rows, int cols);

void layernorm_fwd(const float* x, const float* gamma, const float* beta,
                   float* y, float* mean, float* rstd, int rows, int cols, float eps);
void layernorm_bwd(const float* x, const float* gamma, const float* mean,
                   const float* rstd, const float* dy, float* dx,
                   float* dgamma, float* dbeta, int rows, int cols);

/// d[i, j] = ||x_i - y_j||^2 for x (n x c), y (k x c).
void sqdist_fwd(const float* x, const float* y, float* d, int n, int k, int c);
void sqdist_bwd(const float* x, const float* y, const float* dd, float* dx,
                float* dy, int n, int k, int c);

/// 3x3 same-padding convolution on one (h x w x cin) image.
/// w layout: (cout, 3, 3, cin); y: (h x w x cout).
void conv3x3_fwd(const float* x, const float* w, const float* bias, float* y,
                 int h, int wd, int cin, int cout);
void conv3x3_bwd_x(const float* w, const float* dy, float* dx, int h, int wd,
                   int cin, int cout);
void conv3x3_bwd_w(const float* x, const float* dy, float* dw, float* dbias,
                   int h, int wd, int cin, int cout);

/// y[i, :] = table[ids[i], :]
void gather_rows(const float* table, const int* ids, float* y, int n, int cols);
/// table_grad[ids[i], :] += dy[i, :]; safe with repeated ids.
void scatter_add_rows(float* table_grad, const int* ids, const float* dy, int n, int cols);

/// y[i] = x[idx[i]]. For inverse scatter the index map must be a bijection.
void permute_gather(const float* x, const int64_t* idx, float* y, int64_t n);
/// dx[idx[i]] += dy[i]; idx must not repeat.
void permute_scatter_add(const float* dy, const int64_t* idx, float* dx, int64_t n);

/// Deterministic blockwise sum (double accumulation).
double sum_all(const float* x, int64_t n);

void adamw_update(float* p, const float* g, float* m, float* v, int64_t n,
                  float lr, float beta1, float beta2, float eps,
                  float weight_decay, float bias_c1, float bias_c2);

// Plain serial reference implementations, kept as the test oracle for the
// OpenMP kernels above and used verbatim when mode() == SerialRef.
namespace ref {
void sgemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
           const float* a, const float* b, float beta, float* c);
void ew_add(const float* a, const float* b, float* y, int64_t n);
void ew_sub(const float* a, const float* b, float* y, int64_t n);
void ew_mul(const float* a, const float* b, float* y, int64_t n);
void ew_scale(const float* x, float alpha, float* y, int64_t n);
void ew_axpy(float alpha, const float* x, float* y, int64_t n);
void add_bias_rows(float* x, const float* bias, int rows, int cols);
void sum_rows_add(const float* x, float* out, int rows, int cols);
void gelu_fwd(const float* x, float* y, int64_t n);
void gelu_bwd(const float* x, const float* dy, float* dx, int64_t n);
void sigmoid_fwd(const float* x, float* y, int64_t n);
void sigmoid_bwd(const float* y, const float* dy, float* dx, int64_t n);
void softmax_rows(const float* x, const float* add_mask, float* p, int rows, int cols);
void softmax_bwd_rows(const float* p, const float* dp, float* ds, int rows, int cols);
void layernorm_fwd(const float* x, const float* gamma, const float* beta,
                   float* y, float* mean, float* rstd, int rows, int cols, float eps);
void layernorm_bwd(const float* x, const float* gamma, const float* mean,
                   const float* rstd, const float* dy, float* dx,
                   float* dgamma, float* dbeta, int rows, int cols);
void sqdist_fwd(const float* x, const float* y, float* d, int n, int k, int c);
void sqdist_bwd(const float* x, const float* y, const float* dd, float* dx,
                float* dy, int n, int k, int c);
void conv3x3_fwd(const float* x, const float* w, const float* bias, float* y,
                 int h, int wd, int cin, int cout);
void conv3x3_bwd_x(const float* w, const float* dy, float* dx, int h, int wd,
                   int cin, int cout);
void conv3x3_bwd_w(const float* x, const float* dy, float* dw, float* dbias,
                   int h, int wd, int cin, int cout);
void gather_rows(const float* table, const int* ids, float* y, int n, int cols);
void scatter_add_rows(float* table_grad, const int* ids, const float* dy, int n, int cols);
void permute_gather(const float* x, const int64_t* idx, float* y, int64_t n);
void permute_scatter_add(const float* dy, const int64_t* idx, float* dx, int64_t n);
double sum_all(const float* x, int64_t n);
void adamw_update(float* p, const float* g, float* m, float* v, int64_t n,
                  float lr, float beta1, float beta2, float eps,
                  float weight_decay, float bias_c1, float bias_c2);
}  // namespace ref

}  // namespace vimp::kern
