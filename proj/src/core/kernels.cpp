#include "vimp/core/kernels.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <vector>

// OpenMP kernels. Parallel loops split only independent output elements
// across threads; per-element accumulation order is fixed, so outputs are
// identical for any thread count (and match the serial reference).

namespace vimp::kern {

namespace {
std::atomic<Mode> g_mode{Mode::Parallel};
}

void set_mode(Mode m) { g_mode.store(m); }
Mode mode() { return g_mode.load(); }

namespace {

inline float gelu_scalar(float x) {
  const float c = 0.7978845608028654f;  // sqrt(2/pi)
  float u = c * (x + 0.044715f * x * x * x);
  return 0.5f * x * (1.0f + std::tanh(u));
}

inline float gelu_grad_scalar(float x) {
  const float c = 0.7978845608028654f;
  float x3 = x * x * x;
  float u = c * (x + 0.044715f * x3);
  float t = std::tanh(u);
  float du = c * (1.0f + 3.0f * 0.044715f * x * x);
  return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
}

void sgemm_omp(bool ta, bool tb, int m, int n, int k, float alpha,
               const float* A, const float* B, float beta, float* C) {
  if (!ta && !tb) {
    // A (m x k), B (k x n): i-k-j with a contiguous j inner loop.
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
      float* c = C + (int64_t)i * n;
      if (beta == 0.0f) {
        for (int j = 0; j < n; ++j) c[j] = 0.0f;
      } else if (beta != 1.0f) {
        for (int j = 0; j < n; ++j) c[j] *= beta;
      }
      const float* a = A + (int64_t)i * k;
      for (int kk = 0; kk < k; ++kk) {
        const float av = alpha * a[kk];
        const float* b = B + (int64_t)kk * n;
        for (int j = 0; j < n; ++j) c[j] += av * b[j];
      }
    }
  } else if (!ta && tb) {
    // A (m x k), B (n x k): row-dot-row.
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
      const float* a = A + (int64_t)i * k;
      float* c = C + (int64_t)i * n;
      for (int j = 0; j < n; ++j) {
        const float* b = B + (int64_t)j * k;
        float acc = 0.0f;
        for (int kk = 0; kk < k; ++kk) acc += a[kk] * b[kk];
        c[j] = alpha * acc + (beta == 0.0f ? 0.0f : beta * c[j]);
      }
    }
  } else if (ta && !tb) {
    // A (k x m), B (k x n).
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
      float* c = C + (int64_t)i * n;
      if (beta == 0.0f) {
        for (int j = 0; j < n; ++j) c[j] = 0.0f;
      } else if (beta != 1.0f) {
        for (int j = 0; j < n; ++j) c[j] *= beta;
      }
      for (int kk = 0; kk < k; ++kk) {
        const float av = alpha * A[(int64_t)kk * m + i];
        const float* b = B + (int64_t)kk * n;
        for (int j = 0; j < n; ++j) c[j] += av * b[j];
      }
    }
  } else {
    // A (k x m), B (n x k). Rare; strided.
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
      float* c = C + (int64_t)i * n;
      for (int j = 0; j < n; ++j) {
        float acc = 0.0f;
        for (int kk = 0; kk < k; ++kk) acc += A[(int64_t)kk * m + i] * B[(int64_t)j * k + kk];
        c[j] = alpha * acc + (beta == 0.0f ? 0.0f : beta * c[j]);
      }
    }
  }
}

}  // namespace

void sgemm(bool ta, bool tb, int m, int n, int k, float alpha, const float* a,
           const float* b, float beta, float* c) {
  if (mode() == Mode::SerialRef) {
    ref::sgemm(ta, tb, m, n, k, alpha, a, b, beta, c);
    return;
  }
  sgemm_omp(ta, tb, m, n, k, alpha, a, b, beta, c);
}

#define VIMP_EW_LOOP(expr)                        \
  _Pragma("omp parallel for schedule(static)")    \
  for (int64_t i = 0; i < n; ++i) { expr; }

void ew_add(const float* a, const float* b, float* y, int64_t n) {
  if (mode() == Mode::SerialRef) return ref::ew_add(a, b, y, n);
  VIMP_EW_LOOP(y[i] = a[i] + b[i])
}

void ew_sub(const float* a, const float* b, float* y, int64_t n) {
  if (mode() == Mode::SerialRef) return ref::ew_sub(a, b, y, n);
  VIMP_EW_LOOP(y[i] = a[i] - b[i])
}

void ew_mul(const float* a, const float* b, float* y, int64_t n) {
  if (mode() == Mode::SerialRef) return ref::ew_mul(a, b, y, n);
  VIMP_EW_LOOP(y[i] = a[i] * b[i])
}

void ew_scale(const float* x, float alpha, float* y, int64_t n) {
  if (mode() == Mode::SerialRef) return ref::ew_scale(x, alpha, y, n);
  VIMP_EW_LOOP(y[i] = alpha * x[i])
}

void ew_axpy(float alpha, const float* x, float* y, int64_t n) {
  if (mode() == Mode::SerialRef) return ref::ew_axpy(alpha, x, y, n);
  VIMP_EW_LOOP(y[i] += alpha * x[i])
}

void add_bias_rows(float* x, const float* bias, int rows, int cols) {
  if (mode() == Mode::SerialRef) return ref::add_bias_rows(x, bias, rows, cols);
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    float* xr = x + (int64_t)r * cols;
    for (int c = 0; c < cols; ++c) xr[c] += bias[c];
  }
}

void sum_rows_add(const float* x, float* out, int rows, int cols) {
  if (mode() == Mode::SerialRef) return ref::sum_rows_add(x, out, rows, cols);
  // Parallel over columns so each output element is owned by one thread.
#pragma omp parallel for schedule(static)
  for (int c = 0; c < cols; ++c) {
    float acc = 0.0f;
    for (int r = 0; r < rows; ++r) acc += x[(int64_t)r * cols + c];
    out[c] += acc;
  }
}

void gelu_fwd(const float* x, float* y, int64_t n) {
  if (mode() == Mode::SerialRef) return ref::gelu_fwd(x, y, n);
  VIMP_EW_LOOP(y[i] = gelu_scalar(x[i]))
}

void gelu_bwd(const float* x, const float* dy, float* dx, int64_t n) {
  if (mode() == Mode::SerialRef) return ref::gelu_bwd(x, dy, dx, n);
  VIMP_EW_LOOP(dx[i] += gelu_grad_scalar(x[i]) * dy[i])
}

void sigmoid_fwd(const float* x, float* y, int64_t n) {
  if (mode() == Mode::SerialRef) return ref::sigmoid_fwd(x, y, n);
  VIMP_EW_LOOP(y[i] = 1.0f / (1.0f + std::exp(-x[i])))
}

void sigmoid_bwd(const float* y, const float* dy, float* dx, int64_t n) {
  if (mode() == Mode::SerialRef) return ref::sigmoid_bwd(y, dy, dx, n);
  VIMP_EW_LOOP(dx[i] += y[i] * (1.0f - y[i]) * dy[i])
}

void softmax_rows(const float* x, const float* add_mask, float* p, int rows, int cols) {
  if (mode() == Mode::SerialRef) return ref::softmax_rows(x, add_mask, p, rows, cols);
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const float* xr = x + (int64_t)r * cols;
    const float* mr = add_mask ? add_mask + (int64_t)r * cols : nullptr;
    float* pr = p + (int64_t)r * cols;
    float mx = -INFINITY;
    for (int c = 0; c < cols; ++c) {
      float v = xr[c] + (mr ? mr[c] : 0.0f);
      pr[c] = v;
      if (v > mx) mx = v;
    }
    float den = 0.0f;
    for (int c = 0; c < cols; ++c) {
      pr[c] = std::exp(pr[c] - mx);
      den += pr[c];
    }
    float inv = 1.0f / den;
    for (int c = 0; c < cols; ++c) pr[c] *= inv;
  }
}

void softmax_bwd_rows(const float* p, const float* dp, float* ds, int rows, int cols) {
  if (mode() == Mode::SerialRef) return ref::softmax_bwd_rows(p, dp, ds, rows, cols);
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const float* pr = p + (int64_t)r * cols;
    const float* dpr = dp + (int64_t)r * cols;
    float* dsr = ds + (int64_t)r * cols;
    float dot = 0.0f;
    for (int c = 0; c < cols; ++c) dot += pr[c] * dpr[c];
    for (int c = 0; c < cols; ++c) dsr[c] += pr[c] * (dpr[c] - dot);
  }
}

void layernorm_fwd(const float* x, const float* gamma, const float* beta,
                   float* y, float* mean, float* rstd, int rows, int cols, float eps) {
  if (mode() == Mode::SerialRef)
    return ref::layernorm_fwd(x, gamma, beta, y, mean, rstd, rows, cols, eps);
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const float* xr = x + (int64_t)r * cols;
    float* yr = y + (int64_t)r * cols;
    float mu = 0.0f;
    for (int c = 0; c < cols; ++c) mu += xr[c];
    mu /= (float)cols;
    float var = 0.0f;
    for (int c = 0; c < cols; ++c) {
      float d = xr[c] - mu;
      var += d * d;
    }
    var /= (float)cols;
    float rs = 1.0f / std::sqrt(var + eps);
    mean[r] = mu;
    rstd[r] = rs;
    for (int c = 0; c < cols; ++c) yr[c] = (xr[c] - mu) * rs * gamma[c] + beta[c];
  }
}

void layernorm_bwd(const float* x, const float* gamma, const float* mean,
                   const float* rstd, const float* dy, float* dx,
                   float* dgamma, float* dbeta, int rows, int cols) {
  if (mode() == Mode::SerialRef)
    return ref::layernorm_bwd(x, gamma, mean, rstd, dy, dx, dgamma, dbeta, rows, cols);
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const float* xr = x + (int64_t)r * cols;
    const float* dyr = dy + (int64_t)r * cols;
    float* dxr = dx + (int64_t)r * cols;
    float mu = mean[r], rs = rstd[r];
    float s1 = 0.0f, s2 = 0.0f;
    for (int c = 0; c < cols; ++c) {
      float xh = (xr[c] - mu) * rs;
      float g = dyr[c] * gamma[c];
      s1 += g;
      s2 += g * xh;
    }
    s1 /= (float)cols;
    s2 /= (float)cols;
    for (int c = 0; c < cols; ++c) {
      float xh = (xr[c] - mu) * rs;
      float g = dyr[c] * gamma[c];
      dxr[c] += rs * (g - s1 - xh * s2);
    }
  }
  // Parameter grads: one thread per column.
#pragma omp parallel for schedule(static)
  for (int c = 0; c < cols; ++c) {
    float dg = 0.0f, db = 0.0f;
    for (int r = 0; r < rows; ++r) {
      float xh = (x[(int64_t)r * cols + c] - mean[r]) * rstd[r];
      dg += dy[(int64_t)r * cols + c] * xh;
      db += dy[(int64_t)r * cols + c];
    }
    dgamma[c] += dg;
    dbeta[c] += db;
  }
}

void sqdist_fwd(const float* x, const float* y, float* d, int n, int k, int c) {
  if (mode() == Mode::SerialRef) return ref::sqdist_fwd(x, y, d, n, k, c);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) {
    const float* xi = x + (int64_t)i * c;
    float* di = d + (int64_t)i * k;
    for (int j = 0; j < k; ++j) {
      const float* yj = y + (int64_t)j * c;
      float acc = 0.0f;
      for (int t = 0; t < c; ++t) {
        float dv = xi[t] - yj[t];
        acc += dv * dv;
      }
      di[j] = acc;
    }
  }
}

void sqdist_bwd(const float* x, const float* y, const float* dd, float* dx,
                float* dy, int n, int k, int c) {
  if (mode() == Mode::SerialRef) return ref::sqdist_bwd(x, y, dd, dx, dy, n, k, c);
  if (dx) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
      const float* xi = x + (int64_t)i * c;
      float* dxi = dx + (int64_t)i * c;
      for (int j = 0; j < k; ++j) {
        const float g = 2.0f * dd[(int64_t)i * k + j];
        const float* yj = y + (int64_t)j * c;
        for (int t = 0; t < c; ++t) dxi[t] += g * (xi[t] - yj[t]);
      }
    }
  }
  if (dy) {
#pragma omp parallel for schedule(static)
    for (int j = 0; j < k; ++j) {
      const float* yj = y + (int64_t)j * c;
      float* dyj = dy + (int64_t)j * c;
      for (int i = 0; i < n; ++i) {
        const float g = 2.0f * dd[(int64_t)i * k + j];
        const float* xi = x + (int64_t)i * c;
        for (int t = 0; t < c; ++t) dyj[t] += g * (yj[t] - xi[t]);
      }
    }
  }
}

void conv3x3_fwd(const float* x, const float* w, const float* bias, float* y,
                 int h, int wd, int cin, int cout) {
  if (mode() == Mode::SerialRef) return ref::conv3x3_fwd(x, w, bias, y, h, wd, cin, cout);
#pragma omp parallel for schedule(static)
  for (int iy = 0; iy < h; ++iy) {
    for (int ix = 0; ix < wd; ++ix) {
      float* yp = y + ((int64_t)iy * wd + ix) * cout;
      for (int co = 0; co < cout; ++co) yp[co] = bias ? bias[co] : 0.0f;
      for (int ky = 0; ky < 3; ++ky) {
        int sy = iy + ky - 1;
        if (sy < 0 || sy >= h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          int sx = ix + kx - 1;
          if (sx < 0 || sx >= wd) continue;
          const float* xp = x + ((int64_t)sy * wd + sx) * cin;
          for (int co = 0; co < cout; ++co) {
            const float* wp = w + (((int64_t)co * 3 + ky) * 3 + kx) * cin;
            float acc = 0.0f;
            for (int ci = 0; ci < cin; ++ci) acc += xp[ci] * wp[ci];
            yp[co] += acc;
          }
        }
      }
    }
  }
}

void conv3x3_bwd_x(const float* w, const float* dy, float* dx, int h, int wd,
                   int cin, int cout) {
  if (mode() == Mode::SerialRef) return ref::conv3x3_bwd_x(w, dy, dx, h, wd, cin, cout);
#pragma omp parallel for schedule(static)
  for (int iy = 0; iy < h; ++iy) {
    for (int ix = 0; ix < wd; ++ix) {
      float* dxp = dx + ((int64_t)iy * wd + ix) * cin;
      for (int ky = 0; ky < 3; ++ky) {
        int oy = iy - (ky - 1);
        if (oy < 0 || oy >= h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          int ox = ix - (kx - 1);
          if (ox < 0 || ox >= wd) continue;
          const float* dyp = dy + ((int64_t)oy * wd + ox) * cout;
          for (int co = 0; co < cout; ++co) {
            const float* wp = w + (((int64_t)co * 3 + ky) * 3 + kx) * cin;
            const float g = dyp[co];
            for (int ci = 0; ci < cin; ++ci) dxp[ci] += g * wp[ci];
          }
        }
      }
    }
  }
}

void conv3x3_bwd_w(const float* x, const float* dy, float* dw, float* dbias,
                   int h, int wd, int cin, int cout) {
  if (mode() == Mode::SerialRef) return ref::conv3x3_bwd_w(x, dy, dw, dbias, h, wd, cin, cout);
#pragma omp parallel for schedule(static)
  for (int co = 0; co < cout; ++co) {
    float db = 0.0f;
    for (int iy = 0; iy < h; ++iy) {
      for (int ix = 0; ix < wd; ++ix) {
        const float g = dy[((int64_t)iy * wd + ix) * cout + co];
        db += g;
        for (int ky = 0; ky < 3; ++ky) {
          int sy = iy + ky - 1;
          if (sy < 0 || sy >= h) continue;
          for (int kx = 0; kx < 3; ++kx) {
            int sx = ix + kx - 1;
            if (sx < 0 || sx >= wd) continue;
            const float* xp = x + ((int64_t)sy * wd + sx) * cin;
            float* dwp = dw + (((int64_t)co * 3 + ky) * 3 + kx) * cin;
            for (int ci = 0; ci < cin; ++ci) dwp[ci] += g * xp[ci];
          }
        }
      }
    }
    if (dbias) dbias[co] += db;
  }
}

void gather_rows(const float* table, const int* ids, float* y, int n, int cols) {
  if (mode() == Mode::SerialRef) return ref::gather_rows(table, ids, y, n, cols);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i)
    std::memcpy(y + (int64_t)i * cols, table + (int64_t)ids[i] * cols,
                sizeof(float) * (size_t)cols);
}

void scatter_add_rows(float* table_grad, const int* ids, const float* dy, int n, int cols) {
  if (mode() == Mode::SerialRef) return ref::scatter_add_rows(table_grad, ids, dy, n, cols);
  // ids may repeat: parallelize over columns, walk rows in order.
#pragma omp parallel for schedule(static)
  for (int c = 0; c < cols; ++c) {
    for (int i = 0; i < n; ++i)
      table_grad[(int64_t)ids[i] * cols + c] += dy[(int64_t)i * cols + c];
  }
}

void permute_gather(const float* x, const int64_t* idx, float* y, int64_t n) {
  if (mode() == Mode::SerialRef) return ref::permute_gather(x, idx, y, n);
  VIMP_EW_LOOP(y[i] = x[idx[i]])
}

void permute_scatter_add(const float* dy, const int64_t* idx, float* dx, int64_t n) {
  if (mode() == Mode::SerialRef) return ref::permute_scatter_add(dy, idx, dx, n);
  VIMP_EW_LOOP(dx[idx[i]] += dy[i])
}

double sum_all(const float* x, int64_t n) {
  if (mode() == Mode::SerialRef) return ref::sum_all(x, n);
  constexpr int64_t kBlock = 4096;
  int64_t nblocks = (n + kBlock - 1) / kBlock;
  std::vector<double> partial(nblocks, 0.0);
#pragma omp parallel for schedule(static)
  for (int64_t b = 0; b < nblocks; ++b) {
    double acc = 0.0;
    int64_t end = std::min(n, (b + 1) * kBlock);
    for (int64_t i = b * kBlock; i < end; ++i) acc += x[i];
    partial[b] = acc;
  }
  double total = 0.0;
  for (double v : partial) total += v;
  return total;
}

void adamw_update(float* p, const float* g, float* m, float* v, int64_t n,
                  float lr, float beta1, float beta2, float eps,
                  float weight_decay, float bias_c1, float bias_c2) {
  if (mode() == Mode::SerialRef)
    return ref::adamw_update(p, g, m, v, n, lr, beta1, beta2, eps, weight_decay,
                             bias_c1, bias_c2);
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) {
    m[i] = beta1 * m[i] + (1.0f - beta1) * g[i];
    v[i] = beta2 * v[i] + (1.0f - beta2) * g[i] * g[i];
    float mhat = m[i] / bias_c1;
    float vhat = v[i] / bias_c2;
    p[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p[i]);
  }
}

#undef VIMP_EW_LOOP

}  // namespace vimp::kern
