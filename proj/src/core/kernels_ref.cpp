#include <cmath>
#include <cstring>

#include "vimp/core/kernels.hpp"

// Serial reference kernels: straightforward textbook loops, no pragmas.
// These are the oracle the OpenMP kernels are tested against.

namespace vimp::kern::ref {

void sgemm(bool ta, bool tb, int m, int n, int k, float alpha, const float* a,
           const float* b, float beta, float* c) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      float acc = 0.0f;
      for (int kk = 0; kk < k; ++kk) {
        float av = ta ? a[(int64_t)kk * m + i] : a[(int64_t)i * k + kk];
        float bv = tb ? b[(int64_t)j * k + kk] : b[(int64_t)kk * n + j];
        acc += av * bv;
      }
      int64_t ci = (int64_t)i * n + j;
      c[ci] = alpha * acc + (beta == 0.0f ? 0.0f : beta * c[ci]);
    }
  }
}

void ew_add(const float* a, const float* b, float* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
}
void ew_sub(const float* a, const float* b, float* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = a[i] - b[i];
}
void ew_mul(const float* a, const float* b, float* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = a[i] * b[i];
}
void ew_scale(const float* x, float alpha, float* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = alpha * x[i];
}
void ew_axpy(float alpha, const float* x, float* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void add_bias_rows(float* x, const float* bias, int rows, int cols) {
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) x[(int64_t)r * cols + c] += bias[c];
}

void sum_rows_add(const float* x, float* out, int rows, int cols) {
  for (int c = 0; c < cols; ++c) {
    float acc = 0.0f;
    for (int r = 0; r < rows; ++r) acc += x[(int64_t)r * cols + c];
    out[c] += acc;
  }
}

namespace {
inline float gelu_scalar(float x) {
  const float c = 0.7978845608028654f;
  float u = c * (x + 0.044715f * x * x * x);
  return 0.5f * x * (1.0f + std::tanh(u));
}
inline float gelu_grad_scalar(float x) {
  const float c = 0.7978845608028654f;
  float u = c * (x + 0.044715f * x * x * x);
  float t = std::tanh(u);
  float du = c * (1.0f + 3.0f * 0.044715f * x * x);
  return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
}
}  // namespace

void gelu_fwd(const float* x, float* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = gelu_scalar(x[i]);
}
void gelu_bwd(const float* x, const float* dy, float* dx, int64_t n) {
  for (int64_t i = 0; i < n; ++i) dx[i] += gelu_grad_scalar(x[i]) * dy[i];
}
void sigmoid_fwd(const float* x, float* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = 1.0f / (1.0f + std::exp(-x[i]));
}
void sigmoid_bwd(const float* y, const float* dy, float* dx, int64_t n) {
  for (int64_t i = 0; i < n; ++i) dx[i] += y[i] * (1.0f - y[i]) * dy[i];
}

void softmax_rows(const float* x, const float* add_mask, float* p, int rows, int cols) {
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
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) {
      float acc = 0.0f;
      for (int t = 0; t < c; ++t) {
        float dv = x[(int64_t)i * c + t] - y[(int64_t)j * c + t];
        acc += dv * dv;
      }
      d[(int64_t)i * k + j] = acc;
    }
}

void sqdist_bwd(const float* x, const float* y, const float* dd, float* dx,
                float* dy, int n, int k, int c) {
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) {
      float g = 2.0f * dd[(int64_t)i * k + j];
      for (int t = 0; t < c; ++t) {
        float diff = x[(int64_t)i * c + t] - y[(int64_t)j * c + t];
        if (dx) dx[(int64_t)i * c + t] += g * diff;
        if (dy) dy[(int64_t)j * c + t] -= g * diff;
      }
    }
}

void conv3x3_fwd(const float* x, const float* w, const float* bias, float* y,
                 int h, int wd, int cin, int cout) {
  for (int iy = 0; iy < h; ++iy)
    for (int ix = 0; ix < wd; ++ix)
      for (int co = 0; co < cout; ++co) {
        float acc = bias ? bias[co] : 0.0f;
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            int sy = iy + ky - 1, sx = ix + kx - 1;
            if (sy < 0 || sy >= h || sx < 0 || sx >= wd) continue;
            for (int ci = 0; ci < cin; ++ci)
              acc += x[((int64_t)sy * wd + sx) * cin + ci] *
                     w[(((int64_t)co * 3 + ky) * 3 + kx) * cin + ci];
          }
        y[((int64_t)iy * wd + ix) * cout + co] = acc;
      }
}

void conv3x3_bwd_x(const float* w, const float* dy, float* dx, int h, int wd,
                   int cin, int cout) {
  for (int iy = 0; iy < h; ++iy)
    for (int ix = 0; ix < wd; ++ix)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          int oy = iy - (ky - 1), ox = ix - (kx - 1);
          if (oy < 0 || oy >= h || ox < 0 || ox >= wd) continue;
          for (int co = 0; co < cout; ++co) {
            float g = dy[((int64_t)oy * wd + ox) * cout + co];
            for (int ci = 0; ci < cin; ++ci)
              dx[((int64_t)iy * wd + ix) * cin + ci] +=
                  g * w[(((int64_t)co * 3 + ky) * 3 + kx) * cin + ci];
          }
        }
}

void conv3x3_bwd_w(const float* x, const float* dy, float* dw, float* dbias,
                   int h, int wd, int cin, int cout) {
  for (int co = 0; co < cout; ++co) {
    float db = 0.0f;
    for (int iy = 0; iy < h; ++iy)
      for (int ix = 0; ix < wd; ++ix) {
        float g = dy[((int64_t)iy * wd + ix) * cout + co];
        db += g;
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            int sy = iy + ky - 1, sx = ix + kx - 1;
            if (sy < 0 || sy >= h || sx < 0 || sx >= wd) continue;
            for (int ci = 0; ci < cin; ++ci)
              dw[(((int64_t)co * 3 + ky) * 3 + kx) * cin + ci] +=
                  g * x[((int64_t)sy * wd + sx) * cin + ci];
          }
      }
    if (dbias) dbias[co] += db;
  }
}

void gather_rows(const float* table, const int* ids, float* y, int n, int cols) {
  for (int i = 0; i < n; ++i)
    std::memcpy(y + (int64_t)i * cols, table + (int64_t)ids[i] * cols,
                sizeof(float) * (size_t)cols);
}

void scatter_add_rows(float* table_grad, const int* ids, const float* dy, int n, int cols) {
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < cols; ++c)
      table_grad[(int64_t)ids[i] * cols + c] += dy[(int64_t)i * cols + c];
}

void permute_gather(const float* x, const int64_t* idx, float* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = x[idx[i]];
}

void permute_scatter_add(const float* dy, const int64_t* idx, float* dx, int64_t n) {
  for (int64_t i = 0; i < n; ++i) dx[idx[i]] += dy[i];
}

double sum_all(const float* x, int64_t n) {
  constexpr int64_t kBlock = 4096;
  double total = 0.0;
  for (int64_t b = 0; b * kBlock < n; ++b) {
    double acc = 0.0;
    int64_t end = (b + 1) * kBlock < n ? (b + 1) * kBlock : n;
    for (int64_t i = b * kBlock; i < end; ++i) acc += x[i];
    total += acc;
  }
  return total;
}

void adamw_update(float* p, const float* g, float* m, float* v, int64_t n,
                  float lr, float beta1, float beta2, float eps,
                  float weight_decay, float bias_c1, float bias_c2) {
  for (int64_t i = 0; i < n; ++i) {
    m[i] = beta1 * m[i] + (1.0f - beta1) * g[i];
    v[i] = beta2 * v[i] + (1.0f - beta2) * g[i] * g[i];
    float mhat = m[i] / bias_c1;
    float vhat = v[i] / bias_c2;
    p[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p[i]);
  }
}

}  // namespace vimp::kern::ref
