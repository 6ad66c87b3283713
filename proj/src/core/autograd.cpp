#include "vimp/core/autograd.hpp"

#include <atomic>
#include <cmath>
#include <cstring>

#include "vimp/core/kernels.hpp"

namespace vimp::ag {

namespace k = vimp::kern;

Var::Var(Tensor value, bool requires_grad) {
  node_ = std::make_shared<Node>();
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
  node_->op = requires_grad ? "param" : "const";
}

Var constant(Tensor t) { return Var(std::move(t), false); }
Var param(Tensor t) { return Var(std::move(t), true); }

namespace {

NodePtr make_node(Tensor value, std::vector<NodePtr> parents, const char* op) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  n->op = op;
  for (auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  return n;
}

// Splits a shape into (rows, cols) treating the last axis as columns.
void as_rows(const Tensor& t, int64_t& rows, int& cols) {
  VIMP_CHECK(t.ndim() >= 1, "as_rows: rank-0 tensor");
  cols = t.dim(-1);
  rows = cols ? t.numel() / cols : 0;
}

// Splits a shape into (batch, rows, cols) around the second-to-last axis.
void as_brc(const Tensor& t, int64_t& b, int& r, int& c) {
  VIMP_CHECK(t.ndim() >= 2, "as_brc: need rank >= 2");
  c = t.dim(-1);
  r = t.dim(-2);
  b = 1;
  for (int i = 0; i < t.ndim() - 2; ++i) b *= t.dim(i);
}

}  // namespace

void backward(const Var& root) {
  VIMP_CHECK(root.defined() && root.val().numel() == 1,
             "backward: root must be a defined scalar");
  static std::atomic<uint64_t> g_epoch{1};
  uint64_t epoch = g_epoch.fetch_add(1);

  // Iterative post-order DFS over grad-requiring nodes.
  std::vector<Node*> order;
  std::vector<std::pair<Node*, size_t>> stack;
  Node* rn = root.node().get();
  if (!rn->requires_grad) return;
  rn->epoch = epoch;
  stack.push_back({rn, 0});
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (p->requires_grad && p->epoch != epoch) {
        p->epoch = epoch;
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  rn->ensure_grad().fill(1.0f);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backprop) (*it)->backprop();
  }
}

// ---------------------------------------------------------------------------

Var matmul(Var x, Var w) {
  int64_t rows;
  int d;
  as_rows(x.val(), rows, d);
  VIMP_CHECK(w.val().ndim() == 2 && w.dim(0) == d,
             "matmul: weight shape mismatch " + shape_str(w.shape()));
  int e = w.dim(1);
  std::vector<int> oshape = x.shape();
  oshape.back() = e;
  Tensor out(oshape);
  k::sgemm(false, false, (int)rows, e, d, 1.0f, x.val().data(), w.val().data(),
           0.0f, out.data());
  auto n = make_node(std::move(out), {x.node(), w.node()}, "matmul");
  if (n->requires_grad) {
    Node* self = n.get();
    NodePtr xn = x.node(), wn = w.node();
    n->backprop = [self, xn, wn, rows, d, e]() {
      const float* g = self->grad.data();
      if (xn->requires_grad)
        k::sgemm(false, true, (int)rows, d, e, 1.0f, g, wn->value.data(), 1.0f,
                 xn->ensure_grad().data());
      if (wn->requires_grad)
        k::sgemm(true, false, d, e, (int)rows, 1.0f, xn->value.data(), g, 1.0f,
                 wn->ensure_grad().data());
    };
  }
  return Var::wrap(n);
}

Var linear(Var x, Var w, Var b) {
  Var y = matmul(x, w);
  return add_bias(y, b);
}

Var add(Var a, Var b) {
  VIMP_CHECK(a.val().same_shape(b.val()), "add: shape mismatch");
  Tensor out(a.shape());
  k::ew_add(a.val().data(), b.val().data(), out.data(), out.numel());
  auto n = make_node(std::move(out), {a.node(), b.node()}, "add");
  if (n->requires_grad) {
    Node* self = n.get();
    NodePtr an = a.node(), bn = b.node();
    n->backprop = [self, an, bn]() {
      if (an->requires_grad)
        k::ew_axpy(1.0f, self->grad.data(), an->ensure_grad().data(), self->grad.numel());
      if (bn->requires_grad)
        k::ew_axpy(1.0f, self->grad.data(), bn->ensure_grad().data(), self->grad.numel());
    };
  }
  return Var::wrap(n);
}

Var sub(Var a, Var b) { return add_scaled(a, b, -1.0f); }

Var add_scaled(Var a, Var b, float alpha) {
  VIMP_CHECK(a.val().same_shape(b.val()), "add_scaled: shape mismatch");
  Tensor out = a.val().clone();
  k::ew_axpy(alpha, b.val().data(), out.data(), out.numel());
  auto n = make_node(std::move(out), {a.node(), b.node()}, "add_scaled");
  if (n->requires_grad) {
    Node* self = n.get();
    NodePtr an = a.node(), bn = b.node();
    n->backprop = [self, an, bn, alpha]() {
      if (an->requires_grad)
        k::ew_axpy(1.0f, self->grad.data(), an->ensure_grad().data(), self->grad.numel());
      if (bn->requires_grad)
        k::ew_axpy(alpha, self->grad.data(), bn->ensure_grad().data(), self->grad.numel());
    };
  }
  return Var::wrap(n);
}

Var mul(Var a, Var b) {
  VIMP_CHECK(a.val().same_shape(b.val()), "mul: shape mismatch");
  Tensor out(a.shape());
  k::ew_mul(a.val().data(), b.val().data(), out.data(), out.numel());
  auto n = make_node(std::move(out), {a.node(), b.node()}, "mul");
  if (n->requires_grad) {
    Node* self = n.get();
    NodePtr an = a.node(), bn = b.node();
    n->backprop = [self, an, bn]() {
      int64_t sz = self->grad.numel();
      Tensor tmp(self->grad.shape());
      if (an->requires_grad) {
        k::ew_mul(self->grad.data(), bn->value.data(), tmp.data(), sz);
        k::ew_axpy(1.0f, tmp.data(), an->ensure_grad().data(), sz);
      }
      if (bn->requires_grad) {
        k::ew_mul(self->grad.data(), an->value.data(), tmp.data(), sz);
        k::ew_axpy(1.0f, tmp.data(), bn->ensure_grad().data(), sz);
      }
    };
  }
  return Var::wrap(n);
}

Var scale(Var a, float s) {
  Tensor out(a.shape());
  k::ew_scale(a.val().data(), s, out.data(), out.numel());
  auto n = make_node(std::move(out), {a.node()}, "scale");
  if (n->requires_grad) {
    Node* self = n.get();
    NodePtr an = a.node();
    n->backprop = [self, an, s]() {
      k::ew_axpy(s, self->grad.data(), an->ensure_grad().data(), self->grad.numel());
    };
  }
  return Var::wrap(n);
}

Var add_bias(Var x, Var b) {
  int64_t rows;
  int cols;
  as_rows(x.val(), rows, cols);
  VIMP_CHECK(b.val().numel() == cols, "add_bias: bias size mismatch");
  Tensor out = x.val().clone();
  k::add_bias_rows(out.data(), b.val().data(), (int)rows, cols);
  auto n = make_node(std::move(out), {x.node(), b.node()}, "add_bias");
  if (n->requires_grad) {
    Node* self = n.get();
    NodePtr xn = x.node(), bn = b.node();
    n->backprop = [self, xn, bn, rows, cols]() {
      if (xn->requires_grad)
        k::ew_axpy(1.0f, self->grad.data(), xn->ensure_grad().data(), self->grad.numel());
      if (bn->requires_grad)
        k::sum_rows_add(self->grad.data(), bn->ensure_grad().data(), (int)rows, cols);
    };
  }
  return Var::wrap(n);
}

Var gelu(Var x) {
  Tensor out(x.shape());
  k::gelu_fwd(x.val().data(), out.data(), out.numel());
  auto n = make_node(std::move(out), {x.node()}, "gelu");
  if (n->requires_grad) {
    Node* self = n.get();
    NodePtr xn = x.node();
    n->backprop = [self, xn]() {
      k::gelu_bwd(xn->value.data(), self->grad.data(), xn->ensure_grad().data(),
                  self->grad.numel());
    };
  }
  return Var::wrap(n);
}

Var sigmoid(Var x) {
  Tensor out(x.shape());
  k::sigmoid_fwd(x.val().data(), out.data(), out.numel());
  auto n = make_node(std::move(out), {x.node()}, "sigmoid");
  if (n->requires_grad) {
    Node* self = n.get();
    NodePtr xn = x.node();
    n->backprop = [self, xn]() {
      k::sigmoid_bwd(self->value.data(), self->grad.data(), xn->ensure_grad().data(),
                     self->grad.numel());
    };
  }
  return Var::wrap(n);
}

Var layer_norm(Var x, Var gamma, Var beta, float eps) {
  int64_t rows;
  int cols;
  as_rows(x.val(), rows, cols);
  VIMP_CHECK(gamma.val().numel() == cols && beta.val().numel() == cols,
             "layer_norm: parameter size mismatch");
  Tensor out(x.shape());
  Tensor mean({(int)rows}), rstd({(int)rows});
  k::layernorm_fwd(x.val().data(), gamma.val().data(), beta.val().data(),
                   out.data(), mean.data(), rstd.data(), (int)rows, cols, eps);
  auto n = make_node(std::move(out), {x.node(), gamma.node(), beta.node()}, "layer_norm");
  if (n->requires_grad) {
    Node* self = n.get();
    NodePtr xn = x.node(), gn = gamma.node(), bn = beta.node();
    n->backprop = [self, xn, gn, bn, mean, rstd, rows, cols]() {
      // Parameter and input grads computed in one pass; dx written only
      // when the input participates in the graph.
      Tensor dx_sink;
      float* dx = nullptr;
      if (xn->requires_grad) {
        dx = xn->ensure_grad().data();
      } else {
        dx_sink = Tensor::zeros(xn->value.shape());
        dx = dx_sink.data();
      }
      k::layernorm_bwd(xn->value.data(), gn->value.data(), mean.data(),
                       rstd.data(), self->grad.data(), dx,
                       gn->ensure_grad().data(), bn->ensure_grad().data(),
                       (int)rows, cols);
    };
  }
  return Var::wrap(n);
}

Var attention(Var q, Var kk, Var v, const Tensor& mask, int heads) {
  int64_t b;
  int lq, d;
  as_brc(q.val(), b, lq, d);
  int64_t bk;
  int lk, dk;
  as_brc(kk.val(), bk, lk, dk);
  VIMP_CHECK(b == bk && d == dk && kk.val().same_shape(v.val()),
             "attention: shape mismatch");
  VIMP_CHECK(d % heads == 0, "attention: heads must divide model dim");
  if (mask.defined())
    VIMP_CHECK(mask.dim(0) == lq && mask.dim(1) == lk, "attention: mask shape");
  const int dh = d / heads;
  const float sc = 1.0f / std::sqrt((float)dh);

  Tensor out(q.shape());
  Tensor probs({(int)(b * heads), lq, lk});
  std::vector<float> qh((size_t)lq * dh), kh((size_t)lk * dh), vh((size_t)lk * dh);
  std::vector<float> s((size_t)lq * lk), oh((size_t)lq * dh);

  auto copy_head = [dh, d](const float* src, float* dst, int len, int h) {
    for (int i = 0; i < len; ++i)
      std::memcpy(dst + (size_t)i * dh, src + (size_t)i * d + (size_t)h * dh,
                  sizeof(float) * (size_t)dh);
  };

  for (int64_t bi = 0; bi < b; ++bi) {
    const float* qb = q.val().data() + bi * lq * d;
    const float* kb = kk.val().data() + bi * lk * d;
    const float* vb = v.val().data() + bi * lk * d;
    float* ob = out.data() + bi * lq * d;
    for (int h = 0; h < heads; ++h) {
      copy_head(qb, qh.data(), lq, h);
      copy_head(kb, kh.data(), lk, h);
      copy_head(vb, vh.data(), lk, h);
      k::sgemm(false, true, lq, lk, dh, sc, qh.data(), kh.data(), 0.0f, s.data());
      float* p = probs.data() + ((bi * heads) + h) * (int64_t)lq * lk;
      k::softmax_rows(s.data(), mask.defined() ? mask.data() : nullptr, p, lq, lk);
      k::sgemm(false, false, lq, dh, lk, 1.0f, p, vh.data(), 0.0f, oh.data());
      for (int i = 0; i < lq; ++i)
        std::memcpy(ob + (size_t)i * d + (size_t)h * dh, oh.data() + (size_t)i * dh,
                    sizeof(float) * (size_t)dh);
    }
  }

  auto n = make_node(std::move(out), {q.node(), kk.node(), v.node()}, "attention");
  if (n->requires_grad) {
    Node* self = n.get();
    NodePtr qn = q.node(), knode = kk.node(), vn = v.node();
    n->backprop = [self, qn, knode, vn, probs, b, lq, lk, d, dh, heads, sc]() {
      std::vector<float> qh((size_t)lq * dh), kh((size_t)lk * dh), vh((size_t)lk * dh);
      std::vector<float> doh((size_t)lq * dh), dp((size_t)lq * lk), ds((size_t)lq * lk);
      std::vector<float> dqh((size_t)lq * dh), dkh((size_t)lk * dh), dvh((size_t)lk * dh);
      Tensor& dq = qn->ensure_grad();
      Tensor& dk = knode->ensure_grad();
      Tensor& dv = vn->ensure_grad();
      auto copy_head = [dh, d](const float* src, float* dst, int len, int h) {
        for (int i = 0; i < len; ++i)
          std::memcpy(dst + (size_t)i * dh, src + (size_t)i * d + (size_t)h * dh,
                      sizeof(float) * (size_t)dh);
      };
      auto add_head = [dh, d](const float* src, float* dst, int len, int h) {
        for (int i = 0; i < len; ++i)
          for (int t = 0; t < dh; ++t)
            dst[(size_t)i * d + (size_t)h * dh + t] += src[(size_t)i * dh + t];
      };
      for (int64_t bi = 0; bi < b; ++bi) {
        const float* qb = qn->value.data() + bi * lq * d;
        const float* kb = knode->value.data() + bi * lk * d;
        const float* vb = vn->value.data() + bi * lk * d;
        const float* gb = self->grad.data() + bi * lq * d;
        for (int h = 0; h < heads; ++h) {
          copy_head(qb, qh.data(), lq, h);
          copy_head(kb, kh.data(), lk, h);
          copy_head(vb, vh.data(), lk, h);
          copy_head(gb, doh.data(), lq, h);
          const float* p = probs.data() + ((bi * heads) + h) * (int64_t)lq * lk;
          // dV = P^T dO
          k::sgemm(true, false, lk, dh, lq, 1.0f, p, doh.data(), 0.0f, dvh.data());
          // dP = dO V^T
          k::sgemm(false, true, lq, lk, dh, 1.0f, doh.data(), vh.data(), 0.0f, dp.data());
          std::fill(ds.begin(), ds.end(), 0.0f);
          k::softmax_bwd_rows(p, dp.data(), ds.data(), lq, lk);
          // dQ = sc * dS K ; dK = sc * dS^T Q
          k::sgemm(false, false, lq, dh, lk, sc, ds.data(), kh.data(), 0.0f, dqh.data());
          k::sgemm(true, false, lk, dh, lq, sc, ds.data(), qh.data(), 0.0f, dkh.data());
          add_head(dqh.data(), dq.data() + bi * lq * d, lq, h);
          add_head(dkh.data(), dk.data() + bi * lk * d, lk, h);
          add_head(dvh.data(), dv.data() + bi * lk * d, lk, h);
        }
      }
    };
  }
  return Var::wrap(n);
}

Var rows(Var x, int r0, int r1) {
  int64_t b;
  int l, c;
  as_brc(x.val(), b, l, c);
  VIMP_CHECK(0 <= r0 && r0 <= r1 && r1 <= l, "rows: bad range");
  int nl = r1 - r0;
  std::vector<int> oshape = x.shape();
  oshape[oshape.size() - 2] = nl;
  Tensor out(oshape);
  for (int64_t bi = 0; bi < b; ++bi)
    std::memcpy(out.data() + bi * nl * c,
                x.val().data() + (bi * l + r0) * (int64_t)c,
                sizeof(float) * (size_t)nl * c);
  auto n = make_node(std::move(out), {x.node()}, "rows");
  if (n->requires_grad) {
    Node* self = n.get();
    NodePtr xn = x.node();
    n->backprop = [self, xn, b, l, c, r0, nl]() {
      Tensor& dx = xn->ensure_grad();
      for (int64_t bi = 0; bi < b; ++bi)
        k::ew_axpy(1.0f, self->grad.data() + bi * nl * c,
                   dx.data() + (bi * l + r0) * (int64_t)c, (int64_t)nl * c);
    };
  }
  return Var::wrap(n);
}

Var concat_rows(const std::vector<Var>& xs) {
  VIMP_CHECK(!xs.empty(), "concat_rows: empty input");
  int64_t b;
  int l0, c;
  as_brc(xs[0].val(), b, l0, c);
  int total = 0;
  for (const auto& x : xs) {
    int64_t bb;
    int li, ci;
    as_brc(x.val(), bb, li, ci);
    VIMP_CHECK(bb == b && ci == c, "concat_rows: shape mismatch");
    total += li;
  }
  std::vector<int> oshape = xs[0].shape();
  oshape[oshape.size() - 2] = total;
  Tensor out(oshape);
  int off = 0;
  std::vector<NodePtr> parents;
  std::vector<int> lens, offs;
  for (const auto& x : xs) {
    int64_t bb;
    int li, ci;
    as_brc(x.val(), bb, li, ci);
    for (int64_t bi = 0; bi < b; ++bi)
      std::memcpy(out.data() + (bi * total + off) * (int64_t)c,
                  x.val().data() + bi * li * c, sizeof(float) * (size_t)li * c);
    parents.push_back(x.node());
    lens.push_back(li);
    offs.push_back(off);
    off += li;
  }
  auto n = make_node(std::move(out), std::move(parents), "concat_rows");
  if (n->requires_grad) {
    Node* self = n.get();
    n->backprop = [self, b, c, total, lens, offs]() {
      for (size_t i = 0; i < self->parents.size(); ++i) {
        Node* p = self->parents[i].get();
        if (!p->requires_grad) continue;
        Tensor& dp = p->ensure_grad();
        for (int64_t bi = 0; bi < b; ++bi)
          k::ew_axpy(1.0f, self->grad.data() + (bi * total + offs[i]) * (int64_t)c,
                     dp.data() + bi * lens[i] * (int64_t)c, (int64_t)lens[i] * c);
      }
    };
  }
  return Var::wrap(n);
}

Var gather_rows(Var x, std::vector<int> ids) {
  VIMP_CHECK(x.val().ndim() == 2, "gather_rows: need 2-D table");
  int cols = x.dim(1);
  int rows_n = (int)ids.size();
  for (int id : ids)
    VIMP_CHECK(id >= 0 && id < x.dim(0), "gather_rows: id out of range");
  Tensor out({rows_n, cols});
  k::gather_rows(x.val().data(), ids.data(), out.data(), rows_n, cols);
  auto n = make_node(std::move(out), {x.node()}, "gather_rows");
  if (n->requires_grad) {
    Node* self = n.get();
    NodePtr xn = x.node();
    auto ids_keep = std::make_shared<std::vector<int>>(std::move(ids));
    n->backprop = [self, xn, ids_keep, rows_n, cols]() {
      k::scatter_add_rows(xn->ensure_grad().data(), ids_keep->data(),
                          self->grad.data(), rows_n, cols);
    };
  }
  return Var::wrap(n);
}

Var reshape(Var x, std::vector<int> shape) {
  Tensor out = x.val().reshaped(std::move(shape));
  auto n = make_node(std::move(out), {x.node()}, "reshape");
  if (n->requires_grad) {
    Node* self = n.get();
    NodePtr xn = x.node();
    n->backprop = [self, xn]() {
      k::ew_axpy(1.0f, self->grad.data(), xn->ensure_grad().data(), self->grad.numel());
    };
  }
  return Var::wrap(n);
}

Var detach(Var x) { return constant(x.val()); }

Var mean_rows(Var x) {
  int64_t b;
  int l, c;
  as_brc(x.val(), b, l, c);
  std::vector<int> oshape = x.shape();
  oshape.erase(oshape.end() - 2);
  Tensor out(oshape);
  const float inv = 1.0f / (float)l;
  for (int64_t bi = 0; bi < b; ++bi) {
    float* o = out.data() + bi * c;
    const float* xb = x.val().data() + bi * l * c;
    for (int cc = 0; cc < c; ++cc) o[cc] = 0.0f;
    for (int i = 0; i < l; ++i)
      for (int cc = 0; cc < c; ++cc) o[cc] += xb[(size_t)i * c + cc] * inv;
  }
  auto n = make_node(std::move(out), {x.node()}, "mean_rows");
  if (n->requires_grad) {
    Node* self = n.get();
    NodePtr xn = x.node();
    n->backprop = [self, xn, b, l, c]() {
      Tensor& dx = xn->ensure_grad();
      const float inv = 1.0f / (float)l;
      for (int64_t bi = 0; bi < b; ++bi) {
        const float* g = self->grad.data() + bi * c;
        float* d = dx.data() + bi * l * c;
        for (int i = 0; i < l; ++i)
          for (int cc = 0; cc < c; ++cc) d[(size_t)i * c + cc] += g[cc] * inv;
      }
    };
  }
  return Var::wrap(n);
}

namespace {
Var reduce_all(Var x, bool mean) {
  int64_t sz = x.val().numel();
  double s = k::sum_all(x.val().data(), sz);
  float v = (float)(mean ? s / (double)sz : s);
  auto n = make_node(Tensor::scalar(v), {x.node()}, mean ? "mean_all" : "sum_all");
  if (n->requires_grad) {
    Node* self = n.get();
    NodePtr xn = x.node();
    float w = mean ? 1.0f / (float)sz : 1.0f;
    n->backprop = [self, xn, w]() {
      Tensor& dx = xn->ensure_grad();
      float g = self->grad[0] * w;
      float* d = dx.data();
      for (int64_t i = 0; i < dx.numel(); ++i) d[i] += g;
    };
  }
  return Var::wrap(n);
}
}  // namespace

Var mean_all(Var x) { return reduce_all(x, true); }
Var sum_all(Var x) { return reduce_all(x, false); }

namespace {
// Flat index map sending patch-layout positions to image-layout positions.
std::shared_ptr<std::vector<int64_t>> patch_index_map(int h, int w, int c, int p) {
  VIMP_CHECK(h % p == 0 && w % p == 0, "patch map: patch size must divide image");
  auto map = std::make_shared<std::vector<int64_t>>((size_t)h * w * c);
  int gh = h / p, gw = w / p;
  int64_t o = 0;
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx)
      for (int py = 0; py < p; ++py)
        for (int px = 0; px < p; ++px)
          for (int ch = 0; ch < c; ++ch)
            (*map)[o++] = (((int64_t)(gy * p + py) * w) + (gx * p + px)) * c + ch;
  return map;
}
}  // namespace

Var img_to_patches(Var img, int p) {
  VIMP_CHECK(img.val().ndim() == 4, "img_to_patches: need (B,H,W,C)");
  int b = img.dim(0), h = img.dim(1), w = img.dim(2), c = img.dim(3);
  auto map = patch_index_map(h, w, c, p);
  int np = (h / p) * (w / p);
  int64_t isz = (int64_t)h * w * c;
  Tensor out({b, np, p * p * c});
  for (int bi = 0; bi < b; ++bi) {
    const float* src = img.val().data() + bi * isz;
    float* dst = out.data() + bi * isz;
    k::permute_gather(src, map->data(), dst, isz);
  }
  auto n = make_node(std::move(out), {img.node()}, "img_to_patches");
  if (n->requires_grad) {
    Node* self = n.get();
    NodePtr xn = img.node();
    n->backprop = [self, xn, map, b, isz]() {
      Tensor& dx = xn->ensure_grad();
      for (int bi = 0; bi < b; ++bi)
        k::permute_scatter_add(self->grad.data() + bi * isz, map->data(),
                               dx.data() + bi * isz, isz);
    };
  }
  return Var::wrap(n);
}

Var patches_to_img(Var x, int h, int w, int c, int p) {
  VIMP_CHECK(x.val().ndim() == 3, "patches_to_img: need (B,NP,P*P*C)");
  int b = x.dim(0);
  VIMP_CHECK((int64_t)x.dim(1) * x.dim(2) == (int64_t)h * w * c,
             "patches_to_img: size mismatch");
  auto map = patch_index_map(h, w, c, p);
  int64_t isz = (int64_t)h * w * c;
  Tensor out({b, h, w, c});
  for (int bi = 0; bi < b; ++bi) {
    // inverse of gather: scatter patch rows back into image positions
    const float* src = x.val().data() + bi * isz;
    float* dst = out.data() + bi * isz;
    for (int64_t i = 0; i < isz; ++i) dst[(*map)[i]] = src[i];
  }
  auto n = make_node(std::move(out), {x.node()}, "patches_to_img");
  if (n->requires_grad) {
    Node* self = n.get();
    NodePtr xn = x.node();
    n->backprop = [self, xn, map, b, isz]() {
      Tensor& dx = xn->ensure_grad();
      for (int bi = 0; bi < b; ++bi) {
        const float* g = self->grad.data() + bi * isz;
        float* d = dx.data() + bi * isz;
        for (int64_t i = 0; i < isz; ++i) d[i] += g[(*map)[i]];
      }
    };
  }
  return Var::wrap(n);
}

Var conv3x3(Var x, Var w, Var b) {
  VIMP_CHECK(x.val().ndim() == 4, "conv3x3: need (B,H,W,Cin)");
  int bn = x.dim(0), h = x.dim(1), wd = x.dim(2), cin = x.dim(3);
  VIMP_CHECK(w.val().ndim() == 4 && w.dim(1) == 3 && w.dim(2) == 3 && w.dim(3) == cin,
             "conv3x3: weight shape");
  int cout = w.dim(0);
  VIMP_CHECK(b.val().numel() == cout, "conv3x3: bias size");
  Tensor out({bn, h, wd, cout});
  int64_t xin = (int64_t)h * wd * cin, xout = (int64_t)h * wd * cout;
  for (int bi = 0; bi < bn; ++bi)
    k::conv3x3_fwd(x.val().data() + bi * xin, w.val().data(), b.val().data(),
                   out.data() + bi * xout, h, wd, cin, cout);
  auto n = make_node(std::move(out), {x.node(), w.node(), b.node()}, "conv3x3");
  if (n->requires_grad) {
    Node* self = n.get();
    NodePtr xn = x.node(), wn = w.node(), bnode = b.node();
    n->backprop = [self, xn, wn, bnode, bn, h, wd, cin, cout, xin, xout]() {
      for (int bi = 0; bi < bn; ++bi) {
        const float* g = self->grad.data() + bi * xout;
        if (xn->requires_grad)
          k::conv3x3_bwd_x(wn->value.data(), g, xn->ensure_grad().data() + bi * xin,
                           h, wd, cin, cout);
        if (wn->requires_grad || bnode->requires_grad)
          k::conv3x3_bwd_w(xn->value.data() + bi * xin, g,
                           wn->ensure_grad().data(), bnode->ensure_grad().data(),
                           h, wd, cin, cout);
      }
    };
  }
  return Var::wrap(n);
}

Var straight_through(Var z_e, const Tensor& z_q) {
  VIMP_CHECK(z_e.val().same_shape(z_q), "straight_through: shape mismatch");
  auto n = make_node(z_q, {z_e.node()}, "straight_through");
  if (n->requires_grad) {
    Node* self = n.get();
    NodePtr zn = z_e.node();
    n->backprop = [self, zn]() {
      k::ew_axpy(1.0f, self->grad.data(), zn->ensure_grad().data(), self->grad.numel());
    };
  }
  return Var::wrap(n);
}

Var pairwise_sqdist(Var x, Var y) {
  VIMP_CHECK(x.val().ndim() == 2 && y.val().ndim() == 2 && x.dim(1) == y.dim(1),
             "pairwise_sqdist: need (N,C),(K,C)");
  int nn = x.dim(0), kk = y.dim(0), c = x.dim(1);
  Tensor out({nn, kk});
  k::sqdist_fwd(x.val().data(), y.val().data(), out.data(), nn, kk, c);
  auto n = make_node(std::move(out), {x.node(), y.node()}, "pairwise_sqdist");
  if (n->requires_grad) {
    Node* self = n.get();
    NodePtr xn = x.node(), yn = y.node();
    n->backprop = [self, xn, yn, nn, kk, c]() {
      float* dx = xn->requires_grad ? xn->ensure_grad().data() : nullptr;
      float* dy = yn->requires_grad ? yn->ensure_grad().data() : nullptr;
      k::sqdist_bwd(xn->value.data(), yn->value.data(), self->grad.data(), dx, dy,
                    nn, kk, c);
    };
  }
  return Var::wrap(n);
}

Var softmax_ce(Var logits, const std::vector<int>& targets, int col0, int ncols,
               Reduction red) {
  VIMP_CHECK(logits.val().ndim() == 2, "softmax_ce: need 2-D logits");
  int rows_n = logits.dim(0), v = logits.dim(1);
  VIMP_CHECK(col0 >= 0 && col0 + ncols <= v, "softmax_ce: column range");
  VIMP_CHECK((int)targets.size() == rows_n, "softmax_ce: target count");
  Tensor probs({rows_n, ncols});
  double loss = 0.0;
  for (int r = 0; r < rows_n; ++r) {
    VIMP_CHECK(targets[r] >= 0 && targets[r] < ncols, "softmax_ce: target out of range");
    const float* lr = logits.val().data() + (int64_t)r * v + col0;
    float* pr = probs.data() + (int64_t)r * ncols;
    float mx = lr[0];
    for (int j = 1; j < ncols; ++j) mx = std::max(mx, lr[j]);
    double den = 0.0;
    for (int j = 0; j < ncols; ++j) den += std::exp((double)lr[j] - mx);
    double lse = mx + std::log(den);
    loss += lse - (double)lr[targets[r]];
    for (int j = 0; j < ncols; ++j)
      pr[j] = (float)(std::exp((double)lr[j] - mx) / den);
  }
  float scale_w = red == Reduction::Mean ? 1.0f / (float)rows_n : 1.0f;
  auto n = make_node(Tensor::scalar((float)loss * scale_w), {logits.node()}, "softmax_ce");
  if (n->requires_grad) {
    Node* self = n.get();
    NodePtr ln = logits.node();
    auto tg = std::make_shared<std::vector<int>>(targets);
    n->backprop = [self, ln, tg, probs, rows_n, v, col0, ncols, scale_w]() {
      Tensor& dl = ln->ensure_grad();
      float g = self->grad[0] * scale_w;
      for (int r = 0; r < rows_n; ++r) {
        const float* pr = probs.data() + (int64_t)r * ncols;
        float* dr = dl.data() + (int64_t)r * v + col0;
        for (int j = 0; j < ncols; ++j)
          dr[j] += g * (pr[j] - (j == (*tg)[r] ? 1.0f : 0.0f));
      }
    };
  }
  return Var::wrap(n);
}

Var bce_logits(Var logits, float target, Reduction red) {
  int64_t sz = logits.val().numel();
  double loss = 0.0;
  const float* x = logits.val().data();
  for (int64_t i = 0; i < sz; ++i) {
    // softplus(x) - t * x, stable form
    double ax = std::fabs((double)x[i]);
    double sp = std::max((double)x[i], 0.0) + std::log1p(std::exp(-ax));
    loss += sp - (double)target * (double)x[i];
  }
  float scale_w = red == Reduction::Mean ? 1.0f / (float)sz : 1.0f;
  auto n = make_node(Tensor::scalar((float)(loss * scale_w)), {logits.node()}, "bce_logits");
  if (n->requires_grad) {
    Node* self = n.get();
    NodePtr ln = logits.node();
    n->backprop = [self, ln, target, scale_w]() {
      Tensor& dl = ln->ensure_grad();
      float g = self->grad[0] * scale_w;
      const float* xv = ln->value.data();
      float* d = dl.data();
      for (int64_t i = 0; i < dl.numel(); ++i) {
        float s = 1.0f / (1.0f + std::exp(-xv[i]));
        d[i] += g * (s - target);
      }
    };
  }
  return Var::wrap(n);
}

Var mse(Var pred, const Tensor& target) {
  VIMP_CHECK(pred.val().same_shape(target), "mse: shape mismatch");
  int64_t sz = pred.val().numel();
  double loss = 0.0;
  const float* p = pred.val().data();
  const float* t = target.data();
  for (int64_t i = 0; i < sz; ++i) {
    double d = (double)p[i] - (double)t[i];
    loss += d * d;
  }
  auto n = make_node(Tensor::scalar((float)(loss / (double)sz)), {pred.node()}, "mse");
  if (n->requires_grad) {
    Node* self = n.get();
    NodePtr pn = pred.node();
    Tensor tk = target;
    n->backprop = [self, pn, tk]() {
      Tensor& dp = pn->ensure_grad();
      float g = self->grad[0] * 2.0f / (float)dp.numel();
      const float* pv = pn->value.data();
      const float* tv = tk.data();
      float* d = dp.data();
      for (int64_t i = 0; i < dp.numel(); ++i) d[i] += g * (pv[i] - tv[i]);
    };
  }
  return Var::wrap(n);
}

Var mse2(Var a, Var b) {
  VIMP_CHECK(a.val().same_shape(b.val()), "mse2: shape mismatch");
  int64_t sz = a.val().numel();
  double loss = 0.0;
  const float* av = a.val().data();
  const float* bv = b.val().data();
  for (int64_t i = 0; i < sz; ++i) {
    double d = (double)av[i] - (double)bv[i];
    loss += d * d;
  }
  auto n = make_node(Tensor::scalar((float)(loss / (double)sz)), {a.node(), b.node()}, "mse2");
  if (n->requires_grad) {
    Node* self = n.get();
    NodePtr an = a.node(), bn = b.node();
    n->backprop = [self, an, bn]() {
      float g = self->grad[0] * 2.0f / (float)an->value.numel();
      const float* av = an->value.data();
      const float* bv = bn->value.data();
      if (an->requires_grad) {
        float* d = an->ensure_grad().data();
        for (int64_t i = 0; i < an->value.numel(); ++i) d[i] += g * (av[i] - bv[i]);
      }
      if (bn->requires_grad) {
        float* d = bn->ensure_grad().data();
        for (int64_t i = 0; i < bn->value.numel(); ++i) d[i] += g * (bv[i] - av[i]);
      }
    };
  }
  return Var::wrap(n);
}

Var l1(Var pred, const Tensor& target) {
  VIMP_CHECK(pred.val().same_shape(target), "l1: shape mismatch");
  int64_t sz = pred.val().numel();
  double loss = 0.0;
  const float* p = pred.val().data();
  const float* t = target.data();
  for (int64_t i = 0; i < sz; ++i) loss += std::fabs((double)p[i] - (double)t[i]);
  auto n = make_node(Tensor::scalar((float)(loss / (double)sz)), {pred.node()}, "l1");
  if (n->requires_grad) {
    Node* self = n.get();
    NodePtr pn = pred.node();
    Tensor tk = target;
    n->backprop = [self, pn, tk]() {
      Tensor& dp = pn->ensure_grad();
      float g = self->grad[0] / (float)dp.numel();
      const float* pv = pn->value.data();
      const float* tv = tk.data();
      float* d = dp.data();
      for (int64_t i = 0; i < dp.numel(); ++i) {
        float diff = pv[i] - tv[i];
        d[i] += g * (diff > 0.0f ? 1.0f : (diff < 0.0f ? -1.0f : 0.0f));
      }
    };
  }
  return Var::wrap(n);
}

Tensor softmax_probs(const Tensor& logits, int col0, int ncols) {
  VIMP_CHECK(logits.ndim() == 2, "softmax_probs: need 2-D logits");
  int rows_n = logits.dim(0), v = logits.dim(1);
  VIMP_CHECK(col0 >= 0 && col0 + ncols <= v, "softmax_probs: column range");
  Tensor probs({rows_n, ncols});
  for (int r = 0; r < rows_n; ++r) {
    const float* lr = logits.data() + (int64_t)r * v + col0;
    float* pr = probs.data() + (int64_t)r * ncols;
    float mx = lr[0];
    for (int j = 1; j < ncols; ++j) mx = std::max(mx, lr[j]);
    double den = 0.0;
    for (int j = 0; j < ncols; ++j) den += std::exp((double)lr[j] - mx);
    for (int j = 0; j < ncols; ++j)
      pr[j] = (float)(std::exp((double)lr[j] - mx) / den);
  }
  return probs;
}

}  // namespace vimp::ag
