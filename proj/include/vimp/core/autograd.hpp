#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "vimp/core/tensor.hpp"

namespace vimp::ag {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One vertex of the dynamically built computation graph.
struct Node {
  Tensor value;
  Tensor grad;  // allocated on first use during backward
  bool requires_grad = false;
  uint64_t epoch = 0;  // visitation mark for topo sort
  std::vector<NodePtr> parents;
  std::function<void()> backprop;  // accumulates into parents' grads
  const char* op = "";

  Tensor& ensure_grad() {
    if (!grad.defined()) grad = Tensor::zeros(value.shape());
    return grad;
  }
};

/// Handle to a graph node. Cheap to copy.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Tensor& val() const { return node_->value; }
  Tensor& grad() const { return node_->ensure_grad(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::vector<int>& shape() const { return node_->value.shape(); }
  int dim(int i) const { return node_->value.dim(i); }
  float item() const {
    VIMP_CHECK(node_->value.numel() == 1, "Var::item: not a scalar");
    return node_->value[0];
  }
  NodePtr node() const { return node_; }

  static Var wrap(NodePtr n) {
    Var v;
    v.node_ = std::move(n);
    return v;
  }

 private:
  NodePtr node_;
};

/// Runs reverse-mode accumulation from a scalar root.
void backward(const Var& root);

enum class Reduction { Mean, Sum };

// --- graph-building operations ---------------------------------------------

Var constant(Tensor t);
Var param(Tensor t);

/// x (.. x D) @ w (D x E); leading dims of x are flattened row-wise.
Var matmul(Var x, Var w);
/// matmul plus row-broadcast bias (E).
Var linear(Var x, Var w, Var b);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, float s);
/// a + alpha * b
Var add_scaled(Var a, Var b, float alpha);
/// x (.. x C) plus bias (C) broadcast over rows.
Var add_bias(Var x, Var b);

Var gelu(Var x);
Var sigmoid(Var x);

Var layer_norm(Var x, Var gamma, Var beta, float eps = 1e-5f);

/// Multi-head scaled-dot-product attention. q (B x Lq x D), k,v (B x Lk x D),
/// optional additive mask (Lq x Lk) applied to every batch and head.
Var attention(Var q, Var k, Var v, const Tensor& mask, int heads);

/// Slice rows [r0, r1) along the second-to-last axis.
Var rows(Var x, int r0, int r1);
/// Concatenate along the second-to-last axis; other dims must match.
Var concat_rows(const std::vector<Var>& xs);
/// Select rows of a 2-D tensor; repeated ids accumulate grads.
Var gather_rows(Var x, std::vector<int> ids);
/// gather_rows specialised for id-lookup tables.
inline Var embedding(Var table, std::vector<int> ids) {
  return gather_rows(table, std::move(ids));
}

Var reshape(Var x, std::vector<int> shape);
Var detach(Var x);

/// Mean over the second-to-last axis: (B x L x D) -> (B x D).
Var mean_rows(Var x);
Var mean_all(Var x);
Var sum_all(Var x);

/// (B x H x W x C) image to (B x HW/p^2 x p*p*C) patch rows.
Var img_to_patches(Var img, int p);
Var patches_to_img(Var x, int h, int w, int c, int p);

/// 3x3 same convolution on (B x H x W x Cin); w (Cout x 3 x 3 x Cin), b (Cout).
Var conv3x3(Var x, Var w, Var b);

/// Forward value = z_q, gradient passes through to z_e unchanged.
Var straight_through(Var z_e, const Tensor& z_q);

/// d[i,j] = ||x_i - y_j||^2 for x (N x C), y (K x C).
Var pairwise_sqdist(Var x, Var y);

/// Cross-entropy of logits[:, col0:col0+ncols] rows against targets
/// (relative to col0). Stable log-softmax; untouched columns get no grad.
Var softmax_ce(Var logits, const std::vector<int>& targets, int col0, int ncols,
               Reduction red);

/// Binary cross-entropy with logits against a constant target (0 or 1).
Var bce_logits(Var logits, float target, Reduction red = Reduction::Mean);

Var mse(Var pred, const Tensor& target);
/// MSE between two graph values (mean over elements).
Var mse2(Var a, Var b);
Var l1(Var pred, const Tensor& target);

// Non-graph helper: row-wise softmax probabilities of a value slice.
Tensor softmax_probs(const Tensor& logits, int col0, int ncols);

}  // namespace vimp::ag
