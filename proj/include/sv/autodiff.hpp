#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "sv/tensor.hpp"

namespace sv {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One vertex of the dynamically built computation graph.
struct Node {
  Tensor value;
  Tensor grad;  // allocated on first use during backward
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  // Reads this->grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;

  Tensor& ensure_grad() {
    if (!grad.defined()) grad = Tensor::zeros(value.shape());
    return grad;
  }
};

// Value-semantics handle to a graph node.
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr n) : n_(std::move(n)) {}

  static Var constant(Tensor t);
  static Var param(Tensor t);  // leaf with requires_grad

  bool defined() const { return n_ != nullptr; }
  const Tensor& value() const { return n_->value; }
  Tensor& grad() { return n_->ensure_grad(); }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  const NodePtr& node() const { return n_; }
  const std::vector<int>& shape() const { return n_->value.shape(); }

 private:
  NodePtr n_;
};

// Builds a node from precomputed value + hand-written backward. Used by the
// renderer and the hash grid, whose gradients are cheaper by hand.
Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

// Runs reverse-mode accumulation from a scalar root (seeds grad with 1).
void backward(const Var& root);

// --- elementwise -----------------------------------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, float s);
Var add_scalar(const Var& a, float c);
Var relu(const Var& a);
Var silu(const Var& a);
Var sigmoid(const Var& a);
Var softplus(const Var& a);
Var tanh_op(const Var& a);
Var gelu(const Var& a);  // tanh approximation
Var square(const Var& a);
Var detach(const Var& a);

// --- shape -----------------------------------------------------------------
Var reshape(const Var& a, std::vector<int> shape);
Var permute(const Var& a, const std::vector<int>& dims);
Var concat(const std::vector<Var>& parts, int axis);
Var slice(const Var& a, int axis, int start, int len);

// --- linear algebra --------------------------------------------------------
// (M,K)x(K,N) or batched (B,M,K)x(B,K,N); 2D rhs broadcasts over batch.
Var matmul(const Var& a, const Var& b);
Var linear(const Var& x, const Var& w, const Var& b);  // x(...,I) w(I,O) b(O)
Var add_bias(const Var& x, const Var& b);               // bias over last dim

// --- reductions / losses ----------------------------------------------------
Var sum_all(const Var& a);
Var mean_all(const Var& a);
Var sum_axis(const Var& a, int axis);
Var mse(const Var& a, const Var& b);  // mean over all elements of (a-b)^2

// --- nn building blocks ------------------------------------------------------
// Softmax over the last axis with a 0/1 validity mask of the same shape.
// Fully masked rows produce all-zero weights instead of NaN.
Var masked_softmax(const Var& scores, const Tensor& mask);
Var softmax_lastdim(const Var& scores);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps = 1e-5f);
// NHWC group norm over (H,W,C/groups) per sample and group.
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, float eps = 1e-5f);
// x NHWC, w (K,K,Cin,Cout), b (Cout).
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var upsample_nearest2x(const Var& x);
Var upsample_bilinear(const Var& x, int oh, int ow);  // align_corners=false
Var avg_pool(const Var& x, int k);                    // exact kxk area mean
// feat (H,W,C); coords (P,2) continuous feature-grid coords; valid (P).
// Out-of-range or invalid points yield zeros. Gradient flows into feat only.
Var grid_sample(const Var& feat, const Tensor& coords, const Tensor& valid);

}  // namespace sv
