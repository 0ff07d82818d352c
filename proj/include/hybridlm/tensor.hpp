#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "hybridlm/errors.hpp"
#include "hybridlm/rng.hpp"

namespace hybridlm {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
size_t shape_numel(const Shape& s);

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

// One node of the reverse-mode tape. Data is contiguous row-major f32.
struct TensorNode {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // sized lazily during backward
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<NodePtr> parents;
  std::function<void()> backprop;  // reads this->grad, accumulates into parents

  size_t numel() const { return data.size(); }
  void ensure_grad();
  ~TensorNode();  // iterative parent release; long graphs must not recurse
};

// Value-semantic handle to a tape node. Copying a Tensor aliases the node;
// clone() makes an independent leaf.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int dim(int i) const;
  int ndim() const { return static_cast<int>(shape().size()); }
  size_t numel() const;
  float* data();
  const float* data() const;
  std::span<const float> values() const;
  float item() const;  // scalar tensors only

  bool requires_grad() const;
  Tensor& set_requires_grad(bool rg);
  const std::vector<float>& grad() const;
  void zero_grad();

  // Same values, no graph edge, never requires grad.
  Tensor detach() const;
  // Deep copy as a fresh leaf (keeps requires_grad).
  Tensor clone() const;

  NodePtr node() const { return node_; }

 private:
  NodePtr node_;
};

// ---- factories ----
Tensor zeros(Shape shape, bool requires_grad = false);
Tensor full(Shape shape, float value, bool requires_grad = false);
Tensor from_vector(Shape shape, std::vector<float> values, bool requires_grad = false);
Tensor randn(Shape shape, Rng& rng, float stddev = 1.0f, bool requires_grad = false);
Tensor rand_uniform(Shape shape, Rng& rng, float lo, float hi, bool requires_grad = false);
Tensor eye(int n);

// ---- ops ----
// All ops validate shapes and throw ShapeError naming the op and shapes.
Tensor matmul(const Tensor& a, const Tensor& b);  // (m,k)@(k,n)
Tensor transpose(const Tensor& a);                // 2-D
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, float s);
Tensor mul_scalar(const Tensor& a, float s);
Tensor add_row(const Tensor& x, const Tensor& bias);  // bias broadcast over last dim
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor softmax_last(const Tensor& a);  // normalizes the last axis
Tensor rms_norm(const Tensor& x, const Tensor& weight, float eps = 1e-5f);
// x: (t, C), kernel: (w, C) depthwise, kernel[w-1] multiplies the current step.
Tensor causal_conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias);
Tensor slice(const Tensor& x, int axis, int start, int len);
Tensor concat(std::span<const Tensor> xs, int axis);
Tensor reshape(const Tensor& x, Shape shape);
Tensor embedding(const Tensor& table, std::span<const int32_t> ids);
// Mean of -log p(target) over masked positions (mask empty = all positions).
Tensor cross_entropy(const Tensor& logits, std::span<const int32_t> targets,
                     std::span<const uint8_t> mask = {});
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Rotary embedding over heads of width d_head; position of row i is pos0+i.
Tensor rope(const Tensor& x, int d_head, int pos0, float base = 10000.0f);
// Row-wise softmax where row i attends columns <= past+i; the rest get 0.
Tensor causal_softmax(const Tensor& scores, int past = 0);

enum class KlDirection { kReverse, kForward };
// Mean per-row KL between softmax(z_student/tau) and softmax(z_teacher/tau).
// kReverse = KL(student || teacher). Teacher side is detached.
Tensor kl_div(const Tensor& z_student, const Tensor& z_teacher, float tau,
              KlDirection direction);

// Selective-scan recurrence, fused forward+backward.
//   x:  (t, C) input path          dt: (t, C) positive rates
//   B:  (t, H*N)   C_coef: (t, H*N)   a_log: (C, N), A = -exp(a_log)
// Channel c belongs to head c / (C/H). Per step:
//   h[c,n] = exp(dt[c]*A[c,n]) * h[c,n] + dt[c]*B[head(c),n] * x[c]
//   y[c]   = sum_n C_coef[head(c),n] * h[c,n]
Tensor selective_scan(const Tensor& x, const Tensor& dt, const Tensor& B,
                      const Tensor& C_coef, const Tensor& a_log, int n_heads);

// ---- autodiff driver ----
// Gradients of the leaves reachable from a backward() call. Holds the leaf
// nodes alive; grads are also available via Tensor::grad().
class GradientMap {
 public:
  const std::vector<float>* find(const Tensor& t) const;
  size_t size() const { return leaves_.size(); }
  void insert(NodePtr leaf);

 private:
  std::vector<NodePtr> leaves_;
  std::unordered_map<const TensorNode*, size_t> index_;
};

// Reverse accumulation from a scalar loss. Throws ShapeError for non-scalar
// losses. Tape edges of the visited subgraph are cleared afterwards, so
// activation memory is released with the last handle and a second backward
// through the same graph is not possible.
GradientMap backward(const Tensor& loss);

struct GradCheckReport {
  float max_rel_err = 0.0f;
  float max_abs_err = 0.0f;
  bool nan_in_analytic = false;
  bool nan_in_numeric = false;
  bool ok(float tol) const {
    return !nan_in_analytic && !nan_in_numeric && max_rel_err < tol;
  }
};

// Central-difference check of d f / d point. Relative error uses
// |ga-gn| / (|ga| + |gn| + 1e-4 * max|ga| + 1e-12) so elements that are tiny
// relative to the gradient's scale are judged against that scale. NaNs are
// reported, not thrown.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& point, float eps);

// ---- raw kernels (deterministic; row-parallel under OpenMP) ----
namespace kernels {
void mm_nn(const float* a, const float* b, float* c, int m, int k, int n);  // c += a@b
void mm_nt(const float* a, const float* b, float* c, int m, int k, int n);  // c += a@b^T, b is (n,k)
void mm_tn(const float* a, const float* b, float* c, int m, int k, int n);  // c += a^T@b, a is (k,m)
}  // namespace kernels

}  // namespace hybridlm
