#include "hybridlm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

namespace hybridlm {

// ---------------------------------------------------------------- shapes

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ')';
  return os.str();
}

size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (int d : s) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(s));
    n *= static_cast<size_t>(d);
  }
  return n;
}

namespace {

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    shape_fail(op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void require_defined(const char* op, const Tensor& t) {
  if (!t.defined()) shape_fail(op, "undefined tensor argument");
}

// rows of a tensor treated as a 2-D (rows, cols) matrix over the last axis
std::pair<int, int> as_rows_cols(const Tensor& t) {
  const Shape& s = t.shape();
  if (s.empty()) return {1, 1};
  int cols = s.back();
  int rows = 1;
  for (size_t i = 0; i + 1 < s.size(); ++i) rows *= s[i];
  return {rows, cols};
}

}  // namespace

// ---------------------------------------------------------------- node

void TensorNode::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
}

TensorNode::~TensorNode() {
  // release parents iteratively so deep graphs do not blow the stack
  std::vector<NodePtr> pending;
  pending.reserve(parents.size());
  for (auto& p : parents) pending.push_back(std::move(p));
  parents.clear();
  while (!pending.empty()) {
    NodePtr n = std::move(pending.back());
    pending.pop_back();
    if (n && n.use_count() == 1) {
      for (auto& p : n->parents) pending.push_back(std::move(p));
      n->parents.clear();
    }
  }
}

// ---------------------------------------------------------------- handle

const Shape& Tensor::shape() const {
  if (!node_) throw ShapeError("shape(): undefined tensor");
  return node_->shape;
}

int Tensor::dim(int i) const {
  const Shape& s = shape();
  if (i < 0) i += static_cast<int>(s.size());
  if (i < 0 || i >= static_cast<int>(s.size()))
    throw ShapeError("dim(): axis out of range for shape " + shape_str(s));
  return s[static_cast<size_t>(i)];
}

size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

float* Tensor::data() {
  if (!node_) throw ShapeError("data(): undefined tensor");
  return node_->data.data();
}

const float* Tensor::data() const {
  if (!node_) throw ShapeError("data(): undefined tensor");
  return node_->data.data();
}

std::span<const float> Tensor::values() const {
  if (!node_) return {};
  return {node_->data.data(), node_->data.size()};
}

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item(): tensor is not scalar, shape " + shape_str(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool rg) {
  if (!node_) throw ShapeError("set_requires_grad(): undefined tensor");
  if (rg && !node_->parents.empty())
    throw ShapeError("set_requires_grad(): only leaves can be toggled");
  node_->requires_grad = rg;
  return *this;
}

const std::vector<float>& Tensor::grad() const {
  static const std::vector<float> kEmpty;
  return node_ ? node_->grad : kEmpty;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const {
  if (!node_) return {};
  auto n = std::make_shared<TensorNode>();
  n->shape = node_->shape;
  n->data = node_->data;
  n->op = "detach";
  return Tensor(std::move(n));
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  if (t.defined()) t.node()->requires_grad = node_->requires_grad;
  return t;
}

// ---------------------------------------------------------------- factories

namespace {

NodePtr new_leaf(Shape shape, bool requires_grad) {
  auto n = std::make_shared<TensorNode>();
  n->data.resize(shape_numel(shape));
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  return n;
}

// result node; records parents and grad requirement but not the closure
NodePtr new_result(Shape shape, const char* op, std::initializer_list<Tensor> parents) {
  auto n = std::make_shared<TensorNode>();
  n->data.resize(shape_numel(shape));
  n->shape = std::move(shape);
  n->op = op;
  bool rg = false;
  for (const Tensor& p : parents) rg = rg || p.requires_grad();
  n->requires_grad = rg;
  if (rg)
    for (const Tensor& p : parents) n->parents.push_back(p.node());
  return n;
}

}  // namespace

Tensor zeros(Shape shape, bool requires_grad) {
  return Tensor(new_leaf(std::move(shape), requires_grad));
}

Tensor full(Shape shape, float value, bool requires_grad) {
  auto n = new_leaf(std::move(shape), requires_grad);
  std::fill(n->data.begin(), n->data.end(), value);
  return Tensor(std::move(n));
}

Tensor from_vector(Shape shape, std::vector<float> values, bool requires_grad) {
  if (shape_numel(shape) != values.size())
    throw ShapeError("from_vector: " + std::to_string(values.size()) +
                     " values do not fill shape " + shape_str(shape));
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->data = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor randn(Shape shape, Rng& rng, float stddev, bool requires_grad) {
  auto n = new_leaf(std::move(shape), requires_grad);
  for (auto& v : n->data) v = rng.normal_f32(0.0f, stddev);
  return Tensor(std::move(n));
}

Tensor rand_uniform(Shape shape, Rng& rng, float lo, float hi, bool requires_grad) {
  auto n = new_leaf(std::move(shape), requires_grad);
  for (auto& v : n->data) v = rng.uniform_f32(lo, hi);
  return Tensor(std::move(n));
}

Tensor eye(int n) {
  Tensor t = zeros({n, n});
  for (int i = 0; i < n; ++i) t.data()[static_cast<size_t>(i) * n + i] = 1.0f;
  return t;
}

// ---------------------------------------------------------------- kernels

namespace kernels {

// Row-parallel: every output element is accumulated by exactly one thread in a
// fixed order, so results are identical for any thread count.
void mm_nn(const float* a, const float* b, float* c, int m, int k, int n) {
#pragma omp parallel for schedule(static) if (m > 1 && (int64_t)m * k * n > (1 << 16))
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<size_t>(i) * k;
    float* crow = c + static_cast<size_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      const float av = arow[l];
      const float* brow = b + static_cast<size_t>(l) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void mm_nt(const float* a, const float* b, float* c, int m, int k, int n) {
#pragma omp parallel for schedule(static) if (m > 1 && (int64_t)m * k * n > (1 << 16))
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<size_t>(i) * k;
    float* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const float* brow = b + static_cast<size_t>(j) * k;
      float acc = 0.0f;
      for (int l = 0; l < k; ++l) acc += arow[l] * brow[l];
      crow[j] += acc;
    }
  }
}

void mm_tn(const float* a, const float* b, float* c, int m, int k, int n) {
#pragma omp parallel for schedule(static) if (m > 1 && (int64_t)m * k * n > (1 << 16))
  for (int i = 0; i < m; ++i) {
    float* crow = c + static_cast<size_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      const float av = a[static_cast<size_t>(l) * m + i];
      const float* brow = b + static_cast<size_t>(l) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace kernels

// ---------------------------------------------------------------- elementwise

namespace {

template <class Fwd, class Bwd>
Tensor unary_op(const char* name, const Tensor& a, Fwd fwd, Bwd bwd) {
  require_defined(name, a);
  NodePtr n = new_result(a.shape(), name, {a});
  const float* x = a.data();
  for (size_t i = 0; i < n->data.size(); ++i) n->data[i] = fwd(x[i]);
  if (n->requires_grad) {
    TensorNode* self = n.get();
    TensorNode* pa = a.node().get();
    n->backprop = [self, pa, bwd]() {
      pa->ensure_grad();
      for (size_t i = 0; i < self->data.size(); ++i)
        pa->grad[i] += self->grad[i] * bwd(pa->data[i], self->data[i]);
    };
  }
  return Tensor(std::move(n));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_defined("add", a);
  require_defined("add", b);
  require_same_shape("add", a, b);
  NodePtr n = new_result(a.shape(), "add", {a, b});
  const float* xa = a.data();
  const float* xb = b.data();
  for (size_t i = 0; i < n->data.size(); ++i) n->data[i] = xa[i] + xb[i];
  if (n->requires_grad) {
    TensorNode* self = n.get();
    TensorNode* pa = a.node().get();
    TensorNode* pb = b.node().get();
    bool ga = a.requires_grad(), gb = b.requires_grad();
    n->backprop = [self, pa, pb, ga, gb]() {
      if (ga) {
        pa->ensure_grad();
        for (size_t i = 0; i < self->grad.size(); ++i) pa->grad[i] += self->grad[i];
      }
      if (gb) {
        pb->ensure_grad();
        for (size_t i = 0; i < self->grad.size(); ++i) pb->grad[i] += self->grad[i];
      }
    };
  }
  return Tensor(std::move(n));
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_defined("sub", a);
  require_defined("sub", b);
  require_same_shape("sub", a, b);
  NodePtr n = new_result(a.shape(), "sub", {a, b});
  const float* xa = a.data();
  const float* xb = b.data();
  for (size_t i = 0; i < n->data.size(); ++i) n->data[i] = xa[i] - xb[i];
  if (n->requires_grad) {
    TensorNode* self = n.get();
    TensorNode* pa = a.node().get();
    TensorNode* pb = b.node().get();
    bool ga = a.requires_grad(), gb = b.requires_grad();
    n->backprop = [self, pa, pb, ga, gb]() {
      if (ga) {
        pa->ensure_grad();
        for (size_t i = 0; i < self->grad.size(); ++i) pa->grad[i] += self->grad[i];
      }
      if (gb) {
        pb->ensure_grad();
        for (size_t i = 0; i < self->grad.size(); ++i) pb->grad[i] -= self->grad[i];
      }
    };
  }
  return Tensor(std::move(n));
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_defined("mul", a);
  require_defined("mul", b);
  require_same_shape("mul", a, b);
  NodePtr n = new_result(a.shape(), "mul", {a, b});
  const float* xa = a.data();
  const float* xb = b.data();
  for (size_t i = 0; i < n->data.size(); ++i) n->data[i] = xa[i] * xb[i];
  if (n->requires_grad) {
    TensorNode* self = n.get();
    TensorNode* pa = a.node().get();
    TensorNode* pb = b.node().get();
    bool ga = a.requires_grad(), gb = b.requires_grad();
    n->backprop = [self, pa, pb, ga, gb]() {
      if (ga) {
        pa->ensure_grad();
        for (size_t i = 0; i < self->grad.size(); ++i)
          pa->grad[i] += self->grad[i] * pb->data[i];
      }
      if (gb) {
        pb->ensure_grad();
        for (size_t i = 0; i < self->grad.size(); ++i)
          pb->grad[i] += self->grad[i] * pa->data[i];
      }
    };
  }
  return Tensor(std::move(n));
}

Tensor add_scalar(const Tensor& a, float s) {
  return unary_op("add_scalar", a, [s](float x) { return x + s; },
                  [](float, float) { return 1.0f; });
}

Tensor mul_scalar(const Tensor& a, float s) {
  return unary_op("mul_scalar", a, [s](float x) { return x * s; },
                  [s](float, float) { return s; });
}

Tensor add_row(const Tensor& x, const Tensor& bias) {
  require_defined("add_row", x);
  require_defined("add_row", bias);
  auto [rows, cols] = as_rows_cols(x);
  if (bias.ndim() != 1 || bias.dim(0) != cols)
    shape_fail("add_row", "bias " + shape_str(bias.shape()) + " does not match last dim of " +
                              shape_str(x.shape()));
  NodePtr n = new_result(x.shape(), "add_row", {x, bias});
  const float* px = x.data();
  const float* pb = bias.data();
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      n->data[static_cast<size_t>(r) * cols + c] = px[static_cast<size_t>(r) * cols + c] + pb[c];
  if (n->requires_grad) {
    TensorNode* self = n.get();
    TensorNode* nx = x.node().get();
    TensorNode* nb = bias.node().get();
    bool gx = x.requires_grad(), gb = bias.requires_grad();
    n->backprop = [self, nx, nb, gx, gb, rows, cols]() {
      if (gx) {
        nx->ensure_grad();
        for (size_t i = 0; i < self->grad.size(); ++i) nx->grad[i] += self->grad[i];
      }
      if (gb) {
        nb->ensure_grad();
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < cols; ++c)
            nb->grad[c] += self->grad[static_cast<size_t>(r) * cols + c];
      }
    };
  }
  return Tensor(std::move(n));
}

Tensor exp(const Tensor& a) {
  return unary_op("exp", a, [](float x) { return std::exp(x); },
                  [](float, float y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op("log", a, [](float x) { return std::log(x); },
                  [](float x, float) { return 1.0f / x; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op("sigmoid", a, [](float x) { return 1.0f / (1.0f + std::exp(-x)); },
                  [](float, float y) { return y * (1.0f - y); });
}

Tensor silu(const Tensor& a) {
  return unary_op("silu", a,
                  [](float x) { return x / (1.0f + std::exp(-x)); },
                  [](float x, float) {
                    const float s = 1.0f / (1.0f + std::exp(-x));
                    return s * (1.0f + x * (1.0f - s));
                  });
}

Tensor softplus(const Tensor& a) {
  return unary_op("softplus", a,
                  [](float x) { return x > 20.0f ? x : std::log1p(std::exp(x)); },
                  [](float x, float) { return 1.0f / (1.0f + std::exp(-x)); });
}

// ---------------------------------------------------------------- matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined("matmul", a);
  require_defined("matmul", b);
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    shape_fail("matmul", "cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  NodePtr node = new_result({m, n}, "matmul", {a, b});
  kernels::mm_nn(a.data(), b.data(), node->data.data(), m, k, n);
  if (node->requires_grad) {
    TensorNode* self = node.get();
    TensorNode* na = a.node().get();
    TensorNode* nb = b.node().get();
    bool ga = a.requires_grad(), gb = b.requires_grad();
    node->backprop = [self, na, nb, ga, gb, m, k, n]() {
      if (ga) {
        na->ensure_grad();
        kernels::mm_nt(self->grad.data(), nb->data.data(), na->grad.data(), m, n, k);
      }
      if (gb) {
        nb->ensure_grad();
        kernels::mm_tn(na->data.data(), self->grad.data(), nb->grad.data(), k, m, n);
      }
    };
  }
  return Tensor(std::move(node));
}

Tensor transpose(const Tensor& a) {
  require_defined("transpose", a);
  if (a.ndim() != 2) shape_fail("transpose", "expects 2-D, got " + shape_str(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  NodePtr node = new_result({n, m}, "transpose", {a});
  const float* x = a.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      node->data[static_cast<size_t>(j) * m + i] = x[static_cast<size_t>(i) * n + j];
  if (node->requires_grad) {
    TensorNode* self = node.get();
    TensorNode* na = a.node().get();
    node->backprop = [self, na, m, n]() {
      na->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          na->grad[static_cast<size_t>(i) * n + j] += self->grad[static_cast<size_t>(j) * m + i];
    };
  }
  return Tensor(std::move(node));
}

// ---------------------------------------------------------------- softmax family

Tensor softmax_last(const Tensor& a) {
  require_defined("softmax_last", a);
  auto [rows, cols] = as_rows_cols(a);
  if (cols == 0) shape_fail("softmax_last", "empty last axis in " + shape_str(a.shape()));
  NodePtr node = new_result(a.shape(), "softmax_last", {a});
  const float* x = a.data();
  for (int r = 0; r < rows; ++r) {
    const float* row = x + static_cast<size_t>(r) * cols;
    float* out = node->data.data() + static_cast<size_t>(r) * cols;
    float mx = row[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    double denom = 0.0;
    for (int c = 0; c < cols; ++c) {
      out[c] = std::exp(row[c] - mx);
      denom += out[c];
    }
    const float inv = static_cast<float>(1.0 / denom);
    for (int c = 0; c < cols; ++c) out[c] *= inv;
  }
  if (node->requires_grad) {
    TensorNode* self = node.get();
    TensorNode* na = a.node().get();
    node->backprop = [self, na, rows, cols]() {
      na->ensure_grad();
      for (int r = 0; r < rows; ++r) {
        const float* y = self->data.data() + static_cast<size_t>(r) * cols;
        const float* dy = self->grad.data() + static_cast<size_t>(r) * cols;
        float* dx = na->grad.data() + static_cast<size_t>(r) * cols;
        double dot = 0.0;
        for (int c = 0; c < cols; ++c) dot += static_cast<double>(y[c]) * dy[c];
        for (int c = 0; c < cols; ++c) dx[c] += y[c] * (dy[c] - static_cast<float>(dot));
      }
    };
  }
  return Tensor(std::move(node));
}

Tensor causal_softmax(const Tensor& scores, int past) {
  require_defined("causal_softmax", scores);
  if (scores.ndim() != 2) shape_fail("causal_softmax", "expects 2-D, got " + shape_str(scores.shape()));
  if (past < 0) shape_fail("causal_softmax", "negative past length");
  const int t = scores.dim(0), s = scores.dim(1);
  if (past + 1 > s)
    shape_fail("causal_softmax", "past " + std::to_string(past) + " exceeds key length " +
                                     std::to_string(s));
  NodePtr node = new_result(scores.shape(), "causal_softmax", {scores});
  const float* x = scores.data();
  for (int i = 0; i < t; ++i) {
    const int active = std::min(s, past + i + 1);
    const float* row = x + static_cast<size_t>(i) * s;
    float* out = node->data.data() + static_cast<size_t>(i) * s;
    float mx = row[0];
    for (int c = 1; c < active; ++c) mx = std::max(mx, row[c]);
    double denom = 0.0;
    for (int c = 0; c < active; ++c) {
      out[c] = std::exp(row[c] - mx);
      denom += out[c];
    }
    const float inv = static_cast<float>(1.0 / denom);
    for (int c = 0; c < active; ++c) out[c] *= inv;
    for (int c = active; c < s; ++c) out[c] = 0.0f;
  }
  if (node->requires_grad) {
    TensorNode* self = node.get();
    TensorNode* na = scores.node().get();
    node->backprop = [self, na, t, s, past]() {
      na->ensure_grad();
      for (int i = 0; i < t; ++i) {
        const int active = std::min(s, past + i + 1);
        const float* y = self->data.data() + static_cast<size_t>(i) * s;
        const float* dy = self->grad.data() + static_cast<size_t>(i) * s;
        float* dx = na->grad.data() + static_cast<size_t>(i) * s;
        double dot = 0.0;
        for (int c = 0; c < active; ++c) dot += static_cast<double>(y[c]) * dy[c];
        for (int c = 0; c < active; ++c) dx[c] += y[c] * (dy[c] - static_cast<float>(dot));
      }
    };
  }
  return Tensor(std::move(node));
}

// ---------------------------------------------------------------- norm / conv

Tensor rms_norm(const Tensor& x, const Tensor& weight, float eps) {
  require_defined("rms_norm", x);
  require_defined("rms_norm", weight);
  auto [rows, cols] = as_rows_cols(x);
  if (weight.ndim() != 1 || weight.dim(0) != cols)
    shape_fail("rms_norm", "weight " + shape_str(weight.shape()) + " does not match last dim of " +
                               shape_str(x.shape()));
  NodePtr node = new_result(x.shape(), "rms_norm", {x, weight});
  const float* px = x.data();
  const float* pw = weight.data();
  std::vector<float> inv_rms(static_cast<size_t>(rows));
  for (int r = 0; r < rows; ++r) {
    const float* row = px + static_cast<size_t>(r) * cols;
    double ss = 0.0;
    for (int c = 0; c < cols; ++c) ss += static_cast<double>(row[c]) * row[c];
    const float ir = static_cast<float>(1.0 / std::sqrt(ss / cols + eps));
    inv_rms[static_cast<size_t>(r)] = ir;
    float* out = node->data.data() + static_cast<size_t>(r) * cols;
    for (int c = 0; c < cols; ++c) out[c] = row[c] * ir * pw[c];
  }
  if (node->requires_grad) {
    TensorNode* self = node.get();
    TensorNode* nx = x.node().get();
    TensorNode* nw = weight.node().get();
    bool gx = x.requires_grad(), gw = weight.requires_grad();
    node->backprop = [self, nx, nw, gx, gw, rows, cols, saved = std::move(inv_rms)]() {
      if (gx) nx->ensure_grad();
      if (gw) nw->ensure_grad();
      for (int r = 0; r < rows; ++r) {
        const float* xi = nx->data.data() + static_cast<size_t>(r) * cols;
        const float* dy = self->grad.data() + static_cast<size_t>(r) * cols;
        const float* w = nw->data.data();
        const float ir = saved[static_cast<size_t>(r)];
        if (gw) {
          for (int c = 0; c < cols; ++c) nw->grad[c] += dy[c] * xi[c] * ir;
        }
        if (gx) {
          double dot = 0.0;
          for (int c = 0; c < cols; ++c) dot += static_cast<double>(dy[c]) * w[c] * xi[c];
          const float k = static_cast<float>(dot) * ir * ir * ir / cols;
          float* dx = nx->grad.data() + static_cast<size_t>(r) * cols;
          for (int c = 0; c < cols; ++c) dx[c] += dy[c] * w[c] * ir - xi[c] * k;
        }
      }
    };
  }
  return Tensor(std::move(node));
}

Tensor causal_conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  require_defined("causal_conv1d", x);
  require_defined("causal_conv1d", kernel);
  if (x.ndim() != 2 || kernel.ndim() != 2 || x.dim(1) != kernel.dim(1))
    shape_fail("causal_conv1d", "x " + shape_str(x.shape()) + " vs kernel " + shape_str(kernel.shape()));
  const int t = x.dim(0), ch = x.dim(1), w = kernel.dim(0);
  const bool has_bias = bias.defined();
  if (has_bias && (bias.ndim() != 1 || bias.dim(0) != ch))
    shape_fail("causal_conv1d", "bias " + shape_str(bias.shape()) + " vs channels " + std::to_string(ch));
  NodePtr node = has_bias ? new_result({t, ch}, "causal_conv1d", {x, kernel, bias})
                          : new_result({t, ch}, "causal_conv1d", {x, kernel});
  const float* px = x.data();
  const float* pk = kernel.data();
  for (int i = 0; i < t; ++i) {
    float* out = node->data.data() + static_cast<size_t>(i) * ch;
    if (has_bias)
      std::memcpy(out, bias.data(), sizeof(float) * static_cast<size_t>(ch));
    for (int j = 0; j < w; ++j) {
      const int src = i - (w - 1 - j);
      if (src < 0) continue;
      const float* xr = px + static_cast<size_t>(src) * ch;
      const float* kr = pk + static_cast<size_t>(j) * ch;
      for (int c = 0; c < ch; ++c) out[c] += kr[c] * xr[c];
    }
  }
  if (node->requires_grad) {
    TensorNode* self = node.get();
    TensorNode* nx = x.node().get();
    TensorNode* nk = kernel.node().get();
    TensorNode* nb = has_bias ? bias.node().get() : nullptr;
    bool gx = x.requires_grad(), gk = kernel.requires_grad();
    bool gb = has_bias && bias.requires_grad();
    node->backprop = [self, nx, nk, nb, gx, gk, gb, t, ch, w]() {
      if (gx) nx->ensure_grad();
      if (gk) nk->ensure_grad();
      if (gb) nb->ensure_grad();
      for (int i = 0; i < t; ++i) {
        const float* dy = self->grad.data() + static_cast<size_t>(i) * ch;
        if (gb)
          for (int c = 0; c < ch; ++c) nb->grad[c] += dy[c];
        for (int j = 0; j < w; ++j) {
          const int src = i - (w - 1 - j);
          if (src < 0) continue;
          if (gk) {
            const float* xr = nx->data.data() + static_cast<size_t>(src) * ch;
            float* dk = nk->grad.data() + static_cast<size_t>(j) * ch;
            for (int c = 0; c < ch; ++c) dk[c] += dy[c] * xr[c];
          }
          if (gx) {
            const float* kr = nk->data.data() + static_cast<size_t>(j) * ch;
            float* dx = nx->grad.data() + static_cast<size_t>(src) * ch;
            for (int c = 0; c < ch; ++c) dx[c] += dy[c] * kr[c];
          }
        }
      }
    };
  }
  return Tensor(std::move(node));
}

// ---------------------------------------------------------------- slicing

namespace {

// decompose shape around an axis: (outer, axis_dim, inner)
struct AxisView {
  size_t outer, axis, inner;
};

AxisView axis_view(const Shape& s, int axis, const char* op) {
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    shape_fail(op, "axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisView v{1, static_cast<size_t>(s[static_cast<size_t>(axis)]), 1};
  for (int i = 0; i < axis; ++i) v.outer *= static_cast<size_t>(s[static_cast<size_t>(i)]);
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i)
    v.inner *= static_cast<size_t>(s[i]);
  return v;
}

}  // namespace

Tensor slice(const Tensor& x, int axis, int start, int len) {
  require_defined("slice", x);
  AxisView v = axis_view(x.shape(), axis, "slice");
  if (start < 0 || len < 0 || static_cast<size_t>(start) + static_cast<size_t>(len) > v.axis)
    shape_fail("slice", "range [" + std::to_string(start) + "," + std::to_string(start + len) +
                            ") out of bounds for axis size " + std::to_string(v.axis) + " in " +
                            shape_str(x.shape()));
  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] = len;
  NodePtr node = new_result(out_shape, "slice", {x});
  const float* px = x.data();
  const size_t row_in = v.axis * v.inner;
  const size_t row_out = static_cast<size_t>(len) * v.inner;
  for (size_t o = 0; o < v.outer; ++o)
    std::memcpy(node->data.data() + o * row_out,
                px + o * row_in + static_cast<size_t>(start) * v.inner, row_out * sizeof(float));
  if (node->requires_grad) {
    TensorNode* self = node.get();
    TensorNode* nx = x.node().get();
    node->backprop = [self, nx, v, start, len, row_in, row_out]() {
      nx->ensure_grad();
      for (size_t o = 0; o < v.outer; ++o) {
        float* dst = nx->grad.data() + o * row_in + static_cast<size_t>(start) * v.inner;
        const float* src = self->grad.data() + o * row_out;
        for (size_t i = 0; i < row_out; ++i) dst[i] += src[i];
      }
      (void)len;
    };
  }
  return Tensor(std::move(node));
}

Tensor concat(std::span<const Tensor> xs, int axis) {
  if (xs.empty()) shape_fail("concat", "no inputs");
  for (const Tensor& t : xs) require_defined("concat", t);
  const Shape& first = xs[0].shape();
  size_t total_axis = 0;
  for (const Tensor& t : xs) {
    if (t.ndim() != static_cast<int>(first.size()))
      shape_fail("concat", "rank mismatch " + shape_str(first) + " vs " + shape_str(t.shape()));
    for (int i = 0; i < t.ndim(); ++i)
      if (i != axis && t.dim(i) != xs[0].dim(i))
        shape_fail("concat", "shape mismatch " + shape_str(first) + " vs " + shape_str(t.shape()));
    total_axis += static_cast<size_t>(t.dim(axis));
  }
  Shape out_shape = first;
  AxisView v0 = axis_view(first, axis, "concat");
  out_shape[static_cast<size_t>(axis)] = static_cast<int>(total_axis);

  std::vector<Tensor> parents(xs.begin(), xs.end());
  auto node = std::make_shared<TensorNode>();
  node->shape = out_shape;
  node->data.resize(shape_numel(out_shape));
  node->op = "concat";
  bool rg = false;
  for (const Tensor& t : xs) rg = rg || t.requires_grad();
  node->requires_grad = rg;
  if (rg)
    for (const Tensor& t : xs) node->parents.push_back(t.node());

  const size_t row_out = total_axis * v0.inner;
  size_t off = 0;
  for (const Tensor& t : xs) {
    const size_t part = static_cast<size_t>(t.dim(axis)) * v0.inner;
    const float* px = t.data();
    for (size_t o = 0; o < v0.outer; ++o)
      std::memcpy(node->data.data() + o * row_out + off, px + o * part, part * sizeof(float));
    off += part;
  }
  if (rg) {
    TensorNode* self = node.get();
    node->backprop = [self, parents, v0, row_out, axis]() {
      size_t off2 = 0;
      for (const Tensor& t : parents) {
        TensorNode* nx = t.node().get();
        const size_t part =
            static_cast<size_t>(nx->shape[static_cast<size_t>(axis)]) * v0.inner;
        if (t.requires_grad()) {
          nx->ensure_grad();
          for (size_t o = 0; o < v0.outer; ++o) {
            float* dst = nx->grad.data() + o * part;
            const float* src = self->grad.data() + o * row_out + off2;
            for (size_t i = 0; i < part; ++i) dst[i] += src[i];
          }
        }
        off2 += part;
      }
    };
  }
  return Tensor(std::move(node));
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined("reshape", x);
  if (shape_numel(shape) != x.numel())
    shape_fail("reshape", shape_str(x.shape()) + " cannot reshape to " + shape_str(shape));
  NodePtr node = new_result(shape, "reshape", {x});
  node->data.assign(x.data(), x.data() + x.numel());
  if (node->requires_grad) {
    TensorNode* self = node.get();
    TensorNode* nx = x.node().get();
    node->backprop = [self, nx]() {
      nx->ensure_grad();
      for (size_t i = 0; i < self->grad.size(); ++i) nx->grad[i] += self->grad[i];
    };
  }
  return Tensor(std::move(node));
}

// ---------------------------------------------------------------- lookup / losses

Tensor embedding(const Tensor& table, std::span<const int32_t> ids) {
  require_defined("embedding", table);
  if (table.ndim() != 2) shape_fail("embedding", "table must be 2-D, got " + shape_str(table.shape()));
  const int vocab = table.dim(0), width = table.dim(1);
  for (int32_t id : ids)
    if (id < 0 || id >= vocab)
      shape_fail("embedding", "token id " + std::to_string(id) + " out of range [0," +
                                  std::to_string(vocab) + ")");
  NodePtr node = new_result({static_cast<int>(ids.size()), width}, "embedding", {table});
  const float* pt = table.data();
  for (size_t i = 0; i < ids.size(); ++i)
    std::memcpy(node->data.data() + i * static_cast<size_t>(width),
                pt + static_cast<size_t>(ids[i]) * width, sizeof(float) * static_cast<size_t>(width));
  if (node->requires_grad) {
    TensorNode* self = node.get();
    TensorNode* nt = table.node().get();
    std::vector<int32_t> ids_copy(ids.begin(), ids.end());
    node->backprop = [self, nt, ids_copy = std::move(ids_copy), width]() {
      nt->ensure_grad();
      for (size_t i = 0; i < ids_copy.size(); ++i) {
        float* dst = nt->grad.data() + static_cast<size_t>(ids_copy[i]) * width;
        const float* src = self->grad.data() + i * static_cast<size_t>(width);
        for (int c = 0; c < width; ++c) dst[c] += src[c];
      }
    };
  }
  return Tensor(std::move(node));
}

Tensor cross_entropy(const Tensor& logits, std::span<const int32_t> targets,
                     std::span<const uint8_t> mask) {
  require_defined("cross_entropy", logits);
  if (logits.ndim() != 2) shape_fail("cross_entropy", "logits must be 2-D, got " + shape_str(logits.shape()));
  const int t = logits.dim(0), vocab = logits.dim(1);
  if (static_cast<int>(targets.size()) != t)
    shape_fail("cross_entropy", std::to_string(targets.size()) + " targets for " +
                                    std::to_string(t) + " rows");
  if (!mask.empty() && static_cast<int>(mask.size()) != t)
    shape_fail("cross_entropy", "mask length " + std::to_string(mask.size()) + " vs rows " +
                                    std::to_string(t));
  int scored = 0;
  for (int i = 0; i < t; ++i)
    if (mask.empty() || mask[static_cast<size_t>(i)]) ++scored;
  if (scored == 0) shape_fail("cross_entropy", "mask selects no positions");
  for (int i = 0; i < t; ++i) {
    if (!mask.empty() && !mask[static_cast<size_t>(i)]) continue;
    if (targets[static_cast<size_t>(i)] < 0 || targets[static_cast<size_t>(i)] >= vocab)
      shape_fail("cross_entropy", "target id " + std::to_string(targets[static_cast<size_t>(i)]) +
                                      " out of range [0," + std::to_string(vocab) + ")");
  }

  NodePtr node = new_result({1}, "cross_entropy", {logits});
  const float* z = logits.data();
  std::vector<float> probs(static_cast<size_t>(t) * vocab);
  double total = 0.0;
  for (int i = 0; i < t; ++i) {
    const float* row = z + static_cast<size_t>(i) * vocab;
    float* prow = probs.data() + static_cast<size_t>(i) * vocab;
    float mx = row[0];
    for (int c = 1; c < vocab; ++c) mx = std::max(mx, row[c]);
    double denom = 0.0;
    for (int c = 0; c < vocab; ++c) {
      prow[c] = std::exp(row[c] - mx);
      denom += prow[c];
    }
    const float inv = static_cast<float>(1.0 / denom);
    for (int c = 0; c < vocab; ++c) prow[c] *= inv;
    if (mask.empty() || mask[static_cast<size_t>(i)]) {
      const double lse = std::log(denom) + mx;
      total += lse - row[targets[static_cast<size_t>(i)]];
    }
  }
  node->data[0] = static_cast<float>(total / scored);
  if (node->requires_grad) {
    TensorNode* self = node.get();
    TensorNode* nl = logits.node().get();
    std::vector<int32_t> tg(targets.begin(), targets.end());
    std::vector<uint8_t> mk(mask.begin(), mask.end());
    node->backprop = [self, nl, probs = std::move(probs), tg = std::move(tg), mk = std::move(mk),
                      t, vocab, scored]() {
      nl->ensure_grad();
      const float g = self->grad[0] / static_cast<float>(scored);
      for (int i = 0; i < t; ++i) {
        if (!mk.empty() && !mk[static_cast<size_t>(i)]) continue;
        const float* prow = probs.data() + static_cast<size_t>(i) * vocab;
        float* dz = nl->grad.data() + static_cast<size_t>(i) * vocab;
        for (int c = 0; c < vocab; ++c) dz[c] += g * prow[c];
        dz[tg[static_cast<size_t>(i)]] -= g;
      }
    };
  }
  return Tensor(std::move(node));
}

Tensor sum(const Tensor& a) {
  require_defined("sum", a);
  NodePtr node = new_result({1}, "sum", {a});
  double acc = 0.0;
  for (float v : a.values()) acc += v;
  node->data[0] = static_cast<float>(acc);
  if (node->requires_grad) {
    TensorNode* self = node.get();
    TensorNode* na = a.node().get();
    node->backprop = [self, na]() {
      na->ensure_grad();
      for (auto& g : na->grad) g += self->grad[0];
    };
  }
  return Tensor(std::move(node));
}

Tensor mean(const Tensor& a) {
  require_defined("mean", a);
  if (a.numel() == 0) shape_fail("mean", "empty tensor");
  NodePtr node = new_result({1}, "mean", {a});
  double acc = 0.0;
  for (float v : a.values()) acc += v;
  const float inv = 1.0f / static_cast<float>(a.numel());
  node->data[0] = static_cast<float>(acc) * inv;
  if (node->requires_grad) {
    TensorNode* self = node.get();
    TensorNode* na = a.node().get();
    node->backprop = [self, na, inv]() {
      na->ensure_grad();
      for (auto& g : na->grad) g += self->grad[0] * inv;
    };
  }
  return Tensor(std::move(node));
}

// ---------------------------------------------------------------- rope

Tensor rope(const Tensor& x, int d_head, int pos0, float base) {
  require_defined("rope", x);
  if (x.ndim() != 2) shape_fail("rope", "expects 2-D, got " + shape_str(x.shape()));
  const int t = x.dim(0), width = x.dim(1);
  if (d_head <= 0 || d_head % 2 != 0 || width % d_head != 0)
    shape_fail("rope", "head width " + std::to_string(d_head) + " incompatible with " +
                           shape_str(x.shape()));
  const int n_heads = width / d_head;
  const int half = d_head / 2;
  // trig table per (position, pair)
  std::vector<float> cos_tab(static_cast<size_t>(t) * half), sin_tab(static_cast<size_t>(t) * half);
  for (int i = 0; i < t; ++i) {
    const double pos = pos0 + i;
    for (int j = 0; j < half; ++j) {
      const double theta = pos * std::pow(static_cast<double>(base), -2.0 * j / d_head);
      cos_tab[static_cast<size_t>(i) * half + j] = static_cast<float>(std::cos(theta));
      sin_tab[static_cast<size_t>(i) * half + j] = static_cast<float>(std::sin(theta));
    }
  }
  NodePtr node = new_result(x.shape(), "rope", {x});
  const float* px = x.data();
  for (int i = 0; i < t; ++i) {
    for (int h = 0; h < n_heads; ++h) {
      const size_t off = static_cast<size_t>(i) * width + static_cast<size_t>(h) * d_head;
      for (int j = 0; j < half; ++j) {
        const float c = cos_tab[static_cast<size_t>(i) * half + j];
        const float s = sin_tab[static_cast<size_t>(i) * half + j];
        const float a = px[off + 2 * j], b = px[off + 2 * j + 1];
        node->data[off + 2 * j] = a * c - b * s;
        node->data[off + 2 * j + 1] = a * s + b * c;
      }
    }
  }
  if (node->requires_grad) {
    TensorNode* self = node.get();
    TensorNode* nx = x.node().get();
    node->backprop = [self, nx, cos_tab = std::move(cos_tab), sin_tab = std::move(sin_tab), t,
                      width, n_heads, d_head, half]() {
      nx->ensure_grad();
      for (int i = 0; i < t; ++i) {
        for (int h = 0; h < n_heads; ++h) {
          const size_t off = static_cast<size_t>(i) * width + static_cast<size_t>(h) * d_head;
          for (int j = 0; j < half; ++j) {
            const float c = cos_tab[static_cast<size_t>(i) * half + j];
            const float s = sin_tab[static_cast<size_t>(i) * half + j];
            const float da = self->grad[off + 2 * j], db = self->grad[off + 2 * j + 1];
            nx->grad[off + 2 * j] += da * c + db * s;
            nx->grad[off + 2 * j + 1] += -da * s + db * c;
          }
        }
      }
    };
  }
  return Tensor(std::move(node));
}

// ---------------------------------------------------------------- KL divergence

Tensor kl_div(const Tensor& z_student, const Tensor& z_teacher, float tau, KlDirection direction) {
  require_defined("kl_div", z_student);
  require_defined("kl_div", z_teacher);
  if (z_student.shape() != z_teacher.shape())
    shape_fail("kl_div", "student " + shape_str(z_student.shape()) + " vs teacher " +
                             shape_str(z_teacher.shape()));
  if (!(tau > 0.0f)) throw NumericError("kl_div: tau must be > 0");
  auto [rows, cols] = as_rows_cols(z_student);
  if (cols < 2) shape_fail("kl_div", "need at least 2 classes, got " + shape_str(z_student.shape()));

  // teacher side is a constant: gradients flow to the student only
  NodePtr node = new_result({1}, "kl_div", {z_student});
  const float* zs = z_student.data();
  const float* zt = z_teacher.data();
  std::vector<float> p(static_cast<size_t>(rows) * cols);   // student probs
  std::vector<float> lpq(static_cast<size_t>(rows) * cols); // log p - log q
  std::vector<float> q(static_cast<size_t>(rows) * cols);   // teacher probs
  auto log_softmax_row = [cols](const float* row, float tau_, float* out) {
    float mx = row[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    double denom = 0.0;
    for (int c = 0; c < cols; ++c) denom += std::exp((row[c] - mx) / tau_);
    const float lse = static_cast<float>(std::log(denom)) + 0.0f;
    for (int c = 0; c < cols; ++c) out[c] = (row[c] - mx) / tau_ - lse;
  };
  double total = 0.0;
  std::vector<float> lp_row(static_cast<size_t>(cols)), lq_row(static_cast<size_t>(cols));
  for (int r = 0; r < rows; ++r) {
    log_softmax_row(zs + static_cast<size_t>(r) * cols, tau, lp_row.data());
    log_softmax_row(zt + static_cast<size_t>(r) * cols, tau, lq_row.data());
    double row_kl = 0.0;
    for (int c = 0; c < cols; ++c) {
      const size_t idx = static_cast<size_t>(r) * cols + c;
      p[idx] = std::exp(lp_row[static_cast<size_t>(c)]);
      q[idx] = std::exp(lq_row[static_cast<size_t>(c)]);
      lpq[idx] = lp_row[static_cast<size_t>(c)] - lq_row[static_cast<size_t>(c)];
      if (direction == KlDirection::kReverse)
        row_kl += static_cast<double>(p[idx]) * lpq[idx];
      else
        row_kl += static_cast<double>(q[idx]) * (-lpq[idx]);
    }
    total += row_kl;
  }
  node->data[0] = static_cast<float>(total / rows);
  if (node->requires_grad) {
    TensorNode* self = node.get();
    TensorNode* ns = z_student.node().get();
    node->backprop = [self, ns, p = std::move(p), q = std::move(q), lpq = std::move(lpq), rows,
                      cols, tau, direction]() {
      ns->ensure_grad();
      const float g = self->grad[0] / (static_cast<float>(rows) * tau);
      for (int r = 0; r < rows; ++r) {
        const size_t base = static_cast<size_t>(r) * cols;
        float* dz = ns->grad.data() + base;
        if (direction == KlDirection::kReverse) {
          double row_kl = 0.0;
          for (int c = 0; c < cols; ++c) row_kl += static_cast<double>(p[base + c]) * lpq[base + c];
          for (int c = 0; c < cols; ++c)
            dz[c] += g * p[base + c] * (lpq[base + c] - static_cast<float>(row_kl));
        } else {
          for (int c = 0; c < cols; ++c) dz[c] += g * (p[base + c] - q[base + c]);
        }
      }
    };
  }
  return Tensor(std::move(node));
}

// ---------------------------------------------------------------- selective scan

Tensor selective_scan(const Tensor& x, const Tensor& dt, const Tensor& B, const Tensor& C_coef,
                      const Tensor& a_log, int n_heads) {
  require_defined("selective_scan", x);
  require_defined("selective_scan", dt);
  require_defined("selective_scan", B);
  require_defined("selective_scan", C_coef);
  require_defined("selective_scan", a_log);
  if (x.ndim() != 2 || dt.shape() != x.shape())
    shape_fail("selective_scan", "x " + shape_str(x.shape()) + " vs dt " + shape_str(dt.shape()));
  const int t = x.dim(0), ch = x.dim(1);
  if (a_log.ndim() != 2 || a_log.dim(0) != ch)
    shape_fail("selective_scan", "a_log " + shape_str(a_log.shape()) + " vs channels " +
                                     std::to_string(ch));
  const int n_state = a_log.dim(1);
  if (n_heads <= 0 || ch % n_heads != 0)
    shape_fail("selective_scan", std::to_string(n_heads) + " heads do not divide " +
                                     std::to_string(ch) + " channels");
  const int head_width = ch / n_heads;
  const int bc_cols = n_heads * n_state;
  if (B.ndim() != 2 || B.dim(0) != t || B.dim(1) != bc_cols)
    shape_fail("selective_scan", "B " + shape_str(B.shape()) + " vs expected (" + std::to_string(t) +
                                     "," + std::to_string(bc_cols) + ")");
  if (C_coef.shape() != B.shape())
    shape_fail("selective_scan", "C " + shape_str(C_coef.shape()) + " vs B " + shape_str(B.shape()));

  NodePtr node = new_result({t, ch}, "selective_scan", {x, dt, B, C_coef, a_log});
  const float* px = x.data();
  const float* pdt = dt.data();
  const float* pb = B.data();
  const float* pc = C_coef.data();
  const float* pal = a_log.data();

  const size_t plane = static_cast<size_t>(ch) * n_state;
  // A = -exp(a_log); saved per (c,n)
  std::vector<float> a_val(plane);
  for (size_t i = 0; i < plane; ++i) a_val[i] = -std::exp(pal[i]);
  // saved trajectories for the backward pass
  std::vector<float> h_all(static_cast<size_t>(t) * plane);
  std::vector<float> abar_all(static_cast<size_t>(t) * plane);

  for (int i = 0; i < t; ++i) {
    const float* h_prev = i > 0 ? h_all.data() + static_cast<size_t>(i - 1) * plane : nullptr;
    float* h_cur = h_all.data() + static_cast<size_t>(i) * plane;
    float* abar = abar_all.data() + static_cast<size_t>(i) * plane;
    float* y = node->data.data() + static_cast<size_t>(i) * ch;
    for (int c = 0; c < ch; ++c) {
      const int head = c / head_width;
      const float delta = pdt[static_cast<size_t>(i) * ch + c];
      const float xv = px[static_cast<size_t>(i) * ch + c];
      const float* brow = pb + static_cast<size_t>(i) * bc_cols + static_cast<size_t>(head) * n_state;
      const float* crow = pc + static_cast<size_t>(i) * bc_cols + static_cast<size_t>(head) * n_state;
      const size_t coff = static_cast<size_t>(c) * n_state;
      float acc = 0.0f;
      for (int n = 0; n < n_state; ++n) {
        const float ab = std::exp(delta * a_val[coff + n]);
        abar[coff + n] = ab;
        const float hp = h_prev ? h_prev[coff + n] : 0.0f;
        const float h = ab * hp + delta * brow[n] * xv;
        h_cur[coff + n] = h;
        acc += crow[n] * h;
      }
      y[c] = acc;
    }
  }

  if (node->requires_grad) {
    TensorNode* self = node.get();
    TensorNode* nx = x.node().get();
    TensorNode* ndt = dt.node().get();
    TensorNode* nb = B.node().get();
    TensorNode* nc = C_coef.node().get();
    TensorNode* nal = a_log.node().get();
    bool gx = x.requires_grad(), gdt = dt.requires_grad(), gb = B.requires_grad(),
         gc = C_coef.requires_grad(), gal = a_log.requires_grad();
    node->backprop = [self, nx, ndt, nb, nc, nal, gx, gdt, gb, gc, gal, t, ch, n_state, head_width,
                      bc_cols, plane, a_val = std::move(a_val), h_all = std::move(h_all),
                      abar_all = std::move(abar_all)]() {
      if (gx) nx->ensure_grad();
      if (gdt) ndt->ensure_grad();
      if (gb) nb->ensure_grad();
      if (gc) nc->ensure_grad();
      if (gal) nal->ensure_grad();
      std::vector<float> gh(plane, 0.0f);  // dL/dh at the step being processed
      for (int i = t - 1; i >= 0; --i) {
        const float* h_cur = h_all.data() + static_cast<size_t>(i) * plane;
        const float* h_prev = i > 0 ? h_all.data() + static_cast<size_t>(i - 1) * plane : nullptr;
        const float* abar = abar_all.data() + static_cast<size_t>(i) * plane;
        const float* abar_next =
            i + 1 < t ? abar_all.data() + static_cast<size_t>(i + 1) * plane : nullptr;
        const float* dy = self->grad.data() + static_cast<size_t>(i) * ch;
        for (int c = 0; c < ch; ++c) {
          const int head = c / head_width;
          const size_t coff = static_cast<size_t>(c) * n_state;
          const size_t bcoff = static_cast<size_t>(i) * bc_cols + static_cast<size_t>(head) * n_state;
          const float delta = ndt->data[static_cast<size_t>(i) * ch + c];
          const float xv = nx->data[static_cast<size_t>(i) * ch + c];
          const float gy = dy[c];
          float gx_acc = 0.0f, gdt_acc = 0.0f;
          for (int n = 0; n < n_state; ++n) {
            // gh carries the contribution from step i+1; add this step's output
            float ghn = gy * nc->data[bcoff + n];
            if (abar_next) ghn += abar_next[coff + n] * gh[coff + n];
            gh[coff + n] = ghn;
            const float hp = h_prev ? h_prev[coff + n] : 0.0f;
            const float bv = nb->data[bcoff + n];
            if (gc) nc->grad[bcoff + n] += gy * h_cur[coff + n];
            if (gb) nb->grad[bcoff + n] += ghn * delta * xv;
            gx_acc += ghn * delta * bv;
            const float dab = ghn * hp * abar[coff + n];  // d/d(delta*A) piece
            gdt_acc += dab * a_val[coff + n] + ghn * bv * xv;
            if (gal) nal->grad[coff + n] += dab * delta * a_val[coff + n];
          }
          if (gx) nx->grad[static_cast<size_t>(i) * ch + c] += gx_acc;
          if (gdt) ndt->grad[static_cast<size_t>(i) * ch + c] += gdt_acc;
        }
      }
    };
  }
  return Tensor(std::move(node));
}

// ---------------------------------------------------------------- backward driver

const std::vector<float>* GradientMap::find(const Tensor& t) const {
  auto it = index_.find(t.node().get());
  if (it == index_.end()) return nullptr;
  return &leaves_[it->second]->grad;
}

void GradientMap::insert(NodePtr leaf) {
  index_.emplace(leaf.get(), leaves_.size());
  leaves_.push_back(std::move(leaf));
}

GradientMap backward(const Tensor& loss) {
  if (!loss.defined()) throw ShapeError("backward: undefined loss");
  if (loss.numel() != 1)
    throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));

  // post-order DFS over grad-requiring nodes; deterministic (follows parent order)
  std::vector<NodePtr> order;
  std::unordered_set<const TensorNode*> visited;
  struct Frame {
    NodePtr node;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  if (loss.requires_grad()) stack.push_back({loss.node(), 0});
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent == 0) {
      if (visited.count(f.node.get())) {
        stack.pop_back();
        continue;
      }
      visited.insert(f.node.get());
    }
    if (f.next_parent < f.node->parents.size()) {
      NodePtr p = f.node->parents[f.next_parent++];
      if (p->requires_grad && !visited.count(p.get())) stack.push_back({std::move(p), 0});
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  GradientMap result;
  if (order.empty()) return result;  // loss does not require grad: nothing to do

  loss.node()->ensure_grad();
  loss.node()->grad[0] = 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = it->get();
    n->ensure_grad();  // nodes with no incoming grad still run with zeros
    if (n->backprop) n->backprop();
  }
  for (const NodePtr& n : order) {
    if (n->parents.empty() && n->requires_grad) result.insert(n);
  }
  // free the tape: activations release with the last handle, and the graph
  // cannot be walked twice
  for (const NodePtr& n : order) {
    n->parents.clear();
    n->backprop = nullptr;
  }
  return result;
}

// ---------------------------------------------------------------- grad check

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                           float eps) {
  GradCheckReport report;
  Tensor x = point.clone();
  x.set_requires_grad(true);
  Tensor loss = f(x);
  if (loss.numel() != 1)
    throw ShapeError("grad_check: function must be scalar-valued, got " + shape_str(loss.shape()));
  backward(loss);
  std::vector<float> analytic = x.grad();
  if (analytic.empty()) analytic.assign(point.numel(), 0.0f);

  float g_scale = 0.0f;
  for (float g : analytic) {
    if (std::isnan(g)) report.nan_in_analytic = true;
    g_scale = std::max(g_scale, std::abs(g));
  }

  Tensor probe = point.detach();
  for (size_t i = 0; i < probe.numel(); ++i) {
    const float orig = probe.data()[i];
    probe.data()[i] = orig + eps;
    const float fp = f(probe).item();
    probe.data()[i] = orig - eps;
    const float fm = f(probe).item();
    probe.data()[i] = orig;
    const float numeric = (fp - fm) / (2.0f * eps);
    if (std::isnan(numeric)) {
      report.nan_in_numeric = true;
      continue;
    }
    if (std::isnan(analytic[i])) continue;
    const float abs_err = std::abs(analytic[i] - numeric);
    const float denom = std::abs(analytic[i]) + std::abs(numeric) + 1e-4f * g_scale + 1e-12f;
    report.max_abs_err = std::max(report.max_abs_err, abs_err);
    report.max_rel_err = std::max(report.max_rel_err, abs_err / denom);
  }
  return report;
}

}  // namespace hybridlm
