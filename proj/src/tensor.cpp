#include "armamba/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace armamba {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

void TensorImpl::ensure_grad() {
  if (!grad) {
    grad = std::make_shared<Storage>(size_t(numel()) * dtype_size(dtype));
    std::memset(grad->raw(), 0, grad->size);
  }
}

namespace {
thread_local bool g_no_grad = false;
}

NoGradGuard::NoGradGuard() : prev_(g_no_grad) { g_no_grad = true; }
NoGradGuard::~NoGradGuard() { g_no_grad = prev_; }
bool NoGradGuard::active() { return g_no_grad; }

Tensor Tensor::empty(Shape shape, DType dtype, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->dtype = dtype;
  impl->storage = std::make_shared<Storage>(size_t(impl->numel()) * dtype_size(dtype));
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape, DType dtype, bool requires_grad) {
  Tensor t = empty(std::move(shape), dtype, requires_grad);
  std::memset(t.impl()->storage->raw(), 0, t.impl()->storage->size);
  return t;
}

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  Tensor t = empty(std::move(shape), dtype);
  if (dtype == DType::f32)
    std::fill_n(t.data<float>().data(), t.numel(), float(value));
  else
    std::fill_n(t.data<double>().data(), t.numel(), value);
  return t;
}

Tensor Tensor::from_data(Shape shape, const std::vector<double>& values, DType dtype) {
  Tensor t = empty(std::move(shape), dtype);
  if (int64_t(values.size()) != t.numel())
    fail(ErrorKind::dimension, "from_data: value count does not match shape");
  for (int64_t i = 0; i < t.numel(); ++i) t.set(i, values[size_t(i)]);
  return t;
}

Tensor Tensor::scalar(double value, DType dtype) { return from_data({}, {value}, dtype); }

Tensor Tensor::randn(Shape shape, Rng& rng, double std_dev, DType dtype, bool requires_grad) {
  Tensor t = empty(std::move(shape), dtype, requires_grad);
  for (int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.normal() * std_dev);
  return t;
}

Tensor Tensor::glorot(Shape shape, Rng& rng, DType dtype, bool requires_grad) {
  if (shape.size() != 2) fail(ErrorKind::contract, "glorot: expects a rank-2 weight shape");
  const double std_dev = std::sqrt(2.0 / double(shape[0] + shape[1]));
  return randn(std::move(shape), rng, std_dev, dtype, requires_grad);
}

Tensor Tensor::rand_uniform(Shape shape, Rng& rng, double lo, double hi, DType dtype,
                            bool requires_grad) {
  Tensor t = empty(std::move(shape), dtype, requires_grad);
  for (int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.uniform(lo, hi));
  return t;
}

double Tensor::item() const {
  if (numel() != 1) fail(ErrorKind::contract, "item(): tensor has " + std::to_string(numel()) + " elements");
  return at(0);
}

double Tensor::at(int64_t flat) const {
  return dtype() == DType::f32 ? double(impl_->storage->as<float>()[flat])
                               : impl_->storage->as<double>()[flat];
}

double Tensor::grad_at(int64_t flat) const {
  if (!impl_->grad) return 0.0;
  return dtype() == DType::f32 ? double(impl_->grad->as<float>()[flat])
                               : impl_->grad->as<double>()[flat];
}

void Tensor::set(int64_t flat, double v) {
  if (dtype() == DType::f32)
    impl_->storage->as<float>()[flat] = float(v);
  else
    impl_->storage->as<double>()[flat] = v;
}

void Tensor::zero_grad() const { impl_->grad.reset(); }

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->dtype = impl_->dtype;
  impl->storage = impl_->storage;  // sharing is safe: ops never write inputs
  return Tensor(std::move(impl));
}

Tensor Tensor::clone() const {
  Tensor t = empty(impl_->shape, impl_->dtype);
  std::memcpy(t.impl()->storage->raw(), impl_->storage->raw(), impl_->storage->size);
  return t;
}

Tensor Tensor::to(DType dtype) const {
  Tensor t = empty(impl_->shape, dtype);
  for (int64_t i = 0; i < numel(); ++i) t.set(i, at(i));
  return t;
}

void Tensor::backward() const {
  if (numel() != 1) fail(ErrorKind::contract, "backward(): loss must be scalar, got " + shape_str(shape()));
  if (!impl_->requires_grad)
    fail(ErrorKind::contract, "backward(): loss does not require grad");

  // iterative post-order DFS -> topological order
  std::vector<TensorImpl*> topo;
  std::unordered_set<TensorImpl*> seen;
  std::vector<std::pair<TensorImpl*, size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  seen.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TensorImpl* p = node->parents[idx++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  // Interior grads are per-pass scratch; only leaves accumulate across calls.
  for (TensorImpl* node : topo)
    if (node->backward_fn && node->grad)
      std::memset(node->grad->raw(), 0, node->grad->size);

  impl_->ensure_grad();
  if (dtype() == DType::f32)
    impl_->grad->as<float>()[0] += 1.0f;
  else
    impl_->grad->as<double>()[0] += 1.0;

  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    TensorImpl* node = *it;
    if (node->backward_fn && node->grad) node->backward_fn(*node);
  }
}

Tensor make_op_result(Shape shape, DType dtype, std::vector<Tensor> parents,
                      std::function<void(TensorImpl&)> backward_fn) {
  bool rg = false;
  if (!NoGradGuard::active())
    for (const auto& p : parents) rg = rg || p.requires_grad();
  Tensor out = Tensor::empty(std::move(shape), dtype, rg);
  if (rg) {
    auto& impl = *out.impl();
    impl.parents.reserve(parents.size());
    for (auto& p : parents) impl.parents.push_back(p.impl());
    impl.backward_fn = std::move(backward_fn);
  }
  return out;
}

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype())
    fail(ErrorKind::dtype, std::string(op) + ": dtype mismatch (" + dtype_name(a.dtype()) + " vs " +
                               dtype_name(b.dtype()) + ")");
}

}  // namespace armamba
