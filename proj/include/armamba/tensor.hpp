#pragma once

#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "armamba/rng.hpp"

namespace armamba {

enum class ErrorKind {
  dimension,  // shape mismatch
  dtype,
  input,     // bad values (NaN, out-of-range labels, ...)
  contract,  // API misuse (non-scalar backward, wrong scan count, ...)
  config,
  format,   // bad file bytes
  io,
  numeric,  // NaN/Inf escaped into training
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind k, const std::string& msg) { throw Error(k, msg); }

enum class DType : uint8_t { f32 = 0, f64 = 1 };

inline size_t dtype_size(DType t) { return t == DType::f32 ? 4 : 8; }
inline const char* dtype_name(DType t) { return t == DType::f32 ? "f32" : "f64"; }

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s);

// Uninitialized on purpose: op outputs are fully overwritten, and zeroing
// every activation allocation costs real bandwidth at training scale.
struct Storage {
  std::unique_ptr<std::byte[]> data;
  size_t size = 0;
  explicit Storage(size_t n) : data(new std::byte[n]), size(n) {}
  std::byte* raw() { return data.get(); }
  const std::byte* raw() const { return data.get(); }
  template <typename T>
  T* as() {
    return reinterpret_cast<T*>(data.get());
  }
  template <typename T>
  const T* as() const {
    return reinterpret_cast<const T*>(data.get());
  }
};

class Tensor;

// One node of the compute graph: the materialized value plus, when grad is
// required, the parent links and the pull-style backward function. The graph
// is the implicit DAG over parent edges; backward() walks it in reverse
// topological order, visiting each node once.
struct TensorImpl {
  Shape shape;
  DType dtype = DType::f32;
  std::shared_ptr<Storage> storage;
  bool requires_grad = false;
  std::shared_ptr<Storage> grad;  // lazily allocated, same shape/dtype

  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;

  int64_t numel() const { return shape_numel(shape); }
  void ensure_grad();  // allocate + zero if absent
};

// Value-semantic handle over a graph node. Copies share the node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor empty(Shape shape, DType dtype = DType::f32, bool requires_grad = false);
  static Tensor zeros(Shape shape, DType dtype = DType::f32, bool requires_grad = false);
  static Tensor full(Shape shape, double value, DType dtype = DType::f32);
  static Tensor from_data(Shape shape, const std::vector<double>& values, DType dtype = DType::f32);
  static Tensor scalar(double value, DType dtype = DType::f32);
  // N(0, std^2) i.i.d. entries
  static Tensor randn(Shape shape, Rng& rng, double std_dev = 1.0, DType dtype = DType::f32,
                      bool requires_grad = false);
  // Glorot-normal weights for a [fan_in, fan_out] matrix.
  static Tensor glorot(Shape shape, Rng& rng, DType dtype = DType::f32,
                       bool requires_grad = false);
  static Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi,
                             DType dtype = DType::f32, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t dim(size_t i) const { return impl_->shape[i]; }
  size_t rank() const { return impl_->shape.size(); }
  int64_t numel() const { return impl_->numel(); }
  DType dtype() const { return impl_->dtype; }
  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  template <typename T>
  std::span<T> data() {
    return {impl_->storage->as<T>(), size_t(numel())};
  }
  template <typename T>
  std::span<const T> data() const {
    return {impl_->storage->as<const T>(), size_t(numel())};
  }
  template <typename T>
  std::span<T> grad_data() {
    impl_->ensure_grad();
    return {impl_->grad->as<T>(), size_t(numel())};
  }
  bool has_grad() const { return impl_->grad != nullptr; }

  double item() const;              // value of a 1-element tensor
  double at(int64_t flat) const;    // flat read, any dtype
  double grad_at(int64_t flat) const;
  void set(int64_t flat, double v);

  void zero_grad() const;  // drop the grad buffer
  Tensor detach() const;  // same storage, no graph, no grad requirement
  Tensor clone() const;   // deep copy of the value, leaf
  Tensor to(DType dtype) const;  // converting deep copy, leaf

  // Reverse pass from a scalar. Accumulates (+=) into every reachable
  // requires_grad node; a second call without zeroing doubles the grads.
  void backward() const;

  std::shared_ptr<TensorImpl> impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Thread-local guard: ops performed under it never record the tape.
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  static bool active();

 private:
  bool prev_;
};

// Builds a node; wires parents/backward only when grad is actually required.
Tensor make_op_result(Shape shape, DType dtype, std::vector<Tensor> parents,
                      std::function<void(TensorImpl&)> backward_fn);

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op);

}  // namespace armamba
