#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace kforge {

using Shape = std::vector<std::size_t>;

/// Allocator that leaves doubles uninitialized on resize.
template <class T>
struct UninitAllocator : std::allocator<T> {
  template <class U>
  struct rebind {
    using other = UninitAllocator<U>;
  };
  UninitAllocator() = default;
  template <class U>
  UninitAllocator(const UninitAllocator<U>&) {}
  template <class U>
  void construct(U* p) noexcept {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

/// Thrown when operand shapes disagree.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/*
 * Dense row-major float64 array with optional gradient buffer.
 *
 * A Tensor is a cheap handle: copies alias the same storage, so a parameter
 * handed to several networks is one parameter. Use clone() for a deep copy.
 */
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  /// Storage left uninitialized; for op outputs that overwrite every element.
  static Tensor empty(Shape shape, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<double> data();
  std::span<const double> data() const;
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);

  // The gradient buffer is absent until something accumulates into it.
  bool has_grad() const;
  std::span<double> grad();
  std::span<const double> grad() const;
  std::span<double> ensure_grad();
  void zero_grad();

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  Tensor clone() const;

 private:
  struct Impl {
    Shape shape;
    std::vector<double, UninitAllocator<double>> data;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  const Impl& impl() const;
  Impl& impl();

  std::shared_ptr<Impl> impl_;
};

/*
 * Records differentiable operations in execution order. backward() replays
 * the recorded rules in reverse and consumes the tape; calling it a second
 * time throws instead of double-accumulating gradients.
 */
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(Tensor output, BackwardFn backward);
  void record(std::vector<Tensor> outputs, BackwardFn backward);
  void backward(const Tensor& loss);

  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Entry {
    std::vector<Tensor> outputs;
    BackwardFn backward;
  };
  std::vector<Entry> entries_;
  bool consumed_ = false;
};

}  // namespace kforge
