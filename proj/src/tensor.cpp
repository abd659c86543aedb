#include "kforge/tensor.hpp"

#include <algorithm>
#include <sstream>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace kforge {
namespace {

#ifdef __GLIBC__
// Activations are multi-megabyte and freed every step; keep them on the heap
// instead of letting each allocation fault fresh pages in from the kernel.
const bool kAllocatorTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
  return true;
}();
#endif

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_to_string(shape));
  }
  auto impl = std::make_shared<Impl>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_to_string(shape));
  }
  if (values.size() != shape_numel(shape)) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     shape_to_string(shape));
  }
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data.assign(values.begin(), values.end());
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

Tensor Tensor::empty(Shape shape, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_to_string(shape));
  }
  auto impl = std::make_shared<Impl>();
  impl->data.resize(shape_numel(shape));
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

const Tensor::Impl& Tensor::impl() const {
  if (!impl_) throw std::logic_error("use of undefined tensor");
  return *impl_;
}

Tensor::Impl& Tensor::impl() {
  if (!impl_) throw std::logic_error("use of undefined tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) throw ShapeError("axis out of range for shape " + shape_to_string(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return impl().data.size(); }

std::span<double> Tensor::data() { return impl().data; }
std::span<const double> Tensor::data() const { return impl().data; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() needs a single-element tensor, got " + shape_to_string(shape()));
  return impl().data[0];
}

bool Tensor::requires_grad() const { return impl().requires_grad; }
void Tensor::set_requires_grad(bool flag) { impl().requires_grad = flag; }

bool Tensor::has_grad() const { return !impl().grad.empty(); }
std::span<double> Tensor::grad() { return impl().grad; }
std::span<const double> Tensor::grad() const { return impl().grad; }

std::span<double> Tensor::ensure_grad() {
  Impl& i = impl();
  if (i.grad.empty()) i.grad.assign(i.data.size(), 0.0);
  return i.grad;
}

void Tensor::zero_grad() {
  Impl& i = impl();
  i.grad.clear();
  i.grad.shrink_to_fit();
}

Tensor Tensor::clone() const {
  auto copy = std::make_shared<Impl>(impl());
  return Tensor(std::move(copy));
}

void Tape::record(Tensor output, BackwardFn backward) {
  record(std::vector<Tensor>{std::move(output)}, std::move(backward));
}

void Tape::record(std::vector<Tensor> outputs, BackwardFn backward) {
  if (consumed_) throw std::logic_error("cannot record onto a consumed tape");
  entries_.push_back({std::move(outputs), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw std::logic_error("tape already consumed by a previous backward()");
  if (!loss.defined() || loss.numel() != 1) throw ShapeError("backward() needs a scalar loss");
  auto it = std::find_if(entries_.begin(), entries_.end(), [&](const Entry& e) {
    return std::any_of(e.outputs.begin(), e.outputs.end(), [&](const Tensor& t) { return t.same_storage(loss); });
  });
  if (it == entries_.end()) throw std::invalid_argument("loss was not produced on this tape");

  consumed_ = true;
  Tensor seed = loss;
  seed.ensure_grad()[0] += 1.0;
  for (auto e = entries_.rbegin(); e != entries_.rend(); ++e) {
    // Outputs that never received gradient lie off the loss's path.
    if (std::none_of(e->outputs.begin(), e->outputs.end(), [](const Tensor& t) { return t.has_grad(); })) continue;
    e->backward();
  }
  entries_.clear();
}

}  // namespace kforge
