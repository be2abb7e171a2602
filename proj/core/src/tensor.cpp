#include "compat/tensor.hpp"

#include <cmath>

#include "compat/error.hpp"

namespace compat {

int64_t shape_size(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

Tensor::Tensor(Shape shape, bool requires_grad) {
  impl_ = std::make_shared<Impl>();
  impl_->data.assign(static_cast<size_t>(shape_size(shape)), 0.0f);
  impl_->shape = std::move(shape);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return Tensor(std::move(shape), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<float> values,
                    bool requires_grad) {
  if (shape_size(shape) != static_cast<int64_t>(values.size()))
    throw UsageError("Tensor::from: " + shape_str(shape) + " needs " +
                     std::to_string(shape_size(shape)) + " values, got " +
                     std::to_string(values.size()));
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->shape = std::move(shape);
  t.impl_->data = std::move(values);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(float v, bool requires_grad) {
  return from({1}, {v}, requires_grad);
}

Tensor::Impl& Tensor::ref() {
  if (!impl_) throw UsageError("use of undefined tensor");
  return *impl_;
}

const Tensor::Impl& Tensor::ref() const {
  if (!impl_) throw UsageError("use of undefined tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return ref().shape; }
int Tensor::dim(int i) const { return ref().shape.at(static_cast<size_t>(i)); }
int Tensor::ndim() const { return static_cast<int>(ref().shape.size()); }
int64_t Tensor::size() const { return static_cast<int64_t>(ref().data.size()); }

float* Tensor::data() { return ref().data.data(); }
const float* Tensor::data() const { return ref().data.data(); }

float Tensor::item() const {
  if (size() != 1) throw UsageError("item() on non-scalar " + shape_str(shape()));
  return ref().data[0];
}

bool Tensor::requires_grad() const { return ref().requires_grad; }
void Tensor::set_requires_grad(bool rg) { ref().requires_grad = rg; }
bool Tensor::has_grad() const { return !ref().grad.empty(); }

float* Tensor::grad() {
  auto& r = ref();
  if (r.grad.empty()) r.grad.assign(r.data.size(), 0.0f);
  return r.grad.data();
}

const float* Tensor::grad() const {
  const auto& r = ref();
  return r.grad.empty() ? nullptr : r.grad.data();
}

void Tensor::zero_grad() {
  auto& r = ref();
  if (!r.grad.empty()) r.grad.assign(r.data.size(), 0.0f);
}

Tensor Tensor::clone() const {
  const auto& r = ref();
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->shape = r.shape;
  t.impl_->data = r.data;
  t.impl_->requires_grad = r.requires_grad;
  return t;
}

bool Tensor::same_storage(const Tensor& other) const {
  return impl_ == other.impl_;
}

void Tape::record(std::function<void()> backward_step) {
  if (grad_enabled_) ops_.push_back(std::move(backward_step));
}

void Tape::backward(const Tensor& loss) {
  if (!grad_enabled_) throw UsageError("backward() on a grad-disabled tape");
  if (loss.size() != 1)
    throw UsageError("backward() needs a scalar loss, got " +
                     shape_str(loss.shape()));
  Tensor seed = loss;  // shared storage
  seed.grad()[0] += 1.0f;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
}

}  // namespace compat
