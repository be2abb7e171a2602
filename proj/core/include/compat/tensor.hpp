#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace compat {

using Shape = std::vector<int>;

int64_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major f32 tensor. Handles share storage; clone() deep-copies.
// The gradient buffer lives beside the data and is allocated on first use.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<float> values,
                     bool requires_grad = false);
  static Tensor scalar(float v, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int dim(int i) const;
  int ndim() const;
  int64_t size() const;

  float* data();
  const float* data() const;
  float item() const;  // value of a size-1 tensor

  bool requires_grad() const;
  void set_requires_grad(bool rg);
  bool has_grad() const;
  float* grad();              // allocates (zero-filled) if absent
  const float* grad() const;  // nullptr if never allocated
  void zero_grad();

  Tensor clone() const;  // fresh storage, no grad, same requires_grad
  bool same_storage(const Tensor& other) const;

 private:
  struct Impl {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
  Impl& ref();
  const Impl& ref() const;
};

// Reverse-mode gradient tape. Ops append one backward closure each, in
// forward order; backward() replays them in exact reverse order. A tape
// created with grad_enabled=false records nothing (pure inference).
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }
  void record(std::function<void()> backward_step);
  void backward(const Tensor& loss);
  size_t num_ops() const { return ops_.size(); }
  void reset() { ops_.clear(); }

 private:
  std::vector<std::function<void()>> ops_;
  bool grad_enabled_ = true;
};

}  // namespace compat
