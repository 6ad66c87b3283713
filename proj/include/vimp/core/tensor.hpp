#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace vimp {

[[noreturn]] inline void fail(const std::string& msg) {
  throw std::runtime_error(msg);
}

#define VIMP_CHECK(cond, msg)                          \
  do {                                                 \
    if (!(cond)) ::vimp::fail(std::string(msg));       \
  } while (0)

/// Dense row-major float32 tensor. Copies share storage; use clone() for a
/// deep copy. Shapes are small int vectors, e.g. {B, L, D}.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    numel_ = 1;
    for (int d : shape_) {
      VIMP_CHECK(d >= 0, "Tensor: negative dimension");
      numel_ *= d;
    }
    store_ = std::make_shared<std::vector<float>>(numel_, 0.0f);
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, float v) {
    Tensor t(std::move(shape));
    for (auto& x : *t.store_) x = v;
    return t;
  }

  static Tensor scalar(float v) { return full({1}, v); }

  static Tensor from(std::vector<int> shape, std::vector<float> data) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.numel_ = 1;
    for (int d : t.shape_) t.numel_ *= d;
    VIMP_CHECK((int64_t)data.size() == t.numel_, "Tensor::from: size mismatch");
    t.store_ = std::make_shared<std::vector<float>>(std::move(data));
    return t;
  }

  bool defined() const { return store_ != nullptr; }
  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return (int)shape_.size(); }
  int64_t numel() const { return numel_; }

  int dim(int i) const {
    if (i < 0) i += ndim();
    VIMP_CHECK(i >= 0 && i < ndim(), "Tensor::dim: index out of range");
    return shape_[i];
  }

  float* data() { return store_->data(); }
  const float* data() const { return store_->data(); }

  float& operator[](int64_t i) { return (*store_)[i]; }
  float operator[](int64_t i) const { return (*store_)[i]; }

  void fill(float v) {
    for (auto& x : *store_) x = v;
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.numel_ = numel_;
    t.store_ = std::make_shared<std::vector<float>>(*store_);
    return t;
  }

  /// Reinterpret shape; shares storage with this tensor.
  Tensor reshaped(std::vector<int> shape) const {
    Tensor t;
    t.shape_ = std::move(shape);
    t.numel_ = 1;
    for (int d : t.shape_) t.numel_ *= d;
    VIMP_CHECK(t.numel_ == numel_, "Tensor::reshaped: numel mismatch");
    t.store_ = store_;
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool shares_storage(const Tensor& o) const { return store_ == o.store_; }

 private:
  std::vector<int> shape_;
  int64_t numel_ = 0;
  std::shared_ptr<std::vector<float>> store_;
};

inline std::string shape_str(const std::vector<int>& s) {
  std::string r = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) r += ",";
    r += std::to_string(s[i]);
  }
  return r + ")";
}

}  // namespace vimp
