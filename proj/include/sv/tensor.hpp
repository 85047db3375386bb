#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace sv {

// Dense row-major float32 tensor. Copies share storage; use clone() for a
// deep copy. Image-like data is stored NHWC.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape) { reset(std::move(shape)); }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, float v) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel_; ++i) t.data_.get()[i] = v;
    return t;
  }

  static Tensor scalar(float v) { return full({1}, v); }

  static Tensor from(const std::vector<float>& values, std::vector<int> shape) {
    Tensor t(std::move(shape));
    if ((int64_t)values.size() != t.numel_)
      throw std::invalid_argument("Tensor::from: size mismatch");
    std::copy(values.begin(), values.end(), t.data_.get());
    return t;
  }

  bool defined() const { return numel_ > 0; }
  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return (int)shape_.size(); }
  int dim(int i) const { return shape_[i < 0 ? shape_.size() + i : i]; }
  int64_t numel() const { return numel_; }

  float* data() { return data_.get(); }
  const float* data() const { return data_.get(); }
  float& at(int64_t i) { return data_.get()[i]; }
  float at(int64_t i) const { return data_.get()[i]; }
  float& at(std::initializer_list<int> idx) { return data_.get()[offset(idx)]; }
  float at(std::initializer_list<int> idx) const { return data_.get()[offset(idx)]; }

  int64_t offset(std::initializer_list<int> idx) const {
    int64_t off = 0;
    size_t i = 0;
    for (int v : idx) off = off * shape_[i++] + v;
    return off;
  }

  Tensor clone() const {
    Tensor t(shape_);
    std::copy(data_.get(), data_.get() + numel_, t.data_.get());
    return t;
  }

  // Shares storage; element count must match.
  Tensor reshaped(std::vector<int> shape) const {
    Tensor t;
    t.shape_ = std::move(shape);
    t.numel_ = 1;
    for (int d : t.shape_) t.numel_ *= d;
    if (t.numel_ != numel_) throw std::invalid_argument("reshaped: numel mismatch");
    t.data_ = data_;
    return t;
  }

  void fill(float v) {
    for (int64_t i = 0; i < numel_; ++i) data_.get()[i] = v;
  }

  std::string shape_str() const {
    std::string s = "(";
    for (size_t i = 0; i < shape_.size(); ++i)
      s += std::to_string(shape_[i]) + (i + 1 < shape_.size() ? "," : "");
    return s + ")";
  }

 private:
  void reset(std::vector<int> shape) {
    shape_ = std::move(shape);
    numel_ = 1;
    for (int d : shape_) {
      if (d < 0) throw std::invalid_argument("Tensor: negative dim");
      numel_ *= d;
    }
    data_ = std::shared_ptr<float[]>(new float[numel_]());
  }

  std::vector<int> shape_;
  int64_t numel_ = 0;
  std::shared_ptr<float[]> data_;
};

inline bool same_shape(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape();
}

}  // namespace sv
