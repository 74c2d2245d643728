#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace stepmask {

// Dense row-major array of doubles with rank 1 or 2. Used both for learnable
// parameters and for activations cached during the forward pass.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::size_t n, double fill = 0.0) : shape_{n}, data_(n, fill) {}
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : shape_{rows, cols}, data_(rows * cols, fill) {}

  static Tensor from_vector(std::vector<double> values);

  std::size_t rank() const { return shape_.size(); }
  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const { return shape_.size() < 2 ? 1 : shape_[1]; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols(), cols()};
  }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  void fill(double v);
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

Tensor zeros_like(const Tensor& t);

// out = a * b for a (n x k), b (k x m).
Tensor matmul(const Tensor& a, const Tensor& b);
// out += a^T * b for a (n x k), b (n x m); out is (k x m).
void matmul_tn_accumulate(const Tensor& a, const Tensor& b, Tensor& out);
// out = a * b^T for a (n x k), b (m x k).
Tensor matmul_nt(const Tensor& a, const Tensor& b);

double dot(std::span<const double> a, std::span<const double> b);

}  // namespace stepmask
