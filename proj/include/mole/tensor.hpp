#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace mole {

/// Dense row-major matrix of doubles. Every series, weight and gradient in
/// the engine is one of these; vectors are 1×n or n×1.
class Tensor2 {
 public:
  Tensor2() = default;
  Tensor2(std::size_t rows, std::size_t cols, double fill = 0.0);
  Tensor2(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Tensor2 from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  bool same_shape(const Tensor2& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  void fill(double value);
  bool all_finite() const noexcept;

  /// Adds `other` elementwise; shapes must match.
  Tensor2& operator+=(const Tensor2& other);

  std::string shape_string() const;

  friend bool operator==(const Tensor2&, const Tensor2&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

void require_same_shape(const Tensor2& a, const Tensor2& b, const char* what);

// Dense kernels. The *_acc variants accumulate into `out`.
Tensor2 matmul(const Tensor2& a, const Tensor2& b);
void matmul_acc(const Tensor2& a, const Tensor2& b, Tensor2& out);     // out += a·b
void matmul_at_b_acc(const Tensor2& a, const Tensor2& b, Tensor2& out);  // out += aᵀ·b
void matmul_a_bt_acc(const Tensor2& a, const Tensor2& b, Tensor2& out);  // out += a·bᵀ

double max_abs_diff(const Tensor2& a, const Tensor2& b);

}  // namespace mole
