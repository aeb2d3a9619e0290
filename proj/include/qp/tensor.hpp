#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "qp/rng.hpp"

namespace qp {

// Dense row-major tensor of 64-bit floats. Rank 1 tensors behave as 1 x n
// rows wherever a matrix is expected; everything heavier than rank 2 is out
// of scope for this engine.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> shp);

  static Tensor zeros(std::vector<int> shp) { return Tensor(std::move(shp)); }
  static Tensor full(std::vector<int> shp, double v);
  static Tensor scalar(double v);
  static Tensor row(std::vector<double> values);
  static Tensor from_rows(int r, int c, std::vector<double> values);
  static Tensor xavier_uniform(int rows, int cols, Rng& rng);

  size_t size() const { return data.size(); }
  int rows() const;
  int cols() const;
  bool is_scalar() const { return data.size() == 1; }

  double& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
  double at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }
  double& operator[](size_t i) { return data[i]; }
  double operator[](size_t i) const { return data[i]; }

  double item() const;

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  std::string shape_str() const;

  void fill(double v);
  bool all_finite() const;
};

// Value-level kernels (no autodiff). The tape's backward rules are built on
// these.
Tensor vmatmul(const Tensor& a, const Tensor& b);     // a @ b
Tensor vmatmul_nt(const Tensor& a, const Tensor& b);  // a @ b^T
Tensor vmatmul_tn(const Tensor& a, const Tensor& b);  // a^T @ b
Tensor vtranspose(const Tensor& a);
void vaxpy(Tensor& y, double alpha, const Tensor& x);  // y += alpha * x
void vaccumulate(Tensor& y, const Tensor& x);          // y += x

}  // namespace qp
