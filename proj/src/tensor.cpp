#include "qp/tensor.hpp"

#include <cmath>
#include <sstream>

#include "qp/error.hpp"

namespace qp {

namespace {
size_t shape_product(const std::vector<int>& shp) {
  size_t n = 1;
  for (int d : shp) {
    if (d < 0) throw ShapeError("negative dimension in shape");
    n *= static_cast<size_t>(d);
  }
  return n;
}
}  // namespace

Tensor::Tensor(std::vector<int> shp) : shape(std::move(shp)) {
  data.assign(shape_product(shape), 0.0);
}

Tensor Tensor::full(std::vector<int> shp, double v) {
  Tensor t(std::move(shp));
  t.fill(v);
  return t;
}

Tensor Tensor::scalar(double v) {
  Tensor t({1});
  t.data[0] = v;
  return t;
}

Tensor Tensor::row(std::vector<double> values) {
  Tensor t;
  t.shape = {1, static_cast<int>(values.size())};
  t.data = std::move(values);
  return t;
}

Tensor Tensor::from_rows(int r, int c, std::vector<double> values) {
  if (values.size() != static_cast<size_t>(r) * c)
    throw ShapeError("from_rows: value count does not match " + std::to_string(r) + "x" + std::to_string(c));
  Tensor t;
  t.shape = {r, c};
  t.data = std::move(values);
  return t;
}

Tensor Tensor::xavier_uniform(int rows, int cols, Rng& rng) {
  Tensor t({rows, cols});
  double bound = std::sqrt(6.0 / (rows + cols));
  for (double& v : t.data) v = rng.uniform(-bound, bound);
  return t;
}

int Tensor::rows() const {
  if (shape.size() >= 2) return shape[0];
  return 1;
}

int Tensor::cols() const {
  if (shape.empty()) return 0;
  return shape.back();
}

double Tensor::item() const {
  if (data.size() != 1) throw ShapeError("item(): tensor has " + std::to_string(data.size()) + " elements");
  return data[0];
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

void Tensor::fill(double v) {
  for (double& x : data) x = v;
}

bool Tensor::all_finite() const {
  for (double x : data)
    if (!std::isfinite(x)) return false;
  return true;
}

Tensor vmatmul(const Tensor& a, const Tensor& b) {
  int m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
  if (k != k2)
    throw ShapeError("matmul: inner dims differ: " + a.shape_str() + " vs " + b.shape_str());
  Tensor out({m, n});
  const double* A = a.data.data();
  const double* B = b.data.data();
  double* O = out.data.data();
  for (int i = 0; i < m; ++i) {
    const double* arow = A + static_cast<size_t>(i) * k;
    double* orow = O + static_cast<size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      double aik = arow[kk];
      if (aik == 0.0) continue;
      const double* brow = B + static_cast<size_t>(kk) * n;
      for (int j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

Tensor vmatmul_nt(const Tensor& a, const Tensor& b) {
  int m = a.rows(), k = a.cols(), n = b.rows(), k2 = b.cols();
  if (k != k2)
    throw ShapeError("matmul_nt: inner dims differ: " + a.shape_str() + " vs " + b.shape_str());
  Tensor out({m, n});
  const double* A = a.data.data();
  const double* B = b.data.data();
  double* O = out.data.data();
  for (int i = 0; i < m; ++i) {
    const double* arow = A + static_cast<size_t>(i) * k;
    double* orow = O + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* brow = B + static_cast<size_t>(j) * k;
      double s = 0.0;
      for (int kk = 0; kk < k; ++kk) s += arow[kk] * brow[kk];
      orow[j] = s;
    }
  }
  return out;
}

Tensor vmatmul_tn(const Tensor& a, const Tensor& b) {
  int k = a.rows(), m = a.cols(), k2 = b.rows(), n = b.cols();
  if (k != k2)
    throw ShapeError("matmul_tn: inner dims differ: " + a.shape_str() + " vs " + b.shape_str());
  Tensor out({m, n});
  const double* A = a.data.data();
  const double* B = b.data.data();
  double* O = out.data.data();
  for (int kk = 0; kk < k; ++kk) {
    const double* arow = A + static_cast<size_t>(kk) * m;
    const double* brow = B + static_cast<size_t>(kk) * n;
    for (int i = 0; i < m; ++i) {
      double aik = arow[i];
      if (aik == 0.0) continue;
      double* orow = O + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

Tensor vtranspose(const Tensor& a) {
  int m = a.rows(), n = a.cols();
  Tensor out({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.data[static_cast<size_t>(j) * m + i] = a.data[static_cast<size_t>(i) * n + j];
  return out;
}

void vaxpy(Tensor& y, double alpha, const Tensor& x) {
  if (y.size() != x.size()) throw ShapeError("axpy: size mismatch " + y.shape_str() + " vs " + x.shape_str());
  for (size_t i = 0; i < y.size(); ++i) y.data[i] += alpha * x.data[i];
}

void vaccumulate(Tensor& y, const Tensor& x) {
  if (y.size() != x.size()) throw ShapeError("accumulate: size mismatch " + y.shape_str() + " vs " + x.shape_str());
  for (size_t i = 0; i < y.size(); ++i) y.data[i] += x.data[i];
}

}  // namespace qp
