#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"

namespace bisup {

// Dense row-major tensor of doubles. Rank is arbitrary but the math ops below
// are defined for matrices (rank 2) and vectors (rank 1); batched data is kept
// rank 3 with each [rows x cols] block contiguous. Ops return new tensors and
// never alias their inputs.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shape);
  Tensor(std::vector<int64_t> shape, std::vector<double> data);

  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int64_t> shape, double value);
  static Tensor ones(std::vector<int64_t> shape) { return full(std::move(shape), 1.0); }
  static Tensor identity(int64_t n);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor randn(std::vector<int64_t> shape, Rng& rng, double sigma = 1.0);

  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t dim(int64_t i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  // rank-2 accessors
  int64_t rows() const;
  int64_t cols() const;
  double& at(int64_t r, int64_t c);
  double at(int64_t r, int64_t c) const;
  std::span<double> row(int64_t r);
  std::span<const double> row(int64_t r) const;

  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

  // rank-3 helper: copy of block b as a [d1 x d2] matrix
  Tensor slab(int64_t b) const;
  void set_slab(int64_t b, const Tensor& m);

  std::string shape_str() const;

 private:
  std::vector<int64_t> shape_;
  std::vector<double> data_;
};

// Fixed i-k-j loop order; for every output element the reduction runs over k
// ascending, so results are bit-reproducible and match a naive triple loop.
Tensor matmul(const Tensor& a, const Tensor& b);
// a [m x k] times b [n x k] transposed -> [m x n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
void add_inplace(Tensor& a, const Tensor& b);
Tensor outer(const Tensor& u, const Tensor& v);

// Per-row numerically stable softmax (max subtraction). Rows sum to 1.
Tensor softmax_rows(const Tensor& a);
// y[i,j] = x[i,j] / sqrt(mean_j x[i,j]^2 + eps) * weight[j]
Tensor rmsnorm(const Tensor& x, const Tensor& weight, double eps);
Tensor silu(const Tensor& x);

double mse(const Tensor& a, const Tensor& b);
double max_abs(const Tensor& a);
double frob_norm(const Tensor& a);

void ensure_finite(const Tensor& t, const std::string& what);

struct SvdResult {
  Tensor u;                             // [d1 x r], orthonormal columns
  std::vector<double> singular_values;  // r values, descending, >= 0
  Tensor v_t;                           // [r x d2], orthonormal rows
};

// One-sided Jacobi SVD truncated to rank r. Deterministic sweep order, at
// most 100 sweeps, relative off-diagonal tolerance 1e-12; failure to converge
// raises NumericError with the iteration count.
SvdResult svd_truncated(const Tensor& e, int64_t r);

// BSTN tensor file format: magic "BSTN", u32 rank, rank x u64 dims,
// little-endian f64 payload.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace bisup
