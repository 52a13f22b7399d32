#include "tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace bisup {

static_assert(std::endian::native == std::endian::little,
              "BSTN serialization assumes a little-endian host");

namespace {

int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw ShapeError("negative dimension in tensor shape");
    n *= d;
  }
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<int64_t> shape)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), 0.0) {}

Tensor::Tensor(std::vector<int64_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != static_cast<int64_t>(data_.size())) {
    throw ShapeError("tensor data size does not match shape " + shape_str());
  }
}

Tensor Tensor::full(std::vector<int64_t> shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

Tensor Tensor::identity(int64_t n) {
  Tensor t({n, n});
  for (int64_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const int64_t r = static_cast<int64_t>(rows.size());
  const int64_t c = r > 0 ? static_cast<int64_t>(rows.begin()->size()) : 0;
  Tensor t({r, c});
  int64_t i = 0;
  for (const auto& row : rows) {
    if (static_cast<int64_t>(row.size()) != c) {
      throw ShapeError("ragged initializer for tensor matrix");
    }
    int64_t j = 0;
    for (double v : row) t.at(i, j++) = v;
    ++i;
  }
  return t;
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({static_cast<int64_t>(values.size())}, std::vector<double>(values));
}

Tensor Tensor::randn(std::vector<int64_t> shape, Rng& rng, double sigma) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal() * sigma;
  return t;
}

int64_t Tensor::rows() const {
  if (rank() != 2) throw ShapeError("rows() requires rank-2 tensor, got " + shape_str());
  return shape_[0];
}

int64_t Tensor::cols() const {
  if (rank() != 2) throw ShapeError("cols() requires rank-2 tensor, got " + shape_str());
  return shape_[1];
}

double& Tensor::at(int64_t r, int64_t c) {
  return data_[static_cast<size_t>(r * shape_[1] + c)];
}

double Tensor::at(int64_t r, int64_t c) const {
  return data_[static_cast<size_t>(r * shape_[1] + c)];
}

std::span<double> Tensor::row(int64_t r) {
  return {data_.data() + r * shape_[1], static_cast<size_t>(shape_[1])};
}

std::span<const double> Tensor::row(int64_t r) const {
  return {data_.data() + r * shape_[1], static_cast<size_t>(shape_[1])};
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor Tensor::slab(int64_t b) const {
  if (rank() != 3) throw ShapeError("slab() requires rank-3 tensor, got " + shape_str());
  const int64_t r = shape_[1], c = shape_[2];
  Tensor m({r, c});
  std::memcpy(m.data(), data() + b * r * c, static_cast<size_t>(r * c) * sizeof(double));
  return m;
}

void Tensor::set_slab(int64_t b, const Tensor& m) {
  if (rank() != 3) throw ShapeError("set_slab() requires rank-3 tensor");
  const int64_t r = shape_[1], c = shape_[2];
  if (m.rank() != 2 || m.rows() != r || m.cols() != c) {
    throw ShapeError("slab shape mismatch: " + m.shape_str() + " into " + shape_str());
  }
  std::memcpy(data_.data() + b * r * c, m.data(),
              static_cast<size_t>(r * c) * sizeof(double));
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape_.size(); ++i) {
    if (i) os << "x";
    os << shape_[i];
  }
  os << "]";
  return os.str();
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw ShapeError("matmul shape mismatch: " + a.shape_str() + " * " + b.shape_str());
  }
  const int64_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor y({m, n});
  for (int64_t i = 0; i < m; ++i) {
    double* yi = y.data() + i * n;
    const double* ai = a.data() + i * k;
    for (int64_t kk = 0; kk < k; ++kk) {
      const double av = ai[kk];
      const double* bk = b.data() + kk * n;
      for (int64_t j = 0; j < n; ++j) yi[j] += av * bk[j];
    }
  }
  return y;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols()) {
    throw ShapeError("matmul_nt shape mismatch: " + a.shape_str() + " * " +
                     b.shape_str() + "^T");
  }
  const int64_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor y({m, n});
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a.data() + i * k;
    double* yi = y.data() + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const double* bj = b.data() + j * k;
      double acc = 0.0;
      for (int64_t kk = 0; kk < k; ++kk) acc += ai[kk] * bj[kk];
      yi[j] = acc;
    }
  }
  return y;
}

Tensor transpose(const Tensor& a) {
  const int64_t m = a.rows(), n = a.cols();
  Tensor t({n, m});
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) t.at(j, i) = a.at(i, j);
  }
  return t;
}

namespace {

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, F f, const char* name) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(name) + " shape mismatch: " + a.shape_str() +
                     " vs " + b.shape_str());
  }
  Tensor y(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) y[i] = f(a[i], b[i]);
  return y;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return zip(a, b, [](double x, double y) { return x + y; }, "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return zip(a, b, [](double x, double y) { return x - y; }, "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return zip(a, b, [](double x, double y) { return x * y; }, "mul");
}

Tensor scale(const Tensor& a, double s) {
  Tensor y(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) y[i] = a[i] * s;
  return y;
}

void add_inplace(Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("add_inplace shape mismatch: " + a.shape_str() + " vs " +
                     b.shape_str());
  }
  for (int64_t i = 0; i < a.numel(); ++i) a[i] += b[i];
}

Tensor outer(const Tensor& u, const Tensor& v) {
  if (u.rank() != 1 || v.rank() != 1) throw ShapeError("outer requires rank-1 inputs");
  Tensor y({u.numel(), v.numel()});
  for (int64_t i = 0; i < u.numel(); ++i) {
    for (int64_t j = 0; j < v.numel(); ++j) y.at(i, j) = u[i] * v[j];
  }
  return y;
}

Tensor softmax_rows(const Tensor& a) {
  const int64_t m = a.rows(), n = a.cols();
  Tensor y({m, n});
  for (int64_t i = 0; i < m; ++i) {
    const double* xi = a.data() + i * n;
    double* yi = y.data() + i * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < n; ++j) mx = std::max(mx, xi[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      sum += yi[j];
    }
    for (int64_t j = 0; j < n; ++j) yi[j] /= sum;
  }
  return y;
}

Tensor rmsnorm(const Tensor& x, const Tensor& weight, double eps) {
  const int64_t m = x.rows(), n = x.cols();
  if (weight.rank() != 1 || weight.numel() != n) {
    throw ShapeError("rmsnorm weight shape mismatch: " + weight.shape_str() +
                     " for input " + x.shape_str());
  }
  Tensor y({m, n});
  for (int64_t i = 0; i < m; ++i) {
    const double* xi = x.data() + i * n;
    double* yi = y.data() + i * n;
    double ss = 0.0;
    for (int64_t j = 0; j < n; ++j) ss += xi[j] * xi[j];
    const double r = 1.0 / std::sqrt(ss / static_cast<double>(n) + eps);
    for (int64_t j = 0; j < n; ++j) yi[j] = xi[j] * r * weight[j];
  }
  return y;
}

Tensor silu(const Tensor& x) {
  Tensor y(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double v = x[i];
    const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                              : std::exp(v) / (1.0 + std::exp(v));
    y[i] = v * s;
  }
  return y;
}

double mse(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("mse shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
  }
  if (a.numel() == 0) return 0.0;
  double acc = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.numel());
}

double max_abs(const Tensor& a) {
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i]));
  return m;
}

double frob_norm(const Tensor& a) {
  double acc = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) acc += a[i] * a[i];
  return std::sqrt(acc);
}

void ensure_finite(const Tensor& t, const std::string& what) {
  if (!t.all_finite()) throw NumericError("non-finite values in " + what);
}

namespace {

// One-sided Jacobi on the columns of a (requires rows >= cols). Returns
// left singular vectors in a's storage (columns scaled to unit norm),
// singular values, and the accumulated right rotations.
struct JacobiOut {
  Tensor a;  // becomes U * diag(sigma)
  Tensor v;  // [n x n]
};

JacobiOut one_sided_jacobi(Tensor a) {
  const int64_t m = a.rows(), n = a.cols();
  Tensor v = Tensor::identity(n);
  const int max_sweeps = 100;
  const double tol = 1e-12;
  bool converged = false;
  int sweep = 0;
  for (; sweep < max_sweeps && !converged; ++sweep) {
    converged = true;
    for (int64_t p = 0; p < n - 1; ++p) {
      for (int64_t q = p + 1; q < n; ++q) {
        double app = 0.0, aqq = 0.0, apq = 0.0;
        for (int64_t i = 0; i < m; ++i) {
          const double x = a.at(i, p), y = a.at(i, q);
          app += x * x;
          aqq += y * y;
          apq += x * y;
        }
        if (app * aqq == 0.0) continue;
        if (std::abs(apq) <= tol * std::sqrt(app * aqq)) continue;
        converged = false;
        const double tau = (aqq - app) / (2.0 * apq);
        const double t = (tau >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (int64_t i = 0; i < m; ++i) {
          const double x = a.at(i, p), y = a.at(i, q);
          a.at(i, p) = c * x - s * y;
          a.at(i, q) = s * x + c * y;
        }
        for (int64_t i = 0; i < n; ++i) {
          const double x = v.at(i, p), y = v.at(i, q);
          v.at(i, p) = c * x - s * y;
          v.at(i, q) = s * x + c * y;
        }
      }
    }
  }
  if (!converged) {
    throw NumericError("jacobi svd failed to converge after " +
                       std::to_string(sweep) + " sweeps");
  }
  return {std::move(a), std::move(v)};
}

}  // namespace

SvdResult svd_truncated(const Tensor& e, int64_t r) {
  if (e.rank() != 2) throw ShapeError("svd requires a rank-2 tensor");
  ensure_finite(e, "svd input");
  const int64_t m = e.rows(), n = e.cols();
  const int64_t kmax = std::min(m, n);
  if (r < 1 || r > kmax) {
    throw ShapeError("svd rank " + std::to_string(r) + " out of range for " +
                     e.shape_str());
  }

  // Work on the orientation with rows >= cols; swap factors back if flipped.
  const bool flipped = m < n;
  JacobiOut jo = one_sided_jacobi(flipped ? transpose(e) : e);
  const int64_t wm = jo.a.rows(), wn = jo.a.cols();

  std::vector<double> sigma(static_cast<size_t>(wn), 0.0);
  for (int64_t j = 0; j < wn; ++j) {
    double ss = 0.0;
    for (int64_t i = 0; i < wm; ++i) ss += jo.a.at(i, j) * jo.a.at(i, j);
    sigma[static_cast<size_t>(j)] = std::sqrt(ss);
  }
  std::vector<int64_t> order(static_cast<size_t>(wn));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int64_t i, int64_t j) {
    return sigma[static_cast<size_t>(i)] > sigma[static_cast<size_t>(j)];
  });

  // Left vectors: normalized columns; zero singular values get a deterministic
  // orthonormal completion from canonical basis vectors.
  Tensor uw({wm, r});
  Tensor vw({wn, r});
  std::vector<double> svals(static_cast<size_t>(r), 0.0);
  const double tiny = 1e-300;
  int64_t next_basis = 0;
  for (int64_t jj = 0; jj < r; ++jj) {
    const int64_t src = order[static_cast<size_t>(jj)];
    const double sv = sigma[static_cast<size_t>(src)];
    svals[static_cast<size_t>(jj)] = sv;
    for (int64_t i = 0; i < wn; ++i) vw.at(i, jj) = jo.v.at(i, src);
    if (sv > tiny) {
      for (int64_t i = 0; i < wm; ++i) uw.at(i, jj) = jo.a.at(i, src) / sv;
      continue;
    }
    svals[static_cast<size_t>(jj)] = 0.0;
    // Gram-Schmidt a canonical vector against the columns already emitted.
    for (; next_basis < wm; ++next_basis) {
      std::vector<double> cand(static_cast<size_t>(wm), 0.0);
      cand[static_cast<size_t>(next_basis)] = 1.0;
      for (int64_t prev = 0; prev < jj; ++prev) {
        double proj = 0.0;
        for (int64_t i = 0; i < wm; ++i) proj += cand[static_cast<size_t>(i)] * uw.at(i, prev);
        for (int64_t i = 0; i < wm; ++i) cand[static_cast<size_t>(i)] -= proj * uw.at(i, prev);
      }
      double nrm = 0.0;
      for (double x : cand) nrm += x * x;
      nrm = std::sqrt(nrm);
      if (nrm > 1e-6) {
        for (int64_t i = 0; i < wm; ++i) uw.at(i, jj) = cand[static_cast<size_t>(i)] / nrm;
        ++next_basis;
        break;
      }
    }
  }

  SvdResult out;
  out.singular_values = std::move(svals);
  if (!flipped) {
    out.u = std::move(uw);
    out.v_t = transpose(vw);
  } else {
    // e^T = uw sigma vw^T  =>  e = vw sigma uw^T
    out.u = std::move(vw);
    out.v_t = transpose(uw);
  }
  return out;
}

namespace {

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("unexpected end of tensor stream");
  return v;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write("BSTN", 4);
  write_pod<uint32_t>(os, static_cast<uint32_t>(t.rank()));
  for (int64_t d : t.shape()) write_pod<uint64_t>(os, static_cast<uint64_t>(d));
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * sizeof(double)));
  if (!os) throw IoError("failed to write tensor stream");
}

Tensor read_tensor(std::istream& is) {
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "BSTN", 4) != 0) {
    throw IoError("bad tensor magic, expected BSTN");
  }
  const uint32_t rank = read_pod<uint32_t>(is);
  if (rank > 8) throw IoError("tensor rank too large: " + std::to_string(rank));
  std::vector<int64_t> shape(rank);
  int64_t numel = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    const uint64_t d = read_pod<uint64_t>(is);
    if (d > (1ull << 32)) throw IoError("tensor dimension too large");
    shape[i] = static_cast<int64_t>(d);
    numel *= shape[i];
  }
  std::vector<double> data(static_cast<size_t>(numel));
  is.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!is) throw IoError("unexpected end of tensor payload");
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path);
  write_tensor(os, t);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for read: " + path);
  return read_tensor(is);
}

}  // namespace bisup
