#include "moca/linalg.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace moca::linalg {

void symmetrize(Matrix& a) {
  if (a.rows() != a.cols()) throw ParameterError("symmetrize: matrix is not square");
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = i + 1; j < a.cols(); ++j) {
      double m = 0.5 * (a(i, j) + a(j, i));
      a(i, j) = m;
      a(j, i) = m;
    }
}

SymmetricEigen symmetric_eigen(const Matrix& input, double tol, int max_sweeps) {
  if (input.rows() != input.cols()) throw ParameterError("symmetric_eigen: matrix is not square");
  const std::size_t n = input.rows();
  Matrix a = input;
  symmetrize(a);
  // Rotations are applied to V^T so both updates touch contiguous rows.
  Matrix vt = Matrix::identity(n);

  double total = 0.0;
  for (double x : a.data()) total += x * x;

  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
    if (off <= tol * tol * total || off == 0.0) break;

    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;

        // A <- J^T A J with J the (p,q) rotation.
        auto rp = a.row(p);
        auto rq = a.row(q);
        for (std::size_t k = 0; k < n; ++k) {
          const double x = rp[k], y = rq[k];
          rp[k] = c * x - s * y;
          rq[k] = s * x + c * y;
        }
        for (std::size_t k = 0; k < n; ++k) {
          auto rk = a.row(k);
          const double x = rk[p], y = rk[q];
          rk[p] = c * x - s * y;
          rk[q] = s * x + c * y;
        }
        auto vp = vt.row(p);
        auto vq = vt.row(q);
        for (std::size_t k = 0; k < n; ++k) {
          const double x = vp[k], y = vq[k];
          vp[k] = c * x - s * y;
          vq[k] = s * x + c * y;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });

  SymmetricEigen out;
  out.values.resize(n);
  out.vectors = Matrix(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    out.values[k] = a(order[k], order[k]);
    auto src = vt.row(order[k]);
    for (std::size_t i = 0; i < n; ++i) out.vectors(i, k) = src[i];
  }
  return out;
}

namespace {

// Orthogonalizes the rows of w (r x m) in place; v (r x r) accumulates the
// rotations. On return row norms of w are the singular values.
void hestenes(Matrix& w, Matrix& v, double tol, int max_sweeps) {
  const std::size_t r = w.rows();
  const std::size_t m = w.cols();
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t i = 0; i + 1 < r; ++i) {
      for (std::size_t j = i + 1; j < r; ++j) {
        auto wi = w.row(i);
        auto wj = w.row(j);
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t k = 0; k < m; ++k) {
          alpha += wi[k] * wi[k];
          beta += wj[k] * wj[k];
          gamma += wi[k] * wj[k];
        }
        if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t k = 0; k < m; ++k) {
          const double x = wi[k], y = wj[k];
          wi[k] = c * x - s * y;
          wj[k] = s * x + c * y;
        }
        auto vi = v.row(i);
        auto vj = v.row(j);
        for (std::size_t k = 0; k < v.cols(); ++k) {
          const double x = vi[k], y = vj[k];
          vi[k] = c * x - s * y;
          vj[k] = s * x + c * y;
        }
      }
    }
    if (!rotated) break;
  }
}

}  // namespace

Svd svd(const Matrix& a, double tol, int max_sweeps) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  const bool wide = n > m;
  // Rotate the shorter side: rows of w are the columns of A (or of A^T when wide).
  Matrix w = wide ? a : a.transposed();
  const std::size_t r = w.rows();
  Matrix vt = Matrix::identity(r);
  hestenes(w, vt, tol, max_sweeps);

  std::vector<double> norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (double x : w.row(i)) s += x * x;
    norms[i] = std::sqrt(s);
  }
  std::vector<std::size_t> order(r);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

  // w rows hold sigma_k * (left vectors of the rotated matrix); vt rows hold
  // the matching right vectors.
  const std::size_t len = w.cols();
  Matrix left(len, r), right(r, r);
  std::vector<double> s(r);
  for (std::size_t k = 0; k < r; ++k) {
    const std::size_t src = order[k];
    s[k] = norms[src];
    for (std::size_t i = 0; i < len; ++i) left(i, k) = s[k] > 0 ? w(src, i) / s[k] : 0.0;
    for (std::size_t i = 0; i < r; ++i) right(i, k) = vt(src, i);
  }

  Svd out;
  out.s = std::move(s);
  if (wide) {
    // w = A, rotations act on rows of A: A = right * S * left^T.
    out.u = std::move(right);
    out.v = std::move(left);
  } else {
    out.u = std::move(left);
    out.v = std::move(right);
  }
  return out;
}

Matrix inverse_sqrt(const Matrix& s) {
  auto eig = symmetric_eigen(s);
  const std::size_t n = s.rows();
  if (n == 0) return Matrix();
  const double smallest = eig.values.back();
  if (!(smallest > 0.0)) {
    std::ostringstream msg;
    msg << "matrix is not positive definite: smallest eigenvalue " << format_double(smallest);
    throw ConditioningError(msg.str());
  }
  Matrix out(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    const double f = 1.0 / std::sqrt(eig.values[k]);
    for (std::size_t i = 0; i < n; ++i) {
      const double vik = eig.vectors(i, k) * f;
      if (vik == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out(i, j) += vik * eig.vectors(j, k);
    }
  }
  return out;
}

Matrix pivoted_cholesky(const Matrix& k, double rel_tol, double neg_tol) {
  if (k.rows() != k.cols()) throw ParameterError("pivoted_cholesky: matrix is not square");
  const std::size_t n = k.rows();
  std::vector<double> d(n);
  double max_diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    d[i] = k(i, i);
    max_diag = std::max(max_diag, std::abs(d[i]));
  }
  std::vector<std::vector<double>> cols;
  std::vector<bool> used(n, false);
  const double stop = rel_tol * max_diag;
  const double floor = -neg_tol * std::max(max_diag, 1e-300);

  auto check_negative = [&]() {
    for (std::size_t i = 0; i < n; ++i) {
      if (!used[i] && d[i] < floor) {
        std::ostringstream msg;
        msg << "Gram matrix is indefinite: residual eigenvalue estimate " << format_double(d[i])
            << " at index " << i << " (tolerance " << format_double(floor) << ")";
        if (n <= 400) {
          auto eig = symmetric_eigen(k);
          msg << "; smallest eigenvalue " << format_double(eig.values.back());
        }
        throw ConditioningError(msg.str());
      }
    }
  };

  while (cols.size() < n) {
    std::size_t piv = n;
    double best = stop;
    for (std::size_t i = 0; i < n; ++i)
      if (!used[i] && d[i] > best) {
        best = d[i];
        piv = i;
      }
    check_negative();
    if (piv == n) break;
    used[piv] = true;
    const double root = std::sqrt(d[piv]);
    std::vector<double> g(n);
    for (std::size_t i = 0; i < n; ++i) {
      double v = k(i, piv);
      for (const auto& c : cols) v -= c[i] * c[piv];
      g[i] = v / root;
    }
    for (std::size_t i = 0; i < n; ++i) d[i] -= g[i] * g[i];
    d[piv] = 0.0;
    g[piv] = root;
    cols.push_back(std::move(g));
  }

  Matrix out(n, cols.size());
  for (std::size_t j = 0; j < cols.size(); ++j)
    for (std::size_t i = 0; i < n; ++i) out(i, j) = cols[j][i];
  return out;
}

}  // namespace moca::linalg
