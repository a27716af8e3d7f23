#pragma once

// Dependency-free dense linear algebra used by the correlation analysis:
// cyclic Jacobi for symmetric eigenproblems, one-sided Jacobi for SVD and a
// pivoted Cholesky for low-rank Gram factors.

#include <vector>

#include "moca/common.h"

namespace moca::linalg {

struct SymmetricEigen {
  std::vector<double> values;  // descending
  Matrix vectors;              // column k pairs with values[k]
};

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Only the upper triangle of `a` is trusted; the input is symmetrized first.
SymmetricEigen symmetric_eigen(const Matrix& a, double tol = 1e-14, int max_sweeps = 100);

struct Svd {
  Matrix u;                   // m x r
  std::vector<double> s;      // r, descending, nonnegative
  Matrix v;                   // n x r
};

/// Thin SVD (r = min(m, n)) by one-sided Hestenes-Jacobi.
Svd svd(const Matrix& a, double tol = 1e-14, int max_sweeps = 100);

/// S^{-1/2} for symmetric positive definite S. Throws ConditioningError when
/// the smallest eigenvalue is not positive.
Matrix inverse_sqrt(const Matrix& s);

/// Pivoted (incomplete) Cholesky: K ~= G G^T with G n x r, stopping once the
/// largest residual pivot falls below rel_tol * max(diag K). Throws
/// ConditioningError if the residual exposes negative curvature larger than
/// neg_tol * max(diag K).
Matrix pivoted_cholesky(const Matrix& k, double rel_tol = 1e-12, double neg_tol = 1e-8);

/// Symmetrize in place: (A + A^T) / 2.
void symmetrize(Matrix& a);

}  // namespace moca::linalg
