#include "moca/numerics.h"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace moca::nn {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw ParameterError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                       shape_string(b.shape()));
}

void require_matrix(const char* op, const Tensor& a) {
  if (a.rank() != 2) throw ParameterError(std::string(op) + ": expected a rank-2 tensor, got " + shape_string(a.shape()));
}

// C (n x m) += A (n x k) * B (k x m)
void gemm_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* ci = c + i * m;
    const double* ai = a + i * k;
    for (std::size_t l = 0; l < k; ++l) {
      const double x = ai[l];
      const double* bl = b + l * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += x * bl[j];
    }
  }
}

// C (n x k) += G (n x m) * B^T, B is (k x m)
void gemm_nt(const double* g, const double* b, double* c, std::size_t n, std::size_t m, std::size_t k) {
  std::vector<double> bt(m * k);
  for (std::size_t l = 0; l < k; ++l)
    for (std::size_t j = 0; j < m; ++j) bt[j * k + l] = b[l * m + j];
  gemm_nn(g, bt.data(), c, n, m, k);
}

// C (k x m) += A^T * G, A is (n x k), G is (n x m)
void gemm_tn(const double* a, const double* g, double* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = a + i * k;
    const double* gi = g + i * m;
    for (std::size_t l = 0; l < k; ++l) {
      const double x = ai[l];
      if (x == 0.0) continue;
      double* cl = c + l * m;
      for (std::size_t j = 0; j < m; ++j) cl[j] += x * gi[j];
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(std::vector<std::size_t> shape, double fill) : shape_(std::move(shape)), data_(product(shape_), fill) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != product(shape_)) throw ParameterError("Tensor: data size does not match shape " + shape_string(shape_));
}

Tensor Tensor::from(const Matrix& m) { return Tensor({m.rows(), m.cols()}, m.data()); }

double Tensor::item() const {
  if (data_.size() != 1) throw ParameterError("Tensor::item on a tensor of shape " + shape_string(shape_));
  return data_[0];
}

Matrix Tensor::to_matrix() const { return Matrix(rows(), cols(), data_); }

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream out;
  out << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << "]";
  return out.str();
}

// ---------------------------------------------------------------------------
// Tape

const Tensor& Var::value() const { return tape->value(id); }
const Tensor& Var::grad() const { return tape->grad(id); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
  return {this, nodes_.size() - 1};
}

Var Tape::parameter(Parameter& p) {
  nodes_.push_back(Node{p.value, {}, {}, &p, true});
  return {this, nodes_.size() - 1};
}

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, {}, nullptr, true});
  return {this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents, Backward fn) {
  return record(std::move(value), std::vector<Var>(parents), std::move(fn));
}

Var Tape::record(Tensor value, const std::vector<Var>& parents, Backward fn) {
  bool needs = false;
  for (const auto& p : parents) {
    if (p.tape != this) throw ParameterError("operands recorded on different tapes");
    needs = needs || nodes_[p.id].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : Backward{}, nullptr, needs});
  return {this, nodes_.size() - 1};
}

Tensor& Tape::grad_mut(std::size_t id) {
  auto& n = nodes_[id];
  if (n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw ParameterError("backward: loss belongs to another tape");
  if (nodes_[loss.id].value.size() != 1)
    throw ParameterError("backward: loss must be a scalar, got shape " + shape_string(nodes_[loss.id].value.shape()));
  for (auto& n : nodes_) n.grad = Tensor();
  grad_mut(loss.id)[0] = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, i);
    if (n.param != nullptr) {
      auto& pg = n.param->grad;
      if (!pg.same_shape(n.value)) pg = Tensor(n.value.shape());
      for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
    }
  }
}

// ---------------------------------------------------------------------------
// Primitives

Var add(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tape& t = *a.tape;
  if (x.same_shape(y)) {
    Tensor out = x;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i];
    return t.record(std::move(out), {a, b}, [ia = a.id, ib = b.id](Tape& tp, std::size_t self) {
      const Tensor& g = tp.grad(self);
      for (std::size_t id : {ia, ib}) {
        if (!tp.requires_grad(id)) continue;
        Tensor& d = tp.grad_mut(id);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
      }
    });
  }
  // bias-row broadcast
  if (y.rows() == 1 && y.cols() == x.cols() && x.rank() >= 1) {
    Tensor out = x;
    const std::size_t cols = x.cols();
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t c = 0; c < cols; ++c) out.at(r, c) += y[c];
    return t.record(std::move(out), {a, b}, [ia = a.id, ib = b.id](Tape& tp, std::size_t self) {
      const Tensor& g = tp.grad(self);
      if (tp.requires_grad(ia)) {
        Tensor& d = tp.grad_mut(ia);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
      }
      if (tp.requires_grad(ib)) {
        Tensor& d = tp.grad_mut(ib);
        const std::size_t cols = d.size();
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < cols; ++c) d[c] += g.at(r, c);
      }
    });
  }
  shape_error("add", x, y);
}

Var sub(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (!x.same_shape(y)) shape_error("sub", x, y);
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= y[i];
  return a.tape->record(std::move(out), {a, b}, [ia = a.id, ib = b.id](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    if (tp.requires_grad(ia)) {
      Tensor& d = tp.grad_mut(ia);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
    }
    if (tp.requires_grad(ib)) {
      Tensor& d = tp.grad_mut(ib);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tape& t = *a.tape;
  if (x.same_shape(y)) {
    Tensor out = x;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y[i];
    return t.record(std::move(out), {a, b}, [ia = a.id, ib = b.id](Tape& tp, std::size_t self) {
      const Tensor& g = tp.grad(self);
      const Tensor& xv = tp.value(ia);
      const Tensor& yv = tp.value(ib);
      if (tp.requires_grad(ia)) {
        Tensor& d = tp.grad_mut(ia);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * yv[i];
      }
      if (tp.requires_grad(ib)) {
        Tensor& d = tp.grad_mut(ib);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * xv[i];
      }
    });
  }
  if (y.size() == 1) {
    const double s = y[0];
    Tensor out = x;
    for (auto& v : out.data()) v *= s;
    return t.record(std::move(out), {a, b}, [ia = a.id, ib = b.id](Tape& tp, std::size_t self) {
      const Tensor& g = tp.grad(self);
      const Tensor& xv = tp.value(ia);
      const double sv = tp.value(ib)[0];
      if (tp.requires_grad(ia)) {
        Tensor& d = tp.grad_mut(ia);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * sv;
      }
      if (tp.requires_grad(ib)) {
        double acc = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
        tp.grad_mut(ib)[0] += acc;
      }
    });
  }
  shape_error("mul", x, y);
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= s;
  return a.tape->record(std::move(out), {a}, [ia = a.id, s](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    Tensor& d = tp.grad_mut(ia);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s * g[i];
  });
}

Var matmul(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require_matrix("matmul", x);
  require_matrix("matmul", y);
  if (x.cols() != y.rows()) shape_error("matmul", x, y);
  const std::size_t n = x.rows(), k = x.cols(), m = y.cols();
  Tensor out = Tensor::matrix(n, m);
  gemm_nn(x.data().data(), y.data().data(), out.data().data(), n, k, m);
  return a.tape->record(std::move(out), {a, b}, [ia = a.id, ib = b.id, n, k, m](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    if (tp.requires_grad(ia)) gemm_nt(g.data().data(), tp.value(ib).data().data(), tp.grad_mut(ia).data().data(), n, m, k);
    if (tp.requires_grad(ib)) gemm_tn(tp.value(ia).data().data(), g.data().data(), tp.grad_mut(ib).data().data(), n, k, m);
  });
}

Var transpose(Var a) {
  const Tensor& x = a.value();
  require_matrix("transpose", x);
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out = Tensor::matrix(c, r);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = x.at(i, j);
  return a.tape->record(std::move(out), {a}, [ia = a.id, r, c](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    Tensor& d = tp.grad_mut(ia);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) d.at(i, j) += g.at(j, i);
  });
}

Var slice_rows(Var a, std::size_t start, std::size_t count) {
  const Tensor& x = a.value();
  require_matrix("slice_rows", x);
  if (start + count > x.rows()) throw ParameterError("slice_rows: range exceeds " + shape_string(x.shape()));
  const std::size_t c = x.cols();
  Tensor out = Tensor::matrix(count, c);
  std::copy_n(x.data().begin() + start * c, count * c, out.data().begin());
  return a.tape->record(std::move(out), {a}, [ia = a.id, start, c](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    Tensor& d = tp.grad_mut(ia);
    for (std::size_t i = 0; i < g.size(); ++i) d[start * c + i] += g[i];
  });
}

Var slice_cols(Var a, std::size_t start, std::size_t count) {
  const Tensor& x = a.value();
  require_matrix("slice_cols", x);
  if (start + count > x.cols()) throw ParameterError("slice_cols: range exceeds " + shape_string(x.shape()));
  const std::size_t r = x.rows();
  Tensor out = Tensor::matrix(r, count);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < count; ++j) out.at(i, j) = x.at(i, start + j);
  return a.tape->record(std::move(out), {a}, [ia = a.id, start, r, count](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    Tensor& d = tp.grad_mut(ia);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < count; ++j) d.at(i, start + j) += g.at(i, j);
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ParameterError("concat_rows: no operands");
  const std::size_t c = parts.front().value().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require_matrix("concat_rows", p.value());
    if (p.value().cols() != c) shape_error("concat_rows", parts.front().value(), p.value());
    rows += p.value().rows();
  }
  Tensor out = Tensor::matrix(rows, c);
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() + off);
    ids.push_back(p.id);
    offsets.push_back(off);
    off += p.value().size();
  }
  return parts.front().tape->record(std::move(out), parts, [ids, offsets](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!tp.requires_grad(ids[k])) continue;
      Tensor& d = tp.grad_mut(ids[k]);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[offsets[k] + i];
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ParameterError("concat_cols: no operands");
  const std::size_t r = parts.front().value().rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    require_matrix("concat_cols", p.value());
    if (p.value().rows() != r) shape_error("concat_cols", parts.front().value(), p.value());
    cols += p.value().cols();
  }
  Tensor out = Tensor::matrix(r, cols);
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < v.cols(); ++j) out.at(i, off + j) = v.at(i, j);
    ids.push_back(p.id);
    offsets.push_back(off);
    off += v.cols();
  }
  return parts.front().tape->record(std::move(out), parts, [ids, offsets, r](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!tp.requires_grad(ids[k])) continue;
      Tensor& d = tp.grad_mut(ids[k]);
      const std::size_t w = d.cols();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < w; ++j) d.at(i, j) += g.at(i, offsets[k] + j);
    }
  });
}

Var gather_rows(Var a, std::vector<std::size_t> index) {
  const Tensor& x = a.value();
  require_matrix("gather_rows", x);
  const std::size_t c = x.cols();
  Tensor out = Tensor::matrix(index.size(), c);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= x.rows()) throw ParameterError("gather_rows: index out of range");
    std::copy_n(x.data().begin() + index[i] * c, c, out.data().begin() + i * c);
  }
  return a.tape->record(std::move(out), {a}, [ia = a.id, index = std::move(index), c](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    Tensor& d = tp.grad_mut(ia);
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) d[index[i] * c + j] += g[i * c + j];
  });
}

Var sum(Var a) {
  const Tensor& x = a.value();
  double s = 0.0;
  for (double v : x.data()) s += v;
  return a.tape->record(Tensor::scalar(s), {a}, [ia = a.id](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    for (auto& v : tp.grad_mut(ia).data()) v += g;
  });
}

Var mean(Var a) {
  const Tensor& x = a.value();
  if (x.size() == 0) throw ParameterError("mean: empty tensor");
  double s = 0.0;
  for (double v : x.data()) s += v;
  const double inv = 1.0 / static_cast<double>(x.size());
  return a.tape->record(Tensor::scalar(s * inv), {a}, [ia = a.id, inv](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0] * inv;
    for (auto& v : tp.grad_mut(ia).data()) v += g;
  });
}

Var gelu(Var a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
  return a.tape->record(std::move(out), {a}, [ia = a.id](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    const Tensor& x = tp.value(ia);
    Tensor& d = tp.grad_mut(ia);
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double v = x[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      d[i] += g[i] * (cdf + v * pdf);
    }
  });
}

Var softmax(Var a, int axis) {
  const Tensor& x = a.value();
  require_matrix("softmax", x);
  if (axis != 0 && axis != 1) throw ParameterError("softmax: axis must be 0 or 1");
  const std::size_t r = x.rows(), c = x.cols();
  if ((axis == 1 && c == 0) || (axis == 0 && r == 0)) throw ParameterError("softmax over an empty axis");
  const std::size_t lines = axis == 1 ? r : c;
  const std::size_t len = axis == 1 ? c : r;
  const std::size_t stride = axis == 1 ? 1 : c;
  const std::size_t step = axis == 1 ? c : 1;
  Tensor out = Tensor::matrix(r, c);
  for (std::size_t l = 0; l < lines; ++l) {
    const double* in = x.data().data() + l * step;
    double* o = out.data().data() + l * step;
    double mx = in[0];
    for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, in[k * stride]);
    double z = 0.0;
    for (std::size_t k = 0; k < len; ++k) z += (o[k * stride] = std::exp(in[k * stride] - mx));
    for (std::size_t k = 0; k < len; ++k) o[k * stride] /= z;
  }
  return a.tape->record(std::move(out), {a}, [ia = a.id, lines, len, stride, step](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad(self);
    const Tensor& y = tp.value(self);
    Tensor& d = tp.grad_mut(ia);
    for (std::size_t l = 0; l < lines; ++l) {
      const std::size_t base = l * step;
      double dot = 0.0;
      for (std::size_t k = 0; k < len; ++k) dot += g[base + k * stride] * y[base + k * stride];
      for (std::size_t k = 0; k < len; ++k) {
        const std::size_t i = base + k * stride;
        d[i] += y[i] * (g[i] - dot);
      }
    }
  });
}

namespace {

// Row statistics shared by both layer_norm overloads.
struct RowNorm {
  Tensor normalized;
  std::vector<double> inv_sd;
};

RowNorm normalize_rows(const Tensor& x, double eps) {
  const std::size_t r = x.rows(), c = x.cols();
  RowNorm out{Tensor(x.shape()), std::vector<double>(r)};
  for (std::size_t i = 0; i < r; ++i) {
    auto row = x.row(i);
    double mu = 0.0;
    for (double v : row) mu += v;
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (double v : row) var += (v - mu) * (v - mu);
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + eps);
    out.inv_sd[i] = inv;
    auto dst = out.normalized.row(i);
    for (std::size_t j = 0; j < c; ++j) dst[j] = (row[j] - mu) * inv;
  }
  return out;
}

// dx for y = normalize(x) given dy (already multiplied by any gain).
void normalize_backward(const Tensor& xhat, const std::vector<double>& inv_sd, const std::vector<double>& dy,
                        Tensor& dx) {
  const std::size_t r = xhat.rows(), c = xhat.cols();
  for (std::size_t i = 0; i < r; ++i) {
    const double* g = dy.data() + i * c;
    auto xh = xhat.row(i);
    double mg = 0.0, mgx = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      mg += g[j];
      mgx += g[j] * xh[j];
    }
    mg /= static_cast<double>(c);
    mgx /= static_cast<double>(c);
    auto d = dx.row(i);
    for (std::size_t j = 0; j < c; ++j) d[j] += inv_sd[i] * (g[j] - mg - xh[j] * mgx);
  }
}

}  // namespace

Var layer_norm(Var a, double eps) {
  if (!(eps > 0)) throw ParameterError("layer_norm: eps must be positive");
  auto rn = normalize_rows(a.value(), eps);
  Tensor out = rn.normalized;
  return a.tape->record(std::move(out), {a}, [ia = a.id, inv = std::move(rn.inv_sd)](Tape& tp, std::size_t self) {
    normalize_backward(tp.value(self), inv, tp.grad(self).data(), tp.grad_mut(ia));
  });
}

Var layer_norm(Var a, Var gain, Var bias, double eps) {
  if (!(eps > 0)) throw ParameterError("layer_norm: eps must be positive");
  const Tensor& x = a.value();
  const std::size_t c = x.cols();
  if (gain.value().size() != c || bias.value().size() != c)
    throw ParameterError("layer_norm: gain/bias length must equal " + std::to_string(c));
  auto rn = normalize_rows(x, eps);
  Tensor out = rn.normalized;
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) = out.at(i, j) * gv[j] + bv[j];
  return a.tape->record(
      std::move(out), {a, gain, bias},
      [ia = a.id, ig = gain.id, ib = bias.id, xhat = std::move(rn.normalized), inv = std::move(rn.inv_sd)](
          Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        const Tensor& gv = tp.value(ig);
        const std::size_t r = xhat.rows(), c = xhat.cols();
        if (tp.requires_grad(ig)) {
          Tensor& dg = tp.grad_mut(ig);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) dg[j] += g.at(i, j) * xhat.at(i, j);
        }
        if (tp.requires_grad(ib)) {
          Tensor& db = tp.grad_mut(ib);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) db[j] += g.at(i, j);
        }
        if (tp.requires_grad(ia)) {
          std::vector<double> dy(g.size());
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) dy[i * c + j] = g.at(i, j) * gv[j];
          normalize_backward(xhat, inv, dy, tp.grad_mut(ia));
        }
      });
}

Var mse(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (!x.same_shape(y)) shape_error("mse", x, y);
  if (x.size() == 0) throw ParameterError("mse: empty tensors");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  const double inv = 1.0 / static_cast<double>(x.size());
  return a.tape->record(Tensor::scalar(s * inv), {a, b}, [ia = a.id, ib = b.id, inv](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0] * 2.0 * inv;
    const Tensor& xv = tp.value(ia);
    const Tensor& yv = tp.value(ib);
    if (tp.requires_grad(ia)) {
      Tensor& d = tp.grad_mut(ia);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g * (xv[i] - yv[i]);
    }
    if (tp.requires_grad(ib)) {
      Tensor& d = tp.grad_mut(ib);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= g * (xv[i] - yv[i]);
    }
  });
}

Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& x = logits.value();
  require_matrix("softmax_cross_entropy", x);
  const std::size_t n = x.rows(), k = x.cols();
  if (labels.size() != n) throw ParameterError("softmax_cross_entropy: one label per row required");
  if (n == 0 || k == 0) throw ParameterError("softmax_cross_entropy: empty logits");
  Tensor prob = Tensor::matrix(n, k);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k)
      throw ParameterError("softmax_cross_entropy: label out of range");
    auto row = x.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += (prob.at(i, j) = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < k; ++j) prob.at(i, j) /= z;
    loss -= (row[labels[i]] - mx) - std::log(z);
  }
  loss /= static_cast<double>(n);
  std::vector<int> lab(labels.begin(), labels.end());
  return logits.tape->record(Tensor::scalar(loss), {logits},
                             [ia = logits.id, prob = std::move(prob), lab = std::move(lab)](Tape& tp, std::size_t self) {
                               const double g = tp.grad(self)[0] / static_cast<double>(lab.size());
                               Tensor& d = tp.grad_mut(ia);
                               for (std::size_t i = 0; i < prob.rows(); ++i)
                                 for (std::size_t j = 0; j < prob.cols(); ++j)
                                   d.at(i, j) += g * (prob.at(i, j) - (static_cast<int>(j) == lab[i] ? 1.0 : 0.0));
                             });
}

// ---------------------------------------------------------------------------

GradCheckResult finite_diff_check(const LossFn& fn, std::span<Parameter* const> params, double h) {
  if (!(h > 0)) throw ParameterError("finite_diff_check: h must be positive");
  for (auto* p : params) p->zero_grad();
  {
    Tape tape;
    Var loss = fn(tape);
    tape.backward(loss);
  }
  auto eval = [&]() {
    Tape tape;
    return fn(tape).value().item();
  };

  GradCheckResult res;
  for (auto* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double saved = p->value[i];
      p->value[i] = saved + h;
      const double up = eval();
      p->value[i] = saved - h;
      const double down = eval();
      p->value[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = p->grad[i];
      const double rel = std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
      ++res.entries_checked;
      if (rel > res.max_rel_error || res.worst_parameter.empty()) {
        if (rel >= res.max_rel_error) {
          res.max_rel_error = rel;
          res.worst_parameter = p->name;
          res.worst_index = i;
          res.analytic = analytic;
          res.numeric = numeric;
        }
      }
    }
  }
  return res;
}

}  // namespace moca::nn
