#include "moca/kcca.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "moca/linalg.h"
#include "moca/train.h"

namespace moca {

double patch_kernel(const PatchKernel& k, std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ParameterError("patch_kernel: patch lengths differ");
  if (k.kind == KernelKind::Linear) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  }
  if (!(k.gamma > 0)) throw ParameterError("patch_kernel: rbf gamma must be positive");
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return std::exp(-k.gamma * d);
}

Matrix view_gram(std::span<const PatchSet> views, const PatchKernel& k) {
  const std::size_t n = views.size();
  for (const auto& v : views)
    if (v.empty()) throw ParameterError("view_gram: empty view");
  Matrix g(n, n);
  if (k.kind == KernelKind::Linear) {
    // Linear kernel: the mean embedding is the mean patch.
    std::vector<std::vector<double>> mean(n);
    for (std::size_t i = 0; i < n; ++i) {
      mean[i].assign(views[i].front().size(), 0.0);
      for (const auto& p : views[i]) {
        if (p.size() != mean[i].size()) throw ParameterError("patch_kernel: patch lengths differ");
        for (std::size_t j = 0; j < p.size(); ++j) mean[i][j] += p[j];
      }
      for (auto& v : mean[i]) v /= static_cast<double>(views[i].size());
    }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i; j < n; ++j) g(i, j) = g(j, i) = patch_kernel(k, mean[i], mean[j]);
    return g;
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      double s = 0.0;
      for (const auto& p : views[i])
        for (const auto& q : views[j]) s += patch_kernel(k, p, q);
      g(i, j) = g(j, i) = s / static_cast<double>(views[i].size() * views[j].size());
    }
  return g;
}

void center_gram_in_place(Matrix& k) {
  const std::size_t n = k.rows();
  if (k.cols() != n) throw ParameterError("center_gram: matrix is not square");
  if (n == 0) return;
  std::vector<double> row_mean(n, 0.0), col_mean(n, 0.0);
  double all = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      row_mean[i] += k(i, j);
      col_mean[j] += k(i, j);
    }
  for (std::size_t i = 0; i < n; ++i) {
    all += row_mean[i];
    row_mean[i] /= static_cast<double>(n);
    col_mean[i] /= static_cast<double>(n);
  }
  all /= static_cast<double>(n) * static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) k(i, j) += all - row_mean[i] - col_mean[j];
}

Matrix center_gram(const Matrix& k) {
  Matrix out = k;
  center_gram_in_place(out);
  return out;
}

namespace {

void check_gram(const Matrix& k, const char* which) {
  if (k.rows() != k.cols()) throw ParameterError(std::string("kcca_solve: ") + which + " is not square");
  double scale = 0.0;
  for (double v : k.data()) scale = std::max(scale, std::abs(v));
  for (std::size_t i = 0; i < k.rows(); ++i)
    for (std::size_t j = i + 1; j < k.cols(); ++j)
      if (std::abs(k(i, j) - k(j, i)) > 1e-10 * std::max(1.0, scale))
        throw ParameterError(std::string("kcca_solve: ") + which + " is not symmetric");
}

Matrix gram_of_factor(const Matrix& g) { return g.transposed() * g; }

Matrix add_ridge(Matrix a, double gamma) {
  for (std::size_t i = 0; i < a.rows(); ++i) a(i, i) += gamma;
  return a;
}

// alpha = G (G^T G)^+ w, the minimum-norm solution of G^T alpha = w.
std::vector<double> representer(const Matrix& g, const Matrix& gtg, const std::vector<double>& w) {
  const auto eig = linalg::symmetric_eigen(gtg);
  const double cutoff = 1e-12 * std::max(1e-300, eig.values.front());
  const std::size_t r = gtg.rows();
  std::vector<double> y(r, 0.0);
  for (std::size_t k = 0; k < r; ++k) {
    if (eig.values[k] <= cutoff) continue;
    double proj = 0.0;
    for (std::size_t a = 0; a < r; ++a) proj += eig.vectors(a, k) * w[a];
    proj /= eig.values[k];
    for (std::size_t a = 0; a < r; ++a) y[a] += eig.vectors(a, k) * proj;
  }
  std::vector<double> alpha(g.rows(), 0.0);
  for (std::size_t i = 0; i < g.rows(); ++i)
    for (std::size_t a = 0; a < r; ++a) alpha[i] += g(i, a) * y[a];
  return alpha;
}

}  // namespace

KccaResult kcca_solve(ViewGrams grams, std::optional<double> gamma_u, std::optional<double> gamma_m, bool centered) {
  check_gram(grams.k_u, "K_U");
  check_gram(grams.k_m, "K_M");
  const std::size_t n = grams.k_u.rows();
  if (grams.k_m.rows() != n) throw ParameterError("kcca_solve: Gram sizes differ");
  if (n < 2) throw ParameterError("kcca_solve: need at least 2 samples");
  if ((gamma_u && !(*gamma_u > 0)) || (gamma_m && !(*gamma_m > 0)))
    throw ParameterError("kcca_solve: regularizers must be positive");
  if (centered) {
    center_gram_in_place(grams.k_u);
    center_gram_in_place(grams.k_m);
  }
  KccaResult res;
  res.gamma_u = gamma_u.value_or(1e-3 * grams.k_u.trace() / static_cast<double>(n));
  res.gamma_m = gamma_m.value_or(1e-3 * grams.k_m.trace() / static_cast<double>(n));
  res.alpha.assign(n, 0.0);
  res.beta.assign(n, 0.0);
  if (!(res.gamma_u > 0) || !(res.gamma_m > 0)) return res;  // a zero Gram carries no correlation

  Matrix gu = linalg::pivoted_cholesky(grams.k_u);
  grams.k_u = Matrix();
  Matrix gm = linalg::pivoted_cholesky(grams.k_m);
  grams.k_m = Matrix();
  if (gu.cols() == 0 || gm.cols() == 0) return res;

  const Matrix a = gram_of_factor(gu);
  const Matrix b = gram_of_factor(gm);
  const Matrix wu = linalg::inverse_sqrt(add_ridge(a, res.gamma_u));
  const Matrix wm = linalg::inverse_sqrt(add_ridge(b, res.gamma_m));
  const Matrix t = wu * (gu.transposed() * gm) * wm;
  const auto s = linalg::svd(t);
  res.rho = s.s.front();

  std::vector<double> u0(t.rows()), v0(t.cols());
  for (std::size_t i = 0; i < t.rows(); ++i) u0[i] = s.u(i, 0);
  for (std::size_t i = 0; i < t.cols(); ++i) v0[i] = s.v(i, 0);
  std::vector<double> w(t.rows(), 0.0), v(t.cols(), 0.0);
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.rows(); ++j) w[i] += wu(i, j) * u0[j];
  for (std::size_t i = 0; i < t.cols(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) v[i] += wm(i, j) * v0[j];
  res.alpha = representer(gu, a, w);
  res.beta = representer(gm, b, v);
  return res;
}

Matrix pca_reduce(const Matrix& features, std::size_t k) {
  const std::size_t n = features.rows(), q = features.cols();
  if (k == 0 || k > std::min(n, q))
    throw ParameterError("pca_reduce: k=" + std::to_string(k) + " must lie in [1, min(n, q)=" +
                         std::to_string(std::min(n, q)) + "]");
  Matrix f = features;
  for (std::size_t j = 0; j < q; ++j) {
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += f(i, j);
    mu /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) f(i, j) -= mu;
  }
  const auto s = linalg::svd(f);
  Matrix scores(n, k);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < k; ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < q; ++j) acc += f(i, j) * s.v(j, c);
      scores(i, c) = acc;
    }
  return scores;
}

CovTriple covariances(const Matrix& u, const Matrix& m) {
  if (u.rows() != m.rows() || u.rows() < 2) throw ParameterError("covariances: need matching sample counts >= 2");
  const double inv = 1.0 / static_cast<double>(u.rows());
  const Matrix ut = u.transposed();
  return {inv * (ut * u), inv * (m.transposed() * m), inv * (ut * m)};
}

namespace {

Matrix jittered_inverse_sqrt(Matrix s, const char* which) {
  const std::size_t d = s.rows();
  if (d == 0 || s.cols() != d) throw ParameterError(std::string("cca_sigma: ") + which + " must be square and non-empty");
  linalg::symmetrize(s);
  const double jitter = 1e-8 * s.trace() / static_cast<double>(d);
  for (std::size_t i = 0; i < d; ++i) s(i, i) += jitter;
  try {
    return linalg::inverse_sqrt(s);
  } catch (const ConditioningError& e) {
    throw ConditioningError(std::string("cca_sigma: ") + which + " is not positive definite after jitter (" +
                            e.what() + ")");
  }
}

}  // namespace

CcaResult cca_sigma(const CovTriple& cov) {
  if (cov.s_um.rows() != cov.s_uu.rows() || cov.s_um.cols() != cov.s_mm.rows())
    throw ParameterError("cca_sigma: covariance shapes do not agree");
  const Matrix wu = jittered_inverse_sqrt(cov.s_uu, "S_UU");
  const Matrix wm = jittered_inverse_sqrt(cov.s_mm, "S_MM");
  const Matrix gamma = wu * cov.s_um * wm;
  const auto s = linalg::svd(gamma);
  CcaResult res;
  res.sigma = s.s;
  res.w_u.assign(wu.rows(), 0.0);
  res.w_m.assign(wm.rows(), 0.0);
  for (std::size_t i = 0; i < wu.rows(); ++i)
    for (std::size_t j = 0; j < wu.cols(); ++j) res.w_u[i] += wu(i, j) * s.u(j, 0);
  for (std::size_t i = 0; i < wm.rows(); ++i)
    for (std::size_t j = 0; j < wm.cols(); ++j) res.w_m[i] += wm(i, j) * s.v(j, 0);
  return res;
}

const char* to_string(EncoderKind kind) { return kind == EncoderKind::RawFlatten ? "raw" : "model"; }

EncoderKind parse_encoder_kind(const std::string& name) {
  if (name == "raw") return EncoderKind::RawFlatten;
  if (name == "model") return EncoderKind::ModelEncoder;
  throw ParameterError("unknown encoder kind '" + name + "' (expected raw or model)");
}

std::vector<SensorWindow> transition_windows(std::span<const SensorWindow> base, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<SensorWindow> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto rec = splice_augment_record(base, rng);
    rec.window.label.reset();
    out.push_back(std::move(rec.window));
  }
  return out;
}

Sigma1Result sigma1_experiment(std::span<const SensorWindow> windows, const Sigma1Config& cfg,
                               const ModelState* state) {
  const std::size_t n = windows.size();
  if (n < 3) throw ParameterError("sigma1_experiment: need at least 3 windows");
  if (cfg.encoder == EncoderKind::ModelEncoder && !state)
    throw ParameterError("sigma1_experiment: model encoder needs a checkpoint");
  const std::size_t lp = cfg.encoder == EncoderKind::ModelEncoder ? state->arch.patch_len : cfg.patch_len;
  const std::size_t C = windows.front().modalities();
  if (lp == 0 || windows.front().length() < lp) throw ParameterError("sigma1_experiment: bad patch length");
  const std::size_t P = windows.front().length() / lp;

  Rng rng(Rng::mix(cfg.seed) ^ 0x51a0ULL);
  std::vector<std::vector<double>> fu, fm;
  for (const auto& w : windows) {
    if (w.modalities() != C || w.length() / lp != P) throw ParameterError("sigma1_experiment: windows differ in shape");
    const MaskMatrix mask = sample_mask(cfg.policy, C, P, cfg.mask_ratio, rng);
    if (cfg.encoder == EncoderKind::RawFlatten) {
      std::vector<double> u(C * P * lp, 0.0), m(C * P * lp, 0.0);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t t = 0; t < P * lp; ++t)
          (mask.masked(c, t / lp) ? m : u)[c * P * lp + t] = w.values(c, t);
      fu.push_back(std::move(u));
      fm.push_back(std::move(m));
    } else {
      const ViewSplit views = split_views(prepare_grid(w, state->arch), mask);
      fu.push_back(mean_token_embedding(*state, views));
      fm.push_back(mean_token_embedding(*state, ViewSplit{views.masked, views.unmasked}));
    }
  }
  const std::size_t q = fu.front().size();
  auto to_matrix = [&](const std::vector<std::vector<double>>& rows) {
    Matrix out(n, q);
    for (std::size_t i = 0; i < n; ++i) std::copy(rows[i].begin(), rows[i].end(), out.row(i).begin());
    return out;
  };
  Sigma1Result res;
  res.n = n;
  res.pca_k = std::min(cfg.pca_k, std::min(n, q) - 1);
  if (res.pca_k == 0) throw ParameterError("sigma1_experiment: pca_k clipped to zero");
  const Matrix zu = pca_reduce(to_matrix(fu), res.pca_k);
  const Matrix zm = pca_reduce(to_matrix(fm), res.pca_k);
  res.sigma1 = cca_sigma(covariances(zu, zm)).sigma.front();
  return res;
}

namespace {

constexpr const char* kGramTag = "moca-gram-v1";

}  // namespace

void write_gram(const std::filesystem::path& path, const Matrix& k) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << kGramTag << " rows=" << k.rows() << " cols=" << k.cols() << " dtype=float64-le\n";
  for (double v : k.data()) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    char bytes[8];
    for (int b = 0; b < 8; ++b) bytes[b] = static_cast<char>((bits >> (8 * b)) & 0xff);
    out.write(bytes, 8);
  }
  if (!out) throw IoError("failed writing " + path.string());
}

Matrix read_gram(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::string header;
  std::getline(in, header);
  std::istringstream hs(header);
  std::string tag, rows_kv, cols_kv, dtype;
  hs >> tag >> rows_kv >> cols_kv >> dtype;
  if (tag != kGramTag || rows_kv.rfind("rows=", 0) != 0 || cols_kv.rfind("cols=", 0) != 0 ||
      dtype != "dtype=float64-le")
    throw ParseError(path.string(), 1, "malformed gram header");
  std::size_t rows = 0, cols = 0;
  try {
    rows = std::stoull(rows_kv.substr(5));
    cols = std::stoull(cols_kv.substr(5));
  } catch (const std::exception&) {
    throw ParseError(path.string(), 1, "malformed gram dimensions");
  }
  Matrix k(rows, cols);
  for (auto& v : k.data()) {
    unsigned char bytes[8];
    if (!in.read(reinterpret_cast<char*>(bytes), 8)) throw IoError(path.string() + ": truncated gram blob");
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[b]) << (8 * b);
    std::memcpy(&v, &bits, sizeof v);
  }
  if (in.peek() != std::ifstream::traits_type::eof()) throw IoError(path.string() + ": trailing bytes in gram blob");
  return k;
}

}  // namespace moca
