#include <doctest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "moca/kcca.h"

using namespace moca;

namespace {

Eigen::MatrixXd to_eigen(const Matrix& m) {
  Eigen::MatrixXd e(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) e(r, c) = m(r, c);
  return e;
}

double min_eigenvalue(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(to_eigen(m));
  return es.eigenvalues().minCoeff();
}

double max_eigenvalue(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(to_eigen(m));
  return es.eigenvalues().maxCoeff();
}

PatchSet random_view(std::size_t patches, std::size_t len, Rng& rng) {
  PatchSet v(patches, std::vector<double>(len));
  for (auto& p : v)
    for (auto& x : p) x = rng.normal();
  return v;
}

Matrix random_psd(std::size_t n, Rng& rng) {
  Matrix a(n, n + 2);
  for (auto& v : a.data()) v = rng.normal();
  return a * a.transposed();
}

Matrix gram_of(const Matrix& features) { return features * features.transposed(); }

Matrix centered_columns(Matrix x) {
  for (std::size_t c = 0; c < x.cols(); ++c) {
    double mean = 0;
    for (std::size_t r = 0; r < x.rows(); ++r) mean += x(r, c);
    mean /= double(x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r) x(r, c) -= mean;
  }
  return x;
}

}  // namespace

TEST_CASE("patch kernels") {
  const std::vector<double> a{1.0, 2.0, -1.0}, b{2.0, -1.0, 0.0};
  PatchKernel lin;
  PatchKernel rbf{KernelKind::Rbf, 0.5};
  CHECK(patch_kernel(lin, a, b) == 0.0);
  CHECK(patch_kernel(lin, a, a) == 6.0);
  CHECK(patch_kernel(rbf, a, a) == 1.0);
  CHECK(patch_kernel(rbf, a, b) == doctest::Approx(std::exp(-0.5 * 11.0)));
  const std::vector<double> short_patch{1.0};
  CHECK_THROWS_AS(patch_kernel(lin, a, short_patch), ParameterError);
  CHECK_THROWS_AS(patch_kernel(PatchKernel{KernelKind::Rbf, 0.0}, a, a), ParameterError);
}

TEST_CASE("view grams are symmetric and PSD") {
  Rng rng(1);
  std::vector<PatchSet> singles;
  for (int i = 0; i < 20; ++i) singles.push_back(random_view(1, 4, rng));
  for (auto k : {PatchKernel{KernelKind::Linear, 1.0}, PatchKernel{KernelKind::Rbf, 0.3}}) {
    const auto g = view_gram(singles, k);
    CHECK(max_abs_diff(g, g.transposed()) < 1e-10);
    CHECK(min_eigenvalue(g) >= -1e-10);
    for (std::size_t i = 0; i < 20; ++i)
      for (std::size_t j = 0; j < 20; ++j) CHECK(g(i, j) == doctest::Approx(patch_kernel(k, singles[i][0], singles[j][0])));
  }

  std::vector<PatchSet> views;
  for (int i = 0; i < 15; ++i) views.push_back(random_view(1 + i % 4, 3, rng));
  views.push_back(views[2]);
  for (auto k : {PatchKernel{KernelKind::Linear, 1.0}, PatchKernel{KernelKind::Rbf, 0.3}}) {
    const auto g = view_gram(views, k);
    CHECK(min_eigenvalue(g) >= -1e-8 * max_eigenvalue(g));
    for (std::size_t j = 0; j < views.size(); ++j) CHECK(g(2, j) == doctest::Approx(g(15, j)).epsilon(1e-12));
  }
  views.push_back(PatchSet{});
  CHECK_THROWS_AS(view_gram(views, PatchKernel{}), ParameterError);
}

TEST_CASE("linear view gram equals the mean feature dot products") {
  Rng rng(2);
  std::vector<PatchSet> views;
  for (int i = 0; i < 12; ++i) views.push_back(random_view(1 + i % 5, 4, rng));
  Matrix means(12, 4);
  for (std::size_t i = 0; i < 12; ++i) {
    for (const auto& p : views[i])
      for (std::size_t t = 0; t < 4; ++t) means(i, t) += p[t] / double(views[i].size());
  }
  CHECK(max_abs_diff(view_gram(views, PatchKernel{}), gram_of(means)) < 1e-10);
}

TEST_CASE("centering") {
  const Matrix ones(5, 5, 1.0);
  CHECK(max_abs_diff(center_gram(ones), Matrix(5, 5)) < 1e-15);
  Rng rng(3);
  const auto k = random_psd(8, rng);
  const auto c = center_gram(k);
  for (std::size_t i = 0; i < 8; ++i) {
    double row = 0, col = 0;
    for (std::size_t j = 0; j < 8; ++j) {
      row += c(i, j);
      col += c(j, i);
    }
    CHECK(std::abs(row) < 1e-10);
    CHECK(std::abs(col) < 1e-10);
  }
  CHECK(max_abs_diff(center_gram(c), c) < 1e-10);
  auto in_place = k;
  center_gram_in_place(in_place);
  CHECK(max_abs_diff(in_place, c) < 1e-12);
}

TEST_CASE("kcca on identical views") {
  Rng rng(4);
  Matrix f(100, 3);
  for (auto& v : f.data()) v = rng.normal();
  const auto k = gram_of(f);
  const auto r = kcca_solve({k, k}, 1e-6, 1e-6);
  CHECK(r.rho >= 0.999);
  CHECK(r.rho <= 1.0 + 1e-8);
  CHECK(r.alpha.size() == 100);
}

TEST_CASE("kcca coefficient normalization") {
  Rng rng(5);
  Matrix u(60, 3), m(60, 3);
  for (auto& v : u.data()) v = rng.normal();
  for (std::size_t i = 0; i < 60; ++i)
    for (std::size_t j = 0; j < 3; ++j) m(i, j) = u(i, j) + rng.normal();
  const auto ku = center_gram(gram_of(u));
  const auto km = center_gram(gram_of(m));
  const double g = 1e-2;
  const auto r = kcca_solve({ku, km}, g, g);
  auto quad = [](const Matrix& k, const std::vector<double>& a, double gamma) {
    const Matrix kk = k * k + gamma * k;
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t j = 0; j < a.size(); ++j) s += a[i] * kk(i, j) * a[j];
    return s;
  };
  CHECK(quad(ku, r.alpha, g) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(quad(km, r.beta, g) == doctest::Approx(1.0).epsilon(1e-6));
  double corr = 0;
  const Matrix kukm = ku * km;
  for (std::size_t i = 0; i < 60; ++i)
    for (std::size_t j = 0; j < 60; ++j) corr += r.alpha[i] * kukm(i, j) * r.beta[j];
  CHECK(corr == doctest::Approx(r.rho).epsilon(1e-6));
}

TEST_CASE("kcca on independent views stays below the permutation null") {
  Rng rng(6);
  std::vector<PatchSet> u, m;
  for (int i = 0; i < 200; ++i) {
    u.push_back(random_view(3, 2, rng));
    m.push_back(random_view(3, 2, rng));
  }
  const auto ku = view_gram(u, PatchKernel{});
  const auto km = view_gram(m, PatchKernel{});
  const double rho = kcca_solve({ku, km}, 1e-2, 1e-2).rho;
  CHECK(rho < 0.35);

  std::vector<double> null;
  std::vector<std::size_t> order(200);
  std::iota(order.begin(), order.end(), 0);
  for (int rep = 0; rep < 40; ++rep) {
    std::vector<PatchSet> shuffled;
    for (auto i : rng.sample_without_replacement(200, 200)) shuffled.push_back(m[i]);
    null.push_back(kcca_solve({ku, view_gram(shuffled, PatchKernel{})}, 1e-2, 1e-2).rho);
  }
  std::sort(null.begin(), null.end());
  CHECK(null[37] < 0.35);
}

TEST_CASE("kcca recovers a known linear canonical correlation") {
  Rng rng(7);
  const std::size_t n = 5000;
  Matrix x(n, 1), y(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    x(i, 0) = rng.normal();
    y(i, 0) = 0.8 * x(i, 0) + 0.6 * rng.normal();
  }
  const auto r = kcca_solve({gram_of(x), gram_of(y)}, 1e-4, 1e-4);
  CHECK(std::abs(r.rho - 0.8) < 0.02);
}

TEST_CASE("kcca is invariant to sample relabeling") {
  Rng rng(8);
  std::vector<PatchSet> u, m;
  for (int i = 0; i < 50; ++i) {
    u.push_back(random_view(2, 3, rng));
    auto v = u.back();
    for (auto& p : v)
      for (auto& x : p) x = 0.5 * x + rng.normal();
    m.push_back(v);
  }
  const PatchKernel rbf{KernelKind::Rbf, 0.2};
  const auto base = kcca_solve({view_gram(u, rbf), view_gram(m, rbf)}).rho;
  const auto perm = rng.sample_without_replacement(50, 50);
  std::vector<PatchSet> up, mp;
  for (auto i : perm) {
    up.push_back(u[i]);
    mp.push_back(m[i]);
  }
  const auto permuted = kcca_solve({view_gram(up, rbf), view_gram(mp, rbf)}).rho;
  CHECK(std::abs(base - permuted) < 1e-8);
  CHECK(base <= 1.0 + 1e-8);
}

TEST_CASE("kcca default regularizers and indefinite input") {
  Rng rng(9);
  const auto k = random_psd(10, rng);
  const auto r = kcca_solve({k, k}, std::nullopt, std::nullopt, false);
  CHECK(r.gamma_u == doctest::Approx(1e-3 * k.trace() / 10));
  Matrix bad = Matrix::identity(10);
  bad(3, 3) = -0.5;
  CHECK_THROWS_AS(kcca_solve({bad, k}, 1e-3, 1e-3, false), ConditioningError);
  CHECK_THROWS_AS(kcca_solve({k, k}, 0.0, 1e-3), ParameterError);
  CHECK_THROWS_AS(kcca_solve({k, Matrix::identity(9)}), ParameterError);
}

TEST_CASE("pca reduction") {
  Rng rng(10);
  Matrix rank1(30, 5);
  std::vector<double> dir{1, -2, 0.5, 3, 1};
  for (std::size_t i = 0; i < 30; ++i) {
    const double s = rng.normal();
    for (std::size_t j = 0; j < 5; ++j) rank1(i, j) = s * dir[j];
  }
  const auto scores = pca_reduce(rank1, 1);
  const auto centered = centered_columns(rank1);
  double norm_dir = 0;
  for (double d : dir) norm_dir += d * d;
  norm_dir = std::sqrt(norm_dir);
  const double sign = scores(0, 0) * centered(0, 0) * dir[0] >= 0 ? 1.0 : -1.0;
  double worst = 0;
  for (std::size_t i = 0; i < 30; ++i)
    for (std::size_t j = 0; j < 5; ++j)
      worst = std::max(worst, std::abs(sign * scores(i, 0) * dir[j] / norm_dir - centered(i, j)));
  CHECK(worst < 1e-8);

  Matrix x(40, 6);
  for (auto& v : x.data()) v = rng.normal(2.0, 3.0);
  const auto full = pca_reduce(x, 6);
  for (std::size_t c = 0; c < 6; ++c) {
    double mean = 0;
    for (std::size_t r = 0; r < 40; ++r) mean += full(r, c);
    CHECK(std::abs(mean / 40) < 1e-10);
  }
  const auto gram = full.transposed() * full;
  for (std::size_t a = 0; a < 6; ++a)
    for (std::size_t b = 0; b < 6; ++b)
      if (a != b) CHECK(std::abs(gram(a, b)) < 1e-8);
  CHECK(max_abs_diff(gram_of(full), gram_of(centered_columns(x))) < 1e-8);
  CHECK_THROWS_AS(pca_reduce(x, 7), ParameterError);
  CHECK_THROWS_AS(pca_reduce(x, 0), ParameterError);
}

TEST_CASE("cca examples") {
  Rng rng(11);
  Matrix u(500, 3), m(500, 2);
  for (auto& v : u.data()) v = rng.normal();
  for (auto& v : m.data()) v = rng.normal();
  u = centered_columns(u);
  m = centered_columns(m);
  auto cov = covariances(u, m);
  cov.s_um = Matrix(3, 2);
  CHECK(cca_sigma(cov).sigma[0] == doctest::Approx(0.0));

  const auto same = cca_sigma(covariances(u, u));
  CHECK(std::abs(same.sigma[0] - 1.0) < 1e-8);
  CHECK(same.w_u.size() == 3);
  CHECK_THROWS_AS(covariances(u, Matrix(10, 2)), ParameterError);
}

TEST_CASE("cca recovers designed canonical correlations") {
  Rng rng(12);
  const std::size_t n = 10000;
  const double rho[] = {0.9, 0.5};
  Matrix lu(n, 3), lm(n, 3);
  for (std::size_t i = 0; i < n; ++i) {
    for (int k = 0; k < 2; ++k) {
      const double z = rng.normal();
      lu(i, k) = z;
      lm(i, k) = rho[k] * z + std::sqrt(1 - rho[k] * rho[k]) * rng.normal();
    }
    lu(i, 2) = rng.normal();
    lm(i, 2) = rng.normal();
  }
  Matrix a = Matrix::identity(3), b = Matrix::identity(3);
  for (auto& v : a.data()) v += 0.2 * rng.normal();
  for (auto& v : b.data()) v += 0.2 * rng.normal();
  const auto u = centered_columns(lu * a);
  const auto m = centered_columns(lm * b);
  const auto r = cca_sigma(covariances(u, m));
  CHECK(std::abs(r.sigma[0] - 0.9) < 0.02);
  CHECK(std::abs(r.sigma[1] - 0.5) < 0.02);
  CHECK(r.sigma[2] < 0.05);
  const auto base = cca_sigma(covariances(centered_columns(lu), centered_columns(lm)));
  for (std::size_t k = 0; k < 3; ++k) CHECK(std::abs(base.sigma[k] - r.sigma[k]) < 1e-6);
}

TEST_CASE("sigma1 experiment basics") {
  SynthSpec spec;
  spec.n_windows = 40;
  spec.modalities = 3;
  spec.length = 32;
  spec.patch_len = 4;
  const auto base = generate_windows(spec);
  const auto windows = transition_windows(base, 40, 3);
  CHECK(windows.size() == 40);
  Sigma1Config cfg;
  cfg.patch_len = 4;
  cfg.pca_k = 50;
  cfg.seed = 1;
  const auto r = sigma1_experiment(windows, cfg);
  CHECK(r.pca_k == 39);
  CHECK(r.n == 40);
  CHECK(r.sigma1 >= 0.0);
  CHECK(r.sigma1 <= 1.0 + 1e-8);
  CHECK(sigma1_experiment(windows, cfg).sigma1 == r.sigma1);
  cfg.pca_k = 8;
  CHECK(sigma1_experiment(windows, cfg).pca_k == 8);

  cfg.encoder = EncoderKind::ModelEncoder;
  CHECK_THROWS_AS(sigma1_experiment(windows, cfg), ParameterError);
  ArchSpec arch;
  arch.embed_dim = 8;
  arch.heads = 2;
  arch.patch_len = 4;
  arch.modalities = 3;
  arch.patches_per_modality = 8;
  const auto state = init_model(arch, 1);
  const auto rm = sigma1_experiment(windows, cfg, &state);
  CHECK(rm.pca_k == 7);
  CHECK(rm.sigma1 <= 1.0 + 1e-8);
  CHECK(parse_encoder_kind(to_string(EncoderKind::ModelEncoder)) == EncoderKind::ModelEncoder);
  CHECK_THROWS_AS(parse_encoder_kind("pixels"), ParameterError);
}

TEST_CASE("gram files round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "moca_test_gram";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  Rng rng(13);
  const auto k = random_psd(7, rng);
  write_gram(dir / "k.f64", k);
  CHECK(read_gram(dir / "k.f64") == k);
  std::ifstream in(dir / "k.f64", std::ios::binary);
  std::string header;
  std::getline(in, header);
  CHECK(header == "moca-gram-v1 rows=7 cols=7 dtype=float64-le");
  std::ofstream(dir / "bad.f64") << "nonsense\n";
  CHECK_THROWS(read_gram(dir / "bad.f64"));
}
