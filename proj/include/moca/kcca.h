#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moca/common.h"
#include "moca/masking.h"
#include "moca/model.h"
#include "moca/synthdata.h"

namespace moca {

enum class KernelKind { Linear, Rbf };

struct PatchKernel {
  KernelKind kind = KernelKind::Linear;
  double gamma = 1.0;  // Rbf width: exp(-gamma |a - b|^2)
};

double patch_kernel(const PatchKernel& k, std::span<const double> a, std::span<const double> b);

/// A view is a set of equal-length patches.
using PatchSet = std::vector<std::vector<double>>;

/// Mean-embedding Gram: entry (i, j) averages patch_kernel over every pair
/// of patches from view i and view j.
Matrix view_gram(std::span<const PatchSet> views, const PatchKernel& k);

/// H K H with H = I - 11^T / n.
Matrix center_gram(const Matrix& k);
void center_gram_in_place(Matrix& k);

struct ViewGrams {
  Matrix k_u, k_m;
};

struct KccaResult {
  double rho = 0.0;
  std::vector<double> alpha, beta;
  double gamma_u = 0.0, gamma_m = 0.0;
};

/// Regularized kernel CCA. Finds the largest rho of
///   K_U K_M b = rho (K_U^2 + g_U K_U) a,  K_M K_U a = rho (K_M^2 + g_M K_M) b
/// through low-rank factors K = G G^T, where the problem becomes a ridge CCA
/// on G. Unset regularizers default to 1e-3 trace(K) / n. Coefficients are
/// scaled so a^T (K_U^2 + g_U K_U) a = 1 (likewise b).
KccaResult kcca_solve(ViewGrams grams, std::optional<double> gamma_u = std::nullopt,
                      std::optional<double> gamma_m = std::nullopt, bool centered = true);

/// Column-centers and projects onto the top-k right singular vectors.
Matrix pca_reduce(const Matrix& features, std::size_t k);

struct CovTriple {
  Matrix s_uu, s_mm, s_um;
};

/// Sample covariances of already centered score matrices (divided by n).
CovTriple covariances(const Matrix& u, const Matrix& m);

struct CcaResult {
  std::vector<double> sigma;  // descending singular values of the whitened cross-covariance
  std::vector<double> w_u, w_m;
};

/// Singular values of S_UU^{-1/2} S_UM S_MM^{-1/2}, with 1e-8 trace / dim
/// added to each within-view diagonal.
CcaResult cca_sigma(const CovTriple& cov);

enum class EncoderKind { RawFlatten, ModelEncoder };

const char* to_string(EncoderKind kind);
EncoderKind parse_encoder_kind(const std::string& name);

struct Sigma1Config {
  MaskPolicy policy = MaskPolicy::CrossModality;
  EncoderKind encoder = EncoderKind::RawFlatten;
  std::size_t pca_k = 50;
  double mask_ratio = 0.75;
  std::size_t patch_len = 8;
  std::uint64_t seed = 0;
};

/// n transition windows: joint splices of random pairs from `base`.
std::vector<SensorWindow> transition_windows(std::span<const SensorWindow> base, std::size_t n, std::uint64_t seed);

struct Sigma1Result {
  double sigma1 = 0.0;
  std::size_t pca_k = 0;  // after clipping
  std::size_t n = 0;
};

/// One mask per window, view features (zero-filled flattening or the mean
/// token latent of each view), PCA to pca_k on both sides, then sigma_1.
/// ModelEncoder standardizes windows first and needs `state`.
Sigma1Result sigma1_experiment(std::span<const SensorWindow> windows, const Sigma1Config& cfg,
                               const ModelState* state = nullptr);

/// Raw float64 row-major dump behind a one-line text header.
void write_gram(const std::filesystem::path& path, const Matrix& k);
Matrix read_gram(const std::filesystem::path& path);

}  // namespace moca
