#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "moca/masking.h"
#include "moca/numerics.h"
#include "moca/synthdata.h"

namespace moca {

struct ArchSpec {
  std::size_t embed_dim = 32;
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 1;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 2;
  std::size_t patch_len = 8;
  std::size_t modalities = 6;
  std::size_t patches_per_modality = 8;

  std::size_t tokens() const noexcept { return modalities * patches_per_modality; }
  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

void validate(const ArchSpec& arch);

/// Pre-norm transformer block parameters.
struct BlockParams {
  nn::Parameter ln1_g, ln1_b;
  nn::Parameter qkv_w, qkv_b;
  nn::Parameter proj_w, proj_b;
  nn::Parameter ln2_g, ln2_b;
  nn::Parameter fc1_w, fc1_b;
  nn::Parameter fc2_w, fc2_b;
};

struct ModelState {
  ArchSpec arch;
  nn::Parameter patch_w, patch_b;  // L_p -> D
  nn::Parameter cls_token;         // 1 x D
  nn::Parameter mask_token;        // 1 x D
  std::vector<BlockParams> encoder;
  nn::Parameter enc_norm_g, enc_norm_b;
  std::vector<BlockParams> decoder;
  nn::Parameter dec_norm_g, dec_norm_b;
  nn::Parameter head_w, head_b;    // D -> L_p
  /// Fixed (C * P + 1) x D table; row 0 belongs to the class token.
  nn::Tensor positions;

  /// Every learnable tensor in a stable order.
  std::vector<nn::Parameter*> parameters();
  std::vector<const nn::Parameter*> parameters() const;
  /// Parameters used by encode() (patch embedding, class token, encoder blocks and norm).
  std::vector<nn::Parameter*> encoder_parameters();
  void zero_grad();
};

/// Row for (c, p) is [enc(c) | enc(p)], each half interleaving sin/cos at
/// frequencies 10000^(-2k / (D/2)). Row 0 (class token) is zero.
nn::Tensor positions_2d(std::size_t modalities, std::size_t patches, std::size_t embed_dim);

ModelState init_model(const ArchSpec& arch, std::uint64_t seed);

/// Puts model parameters on a tape. Parameters listed as trainable become
/// gradient leaves; everything else is recorded as a constant.
class Binder {
 public:
  explicit Binder(nn::Tape& tape) : tape_(tape) {}
  Binder(nn::Tape& tape, std::span<nn::Parameter* const> trainable);

  nn::Var operator()(const nn::Parameter& p);
  nn::Tape& tape() { return tape_; }

 private:
  nn::Tape& tape_;
  std::unordered_map<const nn::Parameter*, nn::Parameter*> trainable_;
  std::unordered_map<const nn::Parameter*, nn::Var> bound_;
};

/// Encoder output: row 0 is the class latent, row i + 1 the latent of
/// visible patch coords[i].
struct Encoded {
  nn::Var tokens;
  std::vector<std::pair<std::size_t, std::size_t>> coords;
};

Encoded encode(const ModelState& state, Binder& bind, const ViewSplit& views);
/// Full (C * P) x L_p reconstruction, rows in (c, p) row-major order.
nn::Var decode(const ModelState& state, Binder& bind, const Encoded& latents, const MaskMatrix& mask);

enum class LossMode { AllPatches, MaskedOnly };

nn::Var mae_loss(const ModelState& state, Binder& bind, const PatchGrid& grid, const MaskMatrix& mask,
                 LossMode mode = LossMode::AllPatches);

/// Inference helpers (no gradients).
PatchGrid reconstruct(const ModelState& state, const PatchGrid& grid, const MaskMatrix& mask);
double evaluate_loss(const ModelState& state, const PatchGrid& grid, const MaskMatrix& mask,
                     LossMode mode = LossMode::AllPatches);
/// Class-token latent with every patch visible.
std::vector<double> class_embedding(const ModelState& state, const PatchGrid& grid);
/// Mean of the per-token latents (class token excluded) for a view.
std::vector<double> mean_token_embedding(const ModelState& state, const ViewSplit& views);

/// Finite-difference check of mae_loss over every parameter of a freshly
/// initialized model on one synthetic window with a cross-modality mask.
nn::GradCheckResult gradcheck_model(const ArchSpec& arch, std::uint64_t seed, double h = 1e-4,
                                    LossMode mode = LossMode::AllPatches);

// --- alignment identity ----------------------------------------------------

struct AlignmentTerms {
  double loss = 0.0;       // mean squared distance between prediction and target
  double alignment = 0.0;  // mean inner product
  double band = 0.0;       // loss - (2 c^2 - 2 alignment); zero with a perfect pseudo-inverse
};

/// Requires every vector to have norm c_norm (relative tolerance 1e-9),
/// otherwise throws PreconditionError.
AlignmentTerms alignment_terms(std::span<const std::vector<double>> predictions,
                               std::span<const std::vector<double>> targets, double c_norm);

/// Reconstructs the masked view of each (grid, mask) pair, rescales the
/// prediction and the masked-view target to norm c_norm and returns the terms.
AlignmentTerms alignment_gap(const ModelState& state, std::span<const PatchGrid> grids,
                             std::span<const MaskMatrix> masks, double c_norm);

// --- checkpoints -------------------------------------------------------------
// <stem>.manifest lists arch fields and "param <name> <shape> <offset>" lines;
// <stem>.f32 holds every tensor as little-endian float32 at those offsets.

/// Adam moment buffers, parallel to ModelState::parameters().
struct OptimizerMoments {
  std::size_t step = 0;    // optimizer steps taken
  std::size_t epochs = 0;  // completed pretraining epochs
  std::vector<nn::Tensor> first, second;
};

void save_checkpoint(const std::filesystem::path& stem, const ModelState& state,
                     const OptimizerMoments* moments = nullptr);
ModelState load_checkpoint(const std::filesystem::path& stem, OptimizerMoments* moments = nullptr);

}  // namespace moca
