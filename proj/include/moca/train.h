#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "moca/masking.h"
#include "moca/model.h"
#include "moca/synthdata.h"

namespace moca {

struct OptimConfig {
  double lr = 5e-4;
  double weight_decay = 5e-2;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  std::size_t batch_size = 16;
  std::size_t warmup_epochs = 10;
  std::size_t total_epochs = 200;
  double min_lr = 0.0;
  std::uint64_t seed = 0;
};

void validate(const OptimConfig& cfg);

using AdamState = OptimizerMoments;

AdamState make_adam_state(std::span<nn::Parameter* const> params);

/// One AdamW update at step t >= 1 with learning rate `lr`:
///   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2,
///   theta <- theta - lr * wd * theta - lr * m_hat / (sqrt(v_hat) + eps).
/// `decay` selects which parameters receive weight decay (all when empty).
void adamw_step(std::span<nn::Parameter* const> params, AdamState& state, std::size_t t, double lr,
                const OptimConfig& cfg, const std::vector<bool>& decay = {});

/// Linear warmup from 0 to base_lr, then cosine decay to min_lr at total_steps.
double cosine_lr(std::size_t step, std::size_t warmup_steps, std::size_t total_steps, double base_lr,
                 double min_lr);

/// True for weight matrices (names ending in ".w"); biases, norms and tokens are not decayed.
bool decays(const nn::Parameter& p);

struct PretrainConfig {
  ArchSpec arch;
  OptimConfig optim;
  MaskPolicy policy = MaskPolicy::CrossModality;
  double mask_ratio = 0.75;
  bool augment = true;
  double augment_prob = 0.5;
  bool matched_splice = false;
  LossMode loss_mode = LossMode::AllPatches;
  std::uint64_t init_seed = 0;
};

struct PretrainResult {
  ModelState state;
  AdamState optimizer;
  std::vector<double> epoch_loss;  // mean per-sample loss for each epoch run
};

using EpochCallback = std::function<void(std::size_t epoch, double loss)>;

/// Masked-reconstruction pretraining. Each step: optional joint splice
/// (probability augment_prob), per-window standardization, patchify, a fresh
/// mask per sample, loss, backward, AdamW. With `resume` the run continues
/// from its recorded epoch count up to optim.total_epochs.
PretrainResult pretrain(std::span<const SensorWindow> dataset, const PretrainConfig& cfg,
                        const PretrainResult* resume = nullptr, const EpochCallback& on_epoch = {});

/// Standardize, then patchify with the model's patch length after trimming to P * L_p samples.
PatchGrid prepare_grid(const SensorWindow& window, const ArchSpec& arch);

enum class ProbeMode { LinearProbe, FineTune };

struct ProbeConfig {
  ProbeMode mode = ProbeMode::LinearProbe;
  std::size_t n_classes = 4;
  std::size_t epochs = 100;
  double lr = 1e-2;
  std::size_t batch_size = 32;
  double train_fraction = 0.7;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
};

struct ProbeResult {
  double top1 = 0.0;        // held-out accuracy
  double train_top1 = 0.0;
  nn::Parameter head_w, head_b;
  std::vector<double> curve;  // mean training loss per epoch
  ModelState state;           // encoder after training (unchanged for LinearProbe)
  std::size_t n_train = 0, n_test = 0;
};

/// Linear classification head on the class-token latent, trained with softmax
/// cross-entropy on a seeded 70/30 split. LinearProbe keeps the encoder frozen.
ProbeResult probe(const ModelState& state, std::span<const SensorWindow> dataset, const ProbeConfig& cfg);

}  // namespace moca
