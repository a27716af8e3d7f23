#include "moca/train.h"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

namespace moca {

using nn::Parameter;
using nn::Tape;
using nn::Tensor;
using nn::Var;

void validate(const OptimConfig& cfg) {
  if (!(cfg.lr > 0)) throw ParameterError("optim: lr must be positive");
  if (!(cfg.beta1 > 0 && cfg.beta1 < 1) || !(cfg.beta2 > 0 && cfg.beta2 < 1))
    throw ParameterError("optim: betas must lie in (0, 1)");
  if (!(cfg.weight_decay >= 0)) throw ParameterError("optim: weight_decay must be nonnegative");
  if (!(cfg.min_lr >= 0) || cfg.min_lr > cfg.lr) throw ParameterError("optim: min_lr must lie in [0, lr]");
  if (cfg.batch_size == 0) throw ParameterError("optim: batch_size must be positive");
}

AdamState make_adam_state(std::span<Parameter* const> params) {
  AdamState s;
  for (auto* p : params) {
    s.first.emplace_back(p->value.shape());
    s.second.emplace_back(p->value.shape());
  }
  return s;
}

bool decays(const Parameter& p) {
  return p.name.size() >= 2 && p.name.compare(p.name.size() - 2, 2, ".w") == 0;
}

void adamw_step(std::span<Parameter* const> params, AdamState& state, std::size_t t, double lr,
                const OptimConfig& cfg, const std::vector<bool>& decay) {
  if (t == 0) throw ParameterError("adamw_step: step index starts at 1");
  if (state.first.size() != params.size() || state.second.size() != params.size())
    throw ParameterError("adamw_step: optimizer state does not match parameters");
  if (!decay.empty() && decay.size() != params.size()) throw ParameterError("adamw_step: decay mask size mismatch");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    Tensor& m = state.first[i];
    Tensor& v = state.second[i];
    if (!p.grad.same_shape(p.value) || !m.same_shape(p.value) || !v.same_shape(p.value))
      throw ParameterError("adamw_step: shape mismatch for " + p.name);
    const double wd = (decay.empty() || decay[i]) ? cfg.weight_decay : 0.0;
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad[k];
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      const double theta = p.value[k];
      p.value[k] = theta - lr * wd * theta - lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

double cosine_lr(std::size_t step, std::size_t warmup_steps, std::size_t total_steps, double base_lr, double min_lr) {
  if (step < warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (total_steps <= warmup_steps) return base_lr;
  const double progress =
      std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps));
  return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

PatchGrid prepare_grid(const SensorWindow& window, const ArchSpec& arch) {
  const std::size_t keep = arch.patches_per_modality * arch.patch_len;
  if (window.modalities() != arch.modalities || window.length() < keep)
    throw ParameterError("window shape " + std::to_string(window.modalities()) + "x" +
                         std::to_string(window.length()) + " does not fit the model");
  SensorWindow w = window.length() == keep ? window : truncate(window, keep);
  return patchify(standardize(w), arch.patch_len);
}

namespace {

void check_dataset(std::span<const SensorWindow> dataset, const ArchSpec& arch) {
  if (dataset.empty()) throw ParameterError("empty dataset");
  const std::size_t C = dataset.front().modalities();
  const std::size_t L = dataset.front().length();
  for (const auto& w : dataset)
    if (w.modalities() != C || w.length() != L) throw ParameterError("dataset windows differ in shape");
  if (C != arch.modalities || arch.patch_len == 0 || L / arch.patch_len != arch.patches_per_modality)
    throw ParameterError("dataset shape " + std::to_string(C) + "x" + std::to_string(L) +
                         " does not match the architecture (C=" + std::to_string(arch.modalities) +
                         ", P=" + std::to_string(arch.patches_per_modality) +
                         ", L_p=" + std::to_string(arch.patch_len) + ")");
}

std::uint64_t epoch_seed(std::uint64_t seed, std::size_t epoch) {
  return Rng::mix(seed ^ Rng::mix(0x5eed0000ULL + epoch));
}

}  // namespace

PretrainResult pretrain(std::span<const SensorWindow> dataset, const PretrainConfig& cfg, const PretrainResult* resume,
                        const EpochCallback& on_epoch) {
  validate(cfg.arch);
  validate(cfg.optim);
  check_dataset(dataset, cfg.arch);
  if (!(cfg.augment_prob >= 0 && cfg.augment_prob <= 1)) throw ParameterError("pretrain: augment_prob must lie in [0,1]");

  PretrainResult res;
  if (resume) {
    if (!(resume->state.arch == cfg.arch)) throw ParameterError("pretrain: resume checkpoint has a different architecture");
    res = *resume;
  } else {
    res.state = init_model(cfg.arch, cfg.init_seed);
  }
  auto params = res.state.parameters();
  if (res.optimizer.first.size() != params.size()) {
    const std::size_t epochs_done = res.optimizer.epochs;
    res.optimizer = make_adam_state(params);
    res.optimizer.epochs = epochs_done;
  }
  std::vector<bool> decay;
  for (auto* p : params) decay.push_back(decays(*p));

  const std::size_t n = dataset.size();
  const std::size_t bs = std::min(cfg.optim.batch_size, n);
  const std::size_t batches = (n + bs - 1) / bs;
  const std::size_t total_steps = cfg.optim.total_epochs * batches;
  const std::size_t warmup_steps = std::min(cfg.optim.warmup_epochs * batches, total_steps > 0 ? total_steps - 1 : 0);
  const auto [splice_lo, splice_hi] = splice_length_bounds(dataset.front().length());
  const std::size_t L = dataset.front().length();

  for (std::size_t epoch = res.optimizer.epochs; epoch < cfg.optim.total_epochs; ++epoch) {
    Rng rng(epoch_seed(cfg.optim.seed, epoch));
    const auto order = rng.sample_without_replacement(n, n);
    double epoch_sum = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t begin = b * bs;
      const std::size_t end = std::min(n, begin + bs);
      res.state.zero_grad();
      for (std::size_t k = begin; k < end; ++k) {
        const SensorWindow* window = &dataset[order[k]];
        SensorWindow spliced;
        if (cfg.augment && n >= 2 && splice_lo <= splice_hi && rng.bernoulli(cfg.augment_prob)) {
          std::size_t other = rng.integer(0, n - 2);
          if (other >= order[k]) ++other;
          const std::size_t len = rng.integer(splice_lo, splice_hi);
          const std::size_t dst = rng.integer(0, L - len);
          const std::size_t src = cfg.matched_splice ? dst : rng.integer(0, L - len);
          spliced = splice_windows(*window, dataset[other], len, dst, src);
          window = &spliced;
        }
        const PatchGrid grid = prepare_grid(*window, cfg.arch);
        const MaskMatrix mask =
            sample_mask(cfg.policy, grid.modalities, grid.patches_per_modality, cfg.mask_ratio, rng);
        Tape tape;
        Binder bind(tape, params);
        Var loss = mae_loss(res.state, bind, grid, mask, cfg.loss_mode);
        tape.backward(loss);
        epoch_sum += loss.value().item();
      }
      const double inv = 1.0 / static_cast<double>(end - begin);
      for (auto* p : params)
        for (auto& g : p->grad.data()) g *= inv;
      const std::size_t step = res.optimizer.step;
      const double lr = cosine_lr(step, warmup_steps, total_steps, cfg.optim.lr, cfg.optim.min_lr);
      res.optimizer.step = step + 1;
      adamw_step(params, res.optimizer, res.optimizer.step, lr, cfg.optim, decay);
    }
    res.state.zero_grad();
    const double mean_loss = epoch_sum / static_cast<double>(n);
    res.epoch_loss.push_back(mean_loss);
    res.optimizer.epochs = epoch + 1;
    if (on_epoch) on_epoch(epoch, mean_loss);
  }
  return res;
}

// ---------------------------------------------------------------------------

namespace {

std::size_t argmax(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

double accuracy(const Tensor& logits, std::span<const int> labels) {
  if (labels.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (static_cast<int>(argmax(logits.row(i))) == labels[i]) ++hit;
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

Tensor rows_of(const Tensor& all, std::span<const std::size_t> idx) {
  Tensor out = Tensor::matrix(idx.size(), all.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    auto src = all.row(idx[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

}  // namespace

ProbeResult probe(const ModelState& state, std::span<const SensorWindow> dataset, const ProbeConfig& cfg) {
  if (cfg.n_classes < 2) throw ParameterError("probe: need at least 2 classes");
  if (!(cfg.train_fraction > 0 && cfg.train_fraction < 1)) throw ParameterError("probe: train_fraction must lie in (0,1)");
  if (!(cfg.lr > 0) || cfg.batch_size == 0) throw ParameterError("probe: lr and batch_size must be positive");
  check_dataset(dataset, state.arch);
  std::set<int> present;
  std::vector<int> labels;
  for (const auto& w : dataset) {
    if (!w.label) throw ParameterError("probe: every window needs a label");
    if (*w.label < 0 || static_cast<std::size_t>(*w.label) >= cfg.n_classes)
      throw ParameterError("probe: label outside [0, n_classes)");
    present.insert(*w.label);
    labels.push_back(*w.label);
  }
  if (present.size() < 2) throw ParameterError("probe: fewer than 2 classes present");

  Rng rng(cfg.seed);
  const std::size_t n = dataset.size();
  auto perm = rng.sample_without_replacement(n, n);
  const std::size_t n_train = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(cfg.train_fraction * static_cast<double>(n))), 1, n - 1);
  std::vector<std::size_t> train_idx(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::size_t> test_idx(perm.begin() + static_cast<std::ptrdiff_t>(n_train), perm.end());
  std::vector<int> train_labels, test_labels;
  for (auto i : train_idx) train_labels.push_back(labels[i]);
  for (auto i : test_idx) test_labels.push_back(labels[i]);

  std::vector<PatchGrid> grids;
  grids.reserve(n);
  for (const auto& w : dataset) grids.push_back(prepare_grid(w, state.arch));

  const std::size_t d = state.arch.embed_dim;
  ProbeResult res;
  res.state = state;
  res.n_train = n_train;
  res.n_test = n - n_train;
  {
    Rng init(Rng::mix(cfg.seed + 17));
    Tensor w = Tensor::matrix(d, cfg.n_classes);
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    for (auto& v : w.data()) v = init.uniform(-bound, bound);
    res.head_w = Parameter("probe.head.w", std::move(w));
    res.head_b = Parameter("probe.head.b", Tensor::matrix(1, cfg.n_classes));
  }
  OptimConfig opt;
  opt.lr = cfg.lr;
  opt.weight_decay = cfg.weight_decay;
  opt.beta1 = 0.9;
  opt.beta2 = 0.999;

  const std::size_t bs = std::min(cfg.batch_size, n_train);
  const std::size_t batches = (n_train + bs - 1) / bs;

  if (cfg.mode == ProbeMode::LinearProbe) {
    // Frozen encoder: features are fixed, so compute them once and
    // z-score with training-split statistics.
    Tensor feats = Tensor::matrix(n, d);
    for (std::size_t i = 0; i < n; ++i) {
      auto e = class_embedding(state, grids[i]);
      std::copy(e.begin(), e.end(), feats.row(i).begin());
    }
    std::vector<double> mu(d, 0.0), sd(d, 0.0);
    for (auto i : train_idx)
      for (std::size_t j = 0; j < d; ++j) mu[j] += feats.at(i, j);
    for (auto& v : mu) v /= static_cast<double>(n_train);
    for (auto i : train_idx)
      for (std::size_t j = 0; j < d; ++j) sd[j] += (feats.at(i, j) - mu[j]) * (feats.at(i, j) - mu[j]);
    for (auto& v : sd) v = std::sqrt(v / static_cast<double>(n_train));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) feats.at(i, j) = sd[j] > 1e-12 ? (feats.at(i, j) - mu[j]) / sd[j] : 0.0;

    std::vector<Parameter*> head{&res.head_w, &res.head_b};
    AdamState adam = make_adam_state(head);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      auto order = rng.sample_without_replacement(n_train, n_train);
      double total = 0.0;
      for (std::size_t b = 0; b < batches; ++b) {
        std::vector<std::size_t> idx;
        std::vector<int> lab;
        for (std::size_t k = b * bs; k < std::min(n_train, (b + 1) * bs); ++k) {
          idx.push_back(train_idx[order[k]]);
          lab.push_back(labels[train_idx[order[k]]]);
        }
        res.head_w.zero_grad();
        res.head_b.zero_grad();
        Tape tape;
        Var x = tape.constant(rows_of(feats, idx));
        Var logits = nn::add(nn::matmul(x, tape.parameter(res.head_w)), tape.parameter(res.head_b));
        Var loss = nn::softmax_cross_entropy(logits, lab);
        tape.backward(loss);
        total += loss.value().item() * static_cast<double>(idx.size());
        adamw_step(head, adam, ++adam.step, cfg.lr, opt);
      }
      res.curve.push_back(total / static_cast<double>(n_train));
    }
    auto logits_for = [&](std::span<const std::size_t> idx) {
      Tape tape;
      Var x = tape.constant(rows_of(feats, idx));
      return nn::add(nn::matmul(x, tape.constant(res.head_w.value)), tape.constant(res.head_b.value)).value();
    };
    res.train_top1 = accuracy(logits_for(train_idx), train_labels);
    res.top1 = accuracy(logits_for(test_idx), test_labels);
    return res;
  }

  // Fine-tuning: encoder and head trained jointly.
  auto enc_params = res.state.encoder_parameters();
  std::vector<Parameter*> all = enc_params;
  all.push_back(&res.head_w);
  all.push_back(&res.head_b);
  std::vector<bool> decay;
  for (auto* p : all) decay.push_back(decays(*p));
  AdamState adam = make_adam_state(all);
  MaskMatrix none(state.arch.modalities, state.arch.patches_per_modality);

  auto forward_logits = [&](Binder& bind, std::span<const std::size_t> idx) {
    std::vector<Var> rows;
    for (auto i : idx) {
      Encoded enc = encode(res.state, bind, split_views(grids[i], none));
      rows.push_back(nn::slice_rows(enc.tokens, 0, 1));
    }
    Var x = nn::concat_rows(rows);
    return nn::add(nn::matmul(x, bind(res.head_w)), bind(res.head_b));
  };

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto order = rng.sample_without_replacement(n_train, n_train);
    double total = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      std::vector<std::size_t> idx;
      std::vector<int> lab;
      for (std::size_t k = b * bs; k < std::min(n_train, (b + 1) * bs); ++k) {
        idx.push_back(train_idx[order[k]]);
        lab.push_back(labels[train_idx[order[k]]]);
      }
      for (auto* p : all) p->zero_grad();
      Tape tape;
      Binder bind(tape, all);
      Var loss = nn::softmax_cross_entropy(forward_logits(bind, idx), lab);
      tape.backward(loss);
      total += loss.value().item() * static_cast<double>(idx.size());
      adamw_step(all, adam, ++adam.step, cfg.lr, opt, decay);
    }
    res.curve.push_back(total / static_cast<double>(n_train));
  }
  for (auto* p : all) p->zero_grad();
  auto eval = [&](std::span<const std::size_t> idx, std::span<const int> lab) {
    Tape tape;
    Binder bind(tape);
    return accuracy(forward_logits(bind, idx).value(), lab);
  };
  res.train_top1 = eval(train_idx, train_labels);
  res.top1 = eval(test_idx, test_labels);
  return res;
}

}  // namespace moca
