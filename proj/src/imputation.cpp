#include "moca/imputation.h"

#include <cmath>
#include <limits>

#include "moca/linalg.h"
#include "moca/train.h"

namespace moca {

const char* to_string(MissingnessKind kind) {
  switch (kind) {
    case MissingnessKind::Random: return "random";
    case MissingnessKind::Temporal: return "temporal";
    case MissingnessKind::Sensor: return "sensor";
    case MissingnessKind::Extrapolation: return "extrapolation";
  }
  return "?";
}

MissingnessKind parse_missingness_kind(const std::string& name) {
  if (name == "random") return MissingnessKind::Random;
  if (name == "temporal") return MissingnessKind::Temporal;
  if (name == "sensor") return MissingnessKind::Sensor;
  if (name == "extrapolation") return MissingnessKind::Extrapolation;
  throw ParameterError("unknown missingness task '" + name + "'");
}

const char* to_string(ImputeMethod method) {
  switch (method) {
    case ImputeMethod::Model: return "model";
    case ImputeMethod::Linear: return "linear";
    case ImputeMethod::Nearest: return "nearest";
    case ImputeMethod::Chained: return "chained";
    case ImputeMethod::ChannelMean: return "mean";
  }
  return "?";
}

ImputeMethod parse_impute_method(const std::string& name) {
  if (name == "model") return ImputeMethod::Model;
  if (name == "linear") return ImputeMethod::Linear;
  if (name == "nearest") return ImputeMethod::Nearest;
  if (name == "chained") return ImputeMethod::Chained;
  if (name == "mean") return ImputeMethod::ChannelMean;
  throw ParameterError("unknown imputation method '" + name + "'");
}

void validate(const MissingnessTask& task) {
  if (task.kind != MissingnessKind::Sensor && !(task.ratio > 0.0 && task.ratio < 1.0))
    throw ParameterError(std::string("task ") + to_string(task.kind) + ": ratio must lie in (0, 1)");
}

MaskMatrix task_mask(const MissingnessTask& task, std::size_t C, std::size_t P, Rng& rng) {
  validate(task);
  switch (task.kind) {
    case MissingnessKind::Random: return sample_mask(MaskPolicy::CrossModality, C, P, task.ratio, rng);
    case MissingnessKind::Temporal: return sample_mask(MaskPolicy::Synchronized, C, P, task.ratio, rng);
    case MissingnessKind::Sensor: {
      if (C < 2) throw ParameterError("sensor task needs at least 2 modalities");
      const std::size_t keep = task.visible_modality ? *task.visible_modality : rng.integer(0, C - 1);
      if (keep >= C) throw ParameterError("sensor task: visible modality " + std::to_string(keep) + " out of range");
      MaskMatrix m(C, P, 1.0 - 1.0 / static_cast<double>(C));
      for (std::size_t c = 0; c < C; ++c)
        if (c != keep)
          for (std::size_t p = 0; p < P; ++p) m.set(c, p, true);
      return m;
    }
    case MissingnessKind::Extrapolation: {
      const auto k = static_cast<std::size_t>(std::floor(task.ratio * static_cast<double>(P) + 1e-9));
      if (k == 0 || k >= P) throw ParameterError("extrapolation task: floor(ratio * P) must lie in [1, P)");
      MaskMatrix m(C, P, task.ratio);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = P - k; p < P; ++p) m.set(c, p, true);
      return m;
    }
  }
  throw ParameterError("task_mask: unknown task");
}

bool cell_masked(const MaskMatrix& mask, std::size_t length, std::size_t c, std::size_t t) {
  const std::size_t lp = length / mask.patches();
  const std::size_t p = t / lp;
  return p < mask.patches() && mask.masked(c, p);
}

namespace {

void check_pair(const SensorWindow& w, const MaskMatrix& mask) {
  if (w.modalities() != mask.modalities() || mask.patches() == 0 || w.length() < mask.patches())
    throw ParameterError("mask " + std::to_string(mask.modalities()) + "x" + std::to_string(mask.patches()) +
                         " does not fit window " + std::to_string(w.modalities()) + "x" +
                         std::to_string(w.length()));
}

std::vector<std::size_t> visible_times(const SensorWindow& w, const MaskMatrix& mask, std::size_t c) {
  std::vector<std::size_t> out;
  for (std::size_t t = 0; t < w.length(); ++t)
    if (!cell_masked(mask, w.length(), c, t)) out.push_back(t);
  return out;
}

}  // namespace

SensorWindow impute_model(const ModelState& state, const SensorWindow& window, const MaskMatrix& mask) {
  check_pair(window, mask);
  if (mask.count() == 0) return window;
  if (mask.visible_count() == 0) throw PreconditionError("impute_model: every patch is masked");
  const std::size_t lp = state.arch.patch_len;
  if (window.length() < mask.patches() * lp) throw ParameterError("impute_model: window shorter than the model grid");
  PatchGrid grid = patchify(truncate(window, mask.patches() * lp), lp);
  PatchGrid rec = reconstruct(state, grid, mask);
  SensorWindow out = window;
  for (std::size_t c = 0; c < mask.modalities(); ++c)
    for (std::size_t p = 0; p < mask.patches(); ++p)
      if (mask.masked(c, p)) {
        auto src = rec.patch(c, p);
        for (std::size_t k = 0; k < lp; ++k) out.values(c, p * lp + k) = src[k];
      }
  return out;
}

SensorWindow impute_linear(const SensorWindow& window, const MaskMatrix& mask) {
  check_pair(window, mask);
  SensorWindow out = window;
  const std::size_t L = window.length();
  for (std::size_t c = 0; c < window.modalities(); ++c) {
    const auto vis = visible_times(window, mask, c);
    if (vis.empty()) {
      for (std::size_t t = 0; t < L; ++t) out.values(c, t) = 0.0;
      continue;
    }
    std::size_t j = 0;  // vis[j] is the first visible time >= t
    for (std::size_t t = 0; t < L; ++t) {
      while (j < vis.size() && vis[j] < t) ++j;
      if (j < vis.size() && vis[j] == t) continue;
      if (j == 0) {
        out.values(c, t) = window.values(c, vis.front());
      } else if (j == vis.size()) {
        out.values(c, t) = window.values(c, vis.back());
      } else {
        const std::size_t a = vis[j - 1], b = vis[j];
        const double w = static_cast<double>(t - a) / static_cast<double>(b - a);
        out.values(c, t) = (1.0 - w) * window.values(c, a) + w * window.values(c, b);
      }
    }
  }
  return out;
}

SensorWindow impute_nearest(const SensorWindow& window, const MaskMatrix& mask) {
  check_pair(window, mask);
  SensorWindow out = window;
  const std::size_t L = window.length();
  for (std::size_t c = 0; c < window.modalities(); ++c) {
    const auto vis = visible_times(window, mask, c);
    if (vis.empty()) {
      for (std::size_t t = 0; t < L; ++t) out.values(c, t) = 0.0;
      continue;
    }
    std::size_t j = 0;
    for (std::size_t t = 0; t < L; ++t) {
      while (j < vis.size() && vis[j] < t) ++j;
      if (j < vis.size() && vis[j] == t) continue;
      std::size_t pick;
      if (j == 0) pick = vis.front();
      else if (j == vis.size()) pick = vis.back();
      else pick = (t - vis[j - 1] <= vis[j] - t) ? vis[j - 1] : vis[j];
      out.values(c, t) = window.values(c, pick);
    }
  }
  return out;
}

namespace {

void check_set(std::span<const SensorWindow> windows, std::span<const MaskMatrix> masks) {
  if (windows.size() != masks.size()) throw ParameterError("window and mask counts differ");
  if (windows.empty()) throw ParameterError("empty window set");
  for (std::size_t i = 0; i < windows.size(); ++i) {
    check_pair(windows[i], masks[i]);
    if (windows[i].modalities() != windows.front().modalities())
      throw ParameterError("windows differ in modality count");
  }
}

std::vector<double> visible_channel_means(std::span<const SensorWindow> windows, std::span<const MaskMatrix> masks) {
  const std::size_t C = windows.front().modalities();
  std::vector<double> sum(C, 0.0);
  std::vector<std::size_t> count(C, 0);
  for (std::size_t i = 0; i < windows.size(); ++i)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t t = 0; t < windows[i].length(); ++t)
        if (!cell_masked(masks[i], windows[i].length(), c, t)) {
          sum[c] += windows[i].values(c, t);
          ++count[c];
        }
  for (std::size_t c = 0; c < C; ++c) sum[c] = count[c] ? sum[c] / static_cast<double>(count[c]) : 0.0;
  return sum;
}

}  // namespace

std::vector<SensorWindow> impute_channel_mean(std::span<const SensorWindow> windows,
                                              std::span<const MaskMatrix> masks) {
  check_set(windows, masks);
  const auto mu = visible_channel_means(windows, masks);
  std::vector<SensorWindow> out(windows.begin(), windows.end());
  for (std::size_t i = 0; i < out.size(); ++i)
    for (std::size_t c = 0; c < mu.size(); ++c)
      for (std::size_t t = 0; t < out[i].length(); ++t)
        if (cell_masked(masks[i], out[i].length(), c, t)) out[i].values(c, t) = mu[c];
  return out;
}

std::vector<SensorWindow> impute_chained(std::span<const SensorWindow> windows, std::span<const MaskMatrix> masks,
                                         std::size_t sweeps, double ridge) {
  check_set(windows, masks);
  if (sweeps == 0) throw ParameterError("impute_chained: sweeps must be at least 1");
  if (!(ridge >= 0)) throw ParameterError("impute_chained: ridge must be nonnegative");
  const std::size_t C = windows.front().modalities();
  if (C < 2) throw ParameterError("impute_chained: needs at least 2 channels");
  std::vector<SensorWindow> out = impute_channel_mean(windows, masks);

  const std::size_t q = C;  // C - 1 predictors plus an intercept
  for (std::size_t sweep = 0; sweep < sweeps; ++sweep) {
    for (std::size_t target = 0; target < C; ++target) {
      Matrix xtx(q, q);
      std::vector<double> xty(q, 0.0);
      std::size_t rows = 0;
      std::vector<double> x(q);
      auto fill_row = [&](const SensorWindow& w, std::size_t t) {
        std::size_t k = 0;
        for (std::size_t c = 0; c < C; ++c)
          if (c != target) x[k++] = w.values(c, t);
        x[k] = 1.0;
      };
      bool any_missing = false;
      for (std::size_t i = 0; i < out.size(); ++i)
        for (std::size_t t = 0; t < out[i].length(); ++t) {
          if (cell_masked(masks[i], out[i].length(), target, t)) {
            any_missing = true;
            continue;
          }
          fill_row(out[i], t);
          const double y = out[i].values(target, t);
          for (std::size_t a = 0; a < q; ++a) {
            xty[a] += x[a] * y;
            for (std::size_t b = 0; b < q; ++b) xtx(a, b) += x[a] * x[b];
          }
          ++rows;
        }
      if (!any_missing || rows == 0) continue;
      for (std::size_t a = 0; a < q; ++a) xtx(a, a) += ridge;
      const auto eig = linalg::symmetric_eigen(xtx);
      if (!(eig.values.back() > 0)) continue;
      // beta = V diag(1/lambda) V^T X^T y
      std::vector<double> beta(q, 0.0);
      for (std::size_t k = 0; k < q; ++k) {
        double proj = 0.0;
        for (std::size_t a = 0; a < q; ++a) proj += eig.vectors(a, k) * xty[a];
        proj /= eig.values[k];
        for (std::size_t a = 0; a < q; ++a) beta[a] += eig.vectors(a, k) * proj;
      }
      for (std::size_t i = 0; i < out.size(); ++i)
        for (std::size_t t = 0; t < out[i].length(); ++t)
          if (cell_masked(masks[i], out[i].length(), target, t)) {
            fill_row(out[i], t);
            double y = 0.0;
            for (std::size_t a = 0; a < q; ++a) y += beta[a] * x[a];
            out[i].values(target, t) = y;
          }
    }
  }
  return out;
}

ImputeReport score(const SensorWindow& filled, const SensorWindow& truth, const MaskMatrix& mask) {
  return score(std::span<const SensorWindow>(&filled, 1), std::span<const SensorWindow>(&truth, 1),
               std::span<const MaskMatrix>(&mask, 1));
}

ImputeReport score(std::span<const SensorWindow> filled, std::span<const SensorWindow> truth,
                   std::span<const MaskMatrix> masks) {
  if (filled.size() != truth.size() || filled.size() != masks.size())
    throw ParameterError("score: window and mask counts differ");
  double abs_sum = 0.0, sq_sum = 0.0;
  std::size_t cells = 0;
  for (std::size_t i = 0; i < filled.size(); ++i) {
    if (filled[i].modalities() != truth[i].modalities() || filled[i].length() != truth[i].length())
      throw ParameterError("score: filled and truth shapes differ");
    check_pair(truth[i], masks[i]);
    for (std::size_t c = 0; c < truth[i].modalities(); ++c)
      for (std::size_t t = 0; t < truth[i].length(); ++t)
        if (cell_masked(masks[i], truth[i].length(), c, t)) {
          const double d = filled[i].values(c, t) - truth[i].values(c, t);
          abs_sum += std::abs(d);
          sq_sum += d * d;
          ++cells;
        }
  }
  if (cells == 0) throw ParameterError("score: mask hides no cell");
  ImputeReport r;
  r.mae = abs_sum / static_cast<double>(cells);
  r.mse = sq_sum / static_cast<double>(cells);
  r.cells = cells;
  r.n_windows = filled.size();
  return r;
}

std::vector<SensorWindow> impute(ImputeMethod method, const ModelState* state, std::span<const SensorWindow> windows,
                                 std::span<const MaskMatrix> masks, std::size_t sweeps) {
  check_set(windows, masks);
  std::vector<SensorWindow> out;
  switch (method) {
    case ImputeMethod::Model:
      if (!state) throw ParameterError("impute: model method needs a checkpoint");
      for (std::size_t i = 0; i < windows.size(); ++i) out.push_back(impute_model(*state, windows[i], masks[i]));
      return out;
    case ImputeMethod::Linear:
      for (std::size_t i = 0; i < windows.size(); ++i) out.push_back(impute_linear(windows[i], masks[i]));
      return out;
    case ImputeMethod::Nearest:
      for (std::size_t i = 0; i < windows.size(); ++i) out.push_back(impute_nearest(windows[i], masks[i]));
      return out;
    case ImputeMethod::Chained: return impute_chained(windows, masks, sweeps);
    case ImputeMethod::ChannelMean: return impute_channel_mean(windows, masks);
  }
  throw ParameterError("impute: unknown method");
}

std::vector<MaskMatrix> task_masks(const MissingnessTask& task, std::size_t n, std::size_t C, std::size_t P,
                                   std::uint64_t seed) {
  Rng rng(Rng::mix(seed) ^ (0x7a5c0000ULL + static_cast<std::uint64_t>(task.kind)));
  std::vector<MaskMatrix> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(task_mask(task, C, P, rng));
  return out;
}

std::vector<ImputeReport> run_imputation(const ModelState& state, std::span<const SensorWindow> windows,
                                         std::span<const MissingnessTask> tasks,
                                         std::span<const ImputeMethod> methods, std::uint64_t seed,
                                         std::size_t sweeps) {
  if (windows.empty()) throw ParameterError("run_imputation: empty dataset");
  const ArchSpec& arch = state.arch;
  std::vector<SensorWindow> truth;
  truth.reserve(windows.size());
  for (const auto& w : windows) truth.push_back(unpatchify(prepare_grid(w, arch), w.sample_rate_hz));

  std::vector<ImputeReport> rows;
  for (const auto& task : tasks) {
    const auto masks = task_masks(task, truth.size(), arch.modalities, arch.patches_per_modality, seed);
    for (auto method : methods) {
      const auto filled = impute(method, &state, truth, masks, sweeps);
      ImputeReport r = score(filled, truth, masks);
      r.method = to_string(method);
      r.kind = task.kind;
      r.ratio = task.kind == MissingnessKind::Sensor ? std::numeric_limits<double>::quiet_NaN() : task.ratio;
      rows.push_back(std::move(r));
    }
  }
  return rows;
}

}  // namespace moca
