#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moca/masking.h"
#include "moca/model.h"
#include "moca/synthdata.h"

namespace moca {

enum class MissingnessKind { Random, Temporal, Sensor, Extrapolation };

const char* to_string(MissingnessKind kind);
MissingnessKind parse_missingness_kind(const std::string& name);

struct MissingnessTask {
  MissingnessKind kind = MissingnessKind::Random;
  double ratio = 0.7;                             // ignored for Sensor
  std::optional<std::size_t> visible_modality;    // Sensor only; random per draw when unset
};

void validate(const MissingnessTask& task);

/// Random: cross-modality mask. Temporal: floor(ratio P) random full columns.
/// Sensor: every row masked except the visible modality. Extrapolation: the
/// last floor(ratio P) columns.
MaskMatrix task_mask(const MissingnessTask& task, std::size_t C, std::size_t P, Rng& rng);

/// Per-sample view of a patch mask over a C x L window. Samples past the
/// last full patch are treated as visible.
bool cell_masked(const MaskMatrix& mask, std::size_t length, std::size_t c, std::size_t t);

/// Model reconstruction for masked cells; visible cells are copied. The
/// window must already be on the model's scale (standardized).
SensorWindow impute_model(const ModelState& state, const SensorWindow& window, const MaskMatrix& mask);

/// Per-channel linear interpolation with constant extension at the ends;
/// channels with nothing visible become zero.
SensorWindow impute_linear(const SensorWindow& window, const MaskMatrix& mask);

/// Nearest visible sample in the same channel; ties go to the earlier one.
SensorWindow impute_nearest(const SensorWindow& window, const MaskMatrix& mask);

/// Chained ridge regressions. Missing cells start at the channel mean of the
/// visible data (pooled over the window set); each sweep regresses every
/// channel on the others at the same time step and overwrites its missing
/// cells with the prediction.
std::vector<SensorWindow> impute_chained(std::span<const SensorWindow> windows, std::span<const MaskMatrix> masks,
                                         std::size_t sweeps = 3, double ridge = 1e-3);

/// Missing cells take the mean of the channel's visible cells pooled over the window set.
std::vector<SensorWindow> impute_channel_mean(std::span<const SensorWindow> windows,
                                              std::span<const MaskMatrix> masks);

struct ImputeReport {
  std::string method;
  MissingnessKind kind = MissingnessKind::Random;
  double ratio = 0.0;
  double mae = 0.0;
  double mse = 0.0;
  std::size_t cells = 0;
  std::size_t n_windows = 0;
};

/// Errors over masked cells of one window. Throws ParameterError when nothing is masked.
ImputeReport score(const SensorWindow& filled, const SensorWindow& truth, const MaskMatrix& mask);
/// Errors pooled over the masked cells of every window.
ImputeReport score(std::span<const SensorWindow> filled, std::span<const SensorWindow> truth,
                   std::span<const MaskMatrix> masks);

enum class ImputeMethod { Model, Linear, Nearest, Chained, ChannelMean };

const char* to_string(ImputeMethod method);
ImputeMethod parse_impute_method(const std::string& name);

std::vector<SensorWindow> impute(ImputeMethod method, const ModelState* state, std::span<const SensorWindow> windows,
                                 std::span<const MaskMatrix> masks, std::size_t sweeps = 3);

/// One mask per window for the task, drawn from a stream seeded by `seed`.
std::vector<MaskMatrix> task_masks(const MissingnessTask& task, std::size_t n, std::size_t C, std::size_t P,
                                   std::uint64_t seed);

/// Standardizes and trims the windows to the model's P * L_p grid, draws
/// masks for every task and scores each method. Rows are task-major.
std::vector<ImputeReport> run_imputation(const ModelState& state, std::span<const SensorWindow> windows,
                                         std::span<const MissingnessTask> tasks,
                                         std::span<const ImputeMethod> methods, std::uint64_t seed,
                                         std::size_t sweeps = 3);

}  // namespace moca
