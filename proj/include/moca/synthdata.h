#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "moca/common.h"

namespace moca {

/// One C x L multi-modal window (rows are modalities, columns time steps).
struct SensorWindow {
  Matrix values;
  double sample_rate_hz = 50.0;
  std::optional<int> label;

  std::size_t modalities() const noexcept { return values.rows(); }
  std::size_t length() const noexcept { return values.cols(); }
};

/// Throws ParameterError unless C >= 2, L >= 2 and all values are finite.
void validate_window(const SensorWindow& w);

/// Non-overlapping patches of length patch_len per modality; patch (c, p) is
/// stored as row c * P + p of `patches`.
struct PatchGrid {
  std::size_t modalities = 0;
  std::size_t patches_per_modality = 0;
  std::size_t patch_len = 0;
  Matrix patches;

  std::size_t token_count() const noexcept { return modalities * patches_per_modality; }
  std::size_t index(std::size_t c, std::size_t p) const noexcept { return c * patches_per_modality + p; }
  std::span<const double> patch(std::size_t c, std::size_t p) const { return patches.row(index(c, p)); }
  std::span<double> patch(std::size_t c, std::size_t p) { return patches.row(index(c, p)); }
};

struct SynthSpec {
  std::size_t n_windows = 64;
  std::size_t modalities = 6;
  std::size_t length = 64;
  std::size_t patch_len = 8;
  std::size_t n_classes = 4;
  double sample_rate_hz = 50.0;
  /// 0 = independent channels, 1 = every channel an affine image of the shared latent.
  double shared_latent_strength = 0.9;
  double noise_sd = 0.3;
  /// Broadband component added to the shared latent and (with its own draw)
  /// to every channel's independent component.
  double shared_jitter_sd = 0.5;
  std::uint64_t seed = 1;
};

void validate(const SynthSpec& spec);

/// Class k oscillates at 1 + k cycles per window. Channel c of a window is
///   gain_c * (s * z(t) + sqrt(1 - s^2) * e_c(t)) + noise,
/// z the shared latent (class sinusoid with random window phase plus shared
/// jitter), e_c an independent same-frequency component with random phase and
/// its own jitter. Gains in [0.5, 1.5] and phase offsets in [0, pi/4] are
/// drawn once per dataset. Labels are assigned round-robin.
std::vector<SensorWindow> generate_windows(const SynthSpec& spec);

struct SpliceOptions {
  /// Force the source start to equal the destination start.
  bool matched_position = false;
};

struct SpliceRecord {
  SensorWindow window;
  std::size_t first = 0;   // index of x1 in the dataset
  std::size_t second = 0;  // index of x2
  std::size_t length = 0;  // lambda
  std::size_t dest_start = 0;
  std::size_t src_start = 0;
};

/// Joint splice across all modalities: copy x2[:, s2:s2+lambda] over
/// x1[:, s1:s1+lambda] with lambda uniform in [ceil(0.2 L), floor(0.5 L)].
SpliceRecord splice_augment_record(std::span<const SensorWindow> dataset, Rng& rng,
                                   const SpliceOptions& opts = {});
SensorWindow splice_augment(std::span<const SensorWindow> dataset, std::uint64_t seed,
                            const SpliceOptions& opts = {});

/// Deterministic splice with explicit offsets.
SensorWindow splice_windows(const SensorWindow& dest, const SensorWindow& src, std::size_t length,
                            std::size_t dest_start, std::size_t src_start);

/// Inclusive bounds of the splice segment length for a window of length L.
std::pair<std::size_t, std::size_t> splice_length_bounds(std::size_t length);

PatchGrid patchify(const SensorWindow& window, std::size_t patch_len);
SensorWindow unpatchify(const PatchGrid& grid, double sample_rate_hz = 50.0);

/// Per-channel z-scoring; constant channels become all zeros.
SensorWindow standardize(const SensorWindow& window);

/// Keep only the first n samples of each modality.
SensorWindow truncate(const SensorWindow& window, std::size_t n);

// Dataset files: <stem>.manifest (key=value), <stem>.f32 (little-endian
// float32, window-major, modality-major, time-minor) and <stem>.labels (one
// integer per line).
struct DatasetPaths {
  std::filesystem::path manifest, blob, labels;
  static DatasetPaths from_stem(const std::filesystem::path& stem);
};

struct DatasetManifest {
  std::size_t n_windows = 0;
  std::size_t modalities = 0;
  std::size_t length = 0;
  double sample_rate_hz = 50.0;
  std::size_t n_classes = 0;
};

void write_dataset(const std::filesystem::path& stem, std::span<const SensorWindow> windows,
                   std::size_t n_classes);
DatasetManifest read_manifest(const std::filesystem::path& path);
/// Loads the dataset; labels are optional unless `require_labels`.
std::vector<SensorWindow> read_dataset(const std::filesystem::path& stem, bool require_labels = false);

}  // namespace moca
