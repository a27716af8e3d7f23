#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moca/common.h"
#include "moca/synthdata.h"

namespace moca {

enum class MaskPolicy {
  CrossModality,  // cells masked independently over the C x P grid
  Synchronized,   // whole time columns masked across every modality
};

const char* to_string(MaskPolicy policy);
MaskPolicy parse_mask_policy(const std::string& name);

/// Binary C x P patch mask, 1 = masked.
class MaskMatrix {
 public:
  MaskMatrix() = default;
  MaskMatrix(std::size_t modalities, std::size_t patches, double ratio = 0.0)
      : modalities_(modalities), patches_(patches), ratio_(ratio), bits_(modalities * patches, 0) {}

  std::size_t modalities() const noexcept { return modalities_; }
  std::size_t patches() const noexcept { return patches_; }
  double ratio() const noexcept { return ratio_; }

  bool masked(std::size_t c, std::size_t p) const { return bits_[c * patches_ + p] != 0; }
  void set(std::size_t c, std::size_t p, bool v) { bits_[c * patches_ + p] = v ? 1 : 0; }

  std::size_t count() const;
  std::size_t visible_count() const { return bits_.size() - count(); }
  bool column_masked(std::size_t p) const;
  /// True when every column is either fully masked or fully visible.
  bool columns_uniform() const;

  const std::vector<std::uint8_t>& bits() const noexcept { return bits_; }

  friend bool operator==(const MaskMatrix& a, const MaskMatrix& b) {
    return a.modalities_ == b.modalities_ && a.patches_ == b.patches_ && a.bits_ == b.bits_;
  }

  /// C lines of P '0'/'1' characters.
  std::string serialize() const;
  static MaskMatrix parse(const std::string& text, double ratio = 0.0);

 private:
  std::size_t modalities_ = 0;
  std::size_t patches_ = 0;
  double ratio_ = 0.0;
  std::vector<std::uint8_t> bits_;
};

/// Number of masked cells the policy produces: floor(rho C P) for
/// CrossModality, floor(rho P) * C for Synchronized.
std::size_t masked_cell_count(MaskPolicy policy, std::size_t C, std::size_t P, double ratio);

/// Uniform draw from the admissible set for the policy. Throws ParameterError
/// for ratio outside (0, 1), zero masked cells or zero visible cells.
MaskMatrix sample_mask(MaskPolicy policy, std::size_t C, std::size_t P, double ratio, Rng& rng);

struct ViewPatch {
  std::size_t modality = 0;
  std::size_t patch = 0;
  std::vector<double> values;
};

/// Partition of a grid's patches induced by a mask, both in row-major (c, p) order.
struct ViewSplit {
  std::vector<ViewPatch> unmasked;
  std::vector<ViewPatch> masked;
};

ViewSplit split_views(const PatchGrid& grid, const MaskMatrix& mask);

/// Inverse of split_views.
PatchGrid merge_views(const ViewSplit& views, std::size_t C, std::size_t P, std::size_t patch_len);

}  // namespace moca
