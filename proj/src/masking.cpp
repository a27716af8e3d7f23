#include "moca/masking.h"

#include <cmath>
#include <sstream>

namespace moca {

const char* to_string(MaskPolicy policy) {
  return policy == MaskPolicy::CrossModality ? "cross" : "sync";
}

MaskPolicy parse_mask_policy(const std::string& name) {
  if (name == "cross" || name == "cross_modality" || name == "moca") return MaskPolicy::CrossModality;
  if (name == "sync" || name == "synchronized") return MaskPolicy::Synchronized;
  throw ParameterError("unknown mask policy '" + name + "' (expected cross or sync)");
}

std::size_t MaskMatrix::count() const {
  std::size_t n = 0;
  for (auto b : bits_) n += b;
  return n;
}

bool MaskMatrix::column_masked(std::size_t p) const {
  for (std::size_t c = 0; c < modalities_; ++c)
    if (!masked(c, p)) return false;
  return modalities_ > 0;
}

bool MaskMatrix::columns_uniform() const {
  for (std::size_t p = 0; p < patches_; ++p)
    for (std::size_t c = 1; c < modalities_; ++c)
      if (masked(c, p) != masked(0, p)) return false;
  return true;
}

std::string MaskMatrix::serialize() const {
  std::string out;
  out.reserve(modalities_ * (patches_ + 1));
  for (std::size_t c = 0; c < modalities_; ++c) {
    for (std::size_t p = 0; p < patches_; ++p) out.push_back(masked(c, p) ? '1' : '0');
    out.push_back('\n');
  }
  return out;
}

MaskMatrix MaskMatrix::parse(const std::string& text, double ratio) {
  std::istringstream in(text);
  std::vector<std::string> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    for (char ch : line)
      if (ch != '0' && ch != '1') throw ParseError("mask", lineno, "expected only '0' or '1'");
    if (!rows.empty() && line.size() != rows.front().size())
      throw ParseError("mask", lineno, "row length differs from the first row");
    rows.push_back(line);
  }
  if (rows.empty()) throw ParseError("mask", lineno, "empty mask");
  MaskMatrix m(rows.size(), rows.front().size(), ratio);
  for (std::size_t c = 0; c < rows.size(); ++c)
    for (std::size_t p = 0; p < rows[c].size(); ++p) m.set(c, p, rows[c][p] == '1');
  return m;
}

namespace {

// floor(ratio * n) with slack for decimal ratios such as 0.29 * 100.
std::size_t floor_count(double ratio, std::size_t n) {
  return static_cast<std::size_t>(std::floor(ratio * double(n) + 1e-9));
}

}  // namespace

std::size_t masked_cell_count(MaskPolicy policy, std::size_t C, std::size_t P, double ratio) {
  if (policy == MaskPolicy::CrossModality) return floor_count(ratio, C * P);
  return floor_count(ratio, P) * C;
}

MaskMatrix sample_mask(MaskPolicy policy, std::size_t C, std::size_t P, double ratio, Rng& rng) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ParameterError("sample_mask: ratio must lie in (0, 1)");
  if (C == 0 || P == 0) throw ParameterError("sample_mask: empty grid");
  MaskMatrix m(C, P, ratio);
  if (policy == MaskPolicy::CrossModality) {
    const std::size_t k = floor_count(ratio, C * P);
    if (k == 0) throw ParameterError("sample_mask: floor(ratio * C * P) is zero");
    if (k >= C * P) throw ParameterError("sample_mask: no patch would remain visible");
    for (std::size_t cell : rng.sample_without_replacement(C * P, k)) m.set(cell / P, cell % P, true);
  } else {
    const std::size_t k = floor_count(ratio, P);
    if (k == 0) throw ParameterError("sample_mask: floor(ratio * P) is zero");
    if (k >= P) throw ParameterError("sample_mask: no column would remain visible");
    for (std::size_t col : rng.sample_without_replacement(P, k))
      for (std::size_t c = 0; c < C; ++c) m.set(c, col, true);
  }
  return m;
}

ViewSplit split_views(const PatchGrid& grid, const MaskMatrix& mask) {
  if (mask.modalities() != grid.modalities || mask.patches() != grid.patches_per_modality)
    throw ParameterError("split_views: mask shape does not match grid");
  ViewSplit out;
  for (std::size_t c = 0; c < grid.modalities; ++c)
    for (std::size_t p = 0; p < grid.patches_per_modality; ++p) {
      auto src = grid.patch(c, p);
      ViewPatch vp{c, p, std::vector<double>(src.begin(), src.end())};
      (mask.masked(c, p) ? out.masked : out.unmasked).push_back(std::move(vp));
    }
  return out;
}

PatchGrid merge_views(const ViewSplit& views, std::size_t C, std::size_t P, std::size_t patch_len) {
  PatchGrid g{C, P, patch_len, Matrix(C * P, patch_len)};
  std::vector<bool> seen(C * P, false);
  auto place = [&](const ViewPatch& vp) {
    if (vp.modality >= C || vp.patch >= P || vp.values.size() != patch_len)
      throw ParameterError("merge_views: patch outside grid");
    const auto idx = g.index(vp.modality, vp.patch);
    if (seen[idx]) throw ParameterError("merge_views: duplicate patch coordinate");
    seen[idx] = true;
    auto dst = g.patches.row(idx);
    std::copy(vp.values.begin(), vp.values.end(), dst.begin());
  };
  for (const auto& vp : views.unmasked) place(vp);
  for (const auto& vp : views.masked) place(vp);
  for (bool s : seen)
    if (!s) throw ParameterError("merge_views: views do not cover the grid");
  return g;
}

}  // namespace moca
