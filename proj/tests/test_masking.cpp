#include <doctest.h>

#include <cmath>
#include <map>

#include "moca/masking.h"

using namespace moca;

namespace {

PatchGrid random_grid(std::size_t C, std::size_t P, std::size_t Lp, Rng& rng) {
  PatchGrid g{C, P, Lp, Matrix(C * P, Lp)};
  for (auto& v : g.patches.data()) v = rng.normal();
  return g;
}

}  // namespace

TEST_CASE("mask policy names") {
  CHECK(std::string(to_string(MaskPolicy::CrossModality)) == "cross");
  CHECK(std::string(to_string(MaskPolicy::Synchronized)) == "sync");
  CHECK(parse_mask_policy("cross") == MaskPolicy::CrossModality);
  CHECK(parse_mask_policy("sync") == MaskPolicy::Synchronized);
  CHECK_THROWS_AS(parse_mask_policy("random"), ParameterError);
}

TEST_CASE("exact counts for a 6 x 10 grid at 0.75") {
  Rng rng(1);
  const auto cross = sample_mask(MaskPolicy::CrossModality, 6, 10, 0.75, rng);
  CHECK(cross.count() == 45);
  const auto sync = sample_mask(MaskPolicy::Synchronized, 6, 10, 0.75, rng);
  CHECK(sync.count() == 42);
  CHECK(sync.columns_uniform());
  std::size_t cols = 0;
  for (std::size_t p = 0; p < 10; ++p) cols += sync.column_masked(p) ? 1 : 0;
  CHECK(cols == 7);
  CHECK(masked_cell_count(MaskPolicy::CrossModality, 6, 10, 0.75) == 45);
  CHECK(masked_cell_count(MaskPolicy::Synchronized, 6, 10, 0.75) == 42);
}

TEST_CASE("count invariants over the test lattice") {
  const double ratios[] = {0.05, 0.25, 0.5, 0.75, 0.95};
  std::size_t failures = 0, checked = 0;
  for (std::size_t C = 2; C <= 6; ++C)
    for (std::size_t P = 2; P <= 12; ++P)
      for (double r : ratios)
        for (auto policy : {MaskPolicy::CrossModality, MaskPolicy::Synchronized}) {
          const std::size_t units = policy == MaskPolicy::CrossModality ? C * P : P;
          const auto k = static_cast<std::size_t>(std::floor(r * units + 1e-9));
          if (k == 0 || k >= units) {
            Rng rng(0);
            CHECK_THROWS_AS(sample_mask(policy, C, P, r, rng), ParameterError);
            continue;
          }
          for (std::uint64_t seed = 0; seed < 1000; ++seed) {
            Rng rng(seed);
            const auto m = sample_mask(policy, C, P, r, rng);
            ++checked;
            bool ok = m.count() == masked_cell_count(policy, C, P, r) && m.visible_count() > 0;
            if (policy == MaskPolicy::Synchronized) ok = ok && m.columns_uniform() && m.count() == k * C;
            else ok = ok && m.count() == k;
            failures += ok ? 0 : 1;
          }
        }
  CHECK(checked > 0);
  CHECK(failures == 0);
}

TEST_CASE("cross masks of a 2 x 2 grid at 0.5 are uniform over all 6 subsets") {
  Rng rng(2024);
  std::map<std::string, int> freq;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) ++freq[sample_mask(MaskPolicy::CrossModality, 2, 2, 0.5, rng).serialize()];
  CHECK(freq.size() == 6);
  for (const auto& [mask, n] : freq) CHECK(std::abs(n / double(draws) - 1.0 / 6.0) < 0.02);
}

TEST_CASE("cross masking can leave a column partially visible") {
  bool found = false;
  for (std::uint64_t seed = 0; seed < 1000 && !found; ++seed) {
    Rng rng(seed);
    found = !sample_mask(MaskPolicy::CrossModality, 6, 10, 0.75, rng).columns_uniform();
  }
  CHECK(found);
}

TEST_CASE("invalid ratios are rejected") {
  Rng rng(0);
  CHECK_THROWS_AS(sample_mask(MaskPolicy::CrossModality, 2, 2, 0.0, rng), ParameterError);
  CHECK_THROWS_AS(sample_mask(MaskPolicy::CrossModality, 2, 2, 1.0, rng), ParameterError);
  CHECK_THROWS_AS(sample_mask(MaskPolicy::CrossModality, 2, 2, -0.1, rng), ParameterError);
  CHECK_THROWS_AS(sample_mask(MaskPolicy::Synchronized, 6, 2, 0.3, rng), ParameterError);
  CHECK_THROWS_AS(sample_mask(MaskPolicy::CrossModality, 2, 2, 0.1, rng), ParameterError);
}

TEST_CASE("mask serialization round trips") {
  Rng rng(3);
  const auto m = sample_mask(MaskPolicy::CrossModality, 4, 7, 0.5, rng);
  const auto text = m.serialize();
  CHECK(std::count(text.begin(), text.end(), '\n') == 4);
  CHECK(MaskMatrix::parse(text) == m);
  CHECK_THROWS_AS(MaskMatrix::parse("01\n2x\n"), ParseError);
  CHECK_THROWS_AS(MaskMatrix::parse(""), ParseError);
}

TEST_CASE("split_views examples") {
  Rng rng(4);
  const auto g = random_grid(3, 4, 5, rng);

  const MaskMatrix none(3, 4);
  const auto all_visible = split_views(g, none);
  CHECK(all_visible.masked.empty());
  CHECK(all_visible.unmasked.size() == 12);

  MaskMatrix one(3, 4);
  one.set(0, 0, true);
  const auto v = split_views(g, one);
  REQUIRE(v.masked.size() == 1);
  CHECK(v.masked[0].modality == 0);
  CHECK(v.masked[0].patch == 0);
  CHECK(std::equal(v.masked[0].values.begin(), v.masked[0].values.end(), g.patch(0, 0).begin()));
  CHECK(v.unmasked.size() == 11);

  CHECK_THROWS_AS(split_views(g, MaskMatrix(3, 5)), ParameterError);
}

TEST_CASE("split and merge partition and reassemble the grid") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const std::size_t C = rng.integer(2, 6), P = rng.integer(2, 10), Lp = rng.integer(1, 6);
    const auto g = random_grid(C, P, Lp, rng);
    const auto m = sample_mask(seed % 2 ? MaskPolicy::CrossModality : MaskPolicy::Synchronized, C, P, 0.5, rng);
    const auto v = split_views(g, m);
    CHECK(v.masked.size() + v.unmasked.size() == C * P);
    CHECK(v.masked.size() == m.count());
    for (const auto& vp : v.masked) CHECK(m.masked(vp.modality, vp.patch));
    for (const auto& vp : v.unmasked) CHECK_FALSE(m.masked(vp.modality, vp.patch));
    CHECK(merge_views(v, C, P, Lp).patches == g.patches);
  }
}
