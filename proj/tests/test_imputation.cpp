#include <doctest.h>

#include <cmath>
#include <map>

#include "moca/imputation.h"
#include "moca/train.h"

using namespace moca;

namespace {

SensorWindow from_rows(std::vector<std::vector<double>> rows) {
  SensorWindow w;
  w.values = Matrix(rows.size(), rows.front().size());
  for (std::size_t c = 0; c < rows.size(); ++c)
    for (std::size_t t = 0; t < rows[c].size(); ++t) w.values(c, t) = rows[c][t];
  return w;
}

// Patch length 1: one mask cell per sample.
MaskMatrix cells(std::vector<std::string> rows) {
  MaskMatrix m(rows.size(), rows.front().size());
  for (std::size_t c = 0; c < rows.size(); ++c)
    for (std::size_t t = 0; t < rows[c].size(); ++t) m.set(c, t, rows[c][t] == '1');
  return m;
}

std::vector<SensorWindow> noise_windows(std::size_t n, std::size_t C, std::size_t L, Rng& rng) {
  std::vector<SensorWindow> out;
  for (std::size_t i = 0; i < n; ++i) {
    SensorWindow w;
    w.values = Matrix(C, L);
    for (auto& v : w.values.data()) v = rng.normal();
    out.push_back(std::move(w));
  }
  return out;
}

}  // namespace

TEST_CASE("missingness kind names") {
  for (auto k : {MissingnessKind::Random, MissingnessKind::Temporal, MissingnessKind::Sensor,
                 MissingnessKind::Extrapolation})
    CHECK(parse_missingness_kind(to_string(k)) == k);
  CHECK_THROWS_AS(parse_missingness_kind("spatial"), ParameterError);
  for (auto m : {ImputeMethod::Model, ImputeMethod::Linear, ImputeMethod::Nearest, ImputeMethod::Chained,
                 ImputeMethod::ChannelMean})
    CHECK(parse_impute_method(to_string(m)) == m);
}

TEST_CASE("task masks") {
  Rng rng(1);
  MissingnessTask ex{MissingnessKind::Extrapolation, 0.7, std::nullopt};
  const auto e = task_mask(ex, 6, 10, rng);
  for (std::size_t p = 0; p < 10; ++p) CHECK(e.column_masked(p) == (p >= 3));
  CHECK(e.count() == 42);

  MissingnessTask sensor{MissingnessKind::Sensor, 0.7, 2};
  const auto s = task_mask(sensor, 6, 10, rng);
  CHECK(s.count() == 50);
  for (std::size_t p = 0; p < 10; ++p) CHECK_FALSE(s.masked(2, p));

  MissingnessTask temporal{MissingnessKind::Temporal, 0.7, std::nullopt};
  const auto t = task_mask(temporal, 6, 10, rng);
  CHECK(t.columns_uniform());
  CHECK(t.count() == 42);

  MissingnessTask random{MissingnessKind::Random, 0.7, std::nullopt};
  CHECK(task_mask(random, 6, 10, rng).count() == 42);

  sensor.visible_modality = 6;
  CHECK_THROWS_AS(task_mask(sensor, 6, 10, rng), ParameterError);
  MissingnessTask bad{MissingnessKind::Temporal, 1.2, std::nullopt};
  CHECK_THROWS_AS(validate(bad), ParameterError);
}

TEST_CASE("temporal masks are uniform over column subsets") {
  Rng rng(2);
  MissingnessTask temporal{MissingnessKind::Temporal, 0.7, std::nullopt};
  std::map<std::string, int> freq;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) ++freq[task_mask(temporal, 2, 10, rng).serialize()];
  CHECK(freq.size() == 120);
  double worst = 0;
  for (const auto& [k, n] : freq) worst = std::max(worst, std::abs(n / double(draws) - 1.0 / 120.0));
  CHECK(worst < 0.02);
}

TEST_CASE("sensor masks pick the visible modality at random when unset") {
  MissingnessTask sensor{MissingnessKind::Sensor, 0.7, std::nullopt};
  const auto masks = task_masks(sensor, 300, 3, 4, 5);
  std::map<std::size_t, int> seen;
  for (const auto& m : masks) {
    CHECK(m.count() == 8);
    for (std::size_t c = 0; c < 3; ++c)
      if (!m.masked(c, 0)) ++seen[c];
  }
  CHECK(seen.size() == 3);
  CHECK(task_masks(sensor, 300, 3, 4, 5) == masks);
}

TEST_CASE("linear interpolation examples") {
  const auto w = from_rows({{1, 0, 0, 4}, {0, 0, 3, 5}, {7, 7, 7, 7}});
  const auto m = cells({"0110", "1100", "1111"});
  const auto out = impute_linear(w, m);
  CHECK(out.values.row(0)[1] == doctest::Approx(2.0));
  CHECK(out.values.row(0)[2] == doctest::Approx(3.0));
  CHECK(out.values(1, 0) == 3.0);
  CHECK(out.values(1, 1) == 3.0);
  CHECK(out.values(1, 3) == 5.0);
  for (std::size_t t = 0; t < 4; ++t) CHECK(out.values(2, t) == 0.0);
}

TEST_CASE("nearest neighbour examples") {
  const auto w = from_rows({{1, 0, 0, 4}, {1, 0, 3, 9}});
  const auto m = cells({"0110", "0100"});
  const auto out = impute_nearest(w, m);
  CHECK(out.values(0, 1) == 1.0);
  CHECK(out.values(0, 2) == 4.0);
  CHECK(out.values(1, 1) == 1.0);
  const auto hidden = impute_nearest(w, cells({"1111", "0000"}));
  for (std::size_t t = 0; t < 4; ++t) CHECK(hidden.values(0, t) == 0.0);
}

TEST_CASE("every imputer preserves visible values") {
  SynthSpec spec;
  spec.n_windows = 10;
  spec.modalities = 3;
  spec.length = 16;
  spec.patch_len = 4;
  std::vector<SensorWindow> windows;
  for (const auto& w : generate_windows(spec)) windows.push_back(standardize(w));
  ArchSpec arch;
  arch.embed_dim = 8;
  arch.heads = 2;
  arch.encoder_layers = 1;
  arch.patch_len = 4;
  arch.modalities = 3;
  arch.patches_per_modality = 4;
  const auto state = init_model(arch, 1);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    MissingnessTask task{static_cast<MissingnessKind>(seed % 4), 0.5, std::nullopt};
    const auto masks = task_masks(task, windows.size(), 3, 4, seed);
    for (auto method : {ImputeMethod::Model, ImputeMethod::Linear, ImputeMethod::Nearest, ImputeMethod::Chained,
                        ImputeMethod::ChannelMean}) {
      const auto filled = impute(method, &state, windows, masks, 2);
      bool ok = true;
      for (std::size_t i = 0; i < windows.size(); ++i)
        for (std::size_t c = 0; c < 3; ++c)
          for (std::size_t t = 0; t < 16; ++t)
            if (!cell_masked(masks[i], 16, c, t)) ok = ok && filled[i].values(c, t) == windows[i].values(c, t);
      CHECK(ok);
      const auto r = score(filled, windows, masks);
      CHECK(std::isfinite(r.mae));
      CHECK(r.mae >= 0.0);
      CHECK(r.mse >= 0.0);
    }
  }
}

TEST_CASE("model imputation edge cases") {
  ArchSpec arch;
  arch.embed_dim = 8;
  arch.heads = 2;
  arch.patch_len = 4;
  arch.modalities = 3;
  arch.patches_per_modality = 4;
  const auto state = init_model(arch, 2);
  SynthSpec spec;
  spec.n_windows = 1;
  spec.modalities = 3;
  spec.length = 16;
  spec.patch_len = 4;
  const auto w = standardize(generate_windows(spec)[0]);
  CHECK(impute_model(state, w, MaskMatrix(3, 4)).values == w.values);
  MaskMatrix full(3, 4);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < 4; ++p) full.set(c, p, true);
  CHECK_THROWS_AS(impute_model(state, w, full), PreconditionError);
}

TEST_CASE("chained equations recover an exact linear relation") {
  Rng rng(3);
  std::vector<SensorWindow> windows;
  std::vector<MaskMatrix> masks;
  for (int i = 0; i < 200; ++i) {
    SensorWindow w;
    w.values = Matrix(3, 100);
    for (std::size_t t = 0; t < 100; ++t) {
      const double a = rng.normal(0.0, 3.0), b = rng.normal(1.0, 3.0);
      w.values(0, t) = a;
      w.values(2, t) = b;
      w.values(1, t) = 2.0 * a - b + 1.0;
    }
    MaskMatrix m(3, 100);
    for (std::size_t t = 30; t < 60; ++t) m.set(1, t, true);
    windows.push_back(std::move(w));
    masks.push_back(std::move(m));
  }
  const auto out = impute_chained(windows, masks, 3);
  double worst = 0;
  for (std::size_t i = 0; i < windows.size(); ++i)
    for (std::size_t t = 30; t < 60; ++t)
      worst = std::max(worst, std::abs(out[i].values(1, t) - windows[i].values(1, t)));
  CHECK(worst < 1e-6);
  CHECK_THROWS_AS(impute_chained(windows, masks, 0), ParameterError);
}

TEST_CASE("chained equations on independent noise fall back to the mean") {
  Rng rng(4);
  const auto windows = noise_windows(20, 3, 50, rng);
  std::vector<MaskMatrix> masks;
  for (std::size_t i = 0; i < windows.size(); ++i) masks.push_back(sample_mask(MaskPolicy::CrossModality, 3, 50, 0.3, rng));
  const auto out = impute_chained(windows, masks, 3);
  for (std::size_t c = 0; c < 3; ++c) {
    double total = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < windows.size(); ++i)
      for (std::size_t t = 0; t < 50; ++t)
        if (!masks[i].masked(c, t)) {
          total += windows[i].values(c, t);
          ++n;
        }
    const double mean = total / n;
    double filled = 0;
    std::size_t hidden = 0;
    for (std::size_t i = 0; i < windows.size(); ++i)
      for (std::size_t t = 0; t < 50; ++t)
        if (masks[i].masked(c, t)) {
          filled += out[i].values(c, t);
          ++hidden;
        }
    CHECK(std::abs(filled / hidden - mean) < 3.0 / std::sqrt(double(n)));
  }
}

TEST_CASE("channel mean pools visible cells over the set") {
  const std::vector<SensorWindow> w{from_rows({{1, 0}, {2, 2}}), from_rows({{3, 5}, {0, 4}})};
  const std::vector<MaskMatrix> m{cells({"01", "00"}), cells({"00", "10"})};
  const auto out = impute_channel_mean(w, m);
  CHECK(out[0].values(0, 1) == 3.0);
  CHECK(out[1].values(1, 0) == doctest::Approx(8.0 / 3.0));
}

TEST_CASE("scoring") {
  const auto truth = from_rows({{1, 2, 3}, {4, 5, 6}});
  const auto m = cells({"011", "100"});
  auto r = score(truth, truth, m);
  CHECK(r.mae == 0.0);
  CHECK(r.mse == 0.0);
  CHECK(r.cells == 3);
  auto shifted = truth;
  for (auto& v : shifted.values.data()) v -= 0.5;
  r = score(shifted, truth, m);
  CHECK(r.mae == doctest::Approx(0.5));
  CHECK(r.mse == doctest::Approx(0.25));
  CHECK_THROWS_AS(score(truth, truth, cells({"000", "000"})), ParameterError);
  CHECK_THROWS_AS(score(from_rows({{1, 2}, {3, 4}}), truth, m), ParameterError);
}

TEST_CASE("pretrained model beats zero filling on the sensor task with noiseless data") {
  SynthSpec spec;
  spec.n_windows = 64;
  spec.modalities = 3;
  spec.length = 32;
  spec.patch_len = 4;
  spec.shared_latent_strength = 1.0;
  spec.noise_sd = 0.0;
  spec.shared_jitter_sd = 0.0;
  spec.seed = 21;
  const auto data = generate_windows(spec);

  PretrainConfig cfg;
  cfg.arch.embed_dim = 32;
  cfg.arch.heads = 2;
  cfg.arch.encoder_layers = 1;
  cfg.arch.patch_len = 4;
  cfg.arch.modalities = 3;
  cfg.arch.patches_per_modality = 8;
  cfg.optim.total_epochs = 200;
  cfg.optim.warmup_epochs = 3;
  cfg.optim.batch_size = 16;
  cfg.optim.lr = 2e-3;
  cfg.augment = false;
  const auto trained = pretrain(data, cfg).state;

  spec.seed = 22;
  spec.n_windows = 16;
  std::vector<SensorWindow> test;
  for (const auto& w : generate_windows(spec)) test.push_back(standardize(w));
  MissingnessTask sensor{MissingnessKind::Sensor, 0.7, std::nullopt};
  const auto masks = task_masks(sensor, test.size(), 3, 8, 1);
  std::size_t wins = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    auto zero = test[i];
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t t = 0; t < 32; ++t)
        if (cell_masked(masks[i], 32, c, t)) zero.values(c, t) = 0.0;
    const double model = score(impute_model(trained, test[i], masks[i]), test[i], masks[i]).mse;
    wins += model < score(zero, test[i], masks[i]).mse ? 1 : 0;
  }
  CHECK(wins == test.size());
}

TEST_CASE("run_imputation reports one row per task and method") {
  ArchSpec arch;
  arch.embed_dim = 8;
  arch.heads = 2;
  arch.patch_len = 4;
  arch.modalities = 3;
  arch.patches_per_modality = 4;
  const auto state = init_model(arch, 3);
  SynthSpec spec;
  spec.n_windows = 6;
  spec.modalities = 3;
  spec.length = 18;
  spec.patch_len = 4;
  const auto data = generate_windows(spec);
  const std::vector<MissingnessTask> tasks{{MissingnessKind::Random, 0.5, std::nullopt},
                                           {MissingnessKind::Sensor, 0.7, std::nullopt}};
  const std::vector<ImputeMethod> methods{ImputeMethod::Model, ImputeMethod::Linear};
  const auto rows = run_imputation(state, data, tasks, methods, 4);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].kind == MissingnessKind::Random);
  CHECK(rows[1].method == "linear");
  CHECK(std::isnan(rows[3].ratio));
  CHECK(rows[0].n_windows == 6);
  const auto again = run_imputation(state, data, tasks, methods, 4);
  CHECK(again[2].mse == rows[2].mse);
}
