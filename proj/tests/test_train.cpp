#include <doctest.h>

#include <cmath>

#include "moca/train.h"

using namespace moca;

namespace {

ArchSpec small_arch() {
  ArchSpec a;
  a.embed_dim = 16;
  a.encoder_layers = 1;
  a.decoder_layers = 1;
  a.heads = 2;
  a.patch_len = 4;
  a.modalities = 3;
  a.patches_per_modality = 4;
  return a;
}

std::vector<SensorWindow> small_data(std::size_t n, std::uint64_t seed) {
  SynthSpec spec;
  spec.n_windows = n;
  spec.modalities = 3;
  spec.length = 16;
  spec.patch_len = 4;
  spec.seed = seed;
  return generate_windows(spec);
}

PretrainConfig small_pretrain(std::size_t epochs) {
  PretrainConfig cfg;
  cfg.arch = small_arch();
  cfg.optim.total_epochs = epochs;
  cfg.optim.warmup_epochs = 1;
  cfg.optim.batch_size = 4;
  cfg.optim.lr = 1e-3;
  cfg.optim.seed = 3;
  cfg.init_seed = 4;
  return cfg;
}

}  // namespace

TEST_CASE("adamw with zero gradient") {
  nn::Parameter p("x.w", nn::Tensor({1, 1}, std::vector<double>{1.0}));
  std::vector<nn::Parameter*> ps{&p};
  OptimConfig cfg;
  cfg.weight_decay = 0.0;
  auto st = make_adam_state(ps);
  adamw_step(ps, st, 1, 0.1, cfg);
  CHECK(p.value[0] == 1.0);

  cfg.weight_decay = 0.05;
  st = make_adam_state(ps);
  adamw_step(ps, st, 1, 0.1, cfg);
  CHECK(p.value[0] == doctest::Approx(0.995).epsilon(1e-15));
}

TEST_CASE("adamw first step by hand") {
  nn::Parameter p("x.w", nn::Tensor({1, 1}, std::vector<double>{0.0}));
  p.grad[0] = 1.0;
  std::vector<nn::Parameter*> ps{&p};
  OptimConfig cfg;
  auto st = make_adam_state(ps);
  adamw_step(ps, st, 1, 0.1, cfg);
  const double m_hat = (0.1 * 1.0) / (1 - 0.9);
  const double v_hat = (0.05 * 1.0) / (1 - 0.95);
  CHECK(p.value[0] == doctest::Approx(-0.1 * m_hat / (std::sqrt(v_hat) + 1e-8)).epsilon(1e-15));
  CHECK_THROWS_AS(adamw_step(ps, st, 0, 0.1, cfg), ParameterError);
}

TEST_CASE("adamw without decay matches a hand-rolled adam") {
  Rng rng(5);
  nn::Parameter p("x.w", nn::Tensor({3, 4}));
  for (auto& v : p.value.data()) v = rng.normal();
  std::vector<nn::Parameter*> ps{&p};
  OptimConfig cfg;
  cfg.weight_decay = 0.0;
  auto st = make_adam_state(ps);
  std::vector<double> theta = p.value.data(), m(12, 0.0), v(12, 0.0);
  double worst = 0;
  for (std::size_t t = 1; t <= 20; ++t) {
    for (auto& g : p.grad.data()) g = rng.normal();
    for (std::size_t i = 0; i < 12; ++i) {
      const double g = p.grad[i];
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.95 * v[i] + 0.05 * g * g;
      const double mh = m[i] / (1 - std::pow(0.9, double(t)));
      const double vh = v[i] / (1 - std::pow(0.95, double(t)));
      theta[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    }
    adamw_step(ps, st, t, 0.01, cfg);
    for (std::size_t i = 0; i < 12; ++i) worst = std::max(worst, std::abs(theta[i] - p.value[i]));
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("decay applies to weight matrices only") {
  CHECK(decays(nn::Parameter("enc.0.attn.qkv.w", nn::Tensor({1, 1}))));
  CHECK_FALSE(decays(nn::Parameter("enc.0.attn.qkv.b", nn::Tensor({1, 1}))));
  CHECK_FALSE(decays(nn::Parameter("cls_token", nn::Tensor({1, 1}))));
}

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(0, 10, 100, 1e-3, 1e-5) == 0.0);
  CHECK(cosine_lr(5, 10, 100, 1e-3, 1e-5) == doctest::Approx(5e-4));
  CHECK(cosine_lr(10, 10, 100, 1e-3, 1e-5) == 1e-3);
  CHECK(cosine_lr(100, 10, 100, 1e-3, 1e-5) == 1e-5);
  CHECK(cosine_lr(55, 10, 100, 1e-3, 1e-5) == doctest::Approx((1e-3 + 1e-5) / 2).epsilon(1e-12));
  double prev = 1.0;
  for (std::size_t s = 10; s <= 100; ++s) {
    const double lr = cosine_lr(s, 10, 100, 1e-3, 0.0);
    CHECK(lr <= prev);
    prev = lr;
  }
}

TEST_CASE("optimizer config validation") {
  OptimConfig cfg;
  CHECK_NOTHROW(validate(cfg));
  cfg.lr = 0;
  CHECK_THROWS_AS(validate(cfg), ParameterError);
  cfg = OptimConfig{};
  cfg.beta2 = 1.0;
  CHECK_THROWS_AS(validate(cfg), ParameterError);
  cfg = OptimConfig{};
  cfg.batch_size = 0;
  CHECK_THROWS_AS(validate(cfg), ParameterError);
}

TEST_CASE("zero epochs returns the initialized model") {
  const auto data = small_data(8, 1);
  const auto cfg = small_pretrain(0);
  const auto r = pretrain(data, cfg);
  CHECK(r.epoch_loss.empty());
  const auto fresh = init_model(cfg.arch, cfg.init_seed);
  const auto pa = r.state.parameters();
  const auto pb = fresh.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value == pb[i]->value);
}

TEST_CASE("pretraining is deterministic, leaves positions alone and lowers the loss") {
  const auto data = small_data(8, 2);
  const auto cfg = small_pretrain(30);
  const auto a = pretrain(data, cfg);
  const auto b = pretrain(data, cfg);
  REQUIRE(a.epoch_loss.size() == 30);
  CHECK(a.epoch_loss == b.epoch_loss);
  CHECK(a.state.positions == init_model(cfg.arch, cfg.init_seed).positions);
  CHECK(a.epoch_loss.back() < a.epoch_loss.front());
  CHECK(a.optimizer.epochs == 30);
  CHECK(a.optimizer.step == 60);
}

TEST_CASE("resuming continues the loss trace") {
  const auto data = small_data(8, 3);
  auto cfg = small_pretrain(20);
  const auto full = pretrain(data, cfg);
  cfg.optim.total_epochs = 10;
  auto half = pretrain(data, cfg);
  cfg.optim.total_epochs = 20;
  const auto rest = pretrain(data, cfg, &half);
  REQUIRE(rest.epoch_loss.size() == 20);
  CHECK(std::equal(half.epoch_loss.begin(), half.epoch_loss.end(), rest.epoch_loss.begin()));
  CHECK(rest.optimizer.epochs == 20);
  double typical = 0;
  for (std::size_t i = 1; i < full.epoch_loss.size(); ++i)
    typical = std::max(typical, std::abs(full.epoch_loss[i] - full.epoch_loss[i - 1]));
  CHECK(std::abs(rest.epoch_loss[10] - rest.epoch_loss[9]) <= typical);
}

TEST_CASE("pretraining input errors") {
  const auto cfg = small_pretrain(1);
  CHECK_THROWS_AS(pretrain(std::vector<SensorWindow>{}, cfg), ParameterError);
  SynthSpec spec;
  spec.n_windows = 4;
  spec.modalities = 4;
  spec.length = 16;
  spec.patch_len = 4;
  CHECK_THROWS_AS(pretrain(generate_windows(spec), cfg), ParameterError);
  auto bad = cfg;
  bad.augment_prob = 2.0;
  CHECK_THROWS_AS(pretrain(small_data(4, 1), bad), ParameterError);
}

TEST_CASE("prepare_grid trims and standardizes") {
  auto w = small_data(1, 5)[0];
  w.values = Matrix(3, 18);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t t = 0; t < 18; ++t) w.values(c, t) = double(t * (c + 1));
  const auto g = prepare_grid(w, small_arch());
  CHECK(g.patches_per_modality == 4);
  CHECK(g.patch_len == 4);
  double total = 0;
  for (double v : g.patches.data()) total += v;
  CHECK(std::abs(total) < 1e-9);
  w.values = Matrix(3, 10);
  CHECK_THROWS_AS(prepare_grid(w, small_arch()), ParameterError);
}

TEST_CASE("linear probe keeps the encoder frozen and learns") {
  const auto data = small_data(80, 6);
  const auto state = init_model(small_arch(), 7);
  ProbeConfig cfg;
  cfg.epochs = 30;
  cfg.n_classes = 4;
  const auto r = probe(state, data, cfg);
  CHECK(r.n_train == 56);
  CHECK(r.n_test == 24);
  CHECK(r.curve.size() == 30);
  CHECK(r.curve.back() < r.curve.front());
  const auto pa = state.parameters();
  const auto pb = r.state.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value == pb[i]->value);
  CHECK(r.top1 >= 0.0);
  CHECK(r.top1 <= 1.0);

  const auto again = probe(state, data, cfg);
  CHECK(again.top1 == r.top1);
  CHECK(again.curve == r.curve);
}

TEST_CASE("fine tuning updates the encoder") {
  const auto data = small_data(40, 8);
  const auto state = init_model(small_arch(), 9);
  ProbeConfig cfg;
  cfg.mode = ProbeMode::FineTune;
  cfg.epochs = 3;
  cfg.lr = 1e-3;
  const auto r = probe(state, data, cfg);
  CHECK_FALSE(r.state.encoder[0].qkv_w.value == state.encoder[0].qkv_w.value);
  CHECK(r.state.decoder[0].qkv_w.value == state.decoder[0].qkv_w.value);
}

TEST_CASE("an untrained head scores near chance") {
  SynthSpec spec;
  spec.n_windows = 400;
  spec.modalities = 3;
  spec.length = 16;
  spec.patch_len = 4;
  spec.seed = 10;
  const auto data = generate_windows(spec);
  ProbeConfig cfg;
  cfg.epochs = 0;
  const auto r = probe(init_model(small_arch(), 11), data, cfg);
  CHECK(std::abs(r.top1 - 0.25) <= 0.1);
}

TEST_CASE("probe input errors") {
  auto data = small_data(10, 12);
  const auto state = init_model(small_arch(), 1);
  ProbeConfig cfg;
  cfg.n_classes = 1;
  CHECK_THROWS_AS(probe(state, data, cfg), ParameterError);
  cfg.n_classes = 4;
  for (auto& w : data) w.label = 2;
  CHECK_THROWS_AS(probe(state, data, cfg), ParameterError);
  data[0].label.reset();
  CHECK_THROWS_AS(probe(state, data, cfg), ParameterError);
}
