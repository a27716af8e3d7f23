// moca: synth | pretrain | impute | probe | analyze | gradcheck
//
// Every run writes into --out: the resolved configuration (resolved.cfg), a
// FORMAT tag and the command's outputs. Outputs depend only on the resolved
// configuration.

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "moca/config.h"
#include "moca/imputation.h"
#include "moca/kcca.h"
#include "moca/train.h"

namespace fs = std::filesystem;
using namespace moca;

namespace {

constexpr const char* kFormat = "moca-run-v1";

struct Common {
  std::string config;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::string csv_real(double v) { return std::isnan(v) ? "NA" : format_double(v); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

class Run {
 public:
  Run(const Common& common, const std::string& command) : command_(command), out_(common.out) {
    cfg_ = common.config.empty() ? Config() : Config::load(common.config);
    if (common.seed) cfg_.set("seed", std::to_string(*common.seed));
    seed_ = cfg_.u64("seed", 0);
  }

  Config& cfg() { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  const fs::path& out() const { return out_; }

  /// Call once every key has been read: rejects unknown keys, then creates
  /// the run directory with its format tag and resolved configuration.
  void open() {
    cfg_.reject_unknown();
    std::error_code ec;
    fs::create_directories(out_, ec);
    if (ec || !fs::is_directory(out_)) throw IoError("cannot create output directory " + out_.string());
    write_text(out_ / "FORMAT", std::string(kFormat) + " " + command_ + "\n");
    write_text(out_ / "resolved.cfg", cfg_.resolved());
  }

 private:
  std::string command_;
  fs::path out_;
  Config cfg_;
  std::uint64_t seed_ = 0;
};

std::string required(Config& cfg, const std::string& key) {
  std::string v = cfg.text(key, "");
  if (v.empty()) throw ParameterError("config key '" + key + "' is required");
  return v;
}

ArchSpec read_arch(Config& cfg) {
  ArchSpec a;
  a.embed_dim = cfg.count("arch.embed_dim", a.embed_dim);
  a.encoder_layers = cfg.count("arch.encoder_layers", a.encoder_layers);
  a.decoder_layers = cfg.count("arch.decoder_layers", a.decoder_layers);
  a.heads = cfg.count("arch.heads", a.heads);
  a.mlp_ratio = cfg.count("arch.mlp_ratio", a.mlp_ratio);
  a.patch_len = cfg.count("arch.patch_len", a.patch_len);
  a.modalities = cfg.count("arch.modalities", a.modalities);
  a.patches_per_modality = cfg.count("arch.patches_per_modality", a.patches_per_modality);
  validate(a);
  return a;
}

OptimConfig read_optim(Config& cfg, std::uint64_t seed) {
  OptimConfig o;
  o.lr = cfg.real("optim.lr", o.lr);
  o.weight_decay = cfg.real("optim.weight_decay", o.weight_decay);
  o.beta1 = cfg.real("optim.beta1", o.beta1);
  o.beta2 = cfg.real("optim.beta2", o.beta2);
  o.eps = cfg.real("optim.eps", o.eps);
  o.batch_size = cfg.count("optim.batch_size", o.batch_size);
  o.warmup_epochs = cfg.count("optim.warmup_epochs", o.warmup_epochs);
  o.total_epochs = cfg.count("optim.total_epochs", o.total_epochs);
  o.min_lr = cfg.real("optim.min_lr", o.min_lr);
  o.seed = seed;
  validate(o);
  return o;
}

// --- commands ----------------------------------------------------------------

int cmd_synth(const Common& common) {
  Run run(common, "synth");
  Config& c = run.cfg();
  SynthSpec s;
  s.n_windows = c.count("synth.n_windows", s.n_windows);
  s.modalities = c.count("synth.modalities", s.modalities);
  s.length = c.count("synth.length", s.length);
  s.patch_len = c.count("synth.patch_len", s.patch_len);
  s.n_classes = c.count("synth.n_classes", s.n_classes);
  s.sample_rate_hz = c.real("synth.sample_rate_hz", s.sample_rate_hz);
  s.shared_latent_strength = c.real("synth.strength", s.shared_latent_strength);
  s.noise_sd = c.real("synth.noise_sd", s.noise_sd);
  s.shared_jitter_sd = c.real("synth.jitter_sd", s.shared_jitter_sd);
  s.seed = run.seed();
  validate(s);
  run.open();
  const auto windows = generate_windows(s);
  write_dataset(run.out() / "dataset", windows, s.n_classes);
  std::cout << "wrote " << windows.size() << " windows to " << (run.out() / "dataset").string() << "\n";
  return 0;
}

int cmd_pretrain(const Common& common) {
  Run run(common, "pretrain");
  Config& c = run.cfg();
  const std::string data = required(c, "data");
  PretrainConfig p;
  p.arch = read_arch(c);
  p.optim = read_optim(c, run.seed());
  p.policy = parse_mask_policy(c.text("pretrain.policy", to_string(p.policy)));
  p.mask_ratio = c.real("pretrain.mask_ratio", p.mask_ratio);
  p.augment = c.flag("pretrain.augment", p.augment);
  p.augment_prob = c.real("pretrain.augment_prob", p.augment_prob);
  p.matched_splice = c.flag("pretrain.matched_splice", p.matched_splice);
  const std::string loss = c.text("pretrain.loss", "all");
  if (loss != "all" && loss != "masked") throw ParameterError("pretrain.loss must be 'all' or 'masked'");
  p.loss_mode = loss == "all" ? LossMode::AllPatches : LossMode::MaskedOnly;
  p.init_seed = run.seed();
  const std::string resume_from = c.text("pretrain.resume", "");

  const auto windows = read_dataset(data);
  std::optional<PretrainResult> resume;
  if (!resume_from.empty()) {
    PretrainResult r;
    r.state = load_checkpoint(resume_from, &r.optimizer);
    resume = std::move(r);
  }
  // Validate shapes before creating any output.
  {
    PretrainConfig probe_cfg = p;
    probe_cfg.optim.total_epochs = 0;
    pretrain(windows, probe_cfg, resume ? &*resume : nullptr);
  }
  run.open();

  std::string csv = "epoch,loss\n";
  auto res = pretrain(windows, p, resume ? &*resume : nullptr, [&](std::size_t epoch, double l) {
    csv += std::to_string(epoch) + "," + format_double(l) + "\n";
    std::cerr << "epoch " << epoch << " loss " << l << "\n";
  });
  save_checkpoint(run.out() / "checkpoint", res.state, &res.optimizer);
  write_text(run.out() / "loss.csv", csv);
  const double final_loss = res.epoch_loss.empty() ? std::nan("") : res.epoch_loss.back();
  write_text(run.out() / "summary.csv", "final_loss,epochs\n" + csv_real(final_loss) + "," +
                                            std::to_string(res.optimizer.epochs) + "\n");
  return 0;
}

int cmd_impute(const Common& common) {
  Run run(common, "impute");
  Config& c = run.cfg();
  const std::string data = required(c, "data");
  const std::string ckpt = required(c, "checkpoint");
  const double ratio = c.real("impute.ratio", 0.7);
  const std::string visible = c.text("impute.visible_modality", "random");
  const std::size_t sweeps = c.count("impute.sweeps", 3);
  std::vector<MissingnessTask> tasks;
  for (const auto& name : split_list(c.text("impute.tasks", "random,temporal,sensor,extrapolation"))) {
    MissingnessTask t{parse_missingness_kind(name), ratio, std::nullopt};
    if (t.kind == MissingnessKind::Sensor && visible != "random") {
      try {
        t.visible_modality = std::stoull(visible);
      } catch (const std::exception&) {
        throw ParameterError("impute.visible_modality must be 'random' or an index");
      }
    }
    validate(t);
    tasks.push_back(t);
  }
  std::vector<ImputeMethod> methods;
  for (const auto& name : split_list(c.text("impute.methods", "model,linear,nearest,chained")))
    methods.push_back(parse_impute_method(name));

  const ModelState state = load_checkpoint(ckpt);
  const auto windows = read_dataset(data);
  run.open();
  const auto rows = run_imputation(state, windows, tasks, methods, run.seed(), sweeps);
  std::string csv = "task,method,ratio,mae,mse,n_windows,seed\n";
  for (const auto& r : rows)
    csv += std::string(to_string(r.kind)) + "," + r.method + "," + csv_real(r.ratio) + "," + format_double(r.mae) +
           "," + format_double(r.mse) + "," + std::to_string(r.n_windows) + "," + std::to_string(run.seed()) + "\n";
  write_text(run.out() / "impute.csv", csv);
  std::cout << csv;
  return 0;
}

int cmd_probe(const Common& common) {
  Run run(common, "probe");
  Config& c = run.cfg();
  const std::string data = required(c, "data");
  const std::string ckpt = c.text("checkpoint", "");
  ArchSpec arch;
  if (ckpt.empty()) arch = read_arch(c);
  ProbeConfig p;
  const std::string mode = c.text("probe.mode", "lp");
  if (mode != "lp" && mode != "ft") throw ParameterError("probe.mode must be 'lp' or 'ft'");
  p.mode = mode == "lp" ? ProbeMode::LinearProbe : ProbeMode::FineTune;
  p.epochs = c.count("probe.epochs", p.epochs);
  p.lr = c.real("probe.lr", p.lr);
  p.batch_size = c.count("probe.batch_size", p.batch_size);
  p.train_fraction = c.real("probe.train_fraction", p.train_fraction);
  p.weight_decay = c.real("probe.weight_decay", p.weight_decay);
  p.seed = run.seed();

  const auto windows = read_dataset(data, true);
  p.n_classes = c.count("probe.n_classes", read_manifest(DatasetPaths::from_stem(data).manifest).n_classes);
  const ModelState state = ckpt.empty() ? init_model(arch, run.seed()) : load_checkpoint(ckpt);
  run.open();
  const auto res = probe(state, windows, p);
  std::string curve = "epoch,loss\n";
  for (std::size_t e = 0; e < res.curve.size(); ++e) curve += std::to_string(e) + "," + format_double(res.curve[e]) + "\n";
  write_text(run.out() / "curve.csv", curve);
  const std::string metrics = "mode,top1,train_top1,n_train,n_test\n" + mode + "," + format_double(res.top1) + "," +
                              format_double(res.train_top1) + "," + std::to_string(res.n_train) + "," +
                              std::to_string(res.n_test) + "\n";
  write_text(run.out() / "metrics.csv", metrics);
  if (p.mode == ProbeMode::FineTune) save_checkpoint(run.out() / "finetuned", res.state);
  std::cout << metrics;
  return 0;
}

int cmd_analyze(const Common& common) {
  Run run(common, "analyze");
  Config& c = run.cfg();
  const std::string data = required(c, "data");
  const std::size_t n = c.count("analyze.n", 200);
  const std::size_t n_seeds = c.count("analyze.seeds", 5);
  const std::size_t pca_k = c.count("analyze.pca_k", 50);
  const double ratio = c.real("analyze.mask_ratio", 0.75);
  const std::size_t patch_len = c.count("analyze.patch_len", 8);
  const std::string encoders = c.text("analyze.encoder", "raw");
  const std::string ckpt = c.text("checkpoint", "");
  const bool export_grams = c.flag("analyze.export_grams", false);
  std::vector<EncoderKind> kinds;
  if (encoders == "both") kinds = {EncoderKind::RawFlatten, EncoderKind::ModelEncoder};
  else kinds = {parse_encoder_kind(encoders)};
  std::optional<ModelState> state;
  for (auto k : kinds)
    if (k == EncoderKind::ModelEncoder && ckpt.empty()) throw ParameterError("analyze.encoder=model needs checkpoint");
  if (!ckpt.empty()) state = load_checkpoint(ckpt);
  const auto base = read_dataset(data);
  run.open();

  std::string csv = "policy,seed,n,pca_k,encoder_kind,sigma1\n";
  for (std::size_t i = 0; i < n_seeds; ++i) {
    const std::uint64_t seed = run.seed() + i;
    const auto windows = transition_windows(base, n, seed);
    for (auto kind : kinds)
      for (auto policy : {MaskPolicy::CrossModality, MaskPolicy::Synchronized}) {
        Sigma1Config sc;
        sc.policy = policy;
        sc.encoder = kind;
        sc.pca_k = pca_k;
        sc.mask_ratio = ratio;
        sc.patch_len = patch_len;
        sc.seed = seed;
        const auto r = sigma1_experiment(windows, sc, state ? &*state : nullptr);
        csv += std::string(to_string(policy)) + "," + std::to_string(seed) + "," + std::to_string(r.n) + "," +
               std::to_string(r.pca_k) + "," + to_string(kind) + "," + format_double(r.sigma1) + "\n";
      }
    if (export_grams && i == 0) {
      // Linear mean-embedding Grams of both views under each policy.
      const std::size_t C = windows.front().modalities();
      const std::size_t P = windows.front().length() / patch_len;
      for (auto policy : {MaskPolicy::CrossModality, MaskPolicy::Synchronized}) {
        Rng rng(Rng::mix(seed) ^ 0x51a0ULL);
        std::vector<PatchSet> u, m;
        for (const auto& w : windows) {
          const auto views = split_views(patchify(w, patch_len), sample_mask(policy, C, P, ratio, rng));
          PatchSet pu, pm;
          for (const auto& v : views.unmasked) pu.push_back(v.values);
          for (const auto& v : views.masked) pm.push_back(v.values);
          u.push_back(std::move(pu));
          m.push_back(std::move(pm));
        }
        const std::string tag = to_string(policy);
        write_gram(run.out() / ("gram_" + tag + "_u.f64"), view_gram(u, {}));
        write_gram(run.out() / ("gram_" + tag + "_m.f64"), view_gram(m, {}));
      }
    }
  }
  write_text(run.out() / "sigma1.csv", csv);
  std::cout << csv;
  return 0;
}

int cmd_gradcheck(const Common& common) {
  Run run(common, "gradcheck");
  Config& c = run.cfg();
  const ArchSpec arch = read_arch(c);
  const double h = c.real("gradcheck.h", 1e-4);
  const double tol = c.real("gradcheck.tolerance", 1e-3);
  run.open();
  const auto r = gradcheck_model(arch, run.seed(), h);
  const std::string csv = "entries,max_rel_error,worst_parameter,worst_index,analytic,numeric,pass\n" +
                          std::to_string(r.entries_checked) + "," + format_double(r.max_rel_error) + "," +
                          r.worst_parameter + "," + std::to_string(r.worst_index) + "," + format_double(r.analytic) +
                          "," + format_double(r.numeric) + "," + (r.max_rel_error < tol ? "true" : "false") + "\n";
  write_text(run.out() / "gradcheck.csv", csv);
  std::cout << "max relative error " << format_double(r.max_rel_error) << " over " << r.entries_checked
            << " entries (worst: " << r.worst_parameter << "[" << r.worst_index << "])\n";
  return r.max_rel_error < tol ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modality masked autoencoder toolkit"};
  app.require_subcommand(1);
  Common common;
  struct Entry {
    const char* name;
    const char* help;
    int (*fn)(const Common&);
  };
  const Entry entries[] = {
      {"synth", "generate a synthetic multi-modal dataset", cmd_synth},
      {"pretrain", "masked-reconstruction pretraining", cmd_pretrain},
      {"impute", "imputation benchmark over four missingness tasks", cmd_impute},
      {"probe", "linear probe or fine-tune classification", cmd_probe},
      {"analyze", "sigma1 comparison of masking policies", cmd_analyze},
      {"gradcheck", "finite-difference check of the model gradient", cmd_gradcheck},
  };
  std::vector<std::pair<CLI::App*, int (*)(const Common&)>> subs;
  for (const auto& e : entries) {
    CLI::App* sub = app.add_subcommand(e.name, e.help);
    sub->add_option("--config", common.config, "key=value configuration file")->check(CLI::ExistingFile);
    sub->add_option("--out", common.out, "output directory");
    sub->add_option("--seed", common.seed, "seed (overrides the config)");
    subs.emplace_back(sub, e.fn);
  }
  CLI11_PARSE(app, argc, argv);
  try {
    for (auto& [sub, fn] : subs)
      if (sub->parsed()) return fn(common);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
