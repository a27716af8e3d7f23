#include "moca/model.h"

#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

namespace moca {

using nn::Parameter;
using nn::Tape;
using nn::Tensor;
using nn::Var;

void validate(const ArchSpec& a) {
  if (a.embed_dim == 0 || a.heads == 0 || a.embed_dim % a.heads != 0)
    throw ParameterError("arch: embed_dim must be a positive multiple of heads");
  if (a.embed_dim % 4 != 0) throw ParameterError("arch: embed_dim must be divisible by 4 for 2D positions");
  if (a.encoder_layers == 0 || a.decoder_layers == 0) throw ParameterError("arch: need at least one layer each");
  if (a.mlp_ratio == 0) throw ParameterError("arch: mlp_ratio must be positive");
  if (a.patch_len == 0 || a.modalities == 0 || a.patches_per_modality == 0)
    throw ParameterError("arch: patch_len, modalities and patches_per_modality must be positive");
  if (a.modalities < 2) throw ParameterError("arch: need at least 2 modalities");
}

namespace {

Tensor uniform(Rng& rng, std::size_t rows, std::size_t cols, double bound) {
  Tensor t = Tensor::matrix(rows, cols);
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

Tensor gaussian(Rng& rng, std::size_t rows, std::size_t cols, double sd) {
  Tensor t = Tensor::matrix(rows, cols);
  for (auto& v : t.data()) v = rng.normal(0.0, sd);
  return t;
}

Parameter linear_weight(const std::string& name, Rng& rng, std::size_t in, std::size_t out) {
  return Parameter(name, uniform(rng, in, out, 1.0 / std::sqrt(static_cast<double>(in))));
}

Parameter zeros(const std::string& name, std::size_t cols) { return Parameter(name, Tensor::matrix(1, cols)); }
Parameter ones(const std::string& name, std::size_t cols) { return Parameter(name, Tensor::matrix(1, cols, 1.0)); }

BlockParams init_block(const std::string& prefix, Rng& rng, std::size_t d, std::size_t hidden) {
  BlockParams b;
  b.ln1_g = ones(prefix + ".ln1.g", d);
  b.ln1_b = zeros(prefix + ".ln1.b", d);
  b.qkv_w = linear_weight(prefix + ".attn.qkv.w", rng, d, 3 * d);
  b.qkv_b = zeros(prefix + ".attn.qkv.b", 3 * d);
  b.proj_w = linear_weight(prefix + ".attn.proj.w", rng, d, d);
  b.proj_b = zeros(prefix + ".attn.proj.b", d);
  b.ln2_g = ones(prefix + ".ln2.g", d);
  b.ln2_b = zeros(prefix + ".ln2.b", d);
  b.fc1_w = linear_weight(prefix + ".mlp.fc1.w", rng, d, hidden);
  b.fc1_b = zeros(prefix + ".mlp.fc1.b", hidden);
  b.fc2_w = linear_weight(prefix + ".mlp.fc2.w", rng, hidden, d);
  b.fc2_b = zeros(prefix + ".mlp.fc2.b", d);
  return b;
}

template <typename P, typename B>
void collect_block(std::vector<P*>& out, B& b) {
  for (P* p : {&b.ln1_g, &b.ln1_b, &b.qkv_w, &b.qkv_b, &b.proj_w, &b.proj_b, &b.ln2_g, &b.ln2_b, &b.fc1_w,
               &b.fc1_b, &b.fc2_w, &b.fc2_b})
    out.push_back(p);
}

template <typename P, typename S>
std::vector<P*> collect(S& s, bool encoder_only) {
  std::vector<P*> out{&s.patch_w, &s.patch_b, &s.cls_token};
  if (!encoder_only) out.push_back(&s.mask_token);
  for (auto& b : s.encoder) collect_block<P>(out, b);
  out.push_back(&s.enc_norm_g);
  out.push_back(&s.enc_norm_b);
  if (encoder_only) return out;
  for (auto& b : s.decoder) collect_block<P>(out, b);
  for (P* p : {&s.dec_norm_g, &s.dec_norm_b, &s.head_w, &s.head_b}) out.push_back(p);
  return out;
}

}  // namespace

std::vector<Parameter*> ModelState::parameters() { return collect<Parameter>(*this, false); }
std::vector<const Parameter*> ModelState::parameters() const { return collect<const Parameter>(*this, false); }
std::vector<Parameter*> ModelState::encoder_parameters() { return collect<Parameter>(*this, true); }

void ModelState::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

Tensor positions_2d(std::size_t modalities, std::size_t patches, std::size_t embed_dim) {
  if (embed_dim == 0 || embed_dim % 4 != 0) throw ParameterError("positions_2d: embed_dim must be divisible by 4");
  const std::size_t half = embed_dim / 2;
  Tensor table = Tensor::matrix(modalities * patches + 1, embed_dim);
  auto encode_index = [&](double v, double* dst) {
    for (std::size_t k = 0; k < half / 2; ++k) {
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(half));
      dst[2 * k] = std::sin(v * freq);
      dst[2 * k + 1] = std::cos(v * freq);
    }
  };
  for (std::size_t c = 0; c < modalities; ++c)
    for (std::size_t p = 0; p < patches; ++p) {
      double* row = table.data().data() + (1 + c * patches + p) * embed_dim;
      encode_index(static_cast<double>(c), row);
      encode_index(static_cast<double>(p), row + half);
    }
  return table;
}

ModelState init_model(const ArchSpec& arch, std::uint64_t seed) {
  validate(arch);
  Rng rng(seed);
  const std::size_t d = arch.embed_dim;
  const std::size_t hidden = d * arch.mlp_ratio;
  ModelState s;
  s.arch = arch;
  s.patch_w = linear_weight("patch.w", rng, arch.patch_len, d);
  s.patch_b = zeros("patch.b", d);
  s.cls_token = Parameter("cls_token", gaussian(rng, 1, d, 0.02));
  s.mask_token = Parameter("mask_token", gaussian(rng, 1, d, 0.02));
  for (std::size_t i = 0; i < arch.encoder_layers; ++i)
    s.encoder.push_back(init_block("enc." + std::to_string(i), rng, d, hidden));
  s.enc_norm_g = ones("enc.norm.g", d);
  s.enc_norm_b = zeros("enc.norm.b", d);
  for (std::size_t i = 0; i < arch.decoder_layers; ++i)
    s.decoder.push_back(init_block("dec." + std::to_string(i), rng, d, hidden));
  s.dec_norm_g = ones("dec.norm.g", d);
  s.dec_norm_b = zeros("dec.norm.b", d);
  s.head_w = linear_weight("head.w", rng, d, arch.patch_len);
  s.head_b = zeros("head.b", arch.patch_len);
  s.positions = positions_2d(arch.modalities, arch.patches_per_modality, d);
  return s;
}

// ---------------------------------------------------------------------------

Binder::Binder(Tape& tape, std::span<Parameter* const> trainable) : tape_(tape) {
  for (auto* p : trainable) trainable_[p] = p;
}

Var Binder::operator()(const Parameter& p) {
  if (auto it = bound_.find(&p); it != bound_.end()) return it->second;
  Var v;
  if (auto it = trainable_.find(&p); it != trainable_.end())
    v = tape_.parameter(*it->second);
  else
    v = tape_.constant(p.value);
  bound_.emplace(&p, v);
  return v;
}

namespace {

Var linear(Binder& bind, Var x, const Parameter& w, const Parameter& b) {
  return nn::add(nn::matmul(x, bind(w)), bind(b));
}

Var block_forward(const BlockParams& b, Binder& bind, Var x, std::size_t heads) {
  const std::size_t d = x.value().cols();
  const std::size_t hd = d / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  Var h = nn::layer_norm(x, bind(b.ln1_g), bind(b.ln1_b));
  Var qkv = linear(bind, h, b.qkv_w, b.qkv_b);
  std::vector<Var> outs;
  outs.reserve(heads);
  for (std::size_t i = 0; i < heads; ++i) {
    Var q = nn::slice_cols(qkv, i * hd, hd);
    Var k = nn::slice_cols(qkv, d + i * hd, hd);
    Var v = nn::slice_cols(qkv, 2 * d + i * hd, hd);
    Var att = nn::softmax(nn::scale(nn::matmul(q, nn::transpose(k)), inv_scale), 1);
    outs.push_back(nn::matmul(att, v));
  }
  Var attn = linear(bind, heads == 1 ? outs.front() : nn::concat_cols(outs), b.proj_w, b.proj_b);
  x = nn::add(x, attn);

  Var h2 = nn::layer_norm(x, bind(b.ln2_g), bind(b.ln2_b));
  Var mlp = linear(bind, nn::gelu(linear(bind, h2, b.fc1_w, b.fc1_b)), b.fc2_w, b.fc2_b);
  return nn::add(x, mlp);
}

void check_grid_shape(const ArchSpec& a, std::size_t C, std::size_t P, std::size_t Lp) {
  if (C != a.modalities || P != a.patches_per_modality || Lp != a.patch_len) {
    std::ostringstream msg;
    msg << "input grid " << C << "x" << P << "x" << Lp << " does not match model " << a.modalities << "x"
        << a.patches_per_modality << "x" << a.patch_len;
    throw ParameterError(msg.str());
  }
}

}  // namespace

Encoded encode(const ModelState& state, Binder& bind, const ViewSplit& views) {
  const auto& a = state.arch;
  if (views.unmasked.empty()) throw PreconditionError("encode: no visible patches");
  const std::size_t n = views.unmasked.size();
  const std::size_t d = a.embed_dim;
  Tape& tape = bind.tape();

  Encoded out;
  out.coords.reserve(n);
  Tensor patches = Tensor::matrix(n, a.patch_len);
  Tensor pos = Tensor::matrix(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& vp = views.unmasked[i];
    if (vp.modality >= a.modalities || vp.patch >= a.patches_per_modality || vp.values.size() != a.patch_len)
      throw ParameterError("encode: visible patch does not fit the model grid");
    std::copy(vp.values.begin(), vp.values.end(), patches.row(i).begin());
    auto src = state.positions.row(1 + vp.modality * a.patches_per_modality + vp.patch);
    std::copy(src.begin(), src.end(), pos.row(i).begin());
    out.coords.emplace_back(vp.modality, vp.patch);
  }

  Var emb = linear(bind, tape.constant(std::move(patches)), state.patch_w, state.patch_b);
  emb = nn::add(emb, tape.constant(std::move(pos)));
  Tensor cls_pos = Tensor::matrix(1, d);
  std::copy(state.positions.row(0).begin(), state.positions.row(0).end(), cls_pos.data().begin());
  Var cls = nn::add(bind(state.cls_token), tape.constant(std::move(cls_pos)));

  Var x = nn::concat_rows({cls, emb});
  for (const auto& b : state.encoder) x = block_forward(b, bind, x, a.heads);
  out.tokens = nn::layer_norm(x, bind(state.enc_norm_g), bind(state.enc_norm_b));
  return out;
}

Var decode(const ModelState& state, Binder& bind, const Encoded& latents, const MaskMatrix& mask) {
  const auto& a = state.arch;
  const std::size_t C = a.modalities, P = a.patches_per_modality;
  if (mask.modalities() != C || mask.patches() != P) throw ParameterError("decode: mask shape does not match model");
  const std::size_t n = latents.coords.size();
  if (latents.tokens.value().rows() != n + 1) throw ParameterError("decode: latent count does not match coordinates");
  if (mask.visible_count() != n) throw ParameterError("decode: mask visible count does not match latents");

  // Row index into [latents; mask_token] for every sequence position.
  const std::size_t mask_row = n + 1;
  std::vector<std::size_t> index(C * P + 1, mask_row);
  index[0] = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto [c, p] = latents.coords[i];
    if (c >= C || p >= P || mask.masked(c, p)) throw ParameterError("decode: latent placed on a masked or invalid cell");
    std::size_t& slot = index[1 + c * P + p];
    if (slot != mask_row) throw ParameterError("decode: duplicate latent coordinate");
    slot = i + 1;
  }

  Tape& tape = bind.tape();
  Var seq = nn::gather_rows(nn::concat_rows({latents.tokens, bind(state.mask_token)}), std::move(index));
  seq = nn::add(seq, tape.constant(state.positions));
  for (const auto& b : state.decoder) seq = block_forward(b, bind, seq, a.heads);
  seq = nn::layer_norm(seq, bind(state.dec_norm_g), bind(state.dec_norm_b));
  Var tokens = nn::slice_rows(seq, 1, C * P);
  return linear(bind, tokens, state.head_w, state.head_b);
}

Var mae_loss(const ModelState& state, Binder& bind, const PatchGrid& grid, const MaskMatrix& mask, LossMode mode) {
  check_grid_shape(state.arch, grid.modalities, grid.patches_per_modality, grid.patch_len);
  auto views = split_views(grid, mask);
  Encoded enc = encode(state, bind, views);
  Var pred = decode(state, bind, enc, mask);
  Tape& tape = bind.tape();
  if (mode == LossMode::AllPatches) return nn::mse(pred, tape.constant(Tensor::from(grid.patches)));

  std::vector<std::size_t> rows;
  for (std::size_t c = 0; c < grid.modalities; ++c)
    for (std::size_t p = 0; p < grid.patches_per_modality; ++p)
      if (mask.masked(c, p)) rows.push_back(grid.index(c, p));
  if (rows.empty()) throw ParameterError("mae_loss: masked-only loss with an empty mask");
  Tensor target = Tensor::matrix(rows.size(), grid.patch_len);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto src = grid.patches.row(rows[i]);
    std::copy(src.begin(), src.end(), target.row(i).begin());
  }
  return nn::mse(nn::gather_rows(pred, rows), tape.constant(std::move(target)));
}

PatchGrid reconstruct(const ModelState& state, const PatchGrid& grid, const MaskMatrix& mask) {
  check_grid_shape(state.arch, grid.modalities, grid.patches_per_modality, grid.patch_len);
  Tape tape;
  Binder bind(tape);
  Encoded enc = encode(state, bind, split_views(grid, mask));
  Var pred = decode(state, bind, enc, mask);
  PatchGrid out = grid;
  out.patches = pred.value().to_matrix();
  return out;
}

double evaluate_loss(const ModelState& state, const PatchGrid& grid, const MaskMatrix& mask, LossMode mode) {
  Tape tape;
  Binder bind(tape);
  return mae_loss(state, bind, grid, mask, mode).value().item();
}

std::vector<double> class_embedding(const ModelState& state, const PatchGrid& grid) {
  check_grid_shape(state.arch, grid.modalities, grid.patches_per_modality, grid.patch_len);
  Tape tape;
  Binder bind(tape);
  MaskMatrix none(grid.modalities, grid.patches_per_modality);
  Encoded enc = encode(state, bind, split_views(grid, none));
  auto row = enc.tokens.value().row(0);
  return {row.begin(), row.end()};
}

std::vector<double> mean_token_embedding(const ModelState& state, const ViewSplit& views) {
  Tape tape;
  Binder bind(tape);
  Encoded enc = encode(state, bind, views);
  const Tensor& t = enc.tokens.value();
  std::vector<double> out(t.cols(), 0.0);
  for (std::size_t r = 1; r < t.rows(); ++r)
    for (std::size_t j = 0; j < t.cols(); ++j) out[j] += t.at(r, j);
  for (auto& v : out) v /= static_cast<double>(t.rows() - 1);
  return out;
}

nn::GradCheckResult gradcheck_model(const ArchSpec& arch, std::uint64_t seed, double h, LossMode mode) {
  validate(arch);
  ModelState state = init_model(arch, seed);
  SynthSpec spec;
  spec.n_windows = 1;
  spec.modalities = arch.modalities;
  spec.length = arch.patches_per_modality * arch.patch_len;
  spec.patch_len = arch.patch_len;
  spec.seed = seed;
  const PatchGrid grid = patchify(standardize(generate_windows(spec).front()), arch.patch_len);
  Rng rng(Rng::mix(seed) ^ 0x9c4eULL);
  const MaskMatrix mask =
      sample_mask(MaskPolicy::CrossModality, arch.modalities, arch.patches_per_modality, 0.75, rng);
  auto params = state.parameters();
  auto loss = [&](Tape& tape) {
    Binder bind(tape, params);
    return mae_loss(state, bind, grid, mask, mode);
  };
  return nn::finite_diff_check(loss, params, h);
}

// ---------------------------------------------------------------------------

AlignmentTerms alignment_terms(std::span<const std::vector<double>> predictions,
                               std::span<const std::vector<double>> targets, double c_norm) {
  if (predictions.size() != targets.size() || predictions.empty())
    throw ParameterError("alignment_terms: need matching, non-empty prediction and target lists");
  if (!(c_norm > 0)) throw ParameterError("alignment_terms: c_norm must be positive");
  auto check = [&](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    if (std::abs(std::sqrt(s) - c_norm) > 1e-9 * c_norm)
      throw PreconditionError("alignment_terms: vector norm " + format_double(std::sqrt(s)) + " differs from c_norm " +
                              format_double(c_norm));
  };
  AlignmentTerms t;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto& u = predictions[i];
    const auto& v = targets[i];
    if (u.size() != v.size()) throw ParameterError("alignment_terms: vector lengths differ");
    check(u);
    check(v);
    double dist = 0.0, dot = 0.0;
    for (std::size_t k = 0; k < u.size(); ++k) {
      dist += (u[k] - v[k]) * (u[k] - v[k]);
      dot += u[k] * v[k];
    }
    t.loss += dist;
    t.alignment += dot;
  }
  const double n = static_cast<double>(predictions.size());
  t.loss /= n;
  t.alignment /= n;
  t.band = t.loss - (2.0 * c_norm * c_norm - 2.0 * t.alignment);
  return t;
}

AlignmentTerms alignment_gap(const ModelState& state, std::span<const PatchGrid> grids,
                             std::span<const MaskMatrix> masks, double c_norm) {
  if (grids.size() != masks.size()) throw ParameterError("alignment_gap: one mask per grid required");
  std::vector<std::vector<double>> preds, targets;
  auto rescale = [&](std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    s = std::sqrt(s);
    if (!(s > 0)) throw PreconditionError("alignment_gap: zero-norm view cannot be normalized");
    for (double& x : v) x *= c_norm / s;
  };
  for (std::size_t i = 0; i < grids.size(); ++i) {
    const auto& g = grids[i];
    PatchGrid rec = reconstruct(state, g, masks[i]);
    std::vector<double> u, v;
    for (std::size_t c = 0; c < g.modalities; ++c)
      for (std::size_t p = 0; p < g.patches_per_modality; ++p)
        if (masks[i].masked(c, p)) {
          auto pr = rec.patch(c, p);
          auto tr = g.patch(c, p);
          u.insert(u.end(), pr.begin(), pr.end());
          v.insert(v.end(), tr.begin(), tr.end());
        }
    if (u.empty()) throw PreconditionError("alignment_gap: mask hides no patch");
    rescale(u);
    rescale(v);
    preds.push_back(std::move(u));
    targets.push_back(std::move(v));
  }
  return alignment_terms(preds, targets, c_norm);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

void write_f32(std::ofstream& out, const Tensor& t) {
  for (double v : t.data()) {
    const auto bits = little_endian(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    out.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
  }
}

std::vector<std::size_t> parse_shape(const std::string& src, std::size_t line, const std::string& text) {
  std::vector<std::size_t> shape;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, 'x')) {
    try {
      std::size_t pos = 0;
      shape.push_back(std::stoull(part, &pos));
      if (pos != part.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ParseError(src, line, "bad shape '" + text + "'");
    }
  }
  return shape;
}

std::string shape_text(const std::vector<std::size_t>& shape) {
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "x" : "") + std::to_string(shape[i]);
  return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& stem, const ModelState& state, const OptimizerMoments* moments) {
  auto manifest_path = stem;
  manifest_path += ".manifest";
  auto blob_path = stem;
  blob_path += ".f32";

  const auto params = state.parameters();
  if (moments && (moments->first.size() != params.size() || moments->second.size() != params.size()))
    throw ParameterError("save_checkpoint: optimizer moments do not match parameters");

  std::ofstream man(manifest_path, std::ios::trunc);
  if (!man) throw IoError("cannot write " + manifest_path.string());
  std::ofstream blob(blob_path, std::ios::binary | std::ios::trunc);
  if (!blob) throw IoError("cannot write " + blob_path.string());

  const auto& a = state.arch;
  man << "format=moca-checkpoint-v1\n"
      << "embed_dim=" << a.embed_dim << "\n"
      << "encoder_layers=" << a.encoder_layers << "\n"
      << "decoder_layers=" << a.decoder_layers << "\n"
      << "heads=" << a.heads << "\n"
      << "mlp_ratio=" << a.mlp_ratio << "\n"
      << "patch_len=" << a.patch_len << "\n"
      << "modalities=" << a.modalities << "\n"
      << "patches_per_modality=" << a.patches_per_modality << "\n";
  if (moments) man << "optimizer_step=" << moments->step << "\n" << "optimizer_epochs=" << moments->epochs << "\n";

  std::size_t offset = 0;
  auto emit = [&](const std::string& kind, const std::string& name, const Tensor& t) {
    man << kind << " " << name << " " << shape_text(t.shape()) << " " << offset << "\n";
    write_f32(blob, t);
    offset += t.size();
  };
  for (const auto* p : params) emit("param", p->name, p->value);
  if (moments)
    for (std::size_t i = 0; i < params.size(); ++i) {
      emit("adam_m", params[i]->name, moments->first[i]);
      emit("adam_v", params[i]->name, moments->second[i]);
    }
  man << "total_floats=" << offset << "\n";
  if (!man || !blob) throw IoError("write failed for checkpoint " + stem.string());
}

ModelState load_checkpoint(const std::filesystem::path& stem, OptimizerMoments* moments) {
  auto manifest_path = stem;
  manifest_path += ".manifest";
  auto blob_path = stem;
  blob_path += ".f32";
  const std::string src = manifest_path.string();

  std::ifstream man(manifest_path);
  if (!man) throw IoError("cannot open checkpoint " + src);

  struct Entry {
    std::string kind, name;
    std::vector<std::size_t> shape;
    std::size_t offset;
    std::size_t line;
  };
  ArchSpec arch;
  std::vector<Entry> entries;
  std::size_t total = 0, step = 0, epochs = 0;
  bool has_total = false, has_format = false;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(man, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line.rfind("param ", 0) == 0 || line.rfind("adam_m ", 0) == 0 || line.rfind("adam_v ", 0) == 0) {
      std::istringstream ss(line);
      Entry e;
      std::string shape;
      if (!(ss >> e.kind >> e.name >> shape >> e.offset)) throw ParseError(src, lineno, "malformed tensor entry");
      e.shape = parse_shape(src, lineno, shape);
      e.line = lineno;
      entries.push_back(std::move(e));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(src, lineno, "expected key=value");
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "format") {
      if (val != "moca-checkpoint-v1") throw ParseError(src, lineno, "unsupported format '" + val + "'");
      has_format = true;
      continue;
    }
    std::size_t v = 0;
    try {
      std::size_t pos = 0;
      v = std::stoull(val, &pos);
      if (pos != val.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ParseError(src, lineno, "value for '" + key + "' is not an integer");
    }
    if (key == "embed_dim") arch.embed_dim = v;
    else if (key == "encoder_layers") arch.encoder_layers = v;
    else if (key == "decoder_layers") arch.decoder_layers = v;
    else if (key == "heads") arch.heads = v;
    else if (key == "mlp_ratio") arch.mlp_ratio = v;
    else if (key == "patch_len") arch.patch_len = v;
    else if (key == "modalities") arch.modalities = v;
    else if (key == "patches_per_modality") arch.patches_per_modality = v;
    else if (key == "optimizer_step") step = v;
    else if (key == "optimizer_epochs") epochs = v;
    else if (key == "total_floats") {
      total = v;
      has_total = true;
    } else
      throw ParseError(src, lineno, "unknown key '" + key + "'");
  }
  if (!has_format || !has_total) throw ParseError(src, lineno, "checkpoint manifest is incomplete");

  std::error_code ec;
  const auto bytes = std::filesystem::file_size(blob_path, ec);
  if (ec) throw IoError("cannot stat " + blob_path.string());
  if (bytes != total * sizeof(float))
    throw IoError(blob_path.string() + ": expected " + std::to_string(total * sizeof(float)) + " bytes, found " +
                  std::to_string(bytes));
  std::vector<float> blob(total);
  {
    std::ifstream in(blob_path, std::ios::binary);
    if (!in) throw IoError("cannot open " + blob_path.string());
    in.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(total * sizeof(float)));
    if (!in) throw IoError("short read from " + blob_path.string());
    for (auto& f : blob) f = std::bit_cast<float>(little_endian(std::bit_cast<std::uint32_t>(f)));
  }

  ModelState state = init_model(arch, 0);
  auto params = state.parameters();
  std::unordered_map<std::string, std::size_t> by_name;
  for (std::size_t i = 0; i < params.size(); ++i) by_name[params[i]->name] = i;

  auto read_tensor = [&](const Entry& e, const Tensor& like) {
    if (e.shape != like.shape())
      throw ParseError(src, e.line, "shape of '" + e.name + "' does not match the architecture");
    if (e.offset + like.size() > total) throw ParseError(src, e.line, "tensor '" + e.name + "' exceeds the blob");
    Tensor t(like.shape());
    for (std::size_t k = 0; k < t.size(); ++k) t[k] = static_cast<double>(blob[e.offset + k]);
    return t;
  };

  std::vector<bool> seen(params.size(), false);
  if (moments) {
    moments->first.assign(params.size(), Tensor());
    moments->second.assign(params.size(), Tensor());
    moments->step = step;
    moments->epochs = epochs;
  }
  for (const auto& e : entries) {
    auto it = by_name.find(e.name);
    if (it == by_name.end()) throw ParseError(src, e.line, "unknown parameter '" + e.name + "'");
    Parameter& p = *params[it->second];
    if (e.kind == "param") {
      p.value = read_tensor(e, p.value);
      p.zero_grad();
      seen[it->second] = true;
    } else if (moments) {
      (e.kind == "adam_m" ? moments->first : moments->second)[it->second] = read_tensor(e, p.value);
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!seen[i]) throw ParseError(src, lineno, "parameter '" + params[i]->name + "' missing from checkpoint");
  if (moments) {
    bool complete = true;
    for (std::size_t i = 0; i < params.size(); ++i)
      complete = complete && moments->first[i].same_shape(params[i]->value) &&
                 moments->second[i].same_shape(params[i]->value);
    if (!complete) {
      // no (or partial) optimizer state stored: start fresh moments
      moments->step = 0;
      moments->epochs = epochs;
      for (std::size_t i = 0; i < params.size(); ++i) {
        moments->first[i] = Tensor(params[i]->value.shape());
        moments->second[i] = Tensor(params[i]->value.shape());
      }
    }
  }
  return state;
}

}  // namespace moca
