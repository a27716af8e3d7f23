#include "moca/synthdata.h"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

namespace moca {

void validate_window(const SensorWindow& w) {
  if (w.modalities() < 2) throw ParameterError("window needs at least 2 modalities");
  if (w.length() < 2) throw ParameterError("window needs at least 2 time steps");
  for (double v : w.values.data())
    if (!std::isfinite(v)) throw ParameterError("window contains a non-finite value");
}

void validate(const SynthSpec& spec) {
  if (spec.n_windows == 0) throw ParameterError("synth: n_windows must be positive");
  if (spec.modalities < 2) throw ParameterError("synth: need at least 2 modalities");
  if (spec.length < 2) throw ParameterError("synth: length must be at least 2");
  if (spec.patch_len == 0 || spec.patch_len > spec.length)
    throw ParameterError("synth: patch_len must be in [1, length]");
  if (spec.n_classes == 0) throw ParameterError("synth: n_classes must be positive");
  if (!(spec.sample_rate_hz > 0)) throw ParameterError("synth: sample_rate_hz must be positive");
  if (!(spec.shared_latent_strength >= 0.0 && spec.shared_latent_strength <= 1.0))
    throw ParameterError("synth: shared_latent_strength must lie in [0, 1]");
  if (!(spec.noise_sd >= 0.0)) throw ParameterError("synth: noise_sd must be nonnegative");
  if (!(spec.shared_jitter_sd >= 0.0)) throw ParameterError("synth: shared_jitter_sd must be nonnegative");
}

std::vector<SensorWindow> generate_windows(const SynthSpec& spec) {
  validate(spec);
  Rng rng(spec.seed);
  const std::size_t C = spec.modalities;
  const std::size_t L = spec.length;
  const double s = spec.shared_latent_strength;
  const double own = std::sqrt(std::max(0.0, 1.0 - s * s));
  constexpr double two_pi = 2.0 * std::numbers::pi;

  std::vector<double> gain(C), offset(C);
  for (std::size_t c = 0; c < C; ++c) {
    gain[c] = rng.uniform(0.5, 1.5);
    offset[c] = rng.uniform(0.0, std::numbers::pi / 4.0);
  }

  std::vector<SensorWindow> out;
  out.reserve(spec.n_windows);
  std::vector<double> shared(L);
  for (std::size_t i = 0; i < spec.n_windows; ++i) {
    const auto label = static_cast<int>(i % spec.n_classes);
    const double omega = two_pi * (1.0 + label) / static_cast<double>(L);
    const double phase = rng.uniform(0.0, two_pi);
    for (std::size_t t = 0; t < L; ++t)
      shared[t] = std::sin(omega * t + phase) + spec.shared_jitter_sd * rng.normal();

    SensorWindow w{Matrix(C, L), spec.sample_rate_hz, label};
    for (std::size_t c = 0; c < C; ++c) {
      const double own_phase = rng.uniform(0.0, two_pi) + offset[c];
      auto row = w.values.row(c);
      for (std::size_t t = 0; t < L; ++t) {
        const double indep = std::sin(omega * t + own_phase) + spec.shared_jitter_sd * rng.normal();
        row[t] = gain[c] * (s * shared[t] + own * indep) + spec.noise_sd * rng.normal();
      }
    }
    out.push_back(std::move(w));
  }
  return out;
}

std::pair<std::size_t, std::size_t> splice_length_bounds(std::size_t length) {
  // ceil(0.2 L) and floor(0.5 L) in exact integer arithmetic
  const std::size_t lo = (length + 4) / 5;
  const std::size_t hi = length / 2;
  return {std::max<std::size_t>(lo, 1), hi};
}

SensorWindow splice_windows(const SensorWindow& dest, const SensorWindow& src, std::size_t length,
                            std::size_t dest_start, std::size_t src_start) {
  if (dest.modalities() != src.modalities() || dest.length() != src.length())
    throw ParameterError("splice: windows differ in shape");
  const std::size_t L = dest.length();
  if (length > L || dest_start + length > L || src_start + length > L)
    throw ParameterError("splice: segment exceeds window");
  SensorWindow out = dest;
  for (std::size_t c = 0; c < dest.modalities(); ++c)
    for (std::size_t k = 0; k < length; ++k) out.values(c, dest_start + k) = src.values(c, src_start + k);
  return out;
}

SpliceRecord splice_augment_record(std::span<const SensorWindow> dataset, Rng& rng, const SpliceOptions& opts) {
  if (dataset.size() < 2) throw ParameterError("splice_augment: need at least 2 windows");
  const std::size_t C = dataset.front().modalities();
  const std::size_t L = dataset.front().length();
  for (const auto& w : dataset)
    if (w.modalities() != C || w.length() != L) throw ParameterError("splice_augment: windows differ in shape");
  const auto [lo, hi] = splice_length_bounds(L);
  if (lo > hi) throw ParameterError("splice_augment: window too short to splice");

  auto pair = rng.sample_without_replacement(dataset.size(), 2);
  SpliceRecord rec;
  rec.first = pair[0];
  rec.second = pair[1];
  rec.length = rng.integer(lo, hi);
  rec.dest_start = rng.integer(0, L - rec.length);
  rec.src_start = opts.matched_position ? rec.dest_start : rng.integer(0, L - rec.length);
  rec.window = splice_windows(dataset[rec.first], dataset[rec.second], rec.length, rec.dest_start, rec.src_start);
  return rec;
}

SensorWindow splice_augment(std::span<const SensorWindow> dataset, std::uint64_t seed, const SpliceOptions& opts) {
  Rng rng(seed);
  return splice_augment_record(dataset, rng, opts).window;
}

PatchGrid patchify(const SensorWindow& window, std::size_t patch_len) {
  if (patch_len == 0 || patch_len > window.length())
    throw ParameterError("patchify: patch length must be in [1, L]");
  PatchGrid g;
  g.modalities = window.modalities();
  g.patches_per_modality = window.length() / patch_len;
  g.patch_len = patch_len;
  g.patches = Matrix(g.token_count(), patch_len);
  for (std::size_t c = 0; c < g.modalities; ++c)
    for (std::size_t p = 0; p < g.patches_per_modality; ++p) {
      auto dst = g.patch(c, p);
      for (std::size_t k = 0; k < patch_len; ++k) dst[k] = window.values(c, p * patch_len + k);
    }
  return g;
}

SensorWindow unpatchify(const PatchGrid& grid, double sample_rate_hz) {
  if (grid.patches.rows() != grid.token_count() || grid.patches.cols() != grid.patch_len)
    throw ParameterError("unpatchify: grid storage does not match its shape");
  const std::size_t L = grid.patches_per_modality * grid.patch_len;
  SensorWindow w{Matrix(grid.modalities, L), sample_rate_hz, std::nullopt};
  for (std::size_t c = 0; c < grid.modalities; ++c)
    for (std::size_t p = 0; p < grid.patches_per_modality; ++p) {
      auto src = grid.patch(c, p);
      for (std::size_t k = 0; k < grid.patch_len; ++k) w.values(c, p * grid.patch_len + k) = src[k];
    }
  return w;
}

SensorWindow standardize(const SensorWindow& window) {
  SensorWindow out = window;
  const std::size_t L = window.length();
  for (std::size_t c = 0; c < window.modalities(); ++c) {
    auto row = out.values.row(c);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(L);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(L);
    const double sd = std::sqrt(var);
    // relative cutoff: a channel of identical floats can leave rounding noise in var
    const bool constant = !(sd > 1e-12 * std::max(1.0, std::abs(mean)));
    for (double& v : row) v = constant ? 0.0 : (v - mean) / sd;
  }
  return out;
}

SensorWindow truncate(const SensorWindow& window, std::size_t n) {
  if (n > window.length()) throw ParameterError("truncate: n exceeds window length");
  SensorWindow out{Matrix(window.modalities(), n), window.sample_rate_hz, window.label};
  for (std::size_t c = 0; c < window.modalities(); ++c)
    for (std::size_t t = 0; t < n; ++t) out.values(c, t) = window.values(c, t);
  return out;
}

// ---------------------------------------------------------------------------
// Files

DatasetPaths DatasetPaths::from_stem(const std::filesystem::path& stem) {
  auto with = [&](const char* ext) {
    auto p = stem;
    p += ext;
    return p;
  };
  return {with(".manifest"), with(".f32"), with(".labels")};
}

namespace {

std::size_t parse_count(const std::string& src, std::size_t line, const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long x = 0;
  try {
    x = std::stoull(v, &pos);
  } catch (const std::exception&) {
    throw ParseError(src, line, "value for '" + key + "' is not an integer: '" + v + "'");
  }
  if (pos != v.size() || v.front() == '-')
    throw ParseError(src, line, "value for '" + key + "' is not an integer: '" + v + "'");
  return static_cast<std::size_t>(x);
}

}  // namespace

void write_dataset(const std::filesystem::path& stem, std::span<const SensorWindow> windows, std::size_t n_classes) {
  if (windows.empty()) throw ParameterError("write_dataset: no windows");
  const auto paths = DatasetPaths::from_stem(stem);
  const std::size_t C = windows.front().modalities();
  const std::size_t L = windows.front().length();
  for (const auto& w : windows)
    if (w.modalities() != C || w.length() != L) throw ParameterError("write_dataset: windows differ in shape");

  std::ofstream man(paths.manifest, std::ios::trunc);
  if (!man) throw IoError("cannot write " + paths.manifest.string());
  man << "format=moca-dataset-v1\n"
      << "n_windows=" << windows.size() << "\n"
      << "C=" << C << "\n"
      << "L=" << L << "\n"
      << "sample_rate_hz=" << format_double(windows.front().sample_rate_hz) << "\n"
      << "n_classes=" << n_classes << "\n";
  if (!man) throw IoError("write failed: " + paths.manifest.string());

  std::ofstream blob(paths.blob, std::ios::binary | std::ios::trunc);
  if (!blob) throw IoError("cannot write " + paths.blob.string());
  for (const auto& w : windows)
    for (double v : w.values.data()) {
      const auto bits = little_endian(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      blob.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
    }
  if (!blob) throw IoError("write failed: " + paths.blob.string());

  std::ofstream lab(paths.labels, std::ios::trunc);
  if (!lab) throw IoError("cannot write " + paths.labels.string());
  for (const auto& w : windows) lab << (w.label ? *w.label : -1) << "\n";
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  const std::string src = path.string();
  DatasetManifest m;
  bool seen_n = false, seen_c = false, seen_l = false, seen_k = false;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(src, lineno, "expected key=value");
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (val.empty()) throw ParseError(src, lineno, "empty value for '" + key + "'");
    if (key == "format") {
      if (val != "moca-dataset-v1") throw ParseError(src, lineno, "unsupported format '" + val + "'");
    } else if (key == "n_windows") {
      m.n_windows = parse_count(src, lineno, key, val);
      seen_n = true;
    } else if (key == "C") {
      m.modalities = parse_count(src, lineno, key, val);
      seen_c = true;
    } else if (key == "L") {
      m.length = parse_count(src, lineno, key, val);
      seen_l = true;
    } else if (key == "n_classes") {
      m.n_classes = parse_count(src, lineno, key, val);
      seen_k = true;
    } else if (key == "sample_rate_hz") {
      try {
        std::size_t pos = 0;
        m.sample_rate_hz = std::stod(val, &pos);
        if (pos != val.size() || !(m.sample_rate_hz > 0)) throw std::invalid_argument("bad");
      } catch (const std::exception&) {
        throw ParseError(src, lineno, "sample_rate_hz must be a positive number: '" + val + "'");
      }
    } else {
      throw ParseError(src, lineno, "unknown key '" + key + "'");
    }
  }
  if (!(seen_n && seen_c && seen_l && seen_k)) throw ParseError(src, lineno, "manifest is missing required keys");
  if (m.n_windows == 0 || m.modalities < 2 || m.length < 2)
    throw ParseError(src, lineno, "manifest describes an empty or degenerate dataset");
  return m;
}

std::vector<SensorWindow> read_dataset(const std::filesystem::path& stem, bool require_labels) {
  const auto paths = DatasetPaths::from_stem(stem);
  const auto m = read_manifest(paths.manifest);
  const std::size_t per_window = m.modalities * m.length;
  const std::size_t expected = m.n_windows * per_window * sizeof(float);

  std::error_code ec;
  const auto actual = std::filesystem::file_size(paths.blob, ec);
  if (ec) throw IoError("cannot stat " + paths.blob.string());
  if (actual != expected)
    throw IoError(paths.blob.string() + ": expected " + std::to_string(expected) + " bytes, found " +
                  std::to_string(actual));

  std::ifstream blob(paths.blob, std::ios::binary);
  if (!blob) throw IoError("cannot open " + paths.blob.string());
  std::vector<SensorWindow> out;
  out.reserve(m.n_windows);
  for (std::size_t i = 0; i < m.n_windows; ++i) {
    SensorWindow w{Matrix(m.modalities, m.length), m.sample_rate_hz, std::nullopt};
    for (double& v : w.values.data()) {
      std::uint32_t bits = 0;
      blob.read(reinterpret_cast<char*>(&bits), sizeof(bits));
      v = static_cast<double>(std::bit_cast<float>(little_endian(bits)));
    }
    if (!blob) throw IoError("short read from " + paths.blob.string());
    out.push_back(std::move(w));
  }

  std::ifstream lab(paths.labels);
  if (!lab) {
    if (require_labels) throw IoError("label file missing: " + paths.labels.string());
    return out;
  }
  std::string line;
  std::size_t lineno = 0;
  for (auto& w : out) {
    if (!std::getline(lab, line)) throw ParseError(paths.labels.string(), lineno + 1, "fewer labels than windows");
    ++lineno;
    try {
      std::size_t pos = 0;
      const int v = std::stoi(line, &pos);
      if (pos != line.size()) throw std::invalid_argument("trailing");
      if (v >= 0) {
        if (m.n_classes > 0 && static_cast<std::size_t>(v) >= m.n_classes)
          throw ParseError(paths.labels.string(), lineno, "label out of range: " + line);
        w.label = v;
      }
    } catch (const ParseError&) {
      throw;
    } catch (const std::exception&) {
      throw ParseError(paths.labels.string(), lineno, "label is not an integer: '" + line + "'");
    }
  }
  return out;
}

}  // namespace moca
