#include "cosynorm/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "cosynorm/config.hpp"
#include "cosynorm/io.hpp"

namespace cosynorm {

using json = nlohmann::ordered_json;

namespace {

using Vec = std::vector<float>;

double dot(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

/// Gram-Schmidt on Gaussian columns: a random orthonormal basis of R^dim.
std::vector<Vec> random_orthonormal(std::size_t dim, Rng& rng) {
  std::vector<std::vector<double>> cols;
  while (cols.size() < dim) {
    std::vector<double> v(dim);
    for (auto& x : v) x = rng.normal();
    for (const auto& c : cols) {
      double p = 0.0;
      for (std::size_t i = 0; i < dim; ++i) p += v[i] * c[i];
      for (std::size_t i = 0; i < dim; ++i) v[i] -= p * c[i];
    }
    double n = 0.0;
    for (const double x : v) n += x * x;
    n = std::sqrt(n);
    if (n < 1e-6) continue;
    for (auto& x : v) x /= n;
    cols.push_back(std::move(v));
  }
  std::vector<Vec> out;
  for (const auto& c : cols) out.emplace_back(c.begin(), c.end());
  return out;
}

Vec unit_vector(std::size_t dim, Rng& rng) {
  Vec v(dim);
  double n = 0.0;
  do {
    n = 0.0;
    for (auto& x : v) {
      x = static_cast<float>(rng.normal());
      n += static_cast<double>(x) * x;
    }
  } while (n < 1e-8);
  n = std::sqrt(n);
  for (auto& x : v) x = static_cast<float>(x / n);
  return v;
}

/// basis (columns) * coeffs
Vec combine(const std::vector<Vec>& basis, std::span<const float> coeffs, std::size_t dim) {
  Vec out(dim, 0.0f);
  for (std::size_t k = 0; k < basis.size(); ++k)
    for (std::size_t i = 0; i < dim; ++i) out[i] += basis[k][i] * coeffs[k];
  return out;
}

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

std::string pad(std::size_t i, int width) {
  std::string s = std::to_string(i);
  return std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(s.size()))), '0') + s;
}

json vecs_to_json(const std::vector<Vec>& v) { return json(v); }
std::vector<Vec> vecs_from_json(const json& j) { return j.get<std::vector<Vec>>(); }

}  // namespace

void DatagenConfig::validate() const {
  if (n_speakers < 1 || n_l2_speakers < 1) throw ConfigError("datagen: need at least one speaker of each kind");
  if (vocab_size < 2) throw ConfigError("datagen: vocab_size must be >= 2");
  if (speaker_dim + accent_dim >= feature_dim) {
    throw ConfigError("datagen: feature_dim must exceed speaker_dim + accent_dim");
  }
  if (min_label_len < 1 || max_label_len < min_label_len) throw ConfigError("datagen: bad label lengths");
  if (min_symbol_frames < 1 || max_symbol_frames < min_symbol_frames) {
    throw ConfigError("datagen: bad symbol frame range");
  }
  if (!(stretch > 0.0)) throw ConfigError("datagen: stretch must be positive");
  if (jitter < 0.0 || jitter > 0.2) throw ConfigError("datagen: jitter must lie in [0, 0.2]");
  if (vocab_size > 2 && substitutions_per_accent > vocab_size - 1) {
    throw ConfigError("datagen: more substitutions than symbols");
  }
  if (n_sentences <= n_val + n_test) throw ConfigError("datagen: too few sentences for the split");
  if (min_prompt_intensity < 0.0 || max_prompt_intensity < min_prompt_intensity) {
    throw ConfigError("datagen: bad prompt intensity range");
  }
}

AccentRule AccentRule::scaled(double intensity) const {
  AccentRule r = *this;
  for (auto& [sym, vec] : r.substitution_map)
    for (auto& v : vec) v = static_cast<float>(v * intensity);
  return r;
}

FeatureSeq accentify(const NativeUtterance& native, const LabelSeq& labels, const AccentRule& rule,
                     Rng& rng) {
  const FeatureSeq& in = native.features;
  const std::size_t frames = in.rows(), dim = in.cols();
  if (native.durations.size() != labels.size()) {
    throw ConfigError("accentify: one duration per label required");
  }
  if (!(rule.stretch > 0.0)) throw ConfigError("accentify: stretch must be positive");

  FeatureSeq perturbed = in;
  std::size_t frame = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto it = rule.substitution_map.find(labels[i]);
    for (std::size_t k = 0; k < native.durations[i]; ++k, ++frame) {
      if (it == rule.substitution_map.end()) continue;
      for (std::size_t c = 0; c < dim; ++c) perturbed(frame, c) += it->second[c];
    }
  }

  const double u = rng.uniform(-1.0, 1.0);
  const double factor = rule.stretch * (1.0 + rule.jitter * u);
  const auto out_len = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(factor * static_cast<double>(frames))));
  FeatureSeq out(out_len, dim);
  for (std::size_t j = 0; j < out_len; ++j) {
    const double pos = out_len == 1 ? 0.0
                                    : static_cast<double>(j) * static_cast<double>(frames - 1) /
                                          static_cast<double>(out_len - 1);
    const auto lo = std::min(static_cast<std::size_t>(pos), frames - 1);
    const double frac = pos - static_cast<double>(lo);
    for (std::size_t c = 0; c < dim; ++c) {
      if (frac == 0.0 || lo + 1 >= frames) {
        out(j, c) = perturbed(lo, c);
      } else {
        out(j, c) = static_cast<float>((1.0 - frac) * perturbed(lo, c) + frac * perturbed(lo + 1, c));
      }
    }
  }
  return out;
}

ToyWorld ToyWorld::create(const DatagenConfig& config, std::uint64_t seed) {
  config.validate();
  ToyWorld w;
  w.config_ = config;
  const std::size_t dim = config.feature_dim;
  const std::size_t content_dim = dim - config.accent_dim - config.speaker_dim;

  Rng basis_rng = Rng::for_id(seed, "world.basis");
  auto basis = random_orthonormal(dim, basis_rng);
  w.content_basis_.assign(basis.begin(), basis.begin() + static_cast<long>(content_dim));
  w.accent_basis_.assign(basis.begin() + static_cast<long>(content_dim),
                         basis.begin() + static_cast<long>(content_dim + config.accent_dim));
  w.timbre_basis_.assign(basis.begin() + static_cast<long>(content_dim + config.accent_dim), basis.end());

  Rng sym_rng = Rng::for_id(seed, "world.symbols");
  w.symbol_bases_.assign(config.vocab_size, Vec(dim, 0.0f));
  for (std::size_t s = 1; s < config.vocab_size; ++s) {
    Vec coeffs(content_dim);
    for (auto& c : coeffs) c = static_cast<float>(sym_rng.normal() * config.symbol_scale);
    w.symbol_bases_[s] = combine(w.content_basis_, coeffs, dim);
  }

  for (std::size_t i = 0; i < config.n_speakers; ++i) {
    const std::string id = "spk" + pad(i, 2);
    Rng r = Rng::for_id(seed, "speaker." + id);
    w.speakers_.push_back({id, unit_vector(config.speaker_dim, r)});
  }
  for (std::size_t i = 0; i < config.n_l2_speakers; ++i) {
    const std::string id = "l2spk" + pad(i, 2);
    Rng r = Rng::for_id(seed, "speaker." + id);
    w.l2_speakers_.push_back({id, unit_vector(config.speaker_dim, r)});

    AccentRule rule;
    rule.accent_id = "acc" + pad(i, 2);
    rule.stretch = config.stretch;
    rule.jitter = config.jitter;
    Rng ar = Rng::for_id(seed, "accent." + rule.accent_id);
    std::vector<int> symbols(config.vocab_size - 1);
    std::iota(symbols.begin(), symbols.end(), 1);
    shuffle(symbols, ar);
    for (std::size_t k = 0; k < config.substitutions_per_accent && k < symbols.size(); ++k) {
      const int from = symbols[k];
      int to = from;
      while (to == from) to = 1 + static_cast<int>(ar.below(config.vocab_size - 1));
      const Vec colour_coeffs = unit_vector(config.accent_dim, ar);
      const Vec colour = combine(w.accent_basis_, colour_coeffs, dim);
      Vec delta(dim);
      for (std::size_t c = 0; c < dim; ++c) {
        delta[c] = static_cast<float>(
            config.substitution_strength *
                (w.symbol_bases_[static_cast<std::size_t>(to)][c] -
                 w.symbol_bases_[static_cast<std::size_t>(from)][c]) +
            config.accent_colour * colour[c]);
      }
      rule.substitution_map[from] = std::move(delta);
    }
    w.accents_.push_back(std::move(rule));
  }
  return w;
}

const ToySpeaker& ToyWorld::speaker(const std::string& id) const {
  for (const auto& s : speakers_)
    if (s.speaker_id == id) return s;
  for (const auto& s : l2_speakers_)
    if (s.speaker_id == id) return s;
  throw ConfigError("unknown speaker " + id);
}

std::span<const float> ToyWorld::symbol_base(int symbol) const {
  if (symbol <= 0 || static_cast<std::size_t>(symbol) >= symbol_bases_.size()) {
    throw ConfigError("symbol " + std::to_string(symbol) + " outside the vocabulary");
  }
  return symbol_bases_[static_cast<std::size_t>(symbol)];
}

NativeUtterance ToyWorld::synth_native(const ToySpeaker& speaker, const LabelSeq& labels,
                                       Rng& rng) const {
  if (labels.empty()) throw ConfigError("synth_native: empty label sequence");
  if (speaker.signature.size() != config_.speaker_dim) throw ConfigError("synth_native: bad signature");
  const std::size_t dim = config_.feature_dim;
  Vec offset = combine(timbre_basis_, speaker.signature, dim);
  for (auto& v : offset) v = static_cast<float>(v * config_.timbre_gain);

  NativeUtterance u;
  const std::size_t span = config_.max_symbol_frames - config_.min_symbol_frames + 1;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    u.durations.push_back(config_.min_symbol_frames + rng.below(span));
  }
  const std::size_t frames = std::accumulate(u.durations.begin(), u.durations.end(), std::size_t{0});
  u.features = FeatureSeq(frames, dim);
  std::size_t f = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto base = symbol_base(labels[i]);
    for (std::size_t k = 0; k < u.durations[i]; ++k, ++f) {
      for (std::size_t c = 0; c < dim; ++c) {
        u.features(f, c) =
            base[c] + offset[c] + static_cast<float>(config_.noise_std * rng.normal());
      }
    }
  }
  return u;
}

double ToyWorld::estimated_stretch(const FeatureSeq& features) const {
  // Count stable runs in the content subspace; each native symbol is one run
  // of min..max frames, so frames per run over the native mean estimates the stretch.
  double min_dist = std::numeric_limits<double>::infinity();
  for (std::size_t a = 1; a < symbol_bases_.size(); ++a) {
    for (std::size_t b = a + 1; b < symbol_bases_.size(); ++b) {
      double d = 0.0;
      for (std::size_t c = 0; c < config_.feature_dim; ++c) {
        const double x = symbol_bases_[a][c] - symbol_bases_[b][c];
        d += x * x;
      }
      min_dist = std::min(min_dist, std::sqrt(d));
    }
  }
  const double noise_jump = 2.0 * config_.noise_std *
                            std::sqrt(2.0 * static_cast<double>(content_basis_.size()));
  const double threshold = std::isfinite(min_dist) ? std::max(0.4 * min_dist, noise_jump) : noise_jump;

  const std::size_t frames = features.rows();
  std::vector<std::vector<double>> proj(frames, std::vector<double>(content_basis_.size()));
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t k = 0; k < content_basis_.size(); ++k)
      proj[t][k] = dot(features.row(t), content_basis_[k]);

  std::size_t runs = 0, run_len = 1;
  for (std::size_t t = 1; t <= frames; ++t) {
    bool jump = t == frames;
    if (!jump) {
      double d = 0.0;
      for (std::size_t k = 0; k < proj[t].size(); ++k) {
        const double x = proj[t][k] - proj[t - 1][k];
        d += x * x;
      }
      jump = std::sqrt(d) > threshold;
    }
    if (jump) {
      if (run_len >= 2) ++runs;
      run_len = 1;
    } else {
      ++run_len;
    }
  }
  const double native_mean =
      0.5 * static_cast<double>(config_.min_symbol_frames + config_.max_symbol_frames);
  return static_cast<double>(frames) / (static_cast<double>(std::max<std::size_t>(runs, 1)) * native_mean);
}

double ToyWorld::accent_score(const FeatureSeq& features, std::span<const AccentRule> rules) const {
  if (rules.empty()) throw ConfigError("accent_score: at least one rule required");
  if (features.cols() != config_.feature_dim || features.rows() == 0) {
    throw ConfigError("accent_score: features have the wrong shape");
  }
  struct Direction {
    Vec unit;
    double magnitude;
  };
  std::vector<Direction> dirs;
  for (const auto& rule : rules) {
    for (const auto& [sym, delta] : rule.substitution_map) {
      Vec coeffs(accent_basis_.size());
      double n = 0.0;
      for (std::size_t k = 0; k < accent_basis_.size(); ++k) {
        coeffs[k] = static_cast<float>(dot(delta, accent_basis_[k]));
        n += static_cast<double>(coeffs[k]) * coeffs[k];
      }
      n = std::sqrt(n);
      if (n < 1e-9) continue;
      for (auto& c : coeffs) c = static_cast<float>(c / n);
      dirs.push_back({std::move(coeffs), n});
    }
  }

  // Per-frame accent intensity: projection on the best-matching colour
  // direction, soft-thresholded three noise deviations above zero.
  const double floor = 3.0 * config_.noise_std;
  double energy = 0.0;
  Vec a(accent_basis_.size());
  for (std::size_t t = 0; t < features.rows(); ++t) {
    for (std::size_t k = 0; k < accent_basis_.size(); ++k)
      a[k] = static_cast<float>(dot(features.row(t), accent_basis_[k]));
    double best = 0.0;
    for (const auto& d : dirs) best = std::max(best, std::max(0.0, dot(a, d.unit) - floor) / d.magnitude);
    energy += best;
  }
  energy /= static_cast<double>(features.rows());

  constexpr double kFullEnergy = 0.25;     // ~1/3 of frames substituted at full intensity
  constexpr double kFullDeviation = 0.3;   // stretch 1.3
  const double e = std::min(1.0, energy / kFullEnergy);
  const double s = std::min(1.0, std::abs(estimated_stretch(features) - 1.0) / kFullDeviation);
  const double raw = 0.7 * e + 0.3 * s;
  return 1.0 / (1.0 + std::exp(-10.0 * (raw - 0.45)));
}

std::vector<float> ToyWorld::extract_signature(const FeatureSeq& features) const {
  if (features.cols() != config_.feature_dim || features.rows() == 0) {
    throw ConfigError("extract_signature: features have the wrong shape");
  }
  Vec mean(config_.feature_dim, 0.0f);
  for (std::size_t t = 0; t < features.rows(); ++t)
    for (std::size_t c = 0; c < features.cols(); ++c) mean[c] += features(t, c);
  for (auto& m : mean) m /= static_cast<float>(features.rows());
  // Orthonormal columns: the least-squares coefficients are plain projections.
  Vec sig(timbre_basis_.size());
  for (std::size_t k = 0; k < timbre_basis_.size(); ++k)
    sig[k] = static_cast<float>(dot(mean, timbre_basis_[k]) / config_.timbre_gain);
  return sig;
}

std::string ToyWorld::to_json() const {
  json j;
  j["config"] = json::parse(dump_datagen_config(config_));
  j["content_basis"] = vecs_to_json(content_basis_);
  j["accent_basis"] = vecs_to_json(accent_basis_);
  j["timbre_basis"] = vecs_to_json(timbre_basis_);
  j["symbol_bases"] = vecs_to_json(symbol_bases_);
  auto speakers_json = [](const std::vector<ToySpeaker>& v) {
    json arr = json::array();
    for (const auto& s : v) arr.push_back({{"speaker_id", s.speaker_id}, {"signature", s.signature}});
    return arr;
  };
  j["speakers"] = speakers_json(speakers_);
  j["l2_speakers"] = speakers_json(l2_speakers_);
  json acc = json::array();
  for (const auto& r : accents_) {
    json subs = json::array();
    for (const auto& [sym, vec] : r.substitution_map) subs.push_back({{"symbol", sym}, {"delta", vec}});
    acc.push_back({{"accent_id", r.accent_id}, {"stretch", r.stretch}, {"jitter", r.jitter},
                   {"substitutions", subs}});
  }
  j["accents"] = acc;
  return j.dump(1) + "\n";
}

ToyWorld ToyWorld::from_json(const std::string& text) {
  const json j = json::parse(text);
  ToyWorld w;
  w.config_ = parse_datagen_config(j.at("config").dump());
  w.content_basis_ = vecs_from_json(j.at("content_basis"));
  w.accent_basis_ = vecs_from_json(j.at("accent_basis"));
  w.timbre_basis_ = vecs_from_json(j.at("timbre_basis"));
  w.symbol_bases_ = vecs_from_json(j.at("symbol_bases"));
  auto read_speakers = [](const json& arr) {
    std::vector<ToySpeaker> v;
    for (const auto& s : arr) v.push_back({s.at("speaker_id").get<std::string>(), s.at("signature").get<Vec>()});
    return v;
  };
  w.speakers_ = read_speakers(j.at("speakers"));
  w.l2_speakers_ = read_speakers(j.at("l2_speakers"));
  for (const auto& a : j.at("accents")) {
    AccentRule r;
    r.accent_id = a.at("accent_id").get<std::string>();
    r.stretch = a.at("stretch").get<double>();
    r.jitter = a.at("jitter").get<double>();
    for (const auto& s : a.at("substitutions")) r.substitution_map[s.at("symbol").get<int>()] = s.at("delta").get<Vec>();
    w.accents_.push_back(std::move(r));
  }
  return w;
}

ToyWorld ToyWorld::load(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  try {
    return from_json(std::string(bytes.begin(), bytes.end()));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

SplitPartition split_subsets(const std::vector<std::string>& sentence_ids, std::size_t n_val,
                             std::size_t n_test, Rng& rng) {
  if (sentence_ids.size() <= n_val + n_test) {
    throw ConfigError("split_subsets: " + std::to_string(sentence_ids.size()) +
                      " sentences cannot cover " + std::to_string(n_val) + " val + " +
                      std::to_string(n_test) + " test plus training");
  }
  std::vector<std::string> ids = sentence_ids;
  shuffle(ids, rng);
  SplitPartition p;
  p.val.assign(ids.begin(), ids.begin() + static_cast<long>(n_val));
  p.test.assign(ids.begin() + static_cast<long>(n_val), ids.begin() + static_cast<long>(n_val + n_test));
  p.train.assign(ids.begin() + static_cast<long>(n_val + n_test), ids.end());
  std::sort(p.train.begin(), p.train.end());
  std::sort(p.val.begin(), p.val.end());
  std::sort(p.test.begin(), p.test.end());
  return p;
}

std::vector<PromptEntry> filter_prompts(const std::vector<PromptEntry>& entries, double threshold,
                                        std::size_t min_per_speaker) {
  if (entries.empty()) throw std::invalid_argument("filter_prompts: no entries");
  std::map<std::string, std::vector<const PromptEntry*>> by_speaker;
  for (const auto& e : entries) by_speaker[e.speaker_id].push_back(&e);

  std::vector<PromptEntry> kept;
  for (auto& [spk, list] : by_speaker) {
    std::sort(list.begin(), list.end(), [](const PromptEntry* a, const PromptEntry* b) {
      if (a->accent_score != b->accent_score) return a->accent_score > b->accent_score;
      return a->utt_id < b->utt_id;
    });
    const std::size_t floor = std::min(min_per_speaker, list.size());
    for (std::size_t i = 0; i < list.size(); ++i) {
      if (list[i]->accent_score > threshold || i < floor) kept.push_back(*list[i]);
    }
  }
  std::sort(kept.begin(), kept.end(),
            [](const PromptEntry& a, const PromptEntry& b) { return a.utt_id < b.utt_id; });
  return kept;
}

std::vector<std::pair<std::string, std::string>> pair_and_balance(
    const std::vector<std::string>& l1_items, const std::vector<PromptEntry>& prompts, Rng& rng) {
  if (l1_items.empty() || prompts.empty()) throw std::invalid_argument("pair_and_balance: empty input");
  std::map<std::string, std::vector<const PromptEntry*>> by_speaker;
  for (const auto& p : prompts) by_speaker[p.speaker_id].push_back(&p);
  std::vector<std::string> speakers;
  for (const auto& [spk, list] : by_speaker) speakers.push_back(spk);
  shuffle(speakers, rng);

  std::vector<std::string> order = l1_items;
  shuffle(order, rng);
  std::vector<std::pair<std::string, std::string>> out;
  out.reserve(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto& pool = by_speaker[speakers[i % speakers.size()]];
    out.emplace_back(order[i], pool[rng.below(pool.size())]->utt_id);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::string manifest_line(const ManifestEntry& e) {
  json j;
  j["utt_id"] = e.utt_id;
  j["speaker_id"] = e.speaker_id;
  j["accent_id"] = e.accent_id;
  j["label_file"] = e.label_file;
  j["source_feature_file"] = e.source_feature_file;
  j["target_feature_file"] = e.target_feature_file;
  j["split"] = e.split;
  j["accent_score"] = e.accent_score;
  return j.dump();
}

ManifestEntry parse_manifest_line(const std::string& line) {
  const json j = json::parse(line);
  ManifestEntry e;
  e.utt_id = j.at("utt_id").get<std::string>();
  e.speaker_id = j.at("speaker_id").get<std::string>();
  e.accent_id = j.at("accent_id").get<std::string>();
  e.label_file = j.at("label_file").get<std::string>();
  e.source_feature_file = j.at("source_feature_file").get<std::string>();
  e.target_feature_file = j.at("target_feature_file").get<std::string>();
  e.split = j.at("split").get<std::string>();
  e.accent_score = j.at("accent_score").get<double>();
  return e;
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  std::vector<ManifestEntry> rows;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      rows.push_back(parse_manifest_line(line));
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return rows;
}

void write_manifest(const std::vector<ManifestEntry>& rows, const std::filesystem::path& path) {
  std::vector<ManifestEntry> sorted = rows;
  std::sort(sorted.begin(), sorted.end(),
            [](const ManifestEntry& a, const ManifestEntry& b) { return a.utt_id < b.utt_id; });
  std::string text;
  for (const auto& r : sorted) text += manifest_line(r) + "\n";
  write_bytes(std::vector<unsigned char>(text.begin(), text.end()), path);
}

DatasetSummary build_dataset(const DatagenConfig& config, std::uint64_t seed,
                             const std::filesystem::path& out_dir) {
  const ToyWorld world = ToyWorld::create(config, seed);
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "feats");
  fs::create_directories(out_dir / "labels");

  // Sentences: label sequences without immediate repeats.
  std::vector<std::string> sentence_ids;
  std::map<std::string, LabelSeq> sentences;
  for (std::size_t i = 0; i < config.n_sentences; ++i) {
    const std::string id = "sent" + pad(i, 3);
    Rng r = Rng::for_id(seed, "sentence." + id);
    const std::size_t len =
        config.min_label_len + r.below(config.max_label_len - config.min_label_len + 1);
    LabelSeq labels;
    while (labels.size() < len) {
      const int sym = 1 + static_cast<int>(r.below(config.vocab_size - 1));
      if (!labels.empty() && labels.back() == sym && config.vocab_size > 2) continue;
      labels.push_back(sym);
    }
    sentence_ids.push_back(id);
    sentences[id] = std::move(labels);
  }

  // 1. Subset split at sentence level.
  Rng split_rng = Rng::for_id(seed, "split");
  const SplitPartition part = split_subsets(sentence_ids, config.n_val, config.n_test, split_rng);
  std::map<std::string, std::string> split_of;
  for (const auto& s : part.train) split_of[s] = "train";
  for (const auto& s : part.val) split_of[s] = "val";
  for (const auto& s : part.test) split_of[s] = "test";

  // 2. Accentedness scoring of L2 prompts, then filtering.
  std::vector<PromptEntry> prompts;
  for (std::size_t k = 0; k < world.l2_speakers().size(); ++k) {
    const auto& spk = world.l2_speakers()[k];
    const auto& rule = world.accents()[k];
    for (const auto& sid : sentence_ids) {
      PromptEntry p;
      p.utt_id = spk.speaker_id + "_" + sid;
      p.speaker_id = spk.speaker_id;
      p.accent_id = rule.accent_id;
      p.sentence_id = sid;
      p.split = split_of[sid];
      Rng r = Rng::for_id(seed, "prompt." + p.utt_id);
      p.intensity = r.uniform(config.min_prompt_intensity, config.max_prompt_intensity);
      const LabelSeq& labels = sentences[sid];
      Rng synth = r.split(1), stretch = r.split(2);
      const NativeUtterance base = world.synth_native(spk, labels, synth);
      const FeatureSeq accented = accentify(base, labels, rule.scaled(p.intensity), stretch);
      p.accent_score = world.accent_score(accented, world.accents());
      prompts.push_back(std::move(p));
    }
  }
  const std::vector<PromptEntry> retained =
      filter_prompts(prompts, config.accent_threshold, config.min_per_speaker);

  // 3. Pairing, per split so prompts never cross the sentence partition.
  std::map<std::string, const PromptEntry*> prompt_by_id;
  for (const auto& p : retained) prompt_by_id[p.utt_id] = &p;
  std::map<std::string, std::string> assignment;
  for (const std::string split : {"train", "val", "test"}) {
    std::vector<std::string> l1_items;
    for (const auto& spk : world.speakers())
      for (const auto& sid : sentence_ids)
        if (split_of[sid] == split) l1_items.push_back(spk.speaker_id + "_" + sid);
    std::vector<PromptEntry> pool;
    for (const auto& p : retained)
      if (p.split == split) pool.push_back(p);
    if (pool.empty()) pool = retained;  // tiny configs: fall back to all retained prompts
    Rng pair_rng = Rng::for_id(seed, "pair." + split);
    for (auto& [item, prompt] : pair_and_balance(l1_items, pool, pair_rng)) assignment[item] = prompt;
  }

  // 4. Synthesis: native target, accented source from the assigned prompt.
  std::vector<ManifestEntry> rows;
  std::map<std::string, std::size_t> prompt_usage;
  double ratio_sum = 0.0;
  for (const auto& spk : world.speakers()) {
    for (const auto& sid : sentence_ids) {
      ManifestEntry e;
      e.utt_id = spk.speaker_id + "_" + sid;
      e.speaker_id = spk.speaker_id;
      e.split = split_of[sid];
      const PromptEntry& prompt = *prompt_by_id.at(assignment.at(e.utt_id));
      ++prompt_usage[prompt.utt_id];
      e.accent_id = prompt.accent_id;
      const AccentRule* rule = nullptr;
      for (const auto& r : world.accents())
        if (r.accent_id == prompt.accent_id) rule = &r;

      const LabelSeq& labels = sentences[sid];
      Rng r = Rng::for_id(seed, "utt." + e.utt_id);
      Rng synth = r.split(1), stretch = r.split(2);
      const NativeUtterance native = world.synth_native(spk, labels, synth);
      const FeatureSeq source = accentify(native, labels, rule->scaled(prompt.intensity), stretch);
      e.accent_score = world.accent_score(source, world.accents());
      e.label_file = "labels/" + e.utt_id + ".lab";
      e.source_feature_file = "feats/" + e.utt_id + ".src.bin";
      e.target_feature_file = "feats/" + e.utt_id + ".tgt.bin";
      write_labels(labels, out_dir / e.label_file);
      write_features(source, out_dir / e.source_feature_file);
      write_features(native.features, out_dir / e.target_feature_file);
      ratio_sum += static_cast<double>(source.rows()) / static_cast<double>(native.features.rows());
      rows.push_back(std::move(e));
    }
  }
  write_manifest(rows, out_dir / kManifestFile);

  std::string prompt_text;
  for (const auto& p : prompts) {
    json j;
    j["utt_id"] = p.utt_id;
    j["speaker_id"] = p.speaker_id;
    j["accent_id"] = p.accent_id;
    j["sentence_id"] = p.sentence_id;
    j["split"] = p.split;
    j["intensity"] = p.intensity;
    j["accent_score"] = p.accent_score;
    j["retained"] = prompt_by_id.contains(p.utt_id);
    j["uses"] = prompt_usage.contains(p.utt_id) ? prompt_usage[p.utt_id] : 0;
    prompt_text += j.dump() + "\n";
  }
  write_bytes(std::vector<unsigned char>(prompt_text.begin(), prompt_text.end()), out_dir / kPromptsFile);
  const std::string world_text = world.to_json();
  write_bytes(std::vector<unsigned char>(world_text.begin(), world_text.end()), out_dir / kWorldFile);

  DatasetSummary s;
  s.n_rows = rows.size();
  s.n_prompts = prompts.size();
  s.n_retained_prompts = retained.size();
  s.mean_length_ratio = rows.empty() ? 0.0 : ratio_sum / static_cast<double>(rows.size());
  return s;
}

}  // namespace cosynorm
