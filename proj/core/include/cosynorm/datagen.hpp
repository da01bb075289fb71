#pragma once

// Toy source-synthesis pipeline.
//
// Native targets are rendered from symbol prototypes plus a per-speaker timbre
// offset. Accented sources are derived from those natives by an accent rule
// taken from an L2 prompt speaker, so each source keeps the content and
// timbre of its native target. Prompts are scored for accentedness, filtered,
// and assigned to native utterances with balanced per-speaker usage.
//
// Feature space layout (after a fixed random rotation):
//   content subspace | accent-colour subspace | timbre subspace (speaker_dim)

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cosynorm/ctc.hpp"
#include "cosynorm/rng.hpp"
#include "cosynorm/tensor.hpp"

namespace cosynorm {

struct DatagenConfig {
  std::size_t n_speakers = 8;
  std::size_t n_l2_speakers = 4;
  std::size_t n_sentences = 80;
  std::size_t vocab_size = 13;  // including blank
  std::size_t feature_dim = 20;
  std::size_t speaker_dim = 4;
  std::size_t accent_dim = 4;
  std::size_t min_label_len = 4;
  std::size_t max_label_len = 8;
  std::size_t min_symbol_frames = 3;
  std::size_t max_symbol_frames = 6;
  double symbol_scale = 0.6;
  double timbre_gain = 1.5;
  double noise_std = 0.1;
  double stretch = 1.3;
  double jitter = 0.05;
  std::size_t substitutions_per_accent = 4;
  double substitution_strength = 0.8;
  double accent_colour = 1.0;
  double min_prompt_intensity = 0.1;
  double max_prompt_intensity = 1.2;
  std::size_t n_val = 8;
  std::size_t n_test = 16;
  double accent_threshold = 0.5;
  std::size_t min_per_speaker = 10;

  void validate() const;
};

struct ToySpeaker {
  std::string speaker_id;
  std::vector<float> signature;  // unit norm, speaker_dim entries
};

struct AccentRule {
  std::string accent_id;
  double stretch = 1.3;
  /// symbol -> additive perturbation (feature_dim entries)
  std::map<int, std::vector<float>> substitution_map;
  double jitter = 0.0;

  /// Same rule with every perturbation multiplied by `intensity`.
  AccentRule scaled(double intensity) const;
};

struct NativeUtterance {
  FeatureSeq features;
  std::vector<std::size_t> durations;  // frames per symbol
};

/// Time-stretch by stretch * (1 + jitter * u), u ~ U[-1, 1], using
/// endpoint-aligned linear interpolation, after adding the rule's
/// perturbation to every frame of a mapped symbol. Output length is
/// round(factor * T), at least 1.
FeatureSeq accentify(const NativeUtterance& native, const LabelSeq& labels,
                     const AccentRule& rule, Rng& rng);

/// The generated universe: bases, symbol prototypes, speakers and accents.
class ToyWorld {
 public:
  static ToyWorld create(const DatagenConfig& config, std::uint64_t seed);

  const DatagenConfig& config() const { return config_; }
  const std::vector<ToySpeaker>& speakers() const { return speakers_; }
  const std::vector<ToySpeaker>& l2_speakers() const { return l2_speakers_; }
  /// One rule per L2 speaker, same order.
  const std::vector<AccentRule>& accents() const { return accents_; }
  const ToySpeaker& speaker(const std::string& id) const;
  std::span<const float> symbol_base(int symbol) const;

  /// Each symbol spans a seeded 3..6 frames of prototype + timbre offset + noise.
  NativeUtterance synth_native(const ToySpeaker& speaker, const LabelSeq& labels, Rng& rng) const;

  /// Heuristic accentedness in [0, 1]: accent-colour energy along the rules'
  /// perturbation directions plus the deviation of the estimated time
  /// stretch from 1, squashed by a logistic calibrated so that natives land
  /// below 0.5 and fully accented renderings above.
  double accent_score(const FeatureSeq& features, std::span<const AccentRule> rules) const;

  /// Least-squares projection of the mean frame onto the timbre basis.
  std::vector<float> extract_signature(const FeatureSeq& features) const;

  std::string to_json() const;
  static ToyWorld from_json(const std::string& text);
  static ToyWorld load(const std::filesystem::path& path);

 private:
  double estimated_stretch(const FeatureSeq& features) const;

  DatagenConfig config_;
  // Column-major blocks of an orthonormal feature_dim x feature_dim basis.
  std::vector<std::vector<float>> content_basis_, accent_basis_, timbre_basis_;
  std::vector<std::vector<float>> symbol_bases_;  // vocab_size rows, row 0 unused
  std::vector<ToySpeaker> speakers_;
  std::vector<ToySpeaker> l2_speakers_;
  std::vector<AccentRule> accents_;
};

struct SplitPartition {
  std::vector<std::string> train, val, test;
};

/// Seeded shuffle, then the first n_val ids go to val and the next n_test to test.
SplitPartition split_subsets(const std::vector<std::string>& sentence_ids, std::size_t n_val,
                             std::size_t n_test, Rng& rng);

struct PromptEntry {
  std::string utt_id;
  std::string speaker_id;
  std::string accent_id;
  std::string sentence_id;
  std::string split;
  double intensity = 0.0;
  double accent_score = 0.0;
};

/// Keeps scores above `threshold`, then tops every speaker up to
/// min(min_per_speaker, available) with its best remaining entries. Ties
/// break by ascending utt_id; the result is sorted by utt_id.
std::vector<PromptEntry> filter_prompts(const std::vector<PromptEntry>& entries, double threshold,
                                        std::size_t min_per_speaker);

/// Assigns one prompt to every L1 item; per-L2-speaker usage differs by at most one.
std::vector<std::pair<std::string, std::string>> pair_and_balance(
    const std::vector<std::string>& l1_items, const std::vector<PromptEntry>& prompts, Rng& rng);

struct ManifestEntry {
  std::string utt_id;
  std::string speaker_id;
  std::string accent_id;
  std::string label_file;
  std::string source_feature_file;
  std::string target_feature_file;
  std::string split;
  double accent_score = 0.0;
};

std::string manifest_line(const ManifestEntry& e);
ManifestEntry parse_manifest_line(const std::string& line);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::vector<ManifestEntry>& rows, const std::filesystem::path& path);

struct DatasetSummary {
  std::size_t n_rows = 0;
  std::size_t n_prompts = 0;
  std::size_t n_retained_prompts = 0;
  double mean_length_ratio = 0.0;  // source / target
};

/// split -> score/filter -> pair -> synthesize. Writes manifest.jsonl,
/// prompts.jsonl, world.json, feats/ and labels/ under `out_dir`.
DatasetSummary build_dataset(const DatagenConfig& config, std::uint64_t seed,
                             const std::filesystem::path& out_dir);

inline constexpr char kManifestFile[] = "manifest.jsonl";
inline constexpr char kWorldFile[] = "world.json";
inline constexpr char kPromptsFile[] = "prompts.jsonl";

}  // namespace cosynorm
