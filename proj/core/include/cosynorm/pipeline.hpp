#pragma once

// Training, conversion and evaluation on top of the model modules.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cosynorm/config.hpp"
#include "cosynorm/datagen.hpp"
#include "cosynorm/decoder.hpp"
#include "cosynorm/duration.hpp"
#include "cosynorm/encoder.hpp"
#include "cosynorm/flow.hpp"

namespace cosynorm {

enum class Ablation { kNone, kCtc, kSpeaker, kPosScale };

std::string_view ablation_name(Ablation a);
/// "none" | "ctc" | "speaker" | "posscale"
Ablation parse_ablation(std::string_view name);
/// ctc: lambda_ctc = 0; speaker: null speaker everywhere; posscale: integer content positions.
void apply_ablation(AppConfig& config, Ablation ablation);

/// One manifest row with its files loaded.
struct Utterance {
  std::string utt_id;
  std::string speaker_id;
  std::string accent_id;
  std::string split;
  LabelSeq labels;
  FeatureSeq source;
  FeatureSeq target;
  std::vector<float> signature;  // ground-truth speaker embedding

  double true_ratio() const {
    return static_cast<double>(target.rows()) / static_cast<double>(source.rows());
  }
};

struct Dataset {
  ToyWorld world;
  std::vector<Utterance> rows;

  std::vector<const Utterance*> split(std::string_view name) const;
};

/// Reads manifest.jsonl, world.json and every referenced file under `dir`.
Dataset load_dataset(const std::filesystem::path& dir);

/// Encoder + decoder + duration predictor, plus a separate recognizer
/// ("judge") that is trained on native targets only and scores WER.
class CosyModel {
 public:
  static constexpr std::string_view kJudgePrefix = "judge.";

  CosyModel(const ModelConfig& config, std::uint64_t seed);
  CosyModel(const CosyModel&) = delete;
  CosyModel& operator=(const CosyModel&) = delete;

  const ModelConfig& config() const { return config_; }

  Tensor<float> encode(const FeatureSeq& source) const;
  LabelSeq recognize(const FeatureSeq& features) const;

  ParameterStore<float> store;

 private:
  ModelConfig config_;

 public:
  Encoder<float> encoder;
  Decoder<float> decoder;
  DurationPredictor<float> duration;
  Encoder<float> judge;
};

struct LossParts {
  double cfm = 0.0;
  double ctc = 0.0;
  double dur = 0.0;
  double judge = 0.0;
  double total = 0.0;  // cfm + lambda_ctc ctc + lambda_dur dur (judge excluded)
  std::size_t ctc_skipped = 0;
};

/// Adds d(batch mean loss)/d(params) to the parameter gradients. Terms with a
/// zero weight are not built at all, so their parameters receive exactly zero.
/// Throws std::runtime_error on a non-finite loss.
LossParts accumulate_gradients(CosyModel& model, const TrainConfig& config,
                               std::span<const Utterance* const> batch, std::uint64_t step);

/// Adam or SGD with momentum; the judge and the main model are clipped as
/// separate groups so the judge trains identically under every ablation.
class Optimizer {
 public:
  Optimizer(const TrainConfig& config, ParameterStore<float>& store);
  void step();

 private:
  TrainConfig config_;
  ParameterStore<float>& store_;
  std::vector<std::vector<float>> m_, v_;
  std::size_t t_ = 0;
};

/// Mean decoder CFM loss over val rows with fixed draws and full conditioning.
double validation_cfm_loss(const CosyModel& model, const TrainConfig& config,
                           std::span<const Utterance* const> rows);

struct TrainLogEntry {
  std::size_t step = 0;
  LossParts loss;
  std::optional<double> val_cfm;
};

struct TrainResult {
  std::vector<TrainLogEntry> history;  // one entry per step
  double val_cfm = 0.0;
};

TrainResult train(CosyModel& model, const AppConfig& config, const Dataset& data,
                  const std::function<void(const TrainLogEntry&)>& on_log = {});

/// Checkpoint plus "<path>.json" sidecar with the resolved config, ablation and val loss.
void save_model(const CosyModel& model, const AppConfig& config, Ablation ablation,
                double val_cfm, const std::filesystem::path& path);

struct LoadedModel {
  AppConfig config;
  Ablation ablation = Ablation::kNone;
  double val_cfm = 0.0;
  std::unique_ptr<CosyModel> model;
};

LoadedModel load_model(const std::filesystem::path& path);

enum class DurationMode { kInherit, kPredict, kFixed };

std::string_view duration_mode_name(DurationMode m);
DurationMode parse_duration_mode(std::string_view name);

struct ConvertOptions {
  DurationMode mode = DurationMode::kInherit;
  std::size_t fixed_len = 0;
  GuidanceWeights weights;
  SamplerConfig sampler;
};

struct ConversionResult {
  FeatureSeq features;
  DurationMode mode = DurationMode::kInherit;
  std::size_t source_len = 0;
  std::size_t target_len = 0;
  double ratio = 1.0;            // target_len / source_len actually used
  double predicted_ratio = 1.0;  // duration predictor output, clamped
  std::uint64_t seed = 0;
};

/// Encodes the source, picks the target length from the mode and samples.
ConversionResult convert(const CosyModel& model, const FeatureSeq& source,
                         std::span<const float> speaker, const ConvertOptions& options);

std::string conversion_metadata(const ConversionResult& r);

std::size_t edit_distance(const LabelSeq& ref, const LabelSeq& hyp);
/// Levenshtein distance over |ref|; throws std::invalid_argument on an empty reference.
double wer(const LabelSeq& ref, const LabelSeq& hyp);

double cosine(std::span<const float> a, std::span<const float> b);

struct EvalRow {
  std::string utt_id;
  std::string speaker_id;
  std::size_t ref_len = 0;
  std::size_t source_edits = 0;
  std::size_t target_edits = 0;
  std::size_t converted_edits = 0;
  double speaker_cos = 0.0;
  double predicted_ratio = 0.0;
  double true_ratio = 0.0;
  std::size_t source_len = 0;
  std::size_t target_len = 0;
  std::size_t output_len = 0;
};

/// WERs are corpus level: total edits over total reference symbols.
struct EvalReport {
  std::string split;
  std::string mode;
  double wer = 0.0;
  double source_wer = 0.0;
  double target_wer = 0.0;
  double speaker_cos = 0.0;
  double dur_ratio_mae = 0.0;
  double mean_predicted_ratio = 0.0;
  double mean_true_ratio = 0.0;
  double length_ratio = 0.0;  // mean output_len / target_len
  std::vector<EvalRow> rows;
};

/// Per-row sampler seeds derive from options.sampler.seed and the utt_id.
EvalReport evaluate(const CosyModel& model, const Dataset& data, std::string_view split,
                    const ConvertOptions& options);

void write_report(const EvalReport& report, const std::filesystem::path& path);
std::string summary_table(const EvalReport& report);

}  // namespace cosynorm
