#pragma once

// JSON configuration document with three sections:
//
//   { "data":  { DatagenConfig fields },
//     "model": { "encoder": {...}, "decoder": {...}, "duration": {...} },
//     "train": { TrainConfig fields } }
//
// Every field is optional; unknown keys raise ConfigError. Dimensions shared
// between modules (feature, vocabulary, content and speaker widths) are not
// configurable per module and are derived by resolve().

#include <cstdint>
#include <filesystem>
#include <string>

#include "cosynorm/datagen.hpp"
#include "cosynorm/decoder.hpp"
#include "cosynorm/duration.hpp"
#include "cosynorm/encoder.hpp"

namespace cosynorm {

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  DurationConfig duration;
};

struct TrainConfig {
  double lambda_ctc = 0.5;
  double lambda_dur = 0.1;
  std::string optimizer = "adam";  // "adam" | "sgd"
  double learning_rate = 2e-3;
  double momentum = 0.9;           // sgd momentum, adam beta1
  double beta2 = 0.999;
  double grad_clip = 1.0;          // global-norm clip per parameter group, 0 disables
  std::size_t n_steps = 3000;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  double p_uncond = 0.1;
  double p_content_drop = 0.1;
  std::size_t log_every = 100;
  std::size_t val_every = 0;       // 0: validate only at the end
  std::size_t val_draws = 4;       // fixed (noise, t) draws per validation row
  bool train_judge = true;

  void validate() const;
};

struct AppConfig {
  DatagenConfig data;
  ModelConfig model;
  TrainConfig train;

  /// Copies shared dimensions from data/encoder into the dependent configs
  /// and validates everything.
  void resolve();
};

AppConfig parse_config(const std::string& json_text);
AppConfig load_config(const std::filesystem::path& path);
/// Canonical JSON of every configurable field; parse_config(dump_config(c)) == c.
std::string dump_config(const AppConfig& config);

DatagenConfig parse_datagen_config(const std::string& json_text);
std::string dump_datagen_config(const DatagenConfig& config);

}  // namespace cosynorm
