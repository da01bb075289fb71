// Command-line front end: datagen, train, convert, eval, selftest.

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "cosynorm/config.hpp"
#include "cosynorm/datagen.hpp"
#include "cosynorm/io.hpp"
#include "cosynorm/pipeline.hpp"
#include "cosynorm/selftest.hpp"

namespace fs = std::filesystem;
using namespace cosynorm;

namespace {

struct SamplingFlags {
  std::string mode = "inherit";
  std::size_t fixed_len = 0;
  double w1 = 1.0;
  double w2 = 1.0;
  std::size_t steps = 32;
  std::uint64_t seed = 0;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--mode", mode, "Duration mode")
        ->check(CLI::IsMember({"inherit", "predict", "fixed"}))
        ->capture_default_str();
    cmd->add_option("--fixed-len", fixed_len, "Output frames for --mode fixed");
    cmd->add_option("--w1", w1, "Guidance weight against the unconditional branch")->capture_default_str();
    cmd->add_option("--w2", w2, "Guidance weight against the content-dropped branch")->capture_default_str();
    cmd->add_option("--steps", steps, "Euler steps")->capture_default_str();
    cmd->add_option("--seed", seed, "Sampler seed")->capture_default_str();
  }

  ConvertOptions options() const {
    ConvertOptions o;
    o.mode = parse_duration_mode(mode);
    o.fixed_len = fixed_len;
    o.weights = {w1, w2};
    o.sampler = {steps, seed};
    if (o.mode == DurationMode::kFixed && fixed_len < 1) {
      throw ConfigError("--mode fixed needs --fixed-len >= 1");
    }
    if (steps < 1) throw ConfigError("--steps must be >= 1");
    return o;
  }
};

AppConfig config_from(const std::string& path) {
  if (path.empty()) {
    AppConfig c;
    c.resolve();
    return c;
  }
  return load_config(path);
}

int run_datagen(const std::string& config_path, const std::string& out, std::optional<std::uint64_t> seed) {
  const AppConfig cfg = config_from(config_path);
  const DatasetSummary s = build_dataset(cfg.data, seed.value_or(0), out);
  std::printf("wrote %zu rows to %s (%zu prompts scored, %zu retained, mean length ratio %.4f)\n",
              s.n_rows, out.c_str(), s.n_prompts, s.n_retained_prompts, s.mean_length_ratio);
  return 0;
}

int run_train(const std::string& config_path, const std::string& data_dir, const std::string& out,
              std::optional<std::uint64_t> seed, const std::string& ablate,
              std::optional<std::size_t> train_steps) {
  AppConfig cfg = config_from(config_path);
  if (seed) cfg.train.seed = *seed;
  if (train_steps) cfg.train.n_steps = *train_steps;
  const Ablation ablation = ablate.empty() ? Ablation::kNone : parse_ablation(ablate);
  apply_ablation(cfg, ablation);
  cfg.resolve();

  const Dataset data = load_dataset(data_dir);
  CosyModel model(cfg.model, cfg.train.seed);
  std::printf("training %zu parameters for %zu steps (ablation %s)\n", model.store.scalar_count(),
              cfg.train.n_steps, std::string(ablation_name(ablation)).c_str());
  const auto start = std::chrono::steady_clock::now();
  const TrainResult result = train(model, cfg, data, [&](const TrainLogEntry& e) {
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("step %6zu  cfm %.4f  ctc %.4f  dur %.4f  judge %.4f", e.step, e.loss.cfm,
                e.loss.ctc, e.loss.dur, e.loss.judge);
    if (e.val_cfm) std::printf("  val_cfm %.4f", *e.val_cfm);
    std::printf("  (%.1fs)\n", secs);
    std::fflush(stdout);
  });
  save_model(model, cfg, ablation, result.val_cfm, out);
  std::printf("saved %s (val_cfm %.6f)\n", out.c_str(), result.val_cfm);
  return 0;
}

int run_convert(const std::string& ckpt, const std::string& data_dir, const std::string& input,
                const std::string& speaker_id, const std::string& output, const SamplingFlags& flags) {
  const LoadedModel m = load_model(ckpt);
  const ToyWorld world = ToyWorld::load(fs::path(data_dir) / kWorldFile);
  const FeatureSeq source = read_features(input);
  const ConversionResult r =
      convert(*m.model, source, world.speaker(speaker_id).signature, flags.options());
  write_features(r.features, output);
  const std::string meta = conversion_metadata(r);
  write_bytes(std::vector<unsigned char>(meta.begin(), meta.end()), output + ".json");
  std::printf("wrote %s: %zu -> %zu frames (%s, ratio %.4f)\n", output.c_str(), r.source_len,
              r.target_len, std::string(duration_mode_name(r.mode)).c_str(), r.ratio);
  return 0;
}

int run_eval(const std::string& ckpt, const std::string& data_dir, const std::string& split,
             const std::string& report_path, const SamplingFlags& flags) {
  const LoadedModel m = load_model(ckpt);
  const Dataset data = load_dataset(data_dir);
  const EvalReport rep = evaluate(*m.model, data, split, flags.options());
  if (!report_path.empty()) write_report(rep, report_path);
  std::printf("checkpoint %s (ablation %s, val_cfm %.6f)\n%s", ckpt.c_str(),
              std::string(ablation_name(m.ablation)).c_str(), m.val_cfm, summary_table(rep).c_str());
  return 0;
}

int run_selftest() {
  std::vector<SuiteResult> results;
  results.push_back(ctc_oracle_suite());
  for (auto& r : gradient_suite()) results.push_back(std::move(r));
  results.push_back(rope_suite());
  bool ok = true;
  for (const auto& r : results) {
    std::printf("%s  %-20s max_error %.3e (tol %.0e)  %s\n", r.passed ? "PASS" : "FAIL",
                r.name.c_str(), r.max_error, r.tolerance, r.detail.c_str());
    ok = ok && r.passed;
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Accent normalization toy system"};
  app.require_subcommand(1);

  std::string config_path, out, data_dir, ablate, ckpt, input, output, speaker, split = "test", report;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> train_steps;
  SamplingFlags sampling;

  auto* datagen = app.add_subcommand("datagen", "Generate the paired toy corpus");
  datagen->add_option("--config", config_path, "JSON config")->check(CLI::ExistingFile);
  datagen->add_option("--out", out, "Output directory")->required();
  datagen->add_option("--seed", seed, "Global seed");

  auto* train_cmd = app.add_subcommand("train", "Train and write a checkpoint");
  train_cmd->add_option("--config", config_path, "JSON config")->check(CLI::ExistingFile);
  train_cmd->add_option("--data", data_dir, "Dataset directory")->required();
  train_cmd->add_option("--out", out, "Checkpoint path")->required();
  train_cmd->add_option("--seed", seed, "Training seed (overrides train.seed)");
  train_cmd->add_option("--ablate", ablate, "Ablation")->check(CLI::IsMember({"ctc", "speaker", "posscale"}));
  train_cmd->add_option("--train-steps", train_steps, "Override train.n_steps");

  auto* convert_cmd = app.add_subcommand("convert", "Convert one feature file");
  convert_cmd->add_option("--checkpoint", ckpt, "Checkpoint path")->required();
  convert_cmd->add_option("--data", data_dir, "Dataset directory (for speaker signatures)")->required();
  convert_cmd->add_option("--input", input, "Source feature file")->required();
  convert_cmd->add_option("--speaker", speaker, "Speaker id")->required();
  convert_cmd->add_option("--output", output, "Output feature file")->required();
  sampling.add_to(convert_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  eval_cmd->add_option("--checkpoint", ckpt, "Checkpoint path")->required();
  eval_cmd->add_option("--data", data_dir, "Dataset directory")->required();
  eval_cmd->add_option("--split", split, "Split")->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
  eval_cmd->add_option("--report", report, "Per-utterance report (jsonl)");
  sampling.add_to(eval_cmd);

  auto* selftest = app.add_subcommand("selftest", "Run the CTC oracle, gradient and RoPE suites");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*datagen) return run_datagen(config_path, out, seed);
    if (*train_cmd) return run_train(config_path, data_dir, out, seed, ablate, train_steps);
    if (*convert_cmd) return run_convert(ckpt, data_dir, input, speaker, output, sampling);
    if (*eval_cmd) return run_eval(ckpt, data_dir, split, report, sampling);
    if (*selftest) return run_selftest();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
