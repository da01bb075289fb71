#include <doctest.h>

#include <cmath>
#include <limits>
#include <numeric>

#include "cosynorm/io.hpp"
#include "cosynorm/pipeline.hpp"
#include "support.hpp"

using namespace cosynorm;
namespace fs = std::filesystem;

namespace {

const fs::path& tiny_data_dir() {
  static const fs::path dir = [] {
    const auto d = testing::scratch_dir("pipeline_data");
    build_dataset(testing::tiny_config().data, 21, d);
    return d;
  }();
  return dir;
}

const Dataset& tiny_data() {
  static const Dataset data = load_dataset(tiny_data_dir());
  return data;
}

/// Moves every parameter off its initial value so zero-initialized gates do
/// not hide the decoder output.
void perturb(ParameterStore<float>& store, std::uint64_t seed) {
  Rng rng(seed, 0x9e7);
  for (std::size_t i = 0; i < store.size(); ++i)
    for (auto& v : store[i].value.data) v += static_cast<float>(0.2 * rng.normal());
}

bool all_zero(const ParameterStore<float>& store, std::string_view prefix, std::size_t* seen = nullptr) {
  bool zero = true;
  std::size_t n = 0;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& p = store[i];
    if (p.name.rfind(prefix, 0) != 0) continue;
    ++n;
    for (const float g : p.grad) zero = zero && g == 0.0f;
  }
  if (seen) *seen = n;
  return zero && n > 0;
}

bool any_nonzero(const ParameterStore<float>& store, std::string_view prefix) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& p = store[i];
    if (p.name.rfind(prefix, 0) != 0) continue;
    for (const float g : p.grad)
      if (g != 0.0f) return true;
  }
  return false;
}

std::vector<const Utterance*> first_rows(std::size_t n) {
  auto rows = tiny_data().split("train");
  rows.resize(std::min(n, rows.size()));
  return rows;
}

}  // namespace

TEST_SUITE("pipeline") {

TEST_CASE("config defaults") {
  const TrainConfig t;
  CHECK(t.lambda_ctc == 0.5);
  CHECK(t.lambda_dur == 0.1);
  const AppConfig c = parse_config("{}");
  CHECK(c.model.decoder.feature_dim == c.data.feature_dim);
  CHECK(c.model.encoder.vocab_size == c.data.vocab_size);
  CHECK(c.model.decoder.content_dim == c.model.encoder.model_dim);
  CHECK(c.model.duration.content_dim == c.model.encoder.model_dim);
  CHECK(c.model.decoder.speaker_dim == c.data.speaker_dim);
}

TEST_CASE("config parsing rejects unknown keys and wrong types") {
  CHECK_THROWS_AS(parse_config(R"({"bogus": 1})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"train": {"lambda_ctcc": 0.5}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"model": {"decoder": {"n_layer": 2}}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"train": {"n_steps": "many"}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"train": {"n_steps": -3}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"train": {"lambda_ctc": -0.1}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"train": {"optimizer": "lbfgs"}})"), ConfigError);
  CHECK_THROWS_AS(parse_config("not json"), ConfigError);
  try {
    parse_config(R"({"model": {"encoder": {"bad_key": 1}}})");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("model.encoder") != std::string::npos);
    CHECK(msg.find("bad_key") != std::string::npos);
  }
}

TEST_CASE("config round trip") {
  AppConfig c = testing::tiny_config();
  c.train.lambda_ctc = 0.25;
  c.train.optimizer = "sgd";
  c.model.decoder.position_scaling = false;
  const AppConfig back = parse_config(dump_config(c));
  CHECK(dump_config(back) == dump_config(c));
  CHECK(back.train.optimizer == "sgd");
  CHECK_FALSE(back.model.decoder.position_scaling);
}

TEST_CASE("ablation parsing") {
  CHECK(parse_ablation("ctc") == Ablation::kCtc);
  CHECK(parse_ablation("none") == Ablation::kNone);
  CHECK_THROWS_AS(parse_ablation("decoder"), ConfigError);
  AppConfig c = testing::tiny_config();
  apply_ablation(c, Ablation::kCtc);
  CHECK(c.train.lambda_ctc == 0.0);
  apply_ablation(c, Ablation::kSpeaker);
  CHECK_FALSE(c.model.decoder.use_speaker);
  CHECK_FALSE(c.model.duration.use_speaker);
  apply_ablation(c, Ablation::kPosScale);
  CHECK_FALSE(c.model.decoder.position_scaling);
}

TEST_CASE("word error rate") {
  CHECK(wer({1, 2, 3}, {1, 2, 3}) == 0.0);
  CHECK(wer({1, 2, 3}, {1, 3}) == doctest::Approx(1.0 / 3.0));
  CHECK(wer({1}, {}) == 1.0);
  CHECK(wer({1, 2}, {3, 4, 5}) == 1.5);
  CHECK(edit_distance({1, 2, 3, 4}, {2, 1, 3, 4}) == 2);
  CHECK_THROWS_AS(wer({}, {1}), std::invalid_argument);
}

TEST_CASE("conversion honours the duration mode") {
  const AppConfig cfg = testing::tiny_config();
  CosyModel model(cfg.model, 1);
  Rng rng(1, 1);
  const auto source = testing::random_tensor_f(rng, 130, cfg.data.feature_dim);
  const std::vector<float> spk(cfg.data.speaker_dim, 0.5f);
  ConvertOptions opt;
  opt.sampler = {4, 3};

  const auto inherit = convert(model, source, spk, opt);
  CHECK(inherit.features.rows() == 130);
  CHECK(inherit.features.cols() == cfg.data.feature_dim);
  CHECK(inherit.target_len == 130);
  CHECK(inherit.ratio == 1.0);

  opt.mode = DurationMode::kFixed;
  opt.fixed_len = 100;
  CHECK(convert(model, source, spk, opt).features.rows() == 100);
  opt.fixed_len = 0;
  CHECK_THROWS_AS(convert(model, source, spk, opt), ConfigError);

  opt.mode = DurationMode::kPredict;
  const auto pred = convert(model, source, spk, opt);
  CHECK(pred.predicted_ratio >= DurationRatio::kMin);
  CHECK(pred.predicted_ratio <= DurationRatio::kMax);
  CHECK(pred.target_len == DurationRatio{pred.predicted_ratio}.target_length(130));
  CHECK(pred.features.rows() == pred.target_len);
  CHECK(conversion_metadata(pred).find("\"mode\": \"predict\"") != std::string::npos);

  CHECK(parse_duration_mode("fixed") == DurationMode::kFixed);
  CHECK_THROWS_AS(parse_duration_mode("stretch"), ConfigError);
}

TEST_CASE("inherit and fixed lengths hold for random lengths") {
  const AppConfig cfg = testing::tiny_config();
  CosyModel model(cfg.model, 2);
  Rng rng(2, 2);
  const std::vector<float> spk(cfg.data.speaker_dim, 0.5f);
  for (int i = 0; i < 10; ++i) {
    const std::size_t len = 1 + rng.below(200);
    const auto source = testing::random_tensor_f(rng, len, cfg.data.feature_dim);
    ConvertOptions opt;
    opt.sampler = {2, static_cast<std::uint64_t>(i)};
    CHECK(convert(model, source, spk, opt).features.rows() == len);
    opt.mode = DurationMode::kFixed;
    opt.fixed_len = 1 + rng.below(200);
    CHECK(convert(model, source, spk, opt).features.rows() == opt.fixed_len);
  }
}

TEST_CASE("zero guidance equals conditional-only Euler bit-exactly") {
  const AppConfig cfg = testing::tiny_config();
  CosyModel model(cfg.model, 3);
  perturb(model.store, 3);
  Rng rng(3, 3);
  const auto source = testing::random_tensor_f(rng, 17, cfg.data.feature_dim);
  const std::vector<float> spk{0.5f, -0.5f, 0.5f, 0.5f};
  ConvertOptions opt;
  opt.weights = {0.0, 0.0};
  opt.sampler = {8, 77};
  const auto out = convert(model, source, spk, opt).features;

  const Tensor<float> content = model.encode(source);
  Tensor<float> x = sampler_noise(17, cfg.data.feature_dim, 77);
  for (std::size_t k = 0; k < 8; ++k) {
    Tape<float> tape(false);
    const auto v = model.decoder.forward(tape, tape.constant(x), static_cast<double>(k) / 8.0,
                                         tape.constant(content), spk, {}).value();
    for (std::size_t i = 0; i < x.size(); ++i) x.data[i] += (1.0f / 8.0f) * v[i];
  }
  CHECK(out == x);

  // Guidance actually changes the result once branches differ.
  opt.weights = {1.0, 1.0};
  CHECK_FALSE(convert(model, source, spk, opt).features == out);
}

TEST_CASE("zero loss weights decouple their parameter groups exactly") {
  AppConfig cfg = testing::tiny_config();
  const auto batch = first_rows(4);

  SUBCASE("all terms on") {
    CosyModel model(cfg.model, 4);
    perturb(model.store, 4);
    model.store.zero_grad();
    const LossParts parts = accumulate_gradients(model, cfg.train, batch, 0);
    CHECK(std::isfinite(parts.total));
    CHECK(any_nonzero(model.store, "encoder.ctc_head."));
    CHECK(any_nonzero(model.store, "duration."));
    CHECK(any_nonzero(model.store, "judge."));
    CHECK(parts.total == doctest::Approx(parts.cfm + 0.5 * parts.ctc + 0.1 * parts.dur));
  }
  SUBCASE("lambda_ctc = 0") {
    cfg.train.lambda_ctc = 0.0;
    CosyModel model(cfg.model, 4);
    perturb(model.store, 4);
    model.store.zero_grad();
    accumulate_gradients(model, cfg.train, batch, 0);
    CHECK(all_zero(model.store, "encoder.ctc_head."));
    CHECK(any_nonzero(model.store, "encoder.layers."));
  }
  SUBCASE("lambda_dur = 0") {
    cfg.train.lambda_dur = 0.0;
    CosyModel model(cfg.model, 4);
    perturb(model.store, 4);
    model.store.zero_grad();
    accumulate_gradients(model, cfg.train, batch, 0);
    CHECK(all_zero(model.store, "duration."));
  }
  SUBCASE("judge off") {
    cfg.train.train_judge = false;
    CosyModel model(cfg.model, 4);
    perturb(model.store, 4);
    model.store.zero_grad();
    accumulate_gradients(model, cfg.train, batch, 0);
    CHECK(all_zero(model.store, "judge."));
  }
}

TEST_CASE("a non-finite loss aborts with a diagnostic") {
  const AppConfig cfg = testing::tiny_config();
  CosyModel model(cfg.model, 5);
  Utterance bad = *tiny_data().split("train").front();
  bad.source(0, 0) = std::numeric_limits<float>::quiet_NaN();
  const std::vector<const Utterance*> batch{&bad};
  CHECK_THROWS_AS(accumulate_gradients(model, cfg.train, batch, 0), std::runtime_error);
}

TEST_CASE("smoke training lowers the flow-matching loss") {
  AppConfig cfg = testing::tiny_config();
  cfg.train.n_steps = 200;
  CosyModel model(cfg.model, 6);
  const TrainResult r = train(model, cfg, tiny_data());
  REQUIRE(r.history.size() == 200);
  // Per-step losses are noisy (random t and noise), so compare windows.
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < 20; ++i) {
    first += r.history[i].loss.cfm / 20;
    last += r.history[180 + i].loss.cfm / 20;
  }
  MESSAGE("cfm first 20 steps " << first << ", last 20 steps " << last);
  CHECK(last < first);
  CHECK(r.history.back().loss.cfm < r.history.front().loss.cfm);
  CHECK(std::isfinite(r.val_cfm));
}

TEST_CASE("training is deterministic and checkpoints round trip") {
  AppConfig cfg = testing::tiny_config();
  cfg.train.n_steps = 15;
  const auto dir = testing::scratch_dir("pipeline_ckpt");
  double val_a = 0.0;
  for (const char* name : {"a.bin", "b.bin"}) {
    CosyModel model(cfg.model, 7);
    const TrainResult r = train(model, cfg, tiny_data());
    val_a = r.val_cfm;
    save_model(model, cfg, Ablation::kNone, r.val_cfm, dir / name);
  }
  CHECK(read_bytes(dir / "a.bin") == read_bytes(dir / "b.bin"));
  CHECK(read_bytes(dir / "a.bin.json") == read_bytes(dir / "b.bin.json"));

  const LoadedModel loaded = load_model(dir / "a.bin");
  CHECK(loaded.val_cfm == val_a);
  CHECK(loaded.ablation == Ablation::kNone);
  CHECK(dump_config(loaded.config) == dump_config(cfg));
  save_model(*loaded.model, loaded.config, loaded.ablation, loaded.val_cfm, dir / "c.bin");
  CHECK(read_bytes(dir / "a.bin") == read_bytes(dir / "c.bin"));

  // A different seed gives a different model.
  CosyModel other(cfg.model, 8);
  train(other, cfg, tiny_data());
  save_model(other, cfg, Ablation::kNone, 0.0, dir / "d.bin");
  CHECK_FALSE(read_bytes(dir / "a.bin") == read_bytes(dir / "d.bin"));
}

TEST_CASE("evaluation is deterministic and self-consistent") {
  AppConfig cfg = testing::tiny_config();
  cfg.train.n_steps = 10;
  CosyModel model(cfg.model, 9);
  train(model, cfg, tiny_data());
  ConvertOptions opt;
  opt.sampler = {4, 5};
  const EvalReport a = evaluate(model, tiny_data(), "test", opt);
  const EvalReport b = evaluate(model, tiny_data(), "test", opt);
  CHECK(a.wer == b.wer);
  CHECK(a.speaker_cos == b.speaker_cos);
  CHECK(a.rows.size() == tiny_data().split("test").size());
  CHECK(a.speaker_cos >= -1.0);
  CHECK(a.speaker_cos <= 1.0);
  CHECK(a.wer >= 0.0);
  for (const auto& row : a.rows) CHECK(row.output_len == row.source_len);

  // Target WER is what the recognizer scores on the target itself.
  std::size_t edits = 0, total = 0;
  for (const Utterance* u : tiny_data().split("test")) {
    edits += edit_distance(u->labels, model.recognize(u->target));
    total += u->labels.size();
  }
  CHECK(a.target_wer == doctest::Approx(double(edits) / double(total)));

  CHECK_THROWS_AS(evaluate(model, tiny_data(), "nope", opt), ConfigError);
  const auto path = testing::scratch_dir("pipeline_eval") / "report.jsonl";
  write_report(a, path);
  CHECK(fs::file_size(path) > 0);
  CHECK(summary_table(a).find("WER") != std::string::npos);
}

}  // TEST_SUITE
