#include <benchmark/benchmark.h>

#include <cmath>

#include "cosynorm/ctc.hpp"
#include "cosynorm/decoder.hpp"
#include "cosynorm/flow.hpp"
#include "cosynorm/pipeline.hpp"

using namespace cosynorm;

namespace {

Tensor<float> noise(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  return sampler_noise(rows, cols, seed);
}

void BM_CtcLoss(benchmark::State& state) {
  const std::size_t frames = static_cast<std::size_t>(state.range(0)), vocab = 13;
  Rng rng(1, 1);
  std::vector<double> lat(frames * vocab);
  for (std::size_t t = 0; t < frames; ++t) {
    double z = 0.0;
    for (std::size_t v = 0; v < vocab; ++v) z += std::exp(lat[t * vocab + v] = rng.normal());
    for (std::size_t v = 0; v < vocab; ++v) lat[t * vocab + v] -= std::log(z);
  }
  LabelSeq labels;
  for (std::size_t i = 0; i < frames / 6; ++i) labels.push_back(1 + static_cast<int>(rng.below(vocab - 1)));
  for (auto _ : state) benchmark::DoNotOptimize(ctc_loss<double>(lat, frames, vocab, labels));
}
BENCHMARK(BM_CtcLoss)->Arg(32)->Arg(128)->Arg(512);

void BM_Attention(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0)), d = 48;
  const auto q = noise(n, d, 1), k = noise(n, d, 2), v = noise(n, d, 3);
  for (auto _ : state) {
    Tape<float> tape(false);
    benchmark::DoNotOptimize(attention(tape.constant(q), tape.constant(k), tape.constant(v), 4).value().data());
  }
}
BENCHMARK(BM_Attention)->Arg(32)->Arg(128)->Arg(512);

void BM_DecoderForward(benchmark::State& state) {
  const std::size_t len = static_cast<std::size_t>(state.range(0));
  DecoderConfig cfg;
  ParameterStore<float> store;
  const Decoder<float> dec(store, "dec", cfg, 1);
  const auto x = noise(len, cfg.feature_dim, 1), c = noise(len / 2 + 1, cfg.content_dim, 2);
  const std::vector<float> spk(cfg.speaker_dim, 0.5f);
  for (auto _ : state) {
    Tape<float> tape(false);
    benchmark::DoNotOptimize(dec.forward(tape, tape.constant(x), 0.5, tape.constant(c), spk, {}).value().data());
  }
}
BENCHMARK(BM_DecoderForward)->Arg(40)->Arg(160);

void BM_TrainStep(benchmark::State& state) {
  AppConfig cfg;
  cfg.resolve();
  CosyModel model(cfg.model, 1);
  std::vector<Utterance> rows(cfg.train.batch_size);
  Rng rng(2, 2);
  for (auto& u : rows) {
    const std::size_t tgt = 30 + rng.below(20);
    u.target = noise(tgt, cfg.data.feature_dim, rng.next_u64());
    u.source = noise(static_cast<std::size_t>(1.3 * static_cast<double>(tgt)), cfg.data.feature_dim, rng.next_u64());
    for (int i = 0; i < 6; ++i) u.labels.push_back(1 + static_cast<int>(rng.below(cfg.data.vocab_size - 1)));
    u.signature.assign(cfg.data.speaker_dim, 0.5f);
  }
  std::vector<const Utterance*> batch;
  for (const auto& u : rows) batch.push_back(&u);
  Optimizer opt(cfg.train, model.store);
  std::uint64_t step = 0;
  for (auto _ : state) {
    model.store.zero_grad();
    benchmark::DoNotOptimize(accumulate_gradients(model, cfg.train, batch, step++).total);
    opt.step();
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
