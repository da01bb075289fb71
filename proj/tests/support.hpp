#pragma once

// Shared helpers for unit and acceptance tests. The oracles here are written
// independently of the library implementations they check.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "cosynorm/autodiff.hpp"
#include "cosynorm/config.hpp"
#include "cosynorm/ctc.hpp"
#include "cosynorm/flow.hpp"
#include "cosynorm/pipeline.hpp"
#include "cosynorm/rng.hpp"

namespace testing {

using namespace cosynorm;

/// Fresh, empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("cosynorm_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::vector<double> normals(Rng& rng, std::size_t n, double sd = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = sd * rng.normal();
  return v;
}

inline Tensor<double> random_tensor(Rng& rng, std::size_t rows, std::size_t cols, double sd = 1.0) {
  Tensor<double> t(rows, cols);
  t.data = normals(rng, rows * cols, sd);
  return t;
}

inline Tensor<float> random_tensor_f(Rng& rng, std::size_t rows, std::size_t cols, double sd = 1.0) {
  return random_tensor(rng, rows, cols, sd).cast<float>();
}

/// Row-wise log-softmax of random logits.
inline std::vector<double> random_lattice(Rng& rng, std::size_t frames, std::size_t vocab,
                                          double sd = 2.0) {
  std::vector<double> lat(frames * vocab);
  for (std::size_t t = 0; t < frames; ++t) {
    double z = 0.0;
    for (std::size_t v = 0; v < vocab; ++v) {
      lat[t * vocab + v] = sd * rng.normal();
      z += std::exp(lat[t * vocab + v]);
    }
    for (std::size_t v = 0; v < vocab; ++v) lat[t * vocab + v] -= std::log(z);
  }
  return lat;
}

/// Collapse repeats, then drop blanks (id 0).
inline LabelSeq collapse(const std::vector<int>& path) {
  LabelSeq out;
  int prev = -1;
  for (const int s : path) {
    if (s != prev && s != 0) out.push_back(s);
    prev = s;
  }
  return out;
}

/// -log sum over all V^T paths collapsing to `labels`, by odometer enumeration.
inline double enumerate_ctc(const std::vector<double>& lattice, std::size_t frames, std::size_t vocab,
                            const LabelSeq& labels) {
  std::vector<int> path(frames, 0);
  double total = 0.0;
  while (true) {
    if (collapse(path) == labels) {
      double lp = 0.0;
      for (std::size_t t = 0; t < frames; ++t) lp += lattice[t * vocab + static_cast<std::size_t>(path[t])];
      total += std::exp(lp);
    }
    std::size_t k = 0;
    while (k < frames && ++path[k] == static_cast<int>(vocab)) path[k++] = 0;
    if (k == frames) break;
  }
  return -std::log(total);
}

/// Two-row rotation of pairs (2i, 2i+1) by p * base^(-2i/d), written out directly.
inline std::vector<double> rotate_pairs(const std::vector<double>& x, double p, double base = 10000.0) {
  const std::size_t d = x.size();
  std::vector<double> out(d);
  for (std::size_t i = 0; i < d / 2; ++i) {
    const double theta = p * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
    const double c = std::cos(theta), s = std::sin(theta);
    out[2 * i] = c * x[2 * i] - s * x[2 * i + 1];
    out[2 * i + 1] = s * x[2 * i] + c * x[2 * i + 1];
  }
  return out;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// Small datagen config for quick end-to-end tests.
inline AppConfig tiny_config() {
  AppConfig c;
  c.data.n_speakers = 2;
  c.data.n_l2_speakers = 2;
  c.data.n_sentences = 24;
  c.data.n_val = 4;
  c.data.n_test = 4;
  c.data.min_per_speaker = 3;
  c.model.encoder.model_dim = 16;
  c.model.encoder.n_layers = 1;
  c.model.decoder.model_dim = 16;
  c.model.decoder.n_layers = 1;
  c.model.decoder.n_heads = 2;
  c.model.decoder.time_emb_dim = 16;
  c.model.duration.model_dim = 16;
  c.model.duration.time_emb_dim = 16;
  c.train.batch_size = 4;
  c.train.n_steps = 20;
  c.train.val_draws = 1;
  c.resolve();
  return c;
}

/// Trains an unconditional ToyFlowModel on N(mu, I) in place: Adam at 3e-3,
/// then the last quarter of the steps at 3e-4 to settle the final iterate.
inline void train_gaussian_toy(ParameterStore<float>& store, const ToyFlowModel<float>& model,
                               const std::vector<double>& mu, std::size_t steps, std::uint64_t seed) {
  TrainConfig tc;
  tc.learning_rate = 3e-3;
  tc.grad_clip = 0.0;
  Optimizer fast(tc, store);
  tc.learning_rate = 3e-4;
  Optimizer slow(tc, store);
  Rng rng(seed, 0x6a55);
  const std::size_t batch = 256, dim = mu.size(), switch_at = steps - steps / 4;
  for (std::size_t s = 0; s < steps; ++s) {
    Tensor<float> x1(batch, dim);
    for (std::size_t i = 0; i < batch; ++i)
      for (std::size_t c = 0; c < dim; ++c) x1(i, c) = static_cast<float>(mu[c] + rng.normal());
    const BatchFlowDraw<float> draw = draw_flow_batch<float>(rng, batch, dim);
    Tensor<float> xt(batch, dim);
    std::vector<float> target(batch * dim);
    for (std::size_t i = 0; i < batch; ++i) {
      for (std::size_t c = 0; c < dim; ++c) {
        const double t = draw.t[i];
        xt(i, c) = static_cast<float>((1.0 - t) * draw.x0(i, c) + t * x1(i, c));
        target[i * dim + c] = x1(i, c) - draw.x0(i, c);
      }
    }
    store.zero_grad();
    Tape<float> tape;
    const Var<float> loss = mse(model.velocity(tape, tape.constant(xt), draw.t), target);
    tape.backward(loss);
    tape.accumulate_param_grads();
    (s < switch_at ? fast : slow).step();
  }
}

/// Euler samples from the trained toy: one row per sample.
inline Tensor<float> sample_gaussian_toy(const ToyFlowModel<float>& model, std::size_t n,
                                         std::size_t dim, std::size_t n_steps, std::uint64_t seed) {
  const BranchVelocity velocity = [&](const Tensor<float>& x, double t, ConditionMask) {
    Tape<float> tape(false);
    const std::vector<double> ts(x.rows(), t);
    const auto v = model.velocity(tape, tape.constant(x), ts).value();
    return std::vector<float>(v.begin(), v.end());
  };
  return euler_sample(velocity, n, dim, GuidanceWeights{0.0, 0.0}, SamplerConfig{n_steps, seed});
}

}  // namespace testing
