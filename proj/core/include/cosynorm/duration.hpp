#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cosynorm/autodiff.hpp"
#include "cosynorm/flow.hpp"
#include "cosynorm/nn.hpp"
#include "cosynorm/rng.hpp"

namespace cosynorm {

/// Total-duration scaling ratio: target frames / source frames.
struct DurationRatio {
  static constexpr double kMin = 0.1;
  static constexpr double kMax = 10.0;

  double value = 1.0;

  static DurationRatio clamped(double raw);
  /// round(ratio * source_len), never below one frame.
  std::size_t target_length(std::size_t source_len) const;
};

struct DurationConfig {
  std::size_t content_dim = 32;
  std::size_t model_dim = 32;
  std::size_t n_layers = 1;
  std::size_t n_heads = 2;
  std::size_t time_emb_dim = 32;
  std::size_t speaker_dim = 4;
  std::size_t ffn_mult = 2;
  bool use_speaker = true;

  void validate() const;
};

/// Softmax-weighted average of frames with learned per-frame scores.
template <typename S>
struct AttentivePool {
  Linear<S> score;

  static AttentivePool make(ParameterStore<S>& store, const std::string& name, std::size_t dim,
                            std::uint64_t seed) {
    return {Linear<S>::make(store, name + ".score", dim, 1, seed)};
  }

  /// frames: n x dim -> 1 x dim.
  Var<S> operator()(Tape<S>& tape, Var<S> frames) const {
    if (frames.rows() == 0) throw ConfigError("attentive_pool: no frames");
    const Var<S> weights = softmax_rows(transpose(score(tape, frames)));
    return matmul(weights, frames);
  }
};

/// DiT over content frames with the noisy ratio appended to each frame,
/// attentive pooling, then a scalar velocity from [pooled | speaker].
template <typename S>
class DurationPredictor {
 public:
  DurationPredictor(ParameterStore<S>& store, const std::string& prefix,
                    const DurationConfig& config, std::uint64_t seed);

  const DurationConfig& config() const { return config_; }

  /// 1x1 velocity of the ratio at (r_t, t).
  Var<S> velocity(Tape<S>& tape, Var<S> content, double r_t, double t,
                  std::span<const S> speaker) const;

  /// Flow-matching loss with an explicit draw (noise r0, time t).
  Var<S> cfm_loss(Tape<S>& tape, Var<S> content, std::span<const S> speaker, double true_ratio,
                  double r0, double t) const;
  Var<S> cfm_loss(Tape<S>& tape, Var<S> content, std::span<const S> speaker, double true_ratio,
                  Rng& rng) const;

  /// Euler integration of the scalar from seeded noise, clamped to [0.1, 10].
  DurationRatio predict(const Tensor<S>& content, std::span<const S> speaker,
                        const SamplerConfig& sampler) const;
  /// Unclamped integrated value.
  double predict_raw(const Tensor<S>& content, std::span<const S> speaker,
                     const SamplerConfig& sampler) const;

  const AttentivePool<S>& pool() const { return pool_; }

 private:
  struct Block {
    AdaLN<S> self_norm, ffn_norm;
    MultiHeadAttention<S> attn;
    FeedForward<S> ffn;
  };

  DurationConfig config_;
  Linear<S> in_proj_;
  TimeEmbedding<S> time_;
  std::vector<Block> blocks_;
  AttentivePool<S> pool_;
  Parameter<S>* null_speaker_ = nullptr;
  Linear<S> out_;
};

}  // namespace cosynorm
