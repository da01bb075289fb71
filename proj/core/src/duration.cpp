#include "cosynorm/duration.hpp"

#include <algorithm>
#include <cmath>

namespace cosynorm {

DurationRatio DurationRatio::clamped(double raw) {
  if (std::isnan(raw)) raw = 1.0;
  return {std::clamp(raw, kMin, kMax)};
}

std::size_t DurationRatio::target_length(std::size_t source_len) const {
  const double len = std::round(value * static_cast<double>(source_len));
  return std::max<std::size_t>(1, static_cast<std::size_t>(len));
}

void DurationConfig::validate() const {
  if (content_dim == 0 || model_dim == 0 || speaker_dim == 0) {
    throw ConfigError("duration: dimensions must be positive");
  }
  if (n_heads == 0 || model_dim % n_heads != 0 || (model_dim / n_heads) % 2 != 0) {
    throw ConfigError("duration: model_dim must split into even-width heads");
  }
}

template <typename S>
DurationPredictor<S>::DurationPredictor(ParameterStore<S>& store, const std::string& prefix,
                                        const DurationConfig& config, std::uint64_t seed)
    : config_(config) {
  config_.validate();
  const std::size_t d = config_.model_dim;
  in_proj_ = Linear<S>::make(store, prefix + ".in_proj", config_.content_dim + 1, d, seed);
  time_ = TimeEmbedding<S>::make(store, prefix + ".time", config_.time_emb_dim, seed);
  for (std::size_t i = 0; i < config_.n_layers; ++i) {
    const std::string p = prefix + ".layers." + std::to_string(i);
    blocks_.push_back({AdaLN<S>::make(store, p + ".self_norm", d, config_.time_emb_dim, seed),
                       AdaLN<S>::make(store, p + ".ffn_norm", d, config_.time_emb_dim, seed),
                       MultiHeadAttention<S>::make(store, p + ".attn", d, d, config_.n_heads, seed),
                       FeedForward<S>::make(store, p + ".ffn", d, config_.ffn_mult * d, seed)});
  }
  pool_ = AttentivePool<S>::make(store, prefix + ".pool", d, seed);
  null_speaker_ = &make_param(store, prefix + ".null_speaker", {1, config_.speaker_dim},
                              Init::kUniform, 0.5, seed);
  out_ = Linear<S>::make(store, prefix + ".out", d + config_.speaker_dim, 1, seed);
}

template <typename S>
Var<S> DurationPredictor<S>::velocity(Tape<S>& tape, Var<S> content, double r_t, double t,
                                      std::span<const S> speaker) const {
  if (content.cols() != config_.content_dim || content.rows() == 0) {
    throw ConfigError("duration: content has wrong shape");
  }
  const std::size_t n = content.rows();
  const Var<S> ratio_col = tape.constant(n, 1, std::vector<S>(n, static_cast<S>(r_t)));
  Var<S> h = in_proj_(tape, concat_cols(content, ratio_col));
  const Var<S> cond = silu(time_(tape, t));
  const std::vector<double> pos = index_positions(n);
  for (const auto& b : blocks_) {
    h = b.self_norm(tape, h, cond, [&](Var<S> u) { return b.attn(tape, u, u, pos, pos); });
    h = b.ffn_norm(tape, h, cond, [&](Var<S> u) { return b.ffn(tape, u); });
  }
  Var<S> spk;
  if (config_.use_speaker) {
    if (speaker.size() != config_.speaker_dim) throw ConfigError("duration: speaker has wrong dim");
    spk = tape.constant(1, speaker.size(), std::vector<S>(speaker.begin(), speaker.end()));
  } else {
    spk = tape.param(*null_speaker_);
  }
  return out_(tape, concat_cols(pool_(tape, h), spk));
}

template <typename S>
Var<S> DurationPredictor<S>::cfm_loss(Tape<S>& tape, Var<S> content, std::span<const S> speaker,
                                      double true_ratio, double r0, double t) const {
  const double r_t = (1.0 - t) * r0 + t * true_ratio;
  const Var<S> v = velocity(tape, content, r_t, t, speaker);
  return mse(v, std::vector<S>{static_cast<S>(true_ratio - r0)});
}

template <typename S>
Var<S> DurationPredictor<S>::cfm_loss(Tape<S>& tape, Var<S> content, std::span<const S> speaker,
                                      double true_ratio, Rng& rng) const {
  const double r0 = rng.normal();
  const double t = rng.uniform();
  return cfm_loss(tape, content, speaker, true_ratio, r0, t);
}

template <typename S>
double DurationPredictor<S>::predict_raw(const Tensor<S>& content, std::span<const S> speaker,
                                         const SamplerConfig& sampler) const {
  if (sampler.n_steps < 1) throw ConfigError("duration: n_steps must be >= 1");
  Rng rng(sampler.seed, 0xd0a7);
  double r = rng.normal();
  const double h = 1.0 / static_cast<double>(sampler.n_steps);
  for (std::size_t k = 0; k < sampler.n_steps; ++k) {
    Tape<S> tape(false);
    const double t = static_cast<double>(k) * h;
    r += h * static_cast<double>(velocity(tape, tape.constant(content), r, t, speaker).item());
  }
  return r;
}

template <typename S>
DurationRatio DurationPredictor<S>::predict(const Tensor<S>& content, std::span<const S> speaker,
                                            const SamplerConfig& sampler) const {
  return DurationRatio::clamped(predict_raw(content, speaker, sampler));
}

template class DurationPredictor<float>;
template class DurationPredictor<double>;

}  // namespace cosynorm
