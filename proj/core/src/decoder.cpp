#include "cosynorm/decoder.hpp"

namespace cosynorm {

void DecoderConfig::validate() const {
  if (feature_dim == 0 || model_dim == 0 || speaker_dim == 0 || content_dim == 0) {
    throw ConfigError("decoder: dimensions must be positive");
  }
  if (n_heads == 0 || model_dim % n_heads != 0) {
    throw ConfigError("decoder: model_dim " + std::to_string(model_dim) +
                      " not divisible by n_heads " + std::to_string(n_heads));
  }
  if ((model_dim / n_heads) % 2 != 0) throw ConfigError("decoder: head dimension must be even");
  if (time_emb_dim == 0 || time_emb_dim % 2 != 0) throw ConfigError("decoder: time_emb_dim must be even");
}

std::vector<double> scale_positions(std::size_t src_len, std::size_t tgt_len) {
  if (src_len < 1 || tgt_len < 1) throw ConfigError("scale_positions: lengths must be >= 1");
  const double span = static_cast<double>(tgt_len - 1);
  if (src_len == 1) return {span / 2.0};
  const double denom = static_cast<double>(src_len - 1);
  std::vector<double> pos(src_len);
  // i * span is an exact integer below 2^53, so the last entry divides out exactly.
  for (std::size_t i = 0; i < src_len; ++i) pos[i] = static_cast<double>(i) * span / denom;
  return pos;
}

template <typename S>
Decoder<S>::Decoder(ParameterStore<S>& store, const std::string& prefix,
                    const DecoderConfig& config, std::uint64_t seed)
    : config_(config) {
  config_.validate();
  const std::size_t d = config_.model_dim;
  in_proj_ = Linear<S>::make(store, prefix + ".in_proj", config_.feature_dim, d, seed);
  speaker_proj_ = Linear<S>::make(store, prefix + ".speaker_proj", config_.speaker_dim, d, seed);
  time_ = TimeEmbedding<S>::make(store, prefix + ".time", config_.time_emb_dim, seed);
  null_content_ = &make_param(store, prefix + ".null_content", {1, config_.content_dim},
                              Init::kUniform, 1.0, seed);
  null_speaker_ = &make_param(store, prefix + ".null_speaker", {1, config_.speaker_dim},
                              Init::kUniform, 0.5, seed);
  for (std::size_t i = 0; i < config_.n_layers; ++i) {
    const std::string p = prefix + ".layers." + std::to_string(i);
    const std::size_t te = config_.time_emb_dim;
    blocks_.push_back({AdaLN<S>::make(store, p + ".self_norm", d, te, seed),
                       AdaLN<S>::make(store, p + ".cross_norm", d, te, seed),
                       AdaLN<S>::make(store, p + ".ffn_norm", d, te, seed),
                       MultiHeadAttention<S>::make(store, p + ".self_attn", d, d, config_.n_heads, seed),
                       MultiHeadAttention<S>::make(store, p + ".cross_attn", d, config_.content_dim,
                                                   config_.n_heads, seed),
                       FeedForward<S>::make(store, p + ".ffn", d, config_.ffn_mult * d, seed)});
  }
  final_ = FinalLayer<S>::make(store, prefix + ".final", d, config_.time_emb_dim,
                               config_.feature_dim, seed);
}

template <typename S>
Var<S> Decoder<S>::forward(Tape<S>& tape, Var<S> x_t, double t, Var<S> content,
                           std::span<const S> speaker, ConditionMask mask) const {
  if (mask.drop_speaker && !mask.drop_content) {
    throw ConfigError("decoder: dropping only the speaker is not a supported condition");
  }
  if (x_t.cols() != config_.feature_dim) throw ConfigError("decoder: x_t has wrong feature dim");
  if (x_t.rows() == 0) throw ConfigError("decoder: empty target sequence");
  const std::size_t len = x_t.rows();

  Var<S> spk;
  if (mask.drop_speaker || !config_.use_speaker) {
    spk = tape.param(*null_speaker_);
  } else {
    if (speaker.size() != config_.speaker_dim) throw ConfigError("decoder: speaker has wrong dim");
    spk = tape.constant(1, speaker.size(), std::vector<S>(speaker.begin(), speaker.end()));
  }
  Var<S> memory = content;
  if (mask.drop_content) {
    memory = tape.param(*null_content_);
  } else if (content.cols() != config_.content_dim || content.rows() == 0) {
    throw ConfigError("decoder: content has wrong shape");
  }

  const std::vector<double> q_pos = index_positions(len);
  const std::vector<double> k_pos = config_.position_scaling
                                        ? scale_positions(memory.rows(), len)
                                        : index_positions(memory.rows());

  const Var<S> cond = silu(time_(tape, t));
  Var<S> h = add(in_proj_(tape, x_t), broadcast_rows(speaker_proj_(tape, spk), len));
  for (const auto& b : blocks_) {
    h = b.self_norm(tape, h, cond, [&](Var<S> u) { return b.self_attn(tape, u, u, q_pos, q_pos); });
    h = b.cross_norm(tape, h, cond,
                     [&](Var<S> u) { return b.cross_attn(tape, u, memory, q_pos, k_pos); });
    h = b.ffn_norm(tape, h, cond, [&](Var<S> u) { return b.ffn(tape, u); });
  }
  return final_(tape, h, cond);
}

template class Decoder<float>;
template class Decoder<double>;

}  // namespace cosynorm
