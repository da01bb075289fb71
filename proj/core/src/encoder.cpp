#include "cosynorm/encoder.hpp"

namespace cosynorm {

void EncoderConfig::validate() const {
  if (input_dim == 0 || model_dim == 0) throw ConfigError("encoder: dimensions must be positive");
  if (n_heads == 0 || model_dim % n_heads != 0) {
    throw ConfigError("encoder: model_dim " + std::to_string(model_dim) +
                      " not divisible by n_heads " + std::to_string(n_heads));
  }
  if ((model_dim / n_heads) % 2 != 0) throw ConfigError("encoder: head dimension must be even");
  if (frontend_stride < 1) throw ConfigError("encoder: frontend_stride must be >= 1");
  if (vocab_size < 2) throw ConfigError("encoder: vocab_size must be >= 2");
  if (kernel < 1) throw ConfigError("encoder: kernel must be >= 1");
}

template <typename S>
Encoder<S>::Encoder(ParameterStore<S>& store, const std::string& prefix,
                    const EncoderConfig& config, std::uint64_t seed)
    : config_(config) {
  config_.validate();
  const std::size_t d = config_.model_dim;
  conv1_ = Linear<S>::make(store, prefix + ".frontend.conv1", config_.kernel * config_.input_dim, d, seed);
  conv2_ = Linear<S>::make(store, prefix + ".frontend.conv2", config_.kernel * d, d, seed);
  for (std::size_t i = 0; i < config_.n_layers; ++i) {
    const std::string p = prefix + ".layers." + std::to_string(i);
    blocks_.push_back({LayerNorm<S>::make(store, p + ".norm1", d, seed),
                       LayerNorm<S>::make(store, p + ".norm2", d, seed),
                       MultiHeadAttention<S>::make(store, p + ".attn", d, d, config_.n_heads, seed),
                       FeedForward<S>::make(store, p + ".ffn", d, config_.ffn_mult * d, seed)});
  }
  final_norm_ = LayerNorm<S>::make(store, prefix + ".final_norm", d, seed);
  head_ = Linear<S>::make(store, prefix + ".ctc_head", d, config_.vocab_size, seed);
}

template <typename S>
Var<S> Encoder<S>::frontend(Tape<S>& tape, Var<S> features) const {
  if (features.cols() != config_.input_dim) {
    throw ConfigError("encoder: expected feature dim " + std::to_string(config_.input_dim) +
                      ", got " + std::to_string(features.cols()));
  }
  if (features.rows() == 0) throw ConfigError("encoder: empty feature sequence");
  const Var<S> centered = sub(features, broadcast_rows(mean_rows(features), features.rows()));
  const Var<S> h = silu(conv1_(tape, conv_frames(centered, config_.kernel, config_.frontend_stride)));
  return silu(conv2_(tape, conv_frames(h, config_.kernel, 1)));
}

template <typename S>
Var<S> Encoder<S>::encode(Tape<S>& tape, Var<S> features) const {
  Var<S> x = frontend(tape, features);
  const std::vector<double> pos = index_positions(x.rows());
  for (const auto& b : blocks_) {
    const Var<S> h = b.norm1(tape, x);
    x = add(x, b.attn(tape, h, h, pos, pos));
    x = add(x, b.ffn(tape, b.norm2(tape, x)));
  }
  return final_norm_(tape, x);
}

template <typename S>
Var<S> Encoder<S>::ctc_head(Tape<S>& tape, Var<S> content) const {
  return log_softmax_rows(head_(tape, content));
}

template class Encoder<float>;
template class Encoder<double>;

}  // namespace cosynorm
