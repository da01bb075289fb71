#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cosynorm/autodiff.hpp"
#include "cosynorm/nn.hpp"
#include "cosynorm/tensor.hpp"

namespace cosynorm {

struct DecoderConfig {
  std::size_t feature_dim = 20;
  std::size_t model_dim = 48;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t time_emb_dim = 32;
  std::size_t speaker_dim = 4;
  std::size_t content_dim = 32;  // encoder model_dim
  std::size_t ffn_mult = 2;
  /// When false, content keys keep integer positions 0..T'-1 (ablation).
  bool position_scaling = true;
  /// When false, the learned null speaker is always used (ablation).
  bool use_speaker = true;

  void validate() const;
};

/// Which conditions are replaced by their learned null embeddings.
/// Only (keep, keep), (drop, drop) and (drop, keep) are meaningful.
struct ConditionMask {
  bool drop_content = false;
  bool drop_speaker = false;

  bool operator==(const ConditionMask&) const = default;
};

/// Unit-norm speaker vector.
struct SpeakerEmbedding {
  std::vector<float> vector;
  std::string speaker_id;
};

/// Source positions stretched so the first lands on 0 and the last on
/// tgt_len - 1: position_i = i * (tgt_len - 1) / (src_len - 1). A single
/// source frame sits at the target midpoint.
std::vector<double> scale_positions(std::size_t src_len, std::size_t tgt_len);

/// DiT velocity network v(x_t, t, c, s).
template <typename S>
class Decoder {
 public:
  Decoder(ParameterStore<S>& store, const std::string& prefix, const DecoderConfig& config,
          std::uint64_t seed);

  const DecoderConfig& config() const { return config_; }

  /// `x_t` is L x feature_dim, `content` T' x content_dim, `speaker` has
  /// speaker_dim entries. Returns an L x feature_dim velocity.
  Var<S> forward(Tape<S>& tape, Var<S> x_t, double t, Var<S> content,
                 std::span<const S> speaker, ConditionMask mask) const;

 private:
  struct Block {
    AdaLN<S> self_norm, cross_norm, ffn_norm;
    MultiHeadAttention<S> self_attn, cross_attn;
    FeedForward<S> ffn;
  };

  DecoderConfig config_;
  Linear<S> in_proj_, speaker_proj_;
  TimeEmbedding<S> time_;
  Parameter<S>* null_content_ = nullptr;
  Parameter<S>* null_speaker_ = nullptr;
  std::vector<Block> blocks_;
  FinalLayer<S> final_;
};

}  // namespace cosynorm
