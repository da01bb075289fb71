#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "cosynorm/autodiff.hpp"
#include "cosynorm/nn.hpp"
#include "cosynorm/tensor.hpp"

namespace cosynorm {

struct EncoderConfig {
  std::size_t input_dim = 20;
  std::size_t model_dim = 32;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t frontend_stride = 2;
  std::size_t vocab_size = 13;  // including blank
  std::size_t ffn_mult = 2;
  std::size_t kernel = 3;

  void validate() const;
};

/// Encoder output sequence c, one row per downsampled frame.
struct ContentFeatures {
  Tensor<float> frames;
  std::size_t source_len = 0;
};

/// Frontend + pre-norm transformer speech encoder with a CTC projection head.
///
/// The frontend subtracts the per-utterance channel mean (which removes any
/// constant timbre offset) and runs two 1-D convolutions; the first carries
/// the whole stride, so T source frames become ceil(T / stride) rows.
template <typename S>
class Encoder {
 public:
  Encoder(ParameterStore<S>& store, const std::string& prefix, const EncoderConfig& config,
          std::uint64_t seed);

  const EncoderConfig& config() const { return config_; }

  static std::size_t output_length(std::size_t frames, std::size_t stride) {
    return (frames + stride - 1) / stride;
  }

  Var<S> frontend(Tape<S>& tape, Var<S> features) const;
  Var<S> encode(Tape<S>& tape, Var<S> features) const;
  Var<S> encode(Tape<S>& tape, const Tensor<S>& features) const {
    return encode(tape, tape.constant(features));
  }
  /// Linear projection to the vocabulary followed by log-softmax.
  Var<S> ctc_head(Tape<S>& tape, Var<S> content) const;

 private:
  struct Block {
    LayerNorm<S> norm1, norm2;
    MultiHeadAttention<S> attn;
    FeedForward<S> ffn;
  };

  EncoderConfig config_;
  Linear<S> conv1_, conv2_;
  std::vector<Block> blocks_;
  LayerNorm<S> final_norm_;
  Linear<S> head_;
};

}  // namespace cosynorm
