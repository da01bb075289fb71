#pragma once

// Layers shared by the encoder, decoder and duration predictor.

#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "cosynorm/autodiff.hpp"
#include "cosynorm/rng.hpp"
#include "cosynorm/tensor.hpp"

namespace cosynorm {

enum class Init { kUniform, kZero, kOne };

/// Registers a parameter and fills it from a stream keyed by its name, so
/// initial values do not depend on registration order.
template <typename S>
Parameter<S>& make_param(ParameterStore<S>& store, const std::string& name,
                         std::vector<std::size_t> shape, Init init, double bound,
                         std::uint64_t seed) {
  auto& p = store.add(name, std::move(shape));
  Rng rng = Rng::for_id(seed, name);
  for (auto& v : p.value.data) {
    switch (init) {
      case Init::kUniform: v = static_cast<S>(rng.uniform(-bound, bound)); break;
      case Init::kZero: v = S(0); break;
      case Init::kOne: v = S(1); break;
    }
  }
  return p;
}

template <typename S>
struct Linear {
  Parameter<S>* weight = nullptr;  // in x out
  Parameter<S>* bias = nullptr;    // 1 x out
  std::size_t in = 0, out = 0;

  static Linear make(ParameterStore<S>& store, const std::string& name, std::size_t in,
                     std::size_t out, std::uint64_t seed, bool zero_init = false) {
    Linear l;
    l.in = in;
    l.out = out;
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    l.weight = &make_param(store, name + ".weight", {in, out},
                           zero_init ? Init::kZero : Init::kUniform, bound, seed);
    l.bias = &make_param(store, name + ".bias", {1, out}, Init::kZero, 0.0, seed);
    return l;
  }

  Var<S> operator()(Tape<S>& tape, Var<S> x) const {
    return affine(x, tape.param(*weight), tape.param(*bias));
  }
};

/// Layer norm with learned gain and bias (encoder pre-norm).
template <typename S>
struct LayerNorm {
  Parameter<S>* gain = nullptr;
  Parameter<S>* bias = nullptr;

  static LayerNorm make(ParameterStore<S>& store, const std::string& name, std::size_t dim,
                        std::uint64_t seed) {
    LayerNorm ln;
    ln.gain = &make_param(store, name + ".gain", {1, dim}, Init::kOne, 0.0, seed);
    ln.bias = &make_param(store, name + ".bias", {1, dim}, Init::kZero, 0.0, seed);
    return ln;
  }

  Var<S> operator()(Tape<S>& tape, Var<S> x) const {
    return add_row(mul_row(layer_norm(x), tape.param(*gain)), tape.param(*bias));
  }
};

/// Multi-head attention with rotary positions on queries and keys.
template <typename S>
struct MultiHeadAttention {
  Linear<S> q, k, v, o;
  std::size_t n_heads = 1;

  static MultiHeadAttention make(ParameterStore<S>& store, const std::string& name,
                                 std::size_t dim, std::size_t kv_in, std::size_t n_heads,
                                 std::uint64_t seed) {
    if (n_heads == 0 || dim % n_heads != 0) {
      throw ConfigError(name + ": model dim " + std::to_string(dim) +
                        " not divisible by heads " + std::to_string(n_heads));
    }
    if ((dim / n_heads) % 2 != 0) throw ConfigError(name + ": head dimension must be even");
    MultiHeadAttention a;
    a.n_heads = n_heads;
    a.q = Linear<S>::make(store, name + ".q", dim, dim, seed);
    a.k = Linear<S>::make(store, name + ".k", kv_in, dim, seed);
    a.v = Linear<S>::make(store, name + ".v", kv_in, dim, seed);
    a.o = Linear<S>::make(store, name + ".o", dim, dim, seed);
    return a;
  }

  Var<S> operator()(Tape<S>& tape, Var<S> queries, Var<S> memory,
                    std::span<const double> q_positions,
                    std::span<const double> k_positions) const {
    const Var<S> qr = rope(q(tape, queries), q_positions, n_heads);
    const Var<S> kr = rope(k(tape, memory), k_positions, n_heads);
    return o(tape, attention(qr, kr, v(tape, memory), n_heads));
  }
};

template <typename S>
struct FeedForward {
  Linear<S> up, down;

  static FeedForward make(ParameterStore<S>& store, const std::string& name, std::size_t dim,
                          std::size_t hidden, std::uint64_t seed) {
    return {Linear<S>::make(store, name + ".up", dim, hidden, seed),
            Linear<S>::make(store, name + ".down", hidden, dim, seed)};
  }

  Var<S> operator()(Tape<S>& tape, Var<S> x) const { return down(tape, silu(up(tape, x))); }
};

/// Sinusoidal features of t followed by a two-layer MLP.
template <typename S>
struct TimeEmbedding {
  Linear<S> fc1, fc2;
  std::size_t dim = 0;

  static TimeEmbedding make(ParameterStore<S>& store, const std::string& name, std::size_t dim,
                            std::uint64_t seed) {
    if (dim % 2 != 0 || dim == 0) throw ConfigError(name + ": time embedding dim must be even");
    TimeEmbedding e;
    e.dim = dim;
    e.fc1 = Linear<S>::make(store, name + ".fc1", dim, dim, seed);
    e.fc2 = Linear<S>::make(store, name + ".fc2", dim, dim, seed);
    return e;
  }

  static std::vector<S> sinusoid(double t, std::size_t dim) {
    const std::size_t half = dim / 2;
    std::vector<S> out(dim);
    for (std::size_t i = 0; i < half; ++i) {
      const double freq =
          std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double arg = 1000.0 * t * freq;
      out[i] = static_cast<S>(std::cos(arg));
      out[half + i] = static_cast<S>(std::sin(arg));
    }
    return out;
  }

  Var<S> operator()(Tape<S>& tape, double t) const {
    const Var<S> base = tape.constant(1, dim, sinusoid(t, dim));
    return fc2(tape, silu(fc1(tape, base)));
  }
};

/// adaLN-Zero residual wrapper:
///   x + gate(c) * sublayer(LN(x) * (1 + scale(c)) + shift(c))
/// The modulation projection starts at zero, so a fresh block is the identity.
template <typename S>
struct AdaLN {
  Linear<S> modulation;  // cond -> [shift | scale | gate]
  std::size_t dim = 0;

  static AdaLN make(ParameterStore<S>& store, const std::string& name, std::size_t dim,
                    std::size_t cond_dim, std::uint64_t seed) {
    AdaLN a;
    a.dim = dim;
    a.modulation = Linear<S>::make(store, name + ".modulation", cond_dim, 3 * dim, seed, true);
    return a;
  }

  /// `cond` is the 1 x cond_dim conditioning row (already passed through SiLU).
  Var<S> operator()(Tape<S>& tape, Var<S> x, Var<S> cond,
                    const std::function<Var<S>(Var<S>)>& sublayer) const {
    if (x.cols() != dim) throw ConfigError("AdaLN: input width does not match block width");
    const Var<S> mod = modulation(tape, cond);
    const Var<S> shift = slice_cols(mod, 0, dim);
    const Var<S> scl = slice_cols(mod, dim, dim);
    const Var<S> gate = slice_cols(mod, 2 * dim, dim);
    const Var<S> h = add_row(mul_row(layer_norm(x), add_scalar(scl, S(1))), shift);
    return add(x, mul_row(sublayer(h), gate));
  }
};

/// Modulated final norm (shift and scale only) plus output projection.
template <typename S>
struct FinalLayer {
  Linear<S> modulation;
  Linear<S> proj;
  std::size_t dim = 0;

  static FinalLayer make(ParameterStore<S>& store, const std::string& name, std::size_t dim,
                         std::size_t cond_dim, std::size_t out_dim, std::uint64_t seed) {
    FinalLayer f;
    f.dim = dim;
    f.modulation = Linear<S>::make(store, name + ".modulation", cond_dim, 2 * dim, seed, true);
    f.proj = Linear<S>::make(store, name + ".proj", dim, out_dim, seed, true);
    return f;
  }

  Var<S> operator()(Tape<S>& tape, Var<S> x, Var<S> cond) const {
    const Var<S> mod = modulation(tape, cond);
    const Var<S> h = add_row(mul_row(layer_norm(x), add_scalar(slice_cols(mod, dim, dim), S(1))),
                             slice_cols(mod, 0, dim));
    return proj(tape, h);
  }
};

/// Integer positions 0..n-1.
inline std::vector<double> index_positions(std::size_t n) {
  std::vector<double> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<double>(i);
  return p;
}

}  // namespace cosynorm
