#include "cosynorm/flow.hpp"

#include <stdexcept>

namespace cosynorm {

template <typename S>
FlowDraw<S> draw_flow(Rng& rng, std::size_t rows, std::size_t cols) {
  FlowDraw<S> d;
  d.x0 = Tensor<S>(rows, cols);
  for (auto& v : d.x0.data) v = static_cast<S>(rng.normal());
  d.t = rng.uniform();
  return d;
}

template <typename S>
BatchFlowDraw<S> draw_flow_batch(Rng& rng, std::size_t rows, std::size_t cols) {
  BatchFlowDraw<S> d;
  d.x0 = Tensor<S>(rows, cols);
  for (auto& v : d.x0.data) v = static_cast<S>(rng.normal());
  d.t.resize(rows);
  for (auto& t : d.t) t = rng.uniform();
  return d;
}

template <typename S>
Var<S> cfm_loss(Tape<S>& tape, const TapeVelocity<S>& velocity, const Tensor<S>& x1,
                const FlowDraw<S>& draw) {
  if (draw.x0.size() != x1.size()) throw ConfigError("cfm_loss: noise and target shapes differ");
  const S t = static_cast<S>(draw.t);
  std::vector<S> xt(x1.size()), target(x1.size());
  for (std::size_t i = 0; i < x1.size(); ++i) {
    xt[i] = (S(1) - t) * draw.x0.data[i] + t * x1.data[i];
    target[i] = x1.data[i] - draw.x0.data[i];
  }
  const Var<S> v = velocity(tape, tape.constant(x1.rows(), x1.cols(), std::move(xt)), draw.t);
  return mse(v, target);
}

template <typename S>
Var<S> cfm_loss(Tape<S>& tape, const TapeVelocity<S>& velocity, const Tensor<S>& x1, Rng& rng) {
  return cfm_loss(tape, velocity, x1, draw_flow<S>(rng, x1.rows(), x1.cols()));
}

ConditionMask sample_condition_mask(Rng& rng, double p_uncond, double p_content_drop) {
  if (!(p_uncond >= 0.0) || !(p_content_drop >= 0.0) || p_uncond + p_content_drop > 1.0) {
    throw std::invalid_argument("sample_condition_mask: invalid dropout probabilities");
  }
  const double u = rng.uniform();
  if (u < p_uncond) return {true, true};
  if (u < p_uncond + p_content_drop) return {true, false};
  return {false, false};
}

template <typename S>
std::vector<S> cfg_combine(std::span<const S> v_full, std::span<const S> v_uncond,
                           std::span<const S> v_content_dropped, GuidanceWeights weights) {
  if (v_uncond.size() != v_full.size() || v_content_dropped.size() != v_full.size()) {
    throw ConfigError("cfg_combine: branch shapes differ");
  }
  const S w1 = static_cast<S>(weights.w1), w2 = static_cast<S>(weights.w2);
  std::vector<S> out(v_full.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = v_full[i] + w1 * (v_full[i] - v_uncond[i]) + w2 * (v_full[i] - v_content_dropped[i]);
  }
  return out;
}

Tensor<float> sampler_noise(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Rng rng(seed, 0x5a3b1e);
  Tensor<float> x(rows, cols);
  for (auto& v : x.data) v = static_cast<float>(rng.normal());
  return x;
}

Tensor<float> euler_sample(const BranchVelocity& velocity, std::size_t tgt_len,
                           std::size_t feature_dim, GuidanceWeights weights,
                           const SamplerConfig& sampler) {
  if (tgt_len < 1) throw ConfigError("euler_sample: target length must be >= 1");
  if (sampler.n_steps < 1) throw ConfigError("euler_sample: n_steps must be >= 1");
  Tensor<float> x = sampler_noise(tgt_len, feature_dim, sampler.seed);
  const bool guided = weights.w1 != 0.0 || weights.w2 != 0.0;
  const float h = 1.0f / static_cast<float>(sampler.n_steps);
  for (std::size_t k = 0; k < sampler.n_steps; ++k) {
    const double t = static_cast<double>(k) / static_cast<double>(sampler.n_steps);
    std::vector<float> v = velocity(x, t, {false, false});
    if (guided) {
      const std::vector<float> v_uncond = velocity(x, t, {true, true});
      const std::vector<float> v_cd = velocity(x, t, {true, false});
      v = cfg_combine<float>(v, v_uncond, v_cd, weights);
    }
    if (v.size() != x.size()) throw ConfigError("euler_sample: velocity has wrong size");
    for (std::size_t i = 0; i < x.size(); ++i) x.data[i] += h * v[i];
  }
  return x;
}

template <typename S>
ToyFlowModel<S>::ToyFlowModel(ParameterStore<S>& store, std::size_t dim, std::size_t hidden,
                              std::size_t time_dim, std::uint64_t seed)
    : time_dim_(time_dim) {
  fc1_ = Linear<S>::make(store, "toy.fc1", dim + time_dim, hidden, seed);
  fc2_ = Linear<S>::make(store, "toy.fc2", hidden, hidden, seed);
  fc3_ = Linear<S>::make(store, "toy.fc3", hidden, dim, seed);
}

template <typename S>
Var<S> ToyFlowModel<S>::velocity(Tape<S>& tape, Var<S> x, std::span<const double> t) const {
  if (t.size() != x.rows()) throw ConfigError("toy flow: one time per row required");
  std::vector<S> temb(x.rows() * time_dim_);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    // Low-frequency features: the toy field is smooth in t.
    const auto row = TimeEmbedding<S>::sinusoid(t[i] / 1000.0 * 8.0, time_dim_);
    std::copy(row.begin(), row.end(), temb.begin() + i * time_dim_);
  }
  const Var<S> in = concat_cols(x, tape.constant(x.rows(), time_dim_, std::move(temb)));
  return fc3_(tape, silu(fc2_(tape, silu(fc1_(tape, in)))));
}

template FlowDraw<float> draw_flow<float>(Rng&, std::size_t, std::size_t);
template FlowDraw<double> draw_flow<double>(Rng&, std::size_t, std::size_t);
template BatchFlowDraw<float> draw_flow_batch<float>(Rng&, std::size_t, std::size_t);
template BatchFlowDraw<double> draw_flow_batch<double>(Rng&, std::size_t, std::size_t);
template Var<float> cfm_loss<float>(Tape<float>&, const TapeVelocity<float>&, const Tensor<float>&,
                                    const FlowDraw<float>&);
template Var<double> cfm_loss<double>(Tape<double>&, const TapeVelocity<double>&,
                                      const Tensor<double>&, const FlowDraw<double>&);
template Var<float> cfm_loss<float>(Tape<float>&, const TapeVelocity<float>&, const Tensor<float>&,
                                    Rng&);
template Var<double> cfm_loss<double>(Tape<double>&, const TapeVelocity<double>&,
                                      const Tensor<double>&, Rng&);
template std::vector<float> cfg_combine<float>(std::span<const float>, std::span<const float>,
                                               std::span<const float>, GuidanceWeights);
template std::vector<double> cfg_combine<double>(std::span<const double>, std::span<const double>,
                                                 std::span<const double>, GuidanceWeights);
template class ToyFlowModel<float>;
template class ToyFlowModel<double>;

}  // namespace cosynorm
