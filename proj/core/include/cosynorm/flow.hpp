#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "cosynorm/autodiff.hpp"
#include "cosynorm/decoder.hpp"
#include "cosynorm/nn.hpp"
#include "cosynorm/rng.hpp"
#include "cosynorm/tensor.hpp"

namespace cosynorm {

struct GuidanceWeights {
  double w1 = 1.0;  // away from the fully unconditional branch
  double w2 = 1.0;  // away from the content-dropped branch
};

struct SamplerConfig {
  std::size_t n_steps = 32;
  std::uint64_t seed = 0;
};

/// One draw of the linear probability path: x_t = (1 - t) x0 + t x1.
template <typename S>
struct FlowDraw {
  Tensor<S> x0;
  double t = 0.0;
};

template <typename S>
FlowDraw<S> draw_flow(Rng& rng, std::size_t rows, std::size_t cols);

/// Per-row time variant used by batched toy models.
template <typename S>
struct BatchFlowDraw {
  Tensor<S> x0;
  std::vector<double> t;
};

template <typename S>
BatchFlowDraw<S> draw_flow_batch(Rng& rng, std::size_t rows, std::size_t cols);

/// Velocity network evaluated on a tape: (tape, x_t, t) -> velocity.
template <typename S>
using TapeVelocity = std::function<Var<S>(Tape<S>&, Var<S>, double)>;

/// MSE between v(x_t, t) and the path velocity x1 - x0 for a fixed draw.
template <typename S>
Var<S> cfm_loss(Tape<S>& tape, const TapeVelocity<S>& velocity, const Tensor<S>& x1,
                const FlowDraw<S>& draw);

/// Draws (x0, t) from `rng`, then the loss above.
template <typename S>
Var<S> cfm_loss(Tape<S>& tape, const TapeVelocity<S>& velocity, const Tensor<S>& x1, Rng& rng);

/// With probability p_uncond drop both conditions, with p_content_drop drop
/// only the content, otherwise keep both.
ConditionMask sample_condition_mask(Rng& rng, double p_uncond, double p_content_drop);

/// v_full + w1 (v_full - v_uncond) + w2 (v_full - v_content_dropped).
template <typename S>
std::vector<S> cfg_combine(std::span<const S> v_full, std::span<const S> v_uncond,
                           std::span<const S> v_content_dropped, GuidanceWeights weights);

/// Velocity of the current state for one condition branch.
using BranchVelocity =
    std::function<std::vector<float>(const Tensor<float>& x, double t, ConditionMask mask)>;

/// Left-endpoint Euler integration from seeded noise over n_steps uniform
/// steps, combining the (c, s), (null, null) and (null, s) branches with
/// two-way guidance. With w1 == w2 == 0 only the conditional branch runs.
Tensor<float> euler_sample(const BranchVelocity& velocity, std::size_t tgt_len,
                           std::size_t feature_dim, GuidanceWeights weights,
                           const SamplerConfig& sampler);

/// Initial noise used by euler_sample for the given shape and seed.
Tensor<float> sampler_noise(std::size_t rows, std::size_t cols, std::uint64_t seed);

/// Small unconditional MLP velocity field over points in R^dim, used for the
/// Gaussian sanity checks. Rows of x are independent points, each with its own t.
template <typename S>
class ToyFlowModel {
 public:
  ToyFlowModel(ParameterStore<S>& store, std::size_t dim, std::size_t hidden,
               std::size_t time_dim, std::uint64_t seed);

  Var<S> velocity(Tape<S>& tape, Var<S> x, std::span<const double> t) const;

 private:
  std::size_t time_dim_;
  Linear<S> fc1_, fc2_, fc3_;
};

}  // namespace cosynorm
