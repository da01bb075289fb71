#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cosynorm/autodiff.hpp"
#include "cosynorm/tensor.hpp"

namespace cosynorm {

/// Content symbols in [1, V-1]; 0 is the CTC blank.
using LabelSeq = std::vector<int>;

inline constexpr int kBlank = 0;

struct CtcResult {
  double loss = 0.0;
  /// d loss / d lattice, T x V. All zero when infeasible.
  std::vector<double> grad;
  bool feasible = true;
};

/// Minimum frame count for `labels`: one per symbol plus a blank between repeats.
std::size_t ctc_min_frames(const LabelSeq& labels);

/// Negative log-likelihood of `labels` under a T x V lattice of per-frame log
/// probabilities, by log-space forward-backward. Infeasible targets give
/// +infinity, a zero gradient and feasible == false.
template <typename S>
CtcResult ctc_loss(std::span<const S> lattice, std::size_t frames, std::size_t vocab,
                   const LabelSeq& labels);

/// Reference loss by enumerating all V^T frame paths. Throws when V^T > 1e6.
double ctc_brute_force(std::span<const double> lattice, std::size_t frames, std::size_t vocab,
                       const LabelSeq& labels);

/// Per-frame argmax, collapse repeats, drop blanks.
template <typename S>
LabelSeq ctc_greedy_decode(std::span<const S> lattice, std::size_t frames, std::size_t vocab);

/// Differentiable CTC loss on a tape. Returns the 1x1 loss node; an infeasible
/// target yields +infinity with no gradient and sets *feasible to false.
template <typename S>
Var<S> ctc_loss(Var<S> log_probs, const LabelSeq& labels, bool* feasible = nullptr);

}  // namespace cosynorm
