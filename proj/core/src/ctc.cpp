#include "cosynorm/ctc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace cosynorm {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

void check_labels(const LabelSeq& labels, std::size_t vocab) {
  if (vocab < 2) throw ConfigError("ctc: vocabulary must include blank and one symbol");
  for (const int s : labels) {
    if (s <= kBlank || static_cast<std::size_t>(s) >= vocab) {
      throw ConfigError("ctc: label " + std::to_string(s) + " outside [1, " +
                        std::to_string(vocab - 1) + "]");
    }
  }
}

}  // namespace

std::size_t ctc_min_frames(const LabelSeq& labels) {
  std::size_t n = labels.size();
  for (std::size_t i = 1; i < labels.size(); ++i)
    if (labels[i] == labels[i - 1]) ++n;
  return n;
}

template <typename S>
CtcResult ctc_loss(std::span<const S> lattice, std::size_t frames, std::size_t vocab,
                   const LabelSeq& labels) {
  check_labels(labels, vocab);
  if (frames == 0) throw ConfigError("ctc: empty lattice");
  if (lattice.size() != frames * vocab) throw ConfigError("ctc: lattice size mismatch");

  CtcResult res;
  res.grad.assign(frames * vocab, 0.0);
  if (frames < ctc_min_frames(labels)) {
    res.loss = std::numeric_limits<double>::infinity();
    res.feasible = false;
    return res;
  }

  // Blank-augmented target: blank, l1, blank, l2, ..., blank.
  const std::size_t n_ext = 2 * labels.size() + 1;
  std::vector<int> ext(n_ext, kBlank);
  for (std::size_t i = 0; i < labels.size(); ++i) ext[2 * i + 1] = labels[i];

  auto lp = [&](std::size_t t, int k) {
    return static_cast<double>(lattice[t * vocab + static_cast<std::size_t>(k)]);
  };
  // A symbol may skip the preceding blank unless it repeats the symbol before it.
  auto can_skip = [&](std::size_t s) {
    return s >= 2 && ext[s] != kBlank && ext[s] != ext[s - 2];
  };

  std::vector<double> alpha(frames * n_ext, kNegInf), beta(frames * n_ext, kNegInf);
  alpha[0] = lp(0, ext[0]);
  if (n_ext > 1) alpha[1] = lp(0, ext[1]);
  for (std::size_t t = 1; t < frames; ++t) {
    for (std::size_t s = 0; s < n_ext; ++s) {
      double a = alpha[(t - 1) * n_ext + s];
      if (s >= 1) a = log_add(a, alpha[(t - 1) * n_ext + s - 1]);
      if (can_skip(s)) a = log_add(a, alpha[(t - 1) * n_ext + s - 2]);
      if (a != kNegInf) alpha[t * n_ext + s] = a + lp(t, ext[s]);
    }
  }
  const std::size_t last = frames - 1;
  beta[last * n_ext + n_ext - 1] = lp(last, ext[n_ext - 1]);
  if (n_ext > 1) beta[last * n_ext + n_ext - 2] = lp(last, ext[n_ext - 2]);
  for (std::size_t t = last; t-- > 0;) {
    for (std::size_t s = 0; s < n_ext; ++s) {
      double b = beta[(t + 1) * n_ext + s];
      if (s + 1 < n_ext) b = log_add(b, beta[(t + 1) * n_ext + s + 1]);
      if (s + 2 < n_ext && can_skip(s + 2)) b = log_add(b, beta[(t + 1) * n_ext + s + 2]);
      if (b != kNegInf) beta[t * n_ext + s] = b + lp(t, ext[s]);
    }
  }

  double log_p = alpha[last * n_ext + n_ext - 1];
  if (n_ext > 1) log_p = log_add(log_p, alpha[last * n_ext + n_ext - 2]);
  res.loss = -log_p;

  // alpha and beta both include the emission at t, hence the extra -lp(t, k).
  std::vector<double> occ(vocab);
  for (std::size_t t = 0; t < frames; ++t) {
    std::fill(occ.begin(), occ.end(), kNegInf);
    for (std::size_t s = 0; s < n_ext; ++s) {
      const auto k = static_cast<std::size_t>(ext[s]);
      occ[k] = log_add(occ[k], alpha[t * n_ext + s] + beta[t * n_ext + s]);
    }
    for (std::size_t k = 0; k < vocab; ++k) {
      if (occ[k] == kNegInf) continue;
      res.grad[t * vocab + k] = -std::exp(occ[k] - lp(t, static_cast<int>(k)) - log_p);
    }
  }
  return res;
}

double ctc_brute_force(std::span<const double> lattice, std::size_t frames, std::size_t vocab,
                       const LabelSeq& labels) {
  check_labels(labels, vocab);
  if (lattice.size() != frames * vocab) throw ConfigError("ctc: lattice size mismatch");
  double paths = 1.0;
  for (std::size_t t = 0; t < frames; ++t) paths *= static_cast<double>(vocab);
  if (paths > 1e6) throw std::invalid_argument("ctc_brute_force: V^T exceeds 1e6 paths");

  const auto n_paths = static_cast<std::size_t>(paths);
  std::vector<std::size_t> path(frames, 0);
  double total = kNegInf;
  LabelSeq collapsed;
  for (std::size_t idx = 0; idx < n_paths; ++idx) {
    std::size_t rest = idx;
    for (std::size_t t = 0; t < frames; ++t) {
      path[t] = rest % vocab;
      rest /= vocab;
    }
    collapsed.clear();
    int prev = -1;
    for (const std::size_t k : path) {
      const int sym = static_cast<int>(k);
      if (sym != prev && sym != kBlank) collapsed.push_back(sym);
      prev = sym;
    }
    if (collapsed != labels) continue;
    double lp = 0.0;
    for (std::size_t t = 0; t < frames; ++t) lp += lattice[t * vocab + path[t]];
    total = log_add(total, lp);
  }
  return -total;
}

template <typename S>
LabelSeq ctc_greedy_decode(std::span<const S> lattice, std::size_t frames, std::size_t vocab) {
  LabelSeq out;
  int prev = -1;
  for (std::size_t t = 0; t < frames; ++t) {
    const auto row = lattice.subspan(t * vocab, vocab);
    const int best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    if (best != prev && best != kBlank) out.push_back(best);
    prev = best;
  }
  return out;
}

template <typename S>
Var<S> ctc_loss(Var<S> log_probs, const LabelSeq& labels, bool* feasible) {
  const std::size_t frames = log_probs.rows(), vocab = log_probs.cols();
  CtcResult r = ctc_loss<S>(log_probs.value(), frames, vocab, labels);
  if (feasible != nullptr) *feasible = r.feasible;
  Tape<S>& t = *log_probs.tape;
  if (!r.feasible) {
    return t.constant(1, 1, {std::numeric_limits<S>::infinity()});
  }
  const int o = static_cast<int>(t.size());
  return t.push(1, 1, {static_cast<S>(r.loss)}, {log_probs},
                [log_probs, grad = std::move(r.grad), o](Tape<S>& t) {
                  const S g = t.node(o).grad[0];
                  auto& gl = t.grad(log_probs.id);
                  for (std::size_t i = 0; i < grad.size(); ++i) gl[i] += g * static_cast<S>(grad[i]);
                });
}

template CtcResult ctc_loss<float>(std::span<const float>, std::size_t, std::size_t,
                                   const LabelSeq&);
template CtcResult ctc_loss<double>(std::span<const double>, std::size_t, std::size_t,
                                    const LabelSeq&);
template LabelSeq ctc_greedy_decode<float>(std::span<const float>, std::size_t, std::size_t);
template LabelSeq ctc_greedy_decode<double>(std::span<const double>, std::size_t, std::size_t);
template Var<float> ctc_loss<float>(Var<float>, const LabelSeq&, bool*);
template Var<double> ctc_loss<double>(Var<double>, const LabelSeq&, bool*);

}  // namespace cosynorm
