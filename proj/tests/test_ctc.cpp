#include <doctest.h>

#include <cmath>
#include <limits>

#include "cosynorm/ctc.hpp"
#include "cosynorm/gradcheck.hpp"
#include "support.hpp"

using namespace cosynorm;

TEST_SUITE("ctc") {

TEST_CASE("single frame, single label") {
  const std::vector<double> lat{std::log(0.5), std::log(0.5)};
  CHECK(ctc_loss<double>(lat, 1, 2, {1}).loss == doctest::Approx(-std::log(0.5)).epsilon(1e-12));
}

TEST_CASE("two uniform frames, one label: three of four paths") {
  const std::vector<double> lat(4, std::log(0.5));
  CHECK(ctc_loss<double>(lat, 2, 2, {1}).loss == doctest::Approx(-std::log(0.75)).epsilon(1e-12));
  CHECK(testing::enumerate_ctc(lat, 2, 2, {1}) == doctest::Approx(-std::log(0.75)).epsilon(1e-12));
}

TEST_CASE("repeated label without room for a blank is infeasible") {
  const std::vector<double> lat{std::log(0.5), std::log(0.5)};
  const CtcResult r = ctc_loss<double>(lat, 1, 2, {1, 1});
  CHECK(std::isinf(r.loss));
  CHECK(r.loss > 0);
  CHECK_FALSE(r.feasible);
  for (const double g : r.grad) CHECK(g == 0.0);
  CHECK(ctc_min_frames({1, 1}) == 3);
  CHECK(ctc_min_frames({1, 2, 2, 3}) == 5);
  CHECK(ctc_min_frames({}) == 0);
}

TEST_CASE("empty labels: only the all-blank path") {
  Rng rng(1, 1);
  const auto lat = testing::random_lattice(rng, 2, 3);
  CHECK(ctc_loss<double>(lat, 2, 3, {}).loss == doctest::Approx(-(lat[0] + lat[3])).epsilon(1e-12));
  CHECK(ctc_brute_force(lat, 2, 3, {}) == doctest::Approx(-(lat[0] + lat[3])).epsilon(1e-12));
}

TEST_CASE("deterministic lattice on a valid path has zero loss") {
  const double neg = -std::numeric_limits<double>::infinity();
  // frames: a, blank, b
  const std::vector<double> lat{neg, 0.0, neg, 0.0, neg, neg, neg, neg, 0.0};
  CHECK(ctc_loss<double>(lat, 3, 3, {1, 2}).loss == doctest::Approx(0.0));
  CHECK(ctc_brute_force(lat, 3, 3, {1, 2}) == doctest::Approx(0.0));
}

TEST_CASE("forward-backward equals independent path enumeration on the small grid") {
  Rng rng(2, 2);
  double worst = 0.0;
  std::size_t compared = 0;
  for (int n = 0; n < 200; ++n) {
    const std::size_t frames = 1 + rng.below(6), vocab = 2 + rng.below(3), len = rng.below(4);
    LabelSeq labels;
    for (std::size_t i = 0; i < len; ++i) labels.push_back(1 + static_cast<int>(rng.below(vocab - 1)));
    const auto lat = testing::random_lattice(rng, frames, vocab);
    const double fb = ctc_loss<double>(lat, frames, vocab, labels).loss;
    const double oracle = testing::enumerate_ctc(lat, frames, vocab, labels);
    if (std::isinf(oracle)) {
      CHECK(std::isinf(fb));
      continue;
    }
    worst = std::max(worst, std::abs(fb - oracle));
    CHECK(std::abs(ctc_brute_force(lat, frames, vocab, labels) - oracle) < 1e-9);
    ++compared;
  }
  CHECK(worst < 1e-6);
  CHECK(compared > 100);
}

TEST_CASE("loss is non-negative") {
  Rng rng(3, 3);
  for (int n = 0; n < 50; ++n) {
    const auto lat = testing::random_lattice(rng, 6, 4);
    CHECK(ctc_loss<double>(lat, 6, 4, {1, 2, 3}).loss >= 0.0);
  }
}

TEST_CASE("lattice gradient through log-softmax matches finite differences") {
  Rng rng(4, 4);
  for (int n = 0; n < 10; ++n) {
    const std::size_t frames = 5, vocab = 4;
    const LabelSeq labels{1, 3, 3};
    const auto logits = testing::normals(rng, frames * vocab);
    auto log_softmax = [&](std::span<const double> z) {
      std::vector<double> out(z.begin(), z.end());
      for (std::size_t t = 0; t < frames; ++t) {
        double s = 0.0;
        for (std::size_t v = 0; v < vocab; ++v) s += std::exp(z[t * vocab + v]);
        for (std::size_t v = 0; v < vocab; ++v) out[t * vocab + v] -= std::log(s);
      }
      return out;
    };
    ParameterStore<double> store;
    auto& p = store.add("z", {frames, vocab});
    p.value.data = logits;
    Tape<double> tape;
    const Var<double> loss = ctc_loss(log_softmax_rows(tape.param(p)), labels);
    tape.backward(loss);
    tape.accumulate_param_grads();
    const auto rep = finite_diff_check(
        [&](std::span<const double> x) { return ctc_loss<double>(log_softmax(x), frames, vocab, labels).loss; },
        logits, p.grad, 1e-4);
    CHECK(rep.max_rel_error < 1e-4);
  }
}

TEST_CASE("tape op reports infeasibility and stays out of the graph") {
  ParameterStore<double> store;
  auto& p = store.add("z", {1, 3});
  Tape<double> tape;
  bool feasible = true;
  const Var<double> loss = ctc_loss(log_softmax_rows(tape.param(p)), {1, 2}, &feasible);
  CHECK_FALSE(feasible);
  CHECK(std::isinf(loss.item()));
}

TEST_CASE("log-space recursion stays finite for extreme lattices") {
  std::vector<double> lat(8 * 3, -800.0);
  for (std::size_t t = 0; t < 8; ++t) lat[t * 3] = 0.0;
  const CtcResult r = ctc_loss<double>(lat, 8, 3, {1, 2});
  CHECK(std::isfinite(r.loss));
  for (const double g : r.grad) CHECK_FALSE(std::isnan(g));
}

TEST_CASE("labels outside the vocabulary are rejected") {
  const std::vector<double> lat(6, std::log(1.0 / 3.0));
  CHECK_THROWS_AS(ctc_loss<double>(lat, 2, 3, {3}), ConfigError);
  CHECK_THROWS_AS(ctc_loss<double>(lat, 2, 3, {0}), ConfigError);
}

TEST_CASE("brute force guards its path count") {
  const std::vector<double> lat(11 * 4, std::log(0.25));
  CHECK_THROWS_AS(ctc_brute_force(lat, 11, 4, {1}), std::invalid_argument);
}

TEST_CASE("greedy decoding collapses repeats then drops blanks") {
  auto onehot = [](const std::vector<int>& ids, std::size_t vocab) {
    std::vector<double> lat(ids.size() * vocab, -5.0);
    for (std::size_t t = 0; t < ids.size(); ++t) lat[t * vocab + static_cast<std::size_t>(ids[t])] = 0.0;
    return lat;
  };
  CHECK(ctc_greedy_decode<double>(onehot({0, 0, 0}, 3), 3, 3).empty());
  CHECK(ctc_greedy_decode<double>(onehot({1, 1, 0, 1}, 3), 4, 3) == LabelSeq{1, 1});
  CHECK(ctc_greedy_decode<double>(onehot({0, 2, 2, 0, 2}, 3), 5, 3) == LabelSeq{2, 2});
}

}  // TEST_SUITE
