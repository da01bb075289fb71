#include "cosynorm/selftest.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>

#include "cosynorm/ctc.hpp"
#include "cosynorm/decoder.hpp"
#include "cosynorm/duration.hpp"
#include "cosynorm/encoder.hpp"
#include "cosynorm/flow.hpp"
#include "cosynorm/gradcheck.hpp"
#include "cosynorm/nn.hpp"
#include "cosynorm/rng.hpp"

namespace cosynorm {

namespace {

constexpr double kGradTolerance = 1e-4;
constexpr double kGradEps = 1e-4;

std::vector<double> normals(Rng& rng, std::size_t n, double sd = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = sd * rng.normal();
  return v;
}

Tensor<double> random_tensor(Rng& rng, std::size_t rows, std::size_t cols, double sd = 1.0) {
  Tensor<double> t(rows, cols);
  t.data = normals(rng, rows * cols, sd);
  return t;
}

/// sum(x * R) for a fixed random R: a scalar that touches every output entry.
Var<double> project(Tape<double>& tape, Var<double> x, std::uint64_t seed) {
  Rng rng(seed, 0x9e01);
  return sum_all(mul(x, tape.constant(random_tensor(rng, x.rows(), x.cols()))));
}

SuiteResult grad_result(const std::string& name, const GradCheckReport& rep) {
  SuiteResult r;
  r.name = "gradient/" + name;
  r.max_error = rep.max_rel_error;
  r.tolerance = kGradTolerance;
  r.passed = rep.max_rel_error < kGradTolerance;
  std::ostringstream d;
  d << rep.checked << " coordinates, worst " << rep.worst_param << "[" << rep.worst_index
    << "] analytic " << rep.analytic << " numeric " << rep.numeric;
  r.detail = d.str();
  return r;
}

EncoderConfig small_encoder() {
  EncoderConfig c;
  c.input_dim = 6;
  c.model_dim = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.frontend_stride = 2;
  c.vocab_size = 4;
  c.ffn_mult = 1;
  return c;
}

DecoderConfig small_decoder() {
  DecoderConfig c;
  c.feature_dim = 6;
  c.model_dim = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.time_emb_dim = 8;
  c.speaker_dim = 4;
  c.content_dim = 8;
  c.ffn_mult = 1;
  return c;
}

DurationConfig small_duration() {
  DurationConfig c;
  c.content_dim = 8;
  c.model_dim = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.time_emb_dim = 8;
  c.speaker_dim = 4;
  c.ffn_mult = 1;
  return c;
}

}  // namespace

SuiteResult ctc_oracle_suite(std::size_t n_lattices, std::uint64_t seed) {
  SuiteResult r;
  r.name = "ctc_oracle";
  r.tolerance = 1e-6;
  r.passed = true;
  Rng rng(seed, 0xc7c);
  std::size_t compared = 0;
  for (std::size_t n = 0; n < n_lattices; ++n) {
    const std::size_t frames = 1 + rng.below(6);
    const std::size_t vocab = 2 + rng.below(3);
    const std::size_t len = rng.below(4);
    LabelSeq labels;
    for (std::size_t i = 0; i < len; ++i) labels.push_back(1 + static_cast<int>(rng.below(vocab - 1)));
    std::vector<double> lattice(frames * vocab);
    for (std::size_t t = 0; t < frames; ++t) {
      double mx = -1e300, z = 0.0;
      for (std::size_t v = 0; v < vocab; ++v) mx = std::max(mx, lattice[t * vocab + v] = 2.0 * rng.normal());
      for (std::size_t v = 0; v < vocab; ++v) z += std::exp(lattice[t * vocab + v] - mx);
      for (std::size_t v = 0; v < vocab; ++v) lattice[t * vocab + v] -= mx + std::log(z);
    }
    const double fb = ctc_loss<double>(lattice, frames, vocab, labels).loss;
    const double bf = ctc_brute_force(lattice, frames, vocab, labels);
    if (std::isinf(fb) || std::isinf(bf)) {
      if (fb != bf) {
        r.passed = false;
        r.detail = "feasibility mismatch";
      }
      continue;
    }
    ++compared;
    r.max_error = std::max(r.max_error, std::abs(fb - bf));
  }
  if (r.max_error >= r.tolerance) r.passed = false;
  if (r.detail.empty()) r.detail = std::to_string(compared) + " feasible lattices compared";
  return r;
}

std::vector<SuiteResult> gradient_suite(std::uint64_t seed) {
  std::vector<SuiteResult> out;
  Rng data_rng(seed, 0x9d);
  const Tensor<double> source = random_tensor(data_rng, 7, 6);
  const Tensor<double> target = random_tensor(data_rng, 5, 6);
  const std::vector<double> speaker = normals(data_rng, 4, 0.5);
  const double t = 0.37;

  {
    ParameterStore<double> store;
    const Encoder<double> enc(store, "enc", small_encoder(), seed);
    randomize_parameters(store, seed, 0.5);
    out.push_back(grad_result("encoder", finite_diff_check(store, [&](Tape<double>& tape) {
      return project(tape, enc.encode(tape, source), seed);
    }, kGradEps)));
  }
  {
    ParameterStore<double> store;
    const Encoder<double> enc(store, "enc", small_encoder(), seed);
    randomize_parameters(store, seed + 1, 0.5);
    const LabelSeq labels = {1, 3, 2};
    out.push_back(grad_result("ctc", finite_diff_check(store, [&](Tape<double>& tape) {
      return ctc_loss(enc.ctc_head(tape, enc.encode(tape, source)), labels);
    }, kGradEps)));
  }
  {
    ParameterStore<double> store;
    const AdaLN<double> block = AdaLN<double>::make(store, "adaln", 8, 8, seed);
    const FeedForward<double> ffn = FeedForward<double>::make(store, "ffn", 8, 8, seed);
    const TimeEmbedding<double> time = TimeEmbedding<double>::make(store, "time", 8, seed);
    randomize_parameters(store, seed + 2, 0.5);
    const Tensor<double> x = random_tensor(data_rng, 5, 8);
    out.push_back(grad_result("adaln", finite_diff_check(store, [&](Tape<double>& tape) {
      const Var<double> cond = silu(time(tape, t));
      return project(tape, block(tape, tape.constant(x), cond, [&](Var<double> u) { return ffn(tape, u); }),
                     seed);
    }, kGradEps)));
  }
  {
    ParameterStore<double> store;
    const Decoder<double> dec(store, "dec", small_decoder(), seed);
    randomize_parameters(store, seed + 3, 0.5);
    const Tensor<double> content = random_tensor(data_rng, 4, 8);
    out.push_back(grad_result("decoder", finite_diff_check(store, [&](Tape<double>& tape) {
      return project(tape, dec.forward(tape, tape.constant(target), t, tape.constant(content), speaker,
                                       ConditionMask{}),
                     seed);
    }, kGradEps)));
  }
  {
    ParameterStore<double> store;
    const Encoder<double> enc(store, "enc", small_encoder(), seed);
    const Decoder<double> dec(store, "dec", small_decoder(), seed);
    randomize_parameters(store, seed + 4, 0.5);
    Rng draw_rng(seed, 0xd4a);
    const FlowDraw<double> draw = draw_flow<double>(draw_rng, target.rows(), target.cols());
    out.push_back(grad_result("cfm", finite_diff_check(store, [&](Tape<double>& tape) {
      const Var<double> content = enc.encode(tape, source);
      const TapeVelocity<double> v = [&](Tape<double>& tp, Var<double> x, double time) {
        return dec.forward(tp, x, time, content, speaker, ConditionMask{});
      };
      return cfm_loss(tape, v, target, draw);
    }, kGradEps)));
  }
  {
    ParameterStore<double> store;
    const DurationPredictor<double> dur(store, "dur", small_duration(), seed);
    randomize_parameters(store, seed + 5, 0.5);
    const Tensor<double> content = random_tensor(data_rng, 4, 8);
    out.push_back(grad_result("duration", finite_diff_check(store, [&](Tape<double>& tape) {
      return dur.cfm_loss(tape, tape.constant(content), speaker, 0.77, -0.4, t);
    }, kGradEps)));
  }
  return out;
}

SuiteResult rope_suite(std::size_t n_draws, std::uint64_t seed) {
  SuiteResult r;
  r.name = "rope_shift";
  r.tolerance = 1e-6;
  Rng rng(seed, 0x207e);
  for (const std::size_t dim : {2u, 4u, 8u, 16u}) {
    for (std::size_t n = 0; n < n_draws; ++n) {
      Tape<double> tape(false);
      const Var<double> q = tape.constant(1, dim, normals(rng, dim));
      const Var<double> k = tape.constant(1, dim, normals(rng, dim));
      const double p1 = rng.uniform(-50.0, 50.0), p2 = rng.uniform(-50.0, 50.0);
      const double d = rng.uniform(-100.0, 100.0);
      auto inner = [&](double a, double b) {
        const std::vector<double> pa{a}, pb{b};
        const auto qa = rope(q, pa, 1).value();
        const auto kb = rope(k, pb, 1).value();
        double s = 0.0;
        for (std::size_t i = 0; i < dim; ++i) s += qa[i] * kb[i];
        return s;
      };
      r.max_error = std::max(r.max_error, std::abs(inner(p1, p2) - inner(p1 + d, p2 + d)));
    }
  }
  r.passed = r.max_error < r.tolerance;
  r.detail = std::to_string(4 * n_draws) + " draws over head dims 2, 4, 8, 16";
  return r;
}

}  // namespace cosynorm
