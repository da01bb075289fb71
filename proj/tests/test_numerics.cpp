#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "cosynorm/autodiff.hpp"
#include "cosynorm/gradcheck.hpp"
#include "cosynorm/io.hpp"
#include "cosynorm/nn.hpp"
#include "support.hpp"

using namespace cosynorm;
using testing::normals;
using testing::random_tensor;

namespace {

/// sum(x * R) with a fixed random R.
Var<double> project(Tape<double>& tape, Var<double> x, std::uint64_t seed = 11) {
  Rng rng(seed, 1);
  return sum_all(mul(x, tape.constant(random_tensor(rng, x.rows(), x.cols()))));
}

double op_grad_error(std::size_t ra, std::size_t ca, std::size_t rb, std::size_t cb,
                     const std::function<Var<double>(Var<double>, Var<double>)>& op) {
  ParameterStore<double> store;
  auto& a = store.add("a", {ra, ca});
  auto& b = store.add("b", {rb, cb});
  randomize_parameters(store, 5, 1.0);
  return finite_diff_check(store, [&](Tape<double>& tape) {
    return project(tape, op(tape.param(a), tape.param(b)));
  }, 1e-4).max_rel_error;
}

}  // namespace

TEST_SUITE("numerics") {

TEST_CASE("tensor shape bookkeeping") {
  Tensor<float> t(3, 4, 1.5f);
  CHECK(t.size() == 12);
  CHECK(t.rows() == 3);
  CHECK(t.cols() == 4);
  t(2, 3) = 7.0f;
  CHECK(t.row(2)[3] == 7.0f);
  CHECK(Tensor<float>(std::vector<std::size_t>{5}).rows() == 1);
  CHECK(Tensor<float>::count({2, 3, 4}) == 24);
}

TEST_CASE("parameter names are unique per store") {
  ParameterStore<float> store;
  store.add("w", {2, 2});
  CHECK_THROWS_AS(store.add("w", {1, 1}), ConfigError);
  CHECK(store.find("w") != nullptr);
  CHECK(store.find("nope") == nullptr);
  CHECK(store.scalar_count() == 4);
}

TEST_CASE("every differentiable op passes the finite-difference check") {
  const double tol = 1e-4;
  CHECK(op_grad_error(3, 4, 3, 4, [](auto a, auto b) { return add(a, b); }) < tol);
  CHECK(op_grad_error(3, 4, 3, 4, [](auto a, auto b) { return sub(a, b); }) < tol);
  CHECK(op_grad_error(3, 4, 3, 4, [](auto a, auto b) { return mul(a, b); }) < tol);
  CHECK(op_grad_error(3, 4, 1, 1, [](auto a, auto) { return scale(a, 1.7); }) < tol);
  CHECK(op_grad_error(3, 4, 1, 1, [](auto a, auto) { return add_scalar(a, -0.3); }) < tol);
  CHECK(op_grad_error(3, 4, 1, 4, [](auto a, auto b) { return add_row(a, b); }) < tol);
  CHECK(op_grad_error(3, 4, 1, 4, [](auto a, auto b) { return mul_row(a, b); }) < tol);
  CHECK(op_grad_error(1, 4, 1, 1, [](auto a, auto) { return broadcast_rows(a, 3); }) < tol);
  CHECK(op_grad_error(3, 4, 1, 1, [](auto a, auto) { return silu(a); }) < tol);
  CHECK(op_grad_error(3, 4, 4, 2, [](auto a, auto b) { return matmul(a, b); }) < tol);
  CHECK(op_grad_error(3, 4, 1, 1, [](auto a, auto) { return transpose(a); }) < tol);
  CHECK(op_grad_error(3, 4, 3, 2, [](auto a, auto b) { return concat_cols(a, b); }) < tol);
  CHECK(op_grad_error(3, 6, 1, 1, [](auto a, auto) { return slice_cols(a, 2, 3); }) < tol);
  CHECK(op_grad_error(7, 3, 1, 1, [](auto a, auto) { return conv_frames(a, 3, 2); }) < tol);
  CHECK(op_grad_error(5, 3, 1, 1, [](auto a, auto) { return mean_rows(a); }) < tol);
  CHECK(op_grad_error(5, 3, 1, 1, [](auto a, auto) { return sum_all(a); }) < tol);
  CHECK(op_grad_error(5, 3, 1, 1, [](auto a, auto) { return mean_all(a); }) < tol);
  CHECK(op_grad_error(3, 4, 1, 1, [](auto a, auto) {
    return mse(a, std::vector<double>{0.1, -0.2, 0.3, 0.4, 0.5, -0.6, 0.7, 0.8, 0.9, 1.0, -1.1, 1.2});
  }) < tol);
  CHECK(op_grad_error(3, 6, 1, 1, [](auto a, auto) { return layer_norm(a); }) < tol);
  CHECK(op_grad_error(3, 5, 1, 1, [](auto a, auto) { return softmax_rows(a); }) < tol);
  CHECK(op_grad_error(3, 5, 1, 1, [](auto a, auto) { return log_softmax_rows(a); }) < tol);
  CHECK(op_grad_error(4, 8, 1, 1, [](auto a, auto) {
    const std::vector<double> pos{0.0, 0.5, 2.25, 7.0};
    return rope(a, pos, 2);
  }) < tol);
  CHECK(op_grad_error(3, 8, 5, 8, [](auto a, auto b) { return attention(a, b, mul(b, b), 2); }) < tol);
}

TEST_CASE("affine gradients match finite differences") {
  ParameterStore<double> store;
  auto& x = store.add("x", {3, 4});
  auto& w = store.add("w", {4, 5});
  auto& b = store.add("b", {1, 5});
  randomize_parameters(store, 6, 1.0);
  const auto rep = finite_diff_check(store, [&](Tape<double>& tape) {
    return project(tape, affine(tape.param(x), tape.param(w), tape.param(b)));
  }, 1e-4);
  CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("detach blocks gradient flow") {
  ParameterStore<double> store;
  auto& a = store.add("a", {2, 2});
  a.value.data = {1, 2, 3, 4};
  Tape<double> tape;
  const Var<double> x = tape.param(a);
  tape.backward(sum_all(add(detach(x), detach(x))));
  tape.accumulate_param_grads();
  CHECK(std::all_of(a.grad.begin(), a.grad.end(), [](double g) { return g == 0.0; }));
}

TEST_CASE("rope at position zero is the identity") {
  Rng rng(1, 2);
  Tape<double> tape(false);
  const auto x = normals(rng, 8);
  const std::vector<double> pos{0.0};
  const auto y = rope(tape.constant(1, 8, x), pos, 2).value();
  for (std::size_t i = 0; i < 8; ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("rope preserves norms and matches explicit pair rotations") {
  Rng rng(1, 3);
  for (const std::size_t d : {2u, 4u, 8u, 16u}) {
    for (int k = 0; k < 20; ++k) {
      Tape<double> tape(false);
      const auto x = normals(rng, d);
      const double p = rng.uniform(-300.0, 300.0);
      const std::vector<double> pos{p};
      const auto y = rope(tape.constant(1, d, x), pos, 1).value();
      const auto ref = testing::rotate_pairs(x, p);
      double ny = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-9));
        ny += y[i] * y[i];
      }
      CHECK(std::sqrt(ny) == doctest::Approx(std::sqrt(testing::dot(x, x))).epsilon(1e-9));
    }
  }
}

TEST_CASE("rope inner products depend only on the position offset") {
  Rng rng(4, 4);
  for (const std::size_t d : {2u, 4u, 8u, 16u}) {
    for (int k = 0; k < 100; ++k) {
      const auto q = normals(rng, d), kk = normals(rng, d);
      const double p1 = rng.uniform(-40, 40), p2 = rng.uniform(-40, 40), off = rng.uniform(-80, 80);
      Tape<double> tape(false);
      auto rot = [&](const std::vector<double>& v, double p) {
        const std::vector<double> pos{p};
        const auto out = rope(tape.constant(1, d, v), pos, 1).value();
        return std::vector<double>(out.begin(), out.end());
      };
      const double a = testing::dot(rot(q, p1), rot(kk, p2));
      const double b = testing::dot(rot(q, p1 + off), rot(kk, p2 + off));
      CHECK(std::abs(a - b) < 1e-6);
    }
  }
}

TEST_CASE("rope rejects odd head dimensions and bad bases") {
  Tape<double> tape(false);
  const Var<double> x = tape.constant(2, 6, std::vector<double>(12, 1.0));
  const std::vector<double> pos{0.0, 1.0};
  CHECK_THROWS_AS(rope(x, pos, 2), ConfigError);  // head dim 3
  CHECK_THROWS_AS(rope(x, pos, 1, 1.0), ConfigError);
  CHECK_NOTHROW(rope(x, pos, 3));
}

TEST_CASE("attention with a single key returns its value") {
  Rng rng(2, 1);
  Tape<double> tape(false);
  const Var<double> q = tape.constant(random_tensor(rng, 4, 6));
  const Var<double> k = tape.constant(random_tensor(rng, 1, 6));
  const Tensor<double> vt = random_tensor(rng, 1, 6);
  const auto out = attention(q, k, tape.constant(vt), 2).to_tensor();
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 6; ++c) CHECK(out(r, c) == doctest::Approx(vt(0, c)).epsilon(1e-12));
}

TEST_CASE("attention over identical keys averages the values") {
  Rng rng(2, 2);
  Tape<double> tape(false);
  const auto key_row = normals(rng, 4);
  std::vector<double> keys;
  for (int i = 0; i < 5; ++i) keys.insert(keys.end(), key_row.begin(), key_row.end());
  const Tensor<double> vt = random_tensor(rng, 5, 4);
  const auto out = attention(tape.constant(random_tensor(rng, 2, 4)), tape.constant(5, 4, keys),
                             tape.constant(vt), 1)
                       .to_tensor();
  for (std::size_t c = 0; c < 4; ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < 5; ++r) mean += vt(r, c) / 5.0;
    CHECK(out(0, c) == doctest::Approx(mean).epsilon(1e-12));
  }
}

TEST_CASE("attention is invariant to permuting key, value and position triples") {
  ParameterStore<double> store;
  const auto mha = MultiHeadAttention<double>::make(store, "mha", 8, 8, 2, 3);
  randomize_parameters(store, 3, 0.5);
  Rng rng(2, 3);
  const Tensor<double> q = random_tensor(rng, 3, 8), mem = random_tensor(rng, 5, 8);
  const std::vector<double> qpos{0, 1, 2}, kpos{0.0, 1.25, 2.5, 3.75, 5.0};
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  Tensor<double> mem_p(5, 8);
  std::vector<double> kpos_p(5);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t c = 0; c < 8; ++c) mem_p(i, c) = mem(perm[i], c);
    kpos_p[i] = kpos[perm[i]];
  }
  Tape<double> tape(false);
  const auto a = mha(tape, tape.constant(q), tape.constant(mem), qpos, kpos).to_tensor();
  const auto b = mha(tape, tape.constant(q), tape.constant(mem_p), qpos, kpos_p).to_tensor();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a.data[i] - b.data[i]) < 1e-6);
}

TEST_CASE("single-head attention output lies within the value range") {
  Rng rng(2, 4);
  Tape<double> tape(false);
  const Tensor<double> vt = random_tensor(rng, 6, 4);
  const auto out = attention(tape.constant(random_tensor(rng, 5, 4, 3.0)),
                             tape.constant(random_tensor(rng, 6, 4, 3.0)), tape.constant(vt), 1)
                       .to_tensor();
  for (std::size_t c = 0; c < 4; ++c) {
    double lo = 1e300, hi = -1e300;
    for (std::size_t r = 0; r < 6; ++r) lo = std::min(lo, vt(r, c)), hi = std::max(hi, vt(r, c));
    for (std::size_t r = 0; r < 5; ++r) {
      CHECK(out(r, c) >= lo - 1e-12);
      CHECK(out(r, c) <= hi + 1e-12);
    }
  }
}

TEST_CASE("attention rejects empty keys and mismatched values") {
  Tape<double> tape(false);
  const Var<double> q = tape.constant(2, 4, std::vector<double>(8, 1.0));
  const Var<double> k0 = tape.constant(0, 4, {});
  CHECK_THROWS_AS(attention(q, k0, k0, 1), ConfigError);
  const Var<double> k = tape.constant(3, 4, std::vector<double>(12, 1.0));
  const Var<double> v = tape.constant(2, 4, std::vector<double>(8, 1.0));
  CHECK_THROWS_AS(attention(q, k, v, 1), ConfigError);
}

TEST_CASE("zero-initialized AdaLN is exactly the identity") {
  ParameterStore<float> store;
  const auto block = AdaLN<float>::make(store, "ada", 8, 6, 1);
  const auto ffn = FeedForward<float>::make(store, "ffn", 8, 16, 1);
  Rng rng(3, 1);
  const Tensor<float> x = testing::random_tensor_f(rng, 5, 8);
  Tape<float> tape(false);
  const Var<float> cond = tape.constant(1, 6, std::vector<float>{0.3f, -1.f, 2.f, 0.f, 1.f, 5.f});
  const auto y = block(tape, tape.constant(x), cond, [&](Var<float> u) { return ffn(tape, u); });
  CHECK(y.to_tensor() == x);
}

TEST_CASE("layer norm rows have zero mean and unit variance") {
  Rng rng(3, 2);
  Tape<double> tape(false);
  const auto y = layer_norm(tape.constant(random_tensor(rng, 4, 16, 5.0))).to_tensor();
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0.0, v = 0.0;
    for (const double x : y.row(r)) m += x / 16.0;
    for (const double x : y.row(r)) v += (x - m) * (x - m) / 16.0;
    CHECK(std::abs(m) < 1e-5);
    CHECK(std::abs(v - 1.0) < 1e-5);
  }
}

TEST_CASE("AdaLN block gradients match finite differences") {
  ParameterStore<double> store;
  const auto block = AdaLN<double>::make(store, "ada", 8, 8, 1);
  const auto mha = MultiHeadAttention<double>::make(store, "attn", 8, 8, 2, 1);
  const auto time = TimeEmbedding<double>::make(store, "time", 8, 1);
  randomize_parameters(store, 9, 0.5);
  Rng rng(3, 3);
  const Tensor<double> x = random_tensor(rng, 4, 8);
  const auto pos = index_positions(4);
  const auto rep = finite_diff_check(store, [&](Tape<double>& tape) {
    const Var<double> cond = silu(time(tape, 0.42));
    return project(tape, block(tape, tape.constant(x), cond,
                               [&](Var<double> u) { return mha(tape, u, u, pos, pos); }));
  }, 1e-4);
  CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("time embedding is a deterministic function of t") {
  ParameterStore<float> store;
  const auto emb = TimeEmbedding<float>::make(store, "t", 16, 3);
  Tape<float> tape(false);
  const auto a = emb(tape, 0.3).to_tensor();
  const auto b = emb(tape, 0.3).to_tensor();
  const auto c = emb(tape, 0.31).to_tensor();
  CHECK(a == b);
  CHECK_FALSE(a == c);
}

TEST_CASE("finite_diff_check on closed-form functions") {
  SUBCASE("quadratic") {
    const std::vector<double> x{3.0}, g{6.0};
    const auto rep = finite_diff_check([](std::span<const double> p) { return p[0] * p[0]; }, x, g, 1e-4);
    CHECK(rep.max_rel_error < 1e-6);
  }
  SUBCASE("linear") {
    const std::vector<double> x{0.5, -2.0, 4.0}, g{1.5, -3.0, 0.25};
    const auto rep = finite_diff_check(
        [&](std::span<const double> p) { return 1.5 * p[0] - 3.0 * p[1] + 0.25 * p[2] + 2.0; }, x, g, 1e-4);
    CHECK(rep.max_rel_error < 1e-9);
  }
  SUBCASE("two-layer MLP") {
    ParameterStore<double> store;
    const auto l1 = Linear<double>::make(store, "l1", 6, 8, 1);
    const auto l2 = Linear<double>::make(store, "l2", 8, 3, 1);
    randomize_parameters(store, 2, 0.7);
    Rng rng(3, 4);
    const Tensor<double> x = random_tensor(rng, 4, 6);
    const auto rep = finite_diff_check(store, [&](Tape<double>& tape) {
      return project(tape, l2(tape, silu(l1(tape, tape.constant(x)))));
    }, 1e-4);
    CHECK(rep.max_rel_error < 1e-4);
    CHECK(rep.checked == store.scalar_count());
  }
  SUBCASE("non-finite objective is an error") {
    const std::vector<double> x{0.0}, g{0.0};
    CHECK_THROWS_AS(finite_diff_check([](std::span<const double> p) { return std::log(p[0]); }, x, g, 1e-4),
                    std::domain_error);
  }
}

TEST_CASE("checkpoint bytes round-trip exactly") {
  ParameterStore<float> a, b;
  for (auto* s : {&a, &b}) {
    s->add("enc.w", {3, 4});
    s->add("dec.bias", {1, 5});
  }
  Rng rng(5, 5);
  for (std::size_t p = 0; p < a.size(); ++p)
    for (auto& v : a[p].value.data) v = static_cast<float>(rng.normal());
  a[0].value.data[0] = -0.0f;
  a[0].value.data[1] = 1e-38f;
  const auto dir = testing::scratch_dir("ckpt");
  save_checkpoint(a, dir / "m.bin");
  load_checkpoint(b, dir / "m.bin");
  for (std::size_t p = 0; p < a.size(); ++p) {
    CHECK(std::memcmp(a[p].value.data.data(), b[p].value.data.data(), a[p].value.size() * 4) == 0);
  }
  const auto bytes = read_bytes(dir / "m.bin");
  CHECK(std::string(bytes.begin(), bytes.begin() + 9) == kCheckpointMagic);
  CHECK(decode_checkpoint(bytes) == read_checkpoint(dir / "m.bin"));
  CHECK(encode_checkpoint(decode_checkpoint(bytes)) == bytes);
}

TEST_CASE("checkpoint decoding rejects corrupt input") {
  ParameterStore<float> a;
  a.add("w", {2, 2});
  auto bytes = encode_checkpoint({{"w", {2, 2}, {1, 2, 3, 4}}});
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad_magic), IoError);
  auto truncated = bytes;
  truncated.pop_back();
  CHECK_THROWS_AS(decode_checkpoint(truncated), IoError);
  auto trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS(decode_checkpoint(trailing), IoError);

  const auto dir = testing::scratch_dir("ckpt_mismatch");
  write_bytes(encode_checkpoint({{"v", {2, 2}, {1, 2, 3, 4}}}), dir / "x.bin");
  CHECK_THROWS_AS(load_checkpoint(a, dir / "x.bin"), IoError);
  write_bytes(encode_checkpoint({{"w", {1, 4}, {1, 2, 3, 4}}}), dir / "y.bin");
  CHECK_THROWS_AS(load_checkpoint(a, dir / "y.bin"), IoError);
}

TEST_CASE("feature and label files round-trip") {
  const auto dir = testing::scratch_dir("io");
  Rng rng(6, 6);
  const FeatureSeq f = testing::random_tensor_f(rng, 13, 5);
  write_features(f, dir / "a.bin");
  CHECK(read_features(dir / "a.bin") == f);
  const auto bytes = read_bytes(dir / "a.bin");
  CHECK(bytes.size() == 8 + 13 * 5 * 4);
  CHECK(bytes[0] == 13);
  CHECK(bytes[4] == 5);
  const LabelSeq labels{3, 1, 12, 7};
  write_labels(labels, dir / "a.lab");
  CHECK(read_labels(dir / "a.lab") == labels);
  CHECK_THROWS_AS(read_features(dir / "missing.bin"), IoError);
}

TEST_CASE("forward evaluation is deterministic") {
  ParameterStore<float> store;
  const auto mha = MultiHeadAttention<float>::make(store, "mha", 8, 8, 2, 3);
  Rng rng(7, 7);
  const Tensor<float> x = testing::random_tensor_f(rng, 6, 8);
  const auto pos = index_positions(6);
  Tape<float> t1(false), t2(false);
  CHECK(mha(t1, t1.constant(x), t1.constant(x), pos, pos).to_tensor() ==
        mha(t2, t2.constant(x), t2.constant(x), pos, pos).to_tensor());
}

}  // TEST_SUITE
