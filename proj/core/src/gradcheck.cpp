#include "cosynorm/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cosynorm/rng.hpp"

namespace cosynorm {

namespace {

double checked(double v) {
  if (!std::isfinite(v)) throw std::domain_error("finite_diff_check: objective is not finite");
  return v;
}

double rel_error(double a, double c) {
  return std::abs(a - c) / std::max({std::abs(a), std::abs(c), 1e-8});
}

}  // namespace

GradCheckReport finite_diff_check(const std::function<double(std::span<const double>)>& f,
                                  std::span<const double> x, std::span<const double> analytic,
                                  double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_check: eps must be positive");
  if (analytic.size() != x.size()) throw std::invalid_argument("finite_diff_check: size mismatch");
  GradCheckReport rep;
  std::vector<double> probe(x.begin(), x.end());
  checked(f(probe));
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + eps;
    const double up = checked(f(probe));
    probe[i] = x[i] - eps;
    const double down = checked(f(probe));
    probe[i] = x[i];
    const double numeric = (up - down) / (2.0 * eps);
    const double err = rel_error(analytic[i], numeric);
    ++rep.checked;
    if (err >= rep.max_rel_error) {
      rep.max_rel_error = err;
      rep.worst_index = i;
      rep.analytic = analytic[i];
      rep.numeric = numeric;
    }
  }
  return rep;
}

GradCheckReport finite_diff_check(ParameterStore<double>& store,
                                  const std::function<Var<double>(Tape<double>&)>& loss,
                                  double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_check: eps must be positive");
  store.zero_grad();
  {
    Tape<double> tape;
    const Var<double> l = loss(tape);
    checked(l.item());
    tape.backward(l);
    tape.accumulate_param_grads();
  }
  auto evaluate = [&] {
    Tape<double> tape(false);
    return checked(loss(tape).item());
  };

  GradCheckReport rep;
  for (std::size_t p = 0; p < store.size(); ++p) {
    auto& param = store[p];
    for (std::size_t i = 0; i < param.value.size(); ++i) {
      const double orig = param.value.data[i];
      param.value.data[i] = orig + eps;
      const double up = evaluate();
      param.value.data[i] = orig - eps;
      const double down = evaluate();
      param.value.data[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double err = rel_error(param.grad[i], numeric);
      ++rep.checked;
      if (err >= rep.max_rel_error) {
        rep.max_rel_error = err;
        rep.worst_param = param.name;
        rep.worst_index = i;
        rep.analytic = param.grad[i];
        rep.numeric = numeric;
      }
    }
  }
  return rep;
}

void randomize_parameters(ParameterStore<double>& store, std::uint64_t seed, double bound) {
  for (std::size_t p = 0; p < store.size(); ++p) {
    Rng rng = Rng::for_id(seed, store[p].name);
    for (auto& v : store[p].value.data) v = rng.uniform(-bound, bound);
  }
}

}  // namespace cosynorm
